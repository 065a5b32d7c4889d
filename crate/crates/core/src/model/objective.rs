use serde::{Deserialize, Serialize};

use super::{first_non_finite, SeqModel};
use crate::corpus::ExamplePair;
use crate::crl::{
    combined_loss, contrastive_loss_from_scores, contrastive_score_gradient, CrlConfig,
    LossBreakdown,
};
use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

/// How the likelihood term is formed from a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MleOptions {
    /// Score `reference + EOS` instead of the bare reference.
    pub append_eos: bool,
    /// Divide each example's negative log-likelihood by its token count.
    pub per_token: bool,
}

impl MleOptions {
    /// Negative log-likelihood summed over the reference tokens as given.
    pub const SEQUENCE_SUM: MleOptions = MleOptions {
        append_eos: false,
        per_token: false,
    };
    /// The fine-tuning objective: per-token average over `reference + EOS`.
    pub const TRAINING: MleOptions = MleOptions {
        append_eos: true,
        per_token: true,
    };

    fn target(&self, reference: &TokenSequence) -> TokenSequence {
        if self.append_eos {
            reference.with_eos()
        } else {
            reference.clone()
        }
    }

    fn normalizer(&self, len: usize) -> f64 {
        if self.per_token {
            len as f64
        } else {
            1.0
        }
    }
}

/// Mean over the batch of `-sum_j log p(s_j | D, s_<j)` on the reference.
pub fn mle_loss(model: &SeqModel, batch: &[ExamplePair]) -> Result<f64> {
    mle_loss_with(model, batch, MleOptions::SEQUENCE_SUM)
}

pub fn mle_loss_with(model: &SeqModel, batch: &[ExamplePair], options: MleOptions) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in batch {
        let target = options.target(&pair.reference);
        let lp = model.sequence_log_probs(&pair.document, &target)?;
        total -= lp.iter().sum::<f64>() / options.normalizer(target.len());
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mle loss".into()));
    }
    Ok(loss.max(0.0))
}

/// One training example with its candidates in metric-rank order (best first).
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub document: &'a TokenSequence,
    pub reference: &'a TokenSequence,
    pub candidates: &'a [TokenSequence],
}

#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub items: &'a [TrainItem<'a>],
    pub crl: CrlConfig,
    pub mle: MleOptions,
}

/// The combined loss over a batch (means over items of the likelihood and
/// contrastive terms) and, when `with_grad`, its gradient.
pub fn objective(
    model: &SeqModel,
    spec: &LossSpec<'_>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if spec.items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    spec.crl.validate()?;
    let batch = spec.items.len() as f64;
    let CrlConfig { lambda, alpha, gamma } = spec.crl;
    let mut grad = with_grad.then(|| vec![0.0; model.num_params()]);
    let mut mle_total = 0.0;
    let mut ctr_total = 0.0;

    for item in spec.items {
        let reference = spec.mle.target(item.reference);
        let ref_norm = spec.mle.normalizer(reference.len());
        let mut targets: Vec<&TokenSequence> = Vec::with_capacity(item.candidates.len() + 1);
        targets.push(&reference);
        targets.extend(item.candidates.iter());

        // Targets are nonempty (checked by the model), so f is always defined.
        let f_of = |lp: &Vec<f64>| lp.iter().sum::<f64>() / (lp.len() as f64).powf(alpha);
        let log_probs = match grad.as_mut() {
            Some(g) => model.accumulate_log_prob_grad(
                item.document,
                &targets,
                |log_probs| {
                    let f: Vec<f64> = log_probs[1..].iter().map(f_of).collect();
                    let df = contrastive_score_gradient(&f, lambda);
                    let mut weights = Vec::with_capacity(log_probs.len());
                    weights.push(vec![-1.0 / (ref_norm * batch); log_probs[0].len()]);
                    for (lp, d) in log_probs[1..].iter().zip(&df) {
                        let w = if gamma == 0.0 || *d == 0.0 {
                            0.0
                        } else {
                            gamma * d / ((lp.len() as f64).powf(alpha) * batch)
                        };
                        weights.push(vec![w; lp.len()]);
                    }
                    weights
                },
                g,
            )?,
            None => {
                let owned: Vec<TokenSequence> = targets.iter().map(|t| (*t).clone()).collect();
                model.batch_log_probs(item.document, &owned)?
            }
        };
        let item_mle = -log_probs[0].iter().sum::<f64>() / ref_norm;
        let f: Vec<f64> = log_probs[1..].iter().map(f_of).collect();
        let item_ctr = contrastive_loss_from_scores(&f, lambda);
        mle_total += item_mle;
        ctr_total += item_ctr;
    }

    let breakdown = combined_loss(mle_total / batch, ctr_total / batch, gamma)?;
    if let Some(g) = &grad {
        if let Some(slice) = first_non_finite(model.layout(), g) {
            return Err(Error::NonFinite(format!("gradient slice {}", slice.name())));
        }
    }
    Ok((breakdown, grad))
}

/// `d L_com / d theta` for the batch described by `spec`.
pub fn loss_gradient(model: &SeqModel, spec: &LossSpec<'_>) -> Result<Vec<f64>> {
    Ok(objective(model, spec, true)?.1.expect("gradient requested"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_slice: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient with central differences of step `step` on
/// every parameter. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    model: &SeqModel,
    spec: &LossSpec<'_>,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let analytic = loss_gradient(model, spec)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        num_params: model.num_params(),
        checked: 0,
        max_relative_error: 0.0,
        worst_index: 0,
        worst_slice: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + step;
        let up = objective(&probe, spec, false)?.0.combined;
        probe.params_mut()[i] = orig - step;
        let down = objective(&probe, spec, false)?.0.combined;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if err > report.max_relative_error || report.checked == 1 {
            report.max_relative_error = err;
            report.worst_index = i;
            report.worst_slice = model.layout().slice_of(i).name().to_string();
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crl::f_score;
    use crate::model::{ModelConfig, Slice};

    fn seq(t: &[u32]) -> TokenSequence {
        TokenSequence::new(t.to_vec())
    }

    fn pair(doc: &[u32], reference: &[u32]) -> ExamplePair {
        ExamplePair {
            id: "x".into(),
            document: seq(doc),
            reference: seq(reference),
        }
    }

    fn tiny(seed: u64) -> SeqModel {
        SeqModel::new(
            ModelConfig {
                vocab_size: 10,
                hidden_size: 8,
                context_window: 10,
                temperature: 1.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn uniform_mle_matches_closed_form() {
        let m = SeqModel::uniform(ModelConfig::new(8)).unwrap();
        let loss = mle_loss(&m, &[pair(&[3, 4, 5], &[3, 4, 5, 6])]).unwrap();
        assert!((loss - 4.0 * 8f64.ln()).abs() < 1e-12);
        assert!((4.0 * 8f64.ln() - 8.3178).abs() < 1e-4);
    }

    #[test]
    fn mle_zero_when_certain_and_correct() {
        let mut m = SeqModel::uniform(ModelConfig::new(6)).unwrap();
        m.slice_mut(Slice::OutputBias)[4] = 1e4;
        let loss = mle_loss(&m, &[pair(&[3], &[4, 4, 4])]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(mle_loss(&m, &[]).is_err());
    }

    #[test]
    fn mle_matches_summation_oracle() {
        let m = tiny(11);
        let batch = vec![pair(&[3, 4, 5, 6], &[4, 5]), pair(&[7, 8, 9], &[9, 7, 8])];
        let mut oracle = 0.0;
        for p in &batch {
            let lp = m.sequence_log_probs(&p.document, &p.reference).unwrap();
            let mut s = 0.0;
            for x in lp {
                s += x;
            }
            oracle += -s;
        }
        oracle /= batch.len() as f64;
        assert!((mle_loss(&m, &batch).unwrap() - oracle).abs() < 1e-9);
        assert!(mle_loss(&m, &batch).unwrap() > 0.0);
    }

    #[test]
    fn gamma_zero_reduces_to_mle_gradient() {
        let m = tiny(3);
        let doc = seq(&[3, 4, 5, 6]);
        let reference = seq(&[3, 4]);
        let cands = vec![seq(&[3, 4, 1]), seq(&[5, 1]), seq(&[6, 6, 6])];
        let with = [TrainItem {
            document: &doc,
            reference: &reference,
            candidates: &cands,
        }];
        let without = [TrainItem {
            document: &doc,
            reference: &reference,
            candidates: &[],
        }];
        let crl = CrlConfig { gamma: 0.0, ..CrlConfig::default() };
        let a = loss_gradient(&m, &LossSpec { items: &with, crl, mle: MleOptions::TRAINING }).unwrap();
        let b = loss_gradient(&m, &LossSpec { items: &without, crl, mle: MleOptions::TRAINING }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slack_margins_contribute_nothing() {
        let m = tiny(4);
        let doc = seq(&[3, 4, 5]);
        let reference = seq(&[3]);
        let cands = vec![seq(&[3, 1]), seq(&[4, 1])];
        let items = [TrainItem {
            document: &doc,
            reference: &reference,
            candidates: &cands,
        }];
        // With lambda = 0 and candidates ordered by f, every hinge is slack.
        let lp: Vec<f64> = cands
            .iter()
            .map(|c| f_score(&m.sequence_log_probs(&doc, c).unwrap(), 1.0).unwrap())
            .collect();
        let ordered: Vec<TokenSequence> = if lp[0] >= lp[1] {
            cands.clone()
        } else {
            vec![cands[1].clone(), cands[0].clone()]
        };
        let items_sorted = [TrainItem { candidates: &ordered, ..items[0] }];
        let crl = CrlConfig { lambda: 0.0, ..CrlConfig::default() };
        let (loss, g) = objective(&m, &LossSpec { items: &items_sorted, crl, mle: MleOptions::TRAINING }, true).unwrap();
        assert_eq!(loss.ctr, 0.0);
        let mle_only = [TrainItem { candidates: &[], ..items[0] }];
        let g0 = loss_gradient(&m, &LossSpec { items: &mle_only, crl, mle: MleOptions::TRAINING }).unwrap();
        assert_eq!(g.unwrap(), g0);
    }

    #[test]
    fn breakdown_satisfies_the_combination() {
        let m = tiny(5);
        let doc = seq(&[3, 4, 5, 6, 7]);
        let reference = seq(&[3, 4, 5]);
        let cands = vec![seq(&[3, 4, 5, 1]), seq(&[3, 9, 1]), seq(&[8, 8, 1])];
        let items = [TrainItem { document: &doc, reference: &reference, candidates: &cands }];
        let crl = CrlConfig::default();
        let (b, _) = objective(&m, &LossSpec { items: &items, crl, mle: MleOptions::TRAINING }, false).unwrap();
        assert!((b.combined - (b.mle + 100.0 * b.ctr)).abs() < 1e-9);
        assert!(b.ctr > 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let m = tiny(21);
        let doc = seq(&[3, 4, 5, 6, 7, 8]);
        let reference = seq(&[3, 4, 5]);
        let cands = vec![seq(&[3, 4, 5, 1]), seq(&[3, 9, 1]), seq(&[8, 8, 2, 1])];
        let doc2 = seq(&[9, 8, 7]);
        let reference2 = seq(&[9, 7]);
        let cands2 = vec![seq(&[9, 7, 1]), seq(&[9, 1])];
        let items = [
            TrainItem { document: &doc, reference: &reference, candidates: &cands },
            TrainItem { document: &doc2, reference: &reference2, candidates: &cands2 },
        ];
        let spec = LossSpec { items: &items, crl: CrlConfig::default(), mle: MleOptions::TRAINING };
        let report = finite_difference_check(&m, &spec, 1e-4, 1e-6).unwrap();
        assert_eq!(report.checked, m.num_params());
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }

    #[test]
    fn sequence_sum_option_also_differentiates() {
        let m = tiny(8);
        let doc = seq(&[3, 4, 5]);
        let reference = seq(&[5, 4]);
        let items = [TrainItem { document: &doc, reference: &reference, candidates: &[] }];
        let spec = LossSpec { items: &items, crl: CrlConfig::default(), mle: MleOptions::SEQUENCE_SUM };
        let report = finite_difference_check(&m, &spec, 1e-4, 1e-6).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
        let (b, _) = objective(&m, &spec, false).unwrap();
        let pairs = [pair(&[3, 4, 5], &[5, 4])];
        assert!((b.mle - mle_loss(&m, &pairs).unwrap()).abs() < 1e-12);
    }
}
