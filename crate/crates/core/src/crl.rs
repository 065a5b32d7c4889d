//! Candidate ranking and the contrastive reward objective.
//!
//! Candidates for one document are ordered best-first by a quality metric.
//! The contrastive term asks the model's length-normalized score `f(S)` to
//! respect that order with a margin growing linearly in the rank gap:
//! `sum_{i<j} max(0, f(S_j) - f(S_i) + (j - i) * lambda)`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricScore};
use crate::vocab::TokenSequence;

/// One decoded candidate summary for a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: TokenSequence,
    pub token_log_probs: Vec<f64>,
    pub f_score: f64,
    pub metric_scores: BTreeMap<MetricKind, MetricScore>,
    pub group: usize,
}

impl Candidate {
    pub fn new(tokens: TokenSequence, token_log_probs: Vec<f64>, alpha: f64, group: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("candidate"));
        }
        if tokens.len() != token_log_probs.len() {
            return Err(Error::InvalidConfig(format!(
                "candidate has {} tokens but {} log-probs",
                tokens.len(),
                token_log_probs.len()
            )));
        }
        let f = f_score(&token_log_probs, alpha)?;
        Ok(Candidate {
            tokens,
            token_log_probs,
            f_score: f,
            metric_scores: BTreeMap::new(),
            group,
        })
    }

    pub fn metric(&self, kind: MetricKind) -> Option<f64> {
        self.metric_scores.get(&kind).map(|s| s.value)
    }
}

/// Candidates of one example ordered best-first under `metric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidateSet {
    pub example_id: String,
    pub metric: MetricKind,
    pub candidates: Vec<Candidate>,
}

impl RankedCandidateSet {
    pub fn f_scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.f_score).collect()
    }

    pub fn token_sequences(&self) -> Vec<TokenSequence> {
        self.candidates.iter().map(|c| c.tokens.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlConfig {
    /// Margin per unit of rank difference.
    pub lambda: f64,
    /// Length-normalization exponent in `f(S)`.
    pub alpha: f64,
    /// Weight of the contrastive term in the combined loss.
    pub gamma: f64,
}

impl Default for CrlConfig {
    fn default() -> Self {
        CrlConfig {
            lambda: 1.0,
            alpha: 1.0,
            gamma: 100.0,
        }
    }
}

impl CrlConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle: f64,
    pub ctr: f64,
    pub combined: f64,
}

/// `f(S) = sum_t log p_t / |S|^alpha`.
pub fn f_score(token_log_probs: &[f64], alpha: f64) -> Result<f64> {
    if token_log_probs.is_empty() {
        return Err(Error::EmptySequence("token log-probs"));
    }
    let sum: f64 = token_log_probs.iter().sum();
    Ok(sum / (token_log_probs.len() as f64).powf(alpha))
}

/// Drops exact duplicate token sequences (first occurrence wins) and sorts by
/// `metric` descending; ties keep their input order.
pub fn rank_candidates(
    example_id: &str,
    candidates: &[Candidate],
    metric: MetricKind,
) -> Result<RankedCandidateSet> {
    if candidates.is_empty() {
        return Err(Error::EmptySequence("candidate list"));
    }
    let mut seen = HashSet::new();
    let mut kept: Vec<(f64, &Candidate)> = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let value = c.metric(metric).ok_or_else(|| Error::MissingMetric {
            index,
            metric: metric.to_string(),
        })?;
        if seen.insert(&c.tokens) {
            kept.push((value, c));
        }
    }
    kept.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(RankedCandidateSet {
        example_id: example_id.to_string(),
        metric,
        candidates: kept.into_iter().map(|(_, c)| c.clone()).collect(),
    })
}

/// Pairwise rank-margin hinge loss over `f` given in rank order.
pub fn contrastive_loss_from_scores(f: &[f64], lambda: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            let margin = (j - i) as f64 * lambda;
            loss += (f[j] - f[i] + margin).max(0.0);
        }
    }
    loss
}

pub fn contrastive_loss(ranked: &RankedCandidateSet, lambda: f64) -> f64 {
    contrastive_loss_from_scores(&ranked.f_scores(), lambda)
}

/// `d loss / d f_k` for [`contrastive_loss_from_scores`]. Hinges exactly at
/// zero contribute nothing.
pub fn contrastive_score_gradient(f: &[f64], lambda: f64) -> Vec<f64> {
    let mut g = vec![0.0; f.len()];
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            let margin = (j - i) as f64 * lambda;
            if f[j] - f[i] + margin > 0.0 {
                g[j] += 1.0;
                g[i] -= 1.0;
            }
        }
    }
    g
}

/// `combined = mle + gamma * ctr`.
pub fn combined_loss(mle: f64, ctr: f64, gamma: f64) -> Result<LossBreakdown> {
    for (name, v) in [("mle", mle), ("ctr", ctr), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("combined loss input {name}")));
        }
    }
    Ok(LossBreakdown {
        mle,
        ctr,
        combined: mle + gamma * ctr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(tokens: &[u32], score: f64) -> Candidate {
        let mut c = Candidate::new(
            TokenSequence::new(tokens.to_vec()),
            vec![-0.5; tokens.len()],
            1.0,
            0,
        )
        .unwrap();
        c.metric_scores.insert(
            MetricKind::DaeLike,
            MetricScore::new(MetricKind::DaeLike, score).unwrap(),
        );
        c
    }

    #[test]
    fn f_score_examples() {
        assert!((f_score(&[-0.5, -0.5], 1.0).unwrap() + 0.5).abs() < 1e-15);
        assert!((f_score(&[-0.5, -0.5], 0.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(f_score(&[], 1.0).is_err());
    }

    #[test]
    fn ranking_sorts_descending() {
        let cs = vec![cand(&[3], 0.2), cand(&[4], 0.9), cand(&[5], 0.5)];
        let r = rank_candidates("e", &cs, MetricKind::DaeLike).unwrap();
        let order: Vec<u32> = r.candidates.iter().map(|c| c.tokens.tokens()[0] - 3).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn ranking_deduplicates_and_is_stable() {
        let cs = vec![cand(&[3, 4], 0.5), cand(&[3, 4], 0.9), cand(&[5], 0.5)];
        let r = rank_candidates("e", &cs, MetricKind::DaeLike).unwrap();
        assert_eq!(r.candidates.len(), 2);
        assert_eq!(r.candidates[0].tokens.tokens(), &[3, 4]);

        let cs = vec![cand(&[7], 0.5), cand(&[3], 0.5), cand(&[5], 0.5)];
        let r = rank_candidates("e", &cs, MetricKind::DaeLike).unwrap();
        let order: Vec<u32> = r.candidates.iter().map(|c| c.tokens.tokens()[0]).collect();
        assert_eq!(order, vec![7, 3, 5]);
    }

    #[test]
    fn ranking_requires_the_metric() {
        let cs = vec![cand(&[3], 0.5)];
        assert!(matches!(
            rank_candidates("e", &cs, MetricKind::BartLike),
            Err(Error::MissingMetric { index: 0, .. })
        ));
        assert!(rank_candidates("e", &[], MetricKind::DaeLike).is_err());
    }

    #[test]
    fn contrastive_examples() {
        // pairs: (0,1): -2+1+1=0, (0,2): -2.5+1+2=0.5, (1,2): -2.5+2+1=0.5
        assert!((contrastive_loss_from_scores(&[-1.0, -2.0, -2.5], 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(contrastive_loss_from_scores(&[0.0, -1.0, -2.0], 1.0), 0.0);
        assert_eq!(contrastive_loss_from_scores(&[-3.0], 1.0), 0.0);
    }

    #[test]
    fn combined_examples() {
        let b = combined_loss(2.0, 0.5, 100.0).unwrap();
        assert!((b.combined - 52.0).abs() < 1e-12);
        assert_eq!(combined_loss(2.0, 0.5, 0.0).unwrap().combined, 2.0);
        assert_eq!(CrlConfig::default().gamma, 100.0);
        assert_eq!(CrlConfig::default().lambda, 1.0);
        assert!(combined_loss(f64::NAN, 0.0, 1.0).is_err());
        assert!(CrlConfig { lambda: -1.0, ..CrlConfig::default() }.validate().is_err());
    }

    fn f_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..0.0, 1..9)
    }

    proptest! {
        #[test]
        fn nonnegative_and_zero_iff_margins_hold(f in f_vec(), lambda in 0.0f64..2.0) {
            let loss = contrastive_loss_from_scores(&f, lambda);
            prop_assert!(loss >= 0.0);
            let all_hold = (0..f.len()).all(|i| (i + 1..f.len())
                .all(|j| f[i] >= f[j] + (j - i) as f64 * lambda));
            prop_assert_eq!(loss == 0.0, all_hold);
        }

        #[test]
        fn shift_invariant(f in f_vec(), c in -3.0f64..3.0) {
            // Shifts by a dyadic constant are exact in floating point.
            let c = (c * 8.0).round() / 8.0;
            let shifted: Vec<f64> = f.iter().map(|x| x + c).collect();
            let a = contrastive_loss_from_scores(&f, 1.0);
            let b = contrastive_loss_from_scores(&shifted, 1.0);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn monotone_in_best_and_worst(f in proptest::collection::vec(-5.0f64..0.0, 2..9), d in 0.0f64..2.0) {
            let base = contrastive_loss_from_scores(&f, 1.0);
            let mut up_best = f.clone();
            up_best[0] += d;
            prop_assert!(contrastive_loss_from_scores(&up_best, 1.0) <= base + 1e-12);
            let mut up_worst = f.clone();
            *up_worst.last_mut().unwrap() += d;
            prop_assert!(contrastive_loss_from_scores(&up_worst, 1.0) >= base - 1e-12);
        }

        #[test]
        fn zero_lambda_zero_iff_weakly_sorted(f in f_vec()) {
            let sorted = f.windows(2).all(|w| w[0] >= w[1]);
            prop_assert_eq!(contrastive_loss_from_scores(&f, 0.0) == 0.0, sorted);
        }

        #[test]
        fn score_gradient_matches_differences(f in f_vec(), lambda in 0.0f64..2.0) {
            let g = contrastive_score_gradient(&f, lambda);
            let h = 1e-6;
            for k in 0..f.len() {
                let mut up = f.clone();
                up[k] += h;
                let mut down = f.clone();
                down[k] -= h;
                let num = (contrastive_loss_from_scores(&up, lambda)
                    - contrastive_loss_from_scores(&down, lambda)) / (2.0 * h);
                // skip points within h of a hinge kink
                let near_kink = (0..f.len()).any(|i| (i + 1..f.len()).any(|j| {
                    (f[j] - f[i] + (j - i) as f64 * lambda).abs() < 2.0 * h
                }));
                if !near_kink {
                    prop_assert!((num - g[k]).abs() < 1e-6);
                }
            }
        }
    }
}
