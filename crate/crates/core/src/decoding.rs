//! Beam search and diverse (group-wise, Hamming-penalized) beam search.
//!
//! Groups are decoded one after another at every time step. When a group
//! scores its expansions, each token already chosen at this step by an
//! earlier group costs `diversity_strength` per occurrence. Selection uses the
//! accumulated penalized score; the reported score is always the plain model
//! log-probability.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, Encoded, SeqModel};
use crate::vocab::{TokenId, TokenSequence, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_length: usize,
    pub num_groups: usize,
    pub diversity_strength: f64,
    /// Recorded for reproducibility; the search itself is deterministic.
    pub seed: u64,
}

impl BeamConfig {
    /// Plain beam search with `beam_width` beams.
    pub fn beam(beam_width: usize, max_length: usize) -> Self {
        BeamConfig {
            beam_width,
            max_length,
            num_groups: 1,
            diversity_strength: 0.0,
            seed: 0,
        }
    }

    /// `groups` groups of width one each.
    pub fn diverse(groups: usize, max_length: usize, diversity_strength: f64) -> Self {
        BeamConfig {
            beam_width: groups,
            max_length,
            num_groups: groups,
            diversity_strength,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 || self.max_length < 1 || self.num_groups < 1 {
            return Err(Error::InvalidConfig(format!(
                "beam width, max length and groups must be >= 1: {self:?}"
            )));
        }
        if !(self.diversity_strength.is_finite() && self.diversity_strength >= 0.0) {
            return Err(Error::InvalidConfig("diversity strength must be >= 0".into()));
        }
        if !self.beam_width.is_multiple_of(self.num_groups) {
            return Err(Error::BeamGroups {
                beam_width: self.beam_width,
                groups: self.num_groups,
            });
        }
        Ok(())
    }
}

/// A completed hypothesis. `tokens` ends with EOS unless the length limit was hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub token_log_probs: Vec<f64>,
    pub group: usize,
}

impl Hypothesis {
    pub fn terminated(&self) -> bool {
        self.tokens.tokens().last() == Some(&EOS)
    }
}

struct Beam {
    tokens: Vec<TokenId>,
    token_log_probs: Vec<f64>,
    log_prob: f64,
    selection: f64,
    state: DecoderState,
}

struct Finished {
    hyp: Hypothesis,
    selection: f64,
}

struct Group {
    live: Vec<Beam>,
    finished: Vec<Finished>,
    done: bool,
}

struct Expansion {
    beam: usize,
    token: TokenId,
    log_prob: f64,
    token_log_prob: f64,
    selection: f64,
}

fn check_scores(log_probs: &[f64]) -> Result<()> {
    if log_probs.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("decoder log-probabilities".into()));
    }
    Ok(())
}

/// Single-group beam search; `config.num_groups` and the diversity settings are ignored.
pub fn beam_search(model: &SeqModel, document: &TokenSequence, config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    let single = BeamConfig {
        num_groups: 1,
        diversity_strength: 0.0,
        ..*config
    };
    diverse_beam_search(model, document, &single)
}

pub fn diverse_beam_search(
    model: &SeqModel,
    document: &TokenSequence,
    config: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let encoded = model.encode(document)?;
    let width = config.beam_width / config.num_groups;
    let vocab = model.vocab_size();
    let mut groups: Vec<Group> = (0..config.num_groups)
        .map(|_| Group {
            live: vec![Beam {
                tokens: Vec::new(),
                token_log_probs: Vec::new(),
                log_prob: 0.0,
                selection: 0.0,
                state: model.start_state(),
            }],
            finished: Vec::new(),
            done: false,
        })
        .collect();

    for step in 0..config.max_length {
        let last_step = step + 1 == config.max_length;
        let mut chosen = vec![0u32; vocab];
        for (gi, group) in groups.iter_mut().enumerate() {
            if group.done {
                continue;
            }
            let (expansions, states) = expand(model, &encoded, group, &chosen, config.diversity_strength)?;
            let mut next_live = Vec::with_capacity(width);
            for (rank, e) in expansions.into_iter().enumerate() {
                let finishes = e.token == EOS || last_step;
                let admitted = if finishes { rank < width } else { next_live.len() < width };
                if !admitted {
                    if rank >= width && (last_step || next_live.len() == width) {
                        break;
                    }
                    continue;
                }
                let parent = &group.live[e.beam];
                let mut tokens = parent.tokens.clone();
                tokens.push(e.token);
                let mut token_log_probs = parent.token_log_probs.clone();
                token_log_probs.push(e.token_log_prob);
                if finishes {
                    chosen[e.token as usize] += 1;
                    group.finished.push(Finished {
                        hyp: Hypothesis {
                            tokens: tokens.into(),
                            log_prob: e.log_prob,
                            token_log_probs,
                            group: gi,
                        },
                        selection: e.selection,
                    });
                } else {
                    next_live.push(Beam {
                        tokens,
                        token_log_probs,
                        log_prob: e.log_prob,
                        selection: e.selection,
                        state: states[e.beam].clone(),
                    });
                }
            }
            group.live = next_live;
            group
                .finished
                .sort_by(|a, b| b.selection.total_cmp(&a.selection));
            group.finished.truncate(width);
            let best_live = group
                .live
                .iter()
                .map(|b| b.selection)
                .fold(f64::NEG_INFINITY, f64::max);
            let saturated = group.finished.len() >= width
                && group.finished.last().is_some_and(|w| best_live <= w.selection);
            group.done = group.live.is_empty() || saturated;
            if !group.done {
                for beam in &group.live {
                    chosen[*beam.tokens.last().expect("live beams are nonempty") as usize] += 1;
                }
            }
        }
        if groups.iter().all(|g| g.done) {
            break;
        }
    }

    let mut out = Vec::with_capacity(config.beam_width);
    for group in groups {
        let mut hyps: Vec<Hypothesis> = group.finished.into_iter().map(|f| f.hyp).collect();
        hyps.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        out.extend(hyps);
    }
    Ok(out)
}

fn expand(
    model: &SeqModel,
    encoded: &Encoded,
    group: &Group,
    chosen: &[u32],
    strength: f64,
) -> Result<(Vec<Expansion>, Vec<DecoderState>)> {
    let mut expansions = Vec::with_capacity(group.live.len() * model.vocab_size());
    let mut states = Vec::with_capacity(group.live.len());
    for (bi, beam) in group.live.iter().enumerate() {
        let prev = beam.tokens.last().copied().unwrap_or(BOS);
        let (next, log_probs) = model.step(encoded, &beam.state, prev)?;
        check_scores(&log_probs)?;
        states.push(next);
        for (tok, &lp) in log_probs.iter().enumerate() {
            if tok as TokenId == BOS {
                continue;
            }
            let penalty = strength * chosen[tok] as f64;
            expansions.push(Expansion {
                beam: bi,
                token: tok as TokenId,
                log_prob: beam.log_prob + lp,
                token_log_prob: lp,
                selection: beam.selection + lp - penalty,
            });
        }
    }
    expansions.sort_by(|a, b| match b.selection.total_cmp(&a.selection) {
        Ordering::Equal => (a.beam, a.token).cmp(&(b.beam, b.token)),
        o => o,
    });
    Ok((expansions, states))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(model: &SeqModel, document: &TokenSequence, max_length: usize) -> Result<Hypothesis> {
    let encoded = model.encode(document)?;
    let mut state = model.start_state();
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    for _ in 0..max_length {
        let (next, log_probs) = model.step(&encoded, &state, prev)?;
        check_scores(&log_probs)?;
        let (tok, lp) = log_probs
            .iter()
            .enumerate()
            .filter(|(t, _)| *t as TokenId != BOS)
            .fold((0usize, f64::NEG_INFINITY), |best, (t, &lp)| {
                if lp > best.1 {
                    (t, lp)
                } else {
                    best
                }
            });
        tokens.push(tok as TokenId);
        lps.push(lp);
        state = next;
        prev = tok as TokenId;
        if prev == EOS {
            break;
        }
    }
    let mut log_prob = 0.0;
    for lp in &lps {
        log_prob += lp;
    }
    Ok(Hypothesis {
        tokens: tokens.into(),
        log_prob,
        token_log_probs: lps,
        group: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn toy(seed: u64) -> SeqModel {
        let config = ModelConfig {
            vocab_size: 5,
            hidden_size: 6,
            context_window: 8,
            temperature: 0.5,
        };
        SeqModel::new(config, seed).unwrap()
    }

    fn doc() -> TokenSequence {
        vec![3, 4, 3, 2].into()
    }

    /// Every decodable sequence up to `max_len`: EOS only in final position,
    /// or no EOS at all when the length limit is reached.
    fn all_sequences(vocab: u32, max_len: usize) -> Vec<Vec<TokenId>> {
        let emit: Vec<TokenId> = (0..vocab).filter(|&t| t != BOS).collect();
        let mut out = Vec::new();
        let mut open: Vec<Vec<TokenId>> = vec![Vec::new()];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for prefix in &open {
                for &t in &emit {
                    let mut s = prefix.clone();
                    s.push(t);
                    if t == EOS || len == max_len {
                        out.push(s);
                    } else {
                        next.push(s);
                    }
                }
            }
            open = next;
        }
        out
    }

    fn exhaustive(model: &SeqModel, document: &TokenSequence, max_len: usize) -> Vec<(Vec<TokenId>, f64)> {
        let mut scored: Vec<(Vec<TokenId>, f64)> = all_sequences(model.vocab_size() as u32, max_len)
            .into_iter()
            .map(|s| {
                let lps = model.sequence_log_probs(document, &s.clone().into()).unwrap();
                (s, lps.iter().sum())
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored
    }

    #[test]
    fn enumeration_count() {
        // 1 + 3 + 9 + 27 terminated, 81 truncated
        assert_eq!(all_sequences(5, 4).len(), 121);
    }

    #[test]
    fn wide_beam_is_exact() {
        for seed in 0..4 {
            let model = toy(seed);
            let oracle = exhaustive(&model, &doc(), 4);
            let hyps = beam_search(&model, &doc(), &BeamConfig::beam(oracle.len(), 4)).unwrap();
            assert_eq!(hyps.len(), oracle.len());
            for (h, (seq, score)) in hyps.iter().zip(&oracle) {
                assert_eq!(h.tokens.tokens(), seq.as_slice());
                assert!((h.log_prob - score).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn narrow_beam_returns_sorted_valid_hypotheses() {
        let model = toy(11);
        let hyps = beam_search(&model, &doc(), &BeamConfig::beam(3, 6)).unwrap();
        assert_eq!(hyps.len(), 3);
        for w in hyps.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for h in &hyps {
            assert!(h.tokens.len() <= 6);
            assert!(!h.tokens.tokens().contains(&BOS));
            let eos_at = h.tokens.tokens().iter().position(|&t| t == EOS);
            assert!(eos_at.is_none() || eos_at == Some(h.tokens.len() - 1));
            let tf: f64 = model.sequence_log_probs(&doc(), &h.tokens).unwrap().iter().sum();
            assert!((tf - h.log_prob).abs() < 1e-10);
            assert_eq!(h.token_log_probs.len(), h.tokens.len());
        }
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..5 {
            let model = toy(seed);
            let g = greedy(&model, &doc(), 7).unwrap();
            let b = beam_search(&model, &doc(), &BeamConfig::beam(1, 7)).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
        }
    }

    #[test]
    fn single_group_matches_beam_search() {
        let model = toy(3);
        let config = BeamConfig {
            beam_width: 4,
            max_length: 5,
            num_groups: 1,
            diversity_strength: 3.0,
            seed: 0,
        };
        let d = diverse_beam_search(&model, &doc(), &config).unwrap();
        let b = beam_search(&model, &doc(), &config).unwrap();
        assert_eq!(d, b);
    }

    #[test]
    fn zero_strength_groups_collapse() {
        let model = toy(5);
        let hyps = diverse_beam_search(&model, &doc(), &BeamConfig::diverse(3, 5, 0.0)).unwrap();
        let g = greedy(&model, &doc(), 5).unwrap();
        assert_eq!(hyps.len(), 3);
        for (i, h) in hyps.iter().enumerate() {
            assert_eq!(h.group, i);
            assert_eq!(h.tokens, g.tokens);
        }
    }

    #[test]
    fn strong_penalty_forces_distinct_first_tokens() {
        let model = toy(8);
        let hyps = diverse_beam_search(&model, &doc(), &BeamConfig::diverse(4, 5, 1e6)).unwrap();
        let mut firsts: Vec<TokenId> = hyps.iter().map(|h| h.tokens.tokens()[0]).collect();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 4);
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let model = toy(0);
        let config = BeamConfig {
            beam_width: 5,
            max_length: 4,
            num_groups: 2,
            diversity_strength: 1.0,
            seed: 0,
        };
        assert!(matches!(
            diverse_beam_search(&model, &doc(), &config),
            Err(Error::BeamGroups { beam_width: 5, groups: 2 })
        ));
        let bad = BeamConfig { beam_width: 0, ..config };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    /// Lock-step greedy decoding per group with the Hamming penalty applied.
    fn penalized_greedy_oracle(model: &SeqModel, document: &TokenSequence, groups: usize, max_len: usize, strength: f64) -> Vec<Vec<TokenId>> {
        let mut seqs: Vec<Vec<TokenId>> = vec![Vec::new(); groups];
        let mut done = vec![false; groups];
        for _ in 0..max_len {
            let mut counts = vec![0.0; model.vocab_size()];
            for g in 0..groups {
                if done[g] {
                    continue;
                }
                let dist = model.next_token_dist(document, &seqs[g].clone().into()).unwrap();
                let mut best = (0usize, f64::NEG_INFINITY);
                for (t, p) in dist.iter().enumerate().skip(1) {
                    let s = p.ln() - strength * counts[t];
                    if s > best.1 {
                        best = (t, s);
                    }
                }
                seqs[g].push(best.0 as TokenId);
                counts[best.0] += 1.0;
                if best.0 as TokenId == EOS {
                    done[g] = true;
                }
            }
        }
        seqs
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn diverse_width_one_matches_oracle(seed in 0u64..1000, groups in 1usize..5, strength in 0.0f64..3.0) {
            let model = toy(seed);
            let hyps = diverse_beam_search(&model, &doc(), &BeamConfig::diverse(groups, 5, strength)).unwrap();
            let oracle = penalized_greedy_oracle(&model, &doc(), groups, 5, strength);
            prop_assert_eq!(hyps.len(), groups);
            for (h, o) in hyps.iter().zip(&oracle) {
                prop_assert_eq!(h.tokens.tokens(), o.as_slice());
            }
        }

        #[test]
        fn groups_are_sorted_and_labelled(seed in 0u64..1000, groups in 1usize..4, per_group in 1usize..4) {
            let model = toy(seed);
            let config = BeamConfig {
                beam_width: groups * per_group,
                max_length: 5,
                num_groups: groups,
                diversity_strength: 0.7,
                seed: 0,
            };
            let hyps = diverse_beam_search(&model, &doc(), &config).unwrap();
            prop_assert_eq!(hyps.len(), groups * per_group);
            for (g, chunk) in hyps.chunks(per_group).enumerate() {
                for h in chunk {
                    prop_assert_eq!(h.group, g);
                }
                for w in chunk.windows(2) {
                    prop_assert!(w[0].log_prob >= w[1].log_prob);
                }
            }
        }
    }
}
