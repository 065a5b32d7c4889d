//! A small attention-conditioned encoder/decoder over token ids.
//!
//! The encoder maps each document token (plus a learned position embedding)
//! through one tanh layer. The decoder is a single tanh recurrent layer; at
//! every step it attends once over the encoder states and mixes the recurrent
//! state with the attended context before the output softmax. Everything is
//! computed in `f64` and differentiated by hand.

mod checkpoint;
mod objective;
mod optimizer;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use objective::{
    finite_difference_check, loss_gradient, mle_loss, mle_loss_with, objective, GradCheckReport,
    LossSpec, MleOptions, TrainItem,
};
pub use optimizer::{apply_update, Optimizer, OptimizerState};

use crate::corpus::ExamplePair;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub context_window: usize,
    /// Softmax temperature applied to the output logits.
    pub temperature: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_size: 64,
            context_window: 64,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.hidden_size == 0 || self.context_window == 0 {
            return Err(Error::InvalidConfig(format!("degenerate model config {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Named regions of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slice {
    Embedding,
    EncoderPosition,
    DecoderPosition,
    EncoderWeight,
    EncoderBias,
    DecoderInput,
    DecoderRecurrent,
    DecoderBias,
    AttentionQuery,
    CombineWeight,
    CombineBias,
    OutputWeight,
    OutputBias,
}

impl Slice {
    pub const ALL: [Slice; 13] = [
        Slice::Embedding,
        Slice::EncoderPosition,
        Slice::DecoderPosition,
        Slice::EncoderWeight,
        Slice::EncoderBias,
        Slice::DecoderInput,
        Slice::DecoderRecurrent,
        Slice::DecoderBias,
        Slice::AttentionQuery,
        Slice::CombineWeight,
        Slice::CombineBias,
        Slice::OutputWeight,
        Slice::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Embedding => "embedding",
            Slice::EncoderPosition => "encoder.position",
            Slice::DecoderPosition => "decoder.position",
            Slice::EncoderWeight => "encoder.weight",
            Slice::EncoderBias => "encoder.bias",
            Slice::DecoderInput => "decoder.input",
            Slice::DecoderRecurrent => "decoder.recurrent",
            Slice::DecoderBias => "decoder.bias",
            Slice::AttentionQuery => "attention.query",
            Slice::CombineWeight => "combine.weight",
            Slice::CombineBias => "combine.bias",
            Slice::OutputWeight => "output.weight",
            Slice::OutputBias => "output.bias",
        }
    }

    fn shape(self, c: &ModelConfig) -> (usize, usize) {
        let (v, h, w) = (c.vocab_size, c.hidden_size, c.context_window);
        match self {
            Slice::Embedding => (v, h),
            Slice::EncoderPosition | Slice::DecoderPosition => (w, h),
            Slice::EncoderWeight
            | Slice::DecoderInput
            | Slice::DecoderRecurrent
            | Slice::AttentionQuery => (h, h),
            Slice::EncoderBias | Slice::DecoderBias | Slice::CombineBias => (h, 1),
            Slice::CombineWeight => (h, 2 * h),
            Slice::OutputWeight => (v, h),
            Slice::OutputBias => (v, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    ranges: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut ranges = Vec::with_capacity(Slice::ALL.len());
        let mut offset = 0;
        for slice in Slice::ALL {
            let (r, c) = slice.shape(config);
            ranges.push(offset..offset + r * c);
            offset += r * c;
        }
        Layout {
            ranges,
            total: offset,
        }
    }

    pub fn range(&self, slice: Slice) -> Range<usize> {
        self.ranges[slice as usize].clone()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// The slice holding parameter index `i`.
    pub fn slice_of(&self, i: usize) -> Slice {
        Slice::ALL
            .into_iter()
            .find(|&s| self.range(s).contains(&i))
            .expect("index within layout")
    }
}

/// The conditional sequence model. Parameters live in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Encoder output for one document, reusable across decodes.
#[derive(Debug, Clone)]
pub struct Encoded {
    tokens: Vec<TokenId>,
    inputs: Vec<f64>,
    states: Vec<f64>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Recurrent decoder state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    hidden: Vec<f64>,
    position: usize,
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    input_token: TokenId,
    position: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
    query: Vec<f64>,
    attention: Vec<f64>,
    context: Vec<f64>,
    mixed: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Trace {
    steps: Vec<StepCache>,
    log_probs: Vec<f64>,
}

impl SeqModel {
    /// Random initialization, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size as f64;
        for slice in Slice::ALL {
            let scale = match slice {
                Slice::Embedding | Slice::EncoderPosition | Slice::DecoderPosition => 0.5,
                Slice::EncoderWeight
                | Slice::DecoderInput
                | Slice::DecoderRecurrent
                | Slice::AttentionQuery
                | Slice::OutputWeight => 1.0 / h.sqrt(),
                Slice::CombineWeight => 1.0 / (2.0 * h).sqrt(),
                Slice::EncoderBias | Slice::DecoderBias | Slice::CombineBias | Slice::OutputBias => {
                    0.0
                }
            };
            if scale > 0.0 {
                for p in &mut params[layout.range(slice)] {
                    *p = rng.gen_range(-scale..scale);
                }
            }
        }
        Ok(SeqModel {
            config,
            layout,
            params,
        })
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn uniform(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total()];
        Ok(SeqModel {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(SeqModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn slice(&self, slice: Slice) -> &[f64] {
        &self.params[self.layout.range(slice)]
    }

    pub fn slice_mut(&mut self, slice: Slice) -> &mut [f64] {
        let r = self.layout.range(slice);
        &mut self.params[r]
    }

    /// Runs the encoder over at most `context_window` document tokens.
    pub fn encode(&self, document: &TokenSequence) -> Result<Encoded> {
        if document.is_empty() {
            return Err(Error::EmptySequence("document"));
        }
        document.check_range(self.config.vocab_size)?;
        let h = self.config.hidden_size;
        let n = document.len().min(self.config.context_window);
        let tokens = document.tokens()[..n].to_vec();
        let emb = self.slice(Slice::Embedding);
        let pos = self.slice(Slice::EncoderPosition);
        let w = self.slice(Slice::EncoderWeight);
        let b = self.slice(Slice::EncoderBias);
        let mut inputs = vec![0.0; n * h];
        let mut states = vec![0.0; n * h];
        for (i, &tok) in tokens.iter().enumerate() {
            let u = &mut inputs[i * h..(i + 1) * h];
            let t = tok as usize;
            for k in 0..h {
                u[k] = emb[t * h + k] + pos[i * h + k];
            }
            let e = &mut states[i * h..(i + 1) * h];
            matvec(w, h, h, u, e);
            for k in 0..h {
                e[k] = (e[k] + b[k]).tanh();
            }
        }
        Ok(Encoded {
            tokens,
            inputs,
            states,
        })
    }

    pub fn start_state(&self) -> DecoderState {
        DecoderState {
            hidden: vec![0.0; self.config.hidden_size],
            position: 0,
        }
    }

    /// Feeds `prev` (BOS at position 0) and returns the next state together
    /// with log-probabilities over the vocabulary.
    pub fn step(
        &self,
        encoded: &Encoded,
        state: &DecoderState,
        prev: TokenId,
    ) -> Result<(DecoderState, Vec<f64>)> {
        if prev as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: prev,
                vocab_size: self.config.vocab_size,
            });
        }
        let cache = self.step_cached(encoded, &state.hidden, state.position, prev);
        Ok((
            DecoderState {
                hidden: cache.hidden,
                position: state.position + 1,
            },
            cache.log_probs,
        ))
    }

    fn logits(&self, mixed: &[f64]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let h = self.config.hidden_size;
        let mut z = vec![0.0; v];
        matvec(self.slice(Slice::OutputWeight), v, h, mixed, &mut z);
        let b = self.slice(Slice::OutputBias);
        let inv_t = 1.0 / self.config.temperature;
        for (zi, bi) in z.iter_mut().zip(b) {
            *zi = (*zi + bi) * inv_t;
        }
        z
    }

    fn step_cached(
        &self,
        encoded: &Encoded,
        prev_hidden: &[f64],
        t: usize,
        prev: TokenId,
    ) -> StepCache {
        let h = self.config.hidden_size;
        let n = encoded.len();
        let position = t.min(self.config.context_window - 1);
        let emb = self.slice(Slice::Embedding);
        let pos = self.slice(Slice::DecoderPosition);
        let tok = prev as usize;
        let input: Vec<f64> = (0..h)
            .map(|k| emb[tok * h + k] + pos[position * h + k])
            .collect();

        let mut pre = vec![0.0; h];
        matvec(self.slice(Slice::DecoderInput), h, h, &input, &mut pre);
        matvec_acc(self.slice(Slice::DecoderRecurrent), h, h, prev_hidden, &mut pre);
        let bias = self.slice(Slice::DecoderBias);
        let hidden: Vec<f64> = pre.iter().zip(bias).map(|(p, b)| (p + b).tanh()).collect();

        let mut query = vec![0.0; h];
        matvec(self.slice(Slice::AttentionQuery), h, h, &hidden, &mut query);
        let scale = 1.0 / (h as f64).sqrt();
        let scores: Vec<f64> = (0..n)
            .map(|i| dot(&query, &encoded.states[i * h..(i + 1) * h]) * scale)
            .collect();
        let attention = softmax(&scores);
        let mut context = vec![0.0; h];
        for (i, a) in attention.iter().enumerate() {
            for (c, e) in context.iter_mut().zip(&encoded.states[i * h..(i + 1) * h]) {
                *c += a * e;
            }
        }

        let mut joined = Vec::with_capacity(2 * h);
        joined.extend_from_slice(&hidden);
        joined.extend_from_slice(&context);
        let mut mixed = vec![0.0; h];
        matvec(self.slice(Slice::CombineWeight), h, 2 * h, &joined, &mut mixed);
        for (m, b) in mixed.iter_mut().zip(self.slice(Slice::CombineBias)) {
            *m = (*m + b).tanh();
        }
        let log_probs = log_softmax(&self.logits(&mixed));
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        StepCache {
            input_token: prev,
            position,
            input,
            hidden,
            query,
            attention,
            context,
            mixed,
            probs,
            log_probs,
        }
    }

    fn forward_trace(&self, encoded: &Encoded, target: &TokenSequence) -> Trace {
        let mut steps = Vec::with_capacity(target.len());
        let mut log_probs = Vec::with_capacity(target.len());
        let mut hidden = vec![0.0; self.config.hidden_size];
        let mut prev = BOS;
        for (t, &y) in target.tokens().iter().enumerate() {
            let cache = self.step_cached(encoded, &hidden, t, prev);
            log_probs.push(cache.log_probs[y as usize]);
            hidden.clone_from(&cache.hidden);
            prev = y;
            steps.push(cache);
        }
        Trace { steps, log_probs }
    }

    /// Next-token distribution after `prefix`, conditioned on `document`.
    pub fn next_token_dist(&self, document: &TokenSequence, prefix: &TokenSequence) -> Result<Vec<f64>> {
        prefix.check_range(self.config.vocab_size)?;
        let encoded = self.encode(document)?;
        let mut state = self.start_state();
        let mut prev = BOS;
        for &tok in prefix.tokens() {
            state = self.step(&encoded, &state, prev)?.0;
            prev = tok;
        }
        let cache = self.step_cached(&encoded, &state.hidden, state.position, prev);
        Ok(cache.probs)
    }

    /// Teacher-forced `log p(target_j | document, target_<j)` for every j.
    pub fn sequence_log_probs(&self, document: &TokenSequence, target: &TokenSequence) -> Result<Vec<f64>> {
        if target.is_empty() {
            return Err(Error::EmptySequence("target"));
        }
        target.check_range(self.config.vocab_size)?;
        let encoded = self.encode(document)?;
        Ok(self.forward_trace(&encoded, target).log_probs)
    }

    /// Teacher-forced log-probs for several targets sharing one document.
    pub fn batch_log_probs(&self, document: &TokenSequence, targets: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        let encoded = self.encode(document)?;
        targets
            .iter()
            .map(|t| {
                if t.is_empty() {
                    return Err(Error::EmptySequence("target"));
                }
                t.check_range(self.config.vocab_size)?;
                Ok(self.forward_trace(&encoded, t).log_probs)
            })
            .collect()
    }

    /// Adds the gradient of `sum_k sum_t weights[k][t] * log p(targets[k][t])`
    /// to `grad`, where `weights` receives every target's teacher-forced
    /// log-probabilities. Returns those log-probabilities.
    pub(crate) fn accumulate_log_prob_grad(
        &self,
        document: &TokenSequence,
        targets: &[&TokenSequence],
        weights: impl FnOnce(&[Vec<f64>]) -> Vec<Vec<f64>>,
        grad: &mut [f64],
    ) -> Result<Vec<Vec<f64>>> {
        let h = self.config.hidden_size;
        let encoded = self.encode(document)?;
        let mut traces = Vec::with_capacity(targets.len());
        for target in targets {
            if target.is_empty() {
                return Err(Error::EmptySequence("target"));
            }
            target.check_range(self.config.vocab_size)?;
            traces.push(self.forward_trace(&encoded, target));
        }
        let log_probs: Vec<Vec<f64>> = traces.iter().map(|t| t.log_probs.clone()).collect();
        let weights = weights(&log_probs);

        let mut d_states = vec![0.0; encoded.len() * h];
        for (k, trace) in traces.iter().enumerate() {
            let w = &weights[k];
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.backward_sequence(&encoded, trace, targets[k], w, grad, &mut d_states);
        }
        self.backward_encoder(&encoded, &d_states, grad);
        Ok(log_probs)
    }

    fn backward_sequence(
        &self,
        encoded: &Encoded,
        trace: &Trace,
        target: &TokenSequence,
        weights: &[f64],
        grad: &mut [f64],
        d_states: &mut [f64],
    ) {
        let h = self.config.hidden_size;
        let v = self.config.vocab_size;
        let n = encoded.len();
        let inv_t = 1.0 / self.config.temperature;
        let scale = 1.0 / (h as f64).sqrt();
        let l = &self.layout;

        let mut d_hidden_next = vec![0.0; h];
        let mut dz = vec![0.0; v];
        let mut d_mixed_pre = vec![0.0; h];
        let mut d_joined = vec![0.0; 2 * h];
        let mut d_pre = vec![0.0; h];
        let mut joined = vec![0.0; 2 * h];
        let zeros = vec![0.0; h];

        for t in (0..trace.steps.len()).rev() {
            let s = &trace.steps[t];
            let w = weights[t];
            let y = target.tokens()[t] as usize;

            let mut d_hidden = std::mem::replace(&mut d_hidden_next, vec![0.0; h]);

            if w != 0.0 {
                // d(w * log p_y)/dz = w * (onehot(y) - p), scaled by 1/temperature.
                for (j, dzj) in dz.iter_mut().enumerate() {
                    let ind = if j == y { 1.0 } else { 0.0 };
                    *dzj = w * (ind - s.probs[j]) * inv_t;
                }
                outer_acc(&mut grad[l.range(Slice::OutputWeight)], v, h, &dz, &s.mixed);
                for (g, d) in grad[l.range(Slice::OutputBias)].iter_mut().zip(&dz) {
                    *g += d;
                }
                let mut d_mixed = vec![0.0; h];
                matvec_t_acc(self.slice(Slice::OutputWeight), v, h, &dz, &mut d_mixed);
                for k in 0..h {
                    d_mixed_pre[k] = d_mixed[k] * (1.0 - s.mixed[k] * s.mixed[k]);
                }
                joined[..h].copy_from_slice(&s.hidden);
                joined[h..].copy_from_slice(&s.context);
                outer_acc(&mut grad[l.range(Slice::CombineWeight)], h, 2 * h, &d_mixed_pre, &joined);
                for (g, d) in grad[l.range(Slice::CombineBias)].iter_mut().zip(&d_mixed_pre) {
                    *g += d;
                }
                d_joined.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(self.slice(Slice::CombineWeight), h, 2 * h, &d_mixed_pre, &mut d_joined);
                for k in 0..h {
                    d_hidden[k] += d_joined[k];
                }
                let d_context = &d_joined[h..];

                // Attention: context = sum_i a_i e_i, a = softmax(q . e_i * scale).
                let mut d_attn = vec![0.0; n];
                for i in 0..n {
                    let e = &encoded.states[i * h..(i + 1) * h];
                    d_attn[i] = dot(d_context, e);
                    let a = s.attention[i];
                    for (ds, dc) in d_states[i * h..(i + 1) * h].iter_mut().zip(d_context) {
                        *ds += a * dc;
                    }
                }
                let mean: f64 = s.attention.iter().zip(&d_attn).map(|(a, d)| a * d).sum();
                let mut d_query = vec![0.0; h];
                for i in 0..n {
                    let d_score = s.attention[i] * (d_attn[i] - mean) * scale;
                    if d_score == 0.0 {
                        continue;
                    }
                    let e = &encoded.states[i * h..(i + 1) * h];
                    for k in 0..h {
                        d_query[k] += d_score * e[k];
                        d_states[i * h + k] += d_score * s.query[k];
                    }
                }
                outer_acc(&mut grad[l.range(Slice::AttentionQuery)], h, h, &d_query, &s.hidden);
                matvec_t_acc(self.slice(Slice::AttentionQuery), h, h, &d_query, &mut d_hidden);
            }

            if d_hidden.iter().all(|&x| x == 0.0) {
                continue;
            }
            for k in 0..h {
                d_pre[k] = d_hidden[k] * (1.0 - s.hidden[k] * s.hidden[k]);
            }
            let prev_hidden = if t > 0 { &trace.steps[t - 1].hidden } else { &zeros };
            outer_acc(&mut grad[l.range(Slice::DecoderInput)], h, h, &d_pre, &s.input);
            outer_acc(&mut grad[l.range(Slice::DecoderRecurrent)], h, h, &d_pre, prev_hidden);
            for (g, d) in grad[l.range(Slice::DecoderBias)].iter_mut().zip(&d_pre) {
                *g += d;
            }
            let mut d_input = vec![0.0; h];
            matvec_t_acc(self.slice(Slice::DecoderInput), h, h, &d_pre, &mut d_input);
            let emb = l.range(Slice::Embedding);
            let pos = l.range(Slice::DecoderPosition);
            let tok = s.input_token as usize;
            for k in 0..h {
                grad[emb.start + tok * h + k] += d_input[k];
                grad[pos.start + s.position * h + k] += d_input[k];
            }
            if t > 0 {
                matvec_t_acc(self.slice(Slice::DecoderRecurrent), h, h, &d_pre, &mut d_hidden_next);
            }
        }
    }

    fn backward_encoder(&self, encoded: &Encoded, d_states: &[f64], grad: &mut [f64]) {
        let h = self.config.hidden_size;
        let l = &self.layout;
        let mut d_pre = vec![0.0; h];
        for (i, &tok) in encoded.tokens.iter().enumerate() {
            let e = &encoded.states[i * h..(i + 1) * h];
            let de = &d_states[i * h..(i + 1) * h];
            if de.iter().all(|&x| x == 0.0) {
                continue;
            }
            for k in 0..h {
                d_pre[k] = de[k] * (1.0 - e[k] * e[k]);
            }
            let u = &encoded.inputs[i * h..(i + 1) * h];
            outer_acc(&mut grad[l.range(Slice::EncoderWeight)], h, h, &d_pre, u);
            for (g, d) in grad[l.range(Slice::EncoderBias)].iter_mut().zip(&d_pre) {
                *g += d;
            }
            let mut du = vec![0.0; h];
            matvec_t_acc(self.slice(Slice::EncoderWeight), h, h, &d_pre, &mut du);
            let emb = l.range(Slice::Embedding).start + tok as usize * h;
            let pos = l.range(Slice::EncoderPosition).start + i * h;
            for k in 0..h {
                grad[emb + k] += du[k];
                grad[pos + k] += du[k];
            }
        }
    }

    /// First slice containing a non-finite parameter, if any.
    pub fn non_finite_slice(&self) -> Option<Slice> {
        first_non_finite(&self.layout, &self.params)
    }
}

pub(crate) fn first_non_finite(layout: &Layout, values: &[f64]) -> Option<Slice> {
    values
        .iter()
        .position(|x| !x.is_finite())
        .map(|i| layout.slice_of(i))
}

/// Mean of per-pair teacher-forced log-likelihood of `target` picked by `select`.
pub fn mean_log_likelihood<'a>(
    model: &SeqModel,
    batch: &'a [ExamplePair],
    select: impl Fn(&'a ExamplePair) -> &'a TokenSequence,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in batch {
        total += model
            .sequence_log_probs(&pair.document, select(pair))?
            .iter()
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x` for row-major `W` of shape `rows x cols`.
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `dx += W^T dy`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let d = dy[r];
        if d == 0.0 {
            continue;
        }
        for (x, wv) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *x += d * wv;
        }
    }
}

/// `gw += dy x^T`.
fn outer_acc(gw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let d = dy[r];
        if d == 0.0 {
            continue;
        }
        for (g, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(vocab: usize, hidden: usize, seed: u64) -> SeqModel {
        let cfg = ModelConfig {
            vocab_size: vocab,
            hidden_size: hidden,
            context_window: 12,
            temperature: 1.0,
        };
        SeqModel::new(cfg, seed).unwrap()
    }

    fn seq(t: &[u32]) -> TokenSequence {
        TokenSequence::new(t.to_vec())
    }

    #[test]
    fn uniform_model_is_uniform() {
        let m = SeqModel::uniform(ModelConfig::new(4)).unwrap();
        let p = m.next_token_dist(&seq(&[3, 2]), &seq(&[])).unwrap();
        for x in p {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let lp = m.sequence_log_probs(&seq(&[3, 2]), &seq(&[3, 3, 1, 2, 2])).unwrap();
        assert_eq!(lp.len(), 5);
        for x in lp {
            assert!((x + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_is_deterministic() {
        let m = tiny(9, 8, 1);
        let a = m.next_token_dist(&seq(&[3, 4, 5]), &seq(&[3])).unwrap();
        let b = m.next_token_dist(&seq(&[3, 4, 5]), &seq(&[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn document_conditions_the_distribution() {
        let m = tiny(9, 8, 1);
        let a = m.next_token_dist(&seq(&[3, 4, 5]), &seq(&[])).unwrap();
        let b = m.next_token_dist(&seq(&[6, 7, 8]), &seq(&[])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_range_tokens_rejected() {
        let m = tiny(9, 8, 1);
        assert!(matches!(
            m.next_token_dist(&seq(&[3, 40]), &seq(&[])),
            Err(Error::TokenOutOfRange { id: 40, .. })
        ));
        assert!(m.next_token_dist(&seq(&[3]), &seq(&[12])).is_err());
        assert!(m.sequence_log_probs(&seq(&[3]), &seq(&[])).is_err());
    }

    #[test]
    fn long_inputs_are_clamped_to_the_window() {
        let m = tiny(9, 8, 2);
        let long: Vec<u32> = (0..40).map(|i| 3 + (i % 6)).collect();
        let lp = m.sequence_log_probs(&seq(&long), &seq(&long)).unwrap();
        assert_eq!(lp.len(), 40);
        assert!(lp.iter().all(|x| x.is_finite() && *x <= 0.0));
    }

    #[test]
    fn step_matches_teacher_forcing() {
        let m = tiny(9, 8, 5);
        let doc = seq(&[3, 4, 5, 6]);
        let target = seq(&[4, 5, 1]);
        let lp = m.sequence_log_probs(&doc, &target).unwrap();
        let enc = m.encode(&doc).unwrap();
        let mut state = m.start_state();
        let mut prev = BOS;
        for (j, &y) in target.tokens().iter().enumerate() {
            let (next, logp) = m.step(&enc, &state, prev).unwrap();
            assert!((logp[y as usize] - lp[j]).abs() < 1e-12);
            state = next;
            prev = y;
        }
    }

    #[test]
    fn slices_cover_the_parameter_vector() {
        let m = tiny(7, 4, 0);
        let mut covered = 0;
        for s in Slice::ALL {
            covered += m.layout().range(s).len();
        }
        assert_eq!(covered, m.num_params());
        assert_eq!(m.layout().slice_of(0), Slice::Embedding);
        assert_eq!(m.layout().slice_of(m.num_params() - 1), Slice::OutputBias);
    }

    proptest! {
        #[test]
        fn next_token_dist_is_normalized(
            seed in 0u64..1000,
            doc in proptest::collection::vec(3u32..10, 1..10),
            prefix in proptest::collection::vec(1u32..10, 0..6),
        ) {
            let m = tiny(10, 6, seed);
            let p = m.next_token_dist(&seq(&doc), &seq(&prefix)).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn teacher_forcing_agrees_with_next_token_dist(
            seed in 0u64..1000,
            doc in proptest::collection::vec(3u32..10, 1..10),
            target in proptest::collection::vec(1u32..10, 1..6),
        ) {
            let m = tiny(10, 6, seed);
            let lp = m.sequence_log_probs(&seq(&doc), &seq(&target)).unwrap();
            for j in 0..target.len() {
                let p = m.next_token_dist(&seq(&doc), &seq(&target[..j])).unwrap();
                prop_assert!((lp[j].exp() - p[target[j] as usize]).abs() < 1e-9);
                prop_assert!(lp[j] <= 0.0);
            }
        }
    }
}
