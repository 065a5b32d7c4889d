//! Base-model pretraining, candidate generation and contrastive fine-tuning
//! with early stopping on the fine-tuning metric.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ExamplePair;
use crate::crl::{rank_candidates, Candidate, CrlConfig, LossBreakdown};
use crate::decoding::{beam_search, diverse_beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricSuite};
use crate::model::{
    apply_update, objective, Checkpoint, LossSpec, MleOptions, Optimizer, OptimizerState,
    SeqModel, TrainItem,
};
use crate::vocab::{TokenSequence, Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop as soon as the running mean of batch losses drops below this value.
    pub target_loss: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 1,
            optimizer: Optimizer::adam(),
            target_loss: None,
        }
    }
}

/// Smoothing factor of the running batch loss used by `target_loss`.
const LOSS_SMOOTHING: f64 = 0.95;

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "pretraining needs learning_rate > 0 and batch_size >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: SeqModel,
    /// Mean training loss per epoch, measured on each batch before its update.
    pub epoch_losses: Vec<f64>,
    /// Number of parameter updates performed.
    pub steps: u64,
}

/// MLE training of `initial` on `corpus`.
pub fn pretrain_base(initial: SeqModel, corpus: &[ExamplePair], config: &PretrainConfig) -> Result<Pretrained> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.validate()?;
    let mut model = initial;
    let mut state = OptimizerState::new(config.optimizer, model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mle_only = CrlConfig {
        gamma: 0.0,
        ..CrlConfig::default()
    };
    let mut running: Option<f64> = None;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<TrainItem> = batch
                .iter()
                .map(|&i| TrainItem {
                    document: &corpus[i].document,
                    reference: &corpus[i].reference,
                    candidates: &[],
                })
                .collect();
            let spec = LossSpec {
                items: &items,
                crl: mle_only,
                mle: MleOptions::TRAINING,
            };
            let (loss, grad) = objective(&model, &spec, true)?;
            total += loss.combined * batch.len() as f64;
            seen += batch.len();
            apply_update(&mut model, &grad.expect("gradient requested"), &mut state, config.learning_rate)?;
            let r = running.map_or(loss.combined, |r| LOSS_SMOOTHING * r + (1.0 - LOSS_SMOOTHING) * loss.combined);
            running = Some(r);
            if config.target_loss.is_some_and(|t| r < t) {
                epoch_losses.push(total / seen as f64);
                break 'epochs;
            }
        }
        epoch_losses.push(total / seen as f64);
    }
    Ok(Pretrained {
        model,
        epoch_losses,
        steps: state.steps(),
    })
}

/// Candidates for one training example, in decoding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub example_id: String,
    pub candidates: Vec<Candidate>,
}

/// Decodes every document with diverse beam search, drops empty and duplicate
/// outputs, and scores what remains under each of `metrics`.
pub fn generate_candidate_sets(
    model: &SeqModel,
    corpus: &[ExamplePair],
    beam: &BeamConfig,
    metrics: &[MetricKind],
    suite: &MetricSuite<'_>,
    alpha: f64,
) -> Result<Vec<CandidateSet>> {
    beam.validate()?;
    corpus
        .iter()
        .map(|pair| {
            candidate_set(model, pair, beam, metrics, suite, alpha).map_err(Error::in_example(&pair.id))
        })
        .collect()
}

fn candidate_set(
    model: &SeqModel,
    pair: &ExamplePair,
    beam: &BeamConfig,
    metrics: &[MetricKind],
    suite: &MetricSuite<'_>,
    alpha: f64,
) -> Result<CandidateSet> {
    let hyps = diverse_beam_search(model, &pair.document, beam)?;
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    for h in hyps {
        if h.tokens.tokens().iter().all(|&t| t == EOS) || !seen.insert(h.tokens.clone()) {
            continue;
        }
        let mut c = Candidate::new(h.tokens, h.token_log_probs, alpha, h.group)?;
        for &kind in metrics {
            let score = suite.evaluate(kind, &c.tokens, &pair.document, &pair.reference)?;
            c.metric_scores.insert(kind, score);
        }
        candidates.push(c);
    }
    if candidates.is_empty() {
        return Err(Error::NoCandidates(pair.id.clone()));
    }
    Ok(CandidateSet {
        example_id: pair.id.clone(),
        candidates,
    })
}

#[derive(Serialize)]
struct CandidateLine<'a> {
    id: &'a str,
    candidates: Vec<CandidateEntry<'a>>,
}

#[derive(Serialize)]
struct CandidateEntry<'a> {
    text: String,
    #[serde(flatten)]
    candidate: &'a Candidate,
}

#[derive(Deserialize)]
struct CandidateLineOwned {
    id: String,
    candidates: Vec<Candidate>,
}

/// One JSON object per example: `{"id", "candidates": [{"text", "tokens", ...}]}`.
pub fn save_candidate_sets(path: &Path, sets: &[CandidateSet], vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for set in sets {
        let line = CandidateLine {
            id: &set.example_id,
            candidates: set
                .candidates
                .iter()
                .map(|c| CandidateEntry {
                    text: vocab.decode(&c.tokens),
                    candidate: c,
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_candidate_sets(path: &Path) -> Result<Vec<CandidateSet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CandidateLineOwned = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        sets.push(CandidateSet {
            example_id: parsed.id,
            candidates: parsed.candidates,
        });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub metric: MetricKind,
    pub num_train: usize,
    pub num_valid: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub candidates_per_doc: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub valid_beam_width: usize,
    pub max_length: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let crl = CrlConfig::default();
        TrainConfig {
            metric: MetricKind::RougeMean,
            num_train: 1000,
            num_valid: 200,
            learning_rate: 1e-4,
            gamma: crl.gamma,
            lambda: crl.lambda,
            alpha: crl.alpha,
            candidates_per_doc: 8,
            max_epochs: 20,
            patience: 3,
            seed: 7,
            batch_size: 4,
            valid_beam_width: 4,
            max_length: 32,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn crl(&self) -> CrlConfig {
        CrlConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crl().validate()?;
        let positive = [
            ("num_train", self.num_train),
            ("num_valid", self.num_valid),
            ("patience", self.patience),
            ("candidates_per_doc", self.candidates_per_doc),
            ("batch_size", self.batch_size),
            ("valid_beam_width", self.valid_beam_width),
            ("max_length", self.max_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mle: f64,
    pub ctr: f64,
    pub combined: f64,
    pub valid_score: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tl_mle\tl_ctr\tl_com\tvalid_score";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.mle, self.ctr, self.combined, self.valid_score
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSystem {
    pub name: String,
    pub checkpoint: Checkpoint,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainedSystem {
    pub fn model(&self) -> Result<SeqModel> {
        self.checkpoint.to_model(None)
    }

    pub fn best_score(&self) -> f64 {
        self.history[self.best_epoch - 1].valid_score
    }
}

/// What [`EarlyStopping::observe`] concluded about an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Strictly better than every earlier epoch; keep this checkpoint.
    Improved,
    Stale,
    /// `patience` consecutive epochs without improvement.
    Stop,
}

/// Tracks the best validation score and counts epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        if self.best.is_none_or(|(_, b)| score > b) {
            self.best = Some((epoch, score));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stale
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }
}

/// `CRL-COM (R)` style name for a system fine-tuned with `metric`.
pub fn system_name(metric: MetricKind) -> String {
    format!("CRL-COM ({})", metric.system_tag())
}

/// Mean validation score under `metric` of the top beam-search output.
pub fn validation_score(
    model: &SeqModel,
    valid: &[ExamplePair],
    suite: &MetricSuite<'_>,
    metric: MetricKind,
    beam: &BeamConfig,
) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in valid {
        let hyps = beam_search(model, &pair.document, beam).map_err(Error::in_example(&pair.id))?;
        let top = &hyps[0];
        total += suite
            .evaluate(metric, &top.tokens, &pair.document, &pair.reference)
            .map_err(Error::in_example(&pair.id))?
            .value;
    }
    Ok(total / valid.len() as f64)
}

/// Contrastive fine-tuning of `base` with early stopping on the configured
/// metric. `log` receives one tab-separated line per epoch.
pub fn finetune(
    base: &SeqModel,
    candidate_sets: &[CandidateSet],
    train: &[ExamplePair],
    valid: &[ExamplePair],
    suite: &MetricSuite<'_>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainedSystem> {
    config.validate()?;
    if train.len() < config.num_train || valid.len() < config.num_valid {
        return Err(Error::InvalidConfig(format!(
            "need {} train / {} valid examples, have {} / {}",
            config.num_train,
            config.num_valid,
            train.len(),
            valid.len()
        )));
    }
    let train = &train[..config.num_train];
    let valid = &valid[..config.num_valid];
    let by_id: BTreeMap<&str, &CandidateSet> =
        candidate_sets.iter().map(|s| (s.example_id.as_str(), s)).collect();

    // Rankings depend only on the frozen metric scores, so compute them once.
    let mut ranked: Vec<Vec<TokenSequence>> = Vec::with_capacity(train.len());
    for pair in train {
        let set = by_id
            .get(pair.id.as_str())
            .ok_or_else(|| Error::MissingCandidates(pair.id.clone()))?;
        let pool = &set.candidates[..set.candidates.len().min(config.candidates_per_doc)];
        if pool.is_empty() {
            return Err(Error::NoCandidates(pair.id.clone()));
        }
        ranked.push(
            rank_candidates(&pair.id, pool, config.metric)
                .map_err(Error::in_example(&pair.id))?
                .token_sequences(),
        );
    }

    let valid_beam = BeamConfig::beam(config.valid_beam_width, config.max_length);
    let crl = config.crl();
    let mut model = base.clone();
    let mut state = OptimizerState::new(config.optimizer, model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<Checkpoint> = None;

    if let Some(out) = log.as_deref_mut() {
        writeln!(out, "{}", EpochRecord::HEADER).map_err(|e| Error::io("<training log>", e))?;
    }
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown {
            mle: 0.0,
            ctr: 0.0,
            combined: 0.0,
        };
        for batch in order.chunks(config.batch_size) {
            let items: Vec<TrainItem> = batch
                .iter()
                .map(|&i| TrainItem {
                    document: &train[i].document,
                    reference: &train[i].reference,
                    candidates: &ranked[i],
                })
                .collect();
            let spec = LossSpec {
                items: &items,
                crl,
                mle: MleOptions::TRAINING,
            };
            let (loss, grad) = objective(&model, &spec, true)?;
            let w = batch.len() as f64;
            sums.mle += loss.mle * w;
            sums.ctr += loss.ctr * w;
            sums.combined += loss.combined * w;
            apply_update(&mut model, &grad.expect("gradient requested"), &mut state, config.learning_rate)?;
        }
        let n = train.len() as f64;
        let score = validation_score(&model, valid, suite, config.metric, &valid_beam)?;
        let record = EpochRecord {
            epoch,
            mle: sums.mle / n,
            ctr: sums.ctr / n,
            combined: sums.combined / n,
            valid_score: score,
        };
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "{}", record.log_line()).map_err(|e| Error::io("<training log>", e))?;
        }
        history.push(record);
        match stopper.observe(epoch, score) {
            Verdict::Improved => {
                best = Some(Checkpoint::from_model(&model, state.steps(), rng.get_seed(), rng.get_word_pos()));
            }
            Verdict::Stale => {}
            Verdict::Stop => break,
        }
    }
    let (checkpoint, best_epoch) = best.zip(stopper.best_epoch()).ok_or_else(|| {
        Error::InvalidConfig("max_epochs must be >= 1 to produce a trained system".into())
    })?;
    Ok(TrainedSystem {
        name: system_name(config.metric),
        checkpoint,
        config: *config,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    fn corpus() -> (Vocabulary, Vec<ExamplePair>) {
        let c = generate_synthetic(&SynthConfig {
            num_examples: 24,
            facts_per_doc: 2,
            vocab_size: 24,
            seed: 3,
        })
        .unwrap();
        (c.vocab, c.pairs)
    }

    fn model(vocab: &Vocabulary, seed: u64) -> SeqModel {
        let config = ModelConfig {
            vocab_size: vocab.len(),
            hidden_size: 8,
            context_window: 16,
            temperature: 1.0,
        };
        SeqModel::new(config, seed).unwrap()
    }

    fn small_train(metric: MetricKind) -> TrainConfig {
        TrainConfig {
            metric,
            num_train: 12,
            num_valid: 6,
            learning_rate: 1e-3,
            candidates_per_doc: 4,
            max_epochs: 3,
            patience: 1,
            batch_size: 4,
            max_length: 12,
            ..TrainConfig::default()
        }
    }

    fn sets(m: &SeqModel, pairs: &[ExamplePair], suite: &MetricSuite<'_>) -> Vec<CandidateSet> {
        let beam = BeamConfig::diverse(4, 12, 1.0);
        generate_candidate_sets(m, pairs, &beam, &[MetricKind::RougeMean, MetricKind::DaeLike], suite, 1.0).unwrap()
    }

    #[test]
    fn early_stopping_patience_one_stops_at_first_drop() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.5), Verdict::Improved);
        assert_eq!(s.observe(2, 0.4), Verdict::Stop);
        assert_eq!(s.best_epoch(), Some(1));
        assert_eq!(s.best_score(), Some(0.5));
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        let mut s = EarlyStopping::new(2);
        let verdicts: Vec<Verdict> = [1.0, 2.0, 2.0, 3.0, 3.0, 2.5]
            .iter()
            .enumerate()
            .map(|(i, &v)| s.observe(i + 1, v))
            .collect();
        use Verdict::*;
        assert_eq!(verdicts, [Improved, Improved, Stale, Improved, Stale, Stop]);
        assert_eq!(s.best_epoch(), Some(4));
        assert_eq!(EarlyStopping::new(3).best_epoch(), None);
    }

    #[test]
    fn pretraining_is_deterministic_and_lowers_the_loss() {
        let (vocab, pairs) = corpus();
        let cfg = PretrainConfig {
            epochs: 4,
            learning_rate: 1e-2,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let a = pretrain_base(model(&vocab, 1), &pairs, &cfg).unwrap();
        let b = pretrain_base(model(&vocab, 1), &pairs, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.epoch_losses.len(), 4);
        assert_eq!(a.steps, 4 * 6);
        assert!(a.epoch_losses[3] < a.epoch_losses[0], "{:?}", a.epoch_losses);
    }

    #[test]
    fn pretraining_stops_at_the_target_loss() {
        let (vocab, pairs) = corpus();
        let cfg = PretrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 4,
            target_loss: Some(1e6),
            ..PretrainConfig::default()
        };
        let out = pretrain_base(model(&vocab, 1), &pairs, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert!(pretrain_base(model(&vocab, 1), &[], &cfg).is_err());
    }

    #[test]
    fn candidate_sets_are_deduplicated_and_fully_scored() {
        let (vocab, pairs) = corpus();
        let m = model(&vocab, 2);
        let suite = MetricSuite::new(&vocab, None);
        for set in sets(&m, &pairs[..6], &suite) {
            assert!(!set.candidates.is_empty() && set.candidates.len() <= 4);
            let distinct: HashSet<_> = set.candidates.iter().map(|c| c.tokens.clone()).collect();
            assert_eq!(distinct.len(), set.candidates.len());
            for c in &set.candidates {
                assert!(c.metric(MetricKind::RougeMean).is_some());
                assert!(c.metric(MetricKind::DaeLike).is_some());
                assert!(c.group < 4);
            }
        }
    }

    #[test]
    fn bart_candidates_need_a_scorer() {
        let (vocab, pairs) = corpus();
        let m = model(&vocab, 2);
        let suite = MetricSuite::new(&vocab, None);
        let beam = BeamConfig::diverse(2, 8, 1.0);
        let err = generate_candidate_sets(&m, &pairs[..1], &beam, &[MetricKind::BartLike], &suite, 1.0).unwrap_err();
        assert!(matches!(err, Error::Example { .. }), "{err}");
    }

    #[test]
    fn candidate_files_round_trip() {
        let (vocab, pairs) = corpus();
        let m = model(&vocab, 2);
        let suite = MetricSuite::new(&vocab, None);
        let original = sets(&m, &pairs[..5], &suite);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_candidate_sets(&path, &original, &vocab).unwrap();
        assert_eq!(load_candidate_sets(&path).unwrap(), original);
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(load_candidate_sets(&path), Err(Error::Malformed { line: 1, .. })));
    }

    #[test]
    fn finetune_returns_the_best_validated_checkpoint() {
        let (vocab, pairs) = corpus();
        let base = model(&vocab, 4);
        let suite = MetricSuite::new(&vocab, None);
        let (train, valid) = pairs.split_at(12);
        let cands = sets(&base, train, &suite);
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 2,
            ..small_train(MetricKind::RougeMean)
        };
        let mut log = Vec::new();
        let sys = finetune(&base, &cands, train, valid, &suite, &cfg, Some(&mut log)).unwrap();
        assert_eq!(sys.name, "CRL-COM (R)");
        let log = String::from_utf8(log).unwrap();
        assert_eq!(log.lines().next(), Some(EpochRecord::HEADER));
        assert_eq!(log.lines().count(), sys.history.len() + 1);
        let scores: Vec<f64> = sys.history.iter().map(|r| r.valid_score).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sys.best_score(), max);
        assert_eq!(scores.iter().position(|&s| s == max), Some(sys.best_epoch - 1));
        let beam = BeamConfig::beam(cfg.valid_beam_width, cfg.max_length);
        let revalidated = validation_score(&sys.model().unwrap(), &valid[..6], &suite, cfg.metric, &beam).unwrap();
        assert_eq!(revalidated, sys.best_score());
    }

    #[test]
    fn without_the_contrastive_term_candidates_are_irrelevant() {
        let (vocab, pairs) = corpus();
        let base = model(&vocab, 4);
        let suite = MetricSuite::new(&vocab, None);
        let (train, valid) = pairs.split_at(12);
        let cands = sets(&base, train, &suite);
        let mut shuffled = cands.clone();
        for set in &mut shuffled {
            set.candidates.reverse();
            set.candidates.truncate(1);
        }
        let cfg = TrainConfig {
            gamma: 0.0,
            ..small_train(MetricKind::DaeLike)
        };
        let a = finetune(&base, &cands, train, valid, &suite, &cfg, None).unwrap();
        let b = finetune(&base, &shuffled, train, valid, &suite, &cfg, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.history.iter().all(|r| r.ctr.is_finite()));
        assert!(a.history.iter().all(|r| (r.combined - r.mle).abs() < 1e-12));
    }

    #[test]
    fn finetune_reports_missing_inputs() {
        let (vocab, pairs) = corpus();
        let base = model(&vocab, 4);
        let suite = MetricSuite::new(&vocab, None);
        let (train, valid) = pairs.split_at(12);
        let cands = sets(&base, &train[1..], &suite);
        let cfg = small_train(MetricKind::RougeMean);
        let err = finetune(&base, &cands, train, valid, &suite, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::MissingCandidates(ref id) if id == &train[0].id), "{err}");

        let cands = sets(&base, train, &suite);
        let bart = small_train(MetricKind::BartLike);
        let err = finetune(&base, &cands, train, valid, &suite, &bart, None).unwrap_err();
        assert!(matches!(err, Error::Example { .. }), "{err}");

        let too_many = TrainConfig { num_train: 500, ..cfg };
        assert!(matches!(
            finetune(&base, &cands, train, valid, &suite, &too_many, None),
            Err(Error::InvalidConfig(_))
        ));
    }
}
