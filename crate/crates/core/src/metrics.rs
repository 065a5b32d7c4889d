//! Quality metrics used to rank candidate summaries.
//!
//! Reference-based metrics (the ROUGE family) compare a summary with the
//! reference; reference-free metrics compare it with the source document.
//! [`MetricSuite::evaluate`] applies that routing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SeqModel;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Default co-occurrence window for [`dae_like`], in document content tokens.
pub const DEFAULT_DAE_WINDOW: usize = 10;

/// Arc scores for [`dae_like`].
pub const ARC_SUPPORTED: f64 = 1.0;
pub const ARC_DISTANT: f64 = 0.5;
pub const ARC_UNSUPPORTED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[serde(rename = "rouge-1")]
    Rouge1,
    #[serde(rename = "rouge-2")]
    Rouge2,
    #[serde(rename = "rouge-l")]
    RougeL,
    #[serde(rename = "rouge")]
    RougeMean,
    BartLike,
    DaeLike,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Rouge1,
        MetricKind::Rouge2,
        MetricKind::RougeL,
        MetricKind::RougeMean,
        MetricKind::BartLike,
        MetricKind::DaeLike,
    ];

    pub fn reference_free(self) -> bool {
        matches!(self, MetricKind::BartLike | MetricKind::DaeLike)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rouge1 => "rouge-1",
            MetricKind::Rouge2 => "rouge-2",
            MetricKind::RougeL => "rouge-l",
            MetricKind::RougeMean => "rouge",
            MetricKind::BartLike => "bart-like",
            MetricKind::DaeLike => "dae-like",
        }
    }

    /// Single-letter system tag: R, B or D.
    pub fn system_tag(self) -> &'static str {
        match self {
            MetricKind::BartLike => "B",
            MetricKind::DaeLike => "D",
            _ => "R",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn range_ok(self, value: f64) -> bool {
        match self {
            MetricKind::BartLike => value <= 0.0,
            _ => (0.0..=1.0).contains(&value),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rouge" | "rouge-mean" | "r" => Ok(MetricKind::RougeMean),
            "rouge-1" | "r1" => Ok(MetricKind::Rouge1),
            "rouge-2" | "r2" => Ok(MetricKind::Rouge2),
            "rouge-l" | "rl" => Ok(MetricKind::RougeL),
            "bart-like" | "bart" | "b" => Ok(MetricKind::BartLike),
            "dae-like" | "dae" | "d" => Ok(MetricKind::DaeLike),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub kind: MetricKind,
    pub value: f64,
}

impl MetricScore {
    pub fn new(kind: MetricKind, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{kind} score")));
        }
        if !kind.range_ok(value) {
            return Err(Error::Range(format!("{kind} score {value} outside its range")));
        }
        Ok(MetricScore { kind, value })
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// F1 from an overlap count and the two totals. Two sequences with no n-grams
/// at all score 1.0 when identical and 0.0 otherwise.
fn f1(overlap: usize, hyp_total: usize, ref_total: usize, identical: bool) -> f64 {
    if hyp_total == 0 || ref_total == 0 {
        return if identical { 1.0 } else { 0.0 };
    }
    2.0 * overlap as f64 / (hyp_total + ref_total) as f64
}

/// ROUGE-N F1 over clipped n-gram counts.
pub fn rouge_n(hypothesis: &TokenSequence, reference: &TokenSequence, n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidConfig(format!("rouge-n supports n in {{1,2}}, got {n}")));
    }
    if reference.is_empty() {
        return Err(Error::EmptySequence("reference"));
    }
    let hyp = hypothesis.without_eos();
    let (h, r) = (hyp.tokens(), reference.tokens());
    let hyp_counts = ngram_counts(h, n);
    let ref_counts = ngram_counts(r, n);
    let overlap = hyp_counts
        .iter()
        .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let hyp_total = h.len().saturating_sub(n - 1);
    let ref_total = r.len().saturating_sub(n - 1);
    Ok(f1(overlap, hyp_total, ref_total, h == r))
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(hypothesis: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptySequence("reference"));
    }
    let hyp = hypothesis.without_eos();
    let (h, r) = (hyp.tokens(), reference.tokens());
    Ok(f1(lcs_len(h, r), h.len(), r.len(), h == r))
}

/// Length-normalized log-likelihood of `summary` given `document` under a
/// frozen scorer.
pub fn bart_like(scorer: &SeqModel, document: &TokenSequence, summary: &TokenSequence) -> Result<f64> {
    if summary.is_empty() {
        return Err(Error::EmptySequence("summary"));
    }
    let lp = scorer.sequence_log_probs(document, summary)?;
    let value = lp.iter().sum::<f64>() / lp.len() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("bart-like score".into()));
    }
    Ok(value.min(0.0))
}

/// Arc-level factuality score: the minimum over adjacent content-token pairs of
/// the summary. A pair scores [`ARC_SUPPORTED`] when both tokens occur within
/// `window` content positions of each other in the document, [`ARC_DISTANT`]
/// when both occur but never that close, and [`ARC_UNSUPPORTED`] when either
/// is missing. A single content token scores by presence; a summary with no
/// content tokens makes no claims and scores 1.0.
pub fn dae_like(
    vocab: &Vocabulary,
    document: &TokenSequence,
    summary: &TokenSequence,
    window: usize,
) -> Result<f64> {
    if summary.is_empty() {
        return Err(Error::EmptySequence("summary"));
    }
    if window < 2 {
        return Err(Error::InvalidConfig(format!("dae window must be >= 2, got {window}")));
    }
    let mut positions: HashMap<TokenId, Vec<usize>> = HashMap::new();
    for (p, &t) in document
        .tokens()
        .iter()
        .filter(|&&t| vocab.is_content(t))
        .enumerate()
    {
        positions.entry(t).or_default().push(p);
    }
    let content: Vec<TokenId> = summary
        .tokens()
        .iter()
        .copied()
        .filter(|&t| vocab.is_content(t))
        .collect();
    let present = |t: TokenId| positions.contains_key(&t);
    match content.len() {
        0 => return Ok(1.0),
        1 => return Ok(if present(content[0]) { ARC_SUPPORTED } else { ARC_UNSUPPORTED }),
        _ => {}
    }
    let mut score = ARC_SUPPORTED;
    for pair in content.windows(2) {
        let arc = match (positions.get(&pair[0]), positions.get(&pair[1])) {
            (Some(ps), Some(qs)) => {
                let near = ps
                    .iter()
                    .any(|&p| qs.iter().any(|&q| p != q && p.abs_diff(q) < window));
                if near {
                    ARC_SUPPORTED
                } else {
                    ARC_DISTANT
                }
            }
            _ => ARC_UNSUPPORTED,
        };
        score = score.min(arc);
    }
    Ok(score)
}

/// Fraction of the summary's content tokens absent from the document.
pub fn hallucination_rate(
    vocab: &Vocabulary,
    document: &TokenSequence,
    summary: &TokenSequence,
) -> Result<f64> {
    if summary.is_empty() {
        return Err(Error::EmptySequence("summary"));
    }
    let doc: HashSet<TokenId> = document.tokens().iter().copied().collect();
    let content: Vec<TokenId> = summary
        .tokens()
        .iter()
        .copied()
        .filter(|&t| vocab.is_content(t))
        .collect();
    if content.is_empty() {
        return Ok(0.0);
    }
    let absent = content.iter().filter(|t| !doc.contains(t)).count();
    Ok(absent as f64 / content.len() as f64)
}

/// Evaluates metrics with the routing of reference-free vs reference-based
/// kinds, counting calls per kind.
#[derive(Debug)]
pub struct MetricSuite<'a> {
    vocab: &'a Vocabulary,
    scorer: Option<&'a SeqModel>,
    dae_window: usize,
    calls: [AtomicU64; 6],
}

impl<'a> MetricSuite<'a> {
    pub fn new(vocab: &'a Vocabulary, scorer: Option<&'a SeqModel>) -> Self {
        MetricSuite {
            vocab,
            scorer,
            dae_window: DEFAULT_DAE_WINDOW,
            calls: Default::default(),
        }
    }

    pub fn with_dae_window(mut self, window: usize) -> Self {
        self.dae_window = window;
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn scorer(&self) -> Option<&SeqModel> {
        self.scorer
    }

    pub fn dae_window(&self) -> usize {
        self.dae_window
    }

    /// Number of [`MetricSuite::evaluate`] calls made for `kind`.
    pub fn calls(&self, kind: MetricKind) -> u64 {
        self.calls[kind.index()].load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        for c in &self.calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// `M(S)` = `M(S, D)` for reference-free kinds and `M(S, S^r)` otherwise.
    pub fn evaluate(
        &self,
        kind: MetricKind,
        summary: &TokenSequence,
        document: &TokenSequence,
        reference: &TokenSequence,
    ) -> Result<MetricScore> {
        self.calls[kind.index()].fetch_add(1, Ordering::Relaxed);
        let value = match kind {
            MetricKind::Rouge1 => rouge_n(summary, reference, 1)?,
            MetricKind::Rouge2 => rouge_n(summary, reference, 2)?,
            MetricKind::RougeL => rouge_l(summary, reference)?,
            MetricKind::RougeMean => {
                let r1 = rouge_n(summary, reference, 1)?;
                let r2 = rouge_n(summary, reference, 2)?;
                let rl = rouge_l(summary, reference)?;
                (r1 + r2 + rl) / 3.0
            }
            MetricKind::BartLike => {
                let scorer = self
                    .scorer
                    .ok_or_else(|| Error::MissingScorer(kind.to_string()))?;
                bart_like(scorer, document, summary)?
            }
            MetricKind::DaeLike => dae_like(self.vocab, document, summary, self.dae_window)?,
        };
        MetricScore::new(kind, value)
    }
}
