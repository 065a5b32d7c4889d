//! Python bindings for the `crlsum` core: vocabulary, synthetic corpora, the
//! sequence model with its decoders, contrastive losses and metrics.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use crlsum::corpus::{generate_synthetic, ExamplePair, SynthConfig};
use crlsum::crl;
use crlsum::decoding::{self, BeamConfig, Hypothesis};
use crlsum::metrics;
use crlsum::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, SeqModel};
use crlsum::trainer::{pretrain_base, PretrainConfig};
use crlsum::vocab::{TokenId, TokenSequence};

create_exception!(crlsum_py, CrlsumError, PyException);

fn py_err(e: crlsum::Error) -> PyErr {
    CrlsumError::new_err(e.to_string())
}

fn seq(ids: Vec<TokenId>) -> TokenSequence {
    TokenSequence::new(ids)
}

#[pyclass(module = "crlsum_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Vocabulary {
    inner: crlsum::vocab::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    fn new(words: Vec<String>) -> Self {
        Vocabulary {
            inner: crlsum::vocab::Vocabulary::from_words(words),
        }
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.inner.encode(text).into_inner()
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        self.inner.decode(&seq(ids))
    }

    fn is_content(&self, id: TokenId) -> bool {
        self.inner.is_content(id)
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.inner.words().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Seeded synthetic corpus; `pairs` holds `(id, document_ids, reference_ids)`.
#[pyclass(module = "crlsum_py", frozen)]
struct Corpus {
    vocab: Vocabulary,
    pairs: Vec<ExamplePair>,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (num_examples = 1400, facts_per_doc = 3, vocab_size = 256, seed = 7))]
    fn synthetic(num_examples: usize, facts_per_doc: usize, vocab_size: usize, seed: u64) -> PyResult<Self> {
        let c = generate_synthetic(&SynthConfig {
            num_examples,
            facts_per_doc,
            vocab_size,
            seed,
        })
        .map_err(py_err)?;
        Ok(Corpus {
            vocab: Vocabulary { inner: c.vocab },
            pairs: c.pairs,
        })
    }

    #[getter]
    fn vocab(&self) -> Vocabulary {
        self.vocab.clone()
    }

    #[getter]
    fn pairs(&self) -> Vec<(String, Vec<TokenId>, Vec<TokenId>)> {
        self.pairs
            .iter()
            .map(|p| (p.id.clone(), p.document.tokens().to_vec(), p.reference.tokens().to_vec()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.pairs.len()
    }
}

type PyHypothesis = (Vec<TokenId>, f64, Vec<f64>, usize);

fn hypotheses(found: Vec<Hypothesis>) -> Vec<PyHypothesis> {
    found
        .into_iter()
        .map(|h| (h.tokens.into_inner(), h.log_prob, h.token_log_probs, h.group))
        .collect()
}

#[pyclass(module = "crlsum_py", frozen)]
struct Model {
    inner: SeqModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, hidden_size = 32, context_window = 64, temperature = 1.0, seed = 0))]
    fn new(vocab_size: usize, hidden_size: usize, context_window: usize, temperature: f64, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            hidden_size,
            context_window,
            temperature,
        };
        Ok(Model {
            inner: SeqModel::new(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(py_err)?;
        Ok(Model {
            inner: ckpt.to_model(None).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::from_model(&self.inner, 0, [0; 32], 0), &path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Per-token log-probabilities of `target` given `document`.
    fn sequence_log_probs(&self, document: Vec<TokenId>, target: Vec<TokenId>) -> PyResult<Vec<f64>> {
        self.inner
            .sequence_log_probs(&seq(document), &seq(target))
            .map_err(py_err)
    }

    /// Beam search; each hypothesis is `(tokens, log_prob, token_log_probs, group)`.
    #[pyo3(signature = (document, beam_width = 4, max_length = 32))]
    fn beam_search(&self, document: Vec<TokenId>, beam_width: usize, max_length: usize) -> PyResult<Vec<PyHypothesis>> {
        decoding::beam_search(&self.inner, &seq(document), &BeamConfig::beam(beam_width, max_length))
            .map(hypotheses)
            .map_err(py_err)
    }

    #[pyo3(signature = (document, num_groups = 8, beam_width = None, max_length = 32, diversity_strength = 1.0))]
    fn diverse_beam_search(
        &self,
        document: Vec<TokenId>,
        num_groups: usize,
        beam_width: Option<usize>,
        max_length: usize,
        diversity_strength: f64,
    ) -> PyResult<Vec<PyHypothesis>> {
        let config = BeamConfig {
            beam_width: beam_width.unwrap_or(num_groups),
            ..BeamConfig::diverse(num_groups, max_length, diversity_strength)
        };
        decoding::diverse_beam_search(&self.inner, &seq(document), &config)
            .map(hypotheses)
            .map_err(py_err)
    }

    /// MLE training on `corpus`; returns the trained model and per-epoch losses.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (corpus, epochs = 7, learning_rate = 3e-3, batch_size = 8, seed = 1, limit = None))]
    fn pretrain(
        &self,
        py: Python<'_>,
        corpus: &Corpus,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        limit: Option<usize>,
    ) -> PyResult<(Model, Vec<f64>)> {
        let pairs = &corpus.pairs[..limit.unwrap_or(corpus.pairs.len()).min(corpus.pairs.len())];
        let config = PretrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
            ..PretrainConfig::default()
        };
        let initial = self.inner.clone();
        let out = py
            .detach(|| pretrain_base(initial, pairs, &config))
            .map_err(py_err)?;
        Ok((Model { inner: out.model }, out.epoch_losses))
    }
}

/// Length-normalised sequence score `sum(lp) / len^alpha`.
#[pyfunction]
#[pyo3(signature = (token_log_probs, alpha = 1.0))]
fn f_score(token_log_probs: Vec<f64>, alpha: f64) -> PyResult<f64> {
    crl::f_score(&token_log_probs, alpha).map_err(py_err)
}

/// Pairwise margin loss over scores ordered best-first.
#[pyfunction]
#[pyo3(signature = (f, lam = 1.0))]
fn contrastive_loss(f: Vec<f64>, lam: f64) -> f64 {
    crl::contrastive_loss_from_scores(&f, lam)
}

#[pyfunction]
#[pyo3(signature = (f, lam = 1.0))]
fn contrastive_score_gradient(f: Vec<f64>, lam: f64) -> Vec<f64> {
    crl::contrastive_score_gradient(&f, lam)
}

/// Returns `(mle, ctr, combined)`.
#[pyfunction]
#[pyo3(signature = (mle, ctr, gamma = 100.0))]
fn combined_loss(mle: f64, ctr: f64, gamma: f64) -> PyResult<(f64, f64, f64)> {
    let b = crl::combined_loss(mle, ctr, gamma).map_err(py_err)?;
    Ok((b.mle, b.ctr, b.combined))
}

#[pyfunction]
fn rouge_n(hypothesis: Vec<TokenId>, reference: Vec<TokenId>, n: usize) -> PyResult<f64> {
    metrics::rouge_n(&seq(hypothesis), &seq(reference), n).map_err(py_err)
}

#[pyfunction]
fn rouge_l(hypothesis: Vec<TokenId>, reference: Vec<TokenId>) -> PyResult<f64> {
    metrics::rouge_l(&seq(hypothesis), &seq(reference)).map_err(py_err)
}

#[pyfunction]
fn bart_like(scorer: &Model, document: Vec<TokenId>, summary: Vec<TokenId>) -> PyResult<f64> {
    metrics::bart_like(&scorer.inner, &seq(document), &seq(summary)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (vocab, document, summary, window = 10))]
fn dae_like(vocab: &Vocabulary, document: Vec<TokenId>, summary: Vec<TokenId>, window: usize) -> PyResult<f64> {
    metrics::dae_like(&vocab.inner, &seq(document), &seq(summary), window).map_err(py_err)
}

#[pyfunction]
fn hallucination_rate(vocab: &Vocabulary, document: Vec<TokenId>, summary: Vec<TokenId>) -> PyResult<f64> {
    metrics::hallucination_rate(&vocab.inner, &seq(document), &seq(summary)).map_err(py_err)
}

#[pymodule]
fn crlsum_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CrlsumError", m.py().get_type::<CrlsumError>())?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(f_score, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_score_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(bart_like, m)?)?;
    m.add_function(wrap_pyfunction!(dae_like, m)?)?;
    m.add_function(wrap_pyfunction!(hallucination_rate, m)?)?;
    Ok(())
}
