//! Document/reference corpora, the seeded synthetic fact corpus, summary
//! corruption, and human-evaluation annotation files.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// A source document and its reference summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub id: String,
    pub document: TokenSequence,
    pub reference: TokenSequence,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    document: String,
    reference: String,
}

/// Reads a JSON-lines corpus file, one `{id, document, reference}` record per line.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<ExamplePair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let document = vocab.encode(&record.document);
        let reference = vocab.encode(&record.reference);
        if document.is_empty() {
            return Err(malformed("empty document text".into()));
        }
        if reference.is_empty() {
            return Err(malformed("empty reference text".into()));
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        pairs.push(ExamplePair {
            id: record.id,
            document,
            reference,
        });
    }
    Ok(pairs)
}

pub fn save_corpus(path: &Path, pairs: &[ExamplePair], vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pair in pairs {
        let record = CorpusRecord {
            id: pair.id.clone(),
            document: vocab.decode(&pair.document),
            reference: vocab.decode(&pair.reference),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Vocabulary covering every token of a corpus file, in first-seen order.
pub fn build_vocabulary(path: &Path) -> Result<Vocabulary> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut texts = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        texts.push(record.document);
        texts.push(record.reference);
    }
    Ok(Vocabulary::build(texts.iter().map(String::as_str)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_examples: usize,
    pub facts_per_doc: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_examples: 1400,
            facts_per_doc: 3,
            vocab_size: 256,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub pairs: Vec<ExamplePair>,
}

const CONSONANTS: [char; 14] = [
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

fn syllable_word(index: usize) -> String {
    let c = CONSONANTS.len();
    let v = VOWELS.len();
    let mut s = String::with_capacity(4);
    s.push(CONSONANTS[index % c]);
    s.push(VOWELS[(index / c) % v]);
    s.push(CONSONANTS[(index / (c * v)) % c]);
    s.push(VOWELS[(index / (c * v * c)) % v]);
    s
}

/// Word pools for the synthetic corpus: `(vocabulary, nouns, verbs)`.
fn synthetic_vocabulary(vocab_size: usize) -> Result<(Vocabulary, Vec<TokenId>, Vec<TokenId>)> {
    const FIXED: [&str; 3] = [".", "the", "a"];
    let reserved = crate::vocab::SPECIAL_TOKENS.len() + FIXED.len();
    let content = vocab_size.saturating_sub(reserved);
    let verbs = (content / 4).max(1);
    let nouns = content.saturating_sub(verbs);
    if nouns < 2 {
        return Err(Error::InvalidConfig(format!(
            "vocab_size {vocab_size} leaves {nouns} nouns; need at least 2"
        )));
    }
    let mut words: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    words.extend((0..nouns).map(syllable_word));
    words.extend((0..verbs).map(|i| format!("{}s", syllable_word(i))));
    let vocab = Vocabulary::from_words(words);
    let noun_ids = (0..nouns)
        .map(|i| vocab.id(&syllable_word(i)).expect("noun in vocab"))
        .collect();
    let verb_ids = (0..verbs)
        .map(|i| vocab.id(&format!("{}s", syllable_word(i))).expect("verb in vocab"))
        .collect();
    Ok((vocab, noun_ids, verb_ids))
}

/// Nouns are drawn with probability proportional to `rank^-NOUN_ZIPF_EXPONENT`,
/// so large vocabularies contain a long tail of rarely seen entities.
pub const NOUN_ZIPF_EXPONENT: f64 = 1.0;

/// Seeded corpus of subject-verb-object fact documents. Each reference is the
/// first `ceil(facts_per_doc / 2)` facts of its document, so every reference
/// token appears in the document.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    if config.num_examples < 1 {
        return Err(Error::InvalidConfig("num_examples must be >= 1".into()));
    }
    if config.facts_per_doc < 2 {
        return Err(Error::InvalidConfig("facts_per_doc must be >= 2".into()));
    }
    if config.vocab_size < 20 {
        return Err(Error::InvalidConfig("vocab_size must be >= 20".into()));
    }
    let (vocab, nouns, verbs) = synthetic_vocabulary(config.vocab_size)?;
    let distinct = nouns.len() * (nouns.len() - 1) * verbs.len();
    if distinct < config.facts_per_doc {
        return Err(Error::InvalidConfig(format!(
            "vocabulary forms only {distinct} distinct facts, need {}",
            config.facts_per_doc
        )));
    }
    let the = vocab.id("the").expect("fixed word");
    let a = vocab.id("a").expect("fixed word");
    let stop = vocab.id(".").expect("fixed word");
    let ref_facts = config.facts_per_doc.div_ceil(2);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noun_dist = WeightedIndex::new((1..=nouns.len()).map(|r| (r as f64).powf(-NOUN_ZIPF_EXPONENT)))
    .expect("positive weights");
    let mut pairs = Vec::with_capacity(config.num_examples);
    for n in 0..config.num_examples {
        let mut facts: Vec<(TokenId, TokenId, TokenId)> = Vec::new();
        while facts.len() < config.facts_per_doc {
            let subj = nouns[rng.sample(&noun_dist)];
            let verb = *verbs.choose(&mut rng).expect("nonempty");
            let obj = nouns[rng.sample(&noun_dist)];
            if subj != obj && !facts.contains(&(subj, verb, obj)) {
                facts.push((subj, verb, obj));
            }
        }
        let mut document = Vec::new();
        let mut reference = Vec::new();
        for (k, &(subj, verb, obj)) in facts.iter().enumerate() {
            let mut sentence = Vec::with_capacity(6);
            if rng.gen_bool(0.5) {
                sentence.push(the);
            }
            sentence.push(subj);
            sentence.push(verb);
            match rng.gen_range(0..3) {
                0 => sentence.push(the),
                1 => sentence.push(a),
                _ => {}
            }
            sentence.push(obj);
            sentence.push(stop);
            if k < ref_facts {
                reference.extend_from_slice(&sentence);
            }
            document.extend(sentence);
        }
        pairs.push(ExamplePair {
            id: format!("syn-{n:05}"),
            document: document.into(),
            reference: reference.into(),
        });
    }
    Ok(SyntheticCorpus { vocab, pairs })
}

/// Replaces `ceil(rate * len)` tokens of `summary` with content words that do
/// not occur in `document`. Positions holding content tokens found in the
/// document are replaced first, then other present tokens, then the rest.
pub fn corrupt_summary(
    summary: &TokenSequence,
    document: &TokenSequence,
    rate: f64,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if summary.is_empty() {
        return Err(Error::EmptySequence("summary"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("corruption rate {rate} outside [0, 1]")));
    }
    let count = (rate * summary.len() as f64).ceil() as usize;
    if count == 0 {
        return Ok(summary.clone());
    }
    let doc_tokens: HashSet<TokenId> = document.tokens().iter().copied().collect();
    let replacements: Vec<TokenId> = vocab
        .content_ids()
        .filter(|id| !doc_tokens.contains(id))
        .collect();
    if replacements.is_empty() {
        return Err(Error::NoReplacementToken);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = summary.tokens();
    let tier = |t: TokenId| match (doc_tokens.contains(&t), vocab.is_content(t)) {
        (true, true) => 0,
        (true, false) => 1,
        _ => 2,
    };
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    positions.shuffle(&mut rng);
    positions.sort_by_key(|&p| tier(tokens[p]));

    let mut out = tokens.to_vec();
    for &p in positions.iter().take(count) {
        out[p] = *replacements.choose(&mut rng).expect("nonempty");
    }
    Ok(out.into())
}

/// One annotator judgement: binary factuality plus 1-5 coherence and relevance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvalRecord {
    pub example_id: String,
    pub system: String,
    pub fac: u8,
    pub coh: u8,
    pub rel: u8,
}

pub const HUMAN_EVAL_HEADER: [&str; 5] = ["example_id", "system", "fac", "coh", "rel"];

pub fn load_human_eval(path: &Path) -> Result<Vec<HumanEvalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let mut columns = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if !HUMAN_EVAL_HEADER.contains(&h) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unknown column `{h}`"),
            });
        }
        columns.insert(h.to_string(), i);
    }
    for required in HUMAN_EVAL_HEADER {
        if !columns.contains_key(required) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{required}`"),
            });
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(path, line, e))?;
        let field = |name: &str| row.get(columns[name]).unwrap_or("");
        let score = |name: &str, lo: u8, hi: u8| -> Result<u8> {
            let raw = field(name);
            let value: i64 = raw.parse().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: format!("{name} value `{raw}` is not an integer"),
            })?;
            if value < lo as i64 || value > hi as i64 {
                return Err(Error::Range(format!(
                    "{}: row {line}: {name}={value} outside [{lo}, {hi}]",
                    path.display()
                )));
            }
            Ok(value as u8)
        };
        records.push(HumanEvalRecord {
            example_id: field("example_id").to_string(),
            system: field("system").to_string(),
            fac: score("fac", 0, 1)?,
            coh: score("coh", 1, 5)?,
            rel: score("rel", 1, 5)?,
        });
    }
    Ok(records)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}
