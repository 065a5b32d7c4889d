//! System evaluation, human-evaluation aggregation and report rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExamplePair, HumanEvalRecord};
use crate::decoding::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{hallucination_rate, MetricKind, MetricSuite};
use crate::model::SeqModel;
use crate::vocab::TokenSequence;

/// Automatic scores, either for one example or averaged over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AutoScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bart: f64,
    pub dae: f64,
    pub hallucination: f64,
}

impl AutoScores {
    fn fields(&self) -> [f64; 6] {
        [self.rouge1, self.rouge2, self.rouge_l, self.bart, self.dae, self.hallucination]
    }

    fn from_fields(v: [f64; 6]) -> Self {
        AutoScores {
            rouge1: v[0],
            rouge2: v[1],
            rouge_l: v[2],
            bart: v[3],
            dae: v[4],
            hallucination: v[5],
        }
    }

    /// Mean of the three ROUGE variants.
    pub fn rouge_mean(&self) -> f64 {
        (self.rouge1 + self.rouge2 + self.rouge_l) / 3.0
    }

    /// The score a system fine-tuned with `metric` is selected on.
    pub fn get(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Rouge1 => self.rouge1,
            MetricKind::Rouge2 => self.rouge2,
            MetricKind::RougeL => self.rouge_l,
            MetricKind::RougeMean => self.rouge_mean(),
            MetricKind::BartLike => self.bart,
            MetricKind::DaeLike => self.dae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub summary: TokenSequence,
    pub scores: AutoScores,
}

/// Every automatic metric for one summary of `pair`.
pub fn score_summary(suite: &MetricSuite<'_>, summary: &TokenSequence, pair: &ExamplePair) -> Result<AutoScores> {
    let get = |kind| {
        suite
            .evaluate(kind, summary, &pair.document, &pair.reference)
            .map(|s| s.value)
    };
    Ok(AutoScores {
        rouge1: get(MetricKind::Rouge1)?,
        rouge2: get(MetricKind::Rouge2)?,
        rouge_l: get(MetricKind::RougeL)?,
        bart: get(MetricKind::BartLike)?,
        dae: get(MetricKind::DaeLike)?,
        hallucination: hallucination_rate(suite.vocab(), &pair.document, summary)?,
    })
}

/// Decodes each document (top beam) and scores it.
pub fn evaluate_examples(
    model: &SeqModel,
    test: &[ExamplePair],
    suite: &MetricSuite<'_>,
    beam: &BeamConfig,
) -> Result<Vec<ExampleScores>> {
    test.iter()
        .map(|pair| {
            let run = || -> Result<ExampleScores> {
                let top = beam_search(model, &pair.document, beam)?.swap_remove(0);
                let scores = score_summary(suite, &top.tokens, pair)?;
                Ok(ExampleScores {
                    id: pair.id.clone(),
                    summary: top.tokens,
                    scores,
                })
            };
            run().map_err(Error::in_example(&pair.id))
        })
        .collect()
}

pub fn mean_scores(examples: &[ExampleScores]) -> Result<AutoScores> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sums = [0.0; 6];
    for e in examples {
        for (s, v) in sums.iter_mut().zip(e.scores.fields()) {
            *s += v;
        }
    }
    let n = examples.len() as f64;
    Ok(AutoScores::from_fields(sums.map(|s| s / n)))
}

/// Per-metric means over `test`, decoding with `beam`.
pub fn evaluate_system(
    model: &SeqModel,
    test: &[ExamplePair],
    suite: &MetricSuite<'_>,
    beam: &BeamConfig,
) -> Result<AutoScores> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    mean_scores(&evaluate_examples(model, test, suite, beam)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanScores {
    pub fac: f64,
    pub coh: f64,
    pub rel: f64,
    pub count: usize,
}

/// Per-system means of the human judgments.
pub fn aggregate_human_eval(records: &[HumanEvalRecord]) -> Result<BTreeMap<String, HumanScores>> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut seen = HashSet::new();
    let mut sums: BTreeMap<String, [u64; 4]> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.example_id.as_str(), r.system.as_str())) {
            return Err(Error::DuplicateId(format!("{} / {}", r.example_id, r.system)));
        }
        let s = sums.entry(r.system.clone()).or_default();
        s[0] += u64::from(r.fac);
        s[1] += u64::from(r.coh);
        s[2] += u64::from(r.rel);
        s[3] += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(system, [fac, coh, rel, n])| {
            let d = n as f64;
            let scores = HumanScores {
                fac: fac as f64 / d,
                coh: coh as f64 / d,
                rel: rel as f64 / d,
                count: n as usize,
            };
            (system, scores)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bart: f64,
    pub dae: f64,
    pub hallucination: Option<f64>,
    pub human: Option<HumanScores>,
}

impl ReportRow {
    pub fn from_scores(system: &str, scores: &AutoScores) -> Self {
        ReportRow {
            system: system.to_string(),
            rouge1: scores.rouge1,
            rouge2: scores.rouge2,
            rouge_l: scores.rouge_l,
            bart: scores.bart,
            dae: scores.dae,
            hallucination: Some(scores.hallucination),
            human: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub samples: usize,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Text,
    Delimited,
}

pub const REPORT_FOOTER: &str = "B and D are raw surrogate units (mean scorer log-likelihood; minimum arc support in [0, 1]) and are not comparable to published BARTScore or DAE values.";

struct Column {
    name: &'static str,
    higher_is_better: bool,
    value: fn(&ReportRow) -> Option<f64>,
    render: fn(f64) -> String,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn raw4(v: f64) -> String {
    format!("{v:.4}")
}

fn raw2(v: f64) -> String {
    format!("{v:.2}")
}

fn columns(report: &EvalReport) -> Vec<Column> {
    let mut cols = vec![
        Column { name: "R-1", higher_is_better: true, value: |r| Some(r.rouge1), render: pct },
        Column { name: "R-2", higher_is_better: true, value: |r| Some(r.rouge2), render: pct },
        Column { name: "R-L", higher_is_better: true, value: |r| Some(r.rouge_l), render: pct },
        Column { name: "B", higher_is_better: true, value: |r| Some(r.bart), render: raw4 },
        Column { name: "D", higher_is_better: true, value: |r| Some(r.dae), render: raw4 },
    ];
    if report.rows.iter().any(|r| r.human.is_some()) {
        cols.extend([
            Column { name: "FAC", higher_is_better: true, value: |r| r.human.map(|h| h.fac), render: raw2 },
            Column { name: "COH", higher_is_better: true, value: |r| r.human.map(|h| h.coh), render: raw2 },
            Column { name: "REL", higher_is_better: true, value: |r| r.human.map(|h| h.rel), render: raw2 },
        ]);
    }
    if report.rows.iter().any(|r| r.hallucination.is_some()) {
        cols.push(Column {
            name: "HAL",
            higher_is_better: false,
            value: |r| r.hallucination,
            render: raw4,
        });
    }
    cols
}

/// Renders the report; the best value of every column is suffixed with `*`
/// (highest, or lowest for the hallucination rate).
pub fn render_report(report: &EvalReport, style: ReportStyle) -> String {
    let cols = columns(report);
    let mut header = vec!["System".to_string()];
    header.extend(cols.iter().map(|c| c.name.to_string()));
    let mut cells: Vec<Vec<String>> = report.rows.iter().map(|r| vec![r.system.clone()]).collect();
    for col in &cols {
        let values: Vec<Option<f64>> = report.rows.iter().map(col.value).collect();
        let best = values.iter().flatten().copied().reduce(|a, b| {
            if col.higher_is_better {
                a.max(b)
            } else {
                a.min(b)
            }
        });
        for (row, v) in cells.iter_mut().zip(&values) {
            row.push(match v {
                Some(v) if Some(*v) == best && report.rows.len() > 1 => format!("{}*", (col.render)(*v)),
                Some(v) => (col.render)(*v),
                None => "-".to_string(),
            });
        }
    }
    match style {
        ReportStyle::Delimited => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for row in &cells {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii report")
        }
        ReportStyle::Text => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
                .collect();
            let line = |row: &[String]| {
                let mut s = String::new();
                for (i, cell) in row.iter().enumerate() {
                    if i == 0 {
                        let _ = write!(s, "{cell:<w$}", w = widths[0]);
                    } else {
                        let _ = write!(s, "  {cell:>w$}", w = widths[i]);
                    }
                }
                s.push('\n');
                s
            };
            let mut out = format!("dataset: {} (n = {})\n", report.dataset, report.samples);
            out.push_str(&line(&header));
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
            for row in &cells {
                out.push_str(&line(row));
            }
            out.push_str(REPORT_FOOTER);
            out.push('\n');
            out
        }
    }
}
