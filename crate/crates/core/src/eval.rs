//! Word recognition accuracy and the experiment sweeps built on it.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cab::{rerank_with_cab, CabConfig};
use crate::data::WordSample;
use crate::error::{ensure_dim, Error, Result};
use crate::mining::Margin;
use crate::models::{EmbedNetParams, MlpParams};
use crate::rerank::RerankMode;
use crate::train::{train_embednet, TrainConfig};

/// How predictions are compared with ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMatch {
    /// Byte-for-byte equality.
    #[default]
    Exact,
    /// Trim surrounding whitespace and lowercase before comparing.
    TrimLowercase,
}

impl TextMatch {
    pub fn matches(self, prediction: &str, truth: &str) -> bool {
        match self {
            TextMatch::Exact => prediction == truth,
            TextMatch::TrimLowercase => {
                prediction.trim().to_lowercase() == truth.trim().to_lowercase()
            }
        }
    }
}

/// Percentage of predictions that equal their ground truth exactly.
pub fn wra<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], ground_truth: &[T]) -> Result<f64> {
    wra_with(predictions, ground_truth, TextMatch::Exact)
}

pub fn wra_with<S: AsRef<str>, T: AsRef<str>>(
    predictions: &[S],
    ground_truth: &[T],
    matching: TextMatch,
) -> Result<f64> {
    ensure_dim("wra ground truth", predictions.len(), ground_truth.len())?;
    if predictions.is_empty() {
        return Err(Error::Domain("wra of an empty prediction list".into()));
    }
    let correct = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, t)| matching.matches(p.as_ref(), t.as_ref()))
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// The recognizer's own first hypothesis.
    CrnnTop1,
    /// Nearest hypothesis in the raw embedding space.
    Raw,
    Mlp(&'a MlpParams),
    EmbedNet(&'a EmbedNetParams),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::CrnnTop1 => "crnn",
            Method::Raw => "raw",
            Method::Mlp(_) => "mlp",
            Method::EmbedNet(_) => "embednet",
        }
    }

    /// Report label, with a `+cab` suffix when fusion is active.
    pub fn label(&self, cab: &CabConfig) -> String {
        if cab.enabled && !matches!(self, Method::CrnnTop1) {
            format!("{}+cab", self.name())
        } else {
            self.name().to_string()
        }
    }

    fn mode(&self) -> Option<RerankMode<'_>> {
        match *self {
            Method::CrnnTop1 => None,
            Method::Raw => Some(RerankMode::Raw),
            Method::Mlp(m) => Some(RerankMode::Mlp(m)),
            Method::EmbedNet(m) => Some(RerankMode::EmbedNet(m)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WraReport {
    pub method: String,
    pub k: usize,
    pub alpha: Option<f64>,
    pub wra: f64,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 prediction text for every sample under a method.
pub fn predictions(
    samples: &[WordSample],
    method: Method<'_>,
    cab: &CabConfig,
    k: usize,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    cab.validate()?;
    samples
        .par_iter()
        .map(|s| match method.mode() {
            None => {
                s.hypotheses
                    .first()
                    .map(|h| h.text.clone())
                    .ok_or_else(|| Error::EmptyHypotheses {
                        sample_id: s.id.clone(),
                    })
            }
            Some(mode) => Ok(rerank_with_cab(s, mode, k, cab)?.prediction().text.clone()),
        })
        .collect()
}

pub fn evaluate_method(
    samples: &[WordSample],
    method: Method<'_>,
    cab: &CabConfig,
    k: usize,
) -> Result<WraReport> {
    evaluate_method_with(samples, method, cab, k, TextMatch::Exact)
}

pub fn evaluate_method_with(
    samples: &[WordSample],
    method: Method<'_>,
    cab: &CabConfig,
    k: usize,
    matching: TextMatch,
) -> Result<WraReport> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let preds = predictions(samples, method, cab, k)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| matching.matches(p, &s.gt_text))
        .count();
    let total = samples.len();
    let uses_cab = cab.enabled && !matches!(method, Method::CrnnTop1);
    Ok(WraReport {
        method: method.label(cab),
        k,
        alpha: uses_cab.then_some(cab.alpha),
        wra: 100.0 * correct as f64 / total as f64,
        correct,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub reports: Vec<WraReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Serialize)]
struct RowRecord<'a> {
    axis: &'a str,
    value: f64,
    #[serde(flatten)]
    report: &'a WraReport,
}

impl SweepTable {
    pub fn methods(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.reports.iter().map(|x| x.method.clone()).collect())
            .unwrap_or_default()
    }

    pub fn series(&self, method: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.reports
                    .iter()
                    .find(|x| x.method == method)
                    .map(|x| (r.value, x.wra))
            })
            .collect()
    }

    pub fn wra_at(&self, method: &str, value: f64) -> Option<f64> {
        self.series(method)
            .into_iter()
            .find(|(v, _)| *v == value)
            .map(|(_, w)| w)
    }

    /// Axis value with the highest WRA for `method`; the smaller value wins ties.
    pub fn best(&self, method: &str) -> Option<(f64, f64)> {
        self.series(method)
            .into_iter()
            .fold(None, |best: Option<(f64, f64)>, (v, w)| match best {
                Some((_, bw)) if w <= bw => best,
                _ => Some((v, w)),
            })
    }

    /// Fixed-width text table, one column per method, with a best-value row.
    pub fn to_text(&self) -> String {
        let methods = self.methods();
        let mut out = format!("{:>10}", self.axis);
        for m in &methods {
            let _ = write!(out, " {m:>14}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:>10}", fmt_axis(r.value));
            for m in &methods {
                match r.reports.iter().find(|x| &x.method == m) {
                    Some(x) => {
                        let _ = write!(out, " {:>14.3}", x.wra);
                    }
                    None => {
                        let _ = write!(out, " {:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>10}", format!("best {}", self.axis));
        for m in &methods {
            let cell = self
                .best(m)
                .map(|(v, w)| format!("{:.3} ({})", w, fmt_axis(v)))
                .unwrap_or_default();
            let _ = write!(out, " {cell:>14}");
        }
        out.push('\n');
        out
    }

    /// One JSON object per (method, axis value).
    pub fn write_rows(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.rows {
            for report in &r.reports {
                let rec = RowRecord {
                    axis: &self.axis,
                    value: r.value,
                    report,
                };
                serde_json::to_writer(&mut w, &rec).map_err(|e| Error::format(e.to_string()))?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn fmt_axis(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn strictly_increasing(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "{what} values must be strictly increasing"
        )));
    }
    Ok(())
}

/// WRA of every (method, CAB setting) at each K.
pub fn k_sweep(
    samples: &[WordSample],
    methods: &[(Method<'_>, CabConfig)],
    k_values: &[usize],
) -> Result<SweepTable> {
    let as_f: Vec<f64> = k_values.iter().map(|&k| k as f64).collect();
    strictly_increasing(&as_f, "K")?;
    if k_values[0] == 0 {
        return Err(Error::Config("K values must be >= 1".into()));
    }
    let rows = k_values
        .iter()
        .map(|&k| {
            Ok(SweepRow {
                value: k as f64,
                reports: methods
                    .iter()
                    .map(|(m, cab)| evaluate_method(samples, *m, cab, k))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        axis: "K".into(),
        rows,
    })
}

/// Train one EmbedNet per margin from the same seed and compare validation WRA.
/// Returns the best margin (smallest on ties), the table, and the trained models.
pub fn margin_sweep(
    train: &[WordSample],
    val: &[WordSample],
    gammas: &[f64],
    config: &TrainConfig,
    k: usize,
) -> Result<(f64, SweepTable, Vec<EmbedNetParams>)> {
    strictly_increasing(gammas, "margin")?;
    let mut rows = Vec::with_capacity(gammas.len());
    let mut models = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let cfg = TrainConfig {
            margin: Margin::new(g)?,
            ..config.clone()
        };
        let (model, history) = train_embednet(train, val, &cfg)?;
        let report = evaluate_method(val, Method::EmbedNet(&model), &CabConfig::disabled(), k)?;
        info!(
            "margin {g}: val WRA {:.3} (best epoch {})",
            report.wra, history.best_epoch
        );
        rows.push(SweepRow {
            value: g,
            reports: vec![report],
        });
        models.push(model);
    }
    let table = SweepTable {
        axis: "margin".into(),
        rows,
    };
    let (best, _) = table.best("embednet").expect("nonempty sweep");
    Ok((best, table, models))
}

/// Grid search of the CAB fusion strength on a validation split. Ties go to
/// the smallest alpha.
pub fn alpha_grid(
    val: &[WordSample],
    method: Method<'_>,
    k: usize,
    alphas: &[f64],
) -> Result<(f64, SweepTable)> {
    strictly_increasing(alphas, "alpha")?;
    let rows = alphas
        .iter()
        .map(|&a| {
            let cab = CabConfig::new(a)?;
            let mut report = evaluate_method(val, method, &cab, k)?;
            report.method = method.name().to_string();
            Ok(SweepRow {
                value: a,
                reports: vec![report],
            })
        })
        .collect::<Result<_>>()?;
    let table = SweepTable {
        axis: "alpha".into(),
        rows,
    };
    let (best, _) = table.best(method.name()).expect("nonempty grid");
    Ok((best, table))
}
