//! Word samples and the dataset interchange format.
//!
//! A dataset file is JSON Lines: one [`WordSample`] per line,
//!
//! ```text
//! {"id":"test-00001","gt":"w00001","phi":[...],"gt_psi":[...],"hyps":[{"text":"w00001","conf":0.91,"psi":[...]}, ...]}
//! ```
//!
//! `gt_psi` may be `null` or absent. Embedding values are written in
//! shortest round-trip decimal form and parse back bit-exactly. Hypotheses
//! are stored in recognizer order (descending confidence).

mod synth;

pub use synth::{synth_generate, write_oracle, SynthConfig, SynthDataset, SynthSplit};

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::all_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    #[serde(rename = "conf")]
    pub confidence: f64,
    pub psi: Vec<f64>,
    /// Marks an intentionally empty prediction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub blank: bool,
}

impl Hypothesis {
    pub fn new(text: impl Into<String>, confidence: f64, psi: Vec<f64>) -> Self {
        Hypothesis {
            text: text.into(),
            confidence,
            psi,
            blank: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSample {
    pub id: String,
    #[serde(rename = "gt")]
    pub gt_text: String,
    pub phi: Vec<f64>,
    #[serde(default)]
    pub gt_psi: Option<Vec<f64>>,
    #[serde(rename = "hyps")]
    pub hypotheses: Vec<Hypothesis>,
}

impl WordSample {
    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    /// Correct-text embeddings: `gt_psi` when present, otherwise every
    /// hypothesis whose text equals the ground truth.
    pub fn positives(&self) -> Vec<&[f64]> {
        match &self.gt_psi {
            Some(p) => vec![p.as_slice()],
            None => self
                .hypotheses
                .iter()
                .filter(|h| h.text == self.gt_text)
                .map(|h| h.psi.as_slice())
                .collect(),
        }
    }

    /// Incorrect hypotheses as `(hypothesis index, embedding)`.
    pub fn negatives(&self) -> Vec<(usize, &[f64])> {
        self.hypotheses
            .iter()
            .enumerate()
            .filter(|(_, h)| h.text != self.gt_text)
            .map(|(j, h)| (j, h.psi.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub samples: usize,
    pub clamped_confidences: usize,
}

pub fn write_dataset(samples: &[WordSample], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(Vec<WordSample>, LoadReport)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(f)).map_err(|e| e.with_path(path))
}

/// Parse JSON Lines from any reader. Blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<(Vec<WordSample>, LoadReport)> {
    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    let mut ids = HashSet::new();
    let mut dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let at = |message: String| Error::Format {
            path: None,
            line: Some(lineno),
            message,
        };
        let line = line.map_err(|e| at(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: WordSample =
            serde_json::from_str(&line).map_err(|e| at(format!("malformed record: {e}")))?;
        let d = *dim.get_or_insert(s.phi.len());
        validate_sample(&mut s, d, &mut report.clamped_confidences).map_err(at)?;
        if !ids.insert(s.id.clone()) {
            return Err(at(format!("duplicate sample id {:?}", s.id)));
        }
        samples.push(s);
    }
    report.samples = samples.len();
    if report.clamped_confidences > 0 {
        warn!(
            "clamped {} hypothesis confidences into [0, 1]",
            report.clamped_confidences
        );
    }
    Ok((samples, report))
}

fn validate_sample(s: &mut WordSample, dim: usize, clamped: &mut usize) -> Result<(), String> {
    if dim == 0 {
        return Err("empty phi embedding".into());
    }
    let check = |what: &str, v: &[f64]| -> Result<(), String> {
        if v.len() != dim {
            return Err(format!("{what} has dim {}, expected {dim}", v.len()));
        }
        if !all_finite(v) {
            return Err(format!("{what} contains a non-finite value"));
        }
        Ok(())
    };
    check("phi", &s.phi)?;
    if let Some(p) = &s.gt_psi {
        check("gt_psi", p)?;
    }
    if s.hypotheses.is_empty() {
        return Err(format!("sample {:?} has no hypotheses", s.id));
    }
    for (j, h) in s.hypotheses.iter_mut().enumerate() {
        check(&format!("hypothesis {j} psi"), &h.psi)?;
        if h.text.is_empty() && !h.blank {
            return Err(format!(
                "hypothesis {j} has empty text without the blank flag"
            ));
        }
        if !h.confidence.is_finite() {
            return Err(format!("hypothesis {j} confidence is not finite"));
        }
        if !(0.0..=1.0).contains(&h.confidence) {
            h.confidence = h.confidence.clamp(0.0, 1.0);
            *clamped += 1;
        }
    }
    Ok(())
}
