//! Synthetic stand-in for a word-image embedder plus an N-best recognizer.
//!
//! Each sample gets a latent identity vector. Image and text embeddings are
//! produced from latents by one hidden map: a coordinate-wise warp
//! `x + warp·tanh(x)` followed by a random rotation of the ambient space.
//! Only `signal_dim` coordinates carry identity; the rest are per-embedding
//! nuisance noise (`sigma_e · nuisance_gain`), which is what makes raw
//! nearest-neighbour search unreliable while staying learnable.
//!
//! Wrong hypotheses have latents scattered around the true one. Hypothesis
//! slots further down the recognizer list are increasingly likely to be
//! near-duplicates, which no embedding space can separate reliably. Their
//! confidences are low, so fusing confidence recovers them.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Hypothesis, WordSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Hypotheses per sample.
    pub k: usize,
    /// Ambient embedding dimension.
    pub dim: usize,
    /// Number of identity-carrying latent coordinates.
    pub signal_dim: usize,
    /// Strength of the coordinate-wise `x + warp·tanh(x)` nonlinearity.
    pub warp: f64,
    /// Embedding noise on the identity coordinates.
    pub sigma_e: f64,
    /// Nuisance coordinates have standard deviation `sigma_e · nuisance_gain`.
    pub nuisance_gain: f64,
    /// Latent spread of ordinary wrong hypotheses around the true latent.
    pub sigma_d: f64,
    /// Near-duplicates use spread `sigma_d · near_dup_scale`.
    pub near_dup_scale: f64,
    /// Probability that the last slot holds a near-duplicate; grows linearly
    /// from zero at slot 1.
    pub near_dup_rate: f64,
    /// Probability that the correct transcription is generated in slot 0.
    /// Otherwise it lands in slot `1 + Geometric(0.5)`.
    pub correct_top_prob: f64,
    /// Slot `j` has base confidence `conf_base · exp(−j / conf_decay)`.
    pub conf_base: f64,
    pub conf_decay: f64,
    /// Confidence boost for the correct slot.
    pub beta: f64,
    pub sigma_c: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            k: 20,
            dim: 64,
            signal_dim: 12,
            warp: 0.5,
            sigma_e: 0.1,
            nuisance_gain: 3.0,
            sigma_d: 1.0,
            near_dup_scale: 0.7,
            near_dup_rate: 0.5,
            correct_top_prob: 0.55,
            conf_base: 0.6,
            conf_decay: 3.0,
            beta: 0.4,
            sigma_c: 0.12,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.signal_dim == 0 || self.signal_dim > self.dim {
            return bad(format!(
                "signal_dim must be in 1..={}, got {}",
                self.dim, self.signal_dim
            ));
        }
        for (name, v) in [
            ("sigma_e", self.sigma_e),
            ("nuisance_gain", self.nuisance_gain),
            ("sigma_d", self.sigma_d),
            ("near_dup_scale", self.near_dup_scale),
            ("sigma_c", self.sigma_c),
            ("beta", self.beta),
            ("conf_base", self.conf_base),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("near_dup_rate", self.near_dup_rate),
            ("correct_top_prob", self.correct_top_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.conf_decay > 0.0) {
            return bad("conf_decay must be positive".into());
        }
        if !(self.warp > -1.0 && self.warp.is_finite()) {
            return bad("warp must be > -1 to keep the map invertible".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub samples: Vec<WordSample>,
    /// Index of the planted correct hypothesis in each sample's list.
    pub planted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: SynthSplit,
    pub val: SynthSplit,
    pub test: SynthSplit,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rotation: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn gauss(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn embed(&mut self, latent: &[f64]) -> Vec<f64> {
        let cfg = self.cfg;
        let d = cfg.dim;
        let mut x = Vec::with_capacity(d);
        for &v in latent {
            let noisy = v + cfg.sigma_e * self.gauss();
            x.push(noisy);
        }
        for _ in cfg.signal_dim..d {
            let n = cfg.sigma_e * cfg.nuisance_gain * self.gauss();
            x.push(n);
        }
        for v in &mut x {
            *v += cfg.warp * v.tanh();
        }
        (0..d)
            .map(|r| {
                self.rotation[r * d..(r + 1) * d]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn sample(&mut self, id: String, token: String) -> (WordSample, usize) {
        let cfg = self.cfg;
        let k = cfg.k;
        let z: Vec<f64> = (0..cfg.signal_dim).map(|_| self.gauss()).collect();

        let correct_slot = if k == 1 || self.rng.random_bool(cfg.correct_top_prob) {
            0
        } else {
            let mut slot = 1;
            while slot < k - 1 && self.rng.random_bool(0.5) {
                slot += 1;
            }
            slot
        };

        let phi = self.embed(&z);
        let mut slots = Vec::with_capacity(k);
        let mut gt_psi = None;
        for j in 0..k {
            let (text, psi) = if j == correct_slot {
                let psi = self.embed(&z);
                gt_psi = Some(psi.clone());
                (token.clone(), psi)
            } else {
                let dup_p = if k > 1 {
                    cfg.near_dup_rate * j as f64 / (k - 1) as f64
                } else {
                    0.0
                };
                let spread = if self.rng.random_bool(dup_p) {
                    cfg.sigma_d * cfg.near_dup_scale
                } else {
                    cfg.sigma_d
                };
                let latent: Vec<f64> = z.iter().map(|v| v + spread * self.gauss()).collect();
                (format!("{token}~{j:02}"), self.embed(&latent))
            };
            let base = cfg.conf_base * (-(j as f64) / cfg.conf_decay).exp();
            let boost = if j == correct_slot { cfg.beta } else { 0.0 };
            let conf = (base + boost + cfg.sigma_c * self.gauss()).clamp(0.0, 1.0);
            slots.push((j, Hypothesis::new(text, conf, psi)));
        }
        // Recognizer order: descending confidence, generation slot breaks ties.
        slots.sort_by(|a, b| {
            b.1.confidence
                .total_cmp(&a.1.confidence)
                .then(a.0.cmp(&b.0))
        });
        let planted = slots
            .iter()
            .position(|(j, _)| *j == correct_slot)
            .expect("correct slot present");
        let sample = WordSample {
            id,
            gt_text: token,
            phi,
            gt_psi,
            hypotheses: slots.into_iter().map(|(_, h)| h).collect(),
        };
        (sample, planted)
    }

    fn split(&mut self, name: &str, n: usize, offset: usize) -> SynthSplit {
        let (samples, planted) = (0..n)
            .map(|i| {
                let g = offset + i;
                self.sample(format!("{name}-{g:05}"), format!("w{g:05}"))
            })
            .unzip();
        SynthSplit { samples, planted }
    }
}

/// Random orthogonal matrix (row-major) by Gram–Schmidt on Gaussian rows.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rotation = random_rotation(cfg.dim, &mut rng);
    let mut g = Generator { cfg, rotation, rng };
    let train = g.split("train", cfg.n_train, 0);
    let val = g.split("val", cfg.n_val, cfg.n_train);
    let test = g.split("test", cfg.n_test, cfg.n_train + cfg.n_val);
    Ok(SynthDataset { train, val, test })
}

/// Oracle sidecar: one `id<TAB>planted_index` line per sample.
pub fn write_oracle(split: &SynthSplit, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (s, idx) in split.samples.iter().zip(&split.planted) {
        writeln!(w, "{}\t{}", s.id, idx).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
