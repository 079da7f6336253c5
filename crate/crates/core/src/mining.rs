//! Triplet classification, the triplet hinge loss, and per-epoch mining.
//!
//! A triplet is (anchor = projected image embedding, positive = projected
//! correct-text embedding, negative = projected wrong hypothesis of the same
//! sample). With squared distances `d_ap`, `d_an` and margin `γ`:
//!
//! * Hard: `d_an ≤ d_ap`
//! * SemiHard: `d_ap < d_an < d_ap + γ`
//! * Easy: `d_an ≥ d_ap + γ`
//!
//! Ties go to the class whose loss they produce: `d_an == d_ap` gives loss
//! `γ` and is Hard; `d_an == d_ap + γ` gives loss 0 and is Easy. Easy
//! triplets carry no gradient and are dropped from the mined set.

use log::warn;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WordSample;
use crate::error::{ensure_dim, Error, Result};
use crate::models::EmbedNetParams;
use crate::nn::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TripletClass {
    Hard,
    SemiHard,
    Easy,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Margin(f64);

impl Margin {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma >= 0.0 {
            Ok(Margin(gamma))
        } else {
            Err(Error::Domain(format!(
                "margin must be finite and >= 0, got {gamma}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Margin {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Margin::new(v)
    }
}

impl From<Margin> for f64 {
    fn from(m: Margin) -> f64 {
        m.0
    }
}

/// `max(d_ap − d_an + γ, 0)` on squared distances.
pub fn hinge(d_ap_sq: f64, d_an_sq: f64, margin: Margin) -> f64 {
    let v = (d_ap_sq - d_an_sq) + margin.0;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn classify_triplet(d_ap_sq: f64, d_an_sq: f64, margin: Margin) -> Result<TripletClass> {
    if !(d_ap_sq >= 0.0) || !(d_an_sq >= 0.0) {
        return Err(Error::Domain(format!(
            "squared distances must be >= 0, got ({d_ap_sq}, {d_an_sq})"
        )));
    }
    Ok(if d_an_sq <= d_ap_sq {
        TripletClass::Hard
    } else if hinge(d_ap_sq, d_an_sq, margin) > 0.0 {
        TripletClass::SemiHard
    } else {
        TripletClass::Easy
    })
}

pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: Margin,
) -> Result<f64> {
    ensure_dim("triplet positive", anchor.len(), positive.len())?;
    ensure_dim("triplet negative", anchor.len(), negative.len())?;
    Ok(hinge(
        squared_distance(anchor, positive),
        squared_distance(anchor, negative),
        margin,
    ))
}

/// A mined triplet, by index: `positive` indexes [`WordSample::positives`],
/// `negative` is the hypothesis index of the wrong transcription.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub sample: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap_sq: f64,
    pub d_an_sq: f64,
    pub class: TripletClass,
}

/// One sample's embeddings after projection through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSample {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub hard: usize,
    pub semi_hard: usize,
    pub easy: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.hard + self.semi_hard + self.easy
    }

    pub fn mined(&self) -> usize {
        self.hard + self.semi_hard
    }

    fn add(&mut self, class: TripletClass) {
        match class {
            TripletClass::Hard => self.hard += 1,
            TripletClass::SemiHard => self.semi_hard += 1,
            TripletClass::Easy => self.easy += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedTriplets {
    /// Hard and semi-hard triplets in shuffled order.
    pub triplets: Vec<Triplet>,
    /// Counts over every enumerated triplet, easy ones included.
    pub counts: ClassCounts,
    /// Sum of hinge losses over every enumerated triplet.
    pub loss_sum: f64,
    /// Samples skipped for lacking a positive embedding.
    pub skipped_samples: usize,
}

impl MinedTriplets {
    /// Mean hinge loss over all enumerated triplets (easy ones count as 0).
    pub fn mean_loss(&self) -> f64 {
        let n = self.counts.total();
        if n == 0 {
            0.0
        } else {
            self.loss_sum / n as f64
        }
    }
}

/// Derive the shuffle seed for one epoch from a master seed.
pub fn epoch_seed(master: u64, epoch: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(epoch);
    rng.next_u64()
}

pub fn project_samples(
    samples: &[WordSample],
    model: &EmbedNetParams,
) -> Result<Vec<ProjectedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(ProjectedSample {
                anchor: model.forward(&s.phi)?,
                positives: s
                    .positives()
                    .into_iter()
                    .map(|p| model.forward(p))
                    .collect::<Result<_>>()?,
                negatives: s
                    .negatives()
                    .into_iter()
                    .map(|(j, n)| Ok((j, model.forward(n)?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Enumerate every (anchor, positive, negative) per sample, keep the hard
/// and semi-hard ones, and shuffle them with `seed`.
pub fn mine_projected(projected: &[ProjectedSample], margin: Margin, seed: u64) -> MinedTriplets {
    let mut triplets = Vec::new();
    let mut counts = ClassCounts::default();
    let mut loss_sum = 0.0;
    let mut skipped = 0;
    for (i, p) in projected.iter().enumerate() {
        if p.positives.is_empty() {
            skipped += 1;
            continue;
        }
        for (k, pos) in p.positives.iter().enumerate() {
            let d_ap_sq = squared_distance(&p.anchor, pos);
            for (j, neg) in &p.negatives {
                let d_an_sq = squared_distance(&p.anchor, neg);
                let class = classify_triplet(d_ap_sq, d_an_sq, margin)
                    .expect("squared distances are nonnegative");
                counts.add(class);
                loss_sum += hinge(d_ap_sq, d_an_sq, margin);
                if class != TripletClass::Easy {
                    triplets.push(Triplet {
                        sample: i,
                        positive: k,
                        negative: *j,
                        d_ap_sq,
                        d_an_sq,
                        class,
                    });
                }
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} samples without a positive embedding");
    }
    triplets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    MinedTriplets {
        triplets,
        counts,
        loss_sum,
        skipped_samples: skipped,
    }
}

pub fn mine_triplets(
    samples: &[WordSample],
    model: &EmbedNetParams,
    margin: Margin,
    seed: u64,
) -> Result<MinedTriplets> {
    let projected = project_samples(samples, model)?;
    Ok(mine_projected(&projected, margin, seed))
}
