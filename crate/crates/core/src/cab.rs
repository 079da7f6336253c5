//! Confidence based Accuracy Booster: fold recognizer confidences into the
//! distance vector before the final ranking.
//!
//! The fused distance is `d'_j = d_j · (1 − alpha · c_j)` with `alpha ∈ [0, 1)`
//! and `c_j ∈ [0, 1]`. At `alpha = 0` it is the identity; for `alpha > 0` a
//! more confident hypothesis gets a strictly smaller distance, and ordering
//! by distance is preserved among equally confident ones.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::WordSample;
use crate::error::{ensure_dim, Error, Result};
use crate::rerank::{effective_k, hypothesis_distances, rank_sample, RankedList, RerankMode};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CabConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for CabConfig {
    fn default() -> Self {
        CabConfig {
            alpha: DEFAULT_ALPHA,
            enabled: true,
        }
    }
}

impl CabConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let c = CabConfig {
            alpha,
            enabled: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn disabled() -> Self {
        CabConfig {
            alpha: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "cab alpha must be in [0, 1), got {}",
                self.alpha
            )))
        }
    }
}

pub fn cab_fuse(dists: &[f64], confs: &[f64], config: &CabConfig) -> Result<Vec<f64>> {
    ensure_dim("cab confidences", dists.len(), confs.len())?;
    config.validate()?;
    if !config.enabled {
        return Ok(dists.to_vec());
    }
    let mut clamped = 0usize;
    let fused = dists
        .iter()
        .zip(confs)
        .map(|(&d, &c)| {
            let c = if (0.0..=1.0).contains(&c) {
                c
            } else {
                clamped += 1;
                if c.is_nan() {
                    0.0
                } else {
                    c.clamp(0.0, 1.0)
                }
            };
            d * (1.0 - config.alpha * c)
        })
        .collect();
    if clamped > 0 {
        warn!("clamped {clamped} confidences outside [0, 1] before fusion");
    }
    Ok(fused)
}

/// Rerank with fused distances. Entries carry the fused distance and the
/// original confidence.
pub fn rerank_with_cab(
    sample: &WordSample,
    mode: RerankMode<'_>,
    k_limit: usize,
    config: &CabConfig,
) -> Result<RankedList> {
    let k = effective_k(sample, k_limit)?;
    let dists = hypothesis_distances(sample, mode, k)?;
    let confs: Vec<f64> = sample.hypotheses[..k]
        .iter()
        .map(|h| h.confidence)
        .collect();
    let fused = cab_fuse(&dists, &confs, config)?;
    rank_sample(sample, mode.space(), &fused, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Hypothesis;
    use crate::rerank::rerank_sample;
    use proptest::prelude::*;

    fn cfg(alpha: f64) -> CabConfig {
        CabConfig::new(alpha).unwrap()
    }

    #[test]
    fn examples() {
        let d = [0.3, 1.7, 0.0, 2.5];
        assert_eq!(
            cab_fuse(&d, &[0.9, 0.1, 0.4, 1.0], &cfg(0.0)).unwrap(),
            d.to_vec()
        );
        let f = cab_fuse(&[1.0, 1.0], &[0.9, 0.1], &cfg(0.5)).unwrap();
        assert!((f[0] - 0.55).abs() < 1e-15 && (f[1] - 0.95).abs() < 1e-15);
        let f = cab_fuse(&[0.4, 0.2, 0.9], &[0.3; 3], &cfg(0.7)).unwrap();
        assert!(f[1] < f[0] && f[0] < f[2]);
        assert!(cab_fuse(&[1.0], &[0.5, 0.5], &cfg(0.5)).is_err());
        assert!(CabConfig::new(1.0).is_err());
        assert!(CabConfig::new(-0.1).is_err());
    }

    #[test]
    fn out_of_range_confidences_clamp() {
        let f = cab_fuse(&[2.0, 2.0], &[1.4, -0.3], &cfg(0.5)).unwrap();
        assert_eq!(f, vec![1.0, 2.0]);
    }

    fn two_hyp_sample() -> WordSample {
        WordSample {
            id: "s".into(),
            gt_text: "b".into(),
            phi: vec![0.0, 0.0],
            gt_psi: None,
            hypotheses: vec![
                Hypothesis::new("a", 0.2, vec![1.0, 0.0]),
                Hypothesis::new("b", 0.9, vec![0.0, 1.0]),
            ],
        }
    }

    #[test]
    fn disabled_matches_plain_rerank() {
        let s = two_hyp_sample();
        assert_eq!(
            rerank_with_cab(&s, RerankMode::Raw, 2, &CabConfig::disabled()).unwrap(),
            rerank_sample(&s, RerankMode::Raw, 2).unwrap()
        );
    }

    #[test]
    fn confidence_breaks_distance_ties() {
        let s = two_hyp_sample();
        assert_eq!(
            rerank_sample(&s, RerankMode::Raw, 2).unwrap().order(),
            vec![0, 1]
        );
        let r = rerank_with_cab(&s, RerankMode::Raw, 2, &cfg(0.3)).unwrap();
        assert_eq!(r.order(), vec![1, 0]);
        assert_eq!(r.entries[0].confidence, 0.9);
        assert!((r.entries[0].distance - 0.73).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn algebraic_properties(
            da in 0.0f64..10.0,
            db in 0.0f64..10.0,
            ca in 0.0f64..=1.0,
            cb in 0.0f64..=1.0,
            alpha in 0.001f64..0.999,
        ) {
            let c = cfg(alpha);
            let same_conf = cab_fuse(&[da, db], &[ca, ca], &c).unwrap();
            if da < db {
                prop_assert!(same_conf[0] < same_conf[1]);
            }
            prop_assume!(da > 0.0);
            let same_dist = cab_fuse(&[da, da], &[ca, cb], &c).unwrap();
            if ca > cb {
                prop_assert!(same_dist[0] < same_dist[1]);
            }
            prop_assert!(same_dist.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn argmin_invariant_under_scaling(
            d in prop::collection::vec(0.0f64..5.0, 1..20),
            s in 0.01f64..100.0,
        ) {
            let confs: Vec<f64> = (0..d.len()).map(|i| (i as f64 * 0.37) % 1.0).collect();
            let c = cfg(0.5);
            let a = cab_fuse(&d, &confs, &c).unwrap();
            let scaled: Vec<f64> = d.iter().map(|v| v * s).collect();
            let b = cab_fuse(&scaled, &confs, &c).unwrap();
            let argmin = |v: &[f64]| (0..v.len()).fold(0, |m, i| if v[i] < v[m] { i } else { m });
            prop_assert_eq!(argmin(&a), argmin(&b));
        }
    }
}
