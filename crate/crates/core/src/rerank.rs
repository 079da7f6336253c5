//! Distance-based reranking of a sample's hypothesis list.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::WordSample;
use crate::error::{ensure_dim, Error, Result};
use crate::models::{EmbedNetParams, MlpParams};
use crate::nn::squared_distance;

/// Embedding space the distances were measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Raw,
    Embednet,
}

#[derive(Debug, Clone, Copy)]
pub enum RerankMode<'a> {
    /// Query the stored hypothesis embeddings with the image embedding.
    Raw,
    /// Project the query and the hypotheses through EmbedNet first.
    EmbedNet(&'a EmbedNetParams),
    /// Map the query with the MLP; hypotheses stay in raw space.
    Mlp(&'a MlpParams),
}

impl RerankMode<'_> {
    pub fn space(&self) -> Space {
        match self {
            RerankMode::EmbedNet(_) => Space::Embednet,
            RerankMode::Raw | RerankMode::Mlp(_) => Space::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub hypothesis: usize,
    pub text: String,
    pub distance: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub sample_id: String,
    pub space: Space,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// The top-ranked entry.
    pub fn prediction(&self) -> &RankedEntry {
        &self.entries[0]
    }

    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.hypothesis).collect()
    }
}

/// Euclidean (non-squared) distance from `query` to each candidate.
pub fn distances<V: AsRef<[f64]>>(query: &[f64], candidates: &[V]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| {
            let c = c.as_ref();
            ensure_dim("candidate embedding", query.len(), c.len())?;
            Ok(squared_distance(query, c).sqrt())
        })
        .collect()
}

/// Sort hypotheses by ascending distance; equal distances keep recognizer order.
pub fn rank(
    sample_id: &str,
    space: Space,
    dists: &[f64],
    texts: &[&str],
    confs: &[f64],
) -> Result<RankedList> {
    if dists.is_empty() {
        return Err(Error::EmptyHypotheses {
            sample_id: sample_id.to_string(),
        });
    }
    ensure_dim("rank texts", dists.len(), texts.len())?;
    ensure_dim("rank confidences", dists.len(), confs.len())?;
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    Ok(RankedList {
        sample_id: sample_id.to_string(),
        space,
        entries: order
            .into_iter()
            .map(|j| RankedEntry {
                hypothesis: j,
                text: texts[j].to_string(),
                distance: dists[j],
                confidence: confs[j],
            })
            .collect(),
    })
}

/// Clamp a requested K to the hypotheses available, warning when it has to.
pub fn effective_k(sample: &WordSample, k_limit: usize) -> Result<usize> {
    let available = sample.hypotheses.len();
    if available == 0 {
        return Err(Error::EmptyHypotheses {
            sample_id: sample.id.clone(),
        });
    }
    if k_limit == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k_limit > available {
        warn!(
            "sample {:?}: k={k_limit} exceeds {available} hypotheses; using {available}",
            sample.id
        );
    }
    Ok(k_limit.min(available))
}

/// Distances from the query to the first `k` hypotheses in the mode's space.
pub fn hypothesis_distances(
    sample: &WordSample,
    mode: RerankMode<'_>,
    k: usize,
) -> Result<Vec<f64>> {
    let hyps = &sample.hypotheses[..k];
    match mode {
        RerankMode::Raw => distances(
            &sample.phi,
            &hyps.iter().map(|h| &h.psi[..]).collect::<Vec<_>>(),
        ),
        RerankMode::Mlp(model) => {
            let q = model.forward(&sample.phi)?;
            distances(&q, &hyps.iter().map(|h| &h.psi[..]).collect::<Vec<_>>())
        }
        RerankMode::EmbedNet(model) => {
            let q = model.forward(&sample.phi)?;
            let projected = hyps
                .iter()
                .map(|h| model.forward(&h.psi))
                .collect::<Result<Vec<_>>>()?;
            distances(&q, &projected)
        }
    }
}

pub(crate) fn rank_sample(
    sample: &WordSample,
    space: Space,
    dists: &[f64],
    k: usize,
) -> Result<RankedList> {
    let hyps = &sample.hypotheses[..k];
    let texts: Vec<&str> = hyps.iter().map(|h| h.text.as_str()).collect();
    let confs: Vec<f64> = hyps.iter().map(|h| h.confidence).collect();
    rank(&sample.id, space, dists, &texts, &confs)
}

pub fn rerank_sample(
    sample: &WordSample,
    mode: RerankMode<'_>,
    k_limit: usize,
) -> Result<RankedList> {
    let k = effective_k(sample, k_limit)?;
    let dists = hypothesis_distances(sample, mode, k)?;
    rank_sample(sample, mode.space(), &dists, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Hypothesis;
    use crate::nn::{dot, l2_normalize, DenseLayer, Linear};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        assert_eq!(distances(&[1.0, 2.0], &[[1.0, 2.0]]).unwrap(), vec![0.0]);
        assert_eq!(
            distances(&[0.0, 0.0], &[[3.0, 4.0], [1.0, 0.0]]).unwrap(),
            vec![5.0, 1.0]
        );
        assert!(distances(&[0.0, 0.0], &[vec![1.0]]).is_err());
    }

    #[test]
    fn distances_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cands: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = distances(&q, &cands).unwrap();
        for (c, d) in cands.iter().zip(&got) {
            let mut acc = 0.0;
            for i in 0..16 {
                acc += (q[i] - c[i]) * (q[i] - c[i]);
            }
            assert!((acc.sqrt() - d).abs() < 1e-12);
        }
    }

    fn ranked(d: &[f64]) -> Vec<usize> {
        let texts: Vec<String> = (0..d.len()).map(|i| format!("t{i}")).collect();
        let t: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        rank("s", Space::Raw, d, &t, &vec![0.5; d.len()])
            .unwrap()
            .order()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ranked(&[0.3, 0.1, 0.2]), vec![1, 2, 0]);
        assert_eq!(ranked(&[0.7; 5]), vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            rank("s", Space::Raw, &[], &[], &[]),
            Err(Error::EmptyHypotheses { .. })
        ));
    }

    fn sample(n: usize, seed: u64) -> WordSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || {
            (0..4)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        WordSample {
            id: "x".into(),
            gt_text: "h0".into(),
            phi: v(),
            gt_psi: None,
            hypotheses: (0..n)
                .map(|j| Hypothesis::new(format!("h{j}"), 0.9, v()))
                .collect(),
        }
    }

    #[test]
    fn k_limit_one_picks_first_hypothesis() {
        let s = sample(6, 1);
        let r = rerank_sample(&s, RerankMode::Raw, 1).unwrap();
        assert_eq!(r.order(), vec![0]);
        // oversize k clamps
        assert_eq!(
            rerank_sample(&s, RerankMode::Raw, 50)
                .unwrap()
                .entries
                .len(),
            6
        );
        assert!(rerank_sample(&s, RerankMode::Raw, 0).is_err());
        let mut empty = s.clone();
        empty.hypotheses.clear();
        assert!(matches!(
            rerank_sample(&empty, RerankMode::Raw, 3),
            Err(Error::EmptyHypotheses { .. })
        ));
    }

    #[test]
    fn identity_like_embednet_preserves_raw_order() {
        // Identity layers with slope 1 make the model x ↦ x / ||x||. Distances
        // between normalized vectors only track raw ones when every input
        // already has unit norm.
        let id = |n: usize| {
            let mut w = vec![0.0; n * n];
            for i in 0..n {
                w[i * n + i] = 1.0;
            }
            DenseLayer::new(Linear::new(n, n, w, vec![0.0; n]).unwrap(), vec![1.0; n]).unwrap()
        };
        let model = EmbedNetParams::from_layers([id(4), id(4), id(4)], 0).unwrap();
        for seed in 0..20 {
            let mut s = sample(8, seed);
            s.phi = l2_normalize(&s.phi).unwrap();
            for h in &mut s.hypotheses {
                h.psi = l2_normalize(&h.psi).unwrap();
            }
            let raw = rerank_sample(&s, RerankMode::Raw, 8).unwrap();
            let emb = rerank_sample(&s, RerankMode::EmbedNet(&model), 8).unwrap();
            assert_eq!(raw.order(), emb.order());
            assert_eq!(emb.space, Space::Embednet);
        }
    }

    #[test]
    fn model_dim_mismatch_is_error() {
        let s = sample(3, 1);
        let model = EmbedNetParams::init([5, 3, 3, 2], 1).unwrap();
        assert!(matches!(
            rerank_sample(&s, RerankMode::EmbedNet(&model), 3),
            Err(Error::Dimension { .. })
        ));
    }

    fn vec4() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 4)
    }

    proptest! {
        #[test]
        fn rank_is_sorted_permutation(d in prop::collection::vec(0.0f64..5.0, 1..25)) {
            let order = ranked(&d);
            let mut sorted = order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..d.len()).collect::<Vec<_>>());
            for w in order.windows(2) {
                prop_assert!(d[w[0]] < d[w[1]] || (d[w[0]] == d[w[1]] && w[0] < w[1]));
            }
            let argmin = (0..d.len()).fold(0, |b, i| if d[i] < d[b] { i } else { b });
            prop_assert_eq!(order[0], argmin);
        }

        #[test]
        fn monotone_transform_keeps_order(d in prop::collection::vec(0.0f64..5.0, 1..25)) {
            let t: Vec<f64> = d.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(ranked(&d), ranked(&t));
        }

        #[test]
        fn metric_axioms(a in vec4(), b in vec4(), c in vec4()) {
            let d = |x: &[f64], y: &[f64]| distances(x, &[y]).unwrap()[0];
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn unit_vectors_distance_vs_cosine(a in vec4(), b in vec4()) {
            prop_assume!(dot(&a, &a) > 1e-6 && dot(&b, &b) > 1e-6);
            let (u, v) = (l2_normalize(&a).unwrap(), l2_normalize(&b).unwrap());
            let d = distances(&u, &[&v]).unwrap()[0];
            prop_assert!((d * d - (2.0 - 2.0 * dot(&u, &v))).abs() < 1e-9);
        }
    }
}
