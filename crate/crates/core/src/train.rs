//! Training loops for EmbedNet (triplet loss) and the MLP baseline (MSE).
//!
//! Both use Adam with a constant learning rate, mean-over-batch gradients,
//! and early stopping on validation loss with best-weight restore. EmbedNet
//! re-mines its triplets at the start of every epoch with the current
//! parameters.
//!
//! The loop is single-threaded and fully deterministic given the data and
//! [`TrainConfig`]; only the projection pass used for mining runs in
//! parallel, and it is order-preserving.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WordSample;
use crate::error::{ensure_dim, Error, Result};
use crate::mining::{epoch_seed, hinge, mine_triplets, Margin, Triplet};
use crate::models::{
    EmbedNetParams, MlpParams, Parameters, EMBEDNET_HIDDEN_DIMS, EMBEDNET_OUTPUT_DIM,
    MLP_HIDDEN_DIMS,
};
use crate::nn::squared_distance;

/// Seed stream used for validation mining, fixed across epochs.
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: Margin,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub hidden_dims: (usize, usize),
    /// EmbedNet output dimension; ignored by the MLP, whose output matches its input.
    pub output_dim: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl TrainConfig {
    pub fn embednet_default() -> Self {
        TrainConfig {
            margin: Margin::new(0.2).expect("valid margin"),
            learning_rate: 1e-4,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-5,
            batch_size: 256,
            hidden_dims: EMBEDNET_HIDDEN_DIMS,
            output_dim: EMBEDNET_OUTPUT_DIM,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }

    pub fn mlp_default() -> Self {
        TrainConfig {
            max_epochs: 150,
            hidden_dims: MLP_HIDDEN_DIMS,
            ..Self::embednet_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.hidden_dims.0 == 0 || self.hidden_dims.1 == 0 || self.output_dim == 0 {
            return bad("layer dims must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || !(self.min_delta >= 0.0) {
            return bad("adam_epsilon must be > 0 and min_delta >= 0");
        }
        Ok(())
    }
}

/// Adam first/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

pub fn adam_step<P: Parameters>(
    state: &mut AdamState,
    params: &mut P,
    grads: &P,
    config: &TrainConfig,
) -> Result<()> {
    let gts = grads.tensors();
    if gts.len() != state.m.len() {
        return Err(Error::dim("adam tensors", state.m.len(), gts.len()));
    }
    for (g, m) in gts.iter().zip(&state.m) {
        ensure_dim("adam tensor", m.len(), g.len())?;
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient {bad}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gts)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    params.project();
    Ok(())
}

fn scale<P: Parameters>(params: &mut P, factor: f64) {
    for t in params.tensors_mut() {
        for v in t {
            *v *= factor;
        }
    }
}

/// Triplet loss of the projected triple and its exact gradient w.r.t. every
/// EmbedNet parameter. Clamped triplets return an all-zero gradient.
pub fn triplet_grads(
    params: &EmbedNetParams,
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: Margin,
) -> Result<(f64, EmbedNetParams)> {
    let ta = params.forward_trace(anchor)?;
    let tp = params.forward_trace(positive)?;
    let tn = params.forward_trace(negative)?;
    let (a, p, n) = (&ta.output, &tp.output, &tn.output);
    let loss = hinge(squared_distance(a, p), squared_distance(a, n), margin);
    let mut grads = params.zeros_like();
    if loss > 0.0 {
        let ga: Vec<f64> = (0..a.len()).map(|i| 2.0 * (n[i] - p[i])).collect();
        let gp: Vec<f64> = (0..a.len()).map(|i| 2.0 * (p[i] - a[i])).collect();
        let gn: Vec<f64> = (0..a.len()).map(|i| 2.0 * (a[i] - n[i])).collect();
        params.backward(&ta, &ga, &mut grads);
        params.backward(&tp, &gp, &mut grads);
        params.backward(&tn, &gn, &mut grads);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Anchor,
    Positive(usize),
    Hypothesis(usize),
}

/// Sum of triplet losses over a batch and the gradient of that sum.
///
/// Each distinct input embedding is projected and backpropagated once, with
/// the output gradients of all triplets that use it summed first. This is
/// the same gradient as summing [`triplet_grads`] over the batch.
pub fn batch_triplet_grads(
    params: &EmbedNetParams,
    samples: &[WordSample],
    batch: &[Triplet],
    margin: Margin,
) -> Result<(f64, EmbedNetParams)> {
    let mut keys: Vec<(usize, Slot)> = Vec::new();
    let mut index: HashMap<(usize, Slot), usize> = HashMap::new();
    let mut slot_of = |key: (usize, Slot)| -> usize {
        *index.entry(key).or_insert_with(|| {
            keys.push(key);
            keys.len() - 1
        })
    };
    let ids: Vec<[usize; 3]> = batch
        .iter()
        .map(|t| {
            [
                slot_of((t.sample, Slot::Anchor)),
                slot_of((t.sample, Slot::Positive(t.positive))),
                slot_of((t.sample, Slot::Hypothesis(t.negative))),
            ]
        })
        .collect();

    let traces = keys
        .iter()
        .map(|&(s, slot)| {
            let sample = &samples[s];
            let input: &[f64] = match slot {
                Slot::Anchor => &sample.phi,
                Slot::Positive(k) => sample.positives()[k],
                Slot::Hypothesis(j) => &sample.hypotheses[j].psi,
            };
            params.forward_trace(input)
        })
        .collect::<Result<Vec<_>>>()?;

    let out_dim = params.output_dim();
    let mut upstream = vec![vec![0.0; out_dim]; keys.len()];
    let mut loss_sum = 0.0;
    for &[ia, ip, inn] in &ids {
        let (a, p, n) = (&traces[ia].output, &traces[ip].output, &traces[inn].output);
        let loss = hinge(squared_distance(a, p), squared_distance(a, n), margin);
        if loss <= 0.0 {
            continue;
        }
        loss_sum += loss;
        for i in 0..out_dim {
            upstream[ia][i] += 2.0 * (n[i] - p[i]);
            upstream[ip][i] += 2.0 * (p[i] - a[i]);
            upstream[inn][i] += 2.0 * (a[i] - n[i]);
        }
    }

    let mut grads = params.zeros_like();
    for (trace, g) in traces.iter().zip(&upstream) {
        if g.iter().any(|v| *v != 0.0) {
            params.backward(trace, g, &mut grads);
        }
    }
    Ok((loss_sum, grads))
}

/// Mean squared error of the MLP output against `target` and its gradient.
pub fn mse_grads(params: &MlpParams, input: &[f64], target: &[f64]) -> Result<(f64, MlpParams)> {
    ensure_dim("mse target", params.output_dim(), target.len())?;
    let trace = params.forward_trace(input)?;
    let d = target.len() as f64;
    let diff: Vec<f64> = trace
        .output
        .iter()
        .zip(target)
        .map(|(o, t)| o - t)
        .collect();
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / d;
    let g: Vec<f64> = diff.iter().map(|v| 2.0 * v / d).collect();
    let mut grads = params.zeros_like();
    params.backward(&trace, &g, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of hinge (or MSE) losses seen during the epoch's batches, divided
    /// by the number of enumerated triplets (or pairs).
    pub train_loss: f64,
    pub val_loss: f64,
    pub hard: usize,
    pub semi_hard: usize,
    pub easy: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.get(self.best_epoch)
    }

    /// Tab-separated history with a header row. Wall times are left out so
    /// the file is reproducible bit for bit.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\thard\tsemi_hard\teasy\tbest\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.hard,
                r.semi_hard,
                r.easy,
                u8::from(r.epoch == self.best_epoch)
            );
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

struct EarlyStopping {
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopping {
    fn new(config: &TrainConfig) -> Self {
        EarlyStopping {
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            patience: config.patience,
            min_delta: config.min_delta,
        }
    }

    /// Returns `(is_new_best, should_stop)`. The best epoch tracks the
    /// strict minimum; patience only resets on an improvement of at least
    /// `min_delta`.
    fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let significant = val_loss < self.best - self.min_delta;
        let is_best = val_loss < self.best;
        if is_best {
            self.best = val_loss;
            self.best_epoch = epoch;
        }
        if significant {
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        (is_best, self.since_improvement >= self.patience)
    }
}

fn check_dims(train: &[WordSample], val: &[WordSample]) -> Result<usize> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let dim = first.dim();
    for s in train.iter().chain(val) {
        ensure_dim("sample phi", dim, s.phi.len())?;
        for h in &s.hypotheses {
            ensure_dim("hypothesis psi", dim, h.psi.len())?;
        }
        if let Some(p) = &s.gt_psi {
            ensure_dim("gt_psi", dim, p.len())?;
        }
    }
    Ok(dim)
}

pub fn train_embednet(
    train: &[WordSample],
    val: &[WordSample],
    config: &TrainConfig,
) -> Result<(EmbedNetParams, TrainHistory)> {
    config.validate()?;
    let dim = check_dims(train, val)?;
    let mut params = EmbedNetParams::init(
        [
            dim,
            config.hidden_dims.0,
            config.hidden_dims.1,
            config.output_dim,
        ],
        config.seed,
    )?;
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config);
    let mut best = params.clone();
    let mut history = TrainHistory::default();
    let val_seed = epoch_seed(config.seed, VALIDATION_STREAM);

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let mined = mine_triplets(
            train,
            &params,
            config.margin,
            epoch_seed(config.seed, epoch as u64),
        )?;
        if mined.triplets.is_empty() && epoch == 0 {
            return Err(Error::TrainingStalled { epoch });
        }
        let mut loss_sum = 0.0;
        for batch in mined.triplets.chunks(config.batch_size) {
            let (l, mut grads) = batch_triplet_grads(&params, train, batch, config.margin)?;
            scale(&mut grads, 1.0 / batch.len() as f64);
            adam_step(&mut adam, &mut params, &grads, config)?;
            loss_sum += l;
        }
        let val_loss = mine_triplets(val, &params, config.margin, val_seed)?.mean_loss();
        let total = mined.counts.total().max(1);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / total as f64,
            val_loss,
            hard: mined.counts.hard,
            semi_hard: mined.counts.semi_hard,
            easy: mined.counts.easy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        debug!(
            "epoch {epoch}: train {:.6} val {:.6} hard {} semi {} easy {}",
            record.train_loss, val_loss, record.hard, record.semi_hard, record.easy
        );
        history.records.push(record);
        let (is_best, stop) = stopper.observe(epoch, val_loss);
        if is_best {
            best = params.clone();
        }
        if mined.triplets.is_empty() {
            info!("no hard or semi-hard training triplets left after epoch {epoch}; stopping");
            break;
        }
        if stop {
            info!(
                "early stop at epoch {epoch}; best epoch {}",
                stopper.best_epoch
            );
            break;
        }
    }
    history.best_epoch = stopper.best_epoch;
    Ok((best, history))
}

fn mse_pairs(samples: &[WordSample]) -> Vec<(usize, usize)> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.positives().len()).map(move |k| (i, k)))
        .collect()
}

fn mean_mse(params: &MlpParams, samples: &[WordSample], pairs: &[(usize, usize)]) -> Result<f64> {
    let mut sum = 0.0;
    for &(i, k) in pairs {
        let s = &samples[i];
        let out = params.forward(&s.phi)?;
        sum += squared_distance(&out, s.positives()[k]) / out.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Train the MLP baseline to regress each image embedding onto its
/// correct-text embedding.
pub fn train_mlp(
    train: &[WordSample],
    val: &[WordSample],
    config: &TrainConfig,
) -> Result<(MlpParams, TrainHistory)> {
    config.validate()?;
    let dim = check_dims(train, val)?;
    let mut pairs = mse_pairs(train);
    let val_pairs = mse_pairs(val);
    if pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::TrainingStalled { epoch: 0 });
    }
    let mut params = MlpParams::init(dim, config.hidden_dims, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config);
    let mut best = params.clone();
    let mut history = TrainHistory::default();

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            config.seed,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &(i, k) in batch {
                let s = &train[i];
                let (l, g) = mse_grads(&params, &s.phi, s.positives()[k])?;
                loss_sum += l;
                for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    for (a, b) in acc.iter_mut().zip(t) {
                        *a += b;
                    }
                }
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            adam_step(&mut adam, &mut params, &grads, config)?;
        }
        let val_loss = mean_mse(&params, val, &val_pairs)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            val_loss,
            hard: 0,
            semi_hard: 0,
            easy: 0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        let (is_best, stop) = stopper.observe(epoch, val_loss);
        if is_best {
            best = params.clone();
        }
        if stop {
            info!(
                "early stop at epoch {epoch}; best epoch {}",
                stopper.best_epoch
            );
            break;
        }
    }
    history.best_epoch = stopper.best_epoch;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Hypothesis;
    use crate::nn::{finite_diff_grad, relative_error};
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let e = relative_error(*a, *n, 1e-8);
            assert!(
                e < 1e-5,
                "coord {i}: analytic {a:e} numeric {n:e} rel {e:e}"
            );
        }
    }

    #[test]
    fn triplet_grads_match_finite_differences() {
        let margin = Margin::new(1.0).unwrap();
        let mut checked = 0;
        for seed in 0..100u64 {
            if checked == 20 {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = EmbedNetParams::init([8, 4, 4, 2], seed).unwrap();
            let (a, p, n) = (
                rand_vec(&mut rng, 8),
                rand_vec(&mut rng, 8),
                rand_vec(&mut rng, 8),
            );
            let (loss, grads) = triplet_grads(&params, &a, &p, &n, margin).unwrap();
            let kink = [&a, &p, &n]
                .iter()
                .map(|x| params.forward_trace(x).unwrap().kink_distance())
                .fold(f64::INFINITY, f64::min);
            if loss == 0.0 || kink < 1e-3 {
                continue;
            }
            checked += 1;
            let numeric = finite_diff_grad(
                |flat| {
                    let mut q = params.clone();
                    q.set_flat(flat).unwrap();
                    let (ya, yp, yn) = (
                        q.forward(&a).unwrap(),
                        q.forward(&p).unwrap(),
                        q.forward(&n).unwrap(),
                    );
                    hinge(
                        squared_distance(&ya, &yp),
                        squared_distance(&ya, &yn),
                        margin,
                    )
                },
                &params.to_flat(),
                1e-5,
            )
            .unwrap();
            assert_grads_close(&grads.to_flat(), &numeric);
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn clamped_triplet_has_exactly_zero_grads() {
        let params = EmbedNetParams::init([4, 3, 3, 2], 1).unwrap();
        let a = [0.3, -0.2, 0.5, 0.1];
        let (loss, grads) = triplet_grads(
            &params,
            &a,
            &a,
            &[-0.9, 0.4, 0.2, -0.7],
            Margin::new(0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_grads_match_finite_differences_and_examples() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            // nonzero biases keep pre-activations off the ReLU kink
            let mut params = MlpParams::init(6, (5, 4), seed).unwrap();
            for l in &mut params.layers {
                for b in &mut l.bias {
                    *b =
                        rng.random_range(0.05..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
            let x = rand_vec(&mut rng, 6);
            let t = rand_vec(&mut rng, 6);
            let (_, grads) = mse_grads(&params, &x, &t).unwrap();
            let numeric = finite_diff_grad(
                |flat| {
                    let mut q = params.clone();
                    q.set_flat(flat).unwrap();
                    squared_distance(&q.forward(&x).unwrap(), &t) / 6.0
                },
                &params.to_flat(),
                1e-5,
            )
            .unwrap();
            assert_grads_close(&grads.to_flat(), &numeric);
        }

        let params = MlpParams::init(4, (3, 3), 2).unwrap();
        let x = [0.5, -0.5, 0.25, 1.0];
        let out = params.forward(&x).unwrap();
        let (l, g) = mse_grads(&params, &x, &out).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));

        let zero = params.zeros_like();
        let (l, _) = mse_grads(&zero, &[0.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(l, 1.0);
        assert!(mse_grads(&params, &x, &[1.0; 3]).is_err());
    }

    #[derive(Clone)]
    struct Scalar(Vec<f64>);
    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn zeros_like(&self) -> Self {
            Scalar(vec![0.0; self.0.len()])
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig::embednet_default();
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &Scalar(vec![2.0]), &cfg).unwrap();
        // m̂ = 2, v̂ = 4, so the step is lr · 2 / (2 + ε)
        let want = -1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((p.0[0] - want).abs() < 1e-18);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grads_and_errors() {
        let cfg = TrainConfig::embednet_default();
        let mut p = Scalar(vec![1.5, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &Scalar(vec![0.0, 0.0]), &cfg).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
        assert_eq!(st.t, 1);
        assert!(matches!(
            adam_step(&mut st, &mut p, &Scalar(vec![f64::NAN, 0.0]), &cfg),
            Err(Error::Numerical(_))
        ));
        assert!(adam_step(&mut st, &mut p, &Scalar(vec![0.0]), &cfg).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = TrainConfig::embednet_default();
        let run = || {
            let mut p = Scalar(vec![0.3, -0.1, 2.0]);
            let mut st = AdamState::new(&p);
            for i in 0..50 {
                let g = Scalar(p.0.iter().map(|v| v * 2.0 + i as f64 * 0.01).collect());
                adam_step(&mut st, &mut p, &g, &cfg).unwrap();
            }
            p.0
        };
        assert_eq!(run(), run());
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<WordSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let phi = rand_vec(&mut rng, 6);
                let hyps = (0..4)
                    .map(|j| {
                        let psi = if j == 0 {
                            phi.iter()
                                .map(|v| v + 0.05 * rng.random_range(-1.0..1.0))
                                .collect()
                        } else {
                            rand_vec(&mut rng, 6)
                        };
                        let text = if j == 0 {
                            format!("t{i}")
                        } else {
                            format!("t{i}-{j}")
                        };
                        Hypothesis::new(text, 0.5, psi)
                    })
                    .collect();
                WordSample {
                    id: format!("s{i}"),
                    gt_text: format!("t{i}"),
                    phi,
                    gt_psi: None,
                    hypotheses: hyps,
                }
            })
            .collect()
    }

    #[test]
    fn batch_grads_equal_summed_triplet_grads() {
        let samples = toy_samples(5, 3);
        let params = EmbedNetParams::init([6, 5, 4, 3], 2).unwrap();
        let margin = Margin::new(2.0).unwrap();
        let mined = mine_triplets(&samples, &params, margin, 1).unwrap();
        assert!(mined.triplets.len() > 3);
        let (loss, grads) =
            batch_triplet_grads(&params, &samples, &mined.triplets, margin).unwrap();
        let mut want_loss = 0.0;
        let mut want = params.zeros_like().to_flat();
        for t in &mined.triplets {
            let s = &samples[t.sample];
            let (l, g) = triplet_grads(
                &params,
                &s.phi,
                s.positives()[t.positive],
                &s.hypotheses[t.negative].psi,
                margin,
            )
            .unwrap();
            want_loss += l;
            for (w, v) in want.iter_mut().zip(g.to_flat()) {
                *w += v;
            }
        }
        assert!((loss - want_loss).abs() < 1e-12);
        for (a, b) in grads.to_flat().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden_dims: (8, 6),
            output_dim: 4,
            max_epochs: 15,
            patience: 3,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::embednet_default()
        }
    }

    #[test]
    fn embednet_training_is_deterministic_and_restores_best() {
        let train = toy_samples(30, 1);
        let val = toy_samples(10, 2);
        let (p1, h1) = train_embednet(&train, &val, &small_cfg()).unwrap();
        let (p2, h2) = train_embednet(&train, &val, &small_cfg()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.to_tsv(), h2.to_tsv());
        let min = h1
            .records
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(h1.best().unwrap().val_loss, min);
        let recomputed = mine_triplets(
            &val,
            &p1,
            small_cfg().margin,
            epoch_seed(5, VALIDATION_STREAM),
        )
        .unwrap()
        .mean_loss();
        assert_eq!(recomputed, min);
    }

    #[test]
    fn only_easy_triplets_stall() {
        let mut train = toy_samples(4, 1);
        for s in &mut train {
            s.hypotheses.truncate(1);
        }
        let cfg = TrainConfig {
            patience: 1,
            ..small_cfg()
        };
        assert!(matches!(
            train_embednet(&train, &train.clone(), &cfg),
            Err(Error::TrainingStalled { epoch: 0 })
        ));
    }

    #[test]
    fn empty_splits_are_config_errors() {
        let s = toy_samples(3, 1);
        assert!(matches!(
            train_embednet(&[], &s, &small_cfg()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_mlp(&s, &[], &small_cfg()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mlp_with_zero_lr_keeps_initial_params() {
        let train = toy_samples(12, 4);
        let val = toy_samples(4, 5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            hidden_dims: (5, 4),
            ..small_cfg()
        };
        let (p, h) = train_mlp(&train, &val, &cfg).unwrap();
        assert_eq!(p, MlpParams::init(6, (5, 4), cfg.seed).unwrap());
        assert_eq!(h.records.len(), 3);
    }

    #[test]
    fn mlp_training_reduces_validation_loss() {
        let train = toy_samples(40, 4);
        let val = toy_samples(10, 5);
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 40,
            hidden_dims: (12, 8),
            ..small_cfg()
        };
        let (_, h) = train_mlp(&train, &val, &cfg).unwrap();
        let first = h.records[0].val_loss;
        assert!(h.best().unwrap().val_loss < first);
        let (_, h2) = train_mlp(&train, &val, &cfg).unwrap();
        assert_eq!(h.to_tsv(), h2.to_tsv());
    }
}
