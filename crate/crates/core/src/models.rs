//! EmbedNet and the MLP baseline, plus the on-disk model format.
//!
//! EmbedNet: three PReLU dense layers followed by L2 normalization, shared
//! between image-side and text-side inputs. The MLP baseline: three linear
//! layers with ReLU between them and no output activation.
//!
//! # Model file
//!
//! A single file made of a one-line JSON header terminated by `\n`, followed
//! immediately by the parameter payload as little-endian IEEE-754 `f64`s:
//!
//! ```text
//! {"format_version":1,"model_kind":"embednet","dims":[2048,1024,512,128],"seed":7,"param_count":N,"config":{...}}\n
//! <N × 8 bytes>
//! ```
//!
//! Payload order is layer by layer; within a layer the weight matrix
//! (row-major, `out × in`), then the bias, then (EmbedNet only) the PReLU
//! slopes. The payload length must equal `8 × param_count` exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, prelu, prelu_backward, relu, relu_backward, DenseLayer,
    Linear,
};
use crate::train::TrainConfig;

pub const EMBEDNET_INPUT_DIM: usize = 2048;
pub const EMBEDNET_OUTPUT_DIM: usize = 128;
pub const EMBEDNET_HIDDEN_DIMS: (usize, usize) = (1024, 512);
pub const MLP_HIDDEN_DIMS: (usize, usize) = (256, 128);

/// Lower bound kept on PReLU slopes after each optimizer step.
pub const MIN_PRELU_SLOPE: f64 = 1e-3;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Uniform access to every parameter tensor of a model, in a fixed order.
///
/// A model of the same shape doubles as its gradient buffer.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    /// Restore invariants after an optimizer step.
    fn project(&mut self) {}

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim("flat parameters", self.param_count(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn check_chain(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedNetParams {
    pub layers: [DenseLayer; 3],
    pub seed: u64,
}

/// Intermediate values of one EmbedNet forward pass.
#[derive(Debug, Clone)]
pub struct EmbedNetTrace {
    input: Vec<f64>,
    pre: [Vec<f64>; 3],
    post: [Vec<f64>; 3],
    pub output: Vec<f64>,
}

impl EmbedNetTrace {
    /// Smallest |pre-activation| in the pass. Finite-difference checks are
    /// only meaningful when this exceeds the step size by a wide margin.
    pub fn kink_distance(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

impl EmbedNetParams {
    /// `dims` is `[input, hidden1, hidden2, output]`.
    pub fn init(dims: [usize; 4], seed: u64) -> Result<Self> {
        check_chain(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [
            DenseLayer::glorot(dims[0], dims[1], &mut rng),
            DenseLayer::glorot(dims[1], dims[2], &mut rng),
            DenseLayer::glorot(dims[2], dims[3], &mut rng),
        ];
        Ok(EmbedNetParams { layers, seed })
    }

    pub fn from_layers(layers: [DenseLayer; 3], seed: u64) -> Result<Self> {
        for w in layers.windows(2) {
            ensure_dim("embednet layer chain", w[0].out_dim(), w[1].in_dim())?;
        }
        Ok(EmbedNetParams { layers, seed })
    }

    pub fn dims(&self) -> [usize; 4] {
        [
            self.layers[0].in_dim(),
            self.layers[0].out_dim(),
            self.layers[1].out_dim(),
            self.layers[2].out_dim(),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_trace(x).map(|t| t.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<EmbedNetTrace> {
        ensure_dim("embednet input", self.input_dim(), x.len())?;
        let z0 = self.layers[0].linear.forward(x)?;
        let a0 = prelu(&self.layers[0].slopes, &z0)?;
        let z1 = self.layers[1].linear.forward(&a0)?;
        let a1 = prelu(&self.layers[1].slopes, &z1)?;
        let z2 = self.layers[2].linear.forward(&a1)?;
        let a2 = prelu(&self.layers[2].slopes, &z2)?;
        let output = l2_normalize(&a2)?;
        Ok(EmbedNetTrace {
            input: x.to_vec(),
            pre: [z0, z1, z2],
            post: [a0, a1, a2],
            output,
        })
    }

    /// Backpropagate `grad_output` (w.r.t. the normalized output) through a
    /// recorded pass, accumulating parameter gradients into `grads`.
    pub fn backward(&self, trace: &EmbedNetTrace, grad_output: &[f64], grads: &mut EmbedNetParams) {
        let mut g = l2_normalize_backward(&trace.post[2], &trace.output, grad_output);
        for l in (0..3).rev() {
            let layer = &self.layers[l];
            let gl = &mut grads.layers[l];
            let gz = prelu_backward(&layer.slopes, &trace.pre[l], &g, &mut gl.slopes);
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.post[l - 1]
            };
            g = layer.linear.backward(input, &gz, &mut gl.linear);
        }
    }
}

/// EmbedNet with the default 2048 → 128 ends.
pub fn init_embednet(hidden_dims: (usize, usize), seed: u64) -> Result<EmbedNetParams> {
    EmbedNetParams::init(
        [
            EMBEDNET_INPUT_DIM,
            hidden_dims.0,
            hidden_dims.1,
            EMBEDNET_OUTPUT_DIM,
        ],
        seed,
    )
}

impl Parameters for EmbedNetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(9);
        for l in &self.layers {
            out.extend(l.linear.tensors());
            out.push(&l.slopes[..]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(9);
        for l in &mut self.layers {
            out.extend(l.linear.tensors_mut());
            out.push(&mut l.slopes[..]);
        }
        out
    }

    fn zeros_like(&self) -> Self {
        EmbedNetParams {
            layers: [
                DenseLayer::zeros(self.layers[0].in_dim(), self.layers[0].out_dim()),
                DenseLayer::zeros(self.layers[1].in_dim(), self.layers[1].out_dim()),
                DenseLayer::zeros(self.layers[2].in_dim(), self.layers[2].out_dim()),
            ],
            seed: self.seed,
        }
    }

    fn project(&mut self) {
        for l in &mut self.layers {
            for s in &mut l.slopes {
                if *s < MIN_PRELU_SLOPE {
                    *s = MIN_PRELU_SLOPE;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: [Linear; 3],
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    post: [Vec<f64>; 2],
    pub output: Vec<f64>,
}

impl MlpParams {
    /// `dims` is `[input, hidden1, hidden2]`; the output dim equals the input dim.
    pub fn init(input_dim: usize, hidden_dims: (usize, usize), seed: u64) -> Result<Self> {
        check_chain(&[input_dim, hidden_dims.0, hidden_dims.1])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [
            Linear::glorot(input_dim, hidden_dims.0, &mut rng),
            Linear::glorot(hidden_dims.0, hidden_dims.1, &mut rng),
            Linear::glorot(hidden_dims.1, input_dim, &mut rng),
        ];
        Ok(MlpParams { layers, seed })
    }

    pub fn from_layers(layers: [Linear; 3], seed: u64) -> Result<Self> {
        for w in layers.windows(2) {
            ensure_dim("mlp layer chain", w[0].out_dim(), w[1].in_dim())?;
        }
        Ok(MlpParams { layers, seed })
    }

    pub fn dims(&self) -> [usize; 4] {
        [
            self.layers[0].in_dim(),
            self.layers[0].out_dim(),
            self.layers[1].out_dim(),
            self.layers[2].out_dim(),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_trace(x).map(|t| t.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<MlpTrace> {
        let z0 = self.layers[0].forward(x)?;
        let a0 = relu(&z0);
        let z1 = self.layers[1].forward(&a0)?;
        let a1 = relu(&z1);
        let output = self.layers[2].forward(&a1)?;
        Ok(MlpTrace {
            input: x.to_vec(),
            pre: [z0, z1],
            post: [a0, a1],
            output,
        })
    }

    pub fn backward(&self, trace: &MlpTrace, grad_output: &[f64], grads: &mut MlpParams) {
        let mut g = self.layers[2].backward(&trace.post[1], grad_output, &mut grads.layers[2]);
        for l in (0..2).rev() {
            let gz = relu_backward(&trace.pre[l], &g);
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.post[l - 1]
            };
            g = self.layers[l].backward(input, &gz, &mut grads.layers[l]);
        }
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    fn zeros_like(&self) -> Self {
        MlpParams {
            layers: [
                Linear::zeros(self.layers[0].in_dim(), self.layers[0].out_dim()),
                Linear::zeros(self.layers[1].in_dim(), self.layers[1].out_dim()),
                Linear::zeros(self.layers[2].in_dim(), self.layers[2].out_dim()),
            ],
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Embednet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    EmbedNet(EmbedNetParams),
    Mlp(MlpParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::EmbedNet(_) => ModelKind::Embednet,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    fn dims(&self) -> [usize; 4] {
        match self {
            Model::EmbedNet(p) => p.dims(),
            Model::Mlp(p) => p.dims(),
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Model::EmbedNet(p) => p.seed,
            Model::Mlp(p) => p.seed,
        }
    }

    fn flat(&self) -> Vec<f64> {
        match self {
            Model::EmbedNet(p) => p.to_flat(),
            Model::Mlp(p) => p.to_flat(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    model_kind: ModelKind,
    dims: Vec<usize>,
    seed: u64,
    param_count: usize,
    #[serde(default)]
    config: Option<TrainConfig>,
}

/// A model read back from disk together with the training config it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub config: Option<TrainConfig>,
}

pub fn encode_model(model: &Model, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let flat = model.flat();
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        model_kind: model.kind(),
        dims: model.dims().to_vec(),
        seed: model.seed(),
        param_count: flat.len(),
        config: config.cloned(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;
    buf.push(b'\n');
    buf.reserve(flat.len() * 8);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("missing model header line"))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(format!("bad model header: {e}")))?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported model format_version {} (supported: {MODEL_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let dims: [usize; 4] = header
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(format!("expected 4 dims, found {:?}", header.dims)))?;
    if dims.contains(&0) {
        return Err(Error::format(format!("zero dim in {dims:?}")));
    }
    let mut model = match header.model_kind {
        ModelKind::Embednet => Model::EmbedNet(
            EmbedNetParams::init(dims, header.seed).map_err(|e| Error::format(e.to_string()))?,
        ),
        ModelKind::Mlp => {
            if dims[3] != dims[0] {
                return Err(Error::format(format!(
                    "mlp output dim {} differs from input dim {}",
                    dims[3], dims[0]
                )));
            }
            Model::Mlp(
                MlpParams::init(dims[0], (dims[1], dims[2]), header.seed)
                    .map_err(|e| Error::format(e.to_string()))?,
            )
        }
    };
    let expected = match &model {
        Model::EmbedNet(p) => p.param_count(),
        Model::Mlp(p) => p.param_count(),
    };
    if header.param_count != expected {
        return Err(Error::format(format!(
            "param_count {} does not match dims {dims:?} ({expected})",
            header.param_count
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != expected * 8 {
        return Err(Error::format(format!(
            "payload is {} bytes, expected {} (truncated or corrupt)",
            payload.len(),
            expected * 8
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite parameter in payload"));
    }
    match &mut model {
        Model::EmbedNet(p) => p.set_flat(&flat)?,
        Model::Mlp(p) => p.set_flat(&flat)?,
    }
    Ok(ModelFile {
        model,
        config: header.config,
    })
}

pub fn save_model(path: &Path, model: &Model, config: Option<&TrainConfig>) -> Result<()> {
    let bytes = encode_model(model, config)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, norm};
    use rand::Rng;

    fn seeded_input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = EmbedNetParams::init([16, 8, 8, 4], 3).unwrap();
        let b = EmbedNetParams::init([16, 8, 8, 4], 3).unwrap();
        let c = EmbedNetParams::init([16, 8, 8, 4], 4).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), c.to_flat());
        assert!(a
            .layers
            .iter()
            .all(|l| l.linear.bias.iter().all(|&b| b == 0.0)));
        assert!(a.layers.iter().all(|l| l.slopes.iter().all(|&s| s == 0.25)));
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(a.layers[0].linear.weights.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn default_embednet_shapes() {
        let p = init_embednet(EMBEDNET_HIDDEN_DIMS, 1).unwrap();
        let shapes: Vec<(usize, usize)> =
            p.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect();
        assert_eq!(shapes, vec![(1024, 2048), (512, 1024), (128, 512)]);
        let x = seeded_input(5, 2048);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.len(), 128);
        assert!((norm(&y) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_dims_are_config_errors() {
        assert!(matches!(
            EmbedNetParams::init([8, 0, 4, 2], 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            MlpParams::init(8, (0, 2), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embednet_matches_composition_oracle() {
        let p = EmbedNetParams::init([8, 4, 4, 2], 17).unwrap();
        let x = seeded_input(9, 8);
        let mut h = x.clone();
        for l in &p.layers {
            h = nn::prelu(&l.slopes, &nn::linear_forward(l, &h).unwrap()).unwrap();
        }
        let want = nn::l2_normalize(&h).unwrap();
        assert_eq!(p.forward(&x).unwrap(), want);
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
    }

    #[test]
    fn embednet_output_direction_ignores_last_layer_scale() {
        let p = EmbedNetParams::init([8, 6, 5, 3], 2).unwrap();
        let x = seeded_input(4, 8);
        let mut scaled = p.clone();
        for w in scaled.layers[2].linear.weights.iter_mut() {
            *w *= 7.5;
        }
        for b in scaled.layers[2].linear.bias.iter_mut() {
            *b *= 7.5;
        }
        let a = p.forward(&x).unwrap();
        let b = scaled.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn embednet_degenerate_output_is_reported() {
        let mut p = EmbedNetParams::init([4, 3, 3, 2], 1).unwrap();
        for w in p.layers[2].linear.weights.iter_mut() {
            *w = 0.0;
        }
        assert!(matches!(
            p.forward(&[1.0, 2.0, 3.0, 4.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn mlp_zero_input_zero_output_and_oracle() {
        let p = MlpParams::init(8, (6, 4), 5).unwrap();
        assert_eq!(p.forward(&[0.0; 8]).unwrap(), vec![0.0; 8]);
        let x = seeded_input(21, 8);
        let h0 = nn::relu(&p.layers[0].forward(&x).unwrap());
        let h1 = nn::relu(&p.layers[1].forward(&h0).unwrap());
        let want = p.layers[2].forward(&h1).unwrap();
        assert_eq!(p.forward(&x).unwrap(), want);
        assert_eq!(p.dims(), [8, 6, 4, 8]);
        assert!(p.forward(&[0.0; 7]).is_err());
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::embednet_default();
        cfg.hidden_dims = (6, 5);
        let mut e = EmbedNetParams::init([10, 6, 5, 3], 99).unwrap();
        e.layers[1].slopes[2] = 0.123_456_789_012_345_68;
        let path = dir.path().join("e.model");
        save_model(&path, &Model::EmbedNet(e.clone()), Some(&cfg)).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config.as_ref(), Some(&cfg));
        let Model::EmbedNet(loaded) = back.model else {
            panic!("wrong kind")
        };
        assert_eq!(
            loaded
                .to_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            e.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let x = seeded_input(1, 10);
        assert_eq!(loaded.forward(&x).unwrap(), e.forward(&x).unwrap());

        let m = MlpParams::init(10, (4, 3), 8).unwrap();
        let path = dir.path().join("m.model");
        save_model(&path, &Model::Mlp(m.clone()), None).unwrap();
        assert_eq!(load_model(&path).unwrap().model, Model::Mlp(m));
    }

    #[test]
    fn corrupt_model_files_are_format_errors() {
        let e = EmbedNetParams::init([6, 4, 4, 2], 1).unwrap();
        let bytes = encode_model(&Model::EmbedNet(e), None).unwrap();

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_model(truncated), Err(Error::Format { .. })));
        assert!(matches!(
            decode_model(b"garbage"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_model(b""), Err(Error::Format { .. })));

        let text =
            String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
                .replace("\"format_version\":1", "\"format_version\":999");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap()..]);
        let err = decode_model(&bumped).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("999"), "{err}");

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_model(&nan), Err(Error::Format { .. })));
    }
}
