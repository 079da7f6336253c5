//! Shared fixtures for the pipeline benchmarks.

use embedrank::mining::Triplet;
use embedrank::{
    mine_triplets, synth_generate, EmbedNetParams, Margin, MlpParams, SynthConfig, WordSample,
};

/// Synthetic samples plus freshly initialized models sized to them.
pub struct Fixture {
    pub samples: Vec<WordSample>,
    pub embednet: EmbedNetParams,
    pub mlp: MlpParams,
    pub margin: Margin,
}

impl Fixture {
    /// `n` samples with `k` hypotheses each in `dim` dimensions.
    pub fn new(n: usize, k: usize, dim: usize) -> Self {
        let cfg = SynthConfig {
            n_train: n,
            n_val: 1,
            n_test: 1,
            k,
            dim,
            signal_dim: (dim / 4).max(1),
            ..SynthConfig::default()
        };
        let samples = synth_generate(&cfg)
            .expect("valid synth config")
            .train
            .samples;
        Fixture {
            samples,
            embednet: EmbedNetParams::init([dim, 64, 32, 16], 1).expect("valid dims"),
            mlp: MlpParams::init(dim, (256, 128), 1).expect("valid dims"),
            margin: Margin::new(0.2).expect("valid margin"),
        }
    }

    /// The first `n` mined triplets, enough for one optimizer batch.
    pub fn batch(&self, n: usize) -> Vec<Triplet> {
        let mined = mine_triplets(&self.samples, &self.embednet, self.margin, 0).expect("mining");
        mined.triplets.into_iter().take(n).collect()
    }
}

/// EmbedNet at its full 2048 → 1024 → 512 → 128 size and one input for it.
pub fn full_size_embednet() -> (EmbedNetParams, Vec<f64>) {
    let model = embedrank::models::init_embednet(embedrank::models::EMBEDNET_HIDDEN_DIMS, 0)
        .expect("valid dims");
    let x = (0..model.input_dim())
        .map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0)
        .collect();
    (model, x)
}
