//! Deterministic fixtures shared by the benchmarks.

use mrtnet_core::data::{generate_synthetic, prepare, Sample, SynthSpec, WordEmbeddings};
use mrtnet_core::model::{ModelConfig, MrtNet};
use mrtnet_core::nn::ParamStore;

/// A model with hidden size `d` over `n` clips and one prepared sample.
pub fn model_fixture(n: usize, d: usize) -> (MrtNet, ParamStore, Sample) {
    let spec = SynthSpec {
        num_samples: 1,
        n,
        d_v: 64,
        ..SynthSpec::default()
    };
    let item = generate_synthetic(&spec).expect("valid spec").items.remove(0);
    let emb = WordEmbeddings::hashed(64);
    let sample = prepare(&item.annotation, &item.features, n, &emb, 16).expect("valid sample");
    let config = ModelConfig {
        d_video: 64,
        d_query: 64,
        hidden: d,
        kernel: 7,
        heads: 8,
        n_model: n,
        max_query_len: 16,
    };
    let (net, store) = MrtNet::new(config, 0).expect("valid config");
    (net, store, sample)
}

/// A peaked, non-uniform distribution of length `n`.
pub fn distribution(n: usize, peak: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + (i as f64 - peak as f64).powi(2)))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}
