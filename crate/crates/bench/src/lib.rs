//! Seeded inputs shared by the benchmarks.

use probemb::{GaussianEmbedding, Modality, ProbModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<GaussianEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mean = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let log_var = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            GaussianEmbedding::new(mean, log_var).expect("finite")
        })
        .collect()
}

pub fn random_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random image and caption features sized for `model`.
pub fn random_batch(model: &ProbModel, batch: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        random_features(batch, model.input_dim(Modality::Image), seed),
        random_features(batch, model.input_dim(Modality::Caption), seed ^ 1),
    )
}
