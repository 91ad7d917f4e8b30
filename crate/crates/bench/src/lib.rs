//! Benchmark fixtures shared by the criterion targets.

use ucvme::numeric::{Matrix, RngState};
use ucvme::training::{LabeledBatch, TrainConfig, TrainState, Variant};

/// Uniform(-1, 1) matrix drawn from a fixed stream.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::substream(seed, 0);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Matrix::new(rows, cols, data).expect("sizes match")
}

/// A fresh training state plus one labeled and one unlabeled batch.
pub fn train_fixture(variant: Variant, dim: usize, batch: usize) -> (TrainConfig, TrainState, LabeledBatch, Matrix) {
    let cfg = TrainConfig::new(variant, 1);
    let state = TrainState::new(&cfg, dim).expect("valid config");
    let x = random_matrix(batch, dim, 2);
    let y = (0..batch).map(|i| x.get(i, 0).sin()).collect();
    let labeled = LabeledBatch::new(x, y).expect("sizes match");
    (cfg, state, labeled, random_matrix(batch, dim, 3))
}
