#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use patchmix::head::SoftmaxObjective;
use patchmix::{train, InitStrategy, LabeledDataset, PatchMixtureModel, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Directory holding the four MNIST IDX files, from `PATCHMIX_MNIST_DIR` or
/// `<workspace>/data/mnist`. `None` when the training images are absent.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("PATCHMIX_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

pub fn ground_truth_filters() -> PatchMixtureModel {
    #[rustfmt::skip]
    let mu = vec![
        // a bright cross
        -2.0, 2.0, -2.0,
         2.0, 2.0,  2.0,
        -2.0, 2.0, -2.0,
        // a diagonal
         2.0, -2.0, -2.0,
        -2.0,  2.0, -2.0,
        -2.0, -2.0,  2.0,
    ];
    PatchMixtureModel::from_mu(Tensor::new(&[2, 1, 3, 3], mu).unwrap()).unwrap()
}

pub fn frobenius_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    frobenius_distance(a, b) / (a.len() as f64).sqrt()
}

pub struct Recovery {
    pub truth_distance: f64,
    /// Worst per-filter RMSE under the best matching of learned to true filters.
    pub worst_rmse: f64,
    pub logliks: Vec<f64>,
}

/// Trains K=2, L=3 on 500 sampled 8x8 images and matches the result against
/// the generating filters.
pub fn synthetic_recovery(seed: u64, restarts: usize) -> Recovery {
    let truth = ground_truth_filters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(500 * 64);
    for _ in 0..500 {
        pixels.extend(oracle::oracle_sample(&truth, 8, 8, &mut rng).0);
    }
    let data = LabeledDataset::new(Tensor::new(&[500, 1, 8, 8], pixels).unwrap(), None).unwrap();
    let config = TrainConfig {
        num_patches: 2,
        patch_size: 3,
        max_epochs: 50,
        batch_size: 100,
        convergence_tol: 1e-7,
        seed,
        shuffle: false,
        init: InitStrategy::default(),
        restarts,
    };
    let outcome = train(&data, &config, |_| {}).unwrap();
    let learned = &outcome.model;
    let (t0, t1) = (truth.filter(0), truth.filter(1));
    let (l0, l1) = (learned.filter(0), learned.filter(1));
    let straight = rmse(l0, t0).max(rmse(l1, t1));
    let swapped = rmse(l0, t1).max(rmse(l1, t0));
    Recovery {
        truth_distance: frobenius_distance(t0, t1),
        worst_rmse: straight.min(swapped),
        logliks: outcome.logliks(),
    }
}

/// Central differences on a 3-class, 5-feature, 20-sample instance.
pub fn gradient_check_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> = (0..20 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
    let objective = SoftmaxObjective {
        features: &features,
        dim: 5,
        labels: &labels,
        classes: 3,
        l2: 1e-2,
    };
    let params: Vec<f64> = (0..objective.num_params())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let (_, grad) = objective.loss_and_gradient(&params);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (objective.loss(&plus) - objective.loss(&minus)) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
