//! The patch mixture model and its batch EM training.
//!
//! An image is modelled as one `L x L` patch, chosen uniformly among `K`
//! patch means, placed uniformly at one of the `H' x W'` valid locations, with
//! every other pixel drawn from a standard normal. With unit variances the log
//! joint posterior of (patch, location) is, up to a per-image constant,
//!
//! ```text
//! score[k, i, j] = Σ mu[k] · window(i, j) - 0.5 |mu[k]|²
//! ```
//!
//! i.e. a valid cross-correlation with the patch means as filters and the
//! negative half squared norm as bias. The M-step replaces each patch mean
//! by the posterior-weighted average of the windows it covers.

use std::time::Instant;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{make_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{
    accumulate_weighted_patches, logsumexp, xcorr_unfolded, PatchGeometry, Tensor,
};

/// Denominators below `STARVED_FRACTION * samples_seen` leave a filter unchanged.
pub const STARVED_FRACTION: f64 = 1e-8;

/// `K` patch means of shape `Cin x L x L` and their biases `-0.5 |mu_k|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMixtureModel {
    mu: Tensor,
    bias: Vec<f64>,
}

impl PatchMixtureModel {
    /// Builds a model from a `K x Cin x L x L` tensor of patch means.
    pub fn from_mu(mu: Tensor) -> Result<Self> {
        let [_, _, l, w] = mu.dims4()?;
        if l != w {
            return Err(Error::ShapeMismatch {
                axis: "patch width",
                expected: l,
                found: w,
            });
        }
        if let Some(v) = mu.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("patch mean {v}")));
        }
        let bias = compute_bias(&mu);
        Ok(Self { mu, bias })
    }

    pub fn zeros(k: usize, cin: usize, l: usize) -> Result<Self> {
        Self::from_mu(Tensor::zeros(&[k, cin, l, l])?)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn num_patches(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn patch_size(&self) -> usize {
        self.mu.shape()[2]
    }

    /// One flattened filter.
    pub fn filter(&self, k: usize) -> &[f32] {
        self.mu.outer(k)
    }

    /// Whether the stored biases agree with the patch means within `tol`.
    pub fn bias_consistent(&self, tol: f64) -> bool {
        compute_bias(&self.mu)
            .iter()
            .zip(&self.bias)
            .all(|(a, b)| (a - b).abs() <= tol)
    }

    fn geometry_for(&self, images: &Tensor) -> Result<(usize, PatchGeometry)> {
        let [n, cin, h, w] = images.dims4()?;
        if cin != self.channels() {
            return Err(Error::ShapeMismatch {
                axis: "channels",
                expected: self.channels(),
                found: cin,
            });
        }
        Ok((n, PatchGeometry::new(cin, h, w, self.patch_size())?))
    }

    fn mu64(&self) -> Vec<f64> {
        self.mu.data().iter().map(|&v| v as f64).collect()
    }

    /// Calls `f(n, scores)` with the `K x H' x W'` score map of every image.
    pub(crate) fn for_each_score_map(
        &self,
        images: &Tensor,
        mut f: impl FnMut(usize, &[f64]) -> Result<()>,
    ) -> Result<PatchGeometry> {
        let (n, geom) = self.geometry_for(images)?;
        let k = self.num_patches();
        let m = geom.positions();
        let mu = self.mu64();
        let mut unfolded = Vec::new();
        let mut scores = vec![0.0; k * m];
        for i in 0..n {
            geom.unfold(images.outer(i), &mut unfolded);
            xcorr_unfolded(&geom, &unfolded, &mu, k, &mut scores);
            for (row, &b) in scores.chunks_exact_mut(m).zip(&self.bias) {
                row.iter_mut().for_each(|s| *s += b);
            }
            f(i, &scores)?;
        }
        Ok(geom)
    }
}

fn compute_bias(mu: &Tensor) -> Vec<f64> {
    let k = mu.shape()[0];
    (0..k)
        .map(|i| -0.5 * mu.outer(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .collect()
}

/// Normalized joint posterior over (patch, location) for a batch.
#[derive(Debug, Clone)]
pub struct PosteriorMap {
    /// `N x K x H' x W'`, summing to one per image.
    pub gamma: Tensor,
    /// Per-image log normalizer: logsumexp of all scores.
    pub log_norm: Vec<f64>,
}

/// E-step: score every (patch, location) and normalize per image.
pub fn e_step(model: &PatchMixtureModel, images: &Tensor) -> Result<PosteriorMap> {
    let n = images.dims4()?[0];
    let mut gamma = Vec::new();
    let mut log_norm = Vec::with_capacity(n);
    let geom = model.for_each_score_map(images, |_, scores| {
        let lse = logsumexp(scores)?;
        gamma.extend(scores.iter().map(|&s| (s - lse).exp() as f32));
        log_norm.push(lse);
        Ok(())
    })?;
    let gamma = Tensor::new(&[n, model.num_patches(), geom.out_h(), geom.out_w()], gamma)?;
    Ok(PosteriorMap { gamma, log_norm })
}

/// Σ over images of the log normalizer of the scores: the marginal
/// log-likelihood with every term that does not depend on the patch means
/// (background energy, Gaussian constants, uniform prior) dropped.
pub fn marginal_loglik(model: &PatchMixtureModel, images: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    model.for_each_score_map(images, |_, scores| {
        total += logsumexp(scores)?;
        Ok(())
    })?;
    Ok(total)
}

/// Running numerator and denominator of the M-step across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepAccumulator {
    k: usize,
    cin: usize,
    l: usize,
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    samples_seen: usize,
}

impl MStepAccumulator {
    pub fn new(k: usize, cin: usize, l: usize) -> Self {
        Self {
            k,
            cin,
            l,
            numerator: vec![0.0; k * cin * l * l],
            denominator: vec![0.0; k],
            samples_seen: 0,
        }
    }

    pub fn for_model(model: &PatchMixtureModel) -> Self {
        Self::new(model.num_patches(), model.channels(), model.patch_size())
    }

    /// `K x Cin x L x L`, row-major, 64-bit.
    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    pub fn denominator(&self) -> &[f64] {
        &self.denominator
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Element-wise sum with an accumulator of the same shape.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.check_shape(other.k, other.cin, other.l)?;
        self.numerator
            .iter_mut()
            .zip(&other.numerator)
            .for_each(|(a, b)| *a += b);
        self.denominator
            .iter_mut()
            .zip(&other.denominator)
            .for_each(|(a, b)| *a += b);
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    /// Filters whose posterior mass falls below the starvation threshold.
    pub fn starved_filters(&self) -> Vec<usize> {
        let threshold = STARVED_FRACTION * self.samples_seen as f64;
        (0..self.k)
            .filter(|&k| self.denominator[k] < threshold || self.denominator[k] == 0.0)
            .collect()
    }

    fn check_shape(&self, k: usize, cin: usize, l: usize) -> Result<()> {
        for (axis, expected, found) in [
            ("patches", self.k, k),
            ("channels", self.cin, cin),
            ("patch size", self.l, l),
        ] {
            if expected != found {
                return Err(Error::ShapeMismatch {
                    axis,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Adds one batch's posterior-weighted window sums and posterior masses.
pub fn m_step_batch(
    images: &Tensor,
    posterior: &PosteriorMap,
    acc: &mut MStepAccumulator,
) -> Result<()> {
    let [n, cin, h, w] = images.dims4()?;
    let [gn, k, oh, ow] = posterior.gamma.dims4()?;
    if gn != n {
        return Err(Error::ShapeMismatch {
            axis: "N",
            expected: n,
            found: gn,
        });
    }
    let l = crate::tensor::patch_size_from(h, w, oh, ow)?;
    acc.check_shape(k, cin, l)?;
    let geom = PatchGeometry::new(cin, h, w, l)?;
    let gamma = posterior.gamma.data();
    accumulate_weighted_patches(&geom, images, gamma, k, &mut acc.numerator);
    let m = geom.positions();
    for image in gamma.chunks_exact(k * m) {
        for (d, row) in acc.denominator.iter_mut().zip(image.chunks_exact(m)) {
            *d += row.iter().map(|&g| g as f64).sum::<f64>();
        }
    }
    acc.samples_seen += n;
    Ok(())
}

/// Replaces every patch mean by its posterior-weighted window average.
/// Starved filters keep their previous mean.
pub fn m_step_finalize(
    acc: &MStepAccumulator,
    previous: &PatchMixtureModel,
) -> Result<PatchMixtureModel> {
    if acc.samples_seen == 0 {
        return Err(Error::Empty("M-step accumulator has seen no samples"));
    }
    acc.check_shape(
        previous.num_patches(),
        previous.channels(),
        previous.patch_size(),
    )?;
    let starved = acc.starved_filters();
    if !starved.is_empty() {
        warn!(
            "{} starved filter(s) kept unchanged: {:?}",
            starved.len(),
            starved
        );
    }
    let d = acc.cin * acc.l * acc.l;
    let mut mu = previous.mu.clone();
    for k in (0..acc.k).filter(|k| !starved.contains(k)) {
        let denom = acc.denominator[k];
        let num = &acc.numerator[k * d..(k + 1) * d];
        mu.data_mut()[k * d..(k + 1) * d]
            .iter_mut()
            .zip(num)
            .for_each(|(m, &s)| *m = (s / denom) as f32);
    }
    PatchMixtureModel::from_mu(mu)
}

/// How initial patch means are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// A random training window per filter plus `Normal(0, noise_std)` noise.
    DataPatches { noise_std: f64 },
    /// Start from the given model.
    Model(PatchMixtureModel),
}

impl Default for InitStrategy {
    fn default() -> Self {
        Self::DataPatches { noise_std: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_patches: usize,
    pub patch_size: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop when the relative likelihood improvement drops below this.
    /// Zero disables early stopping.
    pub convergence_tol: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub init: InitStrategy,
    /// Independent initializations; the most likely result is kept.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_patches: 64,
            patch_size: 20,
            max_epochs: 20,
            batch_size: 500,
            convergence_tol: 1e-4,
            seed: 0,
            shuffle: false,
            init: InitStrategy::default(),
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.num_patches == 0 {
            return bad("number of patches must be at least 1");
        }
        if self.patch_size == 0 {
            return bad("patch size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return bad("convergence tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Draws each filter from a uniformly chosen window of a uniformly chosen
/// image, plus small Gaussian noise.
pub fn init_model(data: &LabeledDataset, config: &TrainConfig) -> Result<PatchMixtureModel> {
    config.validate()?;
    let (cin, h, w) = data.image_shape();
    let l = config.patch_size;
    let k = config.num_patches;
    let geom = PatchGeometry::new(cin, h, w, l)?;
    match &config.init {
        InitStrategy::Model(model) => {
            let expected = [k, cin, l, l];
            for ((axis, &e), &f) in ["patches", "channels", "patch size", "patch size"]
                .iter()
                .zip(&expected)
                .zip(model.mu().shape())
            {
                if e != f {
                    return Err(Error::ShapeMismatch {
                        axis,
                        expected: e,
                        found: f,
                    });
                }
            }
            Ok(model.clone())
        }
        InitStrategy::DataPatches { noise_std } => {
            if data.is_empty() {
                return Err(Error::Empty("training data"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let noise = Normal::new(0.0, *noise_std)
                .map_err(|e| Error::Config(format!("init noise: {e}")))?;
            let mut mu = Vec::with_capacity(k * geom.patch_len());
            for _ in 0..k {
                let img = data.images().outer(rng.random_range(0..data.len()));
                let i = rng.random_range(0..geom.out_h());
                let j = rng.random_range(0..geom.out_w());
                for c in 0..cin {
                    for a in 0..l {
                        let start = c * h * w + (i + a) * w + j;
                        for &v in &img[start..start + l] {
                            mu.push((v as f64 + noise.sample(&mut rng)) as f32);
                        }
                    }
                }
            }
            PatchMixtureModel::from_mu(Tensor::new(&[k, cin, l, l], mu)?)
        }
    }
}

/// Progress reported after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 0-based index of the initialization this epoch belongs to.
    pub restart: usize,
    /// 1-based.
    pub epoch: usize,
    /// Unnormalized marginal log-likelihood of the model used for this
    /// epoch's E-steps, summed over images.
    pub loglik: f64,
    pub seconds: f64,
    pub starved: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PatchMixtureModel,
    pub epochs: Vec<EpochReport>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn logliks(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loglik).collect()
    }

    pub fn final_loglik(&self) -> f64 {
        self.epochs.last().map_or(f64::NEG_INFINITY, |e| e.loglik)
    }
}

/// Runs one epoch: E-step and accumulation over every batch, then a single
/// parameter update. Returns the updated model and the summed log normalizers.
pub fn em_epoch(
    model: &PatchMixtureModel,
    data: &LabeledDataset,
    batches: &[Vec<usize>],
) -> Result<(PatchMixtureModel, f64, usize)> {
    let mut acc = MStepAccumulator::for_model(model);
    let mut loglik = 0.0;
    for batch in batches {
        let images = data.images().select_outer(batch)?;
        let posterior = e_step(model, &images)?;
        loglik += posterior.log_norm.iter().sum::<f64>();
        m_step_batch(&images, &posterior, &mut acc)?;
    }
    if !loglik.is_finite() {
        return Err(Error::NonFinite(format!(
            "marginal log-likelihood {loglik}"
        )));
    }
    let starved = acc.starved_filters().len();
    Ok((m_step_finalize(&acc, model)?, loglik, starved))
}

/// Batch EM until the likelihood stops improving or `max_epochs` is hit.
///
/// With `restarts > 1` the whole run is repeated from independent
/// initializations (seeds `seed`, `seed + 1`, ...) and the run with the highest
/// final likelihood is kept.
pub fn train(
    data: &LabeledDataset,
    config: &TrainConfig,
    mut sink: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = make_batches(data.len(), config.batch_size, config.seed, config.shuffle)?;
    let batches: Vec<Vec<usize>> = plan.batches().map(|b| b.to_vec()).collect();
    let mut best: Option<TrainOutcome> = None;
    for restart in 0..config.restarts {
        let init_config = TrainConfig {
            seed: config.seed.wrapping_add(restart as u64),
            ..config.clone()
        };
        let model = init_model(data, &init_config)?;
        let outcome = run_em(model, data, config, &batches, restart, &mut sink)?;
        let better = match &best {
            None => true,
            Some(b) => outcome.final_loglik() > b.final_loglik(),
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Batch EM from a given starting model.
pub fn train_from(
    model: PatchMixtureModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    mut sink: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = make_batches(data.len(), config.batch_size, config.seed, config.shuffle)?;
    let batches: Vec<Vec<usize>> = plan.batches().map(|b| b.to_vec()).collect();
    run_em(model, data, config, &batches, 0, &mut sink)
}

fn run_em(
    mut model: PatchMixtureModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    batches: &[Vec<usize>],
    restart: usize,
    sink: &mut impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let mut epochs: Vec<EpochReport> = Vec::with_capacity(config.max_epochs);
    let mut converged = false;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let (next, loglik, starved) = em_epoch(&model, data, batches)?;
        model = next;
        let report = EpochReport {
            restart,
            epoch,
            loglik,
            seconds: start.elapsed().as_secs_f64(),
            starved,
        };
        sink(&report);
        let improvement = epochs
            .last()
            .map(|prev| (loglik - prev.loglik) / prev.loglik.abs().max(f64::MIN_POSITIVE));
        epochs.push(report);
        if let Some(rel) = improvement {
            if config.convergence_tol > 0.0 && rel < config.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        epochs,
        converged,
    })
}
