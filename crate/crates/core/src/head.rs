//! Image-wide log-sum-exp pooling and a multinomial logistic regression
//! trained on the pooled activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::em::PatchMixtureModel;
use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Tensor};

/// One activation per image per filter, `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub values: Tensor,
}

impl PooledFeatures {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Log-sum-exp of each channel's score map (cross-correlation plus bias)
/// over all spatial positions.
pub fn pool(model: &PatchMixtureModel, images: &Tensor) -> Result<PooledFeatures> {
    let n = images.dims4()?[0];
    let k = model.num_patches();
    let mut values = Vec::with_capacity(n * k);
    model.for_each_score_map(images, |_, scores| {
        let m = scores.len() / k;
        for channel in scores.chunks_exact(m) {
            values.push(logsumexp(channel)? as f32);
        }
        Ok(())
    })?;
    Ok(PooledFeatures {
        values: Tensor::new(&[n, k], values)?,
    })
}

/// Learning-rate multiplier applied after every accepted step.
pub const STEP_GROWTH: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SoftmaxHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Mean cross-entropy plus `0.5 * l2 * |W|²` over standardized features.
///
/// Parameters are packed as the `classes x dim` weight matrix followed by
/// `classes` intercepts.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxObjective<'a> {
    pub features: &'a [f64],
    pub dim: usize,
    pub labels: &'a [usize],
    pub classes: usize,
    pub l2: f64,
}

impl SoftmaxObjective<'_> {
    pub fn num_params(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        self.evaluate(params, None)
    }

    pub fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params()];
        let loss = self.evaluate(params, Some(&mut grad));
        (loss, grad)
    }

    fn evaluate(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let (c, d) = (self.classes, self.dim);
        let (weights, intercepts) = params.split_at(c * d);
        let n = self.labels.len();
        let inv_n = 1.0 / n as f64;
        let mut logits = vec![0.0; c];
        let mut loss = 0.0;
        for (x, &y) in self.features.chunks_exact(d).zip(self.labels) {
            affine(weights, intercepts, x, &mut logits);
            let lse = logsumexp(&logits).expect("at least two classes");
            loss += lse - logits[y];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g.split_at_mut(c * d);
                for j in 0..c {
                    let delta = ((logits[j] - lse).exp() - f64::from(j == y)) * inv_n;
                    gb[j] += delta;
                    gw[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(gw, &xv)| *gw += delta * xv);
                }
            }
        }
        let sq: f64 = weights.iter().map(|w| w * w).sum();
        if let Some(g) = grad {
            g[..c * d]
                .iter_mut()
                .zip(weights)
                .for_each(|(g, &w)| *g += self.l2 * w);
        }
        loss * inv_n + 0.5 * self.l2 * sq
    }
}

fn affine(weights: &[f64], intercepts: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = intercepts[j]
            + weights[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
    }
}

/// Linear softmax classifier over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    /// `classes x dim`.
    pub weights: Tensor,
    pub intercepts: Vec<f32>,
    pub means: Vec<f32>,
    pub scales: Vec<f32>,
    pub trained: bool,
    /// Training loss after initialization and after every accepted step.
    pub loss_history: Vec<f64>,
}

impl SoftmaxClassifier {
    /// An untrained classifier with zero parameters and identity standardization.
    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            weights: Tensor::zeros(&[classes, dim])?,
            intercepts: vec![0.0; classes],
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
            trained: false,
            loss_history: Vec::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.intercepts.len()
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    fn standardize_row(&self, row: &[f32], out: &mut [f64]) {
        for ((o, &v), (&m, &s)) in out
            .iter_mut()
            .zip(row)
            .zip(self.means.iter().zip(&self.scales))
        {
            *o = (v as f64 - m as f64) / s as f64;
        }
    }
}

fn standardization(x: &[f32], n: usize, d: usize) -> (Vec<f32>, Vec<f32>) {
    let mut means = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        means.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut vars = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for ((s, &v), &m) in vars.iter_mut().zip(row).zip(&means) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let scales = vars
        .iter()
        .map(|&v| {
            let sd = (v / n as f64).sqrt();
            // constant columns stay unscaled
            if sd > 1e-12 && sd.is_finite() {
                sd as f32
            } else {
                1.0
            }
        })
        .collect();
    (means.iter().map(|&m| m as f32).collect(), scales)
}

/// Full-batch gradient descent on the regularized cross-entropy. A step that
/// would raise the loss is retried with half the learning rate; an accepted
/// step grows the rate by [`STEP_GROWTH`].
pub fn fit_softmax(
    features: &PooledFeatures,
    labels: &[usize],
    classes: usize,
    hyper: &SoftmaxHyper,
) -> Result<SoftmaxClassifier> {
    let [n, d] = features.values.dims2()?;
    if labels.is_empty() {
        return Err(Error::Empty("training labels"));
    }
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if classes < 2 {
        return Err(Error::Config("softmax needs at least two classes".into()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if hyper.learning_rate.is_nan()
        || hyper.learning_rate <= 0.0
        || hyper.l2.is_nan()
        || hyper.l2 < 0.0
    {
        return Err(Error::Config(
            "learning rate must be positive and l2 non-negative".into(),
        ));
    }
    if let Some(v) = features.values.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature value {v}")));
    }

    let mut clf = SoftmaxClassifier::zeros(classes, d)?;
    let (means, scales) = standardization(features.values.data(), n, d);
    clf.means = means;
    clf.scales = scales;
    let mut x = vec![0.0; n * d];
    for (row, out) in features
        .values
        .data()
        .chunks_exact(d)
        .zip(x.chunks_exact_mut(d))
    {
        clf.standardize_row(row, out);
    }
    let objective = SoftmaxObjective {
        features: &x,
        dim: d,
        labels,
        classes,
        l2: hyper.l2,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut params: Vec<f64> = (0..classes * d)
        .map(|_| init.sample(&mut rng))
        .chain(std::iter::repeat_n(0.0, classes))
        .collect();

    let mut lr = hyper.learning_rate;
    let (mut loss, mut grad) = objective.loss_and_gradient(&params);
    let mut history = vec![loss];
    let mut candidate = vec![0.0; params.len()];
    'epochs: for _ in 0..hyper.epochs {
        loop {
            candidate
                .iter_mut()
                .zip(params.iter().zip(&grad))
                .for_each(|(c, (&p, &g))| *c = p - lr * g);
            let next = objective.loss(&candidate);
            if next <= loss {
                std::mem::swap(&mut params, &mut candidate);
                (loss, grad) = objective.loss_and_gradient(&params);
                history.push(loss);
                lr *= STEP_GROWTH;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break 'epochs;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("softmax loss {loss}")));
    }

    let (w, b) = params.split_at(classes * d);
    clf.weights = Tensor::new(&[classes, d], w.iter().map(|&v| v as f32).collect())?;
    clf.intercepts = b.iter().map(|&v| v as f32).collect();
    clf.trained = true;
    clf.loss_history = history;
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    /// `N x classes`.
    pub probabilities: Tensor,
}

pub fn predict(clf: &SoftmaxClassifier, features: &PooledFeatures) -> Result<Predictions> {
    let [n, d] = features.values.dims2()?;
    if d != clf.dim() {
        return Err(Error::ShapeMismatch {
            axis: "feature width",
            expected: clf.dim(),
            found: d,
        });
    }
    let c = clf.classes();
    let weights: Vec<f64> = clf.weights.data().iter().map(|&v| v as f64).collect();
    let intercepts: Vec<f64> = clf.intercepts.iter().map(|&v| v as f64).collect();
    let mut x = vec![0.0; d];
    let mut logits = vec![0.0; c];
    let mut classes = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * c);
    for row in features.values.data().chunks_exact(d) {
        clf.standardize_row(row, &mut x);
        affine(&weights, &intercepts, &x, &mut logits);
        let lse = logsumexp(&logits)?;
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > logits[best] { j } else { best });
        classes.push(best);
        probs.extend(logits.iter().map(|&v| (v - lse).exp() as f32));
    }
    Ok(Predictions {
        classes,
        probabilities: Tensor::new(&[n, c], probs)?,
    })
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
