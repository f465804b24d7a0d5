//! Brute-force reference implementations of the patch mixture, written with
//! plain nested loops in 64-bit arithmetic. Nothing here calls into the
//! library's tensor routines; only raw data accessors are used.

#![allow(dead_code)]

use patchmix::{PatchMixtureModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One (patch, location) mixture component and its log joint score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComponent {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct OraclePosterior {
    /// Ordered by k, then i, then j.
    pub components: Vec<OracleComponent>,
    pub probs: Vec<f64>,
    pub log_norm: f64,
}

impl OraclePosterior {
    pub fn argmax(&self) -> OracleComponent {
        let mut best = 0;
        for (idx, c) in self.components.iter().enumerate() {
            if c.score > self.components[best].score {
                best = idx;
            }
        }
        self.components[best]
    }
}

pub const MAX_COMPONENTS: usize = 10_000;

fn model_dims(model: &PatchMixtureModel) -> (usize, usize, usize) {
    let s = model.mu().shape();
    (s[0], s[1], s[2])
}

/// Enumerates every (k, i, j) of one `cin x h x w` image.
pub fn oracle_posterior(
    model: &PatchMixtureModel,
    image: &[f32],
    h: usize,
    w: usize,
) -> OraclePosterior {
    let (kk, cin, l) = model_dims(model);
    let mu = model.mu().data();
    assert_eq!(image.len(), cin * h * w);
    let (oh, ow) = (h - l + 1, w - l + 1);
    assert!(
        kk * oh * ow <= MAX_COMPONENTS,
        "oracle scale bound exceeded"
    );

    let mut components = Vec::with_capacity(kk * oh * ow);
    for k in 0..kk {
        let mut sq = 0.0f64;
        for c in 0..cin {
            for a in 0..l {
                for b in 0..l {
                    let m = mu[((k * cin + c) * l + a) * l + b] as f64;
                    sq += m * m;
                }
            }
        }
        for i in 0..oh {
            for j in 0..ow {
                let mut dot = 0.0f64;
                for c in 0..cin {
                    for a in 0..l {
                        for b in 0..l {
                            let m = mu[((k * cin + c) * l + a) * l + b] as f64;
                            let x = image[(c * h + i + a) * w + j + b] as f64;
                            dot += m * x;
                        }
                    }
                }
                components.push(OracleComponent {
                    k,
                    i,
                    j,
                    score: dot - 0.5 * sq,
                });
            }
        }
    }

    let mut max = f64::NEG_INFINITY;
    for c in &components {
        if c.score > max {
            max = c.score;
        }
    }
    let mut total = 0.0f64;
    for c in &components {
        total += (c.score - max).exp();
    }
    let log_norm = max + total.ln();
    let probs = components
        .iter()
        .map(|c| (c.score - log_norm).exp())
        .collect();
    OraclePosterior {
        components,
        probs,
        log_norm,
    }
}

/// Draws (k, i, j) uniformly, fills the background with N(0, 1) and the patch
/// window with N(mu[k], 1). Returns the `cin x h x w` image and the hidden
/// component.
pub fn oracle_sample(
    model: &PatchMixtureModel,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> (Vec<f32>, (usize, usize, usize)) {
    let (kk, cin, l) = model_dims(model);
    let mu = model.mu().data();
    let k = rng.random_range(0..kk);
    let i = rng.random_range(0..h - l + 1);
    let j = rng.random_range(0..w - l + 1);
    let mut image = vec![0.0f32; cin * h * w];
    for c in 0..cin {
        for y in 0..h {
            for x in 0..w {
                let noise: f64 = StandardNormal.sample(rng);
                let inside = y >= i && y < i + l && x >= j && x < j + l;
                let mean = if inside {
                    mu[((k * cin + c) * l + (y - i)) * l + (x - j)] as f64
                } else {
                    0.0
                };
                image[(c * h + y) * w + x] = (mean + noise) as f32;
            }
        }
    }
    (image, (k, i, j))
}

pub fn oracle_sample_seeded(
    model: &PatchMixtureModel,
    h: usize,
    w: usize,
    seed: u64,
) -> (Vec<f32>, (usize, usize, usize)) {
    oracle_sample(model, h, w, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// M-step numerator and denominator by plain loops.
pub fn oracle_mstep(images: &Tensor, gammas: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let g = gammas.shape();
    let (kk, oh, ow) = (g[1], g[2], g[3]);
    let l = h - oh + 1;
    let x = images.data();
    let gamma = gammas.data();
    let mut numerator = vec![0.0f64; kk * cin * l * l];
    let mut denominator = vec![0.0f64; kk];
    for nn in 0..n {
        for k in 0..kk {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gamma[((nn * kk + k) * oh + i) * ow + j] as f64;
                    denominator[k] += gv;
                    for c in 0..cin {
                        for a in 0..l {
                            for b in 0..l {
                                numerator[((k * cin + c) * l + a) * l + b] +=
                                    gv * x[((nn * cin + c) * h + i + a) * w + j + b] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (numerator, denominator)
}

/// Six-loop valid cross-correlation.
pub fn oracle_xcorr(images: &Tensor, filters: &Tensor) -> Vec<f64> {
    let s = images.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let f = filters.shape();
    let (kk, l) = (f[0], f[2]);
    let (oh, ow) = (h - l + 1, w - l + 1);
    let x = images.data();
    let fd = filters.data();
    let mut out = vec![0.0f64; n * kk * oh * ow];
    for nn in 0..n {
        for k in 0..kk {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for a in 0..l {
                            for b in 0..l {
                                acc += fd[((k * cin + c) * l + a) * l + b] as f64
                                    * x[((nn * cin + c) * h + i + a) * w + j + b] as f64;
                            }
                        }
                    }
                    out[((nn * kk + k) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Uniform draws in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Random non-negative weights normalized to sum to one per image.
pub fn random_posterior(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let per = shape[1..].iter().product::<usize>();
    let mut data: Vec<f32> = (0..shape[0] * per)
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    for chunk in data.chunks_mut(per) {
        let s: f32 = chunk.iter().sum();
        chunk.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(shape, data).unwrap()
}

/// Random shape within the stated test bounds: N ≤ 4, K ≤ 4, Cin ≤ 3,
/// H, W ≤ 8, L ≤ min(4, H, W).
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub k: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl Shape {
    pub fn random(rng: &mut impl Rng) -> Self {
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        Self {
            n: rng.random_range(1..=4),
            k: rng.random_range(1..=4),
            cin: rng.random_range(1..=3),
            h,
            w,
            l: rng.random_range(1..=4.min(h).min(w)),
        }
    }

    pub fn positions(&self) -> usize {
        (self.h - self.l + 1) * (self.w - self.l + 1)
    }
}
