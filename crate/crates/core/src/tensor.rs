//! Dense row-major `f32` tensors and the two sliding-window contractions the
//! patch mixture needs: valid cross-correlation (E-step scores) and the
//! posterior-weighted window sum (M-step numerator).
//!
//! Bulk data is stored as `f32`; every reduction is carried out in `f64`.

use crate::error::{Error, Result};

/// A dense tensor of up to four axes, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let valid = !shape.is_empty()
            && shape.len() <= 4
            && shape.iter().all(|&d| d >= 1)
            && shape.iter().product::<usize>() == data.len();
        if !valid {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Rank {
                expected: 4,
                found: self.shape.clone(),
            }),
        }
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Rank {
                expected: 2,
                found: self.shape.clone(),
            }),
        }
    }

    /// Element at a full multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    /// The contiguous block for a leading index, e.g. one image of a batch.
    pub fn outer(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Copies the listed leading-axis slices into a new tensor.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("selection"));
        }
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::ShapeMismatch {
                    axis: "outer index",
                    expected: self.shape[0],
                    found: i,
                });
            }
            data.extend_from_slice(self.outer(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(&shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn concat_outer(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::Rank {
                expected: self.shape.len(),
                found: other.shape.clone(),
            });
        }
        const AXES: [&str; 4] = ["N", "channels", "height", "width"];
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate().skip(1) {
            if a != b {
                return Err(Error::ShapeMismatch {
                    axis: AXES[axis.min(3)],
                    expected: a,
                    found: b,
                });
            }
        }
        let mut shape = self.shape.clone();
        shape[0] += other.shape[0];
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::new(&shape, data)
    }

    /// Multiplies every element by `factor`.
    pub fn scale(&self, factor: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Geometry of the valid sliding window of an `L x L` patch over a
/// `cin x h x w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PatchGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl PatchGeometry {
    pub fn new(cin: usize, h: usize, w: usize, l: usize) -> Result<Self> {
        if l == 0 || l > h || l > w {
            return Err(Error::PatchTooLarge {
                patch: l,
                height: h,
                width: w,
            });
        }
        Ok(Self { cin, h, w, l })
    }

    pub fn out_h(&self) -> usize {
        self.h - self.l + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.l + 1
    }

    /// Number of patch locations.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened patch (`cin * l * l`).
    pub fn patch_len(&self) -> usize {
        self.cin * self.l * self.l
    }

    pub fn image_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Unfolds one image into a `positions x patch_len` row-major matrix.
    pub fn unfold(&self, image: &[f32], out: &mut Vec<f64>) {
        debug_assert_eq!(image.len(), self.image_len());
        let (oh, ow, l) = (self.out_h(), self.out_w(), self.l);
        out.clear();
        out.reserve(self.positions() * self.patch_len());
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..self.cin {
                    let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
                    for a in 0..l {
                        let row = &plane[(i + a) * self.w + j..(i + a) * self.w + j + l];
                        out.extend(row.iter().map(|&v| v as f64));
                    }
                }
            }
        }
    }
}

/// `c (m x n) = a (m x k) . b (k x n) + beta * c`, with explicit strides
/// for `a` and `b` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides));
    assert!(b.len() >= extent(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scores of every filter at every location of one unfolded image:
/// `out (k x positions) = filters (k x patch_len) . unfoldedᵀ`.
pub(crate) fn xcorr_unfolded(
    geom: &PatchGeometry,
    unfolded: &[f64],
    filters: &[f64],
    k: usize,
    out: &mut [f64],
) {
    let d = geom.patch_len();
    let m = geom.positions();
    gemm(
        k,
        d,
        m,
        filters,
        (d, 1),
        unfolded,
        (1, d),
        0.0,
        &mut out[..k * m],
    );
}

/// Adds `weights (k x positions) . unfolded` into `acc (k x patch_len)`.
pub(crate) fn accumulate_unfolded(
    geom: &PatchGeometry,
    unfolded: &[f64],
    weights: &[f64],
    k: usize,
    acc: &mut [f64],
) {
    let d = geom.patch_len();
    let m = geom.positions();
    gemm(
        k,
        m,
        d,
        weights,
        (m, 1),
        unfolded,
        (d, 1),
        1.0,
        &mut acc[..k * d],
    );
}

fn image_geometry(images: &Tensor, l: usize) -> Result<(usize, PatchGeometry)> {
    let [n, cin, h, w] = images.dims4()?;
    Ok((n, PatchGeometry::new(cin, h, w, l)?))
}

/// Stride-1, unpadded cross-correlation of an `N x Cin x H x W` batch with a
/// `K x Cin x L x L` filter bank.
pub fn valid_xcorr(images: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let [k, fc, fl, fw] = filters.dims4()?;
    if fl != fw {
        return Err(Error::ShapeMismatch {
            axis: "filter width",
            expected: fl,
            found: fw,
        });
    }
    let [_, cin, _, _] = images.dims4()?;
    if cin != fc {
        return Err(Error::ShapeMismatch {
            axis: "channels",
            expected: cin,
            found: fc,
        });
    }
    let (n, geom) = image_geometry(images, fl)?;
    let filters64: Vec<f64> = filters.data().iter().map(|&v| v as f64).collect();
    let m = geom.positions();
    let mut unfolded = Vec::new();
    let mut scores = vec![0.0; k * m];
    let mut out = Vec::with_capacity(n * k * m);
    for i in 0..n {
        geom.unfold(images.outer(i), &mut unfolded);
        xcorr_unfolded(&geom, &unfolded, &filters64, k, &mut scores);
        out.extend(scores.iter().map(|&v| v as f32));
    }
    Tensor::new(&[n, k, geom.out_h(), geom.out_w()], out)
}

/// Sum over images and locations of each weight times the image window at
/// that location: `out[k,c,a,b] = Σ weights[n,k,i,j] · images[n,c,i+a,j+b]`.
/// The patch size is inferred from the two spatial extents.
pub fn weighted_patch_sum(images: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [n, cin, h, w] = images.dims4()?;
    let [wn, k, oh, ow] = weights.dims4()?;
    if wn != n {
        return Err(Error::ShapeMismatch {
            axis: "N",
            expected: n,
            found: wn,
        });
    }
    let l = patch_size_from(h, w, oh, ow)?;
    let geom = PatchGeometry::new(cin, h, w, l)?;
    let mut acc = vec![0.0; k * geom.patch_len()];
    accumulate_weighted_patches(&geom, images, weights.data(), k, &mut acc);
    Tensor::new(&[k, cin, l, l], acc.iter().map(|&v| v as f32).collect())
}

/// Infers the patch size from image and map extents.
pub(crate) fn patch_size_from(h: usize, w: usize, oh: usize, ow: usize) -> Result<usize> {
    if oh > h || ow > w || oh == 0 || ow == 0 {
        return Err(Error::InconsistentPatchSize {
            height: h.wrapping_sub(oh).wrapping_add(1),
            width: w.wrapping_sub(ow).wrapping_add(1),
        });
    }
    let (lh, lw) = (h - oh + 1, w - ow + 1);
    if lh != lw {
        return Err(Error::InconsistentPatchSize {
            height: lh,
            width: lw,
        });
    }
    Ok(lh)
}

/// Adds the weighted window sums of a whole batch into a 64-bit accumulator.
pub(crate) fn accumulate_weighted_patches(
    geom: &PatchGeometry,
    images: &Tensor,
    weights: &[f32],
    k: usize,
    acc: &mut [f64],
) {
    let n = images.shape()[0];
    let m = geom.positions();
    let mut unfolded = Vec::new();
    let mut w64 = vec![0.0; k * m];
    for i in 0..n {
        let wi = &weights[i * k * m..(i + 1) * k * m];
        if wi.iter().all(|&v| v == 0.0) {
            continue;
        }
        w64.iter_mut().zip(wi).for_each(|(d, &s)| *d = s as f64);
        geom.unfold(images.outer(i), &mut unfolded);
        accumulate_unfolded(geom, &unfolded, &w64, k, acc);
    }
}

/// `max(v) + ln Σ exp(v - max(v))`.
///
/// Returns `-inf` only when every input is `-inf`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("logsumexp"))?;
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_filter_reproduces_image() {
        let img = Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = valid_xcorr(&img, &f).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_filter_gives_zero_map() {
        let img = Tensor::new(&[2, 1, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let f = Tensor::zeros(&[3, 1, 2, 2]).unwrap();
        let out = valid_xcorr(&img, &f).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xcorr_rejects_bad_shapes() {
        let img = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let f = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        match valid_xcorr(&img, &f) {
            Err(Error::ShapeMismatch { axis, .. }) => assert_eq!(axis, "channels"),
            other => panic!("unexpected {other:?}"),
        }
        let f = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
        assert!(matches!(
            valid_xcorr(&img, &f),
            Err(Error::PatchTooLarge { patch: 5, .. })
        ));
    }

    #[test]
    fn one_hot_weights_select_window() {
        let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        // L = 2, so maps are 3x3
        let mut w = Tensor::zeros(&[1, 2, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0; // k=0, i'=1, j'=1
        let out = weighted_patch_sum(&img, &w).unwrap();
        assert_eq!(out.shape(), &[2, 1, 2, 2]);
        assert_eq!(&out.data()[..4], &[5.0, 6.0, 9.0, 10.0]);
        assert!(out.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_sum() {
        let img = Tensor::new(&[2, 1, 4, 4], vec![1.0; 32]).unwrap();
        let w = Tensor::zeros(&[2, 3, 2, 2]).unwrap();
        let out = weighted_patch_sum(&img, &w).unwrap();
        assert_eq!(out.shape(), &[3, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_sum_rejects_non_square_patch() {
        let img = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 2]).unwrap();
        assert!(matches!(
            weighted_patch_sum(&img, &w),
            Err(Error::InconsistentPatchSize {
                height: 3,
                width: 4
            })
        ));
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[-3.25]).unwrap(), -3.25);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]).unwrap(), 0.0);
        assert!(matches!(logsumexp(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        let s = t.select_outer(&[1, 0]).unwrap();
        assert_eq!(s.data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        let c = t.concat_outer(&s).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
    }
}
