//! Training-time augmentation: MixUp, Bézier intensity remapping, axis flips
//! and foreground-aware patch sampling.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelMap, Volume};

/// Beta distribution parameter for the MixUp coefficient.
pub const MIXUP_ALPHA: f64 = 0.2;

/// A convex combination of two patches and their labels.
#[derive(Clone, Debug)]
pub struct MixUpSample {
    pub x: Tensor,
    pub y: Tensor,
    pub lambda: f64,
    /// Indices of the two source patches within the batch they came from.
    pub sources: (usize, usize),
}

/// Draw `λ ~ Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// `λ·a + (1-λ)·b` elementwise.
pub fn blend(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mixup: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape(), data)
}

/// Mix with a given coefficient.
pub fn mixup_with_lambda(x_i: &Tensor, y_i: &Tensor, x_j: &Tensor, y_j: &Tensor, lambda: f64) -> Result<MixUpSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    Ok(MixUpSample {
        x: blend(x_i, x_j, lambda)?,
        y: blend(y_i, y_j, lambda)?,
        lambda,
        sources: (0, 1),
    })
}

/// Mix two patches with `λ ~ Beta(alpha, alpha)`; one-hot labels become soft labels.
pub fn mixup(
    x_i: &Tensor,
    y_i: &Tensor,
    x_j: &Tensor,
    y_j: &Tensor,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixUpSample> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let lambda = sample_lambda(alpha, rng)?;
    mixup_with_lambda(x_i, y_i, x_j, y_j, lambda)
}

/// Cubic Bézier curve on the unit square from (0, 0) to (1, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BezierCurve {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
}

impl BezierCurve {
    /// Control points must lie in the unit square with `p1.x <= p2.x`, which
    /// keeps the x-component monotone.
    pub fn new(p1: (f64, f64), p2: (f64, f64)) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if ![p1.0, p1.1, p2.0, p2.1].into_iter().all(inside) {
            return Err(Error::invalid("Bézier control points must lie in [0, 1]^2"));
        }
        if p1.0 > p2.0 {
            return Err(Error::invalid("Bézier control x-coordinates must be ascending"));
        }
        Ok(BezierCurve { p1, p2 })
    }

    pub fn identity() -> Self {
        BezierCurve {
            p1: (1.0 / 3.0, 1.0 / 3.0),
            p2: (2.0 / 3.0, 2.0 / 3.0),
        }
    }

    /// Random curve with ascending x and ascending y control coordinates,
    /// which makes the mapping non-decreasing.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut xs = [rng.random::<f64>(), rng.random::<f64>()];
        let mut ys = [rng.random::<f64>(), rng.random::<f64>()];
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        BezierCurve {
            p1: (xs[0], ys[0]),
            p2: (xs[1], ys[1]),
        }
    }

    fn bernstein(t: f64, a: f64, b: f64) -> f64 {
        let s = 1.0 - t;
        3.0 * s * s * t * a + 3.0 * s * t * t * b + t * t * t
    }

    /// Point on the curve at parameter `t`.
    pub fn point(&self, t: f64) -> (f64, f64) {
        (
            Self::bernstein(t, self.p1.0, self.p2.0),
            Self::bernstein(t, self.p1.1, self.p2.1),
        )
    }

    /// The curve as a function `y(x)` on `[0, 1]`, found by bisection on `x(t)`.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if Self::bernstein(mid, self.p1.0, self.p2.0) < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::bernstein(0.5 * (lo + hi), self.p1.1, self.p2.1)
    }

    /// Remap values in place through the curve after min-max normalization,
    /// restoring the original range. Constant input is left unchanged.
    pub fn apply(&self, values: &mut [f64]) {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = max - min;
        if !(range > 0.0) {
            return;
        }
        for v in values {
            *v = min + range * self.eval((*v - min) / range);
        }
    }
}

/// Remap a volume's intensities through a Bézier curve.
pub fn bezier_intensity(v: &Volume, curve: &BezierCurve) -> Volume {
    let mut out = v.clone();
    curve.apply(out.data_mut());
    out
}

/// Reverse a `[.., D, H, W]` buffer along the selected spatial axes.
pub fn flip_buffer<T: Copy>(data: &[T], dims: [usize; 3], axes: [bool; 3]) -> Vec<T> {
    let vox = dims.iter().product::<usize>();
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(vox) {
        for z in 0..d {
            let sz = if axes[0] { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if axes[1] { h - 1 - y } else { y };
                let row = &chunk[(sz * h + sy) * w..][..w];
                if axes[2] {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
    }
    out
}

/// Flip a tensor whose last three axes are spatial.
pub fn flip_tensor(t: &Tensor, axes: [bool; 3]) -> Tensor {
    let s = t.shape();
    let dims = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
    Tensor::new(s, flip_buffer(t.data(), dims, axes)).expect("same size")
}

/// Flip a label map.
pub fn flip_labels(l: &LabelMap, axes: [bool; 3]) -> LabelMap {
    l.with_data(flip_buffer(l.data(), l.dims(), axes)).expect("same size")
}

/// Flip image `[C, D, H, W]` and labels together, each axis in `axes_mask`
/// independently with probability one half. Returns the axes flipped.
pub fn random_flip(
    patch: &Tensor,
    labels: &LabelMap,
    axes_mask: [bool; 3],
    rng: &mut impl Rng,
) -> Result<(Tensor, LabelMap, [bool; 3])> {
    let s = patch.shape();
    if s.len() < 3 || s[s.len() - 3..] != labels.dims() {
        return Err(Error::shape(format!(
            "random_flip: patch {s:?} and labels {:?} differ",
            labels.dims()
        )));
    }
    let mut axes = [false; 3];
    for a in 0..3 {
        axes[a] = axes_mask[a] && rng.random::<bool>();
    }
    Ok((flip_tensor(patch, axes), flip_labels(labels, axes), axes))
}

/// Crop `[C, D, H, W]` at `origin` (may be negative or overhang), zero-padding
/// whatever falls outside the source.
pub fn extract_patch<T: Copy + Default>(data: &[T], channels: usize, dims: [usize; 3], origin: [isize; 3], patch: [usize; 3]) -> Vec<T> {
    let vox = dims.iter().product::<usize>();
    let pvox = patch.iter().product::<usize>();
    let mut out = vec![T::default(); channels * pvox];
    let range = |a: usize| {
        let lo = (-origin[a]).max(0) as usize;
        let hi = (dims[a] as isize - origin[a]).clamp(0, patch[a] as isize) as usize;
        (lo, hi.max(lo))
    };
    let (zr, yr, xr) = (range(0), range(1), range(2));
    if xr.0 == xr.1 {
        return out;
    }
    for c in 0..channels {
        for z in zr.0..zr.1 {
            let sz = (origin[0] + z as isize) as usize;
            for y in yr.0..yr.1 {
                let sy = (origin[1] + y as isize) as usize;
                let sx = (origin[2] + xr.0 as isize) as usize;
                let len = xr.1 - xr.0;
                let src = &data[c * vox + (sz * dims[1] + sy) * dims[2] + sx..][..len];
                let dst = c * pvox + (z * patch[1] + y) * patch[2] + xr.0;
                out[dst..dst + len].copy_from_slice(src);
            }
        }
    }
    out
}

/// Choose a patch origin. With probability `fg_prob` the patch contains a
/// uniformly chosen foreground voxel, placed as close to the centre as the
/// volume allows; otherwise the origin is uniform over all placements of the
/// patch in the padded volume. A volume without foreground always samples
/// uniformly.
pub fn sample_origin(labels: &LabelMap, patch: [usize; 3], fg_prob: f64, rng: &mut impl Rng) -> [isize; 3] {
    let dims = labels.dims();
    let lo = |a: usize| (dims[a] as isize - patch[a] as isize).min(0);
    let hi = |a: usize| (dims[a] as isize - patch[a] as isize).max(0);
    let want_fg = rng.random::<f64>() < fg_prob;
    if want_fg {
        let fg: Vec<usize> = labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect();
        if !fg.is_empty() {
            let v = fg[rng.random_range(0..fg.len())];
            let c = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
            let mut o = [0isize; 3];
            for a in 0..3 {
                o[a] = (c[a] as isize - (patch[a] / 2) as isize).clamp(lo(a), hi(a));
            }
            return o;
        }
    }
    let mut o = [0isize; 3];
    for a in 0..3 {
        o[a] = rng.random_range(lo(a) as i64..=hi(a) as i64) as isize;
    }
    o
}

/// Sample an image patch `[C, pd, ph, pw]` and its labels from an image
/// `[C, D, H, W]` and a label map of the same spatial size.
pub fn sample_patch(
    image: &Tensor,
    labels: &LabelMap,
    patch: [usize; 3],
    fg_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, LabelMap)> {
    let s = image.shape();
    if s.len() != 4 || s[1..] != labels.dims() {
        return Err(Error::shape(format!(
            "sample_patch: image {s:?} and labels {:?} differ",
            labels.dims()
        )));
    }
    if patch.contains(&0) {
        return Err(Error::invalid("sample_patch: patch dims must be positive"));
    }
    let origin = sample_origin(labels, patch, fg_prob, rng);
    let dims = labels.dims();
    let img = extract_patch(image.data(), s[0], dims, origin, patch);
    let lab = extract_patch(labels.data(), 1, dims, origin, patch);
    Ok((
        Tensor::new(&[s[0], patch[0], patch[1], patch[2]], img)?,
        LabelMap::new(patch, labels.spacing(), lab)?,
    ))
}
