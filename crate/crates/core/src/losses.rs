//! Segmentation losses: cross-entropy, foreground soft Dice, the deep
//! supervised composite and the soft-label MixUp loss.
//!
//! Targets are plain tensors (one-hot or soft labels); logits are graph
//! variables so every loss is differentiable with respect to the network.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Tolerance on soft-label row sums.
pub const ROW_SUM_TOL: f64 = 1e-5;

/// Weight `1 / 2^d` of supervision level `d`.
pub fn level_weights(levels: usize) -> Vec<f64> {
    (0..levels).map(|d| 1.0 / (1u64 << d) as f64).collect()
}

/// One-hot labels `[N, C, D, H, W]` from class indices.
pub fn one_hot(labels: &[u8], batch: usize, classes: usize, dims: [usize; 3]) -> Result<Tensor> {
    let vox = dims.iter().product::<usize>();
    if labels.len() != batch * vox {
        return Err(Error::shape(format!(
            "one_hot: {} labels for batch {batch} of {dims:?}",
            labels.len()
        )));
    }
    let mut out = Tensor::zeros(&[batch, classes, dims[0], dims[1], dims[2]]);
    let data = out.data_mut();
    for n in 0..batch {
        for v in 0..vox {
            let c = labels[n * vox + v] as usize;
            if c >= classes {
                return Err(Error::invalid(format!("label {c} outside 0..{classes}")));
            }
            data[(n * classes + c) * vox + v] = 1.0;
        }
    }
    Ok(out)
}

fn check_target(g: &Graph, logits: Var, target: &Tensor, what: &str) -> Result<()> {
    if g.shape(logits) != target.shape() || target.shape().len() < 3 {
        return Err(Error::shape(format!(
            "{what}: logits {:?} and target {:?} differ",
            g.shape(logits),
            target.shape()
        )));
    }
    Ok(())
}

/// Sum over channels at each (n, voxel) of a `[N, C, ...]` tensor, visiting
/// every row. Returns the first offending row sum, if any.
fn row_sums_violation(t: &Tensor, mut ok: impl FnMut(f64, &[f64]) -> bool) -> Option<f64> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let vox = t.numel() / (n * c);
    let mut row = vec![0.0; c];
    for b in 0..n {
        for v in 0..vox {
            for (k, r) in row.iter_mut().enumerate() {
                *r = t.data()[(b * c + k) * vox + v];
            }
            let s: f64 = row.iter().sum();
            if !ok(s, &row) {
                return Some(s);
            }
        }
    }
    None
}

/// Mean over batch and voxels of `-Σ_c t_c · log softmax_c(logits)`.
fn soft_cross_entropy(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    let shape = target.shape();
    let rows = (target.numel() / shape[1]) as f64;
    let logp = g.log_softmax_channel(logits)?;
    let t = g.constant(target.clone());
    let prod = g.mul(logp, t)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / rows))
}

/// Cross-entropy against a one-hot target, averaged over batch and voxels.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_target(g, logits, target, "cross_entropy")?;
    let bad = row_sums_violation(target, |s, row| {
        s == 1.0 && row.iter().all(|&v| v == 0.0 || v == 1.0)
    });
    if bad.is_some() {
        return Err(Error::invalid("cross_entropy: target is not one-hot"));
    }
    soft_cross_entropy(g, logits, target)
}

/// `1 - mean_c (2 Σ p g + smooth) / (Σ p + Σ g + smooth)` over the foreground
/// classes `1..C`, sums pooled over the batch.
pub fn soft_dice(g: &mut Graph, logits: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    check_target(g, logits, target, "soft_dice")?;
    let classes = target.shape()[1];
    if classes < 2 {
        return Err(Error::shape("soft_dice: needs at least one foreground class"));
    }
    let probs = g.softmax_channel(logits)?;
    let t = g.constant(target.clone());
    let mut total: Option<Var> = None;
    for c in 1..classes {
        let pc = g.select_channels(probs, c, 1)?;
        let tc = g.select_channels(t, c, 1)?;
        let target_sum: f64 = g.value(tc).data().iter().sum();
        let inter = g.mul(pc, tc)?;
        let inter = g.sum(inter);
        let num = g.affine(inter, 2.0, smooth);
        let psum = g.sum(pc);
        let den = g.affine(psum, 1.0, target_sum + smooth);
        let dice = g.div(num, den)?;
        total = Some(match total {
            Some(acc) => g.add(acc, dice)?,
            None => dice,
        });
    }
    let total = total.expect("at least one foreground class");
    Ok(g.affine(total, -1.0 / (classes - 1) as f64, 1.0))
}

/// Cross-entropy plus soft Dice at one resolution.
pub fn level_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    let ce = cross_entropy(g, logits, target)?;
    let dice = soft_dice(g, logits, target, DICE_SMOOTH)?;
    g.add(ce, dice)
}

/// One-hot labels at every supervision resolution, level 0 first.
#[derive(Clone, Debug)]
pub struct LabelPyramid {
    levels: Vec<Tensor>,
}

impl LabelPyramid {
    /// Downsample a level-0 one-hot tensor `[N, C, D, H, W]` to each of
    /// `level_dims` by nearest-neighbour picking: output index `i` along an
    /// axis with integer factor `f` reads source index `i·f + (f-1)/2`.
    pub fn new(level0: &Tensor, level_dims: &[[usize; 3]]) -> Result<Self> {
        let [n, c, d, h, w] = level0.dims5()?;
        let src = [d, h, w];
        let mut levels = Vec::with_capacity(level_dims.len());
        for dims in level_dims {
            let mut f = [1; 3];
            for a in 0..3 {
                if dims[a] == 0 || src[a] % dims[a] != 0 {
                    return Err(Error::shape(format!(
                        "label pyramid: {dims:?} does not divide {src:?}"
                    )));
                }
                f[a] = src[a] / dims[a];
            }
            let out = Tensor::from_fn(&[n, c, dims[0], dims[1], dims[2]], |idx| {
                let x = idx % dims[2];
                let y = (idx / dims[2]) % dims[1];
                let z = (idx / (dims[2] * dims[1])) % dims[0];
                let nc = idx / (dims[0] * dims[1] * dims[2]);
                let (sz, sy, sx) = (
                    z * f[0] + (f[0] - 1) / 2,
                    y * f[1] + (f[1] - 1) / 2,
                    x * f[2] + (f[2] - 1) / 2,
                );
                level0.data()[((nc * d + sz) * h + sy) * w + sx]
            });
            levels.push(out);
        }
        Ok(LabelPyramid { levels })
    }

    /// Pyramid matching the spatial shapes of the given logits.
    pub fn for_logits(g: &Graph, level0: &Tensor, logits: &[Var]) -> Result<Self> {
        let dims: Vec<[usize; 3]> = logits
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                [s[2], s[3], s[4]]
            })
            .collect();
        Self::new(level0, &dims)
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// `Σ_d (1/2^d) · (CE_d + Dice_d)`.
pub fn deep_supervised_loss(g: &mut Graph, logits: &[Var], pyramid: &LabelPyramid) -> Result<Var> {
    if logits.len() != pyramid.len() || logits.is_empty() {
        return Err(Error::invalid(format!(
            "deep supervision: {} logit levels but {} label levels",
            logits.len(),
            pyramid.len()
        )));
    }
    let weights = level_weights(logits.len());
    let mut total: Option<Var> = None;
    for ((&l, y), w) in logits.iter().zip(pyramid.levels()).zip(weights) {
        let term = level_loss(g, l, y)?;
        let term = g.scale(term, w);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Soft-label cross-entropy at full resolution. Each target row must be a
/// probability vector (non-negative, summing to 1 within [`ROW_SUM_TOL`]).
pub fn mixup_loss(g: &mut Graph, logits: Var, mixed_target: &Tensor) -> Result<Var> {
    check_target(g, logits, mixed_target, "mixup_loss")?;
    let bad = row_sums_violation(mixed_target, |s, row| {
        (s - 1.0).abs() <= ROW_SUM_TOL && row.iter().all(|&v| v >= 0.0)
    });
    if let Some(s) = bad {
        return Err(Error::invalid(format!(
            "mixup_loss: target row sums to {s}, expected 1"
        )));
    }
    soft_cross_entropy(g, logits, mixed_target)
}
