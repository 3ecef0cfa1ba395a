//! Sliding-window prediction with Gaussian blending, flip test-time
//! augmentation, ensembling and Dice evaluation.

use serde::{Deserialize, Serialize};

use crate::augment::{extract_patch, flip_tensor};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;
use crate::volume::LabelMap;

/// Default fraction of a window shared with its neighbour.
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Anything that maps an input window `[1, C, d, h, w]` to class
/// probabilities `[1, K, d, h, w]`.
pub trait Predictor: Sync {
    fn in_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Window dims must be multiples of this.
    fn divisor(&self) -> [usize; 3];
    fn predict_window(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    fn in_channels(&self) -> usize {
        self.config().in_channels
    }

    fn num_classes(&self) -> usize {
        crate::blocks::NUM_CLASSES
    }

    fn divisor(&self) -> [usize; 3] {
        self.config().divisor()
    }

    fn predict_window(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

/// Per-voxel class probabilities `[K, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    dims: [usize; 3],
    classes: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * dims.iter().product::<usize>() {
            return Err(Error::shape("probability map size does not match dims"));
        }
        Ok(ProbabilityMap { dims, classes, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation of a per-voxel channel sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let vox = self.dims.iter().product::<usize>();
        (0..vox)
            .map(|v| {
                let s: f64 = (0..self.classes).map(|c| self.data[c * vox + v]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Most probable class per voxel, lowest index on ties.
    pub fn argmax(&self) -> Vec<u8> {
        let vox = self.dims.iter().product::<usize>();
        (0..vox)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * vox + v] > self.data[best * vox + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Window origins along one axis: multiples of `floor(patch·(1-overlap))`
/// (at least 1) while the window fits, then one window flush with the end.
pub fn window_origins(len: usize, patch: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap {overlap} outside [0, 1)")));
    }
    if patch == 0 || patch > len {
        return Err(Error::invalid(format!("window {patch} does not fit length {len}")));
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = Vec::new();
    let mut o = 0;
    while o + patch < len {
        out.push(o);
        o += step;
    }
    out.push(len - patch);
    Ok(out)
}

/// Separable Gaussian importance map with `σ = patch/8` per axis, peak 1.
pub fn gaussian_weights(patch: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        let c = (n as f64 - 1.0) / 2.0;
        (0..n)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    };
    let (wz, wy, wx) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                out.push(z * y * x);
            }
        }
    }
    out
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Window size actually used for an image of `dims`: the requested patch,
/// clipped to the image padded up to the predictor's divisor.
pub fn effective_patch(dims: [usize; 3], patch: [usize; 3], divisor: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if patch[a] == 0 || patch[a] % divisor[a] != 0 {
            return Err(Error::invalid(format!(
                "patch {patch:?} must be a positive multiple of {divisor:?}"
            )));
        }
        out[a] = patch[a].min(round_up(dims[a], divisor[a]));
    }
    Ok(out)
}

/// Sliding-window class probabilities for an image `[C, D, H, W]`. The image
/// is zero-padded to a multiple of the divisor (and at least the window);
/// window softmax outputs are blended with Gaussian weights and normalized.
pub fn sliding_window(model: &impl Predictor, image: &Tensor, patch: [usize; 3], overlap: f64) -> Result<ProbabilityMap> {
    let s = image.shape();
    if s.len() != 4 || s[0] != model.in_channels() {
        return Err(Error::shape(format!(
            "sliding_window: expected [{}, D, H, W], got {s:?}",
            model.in_channels()
        )));
    }
    let dims = [s[1], s[2], s[3]];
    let div = model.divisor();
    let win = effective_patch(dims, patch, div)?;
    let padded = [0, 1, 2].map(|a| round_up(dims[a], div[a]).max(win[a]));
    let origins = [0, 1, 2]
        .map(|a| window_origins(padded[a], win[a], overlap))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let weights = gaussian_weights(win);
    let k = model.num_classes();
    let pvox = padded.iter().product::<usize>();
    let wvox = win.iter().product::<usize>();
    let mut acc = vec![0.0; k * pvox];
    let mut norm = vec![0.0; pvox];
    for &oz in &origins[0] {
        for &oy in &origins[1] {
            for &ox in &origins[2] {
                let origin = [oz as isize, oy as isize, ox as isize];
                let x = extract_patch(image.data(), s[0], dims, origin, win);
                let x = Tensor::new(&[1, s[0], win[0], win[1], win[2]], x)?;
                let p = model.predict_window(&x)?;
                for z in 0..win[0] {
                    for y in 0..win[1] {
                        let dst = ((oz + z) * padded[1] + oy + y) * padded[2] + ox;
                        let src = (z * win[1] + y) * win[2];
                        for i in 0..win[2] {
                            let w = weights[src + i];
                            norm[dst + i] += w;
                            for c in 0..k {
                                acc[c * pvox + dst + i] += w * p.data()[c * wvox + src + i];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(k * dims.iter().product::<usize>());
    for c in 0..k {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = (z * padded[1] + y) * padded[2];
                for x in 0..dims[2] {
                    out.push(acc[c * pvox + row + x] / norm[row + x]);
                }
            }
        }
    }
    ProbabilityMap::new(k, dims, out)
}

/// All eight combinations of z, y and x flips, identity first.
pub fn all_flips() -> Vec<[bool; 3]> {
    (0..8).map(|m| [m & 4 != 0, m & 2 != 0, m & 1 != 0]).collect()
}

/// Average of sliding-window predictions on flipped inputs, each flipped back.
pub fn tta_flips(
    model: &impl Predictor,
    image: &Tensor,
    flip_set: &[[bool; 3]],
    patch: [usize; 3],
    overlap: f64,
) -> Result<ProbabilityMap> {
    if flip_set.is_empty() {
        return Err(Error::invalid("tta_flips: empty flip set"));
    }
    let mut sum: Option<ProbabilityMap> = None;
    for &axes in flip_set {
        let p = sliding_window(model, &flip_tensor(image, axes), patch, overlap)?;
        let k = p.classes;
        let back = flip_tensor(&Tensor::new(&[k, p.dims[0], p.dims[1], p.dims[2]], p.data)?, axes);
        sum = Some(match sum {
            None => ProbabilityMap::new(k, p.dims, back.into_data())?,
            Some(mut acc) => {
                for (a, b) in acc.data.iter_mut().zip(back.data()) {
                    *a += b;
                }
                acc
            }
        });
    }
    let mut out = sum.expect("nonempty");
    let n = flip_set.len() as f64;
    for v in &mut out.data {
        *v /= n;
    }
    Ok(out)
}

/// Voxelwise mean of probability maps.
pub fn mean_map(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("ensemble: no maps"))?;
    for m in maps {
        if m.dims != first.dims || m.classes != first.classes {
            return Err(Error::shape(format!(
                "ensemble: map dims {:?} differ from {:?}",
                m.dims, first.dims
            )));
        }
    }
    let n = maps.len() as f64;
    let data = (0..first.data.len())
        .map(|i| maps.iter().map(|m| m.data[i]).sum::<f64>() / n)
        .collect();
    ProbabilityMap::new(first.classes, first.dims, data)
}

/// Mean of the maps, then argmax with ties to the lowest class.
pub fn ensemble(maps: &[ProbabilityMap]) -> Result<Vec<u8>> {
    Ok(mean_map(maps)?.argmax())
}

/// Foreground classes scored by the evaluation (GTVp, GTVn).
pub const EVAL_CLASSES: [u8; 2] = [1, 2];

/// Voxel counts of one case and class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub reference: u64,
}

impl Overlap {
    /// Dice of this case; 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        let den = self.predicted + self.reference;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub counts: [Overlap; 2],
    pub dsc: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseScore>,
    /// Aggregated Dice for GTVp and GTVn.
    pub aggregate: [f64; 2],
    pub mean: f64,
}

#[derive(Serialize)]
struct CaseLine<'a> {
    kind: &'static str,
    id: &'a str,
    gtvp: f64,
    gtvn: f64,
}

#[derive(Serialize)]
struct AggregateLine {
    kind: &'static str,
    gtvp: f64,
    gtvn: f64,
    mean: f64,
}

impl EvalReport {
    /// One JSON record per case, then the aggregate record.
    pub fn to_json_lines(&self, ids: &[String]) -> String {
        let mut out = String::new();
        for (i, c) in self.cases.iter().enumerate() {
            let id = ids.get(i).map(String::as_str).unwrap_or("");
            let line = CaseLine {
                kind: "case",
                id,
                gtvp: c.dsc[0],
                gtvn: c.dsc[1],
            };
            out += &serde_json::to_string(&line).expect("serializable");
            out.push('\n');
        }
        let agg = AggregateLine {
            kind: "aggregate",
            gtvp: self.aggregate[0],
            gtvn: self.aggregate[1],
            mean: self.mean,
        };
        out += &serde_json::to_string(&agg).expect("serializable");
        out.push('\n');
        out
    }
}

/// Count intersections and sizes of each evaluated class.
pub fn overlaps(pred: &[u8], reference: &[u8]) -> [Overlap; 2] {
    let mut out = [Overlap::default(); 2];
    for (&p, &r) in pred.iter().zip(reference) {
        for (k, &c) in EVAL_CLASSES.iter().enumerate() {
            let (ip, ir) = (p == c, r == c);
            out[k].predicted += ip as u64;
            out[k].reference += ir as u64;
            out[k].intersection += (ip && ir) as u64;
        }
    }
    out
}

/// Per class: `2 Σ |P ∩ G| / Σ (|P| + |G|)` pooled over cases, plus per-case
/// Dice. A class absent from every prediction and reference scores 1.
pub fn aggregated_dsc(cases: &[(&LabelMap, &LabelMap)]) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(cases.len());
    let mut inter = [0u64; 2];
    let mut den = [0u64; 2];
    for (pred, reference) in cases {
        if pred.dims() != reference.dims() {
            return Err(Error::shape(format!(
                "aggregated_dsc: prediction {:?} and reference {:?} differ",
                pred.dims(),
                reference.dims()
            )));
        }
        let counts = overlaps(pred.data(), reference.data());
        for k in 0..2 {
            inter[k] += counts[k].intersection;
            den[k] += counts[k].predicted + counts[k].reference;
        }
        scores.push(CaseScore {
            dsc: [counts[0].dice(), counts[1].dice()],
            counts,
        });
    }
    let aggregate = [0, 1].map(|k| if den[k] == 0 { 1.0 } else { 2.0 * inter[k] as f64 / den[k] as f64 });
    Ok(EvalReport {
        cases: scores,
        aggregate,
        mean: (aggregate[0] + aggregate[1]) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_cover_and_end_flush() {
        assert_eq!(window_origins(10, 10, 0.5).unwrap(), vec![0]);
        assert_eq!(window_origins(5, 2, 0.0).unwrap(), vec![0, 2, 3]);
        assert!(window_origins(4, 5, 0.5).is_err());
        assert!(window_origins(8, 4, 1.0).is_err());
    }

    #[test]
    fn gaussian_peaks_at_centre() {
        let w = gaussian_weights([1, 1, 5]);
        assert_eq!(w[2], 1.0);
        assert!(w[0] < w[1] && (w[0] - w[4]).abs() < 1e-15);
    }
}
