//! Preprocessing chain: body masking, cropping, histogram matching,
//! resampling and z-score normalization, with a geometry log that maps
//! predictions back to the original grid.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_same_dims, Grid, LabelMap, Volume};

/// Default body threshold for T2-weighted MRI intensities.
pub const BODY_THRESHOLD: f64 = 60.0;
/// Radius in voxels of the closing structuring ball.
pub const CLOSING_RADIUS: usize = 3;
/// Histogram bins used for CDF matching.
pub const HISTOGRAM_BINS: usize = 1024;
/// Target voxel spacing (z, y, x) in millimetres.
pub const TARGET_SPACING: [f64; 3] = [1.2, 0.5, 0.5];

/// Half-open voxel ranges `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn size(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }
}

/// A single 26-connected body region.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyMask {
    mask: Grid<bool>,
    bbox: BoundingBox,
}

impl BodyMask {
    /// Wrap a binary grid; fails when it is empty.
    pub fn from_grid(mask: Grid<bool>) -> Result<Self> {
        let bbox = bounding_box(&mask).ok_or_else(|| Error::UnusableScan("empty body mask".into()))?;
        Ok(BodyMask { mask, bbox })
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.mask
    }

    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m).count()
    }
}

fn bounding_box(mask: &Grid<bool>) -> Option<BoundingBox> {
    let [d, h, w] = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) {
                    any = true;
                    for (a, v) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v + 1);
                    }
                }
            }
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

fn neighbours(radius: isize, connectivity26: bool) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if (dz, dy, dx) == (0, 0, 0) {
                    continue;
                }
                let keep = if connectivity26 {
                    true
                } else {
                    dz.abs() + dy.abs() + dx.abs() == 1
                };
                if keep {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn step(dims: [usize; 3], p: [usize; 3], o: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0; 3];
    for a in 0..3 {
        let v = p[a] as isize + o[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// Label 26-connected components of `mask`; returns per-voxel component ids
/// (0 for background, 1.. in scan order) and each component's size.
pub fn connected_components(mask: &Grid<bool>) -> (Vec<u32>, Vec<usize>) {
    let dims = mask.dims();
    let offs = neighbours(1, true);
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            for &o in &offs {
                if let Some(q) = step(dims, p, o) {
                    let j = mask.index(q[0], q[1], q[2]);
                    if mask.data()[j] && ids[j] == 0 {
                        ids[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Keep only the largest 26-connected component (the first in scan order on ties).
pub fn largest_component(mask: &Grid<bool>) -> Grid<bool> {
    let (ids, sizes) = connected_components(mask);
    let best = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1);
    mask.with_data(ids.iter().map(|&id| Some(id) == best).collect())
        .expect("same dims")
}

fn ball(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = vec![[0, 0, 0]];
    out.extend(
        neighbours(r, true)
            .into_iter()
            .filter(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2] <= r * r),
    );
    out
}

/// Morphological closing with a ball. The mask is padded by the radius so the
/// result is a superset of the input even at the borders.
pub fn closing(mask: &Grid<bool>, radius: usize) -> Grid<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let dims = mask.dims();
    let pd = dims.map(|d| d + 2 * radius);
    let pidx = |p: [usize; 3]| (p[0] * pd[1] + p[1]) * pd[2] + p[2];
    let offs = ball(radius);
    let mut dilated = vec![false; pd.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask.get(z, y, x) {
                    continue;
                }
                let c = [z + radius, y + radius, x + radius];
                for o in &offs {
                    let q = [0, 1, 2].map(|a| (c[a] as isize + o[a]) as usize);
                    dilated[pidx(q)] = true;
                }
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let c = [z + radius, y + radius, x + radius];
                out[mask.index(z, y, x)] = offs.iter().all(|o| {
                    let q = [0, 1, 2].map(|a| (c[a] as isize + o[a]) as usize);
                    dilated[pidx(q)]
                });
            }
        }
    }
    mask.with_data(out).expect("same dims")
}

/// Fill background regions not 6-connected to the volume border.
pub fn fill_holes(mask: &Grid<bool>) -> Grid<bool> {
    let dims = mask.dims();
    let offs = neighbours(1, false);
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let border = z == 0 || y == 0 || x == 0 || z + 1 == dims[0] || y + 1 == dims[1] || x + 1 == dims[2];
                let i = mask.index(z, y, x);
                if border && !mask.data()[i] {
                    outside[i] = true;
                    queue.push_back([z, y, x]);
                }
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for &o in &offs {
            if let Some(q) = step(dims, p, o) {
                let j = mask.index(q[0], q[1], q[2]);
                if !mask.data()[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    mask.with_data(outside.iter().map(|o| !o).collect()).expect("same dims")
}

/// Threshold, keep the largest component, close with a radius-`CLOSING_RADIUS`
/// ball and fill holes.
pub fn body_mask(v: &Volume, threshold: f64) -> Result<BodyMask> {
    let raw = v.map(|&x| x > threshold);
    if !raw.data().iter().any(|&m| m) {
        return Err(Error::UnusableScan(format!(
            "no voxel exceeds the body threshold {threshold}"
        )));
    }
    let mask = largest_component(&raw);
    let mask = fill_holes(&closing(&mask, CLOSING_RADIUS));
    BodyMask::from_grid(largest_component(&mask))
}

/// Crop offsets needed to undo [`crop_to_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub original_dims: [usize; 3],
    pub bbox: BoundingBox,
}

/// The mask's y/x bounding box over the full z extent.
pub fn crop_box(m: &BodyMask) -> CropBox {
    let dims = m.dims();
    let b = m.bbox();
    CropBox {
        original_dims: dims,
        bbox: BoundingBox {
            lo: [0, b.lo[1], b.lo[2]],
            hi: [dims[0], b.hi[1], b.hi[2]],
        },
    }
}

/// Crop any grid to a box.
pub fn crop<T: Copy>(v: &Grid<T>, c: &CropBox) -> Result<Grid<T>> {
    if v.dims() != c.original_dims {
        return Err(Error::shape(format!(
            "crop: grid {:?} does not match crop source {:?}",
            v.dims(),
            c.original_dims
        )));
    }
    let (lo, size) = (c.bbox.lo, c.bbox.size());
    let mut data = Vec::with_capacity(size.iter().product());
    for z in lo[0]..lo[0] + size[0] {
        for y in lo[1]..lo[1] + size[1] {
            let start = v.index(z, y, lo[2]);
            data.extend_from_slice(&v.data()[start..start + size[2]]);
        }
    }
    Grid::new(size, v.spacing(), data)
}

/// Crop to the body bounding box on y and x; z is preserved.
pub fn crop_to_mask(v: &Volume, m: &BodyMask) -> Result<(Volume, CropBox)> {
    check_same_dims(v, m.grid(), "crop_to_mask")?;
    let c = crop_box(m);
    Ok((crop(v, &c)?, c))
}

/// Place a cropped grid back into the original extent, filling elsewhere.
pub fn uncrop<T: Copy>(v: &Grid<T>, c: &CropBox, fill: T) -> Result<Grid<T>> {
    if v.dims() != c.bbox.size() {
        return Err(Error::shape(format!(
            "uncrop: grid {:?} does not match crop size {:?}",
            v.dims(),
            c.bbox.size()
        )));
    }
    let mut out = Grid::filled(c.original_dims, v.spacing(), fill)?;
    let (lo, size) = (c.bbox.lo, c.bbox.size());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let dst = out.index(z + lo[0], y + lo[1], lo[2]);
            let src = v.index(z, y, 0);
            out.data_mut()[dst..dst + size[2]].copy_from_slice(&v.data()[src..src + size[2]]);
        }
    }
    Ok(out)
}

/// Histogram of `values` over their own range with a cumulative count per bin edge.
struct BinnedCdf {
    min: f64,
    width: f64,
    counts: Vec<usize>,
    /// `cum[k]` voxels lie below edge `k`; `cum[bins] == n`.
    cum: Vec<usize>,
}

impl BinnedCdf {
    fn new(values: &[f64], min: f64, max: f64, bins: usize) -> Self {
        let width = (max - min) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in values {
            counts[Self::bin(min, width, bins, x)] += 1;
        }
        let mut cum = vec![0usize; bins + 1];
        for k in 0..bins {
            cum[k + 1] = cum[k] + counts[k];
        }
        BinnedCdf { min, width, counts, cum }
    }

    fn bin(min: f64, width: f64, bins: usize, x: f64) -> usize {
        (((x - min) / width) as usize).min(bins - 1)
    }

    fn edge(&self, k: usize) -> f64 {
        self.min + self.width * k as f64
    }

    /// Fraction of voxels below `x`, linear within bins.
    fn cdf(&self, x: f64) -> f64 {
        let bins = self.counts.len();
        let k = Self::bin(self.min, self.width, bins, x);
        let frac = ((x - self.min) / self.width - k as f64).clamp(0.0, 1.0);
        (self.cum[k] as f64 + frac * self.counts[k] as f64) / self.cum[bins] as f64
    }
}

/// Quantile function of a reference volume: within each non-empty bin, the
/// rank position runs piecewise linearly from the lower edge through the bin's
/// sorted samples (sample `j` at position `j + 1/2`) to the upper edge.
struct ReferenceQuantile {
    hist: BinnedCdf,
    sorted: Vec<f64>,
}

impl ReferenceQuantile {
    fn new(values: &[f64], min: f64, max: f64, bins: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        ReferenceQuantile {
            hist: BinnedCdf::new(values, min, max, bins),
            sorted,
        }
    }

    fn quantile(&self, q: f64) -> f64 {
        let h = &self.hist;
        let bins = h.counts.len();
        let t = q.clamp(0.0, 1.0) * self.sorted.len() as f64;
        let above = h.cum[1..].partition_point(|&c| c as f64 <= t);
        let k = if above < bins {
            above
        } else {
            h.counts.iter().rposition(|&c| c > 0).expect("non-empty histogram")
        };
        let m = h.counts[k] as f64;
        let samples = &self.sorted[h.cum[k]..h.cum[k + 1]];
        let r = (t - h.cum[k] as f64).clamp(0.0, m);
        let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
        if r <= 0.5 {
            lerp(h.edge(k), samples[0], r / 0.5)
        } else if r >= m - 0.5 {
            lerp(samples[samples.len() - 1], h.edge(k + 1), (r - (m - 0.5)) / 0.5)
        } else {
            let j = ((r - 0.5).floor() as usize).min(samples.len() - 2);
            lerp(samples[j], samples[j + 1], r - 0.5 - j as f64)
        }
    }
}

/// Map source intensities through `Q_ref(F_src(x))`. `F_src` is the source
/// CDF from a `bins`-bin histogram, linear within bins; `Q_ref` inverts the
/// reference distribution binned the same way, interpolating through the
/// reference samples inside each bin. Mapped values of a volume matched to
/// itself stay within their bin. A constant source maps every voxel to the
/// reference median.
pub fn match_histogram(source: &Volume, reference: &Volume, bins: usize) -> Result<Volume> {
    if bins == 0 {
        return Err(Error::invalid("match_histogram: bins must be positive"));
    }
    let rs = reference.stats();
    if !(rs.max > rs.min) {
        return Err(Error::invalid("match_histogram: reference volume is constant"));
    }
    let q_ref = ReferenceQuantile::new(reference.data(), rs.min, rs.max, bins);
    let stats = source.stats();
    if !(stats.max > stats.min) {
        let m = q_ref.quantile(0.5);
        return Ok(source.map(|_| m));
    }
    let f_src = BinnedCdf::new(source.data(), stats.min, stats.max, bins);
    Ok(source.map(|&x| q_ref.quantile(f_src.cdf(x))))
}

/// Output dims for a spacing change: `round(dims · old / new)`, at least 1.
pub fn resampled_dims(dims: [usize; 3], old: [f64; 3], new: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((dims[a] as f64 * old[a] / new[a]).round() as usize).max(1))
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::invalid(format!("target spacing must be positive, got {s:?}")));
    }
    Ok(())
}

/// Source coordinate of output index `i`: `i · new / old` (grids share their
/// first voxel), clamped to the source extent.
fn source_coord(i: usize, new: f64, old: f64, len: usize) -> f64 {
    (i as f64 * new / old).min((len - 1) as f64)
}

/// Trilinear resampling onto `dims` at `spacing`.
pub fn resample_to(v: &Volume, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    check_spacing(spacing)?;
    if dims == v.dims() && spacing == v.spacing() {
        return Ok(v.clone());
    }
    let src = v.dims();
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dims[a])
            .map(|i| {
                let c = source_coord(i, spacing[a], v.spacing()[a], src[a]);
                let i0 = c.floor() as usize;
                let i1 = (i0 + 1).min(src[a] - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(dims.iter().product());
    for &(z0, z1, tz) in &az {
        for &(y0, y1, ty) in &ay {
            for &(x0, x1, tx) in &ax {
                let lerp = |z: usize, y: usize| (1.0 - tx) * v.get(z, y, x0) + tx * v.get(z, y, x1);
                let a = (1.0 - ty) * lerp(z0, y0) + ty * lerp(z0, y1);
                let b = (1.0 - ty) * lerp(z1, y0) + ty * lerp(z1, y1);
                out.push((1.0 - tz) * a + tz * b);
            }
        }
    }
    Grid::new(dims, spacing, out)
}

/// Nearest-neighbour resampling onto `dims` at `spacing`, for label maps and masks.
pub fn resample_nearest_to<T: Copy>(v: &Grid<T>, dims: [usize; 3], spacing: [f64; 3]) -> Result<Grid<T>> {
    check_spacing(spacing)?;
    if dims == v.dims() && spacing == v.spacing() {
        return Ok(v.clone());
    }
    let src = v.dims();
    let axis = |a: usize| -> Vec<usize> {
        (0..dims[a])
            .map(|i| source_coord(i, spacing[a], v.spacing()[a], src[a]).round() as usize)
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &az {
        for &y in &ay {
            for &x in &ax {
                out.push(v.get(z, y, x));
            }
        }
    }
    Grid::new(dims, spacing, out)
}

/// Trilinear resampling to a target spacing.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    check_spacing(target_spacing)?;
    resample_to(v, resampled_dims(v.dims(), v.spacing(), target_spacing), target_spacing)
}

/// Nearest-neighbour resampling of labels to a target spacing.
pub fn resample_labels(l: &LabelMap, target_spacing: [f64; 3]) -> Result<LabelMap> {
    check_spacing(target_spacing)?;
    resample_nearest_to(l, resampled_dims(l.dims(), l.spacing(), target_spacing), target_spacing)
}

/// `(x - mean) / std`, statistics over the mask voxels when given.
pub fn zscore(v: &Volume, mask: Option<&BodyMask>) -> Result<Volume> {
    let region: Vec<f64> = match mask {
        Some(m) => {
            check_same_dims(v, m.grid(), "zscore")?;
            v.data()
                .iter()
                .zip(m.grid().data())
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .collect()
        }
        None => v.data().to_vec(),
    };
    let n = region.len() as f64;
    let mean = region.iter().sum::<f64>() / n;
    let std = (region.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::invalid("zscore: zero standard deviation over the region"));
    }
    Ok(v.map(|&x| (x - mean) / std))
}

/// Everything needed to map a preprocessed grid back onto the original one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryLog {
    pub original_dims: [usize; 3],
    pub original_spacing: [f64; 3],
    pub crop: CropBox,
    pub resampled_dims: [usize; 3],
    pub target_spacing: [f64; 3],
}

impl GeometryLog {
    /// Bring a label map on the preprocessed grid back to the original grid.
    pub fn restore_labels(&self, l: &LabelMap) -> Result<LabelMap> {
        if l.dims() != self.resampled_dims {
            return Err(Error::shape(format!(
                "restore: labels {:?} do not match preprocessed dims {:?}",
                l.dims(),
                self.resampled_dims
            )));
        }
        let back = resample_nearest_to(l, self.crop.bbox.size(), self.original_spacing)?;
        uncrop(&back, &self.crop, 0)
    }
}

/// Settings of the preprocessing chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub threshold: f64,
    pub target_spacing: [f64; 3],
    pub bins: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            threshold: BODY_THRESHOLD,
            target_spacing: TARGET_SPACING,
            bins: HISTOGRAM_BINS,
        }
    }
}

/// Input channels of one case: intensity images first, binary masks after.
#[derive(Clone, Debug)]
pub struct RawCase {
    pub images: Vec<Volume>,
    pub masks: Vec<LabelMap>,
    pub labels: Option<LabelMap>,
}

/// A case on the preprocessed grid.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub images: Vec<Volume>,
    pub masks: Vec<LabelMap>,
    pub labels: Option<LabelMap>,
    pub geometry: GeometryLog,
}

/// Run the chain on a case. The body mask comes from the first image;
/// `match_ref`, when given, is matched onto every image after cropping.
pub fn preprocess_case(case: &RawCase, cfg: &PreprocessConfig, match_ref: Option<&Volume>) -> Result<PreparedCase> {
    let primary = case
        .images
        .first()
        .ok_or_else(|| Error::invalid("preprocess: case has no image"))?;
    for m in &case.masks {
        check_same_dims(primary, m, "preprocess mask")?;
    }
    if let Some(l) = &case.labels {
        check_same_dims(primary, l, "preprocess labels")?;
    }
    let body = body_mask(primary, cfg.threshold)?;
    let cbox = crop_box(&body);
    let body_c = crop(body.grid(), &cbox)?;
    let new_dims = resampled_dims(cbox.bbox.size(), primary.spacing(), cfg.target_spacing);
    let body_r = BodyMask::from_grid(resample_nearest_to(&body_c, new_dims, cfg.target_spacing)?)?;
    let mut images = Vec::with_capacity(case.images.len());
    for img in &case.images {
        check_same_dims(primary, img, "preprocess image")?;
        let mut c = crop(img, &cbox)?;
        if let Some(r) = match_ref {
            c = match_histogram(&c, r, cfg.bins)?;
        }
        let r = resample_to(&c, new_dims, cfg.target_spacing)?;
        images.push(zscore(&r, Some(&body_r))?);
    }
    let relabel = |l: &LabelMap| resample_nearest_to(&crop(l, &cbox)?, new_dims, cfg.target_spacing);
    let masks = case.masks.iter().map(relabel).collect::<Result<Vec<_>>>()?;
    let labels = case.labels.as_ref().map(relabel).transpose()?;
    Ok(PreparedCase {
        images,
        masks,
        labels,
        geometry: GeometryLog {
            original_dims: primary.dims(),
            original_spacing: primary.spacing(),
            crop: cbox,
            resampled_dims: new_dims,
            target_spacing: cfg.target_spacing,
        },
    })
}
