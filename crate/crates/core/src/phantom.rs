//! Synthetic head-and-neck-like phantoms: an ellipsoidal body with bright
//! primary-tumour blobs (class 1) and smaller node blobs (class 2). Task-2
//! cases add a mid-treatment scan whose lesions have shrunk and lost contrast,
//! alongside the pre-treatment scan and its labels as the registered prior.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{write_labels, write_manifest, write_volume, CaseRecord, Task};
use crate::preprocess::TARGET_SPACING;
use crate::volume::{LabelMap, Volume};

pub const BODY_INTENSITY: f64 = 100.0;
pub const GTVP_OFFSET: f64 = 60.0;
pub const GTVN_OFFSET: f64 = 35.0;
/// Upper bound of the uniform background intensity.
pub const BACKGROUND_MAX: f64 = 8.0;

/// Generator settings for the mid-treatment scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MidScan {
    /// Lesion radii are scaled by a factor drawn from this range.
    pub shrink: (f64, f64),
    /// Multiplier on the lesion intensity offsets.
    pub contrast: f64,
    /// Standard deviation of the body noise.
    pub noise: f64,
}

impl Default for MidScan {
    fn default() -> Self {
        MidScan {
            shrink: (0.6, 0.85),
            contrast: 0.3,
            noise: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub task: Task,
    /// Standard deviation of the body noise in the pre-treatment scan.
    pub noise: f64,
    pub mid: MidScan,
}

impl PhantomConfig {
    pub fn new(dims: [usize; 3], task: Task) -> Self {
        PhantomConfig {
            dims,
            spacing: TARGET_SPACING,
            task,
            noise: 5.0,
            mid: MidScan::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!(
                "phantom dims {:?} must be at least 16 per axis",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Volumes of one generated case.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub pre_image: Volume,
    pub pre_labels: LabelMap,
    /// Task-2 only: the mid-treatment image and its labels.
    pub mid: Option<(Volume, LabelMap)>,
    /// Number of class-1 and class-2 blobs.
    pub blobs: [usize; 2],
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    class: u8,
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn body_radii(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| 0.42 * d as f64)
}

fn centre(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

fn in_body(dims: [usize; 3], p: [f64; 3]) -> bool {
    let (c, r) = (centre(dims), body_radii(dims));
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn place_blobs(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n_p = rng.random_range(1..=2);
    let n_n = rng.random_range(0..=3);
    let (c, r) = (centre(dims), body_radii(dims));
    let mut blobs = Vec::new();
    for k in 0..n_p + n_n {
        let class = if k < n_p { 1 } else { 2 };
        let scale = if class == 1 { 0.16 } else { 0.12 };
        let radii = dims.map(|d| (scale * d as f64 * rng.random_range(0.8..1.2)).max(1.5));
        let reach = if class == 1 { 0.45 } else { 0.6 };
        let centre = [0, 1, 2].map(|a| c[a] + r[a] * reach * rng.random_range(-1.0..1.0));
        blobs.push(Blob { centre, radii, class });
    }
    blobs
}

fn render(dims: [usize; 3], spacing: [f64; 3], blobs: &[Blob], contrast: f64, noise: f64, rng: &mut ChaCha8Rng) -> Result<(Volume, LabelMap)> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let n = dims.iter().product();
    let mut img = Vec::with_capacity(n);
    let mut lab = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let (v, l) = if in_body(dims, p) {
                    // Nodes drawn after primaries win where they overlap.
                    let class = blobs.iter().filter(|b| b.contains(p)).map(|b| b.class).max().unwrap_or(0);
                    let offset = match class {
                        1 => GTVP_OFFSET,
                        2 => GTVN_OFFSET,
                        _ => 0.0,
                    };
                    (BODY_INTENSITY + contrast * offset + normal.sample(rng), class)
                } else {
                    (rng.random_range(0.0..BACKGROUND_MAX), 0)
                };
                img.push(v as f32 as f64);
                lab.push(l);
            }
        }
    }
    Ok((Volume::new(dims, spacing, img)?, LabelMap::new(dims, spacing, lab)?))
}

/// Generate case `index` of a dataset; deterministic in `(seed, index)`.
pub fn generate_case(cfg: &PhantomConfig, seed: u64, index: u64) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let blobs = place_blobs(cfg.dims, &mut rng);
    let count = |c: u8| blobs.iter().filter(|b| b.class == c).count();
    let (pre_image, pre_labels) = render(cfg.dims, cfg.spacing, &blobs, 1.0, cfg.noise, &mut rng)?;
    let mid = match cfg.task {
        Task::Task1 => None,
        Task::Task2 => {
            let shrunk: Vec<Blob> = blobs
                .iter()
                .map(|b| {
                    let s = rng.random_range(cfg.mid.shrink.0..=cfg.mid.shrink.1);
                    let jitter = [0, 1, 2].map(|_| rng.random_range(-0.75..0.75));
                    Blob {
                        centre: [0, 1, 2].map(|a| b.centre[a] + jitter[a]),
                        radii: b.radii.map(|r| (r * s).max(1.0)),
                        class: b.class,
                    }
                })
                .collect();
            Some(render(cfg.dims, cfg.spacing, &shrunk, cfg.mid.contrast, cfg.mid.noise, &mut rng)?)
        }
    };
    Ok(Phantom {
        pre_image,
        pre_labels,
        mid,
        blobs: [count(1), count(2)],
    })
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Write `n_cases` phantoms and a manifest into `out`.
pub fn write_dataset(out: &Path, cfg: &PhantomConfig, seed: u64, n_cases: usize) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let p = generate_case(cfg, seed, i as u64)?;
        let id = case_id(i);
        let file = |suffix: &str| std::path::PathBuf::from(format!("{id}_{suffix}.dfsv"));
        let mut rec = CaseRecord {
            id: id.clone(),
            task: cfg.task,
            pre_image: None,
            mid_image: None,
            registered_pre_image: None,
            registered_pre_mask: None,
            labels: Some(file("label")),
        };
        match &p.mid {
            None => {
                rec.pre_image = Some(file("pre"));
                write_volume(&out.join(file("pre")), &p.pre_image)?;
                write_labels(&out.join(file("label")), &p.pre_labels)?;
            }
            Some((mid_img, mid_lab)) => {
                rec.mid_image = Some(file("mid"));
                rec.registered_pre_image = Some(file("prereg"));
                rec.registered_pre_mask = Some(file("premask"));
                write_volume(&out.join(file("mid")), mid_img)?;
                write_volume(&out.join(file("prereg")), &p.pre_image)?;
                write_labels(&out.join(file("premask")), &p.pre_labels)?;
                write_labels(&out.join(file("label")), mid_lab)?;
            }
        }
        records.push(rec);
    }
    write_manifest(out, &records)?;
    Ok(records)
}
