//! Directory-level workflows behind the command-line tool: preprocessing a
//! dataset, loading training cases, multi-checkpoint inference and evaluation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{aggregated_dsc, all_flips, mean_map, tta_flips, EvalReport, DEFAULT_OVERLAP};
use crate::io::{read_labels, read_manifest, read_volume, write_labels, write_manifest, write_volume, CaseRecord, Task};
use crate::preprocess::{preprocess_case, GeometryLog, PreparedCase, PreprocessConfig, RawCase};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, TrainCase};
use crate::volume::{LabelMap, Volume};

fn required<'a>(rec: &'a CaseRecord, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("case {} has no {what}", rec.id)))
}

/// Read a case's volumes: images (primary first), masks and labels.
pub fn load_raw_case(dir: &Path, rec: &CaseRecord) -> Result<RawCase> {
    rec.validate()?;
    let images = rec
        .image_paths()
        .into_iter()
        .map(|p| read_volume(&dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let masks = match rec.task {
        Task::Task1 => Vec::new(),
        Task::Task2 => vec![read_labels(&dir.join(required(rec, &rec.registered_pre_mask, "mask")?))?],
    };
    let labels = rec.labels.as_ref().map(|p| read_labels(&dir.join(p))).transpose()?;
    Ok(RawCase { images, masks, labels })
}

pub fn geometry_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_geometry.json"))
}

/// Preprocess every case of `input` into `output`, keeping file names and
/// writing a geometry log per case.
pub fn preprocess_dir(input: &Path, output: &Path, cfg: &PreprocessConfig, match_ref: Option<&Path>) -> Result<Vec<CaseRecord>> {
    let records = read_manifest(input)?;
    let reference = match_ref.map(read_volume).transpose()?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    records.par_iter().try_for_each(|rec| -> Result<()> {
        let raw = load_raw_case(input, rec)?;
        let prepared = preprocess_case(&raw, cfg, reference.as_ref())?;
        for (p, v) in rec.image_paths().into_iter().zip(&prepared.images) {
            write_volume(&output.join(p), v)?;
        }
        if let (Some(p), Some(m)) = (&rec.registered_pre_mask, prepared.masks.first()) {
            write_labels(&output.join(p), m)?;
        }
        if let (Some(p), Some(l)) = (&rec.labels, &prepared.labels) {
            write_labels(&output.join(p), l)?;
        }
        let path = geometry_path(output, &rec.id);
        let text = serde_json::to_string_pretty(&prepared.geometry).expect("serializable");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    })?;
    write_manifest(output, &records)?;
    Ok(records)
}

/// Stack the channels a model with `in_channels` inputs consumes: the primary
/// image alone, or (task 2) mid-RT image, registered pre-RT image and its mask.
pub fn input_tensor(images: &[Volume], masks: &[LabelMap], in_channels: usize) -> Result<Tensor> {
    let primary = images.first().ok_or_else(|| Error::invalid("case has no image"))?;
    let [d, h, w] = primary.dims();
    let mut data: Vec<f64> = primary.data().to_vec();
    match in_channels {
        1 => {}
        3 => {
            let (pre, mask) = match (images.get(1), masks.first()) {
                (Some(p), Some(m)) => (p, m),
                _ => {
                    return Err(Error::Config(
                        "a 3-channel model needs the registered pre-RT image and mask".into(),
                    ))
                }
            };
            data.extend_from_slice(pre.data());
            data.extend(mask.data().iter().map(|&m| m as f64));
        }
        c => return Err(Error::Config(format!("unsupported input channel count {c}"))),
    }
    Tensor::new(&[in_channels, d, h, w], data)
}

/// A preprocessed case read back from disk.
pub struct LoadedCase {
    pub record: CaseRecord,
    pub images: Vec<Volume>,
    pub masks: Vec<LabelMap>,
    pub labels: Option<LabelMap>,
    pub geometry: Option<GeometryLog>,
}

pub fn load_prepared_dir(dir: &Path) -> Result<Vec<LoadedCase>> {
    read_manifest(dir)?
        .into_iter()
        .map(|record| {
            let raw = load_raw_case(dir, &record)?;
            let gpath = geometry_path(dir, &record.id);
            let geometry = if gpath.exists() {
                let text = std::fs::read_to_string(&gpath).map_err(|e| Error::io(&gpath, e))?;
                Some(serde_json::from_str(&text).map_err(|e| Error::format(&gpath, e.to_string()))?)
            } else {
                None
            };
            Ok(LoadedCase {
                record,
                images: raw.images,
                masks: raw.masks,
                labels: raw.labels,
                geometry,
            })
        })
        .collect()
}

/// Convert in-memory prepared cases to training cases.
pub fn training_case(id: &str, prepared: &PreparedCase, in_channels: usize) -> Result<TrainCase> {
    let labels = prepared
        .labels
        .clone()
        .ok_or_else(|| Error::Config(format!("case {id} has no labels")))?;
    TrainCase::new(id, input_tensor(&prepared.images, &prepared.masks, in_channels)?, labels)
}

/// Training cases from a preprocessed directory.
pub fn load_training_set(dir: &Path, in_channels: usize) -> Result<Vec<TrainCase>> {
    load_prepared_dir(dir)?
        .into_iter()
        .map(|c| {
            let labels = c
                .labels
                .ok_or_else(|| Error::Config(format!("case {} has no labels", c.record.id)))?;
            TrainCase::new(c.record.id, input_tensor(&c.images, &c.masks, in_channels)?, labels)
        })
        .collect()
}

/// Ensemble the checkpoints over every case of `input`, optionally with all
/// eight flips, and write one label map `<id>.dfsv` per case to `output`
/// (on the original grid when a geometry log is present).
pub fn infer_dir(ckpts: &[PathBuf], input: &Path, output: &Path, tta: bool) -> Result<Vec<PathBuf>> {
    if ckpts.is_empty() {
        return Err(Error::invalid("infer: no checkpoints given"));
    }
    let checkpoints = ckpts.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let in_channels = checkpoints[0].model_config.in_channels;
    if checkpoints.iter().any(|c| c.model_config.in_channels != in_channels) {
        return Err(Error::Config("checkpoints disagree on input channels".into()));
    }
    let models = checkpoints
        .iter()
        .map(|c| Ok((c.model()?, c.train_config.patch)))
        .collect::<Result<Vec<_>>>()?;
    let flips = if tta { all_flips() } else { vec![[false; 3]] };
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let cases = load_prepared_dir(input)?;
    let mut written = Vec::with_capacity(cases.len());
    for case in &cases {
        let x = input_tensor(&case.images, &case.masks, in_channels)?;
        let maps = models
            .iter()
            .map(|(m, patch)| tta_flips(m, &x, &flips, *patch, DEFAULT_OVERLAP))
            .collect::<Result<Vec<_>>>()?;
        let labels = case.images[0].with_data(mean_map(&maps)?.argmax())?;
        let labels = match &case.geometry {
            Some(g) => g.restore_labels(&labels)?,
            None => labels,
        };
        let path = output.join(format!("{}.dfsv", case.record.id));
        write_labels(&path, &labels)?;
        written.push(path);
    }
    Ok(written)
}

/// Reference label path for prediction `id`: `<ref>/<id>.dfsv` if present,
/// otherwise the labels listed for `id` in the reference manifest.
fn reference_path(reference: &Path, id: &str, manifest: &Option<Vec<CaseRecord>>) -> Result<PathBuf> {
    let direct = reference.join(format!("{id}.dfsv"));
    if direct.exists() {
        return Ok(direct);
    }
    manifest
        .as_ref()
        .and_then(|m| m.iter().find(|r| r.id == id))
        .and_then(|r| r.labels.as_ref())
        .map(|p| reference.join(p))
        .ok_or_else(|| Error::Config(format!("no reference labels for {id} in {}", reference.display())))
}

/// Score every `*.dfsv` prediction in `pred` against its reference and write
/// the JSON-lines report.
pub fn evaluate_dirs(pred: &Path, reference: &Path, report: &Path) -> Result<EvalReport> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dfsv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .dfsv predictions in {}", pred.display())));
    }
    let manifest = if reference.join(crate::io::MANIFEST).exists() {
        Some(read_manifest(reference)?)
    } else {
        None
    };
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for f in &files {
        let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let r = read_labels(&reference_path(reference, &id, &manifest)?)?;
        pairs.push((read_labels(f)?, r));
        ids.push(id);
    }
    let refs: Vec<_> = pairs.iter().map(|(p, r)| (p, r)).collect();
    let result = aggregated_dsc(&refs)?;
    std::fs::write(report, result.to_json_lines(&ids)).map_err(|e| Error::io(report, e))?;
    Ok(result)
}
