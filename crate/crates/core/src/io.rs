//! On-disk formats: the `DFSV` volume container, the `DFCK` tensor archive
//! used for checkpoints, flat key-value config files and case manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Grid, LabelMap, Volume};

pub const VOLUME_MAGIC: &[u8; 4] = b"DFSV";
pub const VOLUME_VERSION: u16 = 1;
pub const ARCHIVE_MAGIC: &[u8; 4] = b"DFCK";
pub const ARCHIVE_VERSION: u16 = 1;

const MAX_NAME: u32 = 1 << 16;
const MAX_VALUE: u32 = 1 << 26;

/// Voxel payload of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    fn tag(&self) -> u8 {
        match self {
            VolumeData::F32(_) => 0,
            VolumeData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }
}

/// Contents of a `DFSV` file.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: VolumeData,
}

impl VolumeFile {
    /// Intensities are stored as `f32`.
    pub fn from_volume(v: &Volume) -> Self {
        VolumeFile {
            dims: v.dims(),
            spacing: v.spacing(),
            data: VolumeData::F32(v.data().iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn from_labels(l: &LabelMap) -> Self {
        VolumeFile {
            dims: l.dims(),
            spacing: l.spacing(),
            data: VolumeData::U8(l.data().to_vec()),
        }
    }

    /// Any payload as intensities.
    pub fn to_volume(&self) -> Result<Volume> {
        let data = match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Grid::new(self.dims, self.spacing, data)
    }

    /// A `u8` payload as labels.
    pub fn to_labels(&self) -> Result<LabelMap> {
        match &self.data {
            VolumeData::U8(v) => Grid::new(self.dims, self.spacing, v.clone()),
            VolumeData::F32(_) => Err(Error::invalid("expected a u8 label volume, found f32")),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(VOLUME_MAGIC)?;
        w.write_u16::<LittleEndian>(VOLUME_VERSION)?;
        w.write_u8(self.data.tag())?;
        for d in self.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for s in self.spacing {
            w.write_f64::<LittleEndian>(s)?;
        }
        match &self.data {
            VolumeData::F32(v) => {
                for &x in v {
                    w.write_f32::<LittleEndian>(x)?;
                }
            }
            VolumeData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.data.len() != self.dims.iter().product::<usize>() {
            return Err(Error::shape("volume payload does not match dims"));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parse from a reader; the header is fully validated before the payload is read.
    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != VOLUME_MAGIC {
            return Err(bad("bad magic, expected DFSV"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != VOLUME_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let tag = r.read_u8().map_err(|_| bad("truncated header"))?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        }
        let mut spacing = [0f64; 3];
        for s in &mut spacing {
            *s = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        }
        if dims.contains(&0) {
            return Err(bad(&format!("zero dimension in {dims:?}")));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(bad(&format!("non-positive spacing {spacing:?}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 31)
            .ok_or_else(|| bad("dims too large"))?;
        let data = match tag {
            0 => {
                let mut v = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut v)
                    .map_err(|_| bad("payload shorter than dims"))?;
                VolumeData::F32(v)
            }
            1 => {
                let mut v = vec![0u8; n];
                r.read_exact(&mut v).map_err(|_| bad("payload shorter than dims"))?;
                VolumeData::U8(v)
            }
            t => return Err(bad(&format!("unknown dtype tag {t}"))),
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(VolumeFile { dims, spacing, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), path)
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    VolumeFile::from_volume(v).save(path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    VolumeFile::load(path)?.to_volume()
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    VolumeFile::from_labels(l).save(path)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let f = VolumeFile::load(path)?;
    f.to_labels().map_err(|e| Error::format(path, e.to_string()))
}

/// Named `f32` tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("archive lacks metadata key {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(ARCHIVE_MAGIC);
        w.write_u16::<LittleEndian>(ARCHIVE_VERSION).unwrap();
        let put_str = |w: &mut Vec<u8>, s: &str| {
            w.write_u32::<LittleEndian>(s.len() as u32).unwrap();
            w.extend_from_slice(s.as_bytes());
        };
        w.write_u32::<LittleEndian>(self.metadata.len() as u32).unwrap();
        for (k, v) in &self.metadata {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            put_str(&mut w, name);
            w.write_u8(t.shape().len() as u8).unwrap();
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &x in t.data() {
                w.write_f32::<LittleEndian>(x as f32).unwrap();
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("bad magic, expected DFCK".into()));
        }
        let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header".into()))?;
        if version != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let read_u32 = |r: &mut &[u8]| r.read_u32::<LittleEndian>().map_err(|_| bad("truncated archive".into()));
        let read_str = |r: &mut &[u8], limit: u32| -> Result<String> {
            let len = read_u32(r)?;
            if len > limit || len as usize > r.len() {
                return Err(bad("string length out of range".into()));
            }
            let (s, rest) = r.split_at(len as usize);
            *r = rest;
            String::from_utf8(s.to_vec()).map_err(|_| bad("string is not UTF-8".into()))
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r, MAX_NAME)?;
            let v = read_str(&mut r, MAX_VALUE)?;
            metadata.insert(k, v);
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_str(&mut r, MAX_NAME)?;
            let rank = r.read_u8().map_err(|_| bad("truncated archive".into()))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 4 > r.len() {
                return Err(bad(format!("tensor {name} payload truncated")));
            }
            let mut vals = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut vals)
                .map_err(|_| bad("truncated archive".into()))?;
            let t = Tensor::new(&shape, vals.iter().map(|&x| x as f64).collect())
                .map_err(|e| bad(e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after archive".into()));
        }
        Ok(Archive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn format_key_values(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Task1,
    Task2,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" | "task1" => Ok(Task::Task1),
            "2" | "task2" => Ok(Task::Task2),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// File references of one case, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registered_pre_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registered_pre_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Task1 if self.pre_image.is_none() => Err(Error::Config(format!(
                "case {}: task1 record needs a pre-RT image",
                self.id
            ))),
            Task::Task2
                if self.mid_image.is_none()
                    || self.registered_pre_image.is_none()
                    || self.registered_pre_mask.is_none() =>
            {
                Err(Error::Config(format!(
                    "case {}: task2 record needs the mid-RT image, registered pre-RT image and its mask",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }

    /// Image paths in channel order: the primary image first.
    pub fn image_paths(&self) -> Vec<&Path> {
        match self.task {
            Task::Task1 => self.pre_image.iter().map(PathBuf::as_path).collect(),
            Task::Task2 => [&self.mid_image, &self.registered_pre_image]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path)
                .collect(),
        }
    }
}

pub const MANIFEST: &str = "cases.json";

pub fn write_manifest(dir: &Path, records: &[CaseRecord]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(records).expect("serializable");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<CaseRecord>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<CaseRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}
