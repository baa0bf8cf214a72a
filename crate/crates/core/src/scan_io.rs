//! KITTI-style binary scans (`.bin`, four little-endian `f32` per point) and
//! point-wise label files (`.label`, one little-endian `u32` per point).
//!
//! Datasets follow the odometry layout:
//!
//! ```text
//! <root>/sequences/<NN>/velodyne/<FFFFFF>.bin
//! <root>/sequences/<NN>/labels/<FFFFFF>.label
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    /// Euclidean distance from the sensor origin, evaluated in `f64`.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Monotone scan index inside its sequence.
    pub frame_id: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: u64) -> Self {
        Self { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(u8)]
pub enum Class {
    #[default]
    Valid = 0,
    Noise = 1,
}

impl Class {
    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Class::Valid),
            1 => Some(Class::Noise),
            _ => None,
        }
    }

    pub fn is_noise(self) -> bool {
        self == Class::Noise
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelMask {
    pub labels: Vec<Class>,
}

impl LabelMask {
    pub fn new(labels: Vec<Class>) -> Self {
        Self { labels }
    }

    pub fn all(class: Class, n: usize) -> Self {
        Self {
            labels: vec![class; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|c| c.is_noise()).count()
    }
}

/// Maps foreign label ids onto {valid, noise}. Ids not present are rejected.
#[derive(Clone, Debug, Default)]
pub struct LabelRemap {
    table: HashMap<u32, Class>,
}

impl LabelRemap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, id: u32, class: Class) -> Self {
        self.table.insert(id, class);
        self
    }

    pub fn get(&self, id: u32) -> Option<Class> {
        self.table.get(&id).copied()
    }
}

/// Parses the numeric file stem (`000042.bin` -> 42); other names give 0.
fn frame_id_of(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::MalformedLength {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: POINT_BYTES,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (index, rec) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        let p = Point::new(f(0), f(4), f(8), f(12));
        if !p.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                index,
            });
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, frame_id_of(path)))
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes, path)
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = cloud.points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFiniteValue {
            path: path.to_path_buf(),
            index,
        });
    }
    write_bytes(path, &encode_scan(cloud))
}

pub fn decode_labels(bytes: &[u8], path: &Path, remap: Option<&LabelRemap>) -> Result<LabelMask> {
    if bytes.len() % LABEL_BYTES != 0 {
        return Err(Error::MalformedLength {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: LABEL_BYTES,
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / LABEL_BYTES);
    for (index, rec) in bytes.chunks_exact(LABEL_BYTES).enumerate() {
        let id = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
        let class = match remap {
            Some(table) => table.get(id),
            None => Class::from_id(id),
        };
        match class {
            Some(c) => labels.push(c),
            None => {
                return Err(Error::UnknownClassId {
                    path: path.to_path_buf(),
                    id,
                    index,
                })
            }
        }
    }
    Ok(LabelMask::new(labels))
}

pub fn encode_labels(mask: &LabelMask) -> Vec<u8> {
    mask.labels.iter().flat_map(|c| c.id().to_le_bytes()).collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMask> {
    read_labels_with(path, None)
}

pub fn read_labels_with(path: impl AsRef<Path>, remap: Option<&LabelRemap>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, path, remap)
}

pub fn write_labels(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(mask))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// KITTI odometry directory layout rooted at `root`.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sequence_dir(&self, seq: &str) -> PathBuf {
        self.root.join("sequences").join(seq)
    }

    pub fn scan_path(&self, seq: &str, frame: u64) -> PathBuf {
        self.sequence_dir(seq).join("velodyne").join(format!("{frame:06}.bin"))
    }

    pub fn label_path(&self, seq: &str, frame: u64) -> PathBuf {
        self.sequence_dir(seq).join("labels").join(format!("{frame:06}.label"))
    }

    /// Sequence names present under `sequences/`, sorted.
    pub fn sequences(&self) -> Result<Vec<String>> {
        let dir = self.root.join("sequences");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().join("velodyne").is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Frame indices of a sequence, sorted ascending.
    pub fn frames(&self, seq: &str) -> Result<Vec<u64>> {
        let dir = self.sequence_dir(seq).join("velodyne");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("bin") {
                out.push(frame_id_of(&path));
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}
