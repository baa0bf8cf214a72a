//! Labelled snowfall injection, toy scene generation and dataset manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::SensorConfig;
use crate::scan_io::{read_scan, write_labels, write_scan, Class, DatasetLayout, LabelMask, Point, PointCloud};

pub const RATE_MIN: f64 = 0.5;
pub const RATE_MAX: f64 = 3.0;
pub const VELOCITY_MIN: f64 = 1.0;
pub const VELOCITY_MAX: f64 = 2.0;

/// Per-frame snowfall parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnowParams {
    pub snowfall_rate: f64,
    /// Recorded with each frame; the interception model does not use it.
    pub terminal_velocity: f64,
    pub seed: u64,
}

impl SnowParams {
    pub fn validate(&self) -> Result<()> {
        if !(RATE_MIN..=RATE_MAX).contains(&self.snowfall_rate) {
            return Err(Error::InvalidParams(format!(
                "snowfall rate {} outside [{RATE_MIN}, {RATE_MAX}]",
                self.snowfall_rate
            )));
        }
        if !(VELOCITY_MIN..=VELOCITY_MAX).contains(&self.terminal_velocity) {
            return Err(Error::InvalidParams(format!(
                "terminal velocity {} outside [{VELOCITY_MIN}, {VELOCITY_MAX}]",
                self.terminal_velocity
            )));
        }
        Ok(())
    }
}

/// Constants of the interception model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowModel {
    /// Interception probability per unit rate at long range.
    pub c: f64,
    /// Range scale of the interception probability, metres.
    pub lambda: f64,
    /// Closest scatter return, metres.
    pub r_min: f64,
    /// Upper bound of scatter intensity.
    pub i_max: f64,
}

impl Default for SnowModel {
    fn default() -> Self {
        Self {
            c: 0.15,
            lambda: 20.0,
            r_min: 1.5,
            i_max: 0.1,
        }
    }
}

impl SnowModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) || !(self.lambda > 0.0) || !(self.r_min >= 0.0) || !(self.i_max >= 0.0) {
            return Err(Error::InvalidParams(format!("snow model constants {self:?}")));
        }
        Ok(())
    }

    /// `c * rate * (1 - exp(-range / lambda))`, clamped to [0, 1].
    pub fn hit_probability(&self, rate: f64, range: f64) -> f64 {
        (self.c * rate * (1.0 - (-range / self.lambda).exp())).clamp(0.0, 1.0)
    }
}

/// Replaces intercepted returns with scatter returns along the same beam.
/// Beams shorter than `r_min` cannot be intercepted.
pub fn inject_snow(cloud: &PointCloud, params: &SnowParams, model: &SnowModel) -> Result<(PointCloud, LabelMask)> {
    params.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut points = Vec::with_capacity(cloud.len());
    let mut labels = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let r = p.range();
        let u: f64 = rng.gen();
        if r > model.r_min && u < model.hit_probability(params.snowfall_rate, r) {
            let nr = rng.gen_range(model.r_min..r);
            let s = nr / r;
            let intensity = rng.gen::<f64>() * model.i_max;
            points.push(Point::new(
                (p.x as f64 * s) as f32,
                (p.y as f64 * s) as f32,
                (p.z as f64 * s) as f32,
                intensity as f32,
            ));
            labels.push(Class::Noise);
        } else {
            points.push(*p);
            labels.push(Class::Valid);
        }
    }
    Ok((PointCloud::new(points, cloud.frame_id), LabelMask::new(labels)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionClass {
    Light,
    Medium,
    Heavy,
}

impl ConditionClass {
    pub const ALL: [ConditionClass; 3] = [Self::Light, Self::Medium, Self::Heavy];

    /// Rate interval; upper bound exclusive except for `Heavy`.
    pub fn rate_range(self) -> (f64, f64) {
        match self {
            Self::Light => (0.5, 1.5),
            Self::Medium => (1.5, 2.5),
            Self::Heavy => (2.5, 3.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Light => "light",
            Self::Medium => "medium",
            Self::Heavy => "heavy",
        }
    }
}

impl fmt::Display for ConditionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

pub fn classify_condition(rate: f64) -> Result<ConditionClass> {
    if !(RATE_MIN..=RATE_MAX).contains(&rate) {
        return Err(Error::OutOfRange {
            value: rate,
            lo: RATE_MIN,
            hi: RATE_MAX,
        });
    }
    Ok(if rate < 1.5 {
        ConditionClass::Light
    } else if rate < 2.5 {
        ConditionClass::Medium
    } else {
        ConditionClass::Heavy
    })
}

/// Training subsets by included condition classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSpec {
    All,
    Subset1,
    Subset2,
    Subset3,
    Subset4,
    Subset5,
    Subset6,
}

impl SubsetSpec {
    pub const ALL: [SubsetSpec; 7] = [
        Self::All,
        Self::Subset1,
        Self::Subset2,
        Self::Subset3,
        Self::Subset4,
        Self::Subset5,
        Self::Subset6,
    ];

    pub fn classes(self) -> &'static [ConditionClass] {
        use ConditionClass::*;
        match self {
            Self::All => &[Light, Medium, Heavy],
            Self::Subset1 => &[Light, Medium],
            Self::Subset2 => &[Light, Heavy],
            Self::Subset3 => &[Medium, Heavy],
            Self::Subset4 => &[Heavy],
            Self::Subset5 => &[Medium],
            Self::Subset6 => &[Light],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Subset1 => "subset1",
            Self::Subset2 => "subset2",
            Self::Subset3 => "subset3",
            Self::Subset4 => "subset4",
            Self::Subset5 => "subset5",
            Self::Subset6 => "subset6",
        }
    }
}

impl FromStr for SubsetSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown subset {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Which splits a [`SubsetSpec`] restricts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetScope {
    All,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Train, validation and test fractions of the sequences.
    pub split_ratios: [f64; 3],
    pub subset: SubsetSpec,
    pub subset_scope: SubsetScope,
    pub model: SnowModel,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            split_ratios: [0.4, 0.1, 0.5],
            subset: SubsetSpec::All,
            subset_scope: SubsetScope::All,
            model: SnowModel::default(),
            seed: 0,
        }
    }
}

/// Sequence counts per split, in sorted sequence order.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::InsufficientSequences { needed: 3, got: n });
    }
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || !total.is_finite() {
        return Err(Error::InvalidParams(format!("split ratios {ratios:?}")));
    }
    let share = |r: f64| ((r / total) * n as f64).round().max(1.0) as usize;
    let train = share(ratios[0]);
    let val = share(ratios[1]);
    let test = n.saturating_sub(train + val);
    if test == 0 {
        return Err(Error::InsufficientSequences { needed: train + val + 1, got: n });
    }
    Ok([train, val, test])
}

/// SplitMix64 finaliser, used to derive independent per-frame seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub sequence: String,
    pub frame: u64,
    /// Relative to the manifest directory.
    pub scan: PathBuf,
    pub label: PathBuf,
    pub rate: f64,
    pub velocity: f64,
    pub condition: ConditionClass,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    /// `key=value` pairs of the header.
    pub header: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_MAGIC: &str = "# stdenoise manifest v1";
const MANIFEST_COLUMNS: &str = "# split seq frame scan label rate velocity class seed";

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        for (k, v) in &self.header {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(MANIFEST_COLUMNS);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {:06} {} {} {} {} {} {}\n",
                e.split.name(),
                e.sequence,
                e.frame,
                e.scan.display(),
                e.label.display(),
                e.rate,
                e.velocity,
                e.condition,
                e.seed
            ));
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut header = Vec::new();
        let mut entries = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    detail: "missing manifest header".into(),
                })
            }
        }
        for (i, line) in lines {
            let line_no = i + 1;
            let bad = |detail: String| Error::Manifest { line: line_no, detail };
            let line = line.trim();
            if line.is_empty() || line == MANIFEST_COLUMNS {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    header.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(format!("bad {what} {s:?}")));
            entries.push(ManifestEntry {
                split: f[0].parse().map_err(bad)?,
                sequence: f[1].to_string(),
                frame: f[2].parse().map_err(|_| bad(format!("bad frame {:?}", f[2])))?,
                scan: PathBuf::from(f[3]),
                label: PathBuf::from(f[4]),
                rate: num(f[5], "rate")?,
                velocity: num(f[6], "velocity")?,
                condition: f[7].parse().map_err(bad)?,
                seed: f[8].parse().map_err(|_| bad(format!("bad seed {:?}", f[8])))?,
            });
        }
        Ok(Self {
            root: root.into(),
            header,
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        let mut v: Vec<&ManifestEntry> = self.entries.iter().filter(|e| e.split == split).collect();
        v.sort_by(|a, b| (&a.sequence, a.frame).cmp(&(&b.sequence, b.frame)));
        v
    }

    /// The frame preceding `entry` in its sequence, or `entry` itself at a sequence start.
    pub fn previous<'a>(&'a self, entry: &'a ManifestEntry) -> &'a ManifestEntry {
        entry
            .frame
            .checked_sub(1)
            .and_then(|f| {
                self.entries
                    .iter()
                    .find(|e| e.split == entry.split && e.sequence == entry.sequence && e.frame == f)
            })
            .unwrap_or(entry)
    }

    pub fn scan_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.scan)
    }

    pub fn label_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.label)
    }
}

/// Injects snow into every frame of a clean dataset and writes scans,
/// labels and `manifest.txt` under `out_root`.
pub fn build_dataset(clean_root: &Path, out_root: &Path, cfg: &BuildConfig) -> Result<Manifest> {
    cfg.model.validate()?;
    let clean = DatasetLayout::new(clean_root);
    let out = DatasetLayout::new(out_root);
    let sequences = clean.sequences()?;
    let counts = split_counts(sequences.len(), cfg.split_ratios)?;
    let mut entries = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        let split = if si < counts[0] {
            Split::Train
        } else if si < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let classes: &[ConditionClass] = match (cfg.subset_scope, split) {
            (SubsetScope::Train, Split::Val | Split::Test) => &ConditionClass::ALL,
            _ => cfg.subset.classes(),
        };
        for frame in clean.frames(seq)? {
            let seed = mix_seed(mix_seed(cfg.seed, si as u64), frame);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let condition = classes[rng.gen_range(0..classes.len())];
            let (lo, hi) = condition.rate_range();
            let rate = rng.gen_range(lo..hi);
            let velocity = rng.gen_range(VELOCITY_MIN..=VELOCITY_MAX);
            let params = SnowParams {
                snowfall_rate: rate,
                terminal_velocity: velocity,
                seed: rng.gen(),
            };
            let cloud = read_scan(clean.scan_path(seq, frame))?;
            let (noisy, labels) = inject_snow(&cloud, &params, &cfg.model)?;
            write_scan(&noisy, out.scan_path(seq, frame))?;
            write_labels(&labels, out.label_path(seq, frame))?;
            let rel = |p: PathBuf| p.strip_prefix(out_root).map(Path::to_path_buf).unwrap_or(p);
            entries.push(ManifestEntry {
                split,
                sequence: seq.clone(),
                frame,
                scan: rel(out.scan_path(seq, frame)),
                label: rel(out.label_path(seq, frame)),
                rate,
                velocity,
                condition,
                seed: params.seed,
            });
        }
    }
    let m = &cfg.model;
    let manifest = Manifest {
        root: out_root.to_path_buf(),
        header: vec![
            ("seed".into(), cfg.seed.to_string()),
            ("subset".into(), cfg.subset.name().into()),
            ("subset_scope".into(), format!("{:?}", cfg.subset_scope).to_lowercase()),
            ("c".into(), m.c.to_string()),
            ("lambda".into(), m.lambda.to_string()),
            ("r_min".into(), m.r_min.to_string()),
            ("i_max".into(), m.i_max.to_string()),
        ],
        entries,
    };
    manifest.write(out_root.join("manifest.txt"))?;
    Ok(manifest)
}

/// Procedural clear-weather street scenes: ground plane, two walls with
/// gaps, and boxes, observed from a sensor moving along +x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySceneConfig {
    pub sensor: SensorConfig,
    pub frames_per_sequence: usize,
    /// Ego displacement per frame, metres.
    pub ego_step: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    pub boxes: usize,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::toy(),
            frames_per_sequence: 20,
            ego_step: 0.5,
            sensor_height: 1.73,
            max_range: 80.0,
            boxes: 12,
        }
    }
}

#[derive(Clone, Debug)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
    intensity: f64,
}

impl Aabb {
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((self.lo[a] - o[a]) / d[a], (self.hi[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 1e-6).then_some(t0)
    }
}

/// A static scene, in world coordinates with the ground at `z = 0`.
#[derive(Clone, Debug)]
pub struct ToyScene {
    solids: Vec<Aabb>,
    ground_intensity: f64,
}

impl ToyScene {
    pub fn random(cfg: &ToySceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut solids = Vec::new();
        let span = cfg.ego_step * cfg.frames_per_sequence as f64;
        let (x_lo, x_hi) = (-cfg.max_range, span + cfg.max_range);
        for side in [-1.0, 1.0] {
            let offset = rng.gen_range(5.0..12.0);
            let height = rng.gen_range(2.5..6.0);
            let intensity = rng.gen_range(0.3..0.7);
            let mut x = x_lo;
            while x < x_hi {
                let len = rng.gen_range(6.0..25.0);
                let (y0, y1) = if side < 0.0 { (-offset - 0.5, -offset) } else { (offset, offset + 0.5) };
                solids.push(Aabb {
                    lo: [x, y0, 0.0],
                    hi: [x + len, y1, height],
                    intensity,
                });
                x += len + rng.gen_range(1.0..6.0);
            }
        }
        for _ in 0..cfg.boxes {
            let cx = rng.gen_range(-40.0..span + 40.0);
            let cy: f64 = rng.gen_range(-4.0..4.0);
            if cy.abs() < 1.5 {
                continue;
            }
            let (sx, sy, sz) = (rng.gen_range(0.5..4.5), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.5));
            solids.push(Aabb {
                lo: [cx - sx / 2.0, cy - sy / 2.0, 0.0],
                hi: [cx + sx / 2.0, cy + sy / 2.0, sz],
                intensity: rng.gen_range(0.2..0.9),
            });
        }
        Self {
            solids,
            ground_intensity: rng.gen_range(0.1..0.3),
        }
    }

    /// Ray-casts one pixel-centre beam per pixel from a sensor at `origin`;
    /// point coordinates are sensor-relative.
    pub fn scan(&self, cfg: &ToySceneConfig, origin: [f64; 3], frame_id: u64) -> PointCloud {
        let s = &cfg.sensor;
        let mut pts = Vec::new();
        for row in 0..s.height {
            for col in 0..s.width {
                let d = s.ray(col, row);
                let mut best: Option<(f64, f64)> = None;
                if d[2] < -1e-9 {
                    let t = -origin[2] / d[2];
                    best = Some((t, self.ground_intensity));
                }
                for b in &self.solids {
                    if let Some(t) = b.hit(origin, d) {
                        if best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, b.intensity));
                        }
                    }
                }
                if let Some((t, i)) = best {
                    if t <= cfg.max_range {
                        pts.push(Point::new((d[0] * t) as f32, (d[1] * t) as f32, (d[2] * t) as f32, i as f32));
                    }
                }
            }
        }
        PointCloud::new(pts, frame_id)
    }
}

/// Clean frames of one toy sequence.
pub fn toy_sequence(cfg: &ToySceneConfig, seed: u64) -> Vec<PointCloud> {
    let scene = ToyScene::random(cfg, seed);
    (0..cfg.frames_per_sequence)
        .map(|f| scene.scan(cfg, [f as f64 * cfg.ego_step, 0.0, cfg.sensor_height], f as u64))
        .collect()
}

/// Writes `sequences` toy sequences in dataset layout under `root`.
pub fn write_toy_dataset(root: &Path, sequences: usize, cfg: &ToySceneConfig, seed: u64) -> Result<()> {
    cfg.sensor.validate()?;
    let layout = DatasetLayout::new(root);
    for s in 0..sequences {
        let name = format!("{s:02}");
        for (f, cloud) in toy_sequence(cfg, mix_seed(seed, s as u64)).iter().enumerate() {
            write_scan(cloud, layout.scan_path(&name, f as u64))?;
        }
    }
    Ok(())
}
