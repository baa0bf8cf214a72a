//! Spherical projection of unordered scans onto an `H x W` range image.
//!
//! Each pixel keeps the nearest point that landed on it and remembers every
//! point index that collided there, so per-pixel predictions can be pushed
//! back onto the original points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_io::{Class, LabelMask, PointCloud};

/// Marker for "no point" in per-pixel and per-point index arrays.
pub const NONE: u32 = u32::MAX;

/// Range written to pixels that received no point.
pub const INVALID_RANGE: f64 = -1.0;

pub const CH_RANGE: usize = 0;
pub const CH_X: usize = 1;
pub const CH_Y: usize = 2;
pub const CH_Z: usize = 3;
pub const CH_INTENSITY: usize = 4;
pub const NUM_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Image rows.
    pub height: usize,
    /// Image columns.
    pub width: usize,
    /// Total vertical field of view, radians.
    pub fov_v: f64,
    /// Offset term of the row mapping, radians. Rows cover elevations
    /// `[-fov_up, fov_v - fov_up]`, so for a sensor tilted towards the ground
    /// this is the extent below the horizontal plane.
    pub fov_up: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl SensorConfig {
    /// 64-beam sensor with 0.44 degree vertical spacing, +3 / -25.16 degrees.
    pub fn hdl64() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_v: (64.0 * 0.44f64).to_radians(),
            fov_up: (64.0 * 0.44 - 3.0f64).to_radians(),
        }
    }

    /// 32-beam sensor with 1.25 degree vertical spacing, +15 / -25 degrees.
    pub fn vlp32() -> Self {
        Self {
            height: 32,
            width: 1024,
            fov_v: (32.0 * 1.25f64).to_radians(),
            fov_up: 25.0f64.to_radians(),
        }
    }

    /// Desk-scale image with the 64-beam geometry.
    pub fn toy() -> Self {
        Self {
            width: 512,
            ..Self::hdl64()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParams("image dimensions must be positive".into()));
        }
        if !(self.fov_v > 0.0) || !(self.fov_up >= 0.0) || self.fov_up > self.fov_v {
            return Err(Error::InvalidParams(format!(
                "need fov_v > 0 and 0 <= fov_up <= fov_v, got fov_v={} fov_up={}",
                self.fov_v, self.fov_up
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Horizontal angular resolution in radians.
    pub fn azimuth_resolution(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.width as f64
    }

    /// Unit ray through the centre of pixel `(col, row)`.
    pub fn ray(&self, col: usize, row: usize) -> [f64; 3] {
        let azimuth = std::f64::consts::PI * (1.0 - 2.0 * (col as f64 + 0.5) / self.width as f64);
        let elevation = (1.0 - (row as f64 + 0.5) / self.height as f64) * self.fov_v - self.fov_up;
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }
}

/// Image coordinates `(u = column, v = row)` of a Cartesian point.
pub fn pixel_of(p: [f64; 3], cfg: &SensorConfig) -> Result<(usize, usize)> {
    let [x, y, z] = p;
    let r = (x * x + y * y + z * z).sqrt();
    if r <= 0.0 {
        return Err(Error::ZeroRange);
    }
    let pi = std::f64::consts::PI;
    let u = (0.5 * (1.0 - y.atan2(x) / pi) * cfg.width as f64).floor();
    let v = ((1.0 - ((z / r).asin() + cfg.fov_up) / cfg.fov_v) * cfg.height as f64).floor();
    let clamp = |val: f64, n: usize| val.max(0.0).min((n - 1) as f64) as usize;
    Ok((clamp(u, cfg.width), clamp(v, cfg.height)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderedPointCloud {
    pub height: usize,
    pub width: usize,
    /// `NUM_CHANNELS x H x W`, channel order (range, x, y, z, intensity).
    channels: Vec<f64>,
    valid: Vec<bool>,
    /// Point index providing each pixel's channels (nearest one).
    winner: Vec<u32>,
    /// Pixel that each source point landed in.
    point_pixel: Vec<u32>,
    owner_offsets: Vec<u32>,
    owners: Vec<u32>,
    /// Points skipped because they sit at the origin.
    pub dropped: usize,
}

impl OrderedPointCloud {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_points(&self) -> usize {
        self.point_pixel.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn ranges(&self) -> &[f64] {
        self.channel(CH_RANGE)
    }

    #[inline]
    pub fn range_at(&self, pixel: usize) -> f64 {
        self.channels[pixel]
    }

    #[inline]
    pub fn xyz_at(&self, pixel: usize) -> [f64; 3] {
        let n = self.pixels();
        [
            self.channels[CH_X * n + pixel],
            self.channels[CH_Y * n + pixel],
            self.channels[CH_Z * n + pixel],
        ]
    }

    #[inline]
    pub fn value(&self, c: usize, pixel: usize) -> f64 {
        self.channels[c * self.pixels() + pixel]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, pixel: usize) -> bool {
        self.valid[pixel]
    }

    pub fn winner(&self, pixel: usize) -> Option<usize> {
        let w = self.winner[pixel];
        (w != NONE).then_some(w as usize)
    }

    /// All source point indices that mapped to `pixel`, ascending.
    pub fn owners(&self, pixel: usize) -> &[u32] {
        &self.owners[self.owner_offsets[pixel] as usize..self.owner_offsets[pixel + 1] as usize]
    }

    pub fn pixel_of_point(&self, index: usize) -> Option<usize> {
        let p = self.point_pixel[index];
        (p != NONE).then_some(p as usize)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Per-pixel class taken from the point that owns each pixel's channels.
    /// Empty pixels report `Valid`; callers mask them out with [`Self::valid`].
    pub fn pixel_labels(&self, labels: &LabelMask) -> Result<Vec<Class>> {
        if labels.len() != self.num_points() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: self.num_points(),
            });
        }
        Ok(self
            .winner
            .iter()
            .map(|&w| if w == NONE { Class::Valid } else { labels.labels[w as usize] })
            .collect())
    }
}

/// Builds the ordered representation. The nearest point wins a pixel, ties go
/// to the lower point index; every colliding index is kept as an owner.
pub fn project(cloud: &PointCloud, cfg: &SensorConfig) -> OrderedPointCloud {
    let n_pix = cfg.pixels();
    let mut winner = vec![NONE; n_pix];
    let mut best = vec![f64::INFINITY; n_pix];
    let mut point_pixel = vec![NONE; cloud.len()];
    let mut counts = vec![0u32; n_pix + 1];
    let mut dropped = 0;

    for (i, p) in cloud.points.iter().enumerate() {
        let xyz = p.xyz();
        let (u, v) = match pixel_of(xyz, cfg) {
            Ok(uv) => uv,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let pix = v * cfg.width + u;
        point_pixel[i] = pix as u32;
        counts[pix + 1] += 1;
        let r = p.range();
        if r < best[pix] {
            best[pix] = r;
            winner[pix] = i as u32;
        }
    }

    for k in 1..=n_pix {
        counts[k] += counts[k - 1];
    }
    let owner_offsets = counts.clone();
    let mut cursor = counts;
    let mut owners = vec![0u32; owner_offsets[n_pix] as usize];
    for (i, &pix) in point_pixel.iter().enumerate() {
        if pix != NONE {
            let slot = &mut cursor[pix as usize];
            owners[*slot as usize] = i as u32;
            *slot += 1;
        }
    }

    let mut channels = vec![0.0; NUM_CHANNELS * n_pix];
    let mut valid = vec![false; n_pix];
    for pix in 0..n_pix {
        match winner[pix] {
            NONE => channels[CH_RANGE * n_pix + pix] = INVALID_RANGE,
            w => {
                let p = &cloud.points[w as usize];
                valid[pix] = true;
                channels[CH_RANGE * n_pix + pix] = best[pix];
                channels[CH_X * n_pix + pix] = p.x as f64;
                channels[CH_Y * n_pix + pix] = p.y as f64;
                channels[CH_Z * n_pix + pix] = p.z as f64;
                channels[CH_INTENSITY * n_pix + pix] = p.intensity as f64;
            }
        }
    }

    OrderedPointCloud {
        height: cfg.height,
        width: cfg.width,
        channels,
        valid,
        winner,
        point_pixel,
        owner_offsets,
        owners,
        dropped,
    }
}

/// Gives every source point the class predicted for the pixel it landed in.
/// Points dropped at projection time are labelled valid.
pub fn unproject_labels(opc: &OrderedPointCloud, pixel_pred: &[Class]) -> Result<LabelMask> {
    if pixel_pred.len() != opc.pixels() {
        return Err(Error::shape(
            "unproject_labels",
            format!("{} predictions for {} pixels", pixel_pred.len(), opc.pixels()),
        ));
    }
    Ok(LabelMask::new(
        opc.point_pixel
            .iter()
            .map(|&p| if p == NONE { Class::Valid } else { pixel_pred[p as usize] })
            .collect(),
    ))
}
