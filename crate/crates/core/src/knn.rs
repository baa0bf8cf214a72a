//! Windowed k-nearest-neighbour search on the range channel.
//!
//! Candidates for an anchor pixel are the valid pixels of a
//! `(2 xi_rows + 1) x (2 xi_cols + 1)` window (clipped at the image border,
//! no azimuth wrap-around). They are ranked by absolute range difference to
//! the anchor; exact ties go first to the pixel at the anchor position, then
//! to the lower row-major index. Deficient windows are padded with the
//! anchor position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{OrderedPointCloud, NONE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    /// Half window height in pixels.
    pub xi_rows: usize,
    /// Half window width in pixels.
    pub xi_cols: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            xi_rows: 2,
            xi_cols: 4,
        }
    }
}

impl KnnConfig {
    pub fn window_size(&self) -> usize {
        (2 * self.xi_rows + 1) * (2 * self.xi_cols + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.window_size() {
            return Err(Error::InvalidParams(format!(
                "k={} must lie in [1, {}] for window {}x{}",
                self.k,
                self.window_size(),
                2 * self.xi_rows + 1,
                2 * self.xi_cols + 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndexMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// `H x W x k` flat pixel indices; [`NONE`] where the anchor is invalid.
    indices: Vec<u32>,
    source_valid: Vec<bool>,
}

impl NeighborIndexMap {
    pub fn neighbors(&self, pixel: usize) -> &[u32] {
        &self.indices[pixel * self.k..(pixel + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn source_valid(&self) -> &[bool] {
        &self.source_valid
    }

    /// `(row, col)` of a flat pixel index.
    pub fn coord(&self, index: u32) -> (usize, usize) {
        (index as usize / self.width, index as usize % self.width)
    }
}

pub fn knn_spatial(opc: &OrderedPointCloud, cfg: &KnnConfig) -> Result<NeighborIndexMap> {
    cfg.validate()?;
    Ok(search(opc, opc, cfg))
}

/// Neighbours of each anchor of `opc_t` drawn from the same window of `opc_prev`.
pub fn knn_temporal(
    opc_t: &OrderedPointCloud,
    opc_prev: &OrderedPointCloud,
    cfg: &KnnConfig,
) -> Result<NeighborIndexMap> {
    cfg.validate()?;
    if opc_t.height != opc_prev.height || opc_t.width != opc_prev.width {
        return Err(Error::shape(
            "knn_temporal",
            format!(
                "{}x{} vs {}x{}",
                opc_t.height, opc_t.width, opc_prev.height, opc_prev.width
            ),
        ));
    }
    Ok(search(opc_t, opc_prev, cfg))
}

#[derive(Clone, Copy)]
struct Candidate {
    diff: f64,
    off_anchor: bool,
    index: u32,
}

impl Candidate {
    #[inline]
    fn before(&self, other: &Candidate) -> bool {
        match self.diff.total_cmp(&other.diff) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => (self.off_anchor, self.index) < (other.off_anchor, other.index),
        }
    }
}

fn search(reference: &OrderedPointCloud, candidates: &OrderedPointCloud, cfg: &KnnConfig) -> NeighborIndexMap {
    let (h, w, k) = (reference.height, reference.width, cfg.k);
    let mut indices = vec![NONE; h * w * k];
    let mut source_valid = vec![false; h * w];
    let ranges = candidates.ranges();
    let valid = candidates.valid();
    let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);

    for row in 0..h {
        let r0 = row.saturating_sub(cfg.xi_rows);
        let r1 = (row + cfg.xi_rows).min(h - 1);
        for col in 0..w {
            let anchor = row * w + col;
            if !reference.is_valid(anchor) {
                continue;
            }
            source_valid[anchor] = true;
            let a_range = reference.range_at(anchor);
            let c0 = col.saturating_sub(cfg.xi_cols);
            let c1 = (col + cfg.xi_cols).min(w - 1);
            best.clear();
            for qr in r0..=r1 {
                for qc in c0..=c1 {
                    let q = qr * w + qc;
                    if !valid[q] {
                        continue;
                    }
                    let cand = Candidate {
                        diff: (ranges[q] - a_range).abs(),
                        off_anchor: q != anchor,
                        index: q as u32,
                    };
                    if best.len() == k && !cand.before(&best[k - 1]) {
                        continue;
                    }
                    let pos = best.iter().position(|b| cand.before(b)).unwrap_or(best.len());
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            let out = &mut indices[anchor * k..(anchor + 1) * k];
            for (slot, o) in out.iter_mut().enumerate() {
                *o = best.get(slot).map_or(anchor as u32, |c| c.index);
            }
        }
    }

    NeighborIndexMap {
        height: h,
        width: w,
        k,
        indices,
        source_valid,
    }
}

/// Anchor-minus-neighbour displacement `d`, shape `k x 3 x H x W`.
///
/// Entry `(j, :, p)` is `xyz_t(p) - xyz_prev(nim[p][j])`; zero where the anchor is invalid.
pub fn motion_vectors(
    opc_t: &OrderedPointCloud,
    opc_prev: &OrderedPointCloud,
    nim: &NeighborIndexMap,
) -> Result<Tensor<f64>> {
    let (h, w, k) = (nim.height, nim.width, nim.k);
    if opc_t.height != h || opc_t.width != w || opc_prev.height != h || opc_prev.width != w {
        return Err(Error::shape("motion_vectors", "neighbour map does not match clouds"));
    }
    let n = h * w;
    let mut d = vec![0.0; k * 3 * n];
    for p in 0..n {
        if !nim.source_valid[p] {
            continue;
        }
        let a = opc_t.xyz_at(p);
        for (j, &q) in nim.neighbors(p).iter().enumerate() {
            let b = opc_prev.xyz_at(q as usize);
            for c in 0..3 {
                d[(j * 3 + c) * n + p] = a[c] - b[c];
            }
        }
    }
    Tensor::from_vec(&[k, 3, h, w], d)
}

/// Cartesian `(x, y, z)` to `(r, theta, phi)` along axis 1 of a `k x 3 x H x W` tensor.
///
/// `theta = acos(z / r)`, `phi = atan2(y, x)` with `atan2(0, 0) = 0`;
/// vectors shorter than 1e-9 map to zero.
pub fn to_spherical<S: Scalar>(d: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = d.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("to_spherical", format!("expected k x 3 x H x W, got {shape:?}")));
    }
    let n = shape[2] * shape[3];
    let src = d.data();
    let mut out = vec![S::zero(); src.len()];
    let tiny = S::lit(1e-9);
    for j in 0..shape[0] {
        let base = j * 3 * n;
        for p in 0..n {
            let (x, y, z) = (src[base + p], src[base + n + p], src[base + 2 * n + p]);
            let r = (x * x + y * y + z * z).sqrt();
            if r < tiny {
                continue;
            }
            let cos_theta = (z / r).max(-S::one()).min(S::one());
            out[base + p] = r;
            out[base + n + p] = cos_theta.acos();
            out[base + 2 * n + p] = if x == S::zero() && y == S::zero() { S::zero() } else { y.atan2(x) };
        }
    }
    Tensor::from_vec(shape, out)
}
