//! Classical outlier-removal filters: ROR, SOR, DSOR, DROR and LIOR.
//!
//! Neighbour queries run brute force on small clouds and through a uniform
//! grid hash on larger ones. Both paths compare the same squared distances,
//! so their decisions agree exactly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_io::{Class, LabelMask, PointCloud};

/// Clouds with fewer points use brute-force search under [`Search::Auto`].
pub const BRUTE_FORCE_LIMIT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Auto,
    Brute,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RorParams {
    pub radius: f64,
}

impl Default for RorParams {
    fn default() -> Self {
        Self { radius: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SorParams {
    pub k: usize,
    pub mult: f64,
}

impl Default for SorParams {
    fn default() -> Self {
        Self { k: 5, mult: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsorParams {
    pub k: usize,
    pub mult: f64,
    pub range_scale: f64,
}

impl Default for DsorParams {
    fn default() -> Self {
        Self {
            k: 5,
            mult: 0.01,
            range_scale: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrorParams {
    /// Horizontal angular resolution, radians.
    pub alpha_res: f64,
    pub beta: f64,
    pub r_min: f64,
    pub k_min: usize,
}

impl Default for DrorParams {
    fn default() -> Self {
        Self {
            alpha_res: 2.0 * std::f64::consts::PI / 512.0,
            beta: 3.0,
            r_min: 0.1,
            k_min: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiorParams {
    /// Intensity threshold at zero range.
    pub a: f64,
    /// Range scale of the threshold decay, metres.
    pub b: f64,
    pub r_ror: f64,
}

impl Default for LiorParams {
    fn default() -> Self {
        Self {
            a: 0.05,
            b: 30.0,
            r_ror: 0.5,
        }
    }
}

impl LiorParams {
    pub fn threshold(&self, range: f64) -> f64 {
        self.a * (-range / self.b).exp()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub ror: RorParams,
    pub sor: SorParams,
    pub dsor: DsorParams,
    pub dror: DrorParams,
    pub lior: LiorParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    Ror,
    Sor,
    Dsor,
    Dror,
    Lior,
}

impl Filter {
    pub const ALL: [Filter; 5] = [Filter::Ror, Filter::Sor, Filter::Dsor, Filter::Dror, Filter::Lior];

    pub fn name(self) -> &'static str {
        match self {
            Filter::Ror => "ror",
            Filter::Sor => "sor",
            Filter::Dsor => "dsor",
            Filter::Dror => "dror",
            Filter::Lior => "lior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s.to_ascii_lowercase())
    }

    pub fn apply(self, cloud: &PointCloud, params: &FilterParams, search: Search) -> Result<LabelMask> {
        match self {
            Filter::Ror => ror_with(cloud, params.ror.radius, search),
            Filter::Sor => sor_with(cloud, params.sor.k, params.sor.mult, search),
            Filter::Dsor => dsor_with(cloud, &params.dsor, search),
            Filter::Dror => dror_with(cloud, &params.dror, search),
            Filter::Lior => lior_with(cloud, &params.lior, search),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be positive, got {v}")))
    }
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn mask_from(noise: impl Iterator<Item = bool>) -> LabelMask {
    LabelMask::new(noise.map(|n| if n { Class::Noise } else { Class::Valid }).collect())
}

struct Grid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl Grid {
    fn new(pts: &[[f64; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in pts.iter().enumerate() {
            let key = Self::key_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Self { cell, cells, lo, hi }
    }

    fn key_of(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / cell).floor() as i64)
    }

    /// Visits points in cells at Chebyshev cell distance exactly `s` from `c`.
    fn shell(&self, c: [i64; 3], s: i64, mut f: impl FnMut(u32)) {
        for x in c[0] - s..=c[0] + s {
            for y in c[1] - s..=c[1] + s {
                let on_face = (x - c[0]).abs() == s || (y - c[1]).abs() == s;
                let zs: Vec<i64> = if on_face || s == 0 {
                    (c[2] - s..=c[2] + s).collect()
                } else {
                    vec![c[2] - s, c[2] + s]
                };
                for z in zs {
                    if let Some(v) = self.cells.get(&[x, y, z]) {
                        v.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// Largest shell index that can still contain points.
    fn max_shell(&self, c: [i64; 3]) -> i64 {
        (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Neighbour queries over one cloud.
struct Index {
    pts: Vec<[f64; 3]>,
    grid: Option<Grid>,
}

impl Index {
    fn new(cloud: &PointCloud, search: Search, cell: f64) -> Self {
        let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.xyz()).collect();
        let use_grid = match search {
            Search::Brute => false,
            Search::Grid => true,
            Search::Auto => pts.len() >= BRUTE_FORCE_LIMIT,
        };
        let grid = use_grid.then(|| Grid::new(&pts, cell));
        Self { pts, grid }
    }

    /// Number of other points within distance `r`, counting stops at `limit`.
    fn count_within(&self, i: usize, r: f64, limit: usize) -> usize {
        let p = self.pts[i];
        let r2 = r * r;
        let mut n = 0;
        match &self.grid {
            None => {
                for (j, q) in self.pts.iter().enumerate() {
                    if j != i && sq_dist(p, *q) <= r2 {
                        n += 1;
                        if n >= limit {
                            break;
                        }
                    }
                }
            }
            Some(g) => {
                let c = Grid::key_of(&p, g.cell);
                let reach = (r / g.cell).ceil() as i64 + 1;
                'outer: for s in 0..=reach.min(g.max_shell(c)) {
                    let mut hits = Vec::new();
                    g.shell(c, s, |j| {
                        if j as usize != i && sq_dist(p, self.pts[j as usize]) <= r2 {
                            hits.push(j);
                        }
                    });
                    for _ in hits {
                        n += 1;
                        if n >= limit {
                            break 'outer;
                        }
                    }
                }
            }
        }
        n
    }

    /// Squared distances to the `k` nearest other points, ascending.
    fn knn_sq(&self, i: usize, k: usize) -> Vec<f64> {
        let p = self.pts[i];
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let offer = |best: &mut Vec<f64>, d: f64| {
            if best.len() < k || d < best[k - 1] {
                let at = best.partition_point(|&b| b <= d);
                best.insert(at, d);
                best.truncate(k);
            }
        };
        match &self.grid {
            None => {
                for (j, q) in self.pts.iter().enumerate() {
                    if j != i {
                        offer(&mut best, sq_dist(p, *q));
                    }
                }
            }
            Some(g) => {
                let c = Grid::key_of(&p, g.cell);
                let last = g.max_shell(c);
                for s in 0..=last {
                    g.shell(c, s, |j| {
                        if j as usize != i {
                            offer(&mut best, sq_dist(p, self.pts[j as usize]));
                        }
                    });
                    // points in farther shells are at least s * cell away
                    let bound = s as f64 * g.cell;
                    if best.len() == k && best[k - 1] <= bound * bound {
                        break;
                    }
                }
            }
        }
        best
    }
}

pub fn ror(cloud: &PointCloud, r: f64) -> Result<LabelMask> {
    ror_with(cloud, r, Search::Auto)
}

/// Noise iff no other point lies within distance `r`.
pub fn ror_with(cloud: &PointCloud, r: f64, search: Search) -> Result<LabelMask> {
    positive("radius", r)?;
    let idx = Index::new(cloud, search, r);
    Ok(mask_from((0..cloud.len()).map(|i| idx.count_within(i, r, 1) == 0)))
}

/// Mean distance of each point to its `k` nearest neighbours.
fn mean_knn_distances(cloud: &PointCloud, k: usize, search: Search) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    if cloud.len() <= k {
        return Err(Error::TooFewPoints { k, n: cloud.len() });
    }
    let idx = Index::new(cloud, search, 0.5);
    Ok((0..cloud.len())
        .map(|i| idx.knn_sq(i, k).iter().map(|d| d.sqrt()).sum::<f64>() / k as f64)
        .collect())
}

/// Global mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn sor(cloud: &PointCloud, k: usize, mult: f64) -> Result<LabelMask> {
    sor_with(cloud, k, mult, Search::Auto)
}

/// Noise iff the mean kNN distance exceeds `mean + mult * std` over the cloud.
pub fn sor_with(cloud: &PointCloud, k: usize, mult: f64, search: Search) -> Result<LabelMask> {
    let d = mean_knn_distances(cloud, k, search)?;
    let (mu, sigma) = mean_std(&d);
    let thr = mu + mult * sigma;
    Ok(mask_from(d.iter().map(|&x| x > thr)))
}

pub fn dsor(cloud: &PointCloud, params: &DsorParams) -> Result<LabelMask> {
    dsor_with(cloud, params, Search::Auto)
}

/// SOR with the threshold scaled by `range_scale * range(p)`.
pub fn dsor_with(cloud: &PointCloud, params: &DsorParams, search: Search) -> Result<LabelMask> {
    positive("range_scale", params.range_scale)?;
    let d = mean_knn_distances(cloud, params.k, search)?;
    let (mu, sigma) = mean_std(&d);
    let base = mu + params.mult * sigma;
    Ok(mask_from(
        d.iter()
            .zip(&cloud.points)
            .map(|(&x, p)| x > base * params.range_scale * p.range()),
    ))
}

pub fn dror(cloud: &PointCloud, params: &DrorParams) -> Result<LabelMask> {
    dror_with(cloud, params, Search::Auto)
}

/// Noise iff fewer than `k_min` points lie within
/// `max(r_min, beta * range * alpha_res)`.
pub fn dror_with(cloud: &PointCloud, params: &DrorParams, search: Search) -> Result<LabelMask> {
    positive("alpha_res", params.alpha_res)?;
    positive("beta", params.beta)?;
    positive("r_min", params.r_min)?;
    if params.k_min == 0 {
        return Err(Error::InvalidParams("k_min must be at least 1".into()));
    }
    let idx = Index::new(cloud, search, params.r_min.max(0.25));
    Ok(mask_from(cloud.points.iter().enumerate().map(|(i, p)| {
        let sr = params.r_min.max(params.beta * p.range() * params.alpha_res);
        idx.count_within(i, sr, params.k_min) < params.k_min
    })))
}

pub fn lior(cloud: &PointCloud, params: &LiorParams) -> Result<LabelMask> {
    lior_with(cloud, params, Search::Auto)
}

/// Low-intensity points (below `a * exp(-range / b)`) are noise unless they
/// have a neighbour within `r_ror`.
pub fn lior_with(cloud: &PointCloud, params: &LiorParams, search: Search) -> Result<LabelMask> {
    positive("a", params.a)?;
    positive("b", params.b)?;
    positive("r_ror", params.r_ror)?;
    let idx = Index::new(cloud, search, params.r_ror);
    Ok(mask_from(cloud.points.iter().enumerate().map(|(i, p)| {
        (p.intensity as f64) < params.threshold(p.range()) && idx.count_within(i, params.r_ror, 1) == 0
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan_io::Point;

    fn pc(pts: &[(f32, f32, f32)]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.5)).collect(), 0)
    }

    fn noise(m: &LabelMask) -> Vec<bool> {
        m.labels.iter().map(|c| c.is_noise()).collect()
    }

    #[test]
    fn ror_examples() {
        let c = pc(&[(0.0, 0.0, 1.0), (0.5, 0.0, 1.0)]);
        assert_eq!(noise(&ror(&c, 1.0).unwrap()), [false, false]);
        let c = pc(&[(0.0, 0.0, 1.0), (0.5, 0.0, 1.0), (9.0, 9.0, 1.0)]);
        assert_eq!(noise(&ror(&c, 1.0).unwrap()), [false, false, true]);
        assert!(ror(&c, 0.0).is_err());
    }

    #[test]
    fn sor_grid_with_outlier() {
        let mut pts: Vec<(f32, f32, f32)> = (0..100).map(|i| ((i % 10) as f32, (i / 10) as f32, 5.0)).collect();
        assert!(noise(&sor(&pc(&pts), 2, 1.0).unwrap()).iter().all(|&n| !n));
        pts.push((50.0, 50.0, 5.0));
        let m = noise(&sor(&pc(&pts), 2, 1.0).unwrap());
        assert!(m[100]);
        assert_eq!(m.iter().filter(|&&n| n).count(), 1);
    }

    #[test]
    fn sor_needs_more_than_k_points() {
        assert!(matches!(sor(&pc(&[(1.0, 0.0, 0.0)]), 1, 1.0), Err(Error::TooFewPoints { k: 1, n: 1 })));
    }

    #[test]
    fn dror_isolated_far_point() {
        let mut pts: Vec<(f32, f32, f32)> = (0..20).map(|i| (5.0, i as f32 * 0.02, 0.0)).collect();
        pts.push((60.0, 30.0, 0.0));
        let m = noise(&dror(&pc(&pts), &DrorParams::default()).unwrap());
        assert!(m[20]);
        assert!(m[..20].iter().all(|&n| !n));
    }

    #[test]
    fn lior_rules() {
        let bright = PointCloud::new(vec![Point::new(1.0, 0.0, 0.0, 0.9), Point::new(30.0, 0.0, 0.0, 0.9)], 0);
        assert_eq!(lior(&bright, &LiorParams::default()).unwrap().noise_count(), 0);
        let dim = PointCloud::new(
            vec![
                Point::new(2.0, 0.0, 0.0, 0.0),
                Point::new(2.1, 0.0, 0.0, 0.0),
                Point::new(9.0, 5.0, 0.0, 0.0),
            ],
            0,
        );
        assert_eq!(noise(&lior(&dim, &LiorParams::default()).unwrap()), [false, false, true]);
    }

    #[test]
    fn grid_matches_brute_on_scattered_points() {
        let pts: Vec<(f32, f32, f32)> = (0..700)
            .map(|i| {
                let f = i as f32;
                ((f * 0.37).sin() * 12.0, (f * 0.91).cos() * 9.0, (f * 0.13).sin() * 2.0)
            })
            .collect();
        let c = pc(&pts);
        let params = FilterParams::default();
        for f in Filter::ALL {
            assert_eq!(
                f.apply(&c, &params, Search::Brute).unwrap(),
                f.apply(&c, &params, Search::Grid).unwrap(),
                "{}",
                f.name()
            );
        }
    }
}
