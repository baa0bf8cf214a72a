//! Independent reference implementations used by the integration and
//! acceptance tests. Deliberately naive: full sorts, dense loops, no reuse of
//! library internals.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stdenoise::scan_io::{Point, PointCloud};

/// Scalar row mapping of the projection, clamped into the image.
pub fn eq1_pixel(x: f64, y: f64, z: f64, w: usize, h: usize, fov_v: f64, fov_up: f64) -> (usize, usize) {
    let r = (x * x + y * y + z * z).sqrt();
    let pi = std::f64::consts::PI;
    let u = 0.5 * (1.0 - y.atan2(x) / pi) * w as f64;
    let v = (1.0 - ((z / r).asin() + fov_up) / fov_v) * h as f64;
    let u = u.floor();
    let v = v.floor();
    let u = if u < 0.0 { 0 } else if u > (w - 1) as f64 { w - 1 } else { u as usize };
    let v = if v < 0.0 { 0 } else if v > (h - 1) as f64 { h - 1 } else { v as usize };
    (u, v)
}

/// Brute-force windowed kNN over flat range / validity arrays.
pub fn knn_window(
    anchor_range: &[f64],
    anchor_valid: &[bool],
    cand_range: &[f64],
    cand_valid: &[bool],
    h: usize,
    w: usize,
    k: usize,
    xi_rows: usize,
    xi_cols: usize,
) -> Vec<Option<Vec<u32>>> {
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h as i64 {
        for col in 0..w as i64 {
            let a = (row * w as i64 + col) as usize;
            if !anchor_valid[a] {
                out.push(None);
                continue;
            }
            let mut cands: Vec<(f64, bool, usize)> = Vec::new();
            for dr in -(xi_rows as i64)..=xi_rows as i64 {
                for dc in -(xi_cols as i64)..=xi_cols as i64 {
                    let (r, c) = (row + dr, col + dc);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let q = (r * w as i64 + c) as usize;
                    if cand_valid[q] {
                        cands.push(((cand_range[q] - anchor_range[a]).abs(), q != a, q));
                    }
                }
            }
            cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut ids: Vec<u32> = cands.iter().take(k).map(|c| c.2 as u32).collect();
            while ids.len() < k {
                ids.push(a as u32);
            }
            out.push(Some(ids));
        }
    }
    out
}

/// `1 - |pred & gt| / |pred | gt|` for one class over hard labels.
pub fn jaccard_loss(pred: &[usize], gt: &[usize], class: usize) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p == class && **g == class).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p == class || **g == class).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Direct 7-loop convolution, `N x Cin x H x W` with `Cout x Cin x k x k` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = h + 2 * pad - dil * (k - 1);
    let wo = w + 2 * pad - dil * (k - 1);
    let mut y = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let si = (i + ki * dil) as i64 - pad as i64;
                                let sj = (j + kj * dil) as i64 - pad as i64;
                                if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                                    continue;
                                }
                                acc += wt[((o * cin + c) * k + ki) * k + kj]
                                    * x[((b * cin + c) * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    y[((b * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (y, ho, wo)
}

fn sq(a: &Point, b: &Point) -> f64 {
    let (ax, ay, az) = (a.x as f64, a.y as f64, a.z as f64);
    let (bx, by, bz) = (b.x as f64, b.y as f64, b.z as f64);
    (ax - bx) * (ax - bx) + (ay - by) * (ay - by) + (az - bz) * (az - bz)
}

fn range(p: &Point) -> f64 {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    (x * x + y * y + z * z).sqrt()
}

fn count_within(c: &PointCloud, i: usize, r: f64) -> usize {
    (0..c.len()).filter(|&j| j != i && sq(&c.points[i], &c.points[j]) <= r * r).count()
}

pub fn ror(c: &PointCloud, r: f64) -> Vec<bool> {
    (0..c.len()).map(|i| count_within(c, i, r) == 0).collect()
}

fn mean_knn(c: &PointCloud, k: usize) -> Vec<f64> {
    (0..c.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..c.len())
                .filter(|&j| j != i)
                .map(|j| sq(&c.points[i], &c.points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().map(|x| x.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

fn stats(v: &[f64]) -> (f64, f64) {
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
    (mu, var.sqrt())
}

pub fn sor(c: &PointCloud, k: usize, mult: f64) -> Vec<bool> {
    let d = mean_knn(c, k);
    let (mu, s) = stats(&d);
    d.iter().map(|&x| x > mu + mult * s).collect()
}

pub fn dsor(c: &PointCloud, k: usize, mult: f64, range_scale: f64) -> Vec<bool> {
    let d = mean_knn(c, k);
    let (mu, s) = stats(&d);
    d.iter()
        .zip(&c.points)
        .map(|(&x, p)| x > (mu + mult * s) * range_scale * range(p))
        .collect()
}

pub fn dror(c: &PointCloud, alpha: f64, beta: f64, r_min: f64, k_min: usize) -> Vec<bool> {
    (0..c.len())
        .map(|i| {
            let sr = (beta * range(&c.points[i]) * alpha).max(r_min);
            count_within(c, i, sr) < k_min
        })
        .collect()
}

pub fn lior(c: &PointCloud, a: f64, b: f64, r_ror: f64) -> Vec<bool> {
    (0..c.len())
        .map(|i| {
            let p = &c.points[i];
            (p.intensity as f64) < a * (-range(p) / b).exp() && count_within(c, i, r_ror) == 0
        })
        .collect()
}

/// Clustered cloud with scattered outliers and mixed intensities.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let clusters: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let pts = (0..n)
        .map(|_| {
            let (x, y, z) = if rng.gen_bool(0.8) {
                let c = clusters[rng.gen_range(0..clusters.len())];
                let s = rng.gen_range(0.05..0.6);
                (
                    c[0] + rng.gen_range(-s..s),
                    c[1] + rng.gen_range(-s..s),
                    c[2] + rng.gen_range(-s..s),
                )
            } else {
                (rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-3.0..3.0))
            };
            Point::new(x as f32, y as f32, z as f32, rng.gen_range(0.0..0.2))
        })
        .collect();
    PointCloud::new(pts, 0)
}
