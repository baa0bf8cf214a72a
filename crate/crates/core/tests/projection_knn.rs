mod oracles;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdenoise::knn::{knn_spatial, knn_temporal, motion_vectors, to_spherical, KnnConfig};
use stdenoise::projection::{pixel_of, project, unproject_labels, OrderedPointCloud, SensorConfig};
use stdenoise::scan_io::{Class, Point, PointCloud};

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-10.0..6.0)];
        if p.iter().map(|v| v * v).sum::<f64>() > 1e-6 {
            return p;
        }
    }
}

#[test]
fn pixel_of_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [SensorConfig::toy(), SensorConfig::hdl64(), SensorConfig::vlp32()] {
        for _ in 0..2000 {
            let p = random_point(&mut rng);
            let expected = oracles::eq1_pixel(p[0], p[1], p[2], cfg.width, cfg.height, cfg.fov_v, cfg.fov_up);
            assert_eq!(pixel_of(p, &cfg).unwrap(), expected, "{p:?}");
        }
    }
}

/// Scan with returns along pixel-centre rays, ranges drawn from a few levels
/// so that equal range differences occur.
fn ray_scan(rng: &mut ChaCha8Rng, cfg: &SensorConfig, fill: f64) -> PointCloud {
    let mut pts = Vec::new();
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            if rng.gen_bool(fill) {
                let r = 2.0 + rng.gen_range(0..6) as f64 * 0.5;
                let d = cfg.ray(col, row);
                pts.push(Point::new((d[0] * r) as f32, (d[1] * r) as f32, (d[2] * r) as f32, 0.1));
            }
        }
    }
    PointCloud::new(pts, 0)
}

fn check_knn(cur: &OrderedPointCloud, prev: &OrderedPointCloud, knn: &KnnConfig, temporal: bool) {
    let nim = if temporal {
        knn_temporal(cur, prev, knn).unwrap()
    } else {
        knn_spatial(cur, knn).unwrap()
    };
    let cand = if temporal { prev } else { cur };
    let expected = oracles::knn_window(
        cur.ranges(),
        cur.valid(),
        cand.ranges(),
        cand.valid(),
        cur.height,
        cur.width,
        knn.k,
        knn.xi_rows,
        knn.xi_cols,
    );
    for (p, e) in expected.iter().enumerate() {
        match e {
            Some(ids) => assert_eq!(nim.neighbors(p), ids.as_slice(), "pixel {p}"),
            None => assert!(!nim.source_valid()[p]),
        }
    }
}

#[test]
fn knn_matches_brute_force_window_sort() {
    let cfg = SensorConfig {
        height: 16,
        width: 64,
        ..SensorConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        let cur = project(&ray_scan(&mut rng, &cfg, 0.3 + 0.06 * i as f64), &cfg);
        let prev = project(&ray_scan(&mut rng, &cfg, 0.7), &cfg);
        for knn in [
            KnnConfig::default(),
            KnnConfig {
                k: 9,
                xi_rows: 1,
                xi_cols: 1,
            },
            KnnConfig {
                k: 1,
                xi_rows: 0,
                xi_cols: 3,
            },
        ] {
            check_knn(&cur, &prev, &knn, false);
            check_knn(&cur, &prev, &knn, true);
        }
    }
}

#[test]
fn spatial_knn_starts_at_the_anchor() {
    let cfg = SensorConfig {
        height: 8,
        width: 32,
        ..SensorConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opc = project(&ray_scan(&mut rng, &cfg, 0.6), &cfg);
    let nim = knn_spatial(&opc, &KnnConfig::default()).unwrap();
    for p in 0..opc.pixels() {
        if opc.is_valid(p) {
            assert_eq!(nim.neighbors(p)[0] as usize, p);
        }
    }
}

#[test]
fn identical_frames_give_zero_motion() {
    let cfg = SensorConfig {
        height: 8,
        width: 32,
        ..SensorConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let opc = project(&ray_scan(&mut rng, &cfg, 0.8), &cfg);
    let nim = knn_temporal(&opc, &opc, &KnnConfig::default()).unwrap();
    let d = motion_vectors(&opc, &opc, &nim).unwrap();
    let n = opc.pixels();
    // first neighbour is the anchor itself
    assert!(d.data()[..3 * n].iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_partitions_points(seed in any::<u64>(), n in 1usize..400) {
        let cfg = SensorConfig { height: 16, width: 64, ..SensorConfig::toy() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                let p = random_point(&mut rng);
                Point::new(p[0] as f32, p[1] as f32, p[2] as f32, 0.5)
            })
            .collect();
        let cloud = PointCloud::new(pts, 0);
        let opc = project(&cloud, &cfg);
        prop_assert_eq!(opc.num_points(), n);
        let mut owned = 0;
        for pix in 0..opc.pixels() {
            let owners = opc.owners(pix);
            owned += owners.len();
            prop_assert_eq!(opc.is_valid(pix), !owners.is_empty());
            if let Some(w) = opc.winner(pix) {
                let r = cloud.points[w].range();
                prop_assert!(owners.iter().all(|&o| cloud.points[o as usize].range() >= r));
                prop_assert!((opc.range_at(pix) - r).abs() <= 1e-5 * r);
                let xyz = opc.xyz_at(pix);
                let rr = (xyz[0] * xyz[0] + xyz[1] * xyz[1] + xyz[2] * xyz[2]).sqrt();
                prop_assert!((rr - opc.range_at(pix)).abs() <= 1e-5 * rr);
            }
        }
        prop_assert_eq!(owned + opc.dropped, n);
        let labels = unproject_labels(&opc, &vec![Class::Noise; opc.pixels()]).unwrap();
        prop_assert_eq!(labels.noise_count(), n - opc.dropped);
    }

    #[test]
    fn knn_neighbours_stay_in_window(seed in any::<u64>(), k in 1usize..8, xr in 0usize..3, xc in 1usize..4) {
        let cfg = SensorConfig { height: 8, width: 24, ..SensorConfig::toy() };
        let knn = KnnConfig { k: k.min((2 * xr + 1) * (2 * xc + 1)), xi_rows: xr, xi_cols: xc };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opc = project(&ray_scan(&mut rng, &cfg, 0.5), &cfg);
        let nim = knn_spatial(&opc, &knn).unwrap();
        for p in 0..opc.pixels() {
            if !opc.is_valid(p) {
                continue;
            }
            let (r, c) = nim.coord(p as u32);
            for &q in nim.neighbors(p) {
                let (qr, qc) = nim.coord(q);
                prop_assert!(qr.abs_diff(r) <= xr && qc.abs_diff(c) <= xc);
                prop_assert!(opc.is_valid(q as usize));
            }
        }
    }

    #[test]
    fn spherical_coordinates_are_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: stdenoise::Tensor<f64> = stdenoise::Tensor::from_fn(&[2, 3, 3, 4], |_| rng.gen_range(-5.0..5.0));
        let s = to_spherical(&d).unwrap();
        let n = 12;
        for j in 0..2 {
            for p in 0..n {
                let (x, y, z) = (d.data()[j * 3 * n + p], d.data()[j * 3 * n + n + p], d.data()[j * 3 * n + 2 * n + p]);
                let (r, th, ph) = (s.data()[j * 3 * n + p], s.data()[j * 3 * n + n + p], s.data()[j * 3 * n + 2 * n + p]);
                prop_assert!((r - (x * x + y * y + z * z).sqrt()).abs() < 1e-12);
                prop_assert!((0.0..=std::f64::consts::PI).contains(&th));
                prop_assert!(ph.abs() <= std::f64::consts::PI);
                prop_assert!((r * th.sin() * ph.cos() - x).abs() < 1e-9);
                prop_assert!((r * th.cos() - z).abs() < 1e-9);
            }
        }
    }
}
