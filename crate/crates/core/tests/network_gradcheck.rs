//! Finite-difference checks of the network layers and of the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdenoise::autodiff::{check_gradients, GradCheckConfig, Graph, Mode, RunningStats, Var};
use stdenoise::knn::{knn_spatial, knn_temporal, KnnConfig};
use stdenoise::loss::total_loss_node;
use stdenoise::network::{
    front_conv, gather_spatial, gather_temporal, mga_fuse, res_block, ModelState, NetworkConfig, ResBlockSpec,
    ResBlockVars,
};
use stdenoise::projection::{project, OrderedPointCloud, SensorConfig};
use stdenoise::scan_io::{Point, PointCloud};
use stdenoise::{Result, Tensor};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
    let w = rand_tensor(&mut rng, g.value(y).shape());
    g.weighted_sum(y, &w)
}

fn check<F>(name: &str, seed: u64, inputs: &[(Tensor<f64>, bool)], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        seed,
        graph_seed: seed,
        ..Default::default()
    };
    let report = check_gradients(
        inputs,
        |g, v| {
            let y = build(g, v)?;
            contract(g, y, seed)
        },
        &cfg,
    )
    .unwrap();
    assert!(
        report.passes(TOL),
        "{name} instance {seed}: rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn small_sensor() -> SensorConfig {
    SensorConfig {
        height: 5,
        width: 9,
        fov_v: 0.5,
        fov_up: 0.25,
    }
}

/// One return per pixel with probability 0.8, placed on the pixel's centre ray.
fn random_scan(rng: &mut ChaCha8Rng, s: &SensorConfig) -> OrderedPointCloud {
    let mut pts = Vec::new();
    for row in 0..s.height {
        for col in 0..s.width {
            if rng.gen_bool(0.8) {
                let r = rng.gen_range(2.0..30.0);
                let d = s.ray(col, row);
                pts.push(Point::new((d[0] * r) as f32, (d[1] * r) as f32, (d[2] * r) as f32, rng.gen()));
            }
        }
    }
    project(&PointCloud::new(pts, 0), s)
}

const KNN: KnnConfig = KnnConfig {
    k: 3,
    xi_rows: 1,
    xi_cols: 2,
};

#[test]
fn spatial_knn_conv() {
    let s = small_sensor();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opc = random_scan(&mut rng, &s);
        let nim = knn_spatial(&opc, &KNN).unwrap();
        let feats: Tensor<f64> = gather_spatial(&opc, &nim, &[0, 1, 2, 3], 0.1).unwrap();
        let fin = feats.shape()[0];
        let x = feats.reshape(&[1, fin, s.height, s.width]).unwrap();
        let cout = rng.gen_range(2..5);
        let inputs = vec![
            (x, true),
            (rand_tensor(&mut rng, &[cout, fin, 1, 1]), true),
            (rand_tensor(&mut rng, &[cout]), true),
        ];
        check("spatial kNN conv", seed, &inputs, |g, v| front_conv(g, v[0], v[1], v[2]));
    }
}

#[test]
fn temporal_knn_conv() {
    let s = small_sensor();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cur = random_scan(&mut rng, &s);
        let prev = random_scan(&mut rng, &s);
        let nim = knn_temporal(&cur, &prev, &KNN).unwrap();
        let feats: Tensor<f64> = gather_temporal(&cur, &prev, &nim, 0.1).unwrap();
        let fin = feats.shape()[0];
        let x = feats.reshape(&[1, fin, s.height, s.width]).unwrap();
        let cout = rng.gen_range(2..5);
        let inputs = vec![
            (x, true),
            (rand_tensor(&mut rng, &[cout, fin, 1, 1]), true),
            (rand_tensor(&mut rng, &[cout]), true),
        ];
        check("temporal kNN conv", seed, &inputs, |g, v| front_conv(g, v[0], v[1], v[2]));
    }
}

#[test]
fn motion_guided_attention() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(2..6), rng.gen_range(2..6));
        let inputs = vec![
            (rand_tensor(&mut rng, &[n, c, h, w]), true),
            (rand_tensor(&mut rng, &[n, c, h, w]), true),
            (rand_tensor(&mut rng, &[c, c, 1, 1]), true),
            (rand_tensor(&mut rng, &[c]), true),
        ];
        check("MGA", seed, &inputs, |g, v| mga_fuse(g, v[0], v[1], v[2], v[3]));
    }
}

#[test]
fn residual_block_with_pooling() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, cin, cout) = (2, rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (4, 6);
        let mut inputs = vec![(rand_tensor(&mut rng, &[n, cin, h, w]), true)];
        for k in [1, 3, 3] {
            inputs.push((rand_tensor(&mut rng, &[cout, cin, k, k]), true));
            inputs.push((Tensor::from_fn(&[cout], |_| rng.gen_range(0.5..1.5)), true));
            inputs.push((rand_tensor(&mut rng, &[cout]), true));
        }
        inputs.push((rand_tensor(&mut rng, &[cout, 3 * cout, 1, 1]), true));
        inputs.push((rand_tensor(&mut rng, &[cout]), true));
        inputs.push((rand_tensor(&mut rng, &[cout, cin, 1, 1]), true));
        inputs.push((rand_tensor(&mut rng, &[cout]), true));
        let pool = if seed % 2 == 0 { 2 } else { 1 };
        check("residual block", seed, &inputs, |g, v| {
            let vars = ResBlockVars {
                paths: [(v[1], v[2], v[3]), (v[4], v[5], v[6]), (v[7], v[8], v[9])],
                reduce_w: v[10],
                reduce_b: v[11],
                skip_w: v[12],
                skip_b: v[13],
            };
            let mut rs = [0; 3].map(|_| RunningStats::new(cout));
            let spec = ResBlockSpec {
                dropout: 0.3,
                pool,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            };
            res_block(g, v[0], &vars, &mut rs, spec)
        });
    }
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        knn: KNN,
        base_width: 8,
        encoder_width: 4,
        middle_width: 8,
        decoder_width: 4,
        ..Default::default()
    }
}

/// Loss of the whole network on a fixed batch, built from `state`.
fn network_loss(
    state: &ModelState<f64>,
    batch: &[stdenoise::network::FrameInput<f64>],
    targets: &[Option<usize>],
    seed: u64,
) -> (f64, Vec<(String, Tensor<f64>)>) {
    let mut g = Graph::new(Mode::Train, seed);
    let refs: Vec<_> = batch.iter().collect();
    let fwd = state.forward(&mut g, &refs).unwrap();
    let (loss, parts) = total_loss_node(&mut g, fwd.probs, targets).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let named = fwd
        .params
        .iter()
        .map(|(n, v)| (n.clone(), grads.take(*v).expect("parameter gradient")))
        .collect();
    (parts.total(), named)
}

#[test]
fn end_to_end_network_spot_checks() {
    let s = SensorConfig {
        height: 4,
        width: 8,
        fov_v: 0.5,
        fov_up: 0.25,
    };
    for (variant, (front, temporal)) in [
        (stdenoise::network::FrontEnd::Knn, true),
        (stdenoise::network::FrontEnd::Conv2d, false),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + variant as u64);
        let cfg = NetworkConfig {
            front_end: front,
            temporal,
            ..tiny_config()
        };
        let mut state = ModelState::<f64>::new(cfg.clone(), 9).unwrap();
        // zero biases on zero (empty-pixel) features sit exactly on the ReLU kink
        for (name, t) in state.params.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".beta") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let batch: Vec<_> = (0..2)
            .map(|_| {
                let cur = random_scan(&mut rng, &s);
                let prev = random_scan(&mut rng, &s);
                stdenoise::network::prepare_input::<f64>(&cur, &prev, &cfg).unwrap()
            })
            .collect();
        let targets: Vec<Option<usize>> = batch
            .iter()
            .flat_map(|b| b.valid.clone())
            .map(|v| v.then(|| rng.gen_range(0..2)))
            .collect();
        let (_, grads) = network_loss(&state, &batch, &targets, 5);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for (name, grad) in &grads {
            let n = grad.numel();
            let picks: Vec<usize> = (0..5.min(n)).map(|_| rng.gen_range(0..n)).collect();
            for i in picks {
                let mut plus = state.clone();
                plus.params.get_mut(name).unwrap().data_mut()[i] += eps;
                let mut minus = state.clone();
                minus.params.get_mut(name).unwrap().data_mut()[i] -= eps;
                let fd = (network_loss(&plus, &batch, &targets, 5).0 - network_loss(&minus, &batch, &targets, 5).0)
                    / (2.0 * eps);
                let a = grad.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < TOL, "{name}[{i}]: analytic {a} numeric {fd}");
                worst = worst.max(rel);
            }
        }
        assert!(grads.len() >= 20, "only {} parameter tensors", grads.len());
        assert!(worst < TOL);
    }
}
