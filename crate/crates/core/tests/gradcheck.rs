use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdenoise::autodiff::{check_gradients, Conv2dSpec, GradCheckConfig, Graph, Mode, RunningStats, Var};
use stdenoise::{Result, Tensor};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts an arbitrary output with fixed random weights so every element
/// of the output contributes a distinct coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = rand_tensor(&mut rng, g.value(y).shape());
    g.weighted_sum(y, &w)
}

fn run<F>(name: &str, mode: Mode, make: impl Fn(&mut ChaCha8Rng) -> Vec<(Tensor<f64>, bool)>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let cfg = GradCheckConfig {
            seed,
            mode,
            graph_seed: seed,
            ..Default::default()
        };
        let report = check_gradients(
            &inputs,
            |g, v| {
                let y = build(g, v)?;
                project(g, y, seed)
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
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(3..7), rng.gen_range(3..7))
}

#[test]
fn elementwise_ops() {
    let make = |rng: &mut ChaCha8Rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        vec![(rand_tensor(rng, &shape), true), (rand_tensor(rng, &shape), true)]
    };
    run("add", Mode::Eval, make, |g, v| g.add(v[0], v[1]));
    run("sub", Mode::Eval, make, |g, v| g.sub(v[0], v[1]));
    run("mul", Mode::Eval, make, |g, v| g.mul(v[0], v[1]));
    run("scale", Mode::Eval, make, |g, v| Ok(g.scale(v[0], -2.5)));
    run("sigmoid", Mode::Eval, make, |g, v| Ok(g.sigmoid(v[0])));
    run("relu", Mode::Eval, make, |g, v| Ok(g.relu(v[0])));
}

#[test]
fn conv2d_all_kernels() {
    for (k, d) in [(1, 1), (3, 1), (3, 2)] {
        let make = move |rng: &mut ChaCha8Rng| {
            let (n, cin, h, w) = dims(rng);
            let cout = rng.gen_range(1..4);
            vec![
                (rand_tensor(rng, &[n, cin, h, w]), true),
                (rand_tensor(rng, &[cout, cin, k, k]), true),
                (rand_tensor(rng, &[cout]), true),
            ]
        };
        run("conv2d", Mode::Eval, make, move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(k, d))
        });
    }
}

#[test]
fn conv2d_without_padding() {
    let make = |rng: &mut ChaCha8Rng| {
        let (n, cin, h, w) = dims(rng);
        vec![
            (rand_tensor(rng, &[n, cin, h, w]), true),
            (rand_tensor(rng, &[2, cin, 3, 2]), true),
        ]
    };
    run("conv2d valid", Mode::Eval, make, |g, v| {
        g.conv2d(v[0], v[1], None, Conv2dSpec { dilation: 1, padding: 0 })
    });
}

#[test]
fn batch_norm_both_modes() {
    let make = |rng: &mut ChaCha8Rng| {
        let (_, c, h, w) = dims(rng);
        let n = rng.gen_range(2..4);
        vec![
            (rand_tensor(rng, &[n, c, h, w]), true),
            (rand_tensor(rng, &[c]), true),
            (rand_tensor(rng, &[c]), true),
        ]
    };
    let bn = |g: &mut Graph<f64>, v: &[Var]| {
        let c = g.value(v[1]).numel();
        let mut rs = RunningStats::new(c);
        rs.var.iter_mut().for_each(|x| *x = 0.7);
        g.batch_norm(v[0], v[1], v[2], &mut rs, 0.1, 1e-5)
    };
    run("batch_norm train", Mode::Train, make, bn);
    run("batch_norm eval", Mode::Eval, make, bn);
}

#[test]
fn softmax_over_channels() {
    let make = |rng: &mut ChaCha8Rng| {
        let (n, c, h, w) = dims(rng);
        vec![(rand_tensor(rng, &[n, c + 1, h, w]), true)]
    };
    run("softmax", Mode::Eval, make, |g, v| g.softmax(v[0], 1));
}

#[test]
fn dropout_pool_shuffle_concat() {
    let make = |rng: &mut ChaCha8Rng| {
        let (n, c, h, w) = dims(rng);
        vec![(rand_tensor(rng, &[n, 4 * c, 2 * h, 2 * w]), true), (rand_tensor(rng, &[n, c, 2 * h, 2 * w]), true)]
    };
    run("dropout", Mode::Train, make, |g, v| g.spatial_dropout(v[0], 0.3));
    run("avg_pool", Mode::Eval, make, |g, v| g.avg_pool2d(v[0], 2, 2));
    run("pixel_shuffle", Mode::Eval, make, |g, v| g.pixel_shuffle(v[0], 2));
    run("concat", Mode::Eval, make, |g, v| g.concat(&[v[0], v[1], v[0]], 1));
}

#[test]
fn composed_residual_block() {
    let make = |rng: &mut ChaCha8Rng| {
        let (_, c, h, w) = dims(rng);
        vec![
            (rand_tensor(rng, &[2, c, 2 * h, 2 * w]), true),
            (rand_tensor(rng, &[3, c, 3, 3]), true),
            (rand_tensor(rng, &[3]), true),
            (rand_tensor(rng, &[3]), true),
            (rand_tensor(rng, &[3, c, 1, 1]), false),
        ]
    };
    run("block", Mode::Train, make, |g, v| {
        let mut rs = RunningStats::new(3);
        let a = g.conv2d(v[0], v[1], None, Conv2dSpec::same(3, 2))?;
        let a = g.batch_norm(a, v[2], v[3], &mut rs, 0.1, 1e-5)?;
        let a = g.sigmoid(a);
        let skip = g.conv2d(v[0], v[4], None, Conv2dSpec::same(1, 1))?;
        let s = g.add(a, skip)?;
        let s = g.spatial_dropout(s, 0.2)?;
        g.avg_pool2d(s, 2, 2)
    });
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.param(Tensor::full(&[1, 1, 3, 3], 0.5));
    let y = g.conv2d(x, w, None, Conv2dSpec::same(3, 1)).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    // each weight tap sees the number of output pixels whose window covers an in-bounds input
    let gw = grads.get(w).unwrap().data().to_vec();
    assert_eq!(gw, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}
