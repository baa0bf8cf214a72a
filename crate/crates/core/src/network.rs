//! The denoising network.
//!
//! Layout: a spatial front-end over the current scan and a temporal
//! front-end over motion to the previous scan, one encoder residual block per
//! branch (downsampled), motion-guided attention fusion, a middle residual
//! block, pixel-shuffle upsampling, a decoder residual block that also sees
//! the full-resolution spatial features, and a 1x1 softmax head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::knn::{knn_spatial, knn_temporal, motion_vectors, to_spherical, KnnConfig, NeighborIndexMap};
use crate::projection::{unproject_labels, OrderedPointCloud, CH_INTENSITY, CH_RANGE, CH_X, CH_Y, CH_Z, NONE};
use crate::scalar::Scalar;
use crate::scan_io::{Class, LabelMask, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontEnd {
    /// Learned map over gathered nearest neighbours.
    Knn,
    /// Plain 3x3 convolutions over the projected channels.
    Conv2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// 4 for (range, x, y, z); 5 adds intensity.
    pub in_channels: usize,
    pub knn: KnnConfig,
    /// Front-end output width.
    pub base_width: usize,
    /// Encoder block output width.
    pub encoder_width: usize,
    /// Middle block output width; divided by `downsample^2` by the shuffle.
    pub middle_width: usize,
    /// Decoder block output width.
    pub decoder_width: usize,
    pub num_classes: usize,
    pub downsample: usize,
    pub dropout: f64,
    pub front_end: FrontEnd,
    pub temporal: bool,
    /// Multiplies metric input features (metres).
    pub input_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            knn: KnnConfig::default(),
            base_width: 32,
            encoder_width: 64,
            middle_width: 192,
            decoder_width: 32,
            num_classes: 2,
            downsample: 2,
            dropout: 0.2,
            front_end: FrontEnd::Knn,
            temporal: true,
            input_scale: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Named ablations of the default network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoTemporal,
    Conv2dFront,
    Conv2dNoTemporal,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "full" => Some(Self::Full),
            "no-temporal" => Some(Self::NoTemporal),
            "conv2d-front" => Some(Self::Conv2dFront),
            "conv2d-no-temporal" => Some(Self::Conv2dNoTemporal),
            _ => None,
        }
    }

    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (front, temporal) = match self {
            Self::Full => (FrontEnd::Knn, true),
            Self::NoTemporal => (FrontEnd::Knn, false),
            Self::Conv2dFront => (FrontEnd::Conv2d, true),
            Self::Conv2dNoTemporal => (FrontEnd::Conv2d, false),
        };
        cfg.front_end = front;
        cfg.temporal = temporal;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform with bound `1 / sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.base_width < 8 {
            return bad(format!("base_width {} < 8", self.base_width));
        }
        if !(4..=5).contains(&self.in_channels) {
            return bad(format!("in_channels {} must be 4 or 5", self.in_channels));
        }
        if self.downsample == 0 || self.middle_width % (self.downsample * self.downsample) != 0 {
            return bad(format!(
                "middle_width {} must be divisible by downsample^2 = {}",
                self.middle_width,
                self.downsample * self.downsample
            ));
        }
        if self.encoder_width == 0 || self.decoder_width == 0 {
            return bad("widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.input_scale > 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("input_scale, bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        self.knn.validate()
    }

    /// Channels of the projected image fed to the network, in order.
    pub fn input_channels(&self) -> Vec<usize> {
        let mut ch = vec![CH_RANGE, CH_X, CH_Y, CH_Z];
        if self.in_channels == 5 {
            ch.push(CH_INTENSITY);
        }
        ch
    }

    pub fn spatial_features(&self) -> usize {
        match self.front_end {
            FrontEnd::Knn => self.knn.k * self.in_channels,
            FrontEnd::Conv2d => self.in_channels,
        }
    }

    pub fn temporal_features(&self) -> usize {
        match self.front_end {
            FrontEnd::Knn => self.knn.k * 3,
            FrontEnd::Conv2d => 2 * self.in_channels,
        }
    }

    fn front_kernel(&self) -> usize {
        match self.front_end {
            FrontEnd::Knn => 1,
            FrontEnd::Conv2d => 3,
        }
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let kf = self.front_kernel();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, bias: bool| {
            specs.push((format!("{name}.w"), vec![cout, cin, k, k], Init::Uniform(cin * k * k)));
            if bias {
                specs.push((format!("{name}.b"), vec![cout], Init::Zeros));
            }
        };
        conv("front_s", self.base_width, self.spatial_features(), kf, true);
        if self.temporal {
            conv("front_t", self.base_width, self.temporal_features(), kf, true);
        }
        let mut blocks = vec![("enc_s", self.base_width, self.encoder_width)];
        if self.temporal {
            blocks.push(("enc_t", self.base_width, self.encoder_width));
        }
        blocks.push(("mid", self.encoder_width, self.middle_width));
        let shuffled = self.middle_width / (self.downsample * self.downsample);
        blocks.push(("dec", shuffled + self.base_width, self.decoder_width));
        for (name, cin, cout) in blocks {
            specs.extend(res_block_specs(name, cin, cout));
        }
        if self.temporal {
            specs.push(("mga.w".into(), vec![self.encoder_width, self.encoder_width, 1, 1], Init::Uniform(self.encoder_width)));
            specs.push(("mga.b".into(), vec![self.encoder_width], Init::Zeros));
        }
        specs.push(("head.w".into(), vec![self.num_classes, self.decoder_width, 1, 1], Init::Uniform(self.decoder_width)));
        specs.push(("head.b".into(), vec![self.num_classes], Init::Zeros));
        specs
    }

    /// Trainable parameter count; batch-norm running statistics excluded.
    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    fn bn_layers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mut blocks = vec![("enc_s", self.encoder_width)];
        if self.temporal {
            blocks.push(("enc_t", self.encoder_width));
        }
        blocks.push(("mid", self.middle_width));
        blocks.push(("dec", self.decoder_width));
        for (name, width) in blocks {
            for path in PATHS {
                out.push((format!("{name}.{}.bn", path.0), width));
            }
        }
        out
    }
}

/// (name, kernel, dilation) of the three parallel residual paths.
const PATHS: [(&str, usize, usize); 3] = [("p1", 1, 1), ("p3", 3, 1), ("p3d", 3, 2)];

fn res_block_specs(name: &str, cin: usize, cout: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut s = Vec::new();
    for (path, k, _) in PATHS {
        s.push((format!("{name}.{path}.w"), vec![cout, cin, k, k], Init::Uniform(cin * k * k)));
        s.push((format!("{name}.{path}.bn.gamma"), vec![cout], Init::Ones));
        s.push((format!("{name}.{path}.bn.beta"), vec![cout], Init::Zeros));
    }
    s.push((format!("{name}.reduce.w"), vec![cout, 3 * cout, 1, 1], Init::Uniform(3 * cout)));
    s.push((format!("{name}.reduce.b"), vec![cout], Init::Zeros));
    s.push((format!("{name}.skip.w"), vec![cout, cin, 1, 1], Init::Uniform(cin)));
    s.push((format!("{name}.skip.b"), vec![cout], Init::Zeros));
    s
}

/// Network input for one frame, before batching.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput<S> {
    /// `F_s x H x W` spatial front-end features.
    pub spatial: Tensor<S>,
    /// `F_t x H x W` temporal front-end features; absent without the temporal branch.
    pub temporal: Option<Tensor<S>>,
    /// Pixels holding a projected point.
    pub valid: Vec<bool>,
}

impl<S: Scalar> FrameInput<S> {
    pub fn height(&self) -> usize {
        self.spatial.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.spatial.shape()[2]
    }

    /// Columns `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let w = self.width();
        let valid = self
            .valid
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(Self {
            spatial: self.spatial.crop_last(start, len)?,
            temporal: self.temporal.as_ref().map(|t| t.crop_last(start, len)).transpose()?,
            valid,
        })
    }
}

/// Scaled projected channels `C x H x W`; empty pixels keep the sentinel.
pub fn image_features<S: Scalar>(opc: &OrderedPointCloud, channels: &[usize], scale: f64) -> Tensor<S> {
    let n = opc.pixels();
    let mut out = Vec::with_capacity(channels.len() * n);
    for &c in channels {
        let s = if c == CH_INTENSITY { 1.0 } else { scale };
        out.extend(opc.channel(c).iter().map(|&v| S::lit(v * s)));
    }
    Tensor::from_vec(&[channels.len(), opc.height, opc.width], out).unwrap()
}

/// Gathered neighbour features `(k C) x H x W`; entry `j C + c` is channel
/// `c` of neighbour `j`. Invalid anchors gather zeros.
pub fn gather_spatial<S: Scalar>(
    opc: &OrderedPointCloud,
    nim: &NeighborIndexMap,
    channels: &[usize],
    scale: f64,
) -> Result<Tensor<S>> {
    if nim.height != opc.height || nim.width != opc.width {
        return Err(Error::shape("gather_spatial", "neighbour map does not match cloud"));
    }
    let n = opc.pixels();
    let (k, cn) = (nim.k, channels.len());
    let mut out = vec![S::zero(); k * cn * n];
    for p in 0..n {
        for (j, &q) in nim.neighbors(p).iter().enumerate() {
            if q == NONE {
                continue;
            }
            for (ci, &c) in channels.iter().enumerate() {
                let s = if c == CH_INTENSITY { 1.0 } else { scale };
                out[(j * cn + ci) * n + p] = S::lit(opc.value(c, q as usize) * s);
            }
        }
    }
    Tensor::from_vec(&[k * cn, opc.height, opc.width], out)
}

/// Spherical motion features `(k 3) x H x W`: `(r scale, theta, phi)` per neighbour.
pub fn gather_temporal<S: Scalar>(
    opc_t: &OrderedPointCloud,
    opc_prev: &OrderedPointCloud,
    nim: &NeighborIndexMap,
    scale: f64,
) -> Result<Tensor<S>> {
    let d = motion_vectors(opc_t, opc_prev, nim)?;
    let mut sph = to_spherical(&d)?;
    let n = opc_t.pixels();
    for j in 0..nim.k {
        for v in &mut sph.data_mut()[j * 3 * n..j * 3 * n + n] {
            *v *= scale;
        }
    }
    Ok(sph.cast::<S>().reshape(&[nim.k * 3, opc_t.height, opc_t.width])?)
}

/// Builds the front-end inputs of a frame pair.
pub fn prepare_input<S: Scalar>(
    opc_t: &OrderedPointCloud,
    opc_prev: &OrderedPointCloud,
    cfg: &NetworkConfig,
) -> Result<FrameInput<S>> {
    if opc_t.height != opc_prev.height || opc_t.width != opc_prev.width {
        return Err(Error::ConfigMismatch(format!(
            "current scan is {}x{}, previous scan is {}x{}",
            opc_t.height, opc_t.width, opc_prev.height, opc_prev.width
        )));
    }
    let channels = cfg.input_channels();
    let (spatial, temporal) = match cfg.front_end {
        FrontEnd::Knn => {
            let nim = knn_spatial(opc_t, &cfg.knn)?;
            let spatial = gather_spatial(opc_t, &nim, &channels, cfg.input_scale)?;
            let temporal = if cfg.temporal {
                let nim_t = knn_temporal(opc_t, opc_prev, &cfg.knn)?;
                Some(gather_temporal(opc_t, opc_prev, &nim_t, cfg.input_scale)?)
            } else {
                None
            };
            (spatial, temporal)
        }
        FrontEnd::Conv2d => {
            let cur: Tensor<S> = image_features(opc_t, &channels, cfg.input_scale);
            let temporal = if cfg.temporal {
                let prev: Tensor<S> = image_features(opc_prev, &channels, cfg.input_scale);
                let mut data = cur.data().to_vec();
                data.extend_from_slice(prev.data());
                Some(Tensor::from_vec(&[2 * channels.len(), opc_t.height, opc_t.width], data)?)
            } else {
                None
            };
            (cur, temporal)
        }
    };
    Ok(FrameInput {
        spatial,
        temporal,
        valid: opc_t.valid().to_vec(),
    })
}

/// Front-end layer: 1x1 (kNN) or 3x3 (plain) convolution followed by ReLU.
pub fn front_conv<S: Scalar>(g: &mut Graph<S>, features: Var, w: Var, b: Var) -> Result<Var> {
    let k = g.value(w).shape()[2];
    let y = g.conv2d(features, w, Some(b), Conv2dSpec::same(k, 1))?;
    Ok(g.relu(y))
}

/// Motion-guided attention: `spatial * sigmoid(conv1x1(temporal)) + spatial`.
pub fn mga_fuse<S: Scalar>(g: &mut Graph<S>, spatial: Var, temporal: Var, w: Var, b: Var) -> Result<Var> {
    if g.value(spatial).shape() != g.value(temporal).shape() {
        return Err(Error::shape(
            "mga_fuse",
            format!("{:?} vs {:?}", g.value(spatial).shape(), g.value(temporal).shape()),
        ));
    }
    let logits = g.conv2d(temporal, w, Some(b), Conv2dSpec::same(1, 1))?;
    let att = g.sigmoid(logits);
    let gated = g.mul(spatial, att)?;
    g.add(gated, spatial)
}

/// Graph variables of one residual block.
#[derive(Clone, Debug)]
pub struct ResBlockVars {
    /// `(weight, gamma, beta)` for the 1x1, 3x3 and dilated 3x3 paths.
    pub paths: [(Var, Var, Var); 3],
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub skip_w: Var,
    pub skip_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockSpec {
    pub dropout: f64,
    /// Average-pool factor applied last; 1 disables pooling.
    pub pool: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

pub fn res_block<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    vars: &ResBlockVars,
    running: &mut [RunningStats<S>; 3],
    spec: ResBlockSpec,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(3);
    for (((w, gamma, beta), (_, k, d)), rs) in vars.paths.iter().zip(PATHS).zip(running.iter_mut()) {
        let y = g.conv2d(x, *w, None, Conv2dSpec::same(k, d))?;
        let y = g.batch_norm(y, *gamma, *beta, rs, S::lit(spec.bn_momentum), S::lit(spec.bn_eps))?;
        outs.push(g.relu(y));
    }
    let cat = g.concat(&outs, 1)?;
    let reduced = g.conv2d(cat, vars.reduce_w, Some(vars.reduce_b), Conv2dSpec::same(1, 1))?;
    let skip = g.conv2d(x, vars.skip_w, Some(vars.skip_b), Conv2dSpec::same(1, 1))?;
    let y = g.add(reduced, skip)?;
    let y = g.spatial_dropout(y, spec.dropout)?;
    if spec.pool > 1 {
        g.avg_pool2d(y, spec.pool, spec.pool)
    } else {
        Ok(y)
    }
}

/// Result of [`ModelState::forward`].
pub struct Forward<S> {
    /// `N x num_classes x H x W` class probabilities.
    pub probs: Var,
    /// Parameter leaves, for reading gradients.
    pub params: Vec<(String, Var)>,
    /// Batch-norm statistics after this pass.
    pub running: BTreeMap<String, RunningStats<S>>,
}

/// Weights and batch-norm statistics of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Tensor<S>>,
    pub running: BTreeMap<String, RunningStats<S>>,
}

struct Binder<'a, S> {
    state: &'a ModelState<S>,
    params: Vec<(String, Var)>,
    trainable: bool,
}

impl<'a, S: Scalar> Binder<'a, S> {
    fn var(&mut self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        let t = self
            .state
            .params
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
        let v = g.leaf(t.clone(), self.trainable);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    fn block(&mut self, g: &mut Graph<S>, name: &str) -> Result<ResBlockVars> {
        let path = |g: &mut Graph<S>, b: &mut Self, p: &str| -> Result<(Var, Var, Var)> {
            Ok((
                b.var(g, &format!("{name}.{p}.w"))?,
                b.var(g, &format!("{name}.{p}.bn.gamma"))?,
                b.var(g, &format!("{name}.{p}.bn.beta"))?,
            ))
        };
        let paths = [path(g, self, "p1")?, path(g, self, "p3")?, path(g, self, "p3d")?];
        Ok(ResBlockVars {
            paths,
            reduce_w: self.var(g, &format!("{name}.reduce.w"))?,
            reduce_b: self.var(g, &format!("{name}.reduce.b"))?,
            skip_w: self.var(g, &format!("{name}.skip.w"))?,
            skip_b: self.var(g, &format!("{name}.skip.b"))?,
        })
    }
}

impl<S: Scalar> ModelState<S> {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in config.param_specs() {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, S::one()),
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| S::lit(rng.gen_range(-bound..bound)))
                }
            };
            params.insert(name, t);
        }
        let running = config
            .bn_layers()
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .collect();
        Ok(Self {
            config,
            params,
            running,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Checks that the tensors match the shapes implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in specs {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ConfigMismatch(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::ConfigMismatch(format!("missing parameter {name}"))),
            }
        }
        for (name, c) in self.config.bn_layers() {
            match self.running.get(&name) {
                Some(r) if r.mean.len() == c && r.var.len() == c => {}
                _ => return Err(Error::ConfigMismatch(format!("running statistics for {name}"))),
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&r.mean),
                            var: conv(&r.var),
                        },
                    )
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &FrameInput<S>) -> Result<()> {
        let cfg = &self.config;
        let fs = x.spatial.shape();
        let ok_t = match (&x.temporal, cfg.temporal) {
            (Some(t), true) => t.shape() == [cfg.temporal_features(), fs[1], fs[2]],
            (None, false) => true,
            _ => false,
        };
        if fs.len() != 3 || fs[0] != cfg.spatial_features() || !ok_t {
            return Err(Error::ConfigMismatch(format!(
                "input features {:?} do not match the network configuration",
                fs
            )));
        }
        let r = cfg.downsample;
        if fs[1] % r != 0 || fs[2] % r != 0 {
            return Err(Error::ConfigMismatch(format!(
                "image {}x{} not divisible by downsample factor {r}",
                fs[1], fs[2]
            )));
        }
        Ok(())
    }

    /// Records the network on `g` for a batch of equally sized frames.
    /// Parameters become trainable leaves in training mode.
    pub fn forward(&self, g: &mut Graph<S>, batch: &[&FrameInput<S>]) -> Result<Forward<S>> {
        let first = batch.first().ok_or_else(|| Error::shape("forward", "empty batch"))?;
        for x in batch {
            self.check_input(x)?;
            if x.spatial.shape() != first.spatial.shape() {
                return Err(Error::shape("forward", "frames in a batch must share a size"));
            }
        }
        let cfg = &self.config;
        let mut running = self.running.clone();
        let mut b = Binder {
            state: self,
            params: Vec::new(),
            trainable: g.mode() == Mode::Train,
        };
        let spec = |pool| ResBlockSpec {
            dropout: cfg.dropout,
            pool,
            bn_momentum: cfg.bn_momentum,
            bn_eps: cfg.bn_eps,
        };
        let mut block = |g: &mut Graph<S>, b: &mut Binder<S>, name: &str, x: Var, pool: usize| -> Result<Var> {
            let vars = b.block(g, name)?;
            let mut rs = [0, 1, 2].map(|i| running[&format!("{name}.{}.bn", PATHS[i].0)].clone());
            let y = res_block(g, x, &vars, &mut rs, spec(pool))?;
            for (i, r) in rs.into_iter().enumerate() {
                running.insert(format!("{name}.{}.bn", PATHS[i].0), r);
            }
            Ok(y)
        };

        let spatial_in = Tensor::stack(&batch.iter().map(|x| &x.spatial).collect::<Vec<_>>())?;
        let xs = g.constant(spatial_in);
        let (w, bias) = (b.var(g, "front_s.w")?, b.var(g, "front_s.b")?);
        let fs = front_conv(g, xs, w, bias)?;
        let mut enc = block(g, &mut b, "enc_s", fs, cfg.downsample)?;

        if cfg.temporal {
            let temporal: Vec<&Tensor<S>> = batch.iter().map(|x| x.temporal.as_ref().unwrap()).collect();
            let xt = g.constant(Tensor::stack(&temporal)?);
            let (w, bias) = (b.var(g, "front_t.w")?, b.var(g, "front_t.b")?);
            let ft = front_conv(g, xt, w, bias)?;
            let enc_t = block(g, &mut b, "enc_t", ft, cfg.downsample)?;
            let (w, bias) = (b.var(g, "mga.w")?, b.var(g, "mga.b")?);
            enc = mga_fuse(g, enc, enc_t, w, bias)?;
        }

        let mid = block(g, &mut b, "mid", enc, 1)?;
        let up = g.pixel_shuffle(mid, cfg.downsample)?;
        let joined = g.concat(&[up, fs], 1)?;
        let dec = block(g, &mut b, "dec", joined, 1)?;
        let (w, bias) = (b.var(g, "head.w")?, b.var(g, "head.b")?);
        let logits = g.conv2d(dec, w, Some(bias), Conv2dSpec::same(1, 1))?;
        let probs = g.softmax(logits, 1)?;
        Ok(Forward {
            probs,
            params: b.params,
            running,
        })
    }

    /// Evaluation-mode class probabilities `num_classes x H x W` for one frame.
    pub fn predict(&self, input: &FrameInput<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, &[input])?;
        let (_, c, h, w) = g.value(out.probs).dims4();
        g.value(out.probs).clone().reshape(&[c, h, w])
    }
}

/// Per-pixel argmax of `C x H x W` probabilities; ties favour the lower class.
pub fn argmax_classes<S: Scalar>(probs: &Tensor<S>) -> Vec<Class> {
    let shape = probs.shape();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let d = probs.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + p] > d[best * n + p] {
                    best = k;
                }
            }
            Class::from_id(best as u32).unwrap_or(Class::Valid)
        })
        .collect()
}

/// Outcome of [`mask_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub clean: PointCloud,
    pub removed: PointCloud,
    pub mask: LabelMask,
}

/// Splits `cloud` by the class predicted at each point's pixel.
pub fn mask_points<S: Scalar>(cloud: &PointCloud, opc: &OrderedPointCloud, probs: &Tensor<S>) -> Result<Masked> {
    if probs.shape().len() != 3 || probs.shape()[1] != opc.height || probs.shape()[2] != opc.width {
        return Err(Error::shape(
            "mask_points",
            format!("probs {:?} for a {}x{} image", probs.shape(), opc.height, opc.width),
        ));
    }
    if opc.num_points() != cloud.len() {
        return Err(Error::LengthMismatch {
            left: cloud.len(),
            right: opc.num_points(),
        });
    }
    let mask = unproject_labels(opc, &argmax_classes(probs))?;
    let (mut clean, mut removed) = (Vec::new(), Vec::new());
    for (p, c) in cloud.points.iter().zip(&mask.labels) {
        if c.is_noise() {
            removed.push(*p);
        } else {
            clean.push(*p);
        }
    }
    Ok(Masked {
        clean: PointCloud::new(clean, cloud.frame_id),
        removed: PointCloud::new(removed, cloud.frame_id),
        mask,
    })
}
