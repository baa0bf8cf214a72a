//! Optimisation loop: Adam with decoupled weight decay, the per-epoch learning
//! rate schedule, paired-scan augmentation, and the fit / evaluate drivers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{total_loss, total_loss_node, Confusion, LossParts};
use crate::network::{argmax_classes, prepare_input, FrameInput, ModelState, NetworkConfig};
use crate::projection::{project, unproject_labels, OrderedPointCloud, SensorConfig};
use crate::scalar::{DType, Scalar};
use crate::scan_io::{read_labels, read_scan, Class, LabelMask, Point, PointCloud};
use crate::snowsim::{mix_seed, ConditionClass, Manifest, ManifestEntry, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Fractional learning-rate decay per epoch.
    pub lr_decay: f64,
    pub l2_lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of each augmentation.
    pub aug_prob: f64,
    /// Train on random column windows of this width; full width when absent.
    pub crop_width: Option<usize>,
    /// Caps the validation frames scored each epoch.
    pub max_val_frames: Option<usize>,
    /// Element type of the weights during training.
    pub dtype: DType,
    /// Score validation frames with 32-bit inference.
    pub eval_f32: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_decay: 0.01,
            l2_lambda: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 4,
            aug_prob: 0.5,
            crop_width: None,
            max_val_frames: None,
            dtype: DType::F32,
            eval_f32: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return bad(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad(format!("l2_lambda must be non-negative, got {}", self.l2_lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return bad(format!("aug_prob must lie in [0, 1], got {}", self.aug_prob));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop_width == Some(0) {
            return bad("crop_width must be at least 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr0, self.lr_decay, epoch)
    }
}

/// `lr0 * (1 - decay)^epoch`.
pub fn lr_at(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * (1.0 - decay).powi(epoch as i32)
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Weight decay is decoupled:
/// `w <- w - lr * lambda * w`, then the Adam step. Parameters without a
/// gradient are left alone.
pub fn adam_step<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    lr: f64,
    l2_lambda: f64,
    hp: AdamParams,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let w = params
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("gradient for unknown parameter {name}")))?;
        if w.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", w.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(hp.beta1), S::lit(hp.beta2));
    let c1 = S::lit(1.0 - hp.beta1.powi(t));
    let c2 = S::lit(1.0 - hp.beta2.powi(t));
    let (lr_s, decay, eps) = (S::lit(lr), S::lit(lr * l2_lambda), S::lit(hp.eps));
    let one = S::one();
    for (name, g) in grads {
        let w = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (wd, md, vd) = (w.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            wd[i] -= decay * wd[i];
            wd[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A pair of consecutive scans and the labels of the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPair {
    pub current: PointCloud,
    pub previous: PointCloud,
    pub labels: LabelMask,
}

/// Random augmentation decisions, shared by both scans of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augmentation {
    /// Per-point drop probability.
    pub drop: Option<f64>,
    pub translate: Option<[f64; 2]>,
    /// Rotation about z, radians.
    pub rotate: Option<f64>,
    /// Mirror across the xz-plane (`y -> -y`).
    pub flip: bool,
}

impl Augmentation {
    pub fn sample(rng: &mut impl Rng, p: f64) -> Self {
        let mut a = Self::default();
        if rng.gen_bool(p) {
            a.drop = Some(rng.gen_range(0.0..=0.3));
        }
        if rng.gen_bool(p) {
            a.translate = Some([rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]);
        }
        if rng.gen_bool(p) {
            a.rotate = Some(rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI));
        }
        a.flip = rng.gen_bool(p);
        a
    }

    /// Rotation, then translation, then the flip.
    pub fn transform(&self, p: &Point) -> Point {
        let (mut x, mut y) = (p.x as f64, p.y as f64);
        if let Some(theta) = self.rotate {
            let (s, c) = theta.sin_cos();
            (x, y) = (c * x - s * y, s * x + c * y);
        }
        if let Some([tx, ty]) = self.translate {
            x += tx;
            y += ty;
        }
        if self.flip {
            y = -y;
        }
        Point::new(x as f32, y as f32, p.z, p.intensity)
    }

    /// Applies the decisions to a pair; `rng` drives the per-point drops.
    pub fn apply(&self, pair: &ScanPair, rng: &mut impl Rng) -> ScanPair {
        let mut keep = |n: usize| -> Vec<bool> {
            match self.drop {
                Some(f) => (0..n).map(|_| !rng.gen_bool(f)).collect(),
                None => vec![true; n],
            }
        };
        let keep_cur = keep(pair.current.len());
        let keep_prev = keep(pair.previous.len());
        let pick = |cloud: &PointCloud, keep: &[bool]| {
            let pts = cloud
                .points
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| self.transform(p))
                .collect();
            PointCloud::new(pts, cloud.frame_id)
        };
        let labels = pair
            .labels
            .labels
            .iter()
            .zip(&keep_cur)
            .filter(|(_, &k)| k)
            .map(|(c, _)| *c)
            .collect();
        ScanPair {
            current: pick(&pair.current, &keep_cur),
            previous: pick(&pair.previous, &keep_prev),
            labels: LabelMask::new(labels),
        }
    }
}

/// Samples and applies one augmentation with per-transform probability `p`.
pub fn augment(pair: &ScanPair, p: f64, rng: &mut impl Rng) -> ScanPair {
    let a = Augmentation::sample(rng, p);
    a.apply(pair, rng)
}

/// Projects a pair and builds the network input for the current scan.
pub fn prepare_pair<S: Scalar>(
    current: &PointCloud,
    previous: &PointCloud,
    sensor: &SensorConfig,
    net: &NetworkConfig,
) -> Result<(OrderedPointCloud, FrameInput<S>)> {
    let opc_t = project(current, sensor);
    let opc_prev = project(previous, sensor);
    let input = prepare_input(&opc_t, &opc_prev, net)?;
    Ok((opc_t, input))
}

/// Pixel targets for the loss: the owning point's class, `None` on empty pixels.
pub fn pixel_targets(opc: &OrderedPointCloud, labels: &LabelMask) -> Result<Vec<Option<usize>>> {
    let classes = opc.pixel_labels(labels)?;
    Ok(classes
        .iter()
        .zip(opc.valid())
        .map(|(c, &v)| v.then_some(c.id() as usize))
        .collect())
}

/// Point-level prediction for the current scan of a pair.
pub fn predict_pair<S: Scalar>(
    state: &ModelState<S>,
    current: &PointCloud,
    previous: &PointCloud,
    sensor: &SensorConfig,
) -> Result<(LabelMask, Tensor<S>, OrderedPointCloud)> {
    let (opc, input) = prepare_pair::<S>(current, previous, sensor, &state.config)?;
    let probs = state.predict(&input)?;
    let mask = unproject_labels(&opc, &argmax_classes(&probs))?;
    Ok((mask, probs, opc))
}

/// Loss of `C x H x W` probabilities over the labelled pixels.
fn image_loss<S: Scalar>(probs: &Tensor<S>, targets: &[Option<usize>]) -> Result<Option<LossParts<S>>> {
    let shape = probs.shape();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let picked: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|cls| (i, cls)))
        .collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let m = picked.len();
    let d = probs.data();
    let flat = Tensor::from_fn(&[c, m], |i| d[(i / m) * n + picked[i % m].0]);
    let labels: Vec<usize> = picked.iter().map(|p| p.1).collect();
    Ok(Some(total_loss(&flat, &labels)?.0))
}

/// Outcome for one evaluated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub sequence: String,
    pub frame: u64,
    pub condition: ConditionClass,
    pub confusion: Confusion,
    pub loss: Option<f64>,
}

/// Scans and labels read from a manifest, cached by entry.
pub struct FrameStore<'a> {
    manifest: &'a Manifest,
    scans: HashMap<PathBuf, PointCloud>,
    labels: HashMap<PathBuf, LabelMask>,
}

impl<'a> FrameStore<'a> {
    pub fn new(manifest: &'a Manifest) -> Self {
        Self {
            manifest,
            scans: HashMap::new(),
            labels: HashMap::new(),
        }
    }

    fn scan(&mut self, entry: &ManifestEntry) -> Result<PointCloud> {
        let path = self.manifest.scan_path(entry);
        if let Some(c) = self.scans.get(&path) {
            return Ok(c.clone());
        }
        let c = read_scan(&path)?;
        self.scans.insert(path, c.clone());
        Ok(c)
    }

    fn label(&mut self, entry: &ManifestEntry) -> Result<LabelMask> {
        let path = self.manifest.label_path(entry);
        if let Some(l) = self.labels.get(&path) {
            return Ok(l.clone());
        }
        let l = read_labels(&path)?;
        self.labels.insert(path, l.clone());
        Ok(l)
    }

    /// The entry's scan, its labels and the preceding scan of its sequence.
    pub fn pair(&mut self, entry: &ManifestEntry) -> Result<ScanPair> {
        let current = self.scan(entry)?;
        let labels = self.label(entry)?;
        if labels.len() != current.len() {
            return Err(Error::LengthMismatch {
                left: current.len(),
                right: labels.len(),
            });
        }
        let prev_entry = self.manifest.previous(entry).clone();
        let previous = self.scan(&prev_entry)?;
        Ok(ScanPair {
            current,
            previous,
            labels,
        })
    }
}

/// Scores `state` on the given entries, in order.
pub fn evaluate<S: Scalar>(
    state: &ModelState<S>,
    store: &mut FrameStore,
    entries: &[&ManifestEntry],
    sensor: &SensorConfig,
) -> Result<Vec<FrameScore>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = store.pair(e)?;
        let (mask, probs, opc) = predict_pair(state, &pair.current, &pair.previous, sensor)?;
        let loss = image_loss(&probs, &pixel_targets(&opc, &pair.labels)?)?;
        out.push(FrameScore {
            sequence: e.sequence.clone(),
            frame: e.frame,
            condition: e.condition,
            confusion: Confusion::from_masks(&mask, &pair.labels)?,
            loss: loss.map(|l| l.total().to_f64().unwrap_or(f64::NAN)),
        });
    }
    Ok(out)
}

/// Pooled noise IoU and mean frame loss over a set of scores.
pub fn summarize(scores: &[FrameScore]) -> (f64, f64) {
    let mut total = Confusion::default();
    let mut loss = 0.0;
    let mut n = 0;
    for s in scores {
        total.merge(&s.confusion);
        if let Some(l) = s.loss {
            loss += l;
            n += 1;
        }
    }
    (total.iou(), if n > 0 { loss / n as f64 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_loss,val_iou";

pub fn render_metrics(log: &[EpochLog]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.6}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_iou
        );
    }
    s
}

/// Result of [`fit`].
#[derive(Debug)]
pub struct FitReport {
    /// Weights with the best validation IoU.
    pub best: ModelState<f64>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    /// Weights after the last epoch.
    pub last: ModelState<f64>,
    pub log: Vec<EpochLog>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step<S: Scalar>(
    state: &mut ModelState<S>,
    adam: &mut AdamState<S>,
    batch: &[FrameInput<S>],
    targets: &[Option<usize>],
    lr: f64,
    cfg: &TrainConfig,
    graph_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new(Mode::Train, graph_seed);
    let refs: Vec<&FrameInput<S>> = batch.iter().collect();
    let fwd = state.forward(&mut g, &refs)?;
    let (loss, parts) = total_loss_node(&mut g, fwd.probs, targets)?;
    let value = parts.total().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    let mut grads = g.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, v) in &fwd.params {
        if let Some(t) = grads.take(*v) {
            named.insert(name.clone(), t);
        }
    }
    let hp = AdamParams {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    adam_step(&mut state.params, adam, &named, lr, cfg.l2_lambda, hp)?;
    state.running = fwd.running;
    Ok(value)
}

/// Builds a training batch from manifest entries: augmentation, projection,
/// feature gathering and the optional column crop.
fn build_batch<S: Scalar>(
    store: &mut FrameStore,
    entries: &[&ManifestEntry],
    sensor: &SensorConfig,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FrameInput<S>>, Vec<Option<usize>>)> {
    let mut inputs = Vec::with_capacity(entries.len());
    let mut targets = Vec::new();
    for e in entries {
        let pair = augment(&store.pair(e)?, cfg.aug_prob, rng);
        let (opc, input) = prepare_pair::<S>(&pair.current, &pair.previous, sensor, net)?;
        let t = pixel_targets(&opc, &pair.labels)?;
        match cfg.crop_width {
            Some(cw) if cw < sensor.width => {
                let start = rng.gen_range(0..=sensor.width - cw);
                inputs.push(input.crop(start, cw)?);
                for row in t.chunks(sensor.width) {
                    targets.extend_from_slice(&row[start..start + cw]);
                }
            }
            _ => {
                inputs.push(input);
                targets.extend(t);
            }
        }
    }
    Ok((inputs, targets))
}

/// Trains a fresh network on the manifest's training split, scoring the
/// validation split after every epoch. With `out_dir`, writes the metric log
/// and the best checkpoint there.
pub fn fit(
    manifest: &Manifest,
    train: &TrainConfig,
    net: &NetworkConfig,
    sensor: &SensorConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    train.validate()?;
    sensor.validate()?;
    let state = ModelState::<f64>::new(net.clone(), train.seed)?;
    fit_from(state, manifest, train, sensor, out_dir)
}

/// [`fit`] starting from given weights.
pub fn fit_from(
    state: ModelState<f64>,
    manifest: &Manifest,
    train: &TrainConfig,
    sensor: &SensorConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    match train.dtype {
        DType::F64 => fit_typed(state, manifest, train, sensor, out_dir),
        DType::F32 => fit_typed(state.cast::<f32>(), manifest, train, sensor, out_dir),
    }
}

fn fit_typed<S: Scalar>(
    mut state: ModelState<S>,
    manifest: &Manifest,
    train: &TrainConfig,
    sensor: &SensorConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    let train_entries = manifest.split(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::DatasetEmpty("train"));
    }
    let mut val_entries = manifest.split(Split::Val);
    if val_entries.is_empty() {
        return Err(Error::DatasetEmpty("val"));
    }
    if let Some(cap) = train.max_val_frames {
        val_entries.truncate(cap.max(1));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let net = state.config.clone();
    let mut store = FrameStore::new(manifest);
    let mut adam = AdamState::default();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelState<S>)> = None;
    let mut step = 0u64;

    for epoch in 0..train.epochs {
        let lr = train.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train.seed, epoch as u64));
        let mut order: Vec<&ManifestEntry> = train_entries.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(train.batch_size).enumerate() {
            let (inputs, targets) = build_batch(&mut store, chunk, sensor, &net, train, &mut rng)?;
            if targets.iter().all(Option::is_none) {
                continue;
            }
            let loss = train_step(
                &mut state,
                &mut adam,
                &inputs,
                &targets,
                lr,
                train,
                mix_seed(train.seed ^ 0x5eed, step),
            )
            .map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::DivergenceDetected { epoch, step: b },
                other => other,
            })?;
            step += 1;
            loss_sum += loss;
            batches += 1;
            log::debug!("epoch {epoch} batch {b} loss {loss:.5}");
        }
        let scores = if train.eval_f32 && train.dtype != DType::F32 {
            evaluate(&state.cast::<f32>(), &mut store, &val_entries, sensor)?
        } else {
            evaluate(&state, &mut store, &val_entries, sensor)?
        };
        let (val_iou, val_loss) = summarize(&scores);
        let row = EpochLog {
            epoch,
            lr,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            val_loss,
            val_iou,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.5} train_loss {:.4} val_loss {val_loss:.4} val_iou {val_iou:.4}",
            row.train_loss
        );
        log.push(row);
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_iou > *b);
        if improved {
            if let Some(dir) = out_dir {
                let meta = BTreeMap::from([
                    ("epoch".to_string(), epoch.to_string()),
                    ("val_iou".to_string(), format!("{val_iou:.6}")),
                    ("sensor".to_string(), serde_json::to_string(sensor).unwrap_or_default()),
                ]);
                checkpoint::save(dir.join(BEST_CHECKPOINT), &state, &meta)?;
            }
            best = Some((epoch, val_iou, state.clone()));
        }
        if let Some(dir) = out_dir {
            let path = dir.join(METRICS_FILE);
            fs::write(&path, render_metrics(&log)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let (best_epoch, best_val_iou, best_state) = best.unwrap_or_else(|| (0, 0.0, state.clone()));
    Ok(FitReport {
        best: best_state.cast(),
        best_epoch,
        best_val_iou,
        last: state.cast(),
        log,
    })
}

/// Predicted point labels: `Noise` where the pixel argmax says so.
pub fn noise_fraction(mask: &LabelMask) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.labels.iter().filter(|c| **c == Class::Noise).count() as f64 / mask.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(1) - 0.0099).abs() < 1e-15);
        assert!((c.lr_at(100) - 0.01 * 0.99f64.powi(100)).abs() < 1e-15);
        assert!((1..50).all(|e| c.lr_at(e) < c.lr_at(e - 1)));
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap())]);
        let before = p.clone();
        let g = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2]))]);
        adam_step(&mut p, &mut AdamState::default(), &g, 0.01, 0.0, AdamParams::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[1]))]);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![f64::NAN]).unwrap())]);
        let r = adam_step(&mut p, &mut AdamState::default(), &g, 0.01, 0.0, AdamParams::default());
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.0, ..Default::default() },
            TrainConfig { aug_prob: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn no_augmentation_at_zero_probability() {
        let cloud = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5), Point::new(-4.0, 0.5, 1.0, 0.1)], 3);
        let pair = ScanPair {
            current: cloud.clone(),
            previous: cloud.clone(),
            labels: LabelMask::new(vec![Class::Valid, Class::Noise]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&pair, 0.0, &mut rng), pair);
    }

    #[test]
    fn drop_keeps_labels_aligned() {
        let pts: Vec<Point> = (0..200).map(|i| Point::new(i as f32, 0.0, 0.0, 0.0)).collect();
        let labels = (0..200).map(|i| if i % 3 == 0 { Class::Noise } else { Class::Valid }).collect();
        let pair = ScanPair {
            current: PointCloud::new(pts.clone(), 0),
            previous: PointCloud::new(pts, 0),
            labels: LabelMask::new(labels),
        };
        let a = Augmentation {
            drop: Some(0.3),
            ..Default::default()
        };
        let out = a.apply(&pair, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(out.current.len() < 200);
        assert_eq!(out.current.len(), out.labels.len());
        for (p, c) in out.current.points.iter().zip(&out.labels.labels) {
            assert_eq!((p.x as usize) % 3 == 0, c.is_noise());
        }
    }
}
