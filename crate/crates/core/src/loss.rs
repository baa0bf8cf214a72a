//! Training objective and noise-class metrics.
//!
//! Loss functions take class probabilities in a `C x N` layout (class-major)
//! and return the scalar value together with its gradient in the same layout.

use std::cmp::Ordering;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scan_io::{Class, LabelMask};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

fn check_layout<S: Scalar>(op: &'static str, probs: &Tensor<S>, targets: &[usize]) -> Result<(usize, usize)> {
    if probs.shape().len() != 2 || probs.shape()[1] != targets.len() {
        return Err(Error::shape(
            op,
            format!("probs {:?} for {} targets", probs.shape(), targets.len()),
        ));
    }
    let (c, n) = (probs.shape()[0], probs.shape()[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::shape(op, format!("target {bad} with {c} classes")));
    }
    Ok((c, n))
}

/// Mean of `-log p(target)`, optionally weighted per class.
pub fn cross_entropy<S: Scalar>(probs: &Tensor<S>, targets: &[usize], weights: Option<&[S]>) -> Result<(S, Tensor<S>)> {
    let (c, n) = check_layout("cross_entropy", probs, targets)?;
    if let Some(w) = weights {
        if w.len() != c {
            return Err(Error::shape("cross_entropy", format!("{} weights for {c} classes", w.len())));
        }
    }
    let mut grad = Tensor::zeros(&[c, n]);
    if n == 0 {
        return Ok((S::zero(), grad));
    }
    let floor = S::lit(PROB_FLOOR);
    let weight = |t: usize| weights.map_or(S::one(), |w| w[t]);
    let norm: S = targets.iter().map(|&t| weight(t)).sum();
    if norm <= S::zero() {
        return Ok((S::zero(), grad));
    }
    let p = probs.data();
    let mut loss = S::zero();
    let g = grad.data_mut();
    for (i, &t) in targets.iter().enumerate() {
        let q = p[t * n + i];
        let w = weight(t) / norm;
        loss += -w * q.max(floor).ln();
        if q > floor {
            g[t * n + i] = -w / q;
        }
    }
    Ok((loss, grad))
}

/// Per-class Lovász hinge terms for the classes present in `targets`;
/// `None` for absent classes.
pub fn lovasz_class_terms<S: Scalar>(probs: &Tensor<S>, targets: &[usize]) -> Result<Vec<Option<(S, Vec<S>)>>> {
    let (c, n) = check_layout("lovasz_softmax", probs, targets)?;
    let p = probs.data();
    let mut out = Vec::with_capacity(c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = vec![S::zero(); n];
    for class in 0..c {
        let gts = targets.iter().filter(|&&t| t == class).count();
        if gts == 0 {
            out.push(None);
            continue;
        }
        for i in 0..n {
            let fg = if targets[i] == class { S::one() } else { S::zero() };
            errors[i] = (fg - p[class * n + i]).abs();
        }
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

        // discrete gradient of the Jaccard loss along the sorted order
        let total = S::from_usize(gts).unwrap();
        let mut cum_fg = S::zero();
        let mut cum_bg = S::zero();
        let mut prev = S::zero();
        let mut loss = S::zero();
        let mut grad = vec![S::zero(); n];
        for &i in &order {
            if targets[i] == class {
                cum_fg += S::one();
            } else {
                cum_bg += S::one();
            }
            let jac = S::one() - (total - cum_fg) / (total + cum_bg);
            let w = jac - prev;
            prev = jac;
            loss += errors[i] * w;
            // d|fg - p| / dp
            grad[i] = if targets[i] == class { -w } else { w };
        }
        out.push(Some((loss, grad)));
    }
    Ok(out)
}

/// Lovász-Softmax averaged over the classes present in `targets`.
pub fn lovasz_softmax<S: Scalar>(probs: &Tensor<S>, targets: &[usize]) -> Result<(S, Tensor<S>)> {
    let terms = lovasz_class_terms(probs, targets)?;
    let (c, n) = (probs.shape()[0], probs.shape()[1]);
    let mut grad = Tensor::zeros(&[c, n]);
    let present = terms.iter().filter(|t| t.is_some()).count();
    if present == 0 {
        return Ok((S::zero(), grad));
    }
    let scale = S::one() / S::from_usize(present).unwrap();
    let mut loss = S::zero();
    let g = grad.data_mut();
    for (class, term) in terms.into_iter().enumerate() {
        if let Some((l, gc)) = term {
            loss += l * scale;
            for (dst, v) in g[class * n..(class + 1) * n].iter_mut().zip(gc) {
                *dst = v * scale;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<S> {
    pub cross_entropy: S,
    pub lovasz: S,
}

impl<S: Scalar> LossParts<S> {
    pub fn total(&self) -> S {
        self.cross_entropy + self.lovasz
    }
}

/// Lovász-Softmax plus cross-entropy.
pub fn total_loss<S: Scalar>(probs: &Tensor<S>, targets: &[usize]) -> Result<(LossParts<S>, Tensor<S>)> {
    let (ce, mut grad) = cross_entropy(probs, targets, None)?;
    let (ls, gl) = lovasz_softmax(probs, targets)?;
    grad.add_assign(&gl);
    Ok((
        LossParts {
            cross_entropy: ce,
            lovasz: ls,
        },
        grad,
    ))
}

/// Records [`total_loss`] over the labelled pixels of an `N x C x H x W`
/// probability map. `targets` holds one entry per pixel in `N x H x W`
/// order; `None` marks pixels excluded from the loss.
pub fn total_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    targets: &[Option<usize>],
) -> Result<(Var, LossParts<S>)> {
    let t = g.value(probs);
    if t.shape().len() != 4 {
        return Err(Error::shape("total_loss", format!("probs {:?}", t.shape())));
    }
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::shape("total_loss", format!("{} targets for {n}x{h}x{w}", targets.len())));
    }
    let picked: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|cls| (i, cls)))
        .collect();
    let m = picked.len();
    let src = t.data();
    let at = |pix: usize, class: usize| (pix / hw * c + class) * hw + pix % hw;
    let mut flat = vec![S::zero(); c * m];
    for class in 0..c {
        for (j, &(pix, _)) in picked.iter().enumerate() {
            flat[class * m + j] = src[at(pix, class)];
        }
    }
    let flat = Tensor::from_vec(&[c, m], flat)?;
    let labels: Vec<usize> = picked.iter().map(|&(_, cls)| cls).collect();
    let (parts, grad) = total_loss(&flat, &labels)?;
    let mut local = Tensor::zeros(t.shape());
    let gd = grad.data();
    let ld = local.data_mut();
    for class in 0..c {
        for (j, &(pix, _)) in picked.iter().enumerate() {
            ld[at(pix, class)] = gd[class * m + j];
        }
    }
    let node = g.reduce(probs, parts.total(), local)?;
    Ok((node, parts))
}

/// Noise-class confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_classes<'a>(pred: impl IntoIterator<Item = &'a Class>, truth: impl IntoIterator<Item = &'a Class>) -> Self {
        let mut c = Confusion::default();
        for (p, t) in pred.into_iter().zip(truth) {
            c.add(p.is_noise(), t.is_noise());
        }
        c
    }

    pub fn from_masks(pred: &LabelMask, truth: &LabelMask) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch {
                left: pred.len(),
                right: truth.len(),
            });
        }
        Ok(Self::from_classes(&pred.labels, &truth.labels))
    }

    pub fn add(&mut self, pred_noise: bool, truth_noise: bool) {
        match (pred_noise, truth_noise) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// 1.0 when neither prediction nor truth contains noise.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou_noise(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    Ok(Confusion::from_masks(pred, truth)?.iou())
}

pub fn precision_recall(pred: &LabelMask, truth: &LabelMask) -> Result<(f64, f64)> {
    let c = Confusion::from_masks(pred, truth)?;
    Ok((c.precision(), c.recall()))
}
