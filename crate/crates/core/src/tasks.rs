//! Target-task losses and dataset-level evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Semseg,
    Boundary,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Depth, Task::Semseg, Task::Boundary];

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Semseg => "semseg",
            Task::Boundary => "boundary",
        }
    }

    pub fn metric(self) -> MetricName {
        match self {
            Task::Depth => MetricName::Rmse,
            Task::Semseg => MetricName::Miou,
            Task::Boundary => MetricName::OdsF,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected depth, semseg or boundary)")))
    }
}

/// Row-major `height x width` grid of per-pixel values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Map<T> {
    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("map {height}x{width} needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

/// Strictly positive depth per pixel.
pub type DepthMap = Map<f64>;
/// Class index per pixel.
pub type SegMap = Map<u8>;
/// 1 on boundary pixels, 0 elsewhere.
pub type BoundaryMap = Map<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Rmse,
    Miou,
    OdsF,
}

impl MetricName {
    pub fn name(self) -> &'static str {
        match self {
            MetricName::Rmse => "rmse",
            MetricName::Miou => "miou",
            MetricName::OdsF => "ods_f",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricName::Rmse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
    pub count: usize,
}

// ---- losses ---------------------------------------------------------------

struct L1 {
    target: Tensor,
}

impl Function for L1 {
    fn name(&self) -> &'static str {
        "l1_loss"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let scale = g.data()[0] / x[0].len() as f64;
        let d = x[0].zip_map(&self.target, |p, t| {
            let diff = p - t;
            if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            }
        });
        vec![Some(d)]
    }
}

/// Mean absolute error between a prediction and a fixed target of equal shape.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(shape_err!("l1_loss: {:?} vs {:?}", tape.shape(pred), target.shape()));
    }
    let p = tape.value(pred);
    let n = p.len().max(1) as f64;
    let v = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(tape.apply(&[pred], Tensor::scalar(v), L1 { target: target.clone() }))
}

struct CrossEntropy {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl Function for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let k = x[0].shape()[1];
        let scale = g.data()[0] / self.labels.len() as f64;
        let mut d: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (r, &l) in self.labels.iter().enumerate() {
            d[r * k + l] -= scale;
        }
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), d))]
    }
}

/// Mean softmax cross-entropy of `logits[M, K]` against one label per row.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err!("cross_entropy: logits {s:?} with {} labels", labels.len()));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("cross_entropy: label {bad} out of range for {k} classes")));
    }
    let lv = tape.value(logits).data();
    let mut probs = vec![0.0; lv.len()];
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &lv[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[l];
        for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let loss = Tensor::scalar(total / labels.len() as f64);
    Ok(tape.apply(&[logits], loss, CrossEntropy { labels: labels.to_vec(), probs }))
}

/// Per-pixel cross-entropy of `logits[N, C, H, W]` against `N` label maps.
pub fn ce_loss_semseg(tape: &mut Tape, logits: Var, gts: &[&SegMap]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || s[0] != gts.len() {
        return Err(shape_err!("ce_loss_semseg: logits {s:?} with {} maps", gts.len()));
    }
    let mut labels = Vec::with_capacity(s[0] * s[2] * s[3]);
    for gt in gts {
        if gt.height != s[2] || gt.width != s[3] {
            return Err(shape_err!("ce_loss_semseg: map {}x{} vs logits {s:?}", gt.height, gt.width));
        }
        labels.extend(gt.data.iter().map(|&l| l as usize));
    }
    let rows = crate::nn::to_rows(tape, logits)?;
    cross_entropy(tape, rows, &labels)
}

/// Positive and negative pixel weights of the boundary loss.
pub const BOUNDARY_POS_WEIGHT: f64 = 0.95;
pub const BOUNDARY_NEG_WEIGHT: f64 = 0.05;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct WeightedBce {
    target: Tensor,
    pos: f64,
    neg: f64,
}

impl Function for WeightedBce {
    fn name(&self) -> &'static str {
        "weighted_bce"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let scale = g.data()[0] / x[0].len() as f64;
        let (pos, neg) = (self.pos, self.neg);
        let d = x[0].zip_map(&self.target, |z, y| {
            let s = sigmoid(z);
            scale * (pos * y * (s - 1.0) + neg * (1.0 - y) * s)
        });
        vec![Some(d)]
    }
}

/// Mean of `-[wp * y * log s(x) + wn * (1 - y) * log(1 - s(x))]`.
pub fn weighted_bce(tape: &mut Tape, logits: Var, target: &Tensor, pos: f64, neg: f64) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return Err(shape_err!("weighted_bce: {:?} vs {:?}", tape.shape(logits), target.shape()));
    }
    let z = tape.value(logits);
    let n = z.len().max(1) as f64;
    let v = z
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &y)| pos * y * softplus(-x) + neg * (1.0 - y) * softplus(x))
        .sum::<f64>()
        / n;
    Ok(tape.apply(&[logits], Tensor::scalar(v), WeightedBce { target: target.clone(), pos, neg }))
}

/// Boundary loss with the 0.95 / 0.05 class weighting.
pub fn weighted_bce_boundary(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    weighted_bce(tape, logits, target, BOUNDARY_POS_WEIGHT, BOUNDARY_NEG_WEIGHT)
}

// ---- metrics --------------------------------------------------------------

/// Dataset-level RMSE: squared errors are pooled over every pixel of every
/// image before the root.
#[derive(Clone, Debug, Default)]
pub struct RmseAccumulator {
    sum_sq: f64,
    count: usize,
}

impl RmseAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("rmse: {} predictions vs {} targets", pred.len(), gt.len()));
        }
        self.sum_sq += pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>();
        self.count += pred.len();
        Ok(())
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.sum_sq / self.count as f64).sqrt()
        }
    }

    pub fn finish(&self) -> MetricValue {
        MetricValue { name: MetricName::Rmse, value: self.value(), count: self.count }
    }
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut acc = RmseAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.value())
}

/// Global confusion matrix, `counts[gt][pred]`.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    images: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], images: 0 }
    }

    pub fn add(&mut self, pred: &SegMap, gt: &SegMap) -> Result<()> {
        if pred.data.len() != gt.data.len() {
            return Err(shape_err!("miou: {} predictions vs {} labels", pred.data.len(), gt.data.len()));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Domain(format!("miou: label {} out of range", p.max(g))));
            }
            self.counts[g * self.classes + p] += 1;
        }
        self.images += 1;
        Ok(())
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let gt_k: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
            let pred_k: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
            let union = gt_k + pred_k - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    pub fn finish(&self) -> MetricValue {
        MetricValue { name: MetricName::Miou, value: self.miou(), count: self.images }
    }
}

pub fn miou(pred: &SegMap, gt: &SegMap, classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.miou())
}

/// Number of thresholds in the ODS sweep: 0.01, 0.02, ..., 0.99.
pub const ODS_THRESHOLDS: usize = 99;

pub fn ods_threshold(i: usize) -> f64 {
    (i + 1) as f64 / 100.0
}

/// Greedy tolerance-1 matching of predicted boundary pixels to ground truth.
/// Returns `(tp, fp, fn)`.
pub fn match_boundaries(pred: &[bool], gt: &BoundaryMap) -> (u64, u64, u64) {
    let (h, w) = (gt.height, gt.width);
    let mut used = vec![false; h * w];
    let (mut tp, mut fp) = (0u64, 0u64);
    const OFFSETS: [(isize, isize); 9] =
        [(0, 0), (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    for y in 0..h {
        for x in 0..w {
            if !pred[y * w + x] {
                continue;
            }
            let hit = OFFSETS.iter().find_map(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return None;
                }
                let j = yy as usize * w + xx as usize;
                (gt.data[j] != 0 && !used[j]).then_some(j)
            });
            match hit {
                Some(j) => {
                    used[j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    let positives = gt.data.iter().filter(|&&v| v != 0).count() as u64;
    (tp, fp, positives - tp)
}

fn f_measure(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Optimal-dataset-scale F-measure: counts are pooled over the dataset for
/// each threshold, and the best threshold's F is reported.
#[derive(Clone, Debug)]
pub struct OdsAccumulator {
    counts: Vec<(u64, u64, u64)>,
    images: usize,
}

impl Default for OdsAccumulator {
    fn default() -> Self {
        Self { counts: vec![(0, 0, 0); ODS_THRESHOLDS], images: 0 }
    }
}

impl OdsAccumulator {
    pub fn add(&mut self, probs: &[f64], gt: &BoundaryMap) -> Result<()> {
        if probs.len() != gt.data.len() {
            return Err(shape_err!("ods: {} probabilities vs {} labels", probs.len(), gt.data.len()));
        }
        let mut mask = vec![false; probs.len()];
        for (i, c) in self.counts.iter_mut().enumerate() {
            let t = ods_threshold(i);
            for (m, &p) in mask.iter_mut().zip(probs) {
                *m = p >= t;
            }
            let (tp, fp, fn_) = match_boundaries(&mask, gt);
            c.0 += tp;
            c.1 += fp;
            c.2 += fn_;
        }
        self.images += 1;
        Ok(())
    }

    /// `(best F, threshold achieving it)`.
    pub fn best(&self) -> (f64, f64) {
        let mut best = (0.0, ods_threshold(0));
        for (i, &(tp, fp, fn_)) in self.counts.iter().enumerate() {
            let f = f_measure(tp, fp, fn_);
            if f > best.0 {
                best = (f, ods_threshold(i));
            }
        }
        best
    }

    pub fn finish(&self) -> MetricValue {
        MetricValue { name: MetricName::OdsF, value: self.best().0, count: self.images }
    }
}

pub fn ods_fscore(pred_probs: &[Vec<f64>], gts: &[BoundaryMap]) -> Result<f64> {
    if pred_probs.len() != gts.len() {
        return Err(shape_err!("ods: {} predictions vs {} ground truths", pred_probs.len(), gts.len()));
    }
    let mut acc = OdsAccumulator::default();
    for (p, g) in pred_probs.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.best().0)
}

pub fn sigmoid_probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}
