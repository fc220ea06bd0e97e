//! Self-supervised auxiliary objectives: rotation prediction, global
//! momentum contrast, and dense (global plus local) contrast.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{transpose_matrix, Function, Reduction, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{functional, Bind, DenseClHead, MocoHead, Model, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    None,
    Rot,
    Moco,
    #[serde(rename = "densecl")]
    DenseCl,
}

impl AuxKind {
    pub const ALL: [AuxKind; 4] = [AuxKind::None, AuxKind::Rot, AuxKind::Moco, AuxKind::DenseCl];

    pub fn name(self) -> &'static str {
        match self {
            AuxKind::None => "none",
            AuxKind::Rot => "rot",
            AuxKind::Moco => "moco",
            AuxKind::DenseCl => "densecl",
        }
    }

    /// Default auxiliary loss weight.
    pub fn default_lambda(self) -> f64 {
        match self {
            AuxKind::None => 0.0,
            AuxKind::Rot => 0.05,
            AuxKind::Moco | AuxKind::DenseCl => 0.2,
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, AuxKind::Moco | AuxKind::DenseCl)
    }
}

impl fmt::Display for AuxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AuxKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aux `{s}` (expected none, rot, moco or densecl)")))
    }
}

// ---- rotation -------------------------------------------------------------

/// Counter-clockwise rotation by `k * 90` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const COUNT: usize = 4;

    pub fn new(k: u8) -> Result<Self> {
        if k < 4 {
            Ok(Self(k))
        } else {
            Err(Error::Domain(format!("rotation label {k} out of range 0..4")))
        }
    }

    pub fn k(self) -> u8 {
        self.0
    }

    pub fn compose(self, other: RotationLabel) -> RotationLabel {
        RotationLabel((self.0 + other.0) % 4)
    }
}

/// One counter-clockwise quarter turn of `planes` planes of `h x w`:
/// pixel `(r, c)` lands at `(w - 1 - c, r)` of a `w x h` plane.
fn quarter_turn(data: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[(w - 1 - c) * h + r] = src[r * w + c];
            }
        }
    }
    out
}

/// Rotates `img[C, H, W]` counter-clockwise by `k * 90` degrees.
pub fn rotate_image(img: &Tensor, k: RotationLabel) -> Result<Tensor> {
    let [c, mut h, mut w] = match *img.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(shape_err!("rotate_image expects [C, H, W], got {:?}", img.shape())),
    };
    let mut data = img.data().to_vec();
    for _ in 0..k.k() {
        data = quarter_turn(&data, c, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

/// Mean softmax cross-entropy over the four rotation classes.
pub fn rotation_loss(tape: &mut Tape, logits: Var, labels: &[RotationLabel]) -> Result<Var> {
    if tape.shape(logits).get(1) != Some(&RotationLabel::COUNT) {
        return Err(shape_err!("rotation_loss expects [N, 4] logits, got {:?}", tape.shape(logits)));
    }
    let labels: Vec<usize> = labels.iter().map(|l| l.k() as usize).collect();
    crate::tasks::cross_entropy(tape, logits, &labels)
}

/// Rotation logits `[N, 4]` from shared features.
pub fn rotation_logits(tape: &mut Tape, p: &Bind, head: &crate::nn::RotHead, feats: Var) -> Result<Var> {
    let pooled = functional::global_avg_pool(tape, feats)?;
    head.fc.forward(tape, p, pooled)
}

// ---- momentum encoder -----------------------------------------------------

/// Key-branch parameters tracking the query branch by exponential moving
/// average. The key parameters are only ever placed on a tape as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoder {
    pub key: ParamStore,
    pub momentum: f64,
}

impl MomentumEncoder {
    /// Copies the trunk and auxiliary-head parameters of `query`.
    pub fn new(query: &ParamStore, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        let mut key = ParamStore::new();
        for (name, t) in query.iter().filter(|(n, _)| Model::is_query_param(n)) {
            key.insert(name.clone(), t.clone());
        }
        Ok(Self { key, momentum })
    }

    /// `key <- m * key + (1 - m) * query` for every key parameter.
    pub fn update(&mut self, query: &ParamStore) -> Result<()> {
        let m = self.momentum;
        for (name, k) in self.key.iter() {
            let q = query.get(name)?;
            if q.shape() != k.shape() {
                return Err(shape_err!("momentum update: {name} {:?} vs {:?}", k.shape(), q.shape()));
            }
        }
        for (name, k) in self.key.iter_mut() {
            let q = query.get(name)?;
            for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }

    pub fn bind(&self) -> Bind<'_> {
        Bind::frozen(&self.key)
    }
}

// ---- memory queue ---------------------------------------------------------

/// FIFO ring of unit-norm key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: Vec<f64>,
    sources: Vec<usize>,
    write_ptr: usize,
    filled: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("memory queue capacity and dim must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: vec![0.0; capacity * dim],
            sources: vec![usize::MAX; capacity],
            write_ptr: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    /// Enqueues one row per key, renormalised to unit length, overwriting the
    /// oldest entries once full. `sources` tags each key with its image index.
    pub fn push(&mut self, keys: &Tensor, sources: &[usize]) -> Result<()> {
        let shape = keys.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(shape_err!("queue push: keys {shape:?}, queue dim {}", self.dim));
        }
        if sources.len() != shape[0] {
            return Err(shape_err!("queue push: {} keys with {} source tags", shape[0], sources.len()));
        }
        for (row, &src) in keys.data().chunks(self.dim).zip(sources) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= f64::MIN_POSITIVE {
                return Err(Error::Domain("queue push: zero key".into()));
            }
            let slot = &mut self.entries[self.write_ptr * self.dim..(self.write_ptr + 1) * self.dim];
            for (d, v) in slot.iter_mut().zip(row) {
                *d = v / norm;
            }
            self.sources[self.write_ptr] = src;
            self.write_ptr = (self.write_ptr + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys as `[len, dim]`, in slot order.
    pub fn keys(&self) -> Tensor {
        Tensor::from_parts(vec![self.filled, self.dim], self.entries[..self.filled * self.dim].to_vec())
    }

    fn oldest_first(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.filled < self.capacity { 0 } else { self.write_ptr };
        (0..self.filled).map(move |i| (start + i) % self.capacity)
    }

    /// Stored keys ordered from oldest to newest.
    pub fn keys_in_order(&self) -> Vec<Vec<f64>> {
        self.oldest_first()
            .map(|s| self.entries[s * self.dim..(s + 1) * self.dim].to_vec())
            .collect()
    }

    /// Source tags ordered from oldest to newest.
    pub fn sources_in_order(&self) -> Vec<usize> {
        self.oldest_first().map(|s| self.sources[s]).collect()
    }

    pub(crate) fn raw_parts(&self) -> (&[f64], &[usize]) {
        (&self.entries, &self.sources)
    }

    pub(crate) fn from_raw_parts(
        capacity: usize,
        dim: usize,
        entries: Vec<f64>,
        sources: Vec<usize>,
        write_ptr: usize,
        filled: usize,
    ) -> Result<Self> {
        if entries.len() != capacity * dim || sources.len() != capacity || write_ptr >= capacity.max(1) || filled > capacity
        {
            return Err(Error::Checkpoint("inconsistent memory queue state".into()));
        }
        Ok(Self { capacity, dim, entries, sources, write_ptr, filled })
    }
}

// ---- InfoNCE --------------------------------------------------------------

struct InfoNce {
    tau: f64,
    probs: Vec<f64>,
    k: usize,
}

impl Function for InfoNce {
    fn name(&self) -> &'static str {
        "info_nce"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let n = x[0].len();
        let k1 = self.k + 1;
        let scale = g.data()[0] / (n as f64 * self.tau);
        let dpos = needs[0].then(|| {
            let d = (0..n).map(|r| (self.probs[r * k1] - 1.0) * scale).collect();
            Tensor::from_parts(vec![n], d)
        });
        let dneg = needs[1].then(|| {
            let mut d = Vec::with_capacity(n * self.k);
            for r in 0..n {
                d.extend(self.probs[r * k1 + 1..(r + 1) * k1].iter().map(|p| p * scale));
            }
            Tensor::from_parts(vec![n, self.k], d)
        });
        vec![dpos, dneg]
    }
}

/// Mean over rows of `-log(exp(s+/t) / (exp(s+/t) + sum_k exp(s_k/t)))`.
pub fn info_nce(tape: &mut Tape, pos_sim: Var, neg_sims: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("info_nce: temperature {tau} must be positive")));
    }
    let (sp, sn) = (tape.shape(pos_sim).to_vec(), tape.shape(neg_sims).to_vec());
    if sp.len() != 1 || sn.len() != 2 || sn[0] != sp[0] || sp[0] == 0 {
        return Err(shape_err!("info_nce: positives {sp:?}, negatives {sn:?}"));
    }
    let (n, k) = (sn[0], sn[1]);
    let pos = tape.value(pos_sim).data();
    let neg = tape.value(neg_sims).data();
    let mut probs = vec![0.0; n * (k + 1)];
    let mut total = 0.0;
    let mut logits = vec![0.0; k + 1];
    for r in 0..n {
        logits[0] = pos[r] / tau;
        for j in 0..k {
            logits[j + 1] = neg[r * k + j] / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];
        for (p, l) in probs[r * (k + 1)..(r + 1) * (k + 1)].iter_mut().zip(&logits) {
            *p = (l - lse).exp();
        }
    }
    let loss = Tensor::scalar(total / n as f64);
    Ok(tape.apply(&[pos_sim, neg_sims], loss, InfoNce { tau, probs, k }))
}

/// InfoNCE of query rows `q[M, D]` against fixed positive keys `pos[M, D]`
/// and a shared negative set `negatives[K, D]`.
pub fn contrastive_loss(tape: &mut Tape, q: Var, pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    if pos.shape() != sq.as_slice() || negatives.ndim() != 2 || negatives.shape()[1] != sq[1] {
        return Err(shape_err!(
            "contrastive_loss: q {sq:?}, positives {:?}, negatives {:?}",
            pos.shape(),
            negatives.shape()
        ));
    }
    let kp = tape.constant(pos.clone());
    let prod = tape.mul(q, kp)?;
    let s_pos = tape.reduce(Reduction::Sum, prod, &[1])?;
    let negs_t = tape.constant(transpose_matrix(negatives)?);
    let s_neg = tape.matmul(q, negs_t)?;
    info_nce(tape, s_pos, s_neg, tau)
}

// ---- projections ----------------------------------------------------------

/// Global embedding: pool, two-layer MLP, unit rows `[N, D]`.
pub fn project_global(tape: &mut Tape, p: &Bind, head: &MocoHead, feats: Var) -> Result<Var> {
    let z = head.forward(tape, p, feats)?;
    functional::l2_normalize_rows(tape, z)
}

/// Local embeddings on an `S x S` grid: `[N, S * S, D]`, unit along `D`.
pub fn project_dense(tape: &mut Tape, p: &Bind, head: &DenseClHead, feats: Var) -> Result<Var> {
    let n = tape.shape(feats)[0];
    let rows = head.forward_local(tape, p, feats)?;
    let d = tape.shape(rows)[1];
    let z = functional::l2_normalize_rows(tape, rows)?;
    tape.reshape(z, &[n, head.grid * head.grid, d])
}

/// For every query cell, the key cell of highest cosine similarity; ties go
/// to the lowest index.
pub fn dense_match(q_cells: &[f64], k_cells: &[f64], dim: usize) -> Result<Vec<usize>> {
    if dim == 0 || q_cells.len() % dim != 0 || k_cells.len() % dim != 0 || k_cells.is_empty() {
        return Err(shape_err!("dense_match: cell buffers do not split into rows of {dim}"));
    }
    Ok(q_cells
        .chunks(dim)
        .map(|q| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, k) in k_cells.chunks(dim).enumerate() {
                let s: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect())
}

/// Default weight of the local term.
pub const DEFAULT_LOCAL_WEIGHT: f64 = 0.7;

fn check_local_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("local weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - w) * global + w * local`.
pub fn densecl_loss(tape: &mut Tape, global: Var, local: Var, w_local: f64) -> Result<Var> {
    check_local_weight(w_local)?;
    let g = tape.scale(global, 1.0 - w_local);
    let l = tape.scale(local, w_local);
    tape.add(g, l)
}

/// Scalar form of [`densecl_loss`].
pub fn densecl_combine(global: f64, local: f64, w_local: f64) -> Result<f64> {
    check_local_weight(w_local)?;
    Ok((1.0 - w_local) * global + w_local * local)
}

/// Builds the local positives: for every query cell of every image, the
/// matched key cell. Also returns one pooled, renormalised key per image for
/// the local negative queue.
pub fn local_positives(q_cells: &Tensor, k_cells: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = q_cells.shape();
    if s.len() != 3 || k_cells.shape() != s {
        return Err(shape_err!("local_positives: {:?} vs {:?}", s, k_cells.shape()));
    }
    let (n, cells, d) = (s[0], s[1], s[2]);
    let mut pos = Vec::with_capacity(n * cells * d);
    let mut pooled = Vec::with_capacity(n * d);
    for i in 0..n {
        let q = &q_cells.data()[i * cells * d..(i + 1) * cells * d];
        let k = &k_cells.data()[i * cells * d..(i + 1) * cells * d];
        for j in dense_match(q, k, d)? {
            pos.extend_from_slice(&k[j * d..(j + 1) * d]);
        }
        let mut mean = vec![0.0; d];
        for row in k.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Err(Error::Domain("local_positives: pooled key vanished".into()));
        }
        pooled.extend(mean.iter().map(|v| v / norm));
    }
    Ok((Tensor::from_parts(vec![n * cells, d], pos), Tensor::from_parts(vec![n, d], pooled)))
}

#[cfg(test)]
mod tests;
