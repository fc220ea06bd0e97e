use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, Mode, TrainConfig};
use super::eval::{evaluate_refs, stack_images};
use super::optim::{poly_lr, sgd_step, OptimizerState, SgdHyper};
use crate::autodiff::{GradMap, Tape, Tensor, Var};
use crate::data::{generate, make_splits, ssl_augment_pair_with, target_augment, SplitSpec, SyntheticSample};
use crate::error::{Error, Result};
use crate::nn::{AuxHead, Bind, Model, ParamStore};
use crate::seed;
use crate::ssl::{
    contrastive_loss, densecl_loss, local_positives, project_dense, project_global, rotate_image, rotation_logits,
    rotation_loss, AuxKind, MemoryQueue, MomentumEncoder, RotationLabel,
};
use crate::tasks::{ce_loss_semseg, l1_loss, weighted_bce_boundary, MetricName, SegMap, Task};

/// Salts of the independent random streams derived from the run seed.
pub mod stream {
    pub const TARGET_SAMPLING: u64 = 1;
    pub const AUX_SAMPLING: u64 = 2;
    pub const TARGET_AUGMENT: u64 = 3;
    pub const AUX_AUGMENT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SPLIT: u64 = 6;
}

/// Training images of the home domain plus in-domain and shifted validation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub shifted_val: Vec<SyntheticSample>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let home = cfg.domain_params(&cfg.domain)?;
        let shifted = cfg.domain_params(&cfg.shifted_domain)?;
        Ok(Self {
            train: generate(cfg.n_train, seed::mix(cfg.seed, 1), &home)?,
            val: generate(cfg.n_val, seed::mix(cfg.seed, 2), &home)?,
            shifted_val: generate(cfg.n_val, seed::mix(cfg.seed, 3), &shifted)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Auxiliary loss only.
    Pretrain,
    /// Target losses only.
    Target,
    /// Target losses plus the weighted auxiliary loss.
    Joint,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Pretrain => "pretrain",
            PhaseKind::Target => "target",
            PhaseKind::Joint => "joint",
        }
    }

    pub fn uses_target(self) -> bool {
        !matches!(self, PhaseKind::Pretrain)
    }

    pub fn uses_aux(self) -> bool {
        !matches!(self, PhaseKind::Target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub start: usize,
    pub iters: usize,
}

pub fn plan_phases(cfg: &TrainConfig) -> Vec<Phase> {
    let main = if cfg.effective_aux() == AuxKind::None {
        PhaseKind::Target
    } else {
        match cfg.mode {
            Mode::Baseline | Mode::Multitask | Mode::PretrainFinetune => PhaseKind::Target,
            Mode::Joint | Mode::PretrainJoint | Mode::MultitaskJoint => PhaseKind::Joint,
        }
    };
    let mut phases = Vec::new();
    let mut start = 0;
    if cfg.mode.has_pretrain() {
        phases.push(Phase { kind: PhaseKind::Pretrain, start, iters: cfg.pretrain_iters() });
        start += cfg.pretrain_iters();
    }
    phases.push(Phase { kind: main, start, iters: cfg.max_iters });
    phases
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub phase: PhaseKind,
    /// Global step index across phases.
    pub iter: usize,
    pub lr: f64,
    /// Weight applied to `loss_aux` in `loss_total` on this step.
    pub lambda: f64,
    pub loss_target: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed global steps when the evaluation ran.
    pub iter: usize,
    /// `train` (labeled subset) or `val`.
    pub split: String,
    pub task: Task,
    pub metric: MetricName,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn evals_for<'a>(&'a self, split: &'a str, task: Task) -> impl Iterator<Item = &'a EvalRecord> + 'a {
        self.evals.iter().filter(move |e| e.split == split && e.task == task)
    }
}

/// Per-epoch permutation sampler; draw `j` is a pure function of `(seed, j)`.
#[derive(Clone, Debug)]
struct EpochSampler {
    seed: u64,
    pool: Vec<usize>,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl EpochSampler {
    fn new(seed: u64, pool: Vec<usize>) -> Self {
        Self { seed, pool, epoch: None, perm: Vec::new() }
    }

    fn at(&mut self, j: usize) -> usize {
        let n = self.pool.len();
        let epoch = j / n;
        if self.epoch != Some(epoch) {
            self.perm = self.pool.clone();
            self.perm.shuffle(&mut seed::rng(self.seed, epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[j % n]
    }
}

/// Independent index streams for the labeled subset and the full image pool.
#[derive(Clone, Debug)]
pub struct JointSampler {
    target: EpochSampler,
    aux: EpochSampler,
}

impl JointSampler {
    pub fn new(labeled: &[usize], pool_len: usize, run_seed: u64) -> Result<Self> {
        if labeled.is_empty() || pool_len == 0 {
            return Err(Error::Domain("joint batch: empty split".into()));
        }
        Ok(Self {
            target: EpochSampler::new(seed::mix(run_seed, stream::TARGET_SAMPLING), labeled.to_vec()),
            aux: EpochSampler::new(seed::mix(run_seed, stream::AUX_SAMPLING), (0..pool_len).collect()),
        })
    }

    /// Indices of the target and auxiliary batches at `step`.
    pub fn draw(&mut self, step: usize, sizes: (usize, usize)) -> (Vec<usize>, Vec<usize>) {
        let t = (0..sizes.0).map(|b| self.target.at(step * sizes.0 + b)).collect();
        let a = (0..sizes.1).map(|b| self.aux.at(step * sizes.1 + b)).collect();
        (t, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    /// `[B, 1, H, W]`.
    pub depth: Tensor,
    pub seg: Vec<SegMap>,
    /// `[B, 1, H, W]` of 0/1.
    pub boundary: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AuxBatch {
    None,
    Rotation { indices: Vec<usize>, images: Tensor, labels: Vec<RotationLabel> },
    Views { indices: Vec<usize>, query: Tensor, key: Tensor },
}

impl AuxBatch {
    pub fn indices(&self) -> &[usize] {
        match self {
            AuxBatch::None => &[],
            AuxBatch::Rotation { indices, .. } | AuxBatch::Views { indices, .. } => indices,
        }
    }
}

/// Augments the target draws with the target pipeline and the auxiliary
/// draws with the self-supervised pipeline; every sample gets its own seed.
pub fn build_joint_batch(
    cfg: &TrainConfig,
    train: &[SyntheticSample],
    target_idx: &[usize],
    aux_idx: &[usize],
    step: usize,
) -> Result<(TargetBatch, AuxBatch)> {
    let target_seed = seed::mix(cfg.seed, stream::TARGET_AUGMENT);
    let samples: Vec<SyntheticSample> = target_idx
        .iter()
        .enumerate()
        .map(|(b, &i)| {
            let s = &train[i];
            if cfg.augment {
                target_augment(s, seed::mix(target_seed, (step * target_idx.len() + b) as u64))
            } else {
                s.clone()
            }
        })
        .collect();
    let (h, w) = (samples[0].height(), samples[0].width());
    let n = samples.len();
    let depth = Tensor::new(&[n, 1, h, w], samples.iter().flat_map(|s| s.depth.data.iter().copied()).collect())?;
    let boundary =
        Tensor::new(&[n, 1, h, w], samples.iter().flat_map(|s| s.boundary.data.iter().map(|&b| b as f64)).collect())?;
    let target = TargetBatch {
        indices: target_idx.to_vec(),
        images: stack_images(samples.iter().map(|s| &s.image))?,
        depth,
        seg: samples.into_iter().map(|s| s.seg).collect(),
        boundary,
    };

    let aux_seed = seed::mix(cfg.seed, stream::AUX_AUGMENT);
    let draw_seed = |b: usize| seed::mix(aux_seed, (step * aux_idx.len() + b) as u64);
    let aux = match cfg.effective_aux() {
        AuxKind::None => AuxBatch::None,
        AuxKind::Rot => {
            let mut images = Vec::with_capacity(aux_idx.len());
            let mut labels = Vec::with_capacity(aux_idx.len());
            for (b, &i) in aux_idx.iter().enumerate() {
                let k = RotationLabel::new((draw_seed(b) % RotationLabel::COUNT as u64) as u8)?;
                images.push(rotate_image(&train[i].image, k)?);
                labels.push(k);
            }
            AuxBatch::Rotation { indices: aux_idx.to_vec(), images: stack_images(&images)?, labels }
        }
        AuxKind::Moco | AuxKind::DenseCl => {
            let geom = cfg.crop_geometry();
            let pairs = aux_idx
                .iter()
                .enumerate()
                .map(|(b, &i)| ssl_augment_pair_with(&train[i].image, &geom, &cfg.ssl.jitter, draw_seed(b)))
                .collect::<Result<Vec<_>>>()?;
            AuxBatch::Views {
                indices: aux_idx.to_vec(),
                query: stack_images(pairs.iter().map(|p| &p.view_q))?,
                key: stack_images(pairs.iter().map(|p| &p.view_k))?,
            }
        }
    };
    Ok((target, aux))
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    /// Phase the optimizer state belongs to; momentum restarts with a new phase.
    pub phase_index: usize,
    pub encoder: Option<MomentumEncoder>,
    pub queue: Option<MemoryQueue>,
    pub local_queue: Option<MemoryQueue>,
    /// Completed global steps.
    pub step: usize,
}

/// Observables of one step, beyond its history row.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: IterRecord,
    pub task_losses: Vec<(Task, f64)>,
    pub target_indices: Vec<usize>,
    pub aux_indices: Vec<usize>,
    /// Names present in this step's gradient map.
    pub grad_names: Vec<String>,
    /// Whether the key-branch embedding was grad-enabled (it never should be).
    pub key_requires_grad: bool,
    /// Global keys enqueued after the update, tagged by `aux_indices`.
    pub pushed_keys: Option<Tensor>,
}

struct Computed {
    loss_target: f64,
    loss_aux: f64,
    loss_total: f64,
    lambda: f64,
    task_losses: Vec<(Task, f64)>,
    grads: GradMap,
    active: Vec<String>,
    key_requires_grad: bool,
    keys: Option<Tensor>,
    local_keys: Option<Tensor>,
}

struct AuxOut {
    loss: Var,
    keys: Option<Tensor>,
    local_keys: Option<Tensor>,
    key_requires_grad: bool,
}

pub struct Trainer<'d> {
    config: TrainConfig,
    model: Model,
    data: &'d Datasets,
    labeled: Vec<usize>,
    phases: Vec<Phase>,
    sampler: JointSampler,
    state: TrainState,
    history: TrainHistory,
}

pub fn build_model(cfg: &TrainConfig) -> Result<Model> {
    Model::new(&cfg.arch, &cfg.target_tasks, cfg.data.classes, cfg.effective_aux())
}

/// Labeled subset of the training split for the run seed.
pub fn labeled_indices(cfg: &TrainConfig, n_train: usize) -> Result<Vec<usize>> {
    make_splits(n_train, SplitSpec { fraction: cfg.labeled_fraction, seed: seed::mix(cfg.seed, stream::SPLIT) })
}

impl<'d> Trainer<'d> {
    pub fn new(config: &TrainConfig, data: &'d Datasets) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let model = build_model(&config)?;
        let params = model.init_params(seed::mix(config.seed, stream::INIT));
        let contrastive = config.aux.is_contrastive();
        let dim = config.arch.embed_dim;
        let state = TrainState {
            encoder: contrastive.then(|| MomentumEncoder::new(&params, config.ssl.key_momentum)).transpose()?,
            queue: contrastive.then(|| MemoryQueue::new(config.queue_capacity(), dim)).transpose()?,
            local_queue: (config.aux == AuxKind::DenseCl)
                .then(|| MemoryQueue::new(config.queue_capacity(), dim))
                .transpose()?,
            params,
            optimizer: OptimizerState::new(),
            phase_index: 0,
            step: 0,
        };
        Self::with_state(config, data, state)
    }

    /// Continues from a saved state; `config` must be the run's resolved config.
    pub fn resume(config: &TrainConfig, data: &'d Datasets, state: TrainState) -> Result<Self> {
        config.validate()?;
        Self::with_state(config.resolved(), data, state)
    }

    fn with_state(config: TrainConfig, data: &'d Datasets, state: TrainState) -> Result<Self> {
        let size = config.data.image_size;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Domain("training and validation splits must be non-empty".into()));
        }
        for s in data.train.iter().chain(&data.val).chain(&data.shifted_val) {
            if s.height() != size || s.width() != size {
                return Err(Error::Shape(format!("dataset image {}x{} vs configured {size}", s.height(), s.width())));
            }
        }
        let model = build_model(&config)?;
        model.init_params(0).check_congruent(&state.params)?;
        let contrastive = config.aux.is_contrastive();
        if contrastive != state.encoder.is_some() || contrastive != state.queue.is_some() {
            return Err(Error::Checkpoint("momentum encoder/queue presence does not match the aux task".into()));
        }
        let labeled = labeled_indices(&config, data.train.len())?;
        let sampler = JointSampler::new(&labeled, data.train.len(), config.seed)?;
        let phases = plan_phases(&config);
        Ok(Self { config, model, data, labeled, phases, sampler, state, history: TrainHistory::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.iters).sum()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn phase_at(&self, step: usize) -> Option<(usize, Phase)> {
        self.phases.iter().copied().enumerate().find(|(_, p)| step >= p.start && step < p.start + p.iters)
    }

    /// Evaluates every target task on the labeled subset and the validation split.
    pub fn evaluate_now(&mut self) -> Result<()> {
        let labeled: Vec<&SyntheticSample> = self.labeled.iter().map(|&i| &self.data.train[i]).collect();
        let val: Vec<&SyntheticSample> = self.data.val.iter().collect();
        for task in self.config.target_tasks.clone() {
            for (split, set) in [("train", &labeled), ("val", &val)] {
                let m = evaluate_refs(&self.model, &self.state.params, set, task)?;
                self.history.evals.push(EvalRecord {
                    iter: self.state.step,
                    split: split.into(),
                    task,
                    metric: m.name,
                    value: m.value,
                });
            }
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        let (pi, phase) = self.phase_at(step).ok_or_else(|| Error::Domain("training already finished".into()))?;
        if pi != self.state.phase_index {
            self.state.optimizer = OptimizerState::new();
            self.state.phase_index = pi;
        }
        let local = step - phase.start;
        let every = self.config.eval_every();
        if phase.kind.uses_target() && local % every == 0 {
            self.evaluate_now()?;
        }

        let (t_idx, a_idx) = self.sampler.draw(step, (self.config.batch_target, self.config.batch_aux));
        let (target, aux) = build_joint_batch(&self.config, &self.data.train, &t_idx, &a_idx, step)?;
        let c = self.compute(phase.kind, &target, &aux, step)?;
        let lr = poly_lr(local, phase.iters, self.config.base_lr, self.config.poly_power)?;
        let hyper = SgdHyper { momentum: self.config.momentum, weight_decay: self.config.weight_decay };
        sgd_step(&mut self.state.params, &c.grads, &mut self.state.optimizer, c.active.iter().map(String::as_str), lr, hyper)?;

        if phase.kind.uses_aux() {
            if let Some(enc) = self.state.encoder.as_mut() {
                enc.update(&self.state.params)?;
            }
            if let (Some(q), Some(k)) = (self.state.queue.as_mut(), c.keys.as_ref()) {
                q.push(k, &a_idx)?;
            }
            if let (Some(q), Some(k)) = (self.state.local_queue.as_mut(), c.local_keys.as_ref()) {
                q.push(k, &a_idx)?;
            }
        }
        self.state.step += 1;

        let record = IterRecord {
            phase: phase.kind,
            iter: step,
            lr,
            lambda: c.lambda,
            loss_target: c.loss_target,
            loss_aux: c.loss_aux,
            loss_total: c.loss_total,
        };
        self.history.iters.push(record.clone());
        if phase.kind.uses_target() && local + 1 == phase.iters {
            self.evaluate_now()?;
        }
        Ok(StepReport {
            record,
            task_losses: c.task_losses,
            target_indices: t_idx,
            aux_indices: a_idx,
            grad_names: c.grads.into_keys().collect(),
            key_requires_grad: c.key_requires_grad,
            pushed_keys: if phase.kind.uses_aux() { c.keys } else { None },
        })
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_output(self) -> TrainOutput {
        TrainOutput { config: self.config, model: self.model, state: self.state, history: self.history }
    }

    fn compute(&self, kind: PhaseKind, target: &TargetBatch, aux: &AuxBatch, step: usize) -> Result<Computed> {
        let mut tape = Tape::new();
        let bind = Bind::trainable(&self.state.params);
        let mut task_losses = Vec::new();
        let lt = if kind.uses_target() {
            let (v, per) = self.target_loss(&mut tape, &bind, target)?;
            task_losses = per.into_iter().map(|(t, var)| (t, tape.value(var).data()[0])).collect();
            Some(v)
        } else {
            None
        };
        let ax = if kind.uses_aux() { self.aux_loss(&mut tape, &bind, aux)? } else { None };
        let (total, lambda) = match (lt, &ax) {
            (Some(t), Some(a)) => {
                let lambda = self.config.lambda();
                let weighted = tape.scale(a.loss, lambda);
                (tape.add(t, weighted)?, lambda)
            }
            (Some(t), None) => (t, 0.0),
            (None, Some(a)) => (a.loss, 1.0),
            (None, None) => return Err(Error::Config("phase has neither a target nor an auxiliary loss".into())),
        };
        let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let loss_target = scalar(lt);
        let loss_aux = scalar(ax.as_ref().map(|a| a.loss));
        let loss_total = scalar(Some(total));
        if !(loss_total.is_finite() && loss_target.is_finite() && loss_aux.is_finite()) {
            return Err(Error::NonFinite {
                iter: step,
                detail: format!(
                    "loss_target={loss_target} loss_aux={loss_aux} loss_total={loss_total} (first non-finite op: {})",
                    tape.first_non_finite().unwrap_or("none")
                ),
            });
        }
        let active: Vec<String> = tape.param_names().map(String::from).collect();
        let grads = tape.backward(total)?;
        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { iter: step, detail: format!("gradient of {name}") });
            }
        }
        let (keys, local_keys, key_requires_grad) =
            ax.map_or((None, None, false), |a| (a.keys, a.local_keys, a.key_requires_grad));
        Ok(Computed {
            loss_target,
            loss_aux,
            loss_total,
            lambda,
            task_losses,
            grads,
            active,
            key_requires_grad,
            keys,
            local_keys,
        })
    }

    /// Unweighted sum of the target-task losses.
    fn target_loss(&self, tape: &mut Tape, bind: &Bind, batch: &TargetBatch) -> Result<(Var, Vec<(Task, Var)>)> {
        let x = tape.constant(batch.images.clone());
        let feats = self.model.features(tape, bind, x)?;
        let mut per = Vec::new();
        for &task in &self.config.target_tasks {
            let pred = self.model.predict(tape, bind, task, feats)?;
            let loss = match task {
                Task::Depth => l1_loss(tape, pred, &batch.depth)?,
                Task::Semseg => ce_loss_semseg(tape, pred, &batch.seg.iter().collect::<Vec<_>>())?,
                Task::Boundary => weighted_bce_boundary(tape, pred, &batch.boundary)?,
            };
            per.push((task, loss));
        }
        let mut total = per[0].1;
        for &(_, l) in &per[1..] {
            total = tape.add(total, l)?;
        }
        Ok((total, per))
    }

    fn aux_loss(&self, tape: &mut Tape, bind: &Bind, batch: &AuxBatch) -> Result<Option<AuxOut>> {
        let tau = self.config.ssl.tau;
        match (&self.model.aux, batch) {
            (AuxHead::None, _) | (_, AuxBatch::None) => Ok(None),
            (AuxHead::Rot(head), AuxBatch::Rotation { images, labels, .. }) => {
                let x = tape.constant(images.clone());
                let feats = self.model.features(tape, bind, x)?;
                let logits = rotation_logits(tape, bind, head, feats)?;
                let loss = rotation_loss(tape, logits, labels)?;
                Ok(Some(AuxOut { loss, keys: None, local_keys: None, key_requires_grad: false }))
            }
            (AuxHead::Moco(_) | AuxHead::DenseCl(_), AuxBatch::Views { query, key, .. }) => {
                let enc = self.state.encoder.as_ref().ok_or_else(|| Error::Config("missing momentum encoder".into()))?;
                let queue = self.state.queue.as_ref().ok_or_else(|| Error::Config("missing memory queue".into()))?;
                let global = match &self.model.aux {
                    AuxHead::Moco(h) => h,
                    AuxHead::DenseCl(h) => &h.global,
                    _ => unreachable!(),
                };
                let xq = tape.constant(query.clone());
                let fq = self.model.features(tape, bind, xq)?;
                let q = project_global(tape, bind, global, fq)?;

                // key branch on its own tape: its values enter the loss as constants
                let mut kt = Tape::new();
                let kb = enc.bind();
                let xk = kt.constant(key.clone());
                let fk = self.model.features(&mut kt, &kb, xk)?;
                let kz = project_global(&mut kt, &kb, global, fk)?;
                let mut key_requires_grad = kt.requires_grad(kz);
                let keys = kt.value(kz).clone();
                let lg = contrastive_loss(tape, q, &keys, &queue.keys(), tau)?;

                let AuxHead::DenseCl(head) = &self.model.aux else {
                    return Ok(Some(AuxOut { loss: lg, keys: Some(keys), local_keys: None, key_requires_grad }));
                };
                let local_queue =
                    self.state.local_queue.as_ref().ok_or_else(|| Error::Config("missing local queue".into()))?;
                let qd = project_dense(tape, bind, head, fq)?;
                let kd = project_dense(&mut kt, &kb, head, fk)?;
                key_requires_grad |= kt.requires_grad(kd);
                let (pos, pooled) = local_positives(tape.value(qd), kt.value(kd))?;
                let rows = tape.reshape(qd, pos.shape())?;
                let ll = contrastive_loss(tape, rows, &pos, &local_queue.keys(), tau)?;
                let loss = densecl_loss(tape, lg, ll, self.config.ssl.local_weight)?;
                Ok(Some(AuxOut { loss, keys: Some(keys), local_keys: Some(pooled), key_requires_grad }))
            }
            _ => Err(Error::Config("aux batch does not match the auxiliary head".into())),
        }
    }
}

/// Final state of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    pub history: TrainHistory,
}

impl TrainOutput {
    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }
}

pub fn run_training(config: &TrainConfig, data: &Datasets) -> Result<TrainOutput> {
    let mut t = Trainer::new(config, data)?;
    t.run()?;
    Ok(t.into_output())
}
