use serde::{Deserialize, Serialize};

use crate::data::{CropGeometry, DomainParams, ViewJitter};
use crate::error::{Error, Result};
use crate::nn::ArchConfig;
use crate::ssl::{AuxKind, DEFAULT_LOCAL_WEIGHT};
use crate::tasks::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Joint,
    PretrainFinetune,
    PretrainJoint,
    Multitask,
    MultitaskJoint,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Baseline, Mode::Joint, Mode::PretrainFinetune, Mode::PretrainJoint, Mode::Multitask, Mode::MultitaskJoint];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Joint => "joint",
            Mode::PretrainFinetune => "pretrain_finetune",
            Mode::PretrainJoint => "pretrain_joint",
            Mode::Multitask => "multitask",
            Mode::MultitaskJoint => "multitask_joint",
        }
    }

    /// Modes whose main phase optimizes target losses only.
    pub fn ignores_aux(self) -> bool {
        matches!(self, Mode::Baseline | Mode::Multitask)
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Mode::Multitask | Mode::MultitaskJoint)
    }

    pub fn has_pretrain(self) -> bool {
        matches!(self, Mode::PretrainFinetune | Mode::PretrainJoint)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Synthetic dataset sizes and domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    /// Classes including background.
    pub classes: usize,
    pub domain: String,
    pub shifted_domain: String,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_val: 32,
            image_size: 32,
            classes: 4,
            domain: "a".into(),
            shifted_domain: "b".into(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn domain_params(&self, name: &str) -> Result<DomainParams> {
        let p = DomainParams::by_name(name, self.image_size, self.classes)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("data.n_train and data.n_val must be positive".into()));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config("data.image_size must be a positive multiple of 8".into()));
        }
        self.domain_params(&self.domain)?;
        self.domain_params(&self.shifted_domain)?;
        Ok(())
    }
}

/// Self-supervised branch settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub tau: f64,
    pub key_momentum: f64,
    pub local_weight: f64,
    /// Defaults to the training-set size.
    pub queue_capacity: Option<usize>,
    /// Square crop side; defaults to three quarters of the image.
    pub crop: Option<usize>,
    /// Defaults to 2 when depth is the first target task, else 4.
    pub crop_offset: Option<usize>,
    pub jitter: ViewJitter,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            key_momentum: 0.999,
            local_weight: DEFAULT_LOCAL_WEIGHT,
            queue_capacity: None,
            crop: None,
            crop_offset: None,
            jitter: ViewJitter::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub target_tasks: Vec<Task>,
    pub aux: AuxKind,
    /// Defaults to 0.2 for moco/densecl and 0.05 for rot.
    pub lambda: Option<f64>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iters: usize,
    /// Length of the aux-only phase of pretrain modes; defaults to `max_iters`.
    pub pretrain_iters: Option<usize>,
    pub batch_target: usize,
    pub batch_aux: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    /// Defaults to `max_iters / 10`.
    pub eval_every: Option<usize>,
    /// Target-task flip/scale/crop augmentation.
    pub augment: bool,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub ssl: SslConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Joint,
            target_tasks: vec![Task::Depth],
            aux: AuxKind::DenseCl,
            lambda: None,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            max_iters: 500,
            pretrain_iters: None,
            batch_target: 4,
            batch_aux: 4,
            labeled_fraction: 1.0,
            seed: 1,
            eval_every: None,
            augment: true,
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            ssl: SslConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Auxiliary task actually trained; target-only modes drop it.
    pub fn effective_aux(&self) -> AuxKind {
        if self.mode.ignores_aux() {
            AuxKind::None
        } else {
            self.aux
        }
    }

    pub fn lambda(&self) -> f64 {
        match self.effective_aux() {
            AuxKind::None => 0.0,
            aux => self.lambda.unwrap_or(aux.default_lambda()),
        }
    }

    /// Copy with defaults filled and the aux task normalised for the mode.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.aux = self.effective_aux();
        c.lambda = (c.aux != AuxKind::None).then(|| self.lambda());
        c.pretrain_iters = self.mode.has_pretrain().then(|| self.pretrain_iters());
        c.eval_every = Some(self.eval_every());
        c.ssl.queue_capacity = Some(self.queue_capacity());
        let g = self.crop_geometry();
        c.ssl.crop = Some(g.crop_h);
        c.ssl.crop_offset = Some(g.offset);
        c
    }

    pub fn pretrain_iters(&self) -> usize {
        self.pretrain_iters.unwrap_or(self.max_iters)
    }

    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or(self.max_iters / 10).max(1)
    }

    pub fn queue_capacity(&self) -> usize {
        self.ssl.queue_capacity.unwrap_or(self.data.n_train)
    }

    pub fn crop_geometry(&self) -> CropGeometry {
        let crop = self.ssl.crop.unwrap_or(self.data.image_size * 3 / 4);
        let first = self.target_tasks.first().copied().unwrap_or(Task::Depth);
        let offset = self.ssl.crop_offset.unwrap_or(if first == Task::Depth { 2 } else { 4 });
        CropGeometry { crop_h: crop, crop_w: crop, offset }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.target_tasks.is_empty() {
            return bad("target_tasks", "at least one task is required".into());
        }
        let mut seen = self.target_tasks.clone();
        seen.sort_by_key(|t| t.name());
        seen.dedup();
        if seen.len() != self.target_tasks.len() {
            return bad("target_tasks", "duplicate task".into());
        }
        if self.mode.is_multitask() != (self.target_tasks.len() > 1) {
            return bad(
                "target_tasks",
                format!("mode {} needs {} task", self.mode, if self.mode.is_multitask() { "more than one" } else { "exactly one" }),
            );
        }
        if matches!(self.mode, Mode::PretrainFinetune | Mode::PretrainJoint | Mode::MultitaskJoint) && self.aux == AuxKind::None {
            return bad("aux", format!("mode {} needs an auxiliary task", self.mode));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return bad("lambda", format!("{l} must be finite and non-negative"));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr", format!("{} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return bad("poly_power", format!("{} must be non-negative", self.poly_power));
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be positive".into());
        }
        if self.mode.has_pretrain() && self.pretrain_iters() == 0 {
            return bad("pretrain_iters", "must be positive".into());
        }
        if self.batch_target == 0 || self.batch_aux == 0 {
            return bad("batch_target", "batch sizes must be positive".into());
        }
        if self.batch_aux != self.batch_target {
            return bad("batch_aux", format!("{} must equal batch_target {}", self.batch_aux, self.batch_target));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction", format!("{} outside (0, 1]", self.labeled_fraction));
        }
        if self.eval_every == Some(0) {
            return bad("eval_every", "must be positive".into());
        }
        self.arch.validate()?;
        self.data.validate()?;
        if self.arch.in_channels != 3 {
            return bad("arch.in_channels", "synthetic images have 3 channels".into());
        }
        if self.data.classes > 255 {
            return bad("data.classes", "at most 255 classes".into());
        }
        let s = &self.ssl;
        if !(s.tau.is_finite() && s.tau > 0.0) {
            return bad("ssl.tau", format!("{} must be positive", s.tau));
        }
        if !(0.0..1.0).contains(&s.key_momentum) {
            return bad("ssl.key_momentum", format!("{} outside [0, 1)", s.key_momentum));
        }
        if !(0.0..=1.0).contains(&s.local_weight) {
            return bad("ssl.local_weight", format!("{} outside [0, 1]", s.local_weight));
        }
        if self.queue_capacity() == 0 {
            return bad("ssl.queue_capacity", "must be positive".into());
        }
        let g = self.crop_geometry();
        if g.crop_h < 8 || !g.fits(self.data.image_size, self.data.image_size) {
            return bad("ssl.crop", format!("crop {} with offset {} does not fit {}px images", g.crop_h, g.offset, self.data.image_size));
        }
        let j = &s.jitter;
        if !(j.strength >= 0.0 && j.strength < 1.0 && (0.0..=1.0).contains(&j.blur_prob) && j.blur_sigma.0 > 0.0 && j.blur_sigma.0 <= j.blur_sigma.1) {
            return bad("ssl.jitter", "strength in [0, 1), blur_prob in [0, 1], 0 < sigma_min <= sigma_max".into());
        }
        Ok(())
    }
}
