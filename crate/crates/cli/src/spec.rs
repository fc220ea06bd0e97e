//! Experiment configuration: a JSON file plus command-line overrides.

use std::collections::BTreeSet;
use std::path::Path;

use clap::Args;
use cotrain_core::ssl::AuxKind;
use cotrain_core::tasks::Task;
use cotrain_core::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable consulted for the master seed when neither the
/// config file nor a flag sets one.
pub const SEED_ENV: &str = "COMPL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomain {
    InDomain,
    Shifted,
}

impl EvalDomain {
    pub fn name(self) -> &'static str {
        match self {
            EvalDomain::InDomain => "in_domain",
            EvalDomain::Shifted => "shifted",
        }
    }
}

/// A base run plus sweep axes; the run set is the cartesian product of the
/// axes, an empty axis meaning the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: TrainConfig,
    pub labeled_fractions: Vec<f64>,
    pub aux: Vec<AuxKind>,
    pub modes: Vec<Mode>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_domains: Vec<EvalDomain>,
    /// When false, `wall_seconds` is written as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            base: TrainConfig::default(),
            labeled_fractions: Vec::new(),
            aux: Vec::new(),
            modes: Vec::new(),
            lambdas: Vec::new(),
            seeds: Vec::new(),
            eval_domains: vec![EvalDomain::InDomain],
            record_wall_time: false,
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentSpec {
    /// Every run of the matrix, resolved and validated, duplicates removed.
    /// Order: mode, aux, lambda, fraction, seed (outermost first).
    pub fn cells(&self) -> Result<Vec<TrainConfig>, CliError> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let b = &self.base;
        let lambdas: Vec<Option<f64>> =
            if self.lambdas.is_empty() { vec![b.lambda] } else { self.lambdas.iter().map(|&l| Some(l)).collect() };
        let mut out: Vec<TrainConfig> = Vec::new();
        for mode in axis(&self.modes, b.mode) {
            for aux in axis(&self.aux, b.aux) {
                for &lambda in &lambdas {
                    for fraction in axis(&self.labeled_fractions, b.labeled_fraction) {
                        for seed in axis(&self.seeds, b.seed) {
                            let cfg = TrainConfig { mode, aux, lambda, labeled_fraction: fraction, seed, ..b.clone() };
                            cfg.validate().map_err(|e| CliError::Config(format!("run {}: {e}", describe(&cfg))))?;
                            let cfg = cfg.resolved();
                            if !out.contains(&cfg) {
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(config_err("name", "must be non-empty without commas, quotes or newlines"));
        }
        if let Some(f) = self.labeled_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(config_err("labeled_fractions", format!("{f} outside (0, 1]")));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(config_err("lambdas", format!("{l} must be finite and non-negative")));
        }
        if self.eval_domains.is_empty() {
            return Err(config_err("eval_domains", "at least one domain is required"));
        }
        if self.eval_domains.iter().collect::<BTreeSet<_>>().len() != self.eval_domains.len() {
            return Err(config_err("eval_domains", "duplicate domain"));
        }
        self.cells().map(|_| ())
    }
}

/// Short run label for progress and error messages.
pub fn describe(cfg: &TrainConfig) -> String {
    let tasks: Vec<&str> = cfg.target_tasks.iter().map(|t| t.name()).collect();
    format!(
        "{} {} aux={} lambda={} fraction={} seed={}",
        cfg.mode,
        tasks.join("+"),
        cfg.effective_aux().name(),
        cfg.lambda(),
        cfg.labeled_fraction,
        cfg.seed
    )
}

/// Comma-separated flag value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

/// Flags that override fields of the base training config.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// Training mode (baseline, joint, pretrain_finetune, pretrain_joint, multitask, multitask_joint).
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Target task(s), comma separated (depth, semseg, boundary).
    #[arg(long = "task")]
    pub tasks: Option<List<Task>>,
    /// Auxiliary task (none, rot, moco, densecl).
    #[arg(long)]
    pub aux: Option<AuxKind>,
    /// Auxiliary loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    /// Images per batch for both the target and the auxiliary batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Labeled fraction of the training split.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Master seed (falls back to the config file, then COMPL_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Disable target-task augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Classes including background.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub key_momentum: Option<f64>,
    #[arg(long)]
    pub local_weight: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(mode => mode);
        set!(aux => aux);
        set!(lr => base_lr);
        set!(momentum => momentum);
        set!(weight_decay => weight_decay);
        set!(poly_power => poly_power);
        set!(max_iters => max_iters);
        set!(fraction => labeled_fraction);
        set!(seed => seed);
        set!(n_train => data.n_train);
        set!(n_val => data.n_val);
        set!(image_size => data.image_size);
        set!(classes => data.classes);
        set!(data_seed => data.seed);
        set!(tau => ssl.tau);
        set!(key_momentum => ssl.key_momentum);
        set!(local_weight => ssl.local_weight);
        if let Some(t) = &self.tasks {
            c.target_tasks = t.0.clone();
        }
        if self.lambda.is_some() {
            c.lambda = self.lambda;
        }
        if self.pretrain_iters.is_some() {
            c.pretrain_iters = self.pretrain_iters;
        }
        if self.eval_every.is_some() {
            c.eval_every = self.eval_every;
        }
        if self.queue_capacity.is_some() {
            c.ssl.queue_capacity = self.queue_capacity;
        }
        if let Some(b) = self.batch {
            c.batch_target = b;
            c.batch_aux = b;
        }
        if self.no_augment {
            c.augment = false;
        }
    }
}

/// Sweep axes given on the command line replace the file's axes.
#[derive(Args, Clone, Debug, Default)]
pub struct AxisFlags {
    /// Experiment name written to every row.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub fractions: Option<List<f64>>,
    #[arg(long = "aux-list")]
    pub aux_list: Option<List<AuxKind>>,
    #[arg(long)]
    pub modes: Option<List<Mode>>,
    #[arg(long)]
    pub lambdas: Option<List<f64>>,
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    /// Also evaluate on the shifted domain.
    #[arg(long)]
    pub zero_shot: bool,
    /// Record per-run wall-clock seconds in the results.
    #[arg(long)]
    pub wall_time: bool,
}

impl AxisFlags {
    pub fn apply(&self, s: &mut ExperimentSpec) {
        if let Some(n) = &self.name {
            s.name = n.clone();
        }
        if let Some(v) = &self.fractions {
            s.labeled_fractions = v.0.clone();
        }
        if let Some(v) = &self.aux_list {
            s.aux = v.0.clone();
        }
        if let Some(v) = &self.modes {
            s.modes = v.0.clone();
        }
        if let Some(v) = &self.lambdas {
            s.lambdas = v.0.clone();
        }
        if let Some(v) = &self.seeds {
            s.seeds = v.0.clone();
        }
        if self.zero_shot && !s.eval_domains.contains(&EvalDomain::Shifted) {
            s.eval_domains.push(EvalDomain::Shifted);
        }
        if self.wall_time {
            s.record_wall_time = true;
        }
    }
}

/// Reads the optional JSON file, applies flag overrides and the seed
/// fallback, and validates the result. Precedence: flag, file, environment, default.
pub fn parse_config(
    path: Option<&Path>,
    train: &TrainFlags,
    axes: &AxisFlags,
    env_seed: Option<&str>,
) -> Result<ExperimentSpec, CliError> {
    let (mut spec, file_has_seed) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let raw: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let has_seed = raw.pointer("/base/seed").is_some();
            let spec: ExperimentSpec =
                serde_json::from_value(raw).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (spec, has_seed)
        }
        None => (ExperimentSpec::default(), false),
    };
    if !file_has_seed {
        if let Some(s) = env_seed.filter(|s| !s.trim().is_empty()) {
            spec.base.seed =
                s.trim().parse().map_err(|_| config_err(SEED_ENV, format!("`{s}` is not an unsigned integer")))?;
        }
    }
    train.apply(&mut spec.base);
    axes.apply(&mut spec);
    spec.validate()?;
    Ok(spec)
}
