//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use cotrain_core::data::save_split;
use cotrain_core::gradcheck_suite::{faulty_case, registry, run_suite, GRADCHECK_TOL, GRADCHECK_TRIALS};
use cotrain_core::trainer::{
    build_model, load_checkpoint, save_checkpoint, DataConfig, Datasets, TrainConfig, TrainOutput, TrainState,
    Trainer,
};

use crate::matrix::{datasets, metric_rows, run_matrix};
use crate::results::{emit_results, Format, ResultRow};
use crate::spec::{describe, parse_config, AxisFlags, EvalDomain, TrainFlags, SEED_ENV};
use crate::CliError;

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one configuration and report its final metrics.
    Train(TrainArgs),
    /// Train every cell of an experiment matrix.
    Sweep(SweepArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every layer and loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic train / val / shifted splits to a directory.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Results file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// JSON experiment file; only its `base` run is trained.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Also evaluate on the shifted domain.
    #[arg(long)]
    pub zero_shot: bool,
    /// Write per-iteration losses and periodic evaluations as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Save the final training state here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a saved state instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub axes: AxisFlags,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub zero_shot: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = GRADCHECK_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn domains(zero_shot: bool) -> Vec<EvalDomain> {
    let mut d = vec![EvalDomain::InDomain];
    if zero_shot {
        d.push(EvalDomain::Shifted);
    }
    d
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let axes = AxisFlags { zero_shot: a.zero_shot, ..AxisFlags::default() };
    let spec = parse_config(a.config.as_deref(), &a.flags, &axes, env_seed().as_deref())?;
    let cfg = spec.base.resolved();
    cfg.validate()?;
    let data = datasets(&cfg.data)?;
    progress(&describe(&cfg));
    let start = Instant::now();
    let mut trainer = match &a.resume {
        Some(p) => {
            let (saved, state) = load(p)?;
            if saved != cfg {
                return Err(CliError::Config(format!("{}: checkpoint was written by a different configuration", p.display())));
            }
            Trainer::resume(&cfg, &data, state)?
        }
        None => Trainer::new(&cfg, &data)?,
    };
    trainer.run()?;
    let out = trainer.into_output();
    progress(&format!("done in {:.1}s", start.elapsed().as_secs_f64()));
    if let Some(p) = &a.checkpoint {
        save_checkpoint(p, &out.config, &out.state)?;
    }
    if let Some(p) = &a.history {
        write_json(p, &out.history)?;
    }
    let wall = if spec.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let rows = metric_rows(&spec.name, &out, &data, &spec.eval_domains, wall)?;
    emit_results(&rows, a.output.format, a.output.out.as_deref())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let spec = parse_config(a.config.as_deref(), &a.flags, &a.axes, env_seed().as_deref())?;
    let rows = run_matrix(&spec, |_| {}, progress)?;
    emit_results(&rows, a.output.format, a.output.out.as_deref())?;
    let failed = rows.iter().filter(|r| r.metric_name == "error").count();
    if failed > 0 {
        return Err(CliError::Failure(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn load(path: &Path) -> Result<(TrainConfig, TrainState), CliError> {
    load_checkpoint(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (config, state) = load(&a.checkpoint)?;
    let data = Datasets::generate(&config.data)?;
    let model = build_model(&config)?;
    let out = TrainOutput { config, model, state, history: Default::default() };
    let rows: Vec<ResultRow> = metric_rows("eval", &out, &data, &domains(a.zero_shot), 0.0)?
        .into_iter()
        .map(|mut r| {
            r.iters = out.state.step;
            r
        })
        .collect();
    emit_results(&rows, a.output.format, a.output.out.as_deref())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Config("trials: must be at least 1".into()));
    }
    let mut cases = registry();
    if a.inject_fault {
        cases.push(faulty_case());
    }
    let reports = run_suite(&cases, a.trials, a.seed);
    let mut failing = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        match &r.error {
            Some(e) => println!("{status:4} {:24} error: {e}", r.name),
            None => println!("{status:4} {:24} max rel err {:.3e}", r.name, r.worst),
        }
        if !r.passed() {
            failing.push(r.name);
        }
    }
    if failing.is_empty() {
        println!("all {} ops within {GRADCHECK_TOL:e}", reports.len());
        Ok(())
    } else {
        Err(CliError::Failure(format!("gradient check failed for: {}", failing.join(", "))))
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = DataConfig::default();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(n_train, n_val, image_size, classes);
    if let Some(s) = a.data_seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Datasets::generate(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    let in_domain = cfg.domain_params(&cfg.domain)?;
    let shifted = cfg.domain_params(&cfg.shifted_domain)?;
    let splits = [("train", &data.train, &in_domain), ("val", &data.val, &in_domain), ("shifted_val", &data.shifted_val, &shifted)];
    for (name, set, params) in splits {
        let path = a.out.join(format!("{name}.bin"));
        save_split(&path, set, Some(cfg.seed), Some(params))?;
        progress(&format!("wrote {} ({} images)", path.display(), set.len()));
    }
    Ok(())
}
