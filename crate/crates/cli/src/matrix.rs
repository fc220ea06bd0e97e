//! Runs every cell of an experiment and collects its metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use cotrain_core::trainer::{evaluate, run_training, DataConfig, Datasets, TrainConfig, TrainOutput};

use crate::results::ResultRow;
use crate::spec::{describe, EvalDomain, ExperimentSpec};
use crate::CliError;

fn row(spec_name: &str, cfg: &TrainConfig, domain: &str, metric: &str, value: f64, iters: usize, wall: f64) -> ResultRow {
    ResultRow {
        experiment: spec_name.into(),
        mode: cfg.mode.name().into(),
        tasks: cfg.target_tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+"),
        aux: cfg.effective_aux().name().into(),
        lambda: cfg.lambda(),
        fraction: cfg.labeled_fraction,
        seed: cfg.seed,
        eval_domain: domain.into(),
        metric_name: metric.into(),
        metric_value: value,
        iters,
        wall_seconds: wall,
    }
}

fn total_iters(cfg: &TrainConfig) -> usize {
    cfg.max_iters + if cfg.mode.has_pretrain() { cfg.pretrain_iters() } else { 0 }
}

/// Metric rows of a finished run, per eval domain then per task.
pub fn metric_rows(
    name: &str,
    out: &TrainOutput,
    data: &Datasets,
    domains: &[EvalDomain],
    wall: f64,
) -> Result<Vec<ResultRow>, CliError> {
    let mut rows = Vec::new();
    for &d in domains {
        let set = match d {
            EvalDomain::InDomain => &data.val,
            EvalDomain::Shifted => &data.shifted_val,
        };
        for &task in &out.config.target_tasks {
            let m = evaluate(&out.model, out.params(), set, task)?;
            rows.push(row(name, &out.config, d.name(), m.name.name(), m.value, total_iters(&out.config), wall));
        }
    }
    Ok(rows)
}

/// Trains and evaluates every cell in order. Datasets are generated once per
/// distinct data config. A failing cell yields one `error` row and the
/// matrix continues.
pub fn run_matrix(
    spec: &ExperimentSpec,
    mut on_row: impl FnMut(&ResultRow),
    mut progress: impl FnMut(&str),
) -> Result<Vec<ResultRow>, CliError> {
    let cells = spec.cells()?;
    let mut cache: BTreeMap<String, Datasets> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, cfg) in cells.iter().enumerate() {
        let key = serde_json::to_string(&cfg.data).expect("data config serializes");
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), datasets(&cfg.data)?);
        }
        let data = &cache[&key];
        progress(&format!("[{}/{}] {}", i + 1, cells.len(), describe(cfg)));
        let start = Instant::now();
        let result = run_training(cfg, data).map_err(CliError::from).and_then(|out| {
            let wall = if spec.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
            metric_rows(&spec.name, &out, data, &spec.eval_domains, wall)
        });
        let cell_rows = match result {
            Ok(r) => r,
            Err(e) => {
                progress(&format!("  run failed: {e}"));
                let wall = if spec.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
                vec![row(&spec.name, cfg, spec.eval_domains[0].name(), "error", f64::NAN, total_iters(cfg), wall)]
            }
        };
        for r in &cell_rows {
            on_row(r);
        }
        progress(&format!("  done in {:.1}s", start.elapsed().as_secs_f64()));
        rows.extend(cell_rows);
    }
    Ok(rows)
}

pub fn datasets(cfg: &DataConfig) -> Result<Datasets, CliError> {
    Ok(Datasets::generate(cfg)?)
}
