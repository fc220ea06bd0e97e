//! Result rows and their CSV / JSON encodings.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::CliError;

/// Column order of every results file.
pub const HEADER: [&str; 12] = [
    "experiment",
    "mode",
    "tasks",
    "aux",
    "lambda",
    "fraction",
    "seed",
    "eval_domain",
    "metric_name",
    "metric_value",
    "iters",
    "wall_seconds",
];

/// One metric of one run on one evaluation domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub mode: String,
    /// Target tasks joined with `+`.
    pub tasks: String,
    pub aux: String,
    pub lambda: f64,
    pub fraction: f64,
    pub seed: u64,
    pub eval_domain: String,
    /// Metric name, or `error` for a failed run.
    pub metric_name: String,
    pub metric_value: f64,
    pub iters: usize,
    pub wall_seconds: f64,
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl ResultRow {
    /// Field values in [`HEADER`] order, floats as [`fmt_g6`].
    pub fn fields(&self) -> [String; 12] {
        [
            self.experiment.clone(),
            self.mode.clone(),
            self.tasks.clone(),
            self.aux.clone(),
            fmt_g6(self.lambda),
            fmt_g6(self.fraction),
            self.seed.to_string(),
            self.eval_domain.clone(),
            self.metric_name.clone(),
            fmt_g6(self.metric_value),
            self.iters.to_string(),
            fmt_g6(self.wall_seconds),
        ]
    }

    fn json(&self) -> Value {
        let num = |x: f64| {
            fmt_g6(x).parse::<f64>().ok().and_then(Number::from_f64).map_or(Value::Null, Value::Number)
        };
        let mut m = Map::new();
        m.insert("experiment".into(), self.experiment.clone().into());
        m.insert("mode".into(), self.mode.clone().into());
        m.insert("tasks".into(), self.tasks.clone().into());
        m.insert("aux".into(), self.aux.clone().into());
        m.insert("lambda".into(), num(self.lambda));
        m.insert("fraction".into(), num(self.fraction));
        m.insert("seed".into(), self.seed.into());
        m.insert("eval_domain".into(), self.eval_domain.clone().into());
        m.insert("metric_name".into(), self.metric_name.clone().into());
        m.insert("metric_value".into(), num(self.metric_value));
        m.insert("iters".into(), self.iters.into());
        m.insert("wall_seconds".into(), num(self.wall_seconds));
        Value::Object(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_json<W: Write>(rows: &[ResultRow], mut out: W) -> Result<(), CliError> {
    let v = Value::Array(rows.iter().map(ResultRow::json).collect());
    serde_json::to_writer_pretty(&mut out, &v).map_err(|e| CliError::Io(e.to_string()))?;
    out.write_all(b"\n").map_err(|e| CliError::Io(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

pub fn encode(rows: &[ResultRow], format: Format) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => write_csv(rows, &mut buf)?,
        Format::Json => write_json(rows, &mut buf)?,
    }
    Ok(buf)
}

/// Writes rows to `path`, or to standard output when `path` is `None`.
pub fn emit_results(rows: &[ResultRow], format: Format, path: Option<&std::path::Path>) -> Result<(), CliError> {
    let bytes = encode(rows, format)?;
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(&bytes).map_err(|e| CliError::Io(e.to_string())),
    }
}
