use std::path::Path;
use std::process::Command;

use cotrain_cli::matrix::run_matrix;
use cotrain_cli::results::{encode, fmt_g6, Format, ResultRow, HEADER};
use cotrain_cli::spec::{parse_config, AxisFlags, EvalDomain, ExperimentSpec, List, TrainFlags};
use cotrain_cli::CliError;
use cotrain_core::ssl::AuxKind;
use cotrain_core::tasks::Task;
use cotrain_core::trainer::{Mode, TrainConfig};

const GOLDEN_HEADER: &str =
    "experiment,mode,tasks,aux,lambda,fraction,seed,eval_domain,metric_name,metric_value,iters,wall_seconds\n";

fn depth_flags() -> TrainFlags {
    TrainFlags { tasks: Some(List(vec![Task::Depth])), ..TrainFlags::default() }
}

fn tiny_spec() -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    s.base.max_iters = 3;
    s.base.data.n_train = 8;
    s.base.data.n_val = 4;
    s.base.data.image_size = 16;
    s.base.batch_target = 2;
    s.base.batch_aux = 2;
    s
}

fn sample_row(i: u64) -> ResultRow {
    ResultRow {
        experiment: "exp".into(),
        mode: "joint".into(),
        tasks: "depth".into(),
        aux: "densecl".into(),
        lambda: 0.2,
        fraction: 0.1,
        seed: i,
        eval_domain: "in_domain".into(),
        metric_name: "rmse".into(),
        metric_value: 1.0 / (i as f64 + 3.0),
        iters: 500,
        wall_seconds: 0.0,
    }
}

#[test]
fn empty_config_with_task_gives_defaults() {
    let spec = parse_config(None, &depth_flags(), &AxisFlags::default(), None).unwrap();
    let expected = TrainConfig { target_tasks: vec![Task::Depth], ..TrainConfig::default() };
    assert_eq!(spec.base, expected);
    assert_eq!(spec.eval_domains, vec![EvalDomain::InDomain]);
    assert_eq!(spec.cells().unwrap().len(), 1);
}

#[test]
fn negative_lambda_is_rejected() {
    let flags = TrainFlags { lambda: Some(-1.0), ..depth_flags() };
    let err = parse_config(None, &flags, &AxisFlags::default(), None).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("lambda"));
}

#[test]
fn flag_overrides_file_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(&path, r#"{"base": {"base_lr": 0.01, "target_tasks": ["depth"]}}"#).unwrap();
    let flags = TrainFlags { lr: Some(0.02), ..TrainFlags::default() };
    let spec = parse_config(Some(&path), &flags, &AxisFlags::default(), Some("9")).unwrap();
    assert_eq!(spec.base.base_lr, 0.02);
    assert_eq!(spec.base.seed, 9);

    let spec = parse_config(Some(&path), &TrainFlags::default(), &AxisFlags::default(), None).unwrap();
    assert_eq!(spec.base.base_lr, 0.01);

    std::fs::write(&path, r#"{"base": {"seed": 4}}"#).unwrap();
    let spec = parse_config(Some(&path), &TrainFlags::default(), &AxisFlags::default(), Some("9")).unwrap();
    assert_eq!(spec.base.seed, 4);
    let flags = TrainFlags { seed: Some(5), ..TrainFlags::default() };
    let spec = parse_config(Some(&path), &flags, &AxisFlags::default(), Some("9")).unwrap();
    assert_eq!(spec.base.seed, 5);
}

#[test]
fn bad_env_seed_and_unknown_key_are_config_errors() {
    let err = parse_config(None, &depth_flags(), &AxisFlags::default(), Some("abc")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(&path, r#"{"base": {"learning_rate": 0.1}}"#).unwrap();
    let err = parse_config(Some(&path), &TrainFlags::default(), &AxisFlags::default(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = parse_config(Some(&dir.path().join("missing.json")), &TrainFlags::default(), &AxisFlags::default(), None)
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn golden_header_and_row_layout() {
    assert_eq!(HEADER.join(",") + "\n", GOLDEN_HEADER);
    let empty = String::from_utf8(encode(&[], Format::Csv).unwrap()).unwrap();
    assert_eq!(empty, GOLDEN_HEADER);
    let one = String::from_utf8(encode(&[sample_row(1)], Format::Csv).unwrap()).unwrap();
    assert_eq!(one, format!("{GOLDEN_HEADER}exp,joint,depth,densecl,0.2,0.1,1,in_domain,rmse,0.25,500,0\n"));
    assert_eq!(one.lines().count(), 2);
}

#[test]
fn six_significant_digits() {
    let cases = [
        (0.0, "0"),
        (1.0, "1"),
        (0.1, "0.1"),
        (1.0 / 3.0, "0.333333"),
        (2.0 / 3.0, "0.666667"),
        (123456.7, "123457"),
        (1234567.0, "1.23457e+06"),
        (0.0001, "0.0001"),
        (0.00001234, "1.234e-05"),
        (-2.5, "-2.5"),
        (999999.5, "1e+06"),
        (f64::NAN, "nan"),
    ];
    for (x, want) in cases {
        assert_eq!(fmt_g6(x), want, "{x}");
    }
}

#[test]
fn csv_and_json_agree_field_for_field() {
    let mut rows: Vec<ResultRow> = (0..4).map(sample_row).collect();
    rows[2].metric_value = f64::NAN;
    rows[2].metric_name = "error".into();
    let csv_bytes = encode(&rows, Format::Csv).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&encode(&rows, Format::Json).unwrap()).unwrap();
    let objs = json.as_array().unwrap();
    let mut reader = csv::Reader::from_reader(csv_bytes.as_slice());
    let csv_rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(objs.len(), csv_rows.len());
    for (obj, rec) in objs.iter().zip(&csv_rows) {
        let obj = obj.as_object().unwrap();
        assert_eq!(obj.keys().collect::<std::collections::BTreeSet<_>>(), HEADER.iter().map(|h| h.to_string()).collect::<Vec<_>>().iter().collect());
        for (key, field) in HEADER.iter().zip(rec.iter()) {
            match &obj[*key] {
                serde_json::Value::String(s) => assert_eq!(s, field, "{key}"),
                serde_json::Value::Null => assert_eq!(field, "nan", "{key}"),
                v => {
                    let a = v.as_f64().unwrap();
                    let b: f64 = field.parse().unwrap();
                    assert_eq!(a, b, "{key}");
                }
            }
        }
    }
}

#[test]
fn matrix_counts_cells_and_rows() {
    let mut spec = tiny_spec();
    spec.labeled_fractions = vec![0.5, 1.0];
    spec.aux = vec![AuxKind::Rot, AuxKind::Moco];
    let mut streamed = Vec::new();
    let rows = run_matrix(&spec, |r| streamed.push(r.clone()), |_| {}).unwrap();
    assert_eq!(spec.cells().unwrap().len(), 4);
    assert_eq!(rows.len(), 4);
    assert_eq!(streamed, rows);
    assert!(rows.iter().all(|r| r.metric_name == "rmse" && r.metric_value.is_finite()));
}

#[test]
fn baseline_cells_are_deduplicated_across_aux_and_lambda() {
    let mut spec = tiny_spec();
    spec.modes = vec![Mode::Baseline, Mode::Joint];
    spec.aux = vec![AuxKind::Rot, AuxKind::DenseCl];
    spec.lambdas = vec![0.1, 0.5];
    let cells = spec.cells().unwrap();
    assert_eq!(cells.len(), 1 + 4);
    assert_eq!(cells.iter().filter(|c| c.mode == Mode::Baseline).count(), 1);
}

#[test]
fn seed_union_is_disjoint_union() {
    let mut spec = tiny_spec();
    spec.aux = vec![AuxKind::Moco];
    spec.seeds = vec![3, 4];
    let both = run_matrix(&spec, |_| {}, |_| {}).unwrap();
    let mut singles = Vec::new();
    for s in [3, 4] {
        spec.seeds = vec![s];
        singles.extend(run_matrix(&spec, |_| {}, |_| {}).unwrap());
    }
    assert_eq!(both, singles);
}

#[test]
fn zero_shot_emits_both_domains_per_run() {
    let mut spec = tiny_spec();
    spec.seeds = vec![1, 2];
    spec.eval_domains = vec![EvalDomain::InDomain, EvalDomain::Shifted];
    let rows = run_matrix(&spec, |_| {}, |_| {}).unwrap();
    assert_eq!(rows.len(), 4);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].eval_domain, "in_domain");
        assert_eq!(pair[1].eval_domain, "shifted");
        assert_eq!(pair[0].seed, pair[1].seed);
    }
}

#[test]
fn failing_cell_becomes_error_row() {
    let mut spec = tiny_spec();
    spec.base.base_lr = 1e200;
    spec.seeds = vec![1, 2];
    let rows = run_matrix(&spec, |_| {}, |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.metric_name == "error" && r.metric_value.is_nan()), "{rows:?}");
}

// ---- binary -----------------------------------------------------------------

fn cotrain(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cotrain"))
        .args(args)
        .current_dir(dir)
        .env_remove("COMPL_SEED")
        .output()
        .unwrap()
}

const TINY: [&str; 10] =
    ["--n-train", "8", "--n-val", "4", "--image-size", "16", "--max-iters", "3", "--batch", "2"];

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cotrain(&[&["train", "--task", "depth"], &TINY[..]].concat(), dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(stdout.starts_with(GOLDEN_HEADER));
    assert_eq!(stdout.lines().count(), 2);

    let bad = cotrain(&["train", "--task", "depth", "--lambda", "-1"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    let bad = cotrain(&["train", "--task", "depth,semseg"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    let missing = cotrain(&["eval", "--checkpoint", "nope.ckpt"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    let unwritable = cotrain(&[&["train", "--task", "depth", "--out", "no/such/dir/r.csv"], &TINY[..]].concat(), dir.path());
    assert_eq!(unwritable.status.code(), Some(3));
}

#[test]
fn gradcheck_reports_every_op_and_names_faults() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cotrain(&["gradcheck", "--trials", "1"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    let names: Vec<&str> = cotrain_core::gradcheck_suite::registry().iter().map(|c| c.name).collect();
    for n in &names {
        let hits = text.lines().filter(|l| l.split_whitespace().nth(1) == Some(n)).count();
        assert_eq!(hits, 1, "{n}");
    }
    let bad = cotrain(&["gradcheck", "--trials", "1", "--inject-fault"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("faulty_square"));
}

#[test]
fn checkpoint_eval_matches_train_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let full = cotrain(&[&["train", "--task", "depth", "--aux", "moco", "--checkpoint", "a.ckpt"], &TINY[..]].concat(), p);
    assert_eq!(full.status.code(), Some(0), "{}", String::from_utf8_lossy(&full.stderr));
    let ev = cotrain(&["eval", "--checkpoint", "a.ckpt"], p);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    let metric = |out: &[u8]| String::from_utf8(out.to_vec()).unwrap().lines().nth(1).unwrap().split(',').nth(9).unwrap().to_string();
    assert_eq!(metric(&full.stdout), metric(&ev.stdout));

    let again = cotrain(&[&["train", "--task", "depth", "--aux", "moco", "--resume", "a.ckpt"], &TINY[..]].concat(), p);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(again.stdout, full.stdout);
    let mismatch = cotrain(&[&["train", "--task", "depth", "--aux", "rot", "--resume", "a.ckpt"], &TINY[..]].concat(), p);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotrain(&["gen-data", "--out", "d", "--n-train", "3", "--n-val", "2", "--image-size", "16"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let train = cotrain_core::data::load_split(&dir.path().join("d/train.bin")).unwrap();
    let shifted = cotrain_core::data::load_split(&dir.path().join("d/shifted_val.bin")).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(shifted.len(), 2);
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["sweep", "--task", "depth", "--aux-list", "rot,densecl", "--seeds", "1,2", "--out"], &["r1.csv"][..], &TINY[..]].concat();
    let a = cotrain(&args, dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let args2: Vec<&str> = args.iter().map(|s| if *s == "r1.csv" { "r2.csv" } else { s }).collect();
    cotrain(&args2, dir.path());
    let r1 = std::fs::read(dir.path().join("r1.csv")).unwrap();
    let r2 = std::fs::read(dir.path().join("r2.csv")).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(String::from_utf8(r1).unwrap().lines().count(), 5);
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let counts = [("directional.json", 2 * 3 + 2 * 3), ("lambda_grid.json", 3 * 3)];
    for (file, cells) in counts {
        let spec = parse_config(Some(&dir.join(file)), &TrainFlags::default(), &AxisFlags::default(), None).unwrap();
        assert_eq!(spec.cells().unwrap().len(), cells, "{file}");
    }
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let block = readme.split("```json\n").nth(1).unwrap().split("```").next().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("example.json");
    std::fs::write(&path, block).unwrap();
    let spec = parse_config(Some(&path), &TrainFlags::default(), &AxisFlags::default(), None).unwrap();
    assert_eq!(spec.cells().unwrap().len(), 2 * 3 + 2 * 3);
    assert_eq!(spec.base, TrainConfig { target_tasks: vec![Task::Depth], pretrain_iters: Some(500), eval_every: Some(50), lambda: Some(0.2), ..TrainConfig::default() });
}
