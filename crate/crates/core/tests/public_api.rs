use cotrain_core::ssl::AuxKind;
use cotrain_core::tasks::Task;
use cotrain_core::trainer::{
    evaluate, load_checkpoint, predict, run_training, save_checkpoint, DataConfig, Datasets, Mode, TrainConfig, Trainer,
};

fn small(mode: Mode, aux: AuxKind, tasks: &[Task]) -> TrainConfig {
    TrainConfig {
        mode,
        aux,
        target_tasks: tasks.to_vec(),
        max_iters: 4,
        pretrain_iters: Some(3),
        batch_target: 2,
        batch_aux: 2,
        data: DataConfig { n_train: 8, n_val: 4, image_size: 16, ..DataConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn every_mode_trains_and_evaluates() {
    let data = Datasets::generate(&small(Mode::Joint, AuxKind::Rot, &[Task::Depth]).data).unwrap();
    let cases = [
        (Mode::Baseline, AuxKind::None, vec![Task::Boundary]),
        (Mode::Joint, AuxKind::Rot, vec![Task::Semseg]),
        (Mode::PretrainFinetune, AuxKind::Moco, vec![Task::Depth]),
        (Mode::PretrainJoint, AuxKind::DenseCl, vec![Task::Depth]),
        (Mode::Multitask, AuxKind::None, vec![Task::Depth, Task::Semseg]),
        (Mode::MultitaskJoint, AuxKind::Rot, vec![Task::Semseg, Task::Boundary]),
    ];
    for (mode, aux, tasks) in cases {
        let cfg = small(mode, aux, &tasks);
        let out = run_training(&cfg, &data).unwrap();
        let steps = cfg.max_iters + if mode.has_pretrain() { 3 } else { 0 };
        assert_eq!(out.history.iters.len(), steps, "{mode}");
        for &t in &tasks {
            let m = evaluate(&out.model, out.params(), &data.val, t).unwrap();
            assert!(m.value.is_finite(), "{mode} {t}");
            assert_eq!(m.name, t.metric());
        }
    }
}

#[test]
fn predictions_have_dense_shapes() {
    let cfg = small(Mode::Multitask, AuxKind::None, &[Task::Depth, Task::Semseg, Task::Boundary]);
    let data = Datasets::generate(&cfg.data).unwrap();
    let out = run_training(&cfg, &data).unwrap();
    let imgs: Vec<_> = data.val.iter().take(3).map(|s| &s.image).collect();
    assert_eq!(predict(&out.model, out.params(), &imgs, Task::Depth).unwrap().shape(), &[3, 1, 16, 16]);
    assert_eq!(predict(&out.model, out.params(), &imgs, Task::Semseg).unwrap().shape(), &[3, 4, 16, 16]);
    assert_eq!(predict(&out.model, out.params(), &imgs, Task::Boundary).unwrap().shape(), &[3, 1, 16, 16]);
}

#[test]
fn checkpoint_resume_through_files() {
    let cfg = small(Mode::Joint, AuxKind::DenseCl, &[Task::Depth]);
    let data = Datasets::generate(&cfg.data).unwrap();
    let full = run_training(&cfg, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    save_checkpoint(&path, t.config(), t.state()).unwrap();
    drop(t);
    let (saved_cfg, state) = load_checkpoint(&path).unwrap();
    assert_eq!(saved_cfg, cfg.resolved());
    let mut t = Trainer::resume(&saved_cfg, &data, state).unwrap();
    t.run().unwrap();
    assert!(t.params().bit_eq(full.params()));
}
