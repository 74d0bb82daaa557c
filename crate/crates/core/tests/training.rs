use std::fs;
use std::path::Path;

use openseg::evaluation::IouKind;
use openseg::shapeworld::{generate_scenes, split_dataset, CategorySplit, Dataset, GeneratorConfig, SplitMode};
use openseg::tensor::optim::ParamId;
use openseg::trainer::{
    read_log, run_experiment, AugmentMode, Manifest, RunLocation, RunOptions, TrainConfig, TrainError, Trainer,
    Variant,
};

fn write_data(dir: &Path, train: usize, eval: usize) {
    let (g, s) = (GeneratorConfig::default(), CategorySplit::default());
    let tr = generate_scenes(4, "train", train, &g, &s);
    let ev = generate_scenes(4, "eval", eval, &g, &s);
    for mode in [SplitMode::TrainBase, SplitMode::EvalNovel, SplitMode::EvalAll] {
        let scenes = if mode == SplitMode::TrainBase { &tr } else { &ev };
        split_dataset(scenes, &s, &g, mode).save(dir, mode.file_name()).unwrap();
    }
}

fn tiny(seed: u64) -> Dataset {
    let (g, s) = (GeneratorConfig::default(), CategorySplit::default());
    split_dataset(&generate_scenes(seed, "train", 8, &g, &s), &s, &g, SplitMode::TrainBase)
}

#[test]
fn loss_decreases_over_first_200_iterations() {
    const ITERS: usize = 200;
    const WINDOW: usize = 40;
    for seed in 0..3 {
        let data = tiny(10 + seed);
        let mut t = Trainer::new(TrainConfig {
            variant: Variant::Sword,
            seed,
            iterations: ITERS,
            batch_size: 2,
            augment: AugmentMode::None,
            ..TrainConfig::default()
        })
        .unwrap();
        let losses: Vec<f64> = (0..ITERS)
            .map(|it| t.train_step(&t.batch(&data, it)).unwrap().loss.total)
            .collect();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&losses[..WINDOW]), mean(&losses[ITERS - WINDOW..]));
        assert!(last < first, "seed {seed}: first {first:.3} last {last:.3}");
    }
}

#[test]
fn momentum_head_follows_ema_and_is_never_optimized() {
    let data = tiny(1);
    let mut t = Trainer::new(TrainConfig {
        variant: Variant::Sword,
        augment: AugmentMode::None,
        ..TrainConfig::default()
    })
    .unwrap();
    let before: Vec<Vec<f32>> = t.heads.momentum.iter().map(|(_, e)| e.value.to_vec()).collect();
    t.train_step(&t.batch(&data, 0)).unwrap();
    let a = t.heads.alpha as f32;
    for (k, &online) in t.heads.online.iter().enumerate() {
        let theta = t.model.params.values(online);
        let got = t.heads.momentum.values(ParamId(k));
        for ((g, b), th) in got.iter().zip(&before[k]).zip(theta) {
            assert!((g - (a * b + (1.0 - a) * th)).abs() < 1e-6);
        }
    }
    assert_eq!(t.optim.m.len(), t.trainable_ids().len());
}

#[test]
fn zero_iterations_evaluates_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_data(&data, 4, 12);
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    let out = run_experiment(&cfg, &data, &RunLocation::Under(tmp.path().join("runs")), RunOptions::default()).unwrap();
    assert_eq!(out.completed_iterations, 0);
    for r in [&out.novel, &out.all] {
        for kind in [IouKind::Box, IouKind::Mask] {
            let ap = r.metric(kind, "ap").unwrap_or(0.0);
            assert!(ap < 0.05, "{kind:?} AP {ap}");
        }
    }
    assert!(read_log(&out.run_dir.join("train_log.jsonl")).unwrap().is_empty());
}

#[test]
fn run_resumes_and_rejects_a_mismatched_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_data(&data, 6, 4);
    let dir = tmp.path().join("run");
    let cfg = TrainConfig {
        iterations: 6,
        batch_size: 1,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let loc = RunLocation::Exactly(dir.clone());
    let full = run_experiment(&cfg, &data, &loc, RunOptions::default()).unwrap();
    let log = read_log(&dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 6);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.completed_iterations, 6);
    assert!(!manifest.active.contrastive && !manifest.active.stop_grad);

    // a finished run is returned as is
    let again = run_experiment(&cfg, &data, &loc, RunOptions::default()).unwrap();
    assert_eq!(again, full);

    let other = TrainConfig { seed: 5, ..cfg.clone() };
    let err = run_experiment(&other, &data, &loc, RunOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::ManifestMismatch { .. }), "{err}");
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_data(&data, 6, 4);
    let cfg = TrainConfig {
        variant: Variant::Sword,
        iterations: 6,
        batch_size: 1,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let straight = run_experiment(&cfg, &data, &RunLocation::Exactly(tmp.path().join("a")), RunOptions::default()).unwrap();

    // stop after the first checkpoint by running a 3-iteration prefix, then
    // rewrite its manifest as an unfinished 6-iteration run
    let b = tmp.path().join("b");
    let prefix = TrainConfig { iterations: 3, ..cfg.clone() };
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let train = Dataset::load(&data.join(SplitMode::TrainBase.file_name())).unwrap();
    for it in 0..3 {
        trainer.train_step(&trainer.batch(&train, it)).unwrap();
        trainer.iteration = it + 1;
    }
    run_experiment(&prefix, &data, &RunLocation::Exactly(b.clone()), RunOptions::default()).unwrap();
    let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    manifest.iterations = 6;
    manifest.config_hash = cfg.hash();
    fs::write(b.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    fs::write(b.join("config.toml"), cfg.to_toml()).unwrap();
    trainer.to_checkpoint().save(b.join("checkpoint.bin")).unwrap();
    for f in ["metrics-novel.json", "metrics-all.json"] {
        fs::remove_file(b.join(f)).unwrap();
    }
    let resumed = run_experiment(&cfg, &data, &RunLocation::Exactly(b.clone()), RunOptions::default()).unwrap();
    assert_eq!(resumed.completed_iterations, 6);
    assert_eq!((resumed.novel, resumed.all), (straight.novel, straight.all));
    assert_eq!(
        fs::read(b.join("checkpoint.bin")).unwrap(),
        fs::read(tmp.path().join("a/checkpoint.bin")).unwrap()
    );
}

#[test]
fn missing_data_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_experiment(
        &TrainConfig::default(),
        &tmp.path().join("nowhere"),
        &RunLocation::Under(tmp.path().join("runs")),
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::MissingData(_)), "{err}");
    assert!(!tmp.path().join("runs").exists());
}
