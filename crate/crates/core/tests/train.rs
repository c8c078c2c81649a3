use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use glfusion_core::backbone::BackboneConfig;
use glfusion_core::cycle::CycleConfig;
use glfusion_core::data::{load_manifest, Frame, Split, ViewSpec};
use glfusion_core::phantom::{generate_dataset, synthesize_video, PhantomConfig, SplitSizes};
use glfusion_core::train::{
    augment, compute_step, evaluate, evaluate_samples, run_ablation_suite, train, AblationFlags, AblationRow,
    AugmentMode, CropWindow, Dataset, EvalSettings, OracleSegmenter, OverlayOptions, Planner, TrainConfig, CYCLE_ROWS,
    FUSION_ROWS,
};
use glfusion_core::{Error, GlFusion, ModelConfig};
use glfusion_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phantom() -> PhantomConfig {
    PhantomConfig {
        num_videos: SplitSizes { train: 6, val: 2, test: 2 },
        frames_per_video: 20,
        period: 8,
        height: 32,
        width: 32,
        annotated_frames_per_video: 3,
        rng_seed: 11,
        ..Default::default()
    }
}

fn tiny() -> TrainConfig {
    let backbone =
        BackboneConfig { channels: 8, stride: 4, depth: 2, base_width: 4, decoder_width: 8, ..Default::default() };
    TrainConfig {
        learning_rate: 3e-4,
        epochs: 2,
        steps_per_epoch: Some(3),
        labeled_batch: 2,
        clip_length: 10,
        resize: 32,
        crop: 24,
        eval_chunk: 5,
        model: ModelConfig { backbone, ..Default::default() },
        cycle: CycleConfig { chunk_size: 2, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn eval_crop_of_a_large_frame_is_centered() {
    let frame = Frame::new(600, 800, (0..600 * 800).map(|i| (i % 251) as u8).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = CropWindow::new(AugmentMode::Eval, 144, 112, &mut rng).unwrap();
    assert_eq!((w.y, w.x), (16, 16));
    let (a, _) = augment(&frame, &[], AugmentMode::Eval, 144, 112, &mut rng).unwrap();
    let (b, _) = augment(&frame, &[], AugmentMode::Eval, 144, 112, &mut rng).unwrap();
    assert_eq!((a.height, a.width), (112, 112));
    assert_eq!(a, b);
    assert!(CropWindow::center(100, 112).is_err());
}

#[test]
fn train_crops_follow_the_seed() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| CropWindow::new(AugmentMode::Train, 144, 112, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));
    assert!(draw(6).iter().all(|w| w.y <= 32 && w.x <= 32));
}

#[test]
fn masks_stay_on_their_chambers() {
    let cfg = PhantomConfig {
        noise_level: 0.0,
        height: 80,
        width: 80,
        frames_per_video: 10,
        period: 5,
        ..Default::default()
    };
    let video = synthesize_video(&cfg, "v", 0, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for view in video.views() {
        for ann in view.annotations.iter().take(3) {
            let frame = &view.frames[ann.frame_index];
            let (f, masks) = augment(frame, &ann.masks, AugmentMode::Train, 72, 56, &mut rng).unwrap();
            for m in &masks {
                assert!(m.count() > 0);
                let mut checked = 0;
                for y in 1..55 {
                    for x in 1..55 {
                        let interior = (0..9).all(|k| m.get(y + k / 3 - 1, x + k % 3 - 1));
                        if interior {
                            assert!(f.get(y, x) < 40, "chamber pixel ({y}, {x}) has intensity {}", f.get(y, x));
                            checked += 1;
                        }
                    }
                }
                assert!(checked > 0);
            }
        }
    }
}

#[test]
fn smoke_run_populates_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&phantom(), &dir.path().join("data")).unwrap();
    let data = Dataset::from_manifest(&manifest).unwrap();
    let out = dir.path().join("run");
    let report = train::<f32>(&tiny(), &data, &out).unwrap();
    assert_eq!(report.total_steps, 6);
    assert_eq!(report.loss_curve.len(), 6);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.best_epoch.is_some());
    assert!(report.validation.is_some());
    assert!(report.final_val_average_dice.is_some());
    assert_eq!(report.scalar, "f32");
    assert_eq!(report.config_hash, tiny().config_hash());
    for r in &report.loss_curve {
        assert!(r.losses.total.is_finite());
        assert!(r.losses.cycle.is_some() && r.losses.center.is_some());
    }
    assert_eq!(report.loss_curve[0].learning_rate, 3e-4);
    assert!(report.loss_curve.last().unwrap().learning_rate <= 1e-6);
    for f in ["config.toml", "run_report.json", "loss_curve.csv", "val_dice.csv", "best.ckpt.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let written = TrainConfig::from_file(&out.join("config.toml")).unwrap();
    assert_eq!(written, tiny());

    let manifest = load_manifest(&dir.path().join("data").join("manifest.json")).unwrap();
    let overlays = OverlayOptions { dir: dir.path().join("overlays"), every: 10 };
    let eval = evaluate(&report.checkpoint, &manifest, Split::Test, None, Some(&overlays)).unwrap();
    assert_eq!(eval.settings, EvalSettings { resize: 32, crop: 24, chunk: 16 });
    let csv = eval.dice.to_csv_string();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let labels: Vec<String> = rows.iter().map(|r| r.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(
        labels,
        [
            "PLVLA,LV",
            "PLVLA,RV",
            "LVSA,LV",
            "LVSA,RV",
            "A4C,LV",
            "A4C,LA",
            "A4C,RA",
            "A4C,RV",
            "PLVLA,ALL",
            "LVSA,ALL",
            "A4C,ALL",
            "AVERAGE,ALL"
        ]
    );
    let pngs = walk(&dir.path().join("overlays"));
    assert_eq!(pngs, 2 * 3 * 2);
}

fn walk(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "png"))
            }
        })
        .sum()
}

#[test]
fn identical_runs_agree() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train::<f32>(&tiny(), &data, &dir.path().join("a")).unwrap();
    let b = train::<f32>(&tiny(), &data, &dir.path().join("b")).unwrap();
    let (x, y) = (a.final_val_average_dice.unwrap(), b.final_val_average_dice.unwrap());
    assert!((x - y).abs() <= 1e-6);
    assert_eq!(a.loss_curve, b.loss_curve);
    let c = train::<f32>(&TrainConfig { rng_seed: 1, ..tiny() }, &data, &dir.path().join("c")).unwrap();
    assert_ne!(a.loss_curve, c.loss_curve);
}

#[test]
fn concurrent_loading_matches_serial() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let serial = train::<f32>(&tiny(), &data, &dir.path().join("s")).unwrap();
    let fast = train::<f32>(&TrainConfig { deterministic: false, ..tiny() }, &data, &dir.path().join("f")).unwrap();
    assert_eq!(serial.loss_curve, fast.loss_curve);
}

fn grad_hash(grads: &[Tensor<f32>]) -> u64 {
    let mut h = DefaultHasher::new();
    for g in grads {
        g.shape().hash(&mut h);
        for v in g.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[test]
fn clips_do_not_reach_the_gradient_when_the_cycle_is_off() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let cfg = tiny().with_ablation(AblationFlags::new(true, true, false));
    let planner = Planner::new(&cfg, &data).unwrap();
    let model = GlFusion::<f32>::new(cfg.effective_model(), 0).unwrap();
    let plan = planner.plan(0, 0, &planner.epoch_order(0)).unwrap();
    assert!(plan.clips.is_empty());
    let batch = planner.materialize::<f32>(plan, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hashes = Vec::new();
    for _ in 0..3 {
        let mut b = batch.clone();
        b.clips = vec![(0..3).map(|_| Tensor::from_fn([10, 1, 24, 24], |_| rng.random_range(0.0..1.0))).collect()];
        let out = compute_step(&model, &cfg, &b).unwrap();
        assert!(out.losses.cycle.is_none());
        hashes.push(grad_hash(&out.grads));
    }
    hashes.push(grad_hash(&compute_step(&model, &cfg, &batch).unwrap().grads));
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));

    let on = tiny();
    let planner = Planner::new(&on, &data).unwrap();
    let model = GlFusion::<f32>::new(on.effective_model(), 0).unwrap();
    let batch = planner.materialize::<f32>(planner.plan(0, 0, &planner.epoch_order(0)).unwrap(), true).unwrap();
    let mut other = batch.clone();
    other.clips[0] = (0..3).map(|_| Tensor::from_fn([10, 1, 24, 24], |_| rng.random_range(0.0..1.0))).collect();
    let (a, b) = (compute_step(&model, &on, &batch).unwrap(), compute_step(&model, &on, &other).unwrap());
    assert_ne!(grad_hash(&a.grads), grad_hash(&b.grads));
}

#[test]
fn all_off_is_the_single_view_network() {
    let cfg = tiny().with_ablation(AblationFlags::new(false, false, false));
    let model = GlFusion::<f32>::new(cfg.effective_model(), 0).unwrap();
    assert!(model.mgfm().is_none() && model.mlfm().is_none());
    assert!(model.views().iter().all(|v| v.center.is_none()));
    let owned: usize = model.views().iter().map(|v| v.param_ids().count()).sum();
    assert_eq!(owned, model.store().len());
    assert_eq!(AblationRow::Base.config(&tiny()).config_hash(), tiny().single_view().config_hash());
}

#[test]
fn oracle_scores_one_and_untrained_scores_low() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let settings = EvalSettings { resize: 32, crop: 24, chunk: 8 };
    let oracle = OracleSegmenter { views: ViewSpec::standard_roster() };
    let perfect = evaluate_samples(&oracle, &data.test, &settings, None).unwrap();
    assert_eq!(perfect.average, 1.0);
    let model = GlFusion::<f32>::new(tiny().model, 0).unwrap();
    let untrained = evaluate_samples(&model, &data.test, &settings, None).unwrap();
    assert!(untrained.average < 0.5, "untrained average {}", untrained.average);
    assert_eq!(untrained.views.iter().map(|v| v.classes.len()).sum::<usize>(), 8);
    assert!(untrained.views.iter().flat_map(|v| &v.classes).all(|c| c.frame_count == 40));
}

#[test]
fn empty_train_split_is_a_config_error() {
    let mut data = Dataset::from_phantom(&phantom()).unwrap();
    data.train.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(train::<f32>(&tiny(), &data, dir.path()), Err(Error::Config(_))));
}

#[test]
fn diverging_run_aborts_with_a_dump() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { learning_rate: 1e36, ..tiny() };
    match train::<f32>(&cfg, &data, dir.path()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("nan_step"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|r| r.total_steps)),
    }
    let dumps: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("nan_step"))
        .collect();
    assert_eq!(dumps.len(), 1);
    let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dumps[0].path()).unwrap()).unwrap();
    assert!(body["plan"]["batch_seed"].is_u64());
}

#[test]
fn ablation_suite_shape() {
    let data = Dataset::from_phantom(&phantom()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig { epochs: 1, steps_per_epoch: Some(2), ..tiny() };
    let rows: Vec<_> = FUSION_ROWS.iter().chain(&CYCLE_ROWS).copied().collect();
    let report = run_ablation_suite::<f32>(&base, &data, &[0, 1, 2], &rows, dir.path()).unwrap();
    assert_eq!(report.tables.len(), 2);
    assert_eq!(report.tables[0].cells.len(), 4);
    assert_eq!(report.tables[1].cells.len(), 3);
    for cell in report.tables.iter().flat_map(|t| &t.cells) {
        assert_eq!(cell.scores.len(), 3);
        assert!(cell.min <= cell.mean && cell.mean <= cell.max);
    }
    let full = report.cell(AblationRow::Full).unwrap();
    let dense = report.cell(AblationRow::FusionDenseCycle).unwrap();
    assert_eq!(full.config_hash, dense.config_hash);
    assert_eq!(full.scores, dense.scores);
    assert_eq!(report.cell(AblationRow::Base).unwrap().config_hash, base.single_view().config_hash());
    assert!(report.directional.full_ge_base.is_some() && report.directional.full_ge_fusion_only.is_some());
    let md = std::fs::read_to_string(dir.path().join("ablation.md")).unwrap();
    assert!(md.contains("| +MGFM +MLFM |") && md.contains("| Fusion + Dense Cyc. |"));
    let runs = std::fs::read_dir(dir.path().join("runs")).unwrap().count();
    assert_eq!(runs, 6 * 3);
}
