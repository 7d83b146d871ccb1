use std::path::Path;

use proptest::prelude::*;
use tempfile::TempDir;

use tumorseg::data::{
    generate_synthetic_dataset, Dataset, GroundTruth, Label, ScanRecord, SynthParams,
};
use tumorseg::engine::*;
use tumorseg::metrics::box_iou_unchecked;
use tumorseg::types::{BBox, Image};

fn small_config(epochs: usize) -> ModelConfig {
    ModelConfig {
        epochs,
        ..ModelConfig::default()
    }
}

fn dataset(n: usize, seed: u64) -> Dataset {
    generate_synthetic_dataset(n, seed, &SynthParams::default()).unwrap()
}

fn pretrained(dir: &Path, backbone: &str, steps: usize) -> std::path::PathBuf {
    let opts = PretrainOptions {
        steps,
        ..PretrainOptions::default()
    };
    let (bb, _, _) = pretrain_backbone(backbone, &opts).unwrap();
    let path = dir.join(format!("{backbone}.weights"));
    save_backbone(&bb, &path).unwrap();
    path
}

fn brute_force_filter(candidates: &[BBox], references: &[BBox], thr: f64) -> Vec<BBox> {
    let mut out = Vec::new();
    for c in candidates {
        let mut best = f64::NEG_INFINITY;
        for r in references {
            best = best.max(box_iou_unchecked(c, r));
        }
        if best > thr {
            out.push(*c);
        }
    }
    out
}

fn box_in(frame: u32) -> impl Strategy<Value = BBox> {
    (0..frame, 0..frame, 1..=frame, 1..=frame).prop_map(move |(r0, c0, h, w)| {
        let r1 = (r0 + h).min(frame);
        let c1 = (c0 + w).min(frame);
        BBox::new(
            r0 as f64,
            c0 as f64,
            r1.max(r0 + 1) as f64,
            c1.max(c0 + 1) as f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn region_filter_matches_all_pairs_oracle(
        candidates in proptest::collection::vec(box_in(100), 0..50),
        references in proptest::collection::vec(box_in(100), 0..6),
        thr in prop_oneof![Just(0.5), 0.05f64..0.95],
    ) {
        prop_assert_eq!(filter_regions_by_iou(&candidates, &references, thr), brute_force_filter(&candidates, &references, thr));
    }
}

#[test]
fn region_filter_examples() {
    let reference = BBox::new(0.0, 0.0, 10.0, 10.0);
    // 60 / 100 overlap
    let c = BBox::new(0.0, 0.0, 10.0, 6.0);
    assert!((box_iou_unchecked(&c, &reference) - 0.6).abs() < 1e-12);
    assert_eq!(filter_regions_by_iou(&[c], &[reference], 0.5), vec![c]);
    assert_eq!(
        filter_regions_by_iou(&[reference], &[reference], 0.999),
        vec![reference]
    );
    // strict: exactly 0.5 is dropped
    let half = BBox::new(0.0, 0.0, 10.0, 5.0);
    assert!(filter_regions_by_iou(&[half], &[reference], 0.5).is_empty());
    assert!(filter_regions_by_iou(&[], &[reference], 0.5).is_empty());
    assert!(filter_regions_by_iou(&[c], &[], 0.5).is_empty());
}

#[test]
fn build_model_loads_backbone_and_reinitializes_heads() {
    let dir = TempDir::new().unwrap();
    let config = small_config(1);
    // a full model file with heads from a different seed
    let donor = SegmentationModel::new_random(&ModelConfig {
        random_seed: 999,
        ..config.clone()
    })
    .unwrap();
    let path = dir.path().join("full.weights");
    save_pretrained(&path, "tinyconv-s", donor.normalization(), &donor.tensors()).unwrap();

    let fresh = build_model(&config, &path, true).unwrap();
    assert_eq!(fresh.backbone_tensors(), donor.backbone_tensors());
    let donor_heads = donor.head_tensors();
    for (name, t) in fresh
        .head_tensors()
        .into_iter()
        .filter(|(n, _)| n.ends_with(".weight"))
    {
        assert_ne!(
            &t,
            donor_heads.get(&name).unwrap(),
            "{name} should be freshly drawn"
        );
    }
    let again = build_model(&config, &path, true).unwrap();
    assert_eq!(fresh.head_tensors(), again.head_tensors());

    let full = build_model(&config, &path, false).unwrap();
    assert_eq!(full.tensors(), donor.tensors());
}

#[test]
fn wrong_backbone_weights_are_rejected_with_names() {
    let dir = TempDir::new().unwrap();
    let path = pretrained(dir.path(), "tinyconv-m", 2);
    let err = build_model(&small_config(1), &path, true).unwrap_err();
    match &err {
        EngineError::ShapeMismatch(list) => {
            assert!(!list.is_empty());
            assert!(
                list[0].name.starts_with("backbone.conv1"),
                "{}",
                list[0].name
            );
        }
        other => panic!("expected shape mismatch, got {other}"),
    }
    assert!(err.to_string().contains("backbone.conv1"));

    let unknown = ModelConfig {
        backbone_id: "resnet-9000".into(),
        ..small_config(1)
    };
    assert!(matches!(
        build_model(&unknown, &path, true),
        Err(EngineError::Config(_))
    ));
}

#[test]
fn training_preconditions() {
    let dir = TempDir::new().unwrap();
    let ds = dataset(4, 1);
    let mut model = SegmentationModel::new_random(&small_config(1)).unwrap();
    let zero = small_config(0);
    assert!(matches!(
        train(&mut model, &ds, &Dataset::default(), &zero, dir.path()),
        Err(EngineError::Config(_))
    ));
    assert!(matches!(
        train(
            &mut model,
            &Dataset::default(),
            &Dataset::default(),
            &small_config(1),
            dir.path()
        ),
        Err(EngineError::Config(_))
    ));

    let maskless = ScanRecord::new(
        "bad",
        None,
        Image::filled(64, 64, 1, 90).unwrap(),
        Some(GroundTruth::new(Label::Tumor, vec![]).unwrap()),
    )
    .unwrap();
    let mut scans = ds.into_scans();
    scans.push(maskless);
    let bad = Dataset::new(scans).unwrap();
    let run = dir.path().join("maskless");
    let err = train(
        &mut model,
        &bad,
        &Dataset::default(),
        &small_config(1),
        &run,
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::Data(_)), "{err}");
    assert!(list_checkpoints(&run).unwrap().is_empty());
}

#[test]
fn checkpoints_history_and_latest_selection() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let ds = dataset(6, 2);
    let val = dataset(2, 3);
    let config = small_config(3);
    let mut model = SegmentationModel::new_random(&config).unwrap();
    let history = train(&mut model, &ds, &val, &config, &run).unwrap();
    assert_eq!(history.len(), 3);
    let idx: Vec<usize> = history.records().iter().map(|r| r.epoch_index).collect();
    assert_eq!(idx, [1, 2, 3]);
    assert!(history.records().iter().all(|r| r.val_loss.is_some()));
    let ckpts = list_checkpoints(&run).unwrap();
    assert_eq!(ckpts.iter().map(|c| c.0).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(
        TrainingHistory::read_csv(&run.join(HISTORY_FILE)).unwrap(),
        history
    );
    let header = std::fs::read_to_string(run.join(HISTORY_FILE)).unwrap();
    assert!(header.starts_with("epoch,train_loss,val_loss"));
    assert_eq!(read_run_config(&run).unwrap(), config);

    let (meta, tensors) = read_checkpoint(&checkpoint_path(&run, 3)).unwrap();
    assert_eq!(meta.epoch_index, 3);
    assert_eq!(meta.config_digest, config.digest());
    let loaded = load_inference_model(&run, &config).unwrap();
    assert_eq!(loaded.tensors(), tensors);
    assert_eq!(loaded.tensors(), model.tensors());
    assert_eq!(loaded.mode(), Mode::Inference);
    let (_, older) = read_checkpoint(&checkpoint_path(&run, 2)).unwrap();
    assert_ne!(loaded.tensors(), older);

    // reusing the directory is refused
    let mut other = SegmentationModel::new_random(&config).unwrap();
    assert!(matches!(
        train(&mut other, &ds, &val, &config, &run),
        Err(EngineError::RunDirInUse(_))
    ));
}

#[test]
fn reload_requires_a_matching_config() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let config = small_config(1);
    let mut model = SegmentationModel::new_random(&config).unwrap();
    train(
        &mut model,
        &dataset(3, 4),
        &Dataset::default(),
        &config,
        &run,
    )
    .unwrap();
    let changed = ModelConfig {
        learning_rate: 5e-4,
        ..config.clone()
    };
    match load_inference_model(&run, &changed) {
        Err(EngineError::Incompatible { expected, found }) => {
            assert_eq!(expected, changed.digest());
            assert_eq!(found, config.digest());
        }
        other => panic!("expected incompatibility, got {:?}", other.map(|_| ())),
    }
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert!(matches!(
        load_inference_model(&empty, &config),
        Err(EngineError::NotFound(_))
    ));
    assert!(load_run(&run).is_ok());
}

#[test]
fn same_seed_runs_are_identical() {
    let dir = TempDir::new().unwrap();
    let ds = dataset(5, 6);
    let config = small_config(2);
    let mut histories = Vec::new();
    let mut weights = Vec::new();
    for name in ["a", "b"] {
        let mut model = SegmentationModel::new_random(&config).unwrap();
        histories.push(
            train(
                &mut model,
                &ds,
                &Dataset::default(),
                &config,
                &dir.path().join(name),
            )
            .unwrap(),
        );
        weights.push(model.tensors());
    }
    assert_eq!(histories[0], histories[1]);
    assert_eq!(weights[0], weights[1]);
    let a = std::fs::read(dir.path().join("a").join(HISTORY_FILE)).unwrap();
    let b = std::fs::read(dir.path().join("b").join(HISTORY_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn failed_checkpoint_write_leaves_a_partial_run_marker() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(checkpoint_path(&run, 2)).unwrap();
    let config = small_config(3);
    let mut model = SegmentationModel::new_random(&config).unwrap();
    let err = train(
        &mut model,
        &dataset(3, 7),
        &Dataset::default(),
        &config,
        &run,
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::Write { .. }), "{err}");
    let marker = std::fs::read_to_string(run.join(PARTIAL_RUN_MARKER)).unwrap();
    assert!(marker.contains("after epoch 1"), "{marker}");
    assert_eq!(
        list_checkpoints(&run)
            .unwrap()
            .iter()
            .map(|c| c.0)
            .collect::<Vec<_>>(),
        [1]
    );
}

#[test]
fn prediction_contract() {
    let config = small_config(1);
    let mut model = SegmentationModel::new_random(&config).unwrap();
    let blank = Image::filled(64, 64, 1, 0).unwrap();
    assert!(matches!(
        model.predict(&blank),
        Err(EngineError::NotInferenceMode)
    ));
    model.set_mode(Mode::Inference);
    let dets = model.predict(&blank).unwrap();
    assert_eq!(
        diagnose(&dets, config.detection_score_threshold).label,
        Label::NoTumor
    );
    let tiny = Image::filled(8, 8, 1, 0).unwrap();
    assert!(matches!(
        model.predict(&tiny),
        Err(EngineError::InvalidImage(_))
    ));

    for scan in dataset(4, 8).iter() {
        let img = scan.image();
        let dets = model.predict(img).unwrap();
        assert!(dets.len() <= config.max_detections_per_image);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        for d in &dets {
            assert!((0.0..=1.0).contains(&d.score));
            assert_eq!(d.mask.shape(), (img.height(), img.width()));
            assert!(d.bbox.r0 < d.bbox.r1 && d.bbox.c0 < d.bbox.c1);
            assert!(d.bbox.r1 <= img.height() as f64 && d.bbox.c1 <= img.width() as f64);
            for r in 0..img.height() {
                for c in 0..img.width() {
                    assert!(!d.mask.get(r, c) || d.bbox.contains_pixel(r, c));
                }
            }
        }
    }
}

#[test]
fn non_square_and_rgb_inputs_map_back_to_original_pixels() {
    let config = small_config(1);
    let mut model = SegmentationModel::new_random(&config).unwrap();
    model.set_mode(Mode::Inference);
    let img = Image::filled(48, 100, 3, 120).unwrap();
    for d in model.predict(&img).unwrap() {
        assert_eq!(d.mask.shape(), (48, 100));
        assert!(d.bbox.r1 <= 48.0 && d.bbox.c1 <= 100.0);
    }
}
