use std::collections::BTreeSet;
use std::path::Path;

use emonas_core::data::{stripes, Dataset, StripesConfig};
use emonas_core::dynimg::{dynamic_image_from_frames, normalize_for_display};
use emonas_core::evaluator::{evaluate, measure_fps, predict, split_protocol, ModelCheckpoint, Protocol};
use emonas_core::image::{read_pnm, write_pnm, Image};
use emonas_core::manifest::{ingest, SampleKind};
use emonas_core::nn::{CandidateOpKind, Model};
use emonas_core::pipeline::{aggregate, evaluate_checkpoint, run_fold, search_genotype, train_genotype};
use emonas_core::{Error, Genotype, RunConfig};

fn small_config() -> RunConfig {
    RunConfig {
        search_epochs: 1,
        train_epochs: 2,
        batch_size: 8,
        cells: 3,
        nodes: 5,
        channels: 4,
        fps_runs: 3,
        ..RunConfig::default()
    }
}

fn small_data() -> Dataset {
    stripes(&StripesConfig { size: 8, samples: 36, subjects: 3, ..StripesConfig::default() }, 5).unwrap()
}

fn fixed_genotype() -> Genotype {
    use CandidateOpKind::*;
    Genotype {
        n_nodes: 5,
        normal: vec![[(SepConv3x3, 0), (Identity, 1)], [(DilConv3x3, 1), (MaxPool3x3, 2)]],
        normal_concat: vec![2, 3],
        reduce: vec![[(AvgPool3x3, 0), (Identity, 1)], [(SepConv5x5, 0), (Identity, 2)]],
        reduce_concat: vec![2, 3],
    }
}

#[test]
fn loso_gives_one_report_per_subject_and_consistent_aggregate() {
    let cfg = small_config();
    let data = small_data();
    let folds = split_protocol(&data, Protocol::Loso, cfg.seed).unwrap();
    let reports: Vec<_> = folds.iter().map(|f| run_fold(&cfg, &fixed_genotype(), &data, f).unwrap()).collect();
    assert_eq!(reports.len(), 3);
    let tested: BTreeSet<_> = reports.iter().flat_map(|r| r.test_subjects.clone()).collect();
    assert_eq!(tested.len(), 3);
    for r in &reports {
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 12);
        assert!(r.fps.unwrap() > 0.0 && !r.hardware.as_ref().unwrap().is_empty());
        assert_eq!(r.per_class_recall.len(), 2);
    }
    let agg = aggregate(&reports).unwrap();
    assert_eq!(agg.folds, 3);
    assert_eq!(agg.pooled_confusion.iter().flatten().sum::<usize>(), data.len());
    let correct: usize = (0..2).map(|i| agg.pooled_confusion[i][i]).sum();
    assert_eq!(agg.pooled_accuracy, correct as f64 / data.len() as f64);
    let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    assert!((agg.mean_accuracy - mean).abs() < 1e-15);
    assert!(aggregate(&[]).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = small_config();
    let data = small_data();
    let idx: Vec<usize> = (0..data.len()).collect();
    let ckpt = train_genotype(&cfg, &fixed_genotype(), &data, &idx).unwrap();
    assert_eq!(ckpt.history.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let loaded = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);

    let (net_a, store_a) = ckpt.restore().unwrap();
    let (net_b, store_b) = loaded.restore().unwrap();
    let (x, _) = data.batch(&idx[..6]).unwrap();
    assert_eq!(predict(&net_a, &store_a, x.clone()).unwrap(), predict(&net_b, &store_b, x).unwrap());
    assert_eq!(net_a.count_params(), net_b.count_params());

    let report = evaluate_checkpoint(&RunConfig { fps_runs: 0, ..cfg }, &loaded, &data, &idx, 0, vec![]).unwrap();
    let metrics = evaluate(&net_b, &store_b, &data, &idx, 5).unwrap();
    assert_eq!((report.accuracy, report.uar), (metrics.accuracy, metrics.uar));
    assert_eq!(report.fps, None);
}

#[test]
fn evaluation_is_batch_size_independent() {
    let cfg = small_config();
    let data = small_data();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (net, store) = train_genotype(&cfg, &fixed_genotype(), &data, &idx).unwrap().restore().unwrap();
    let a = evaluate(&net, &store, &data, &idx, 1).unwrap();
    let b = evaluate(&net, &store, &data, &idx, 36).unwrap();
    assert_eq!(a.confusion, b.confusion);
    let t = measure_fps(&net, &store, [1, 8, 8], 1, 5).unwrap();
    assert!(t.fps > 0.0 && t.median_seconds > 0.0);
}

#[test]
fn search_then_train_from_config() {
    let cfg = small_config();
    let data = small_data();
    let fold = split_protocol(&data, cfg.protocol(), cfg.seed).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let outcome = search_genotype(&cfg, &data, &fold.train, Some(dir.path())).unwrap();
    assert_eq!(outcome.genotype.n_nodes, 5);
    for file in ["genotype.json", "checkpoint.json", "search_log.ndjson"] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
    let report = run_fold(&cfg, &outcome.genotype, &data, &fold).unwrap();
    assert_eq!(report.test_subjects, fold.test_subjects);
}

#[test]
fn out_of_range_labels_are_reported() {
    let cfg = small_config();
    let mut data = small_data();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (net, store) = train_genotype(&cfg, &fixed_genotype(), &data, &idx).unwrap().restore().unwrap();
    data.samples[0].label = 5;
    assert!(matches!(evaluate(&net, &store, &data, &idx, 4), Err(Error::Label { label: 5, .. })));
}

fn write_frames(dir: &Path, n: usize, seed: usize) {
    for f in 0..n {
        let img = Image::new(6, 6, 1, (0..36).map(|p| ((p * (f + 1) + seed) % 11) as f64 / 10.0).collect()).unwrap();
        std::fs::create_dir_all(dir).unwrap();
        write_pnm(&dir.join(format!("f{f:02}.pgm")), &img).unwrap();
    }
}

#[test]
fn video_dataset_becomes_dynamic_images() {
    let root = tempfile::tempdir().unwrap();
    let classes = vec!["neg".to_string(), "pos".to_string()];
    for s in ["a", "b"] {
        for (ci, c) in classes.iter().enumerate() {
            for k in 0..2 {
                write_frames(&root.path().join(s).join(c).join(format!("clip{k}")), 4 + k, ci * 3 + k);
            }
        }
    }
    let manifest = ingest(root.path(), &classes).unwrap();
    assert_eq!(manifest.kind, SampleKind::Video);
    assert_eq!(manifest.subjects(), ["a", "b"]);
    let data = manifest.load(None).unwrap();
    assert_eq!(data.len(), 8);

    // the loaded sample is the display-normalized dynamic image of its frames
    let entry = &manifest.entries[1];
    let frames: Vec<Image> = entry.paths.iter().map(|p| read_pnm(p).unwrap()).collect();
    let want = normalize_for_display(&dynamic_image_from_frames(&frames).unwrap().pixels).to_chw();
    assert!(data.samples[1].image.max_abs_diff(&want) < 1e-12);
    let lo = data.samples[1].image.data().iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(lo, 0.0);
}
