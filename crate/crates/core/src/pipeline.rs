//! Stage orchestration: search → derive → train → evaluate, driven by a [`RunConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_subjects_half, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::{
    build_network, evaluate, measure_fps, pool_confusions, train_model, Fold, Metrics, ModelCheckpoint, FPS_WARMUP,
};
use crate::nn::Model;
use crate::search::{run_search, SearchOutcome};
use crate::search_space::Genotype;

/// Searches on the samples in `indices`, whose subjects are split 50/50 into weight data and
/// architecture data.
pub fn search_genotype(cfg: &RunConfig, data: &Dataset, indices: &[usize], out_dir: Option<&Path>) -> Result<SearchOutcome> {
    let (w, a) = split_subjects_half(data, indices, cfg.seed)?;
    run_search(cfg.search_config(), data, &w, &a, out_dir)
}

/// Trains a fresh network for `genotype` on `indices`.
pub fn train_genotype(cfg: &RunConfig, genotype: &Genotype, data: &Dataset, indices: &[usize]) -> Result<ModelCheckpoint> {
    let (channels, _, _) = data.input_shape().ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
    let net_cfg = cfg.network_config(genotype.clone(), channels, data.num_classes());
    let train_cfg = cfg.train_config();
    let (net, mut store) = build_network(net_cfg.clone(), train_cfg.seed)?;
    let history = train_model(&net, &mut store, data, indices, &train_cfg)?;
    Ok(ModelCheckpoint::new(net_cfg, train_cfg, &store, history))
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub accuracy: f64,
    pub uar: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub params: usize,
    pub train_accuracy: f64,
    pub fps: Option<f64>,
    pub hardware: Option<String>,
}

/// Evaluates a trained checkpoint on `indices`.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &ModelCheckpoint,
    data: &Dataset,
    indices: &[usize],
    fold: usize,
    test_subjects: Vec<String>,
) -> Result<FoldReport> {
    let (net, store) = ckpt.restore()?;
    let metrics = evaluate(&net, &store, data, indices, cfg.batch_size)?;
    let throughput = match (cfg.fps_runs, data.input_shape()) {
        (0, _) | (_, None) => None,
        (runs, Some((c, h, w))) => Some(measure_fps(&net, &store, [c, h, w], FPS_WARMUP, runs)?),
    };
    Ok(FoldReport {
        fold,
        test_subjects,
        accuracy: metrics.accuracy,
        uar: metrics.uar,
        per_class_recall: metrics.per_class_recall,
        confusion: metrics.confusion,
        params: net.count_params(),
        train_accuracy: ckpt.history.last().map_or(0.0, |h| h.accuracy),
        fps: throughput.as_ref().map(|t| t.fps),
        hardware: throughput.map(|t| t.hardware),
    })
}

/// Trains `genotype` on the fold's training subjects and evaluates on its test subjects.
pub fn run_fold(cfg: &RunConfig, genotype: &Genotype, data: &Dataset, fold: &Fold) -> Result<FoldReport> {
    let ckpt = train_genotype(cfg, genotype, data, &fold.train)?;
    evaluate_checkpoint(cfg, &ckpt, data, &fold.test, fold.index, fold.test_subjects.clone())
}

/// Summary over folds: plain means of the per-fold scores and scores of the pooled confusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub mean_accuracy: f64,
    pub mean_uar: f64,
    pub pooled_accuracy: f64,
    pub pooled_uar: f64,
    pub pooled_confusion: Vec<Vec<usize>>,
}

pub fn aggregate(reports: &[FoldReport]) -> Result<Aggregate> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::Dataset("no folds to aggregate".into()));
    }
    let pooled = Metrics::from_confusion(pool_confusions(reports.iter().map(|r| &r.confusion))?)?;
    Ok(Aggregate {
        folds: n,
        mean_accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n as f64,
        mean_uar: reports.iter().map(|r| r.uar).sum::<f64>() / n as f64,
        pooled_accuracy: pooled.accuracy,
        pooled_uar: pooled.uar,
        pooled_confusion: pooled.confusion,
    })
}
