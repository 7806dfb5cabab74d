use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Mean recall over classes that have at least one true sample.
    pub uar: f64,
    /// `None` for classes absent from the evaluated samples.
    pub per_class_recall: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|row| row.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be square and non-empty, got {k} rows")));
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[i] as f64 / support as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let uar = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Ok(Self { confusion, accuracy, uar, per_class_recall })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Sums confusion matrices of equal size.
pub fn pool_confusions<'a>(matrices: impl IntoIterator<Item = &'a Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
    let mut pooled: Option<Vec<Vec<usize>>> = None;
    for m in matrices {
        match pooled.as_mut() {
            None => pooled = Some(m.clone()),
            Some(p) => {
                if p.len() != m.len() {
                    return Err(Error::Shape("cannot pool confusion matrices of different sizes".into()));
                }
                for (pr, mr) in p.iter_mut().zip(m) {
                    for (a, b) in pr.iter_mut().zip(mr) {
                        *a += b;
                    }
                }
            }
        }
    }
    pooled.ok_or_else(|| Error::Shape("no confusion matrices to pool".into()))
}

/// Eval-mode logits for a batch; uses running normalization statistics and leaves `store` as is.
pub fn predict(model: &dyn Model, store: &ParamStore, x: Tensor) -> Result<Tensor> {
    forward_eval(model, &mut store.clone(), x)
}

/// Eval-mode forward pass; does not modify `store`.
fn forward_eval(model: &dyn Model, store: &mut ParamStore, x: Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::new(store, false);
    let input = ctx.tape.constant(x);
    let logits = model.forward(&mut ctx, input)?;
    Ok(ctx.value(logits).clone())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &dyn Model, store: &ParamStore, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Metrics> {
    let k = model.num_classes();
    let mut scratch = store.clone();
    let mut confusion = vec![vec![0usize; k]; k];
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let logits = forward_eval(model, &mut scratch, x)?;
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            confusion[label][argmax(row)] += 1;
        }
    }
    Metrics::from_confusion(confusion)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub fps: f64,
    pub median_seconds: f64,
    pub hardware: String,
}

pub const FPS_WARMUP: usize = 10;
pub const FPS_RUNS: usize = 100;

/// Median wall-clock time of single-image eval-mode forward passes.
pub fn measure_fps(model: &dyn Model, store: &ParamStore, image_shape: [usize; 3], warmup: usize, runs: usize) -> Result<Throughput> {
    if runs == 0 {
        return Err(Error::Config("fps measurement needs at least one timed run".into()));
    }
    let [c, h, w] = image_shape;
    let x = Tensor::full(&[1, c, h, w], 0.5);
    let mut scratch = store.clone();
    for _ in 0..warmup {
        forward_eval(model, &mut scratch, x.clone())?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        forward_eval(model, &mut scratch, x.clone())?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 { times[runs / 2] } else { 0.5 * (times[runs / 2 - 1] + times[runs / 2]) };
    Ok(Throughput { fps: 1.0 / median, median_seconds: median, hardware: hardware_string() })
}

pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu} ({}, single thread, f64)", std::env::consts::ARCH)
}
