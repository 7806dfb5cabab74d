//! Labelled image samples grouped by subject, batching, and a synthetic stripes dataset.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, height, width]`.
    pub image: Tensor,
    pub label: usize,
    pub subject: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Dataset("no classes declared".into()));
        }
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        for s in &samples {
            if s.label >= classes.len() {
                return Err(Error::Label { label: s.label, classes: classes.len() });
            }
            if s.image.rank() != 3 || Some(s.image.shape().to_vec()) != shape {
                return Err(Error::Dataset(format!(
                    "sample of subject {} has shape {:?}, expected {:?}",
                    s.subject,
                    s.image.shape(),
                    shape.unwrap_or_default()
                )));
            }
        }
        Ok(Self { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `(channels, height, width)` of every sample.
    pub fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| {
            let d = s.image.shape();
            (d[0], d[1], d[2])
        })
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Indices of samples whose subject is in `subjects`.
    pub fn indices_of_subjects(&self, subjects: &[String]) -> Vec<usize> {
        let set: BTreeSet<&String> = subjects.iter().collect();
        (0..self.samples.len()).filter(|&i| set.contains(&self.samples[i].subject)).collect()
    }

    /// Stacks the given samples into a `[B, C, H, W]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }
}

/// Shuffles `indices` and cuts them into consecutive batches of at most `batch_size`.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seeded 50/50 partition of the subjects present in `indices`: the first half (rounded up)
/// trains weights, the second half trains the architecture.
pub fn split_subjects_half(data: &Dataset, indices: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut subjects: Vec<String> =
        indices.iter().map(|&i| data.samples[i].subject.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::Dataset(format!(
            "search needs samples from at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    subjects.shuffle(&mut rng);
    let first: BTreeSet<&String> = subjects[..subjects.len().div_ceil(2)].iter().collect();
    let (a, b): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| first.contains(&data.samples[i].subject));
    Ok((a, b))
}

/// Synthetic two-class problem: horizontal (class 0) vs vertical (class 1) sinusoidal stripes
/// with per-subject brightness/contrast and per-sample period, phase and pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct StripesConfig {
    pub size: usize,
    pub samples: usize,
    pub subjects: usize,
    pub noise: f64,
}

impl Default for StripesConfig {
    fn default() -> Self {
        Self { size: 16, samples: 200, subjects: 4, noise: 0.1 }
    }
}

pub fn stripes(cfg: &StripesConfig, seed: u64) -> Result<Dataset> {
    if cfg.subjects == 0 || cfg.samples < cfg.subjects || cfg.size < 4 {
        return Err(Error::Config(format!("invalid stripes config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.size;
    let mut samples = Vec::with_capacity(cfg.samples);
    let style: Vec<(f64, f64)> = (0..cfg.subjects).map(|_| (rng.gen_range(0.35..0.65), rng.gen_range(0.2..0.35))).collect();
    for i in 0..cfg.samples {
        let subject = i % cfg.subjects;
        let label = (i / cfg.subjects) % 2;
        let (brightness, contrast) = style[subject];
        let period = rng.gen_range(3.0..6.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let image = Tensor::from_fn(&[1, n, n], |p| {
            let (y, x) = ((p / n) as f64, (p % n) as f64);
            let t = if label == 0 { y } else { x };
            let v = brightness + contrast * (std::f64::consts::TAU * t / period + phase).sin() + noise.sample(&mut rng);
            v.clamp(0.0, 1.0)
        });
        samples.push(Sample { image, label, subject: format!("s{subject:02}") });
    }
    Dataset::new(samples, vec!["horizontal".into(), "vertical".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripes_layout() {
        let d = stripes(&StripesConfig::default(), 7).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.subjects().len(), 4);
        assert_eq!(d.input_shape(), Some((1, 16, 16)));
        for s in d.subjects() {
            let idx = d.indices_of_subjects(std::slice::from_ref(&s));
            assert_eq!(idx.len(), 50);
            let ones = idx.iter().filter(|&&i| d.samples[i].label == 1).count();
            assert_eq!(ones, 25);
        }
        assert_eq!(stripes(&StripesConfig::default(), 7).unwrap(), d);
    }

    #[test]
    fn half_split_is_by_subject() {
        let d = stripes(&StripesConfig::default(), 1).unwrap();
        let all: Vec<usize> = (0..d.len()).collect();
        let (a, b) = split_subjects_half(&d, &all, 3).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        let sa: BTreeSet<_> = a.iter().map(|&i| &d.samples[i].subject).collect();
        let sb: BTreeSet<_> = b.iter().map(|&i| &d.samples[i].subject).collect();
        assert!(sa.is_disjoint(&sb));
        assert_eq!((sa.len(), sb.len()), (2, 2));
        let one = d.indices_of_subjects(&["s00".to_string()]);
        assert!(split_subjects_half(&d, &one, 3).is_err());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let idx: Vec<usize> = (10..47).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = shuffled_batches(&idx, 16, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 5]);
        let mut flat: Vec<usize> = batches.concat();
        flat.sort();
        assert_eq!(flat, idx);
    }
}
