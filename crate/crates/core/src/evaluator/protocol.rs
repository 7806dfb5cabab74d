use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::train::rng_for;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Subject-independent evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Protocol {
    /// One fold; a seeded shuffle of subjects puts `round(n · test_fraction)` of them (at least
    /// one, at most `n − 1`) on the test side.
    Holdout { test_fraction: f64 },
    /// Leave one subject out: one fold per subject.
    Loso,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Holdout { .. } => f.write_str("holdout"),
            Protocol::Loso => f.write_str("loso"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(Protocol::Loso),
            "holdout" => Ok(Protocol::Holdout { test_fraction: 0.25 }),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected holdout or loso)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub test_subjects: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_protocol(data: &Dataset, protocol: Protocol, seed: u64) -> Result<Vec<Fold>> {
    let subjects = data.subjects();
    if subjects.len() < 2 {
        return Err(Error::Dataset(format!(
            "subject-independent evaluation needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    let test_sets: Vec<Vec<String>> = match protocol {
        Protocol::Loso => subjects.iter().map(|s| vec![s.clone()]).collect(),
        Protocol::Holdout { test_fraction } => {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::Config(format!("test_fraction must be in (0, 1), got {test_fraction}")));
            }
            let mut shuffled = subjects.clone();
            shuffled.shuffle(&mut rng_for(seed, u64::MAX - 1));
            let n_test = ((subjects.len() as f64 * test_fraction).round() as usize).clamp(1, subjects.len() - 1);
            let mut test = shuffled[..n_test].to_vec();
            test.sort();
            vec![test]
        }
    };
    test_sets
        .into_iter()
        .enumerate()
        .map(|(index, test_subjects)| {
            let test_set: BTreeSet<&String> = test_subjects.iter().collect();
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| test_set.contains(&data.samples[i].subject));
            let train_subjects: BTreeSet<&String> = train.iter().map(|&i| &data.samples[i].subject).collect();
            assert!(train_subjects.is_disjoint(&test_set), "subject on both sides of fold {index}");
            Ok(Fold { index, test_subjects, train, test })
        })
        .collect()
}
