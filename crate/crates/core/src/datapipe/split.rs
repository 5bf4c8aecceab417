use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::case::Case;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_count: 80,
            test_count: 20,
            labeled_fraction: 0.1,
            seed: 1337,
        }
    }
}

/// Number of labeled cases for a training set of `train_count`.
pub fn labeled_count(train_count: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("labeled fraction must be in (0, 1], got {fraction}")));
    }
    let n = (fraction * train_count as f64).round() as usize;
    if n == 0 {
        return Err(Error::Config(format!(
            "labeled fraction {fraction} of {train_count} training cases leaves no labeled case"
        )));
    }
    Ok(n.min(train_count))
}

/// Labeled, unlabeled and test partitions. Unlabeled cases keep their
/// ground truth for oracle evaluation; training never reads it.
#[derive(Clone, Debug)]
pub struct Split {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<Case>,
    pub test: Vec<Case>,
}

impl Split {
    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            labeled: self.labeled.iter().map(|c| c.id.clone()).collect(),
            unlabeled: self.unlabeled.iter().map(|c| c.id.clone()).collect(),
            test: self.test.iter().map(|c| c.id.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

fn divide_train(mut train: Vec<Case>, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Case>, Vec<Case>)> {
    let n = labeled_count(train.len(), fraction)?;
    train.shuffle(rng);
    let unlabeled = train.split_off(n);
    Ok((train, unlabeled))
}

/// Seeded partition of `cases` into train and test, then labeled/unlabeled.
pub fn split(mut cases: Vec<Case>, spec: &SplitSpec) -> Result<Split> {
    if cases.len() < spec.train_count + spec.test_count {
        return Err(Error::Config(format!(
            "split needs {} cases, only {} available",
            spec.train_count + spec.test_count,
            cases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    cases.shuffle(&mut rng);
    cases.truncate(spec.train_count + spec.test_count);
    let test = cases.split_off(spec.train_count);
    let (labeled, unlabeled) = divide_train(cases, spec.labeled_fraction, &mut rng)?;
    Ok(Split {
        labeled,
        unlabeled,
        test,
    })
}

/// Partition when train/test membership is already fixed (e.g. by a manifest).
pub fn split_train(train: Vec<Case>, test: Vec<Case>, fraction: f64, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labeled, unlabeled) = divide_train(train, fraction, &mut rng)?;
    Ok(Split {
        labeled,
        unlabeled,
        test,
    })
}
