//! Repeated random train/test splits over the shared entities and cold-start masking.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::matrix::{Axis, RatingMatrix};
use super::DomainPair;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Sorted shared-axis indices used for training.
    pub train: Vec<usize>,
    /// Sorted shared-axis indices held out as cold-start entities.
    pub test: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
    pub repeat: usize,
}

/// Number of training entities: `round(ratio · total)`, kept within `[1, total − 1]`.
pub fn train_count(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total - 1)
}

pub fn make_split(total: usize, ratio: f64, seed: u64, repeat: usize) -> Result<SplitPlan> {
    if total < 2 {
        return Err(Error::Data(format!(
            "need at least 2 shared entities to split, got {total}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = rng_for(derive_seed(seed, streams::SPLIT), repeat as u64);
    order.shuffle(&mut rng);
    let n_train = train_count(total, ratio);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train,
        test,
        ratio,
        seed,
        repeat,
    })
}

/// `repeats` independent splits of the pair's shared entities.
pub fn make_splits(
    pair: &DomainPair,
    ratio: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let total = pair.shared_count();
    (0..repeats)
        .map(|r| make_split(total, ratio, seed, r))
        .collect()
}

/// Target-domain views for one split.
#[derive(Clone, Debug)]
pub struct ColdStartViews {
    /// Target ratings with every test entity's ratings removed.
    pub train: RatingMatrix,
    /// Only the held-out ratings of test entities.
    pub test: RatingMatrix,
}

fn shared_index(axis: Axis, item: usize, user: usize) -> usize {
    match axis {
        Axis::Items => item,
        Axis::Users => user,
    }
}

/// Removes all target ratings of the plan's test entities. The source domain is never masked.
pub fn apply_cold_start(pair: &DomainPair, plan: &SplitPlan) -> Result<ColdStartViews> {
    let total = pair.shared_count();
    let mut is_test = vec![false; total];
    for &t in &plan.test {
        if t >= total {
            return Err(Error::Data(format!(
                "split index {t} outside {total} shared entities"
            )));
        }
        is_test[t] = true;
    }
    let axis = pair.shared_axis;
    let train = pair
        .target
        .filter(|r| !is_test[shared_index(axis, r.item, r.user)]);
    let test = pair
        .target
        .filter(|r| is_test[shared_index(axis, r.item, r.user)]);
    Ok(ColdStartViews { train, test })
}
