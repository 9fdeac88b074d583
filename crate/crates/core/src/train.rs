//! Mini-batch loops and loss-curve bookkeeping shared by both methods.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::StageConfig;
use crate::data::matrix::{Axis as DataAxis, RatingMatrix};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_for, chain_backprop_split, chain_objective, network_params, AdamConfig, DenseNetwork,
    LossSpec, Mask, NetworkGrads, Param,
};

/// Per-epoch RMSE of one training sub-stage.
///
/// `rmse[0]` is measured on the full data before the first update; `rmse[e]`
/// is the pooled batch RMSE seen during epoch `e`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub stage: String,
    pub rmse: Vec<f64>,
}

impl LossCurve {
    pub fn new(stage: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            rmse: Vec::new(),
        }
    }

    pub fn first(&self) -> Option<f64> {
        self.rmse.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.rmse.last().copied()
    }

    /// True when the curve ends at or below its start and no epoch rises by
    /// more than `tolerance` (relative) over the previous one.
    pub fn trends_down(&self, tolerance: f64) -> bool {
        let (Some(first), Some(last)) = (self.first(), self.last()) else {
            return true;
        };
        last <= first
            && self
                .rmse
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + tolerance))
    }

    pub(crate) fn record(&mut self, epoch: usize, epochs: usize, value: f64) {
        if epoch == epochs || (epoch > 0 && epoch % 10 == 0) {
            log::info!("[{}] epoch {epoch}/{epochs} rmse {value:.5}", self.stage);
        }
        self.rmse.push(value);
    }
}

/// Training-facing data of one split: the full source domain, the
/// cold-start-masked target domain and the training entities.
#[derive(Clone, Copy, Debug)]
pub struct TrainViews<'a> {
    pub source: &'a RatingMatrix,
    pub target: &'a RatingMatrix,
    pub shared_axis: DataAxis,
    /// Shared-axis indices whose target ratings are visible.
    pub train: &'a [usize],
}

impl<'a> TrainViews<'a> {
    pub fn new(
        source: &'a RatingMatrix,
        target: &'a RatingMatrix,
        shared_axis: DataAxis,
        train: &'a [usize],
    ) -> Result<Self> {
        if source.count(shared_axis) != target.count(shared_axis) {
            return Err(Error::shape(
                format!("shared {shared_axis} count"),
                source.count(shared_axis),
                target.count(shared_axis),
            ));
        }
        if train.is_empty() {
            return Err(Error::Data("no training entities".into()));
        }
        if let Some(&bad) = train.iter().find(|&&i| i >= source.count(shared_axis)) {
            return Err(Error::Data(format!("training index {bad} out of range")));
        }
        Ok(Self {
            source,
            target,
            shared_axis,
            train,
        })
    }

    pub fn all_shared(&self) -> Vec<usize> {
        (0..self.source.count(self.shared_axis)).collect()
    }
}

/// Shuffled index chunks of at most `batch` positions out of `0..n`.
pub(crate) fn shuffled_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Accumulates squared error and count across batches of an epoch.
#[derive(Default)]
pub(crate) struct Pooled {
    sum: f64,
    count: f64,
}

impl Pooled {
    pub(crate) fn add(&mut self, mse: f64, count: usize) {
        self.sum += mse * count as f64;
        self.count += count as f64;
    }

    pub(crate) fn rmse(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            (self.sum / self.count).sqrt()
        }
    }
}

/// Collects optimizer views for several networks, in order.
pub(crate) fn params_for<'a>(
    nets: Vec<(&'a str, &'a mut DenseNetwork, &'a NetworkGrads)>,
) -> Vec<Param<'a>> {
    nets.into_iter()
        .flat_map(|(name, net, grads)| network_params(name, net, grads))
        .collect()
}

fn observed(mask: Option<&Mask>, rows: usize, cols: usize) -> usize {
    mask.map_or(rows * cols, |m| m.iter().filter(|&&b| b).count())
}

/// Trains the composition `nets[last] ∘ … ∘ nets[0]` on `(x, y)` rows with Adam.
pub(crate) fn fit_chain<R: Rng>(
    nets: &mut [&mut DenseNetwork],
    names: &[&str],
    x: &Array2<f64>,
    y: &Array2<f64>,
    mask: Option<&Mask>,
    stage: &StageConfig,
    batch: usize,
    rng: &mut R,
    curve: &mut LossCurve,
) -> Result<()> {
    let loss = match mask {
        Some(_) => LossSpec::masked(stage.l2),
        None => LossSpec::dense(stage.l2),
    };
    let no_penalty = LossSpec { l2_weight: 0.0, ..loss };
    {
        let refs: Vec<&DenseNetwork> = nets.iter().map(|n| &**n).collect();
        curve.record(0, stage.epochs, chain_objective(&refs, x.view(), y.view(), mask, &no_penalty)?.sqrt());
    }
    if stage.epochs == 0 {
        return Ok(());
    }
    let mut adam = {
        let refs: Vec<&DenseNetwork> = nets.iter().map(|n| &**n).collect();
        adam_for(&refs, AdamConfig::default())
    };
    for epoch in 1..=stage.epochs {
        let mut pooled = Pooled::default();
        for rows in shuffled_batches(x.nrows(), batch, rng) {
            let xb = x.select(Axis(0), &rows);
            let yb = y.select(Axis(0), &rows);
            let mb = mask.map(|m| m.select(Axis(0), &rows));
            let count = observed(mb.as_ref(), yb.nrows(), yb.ncols());
            if count == 0 {
                continue;
            }
            let (data, grads) = {
                let refs: Vec<&DenseNetwork> = nets.iter().map(|n| &**n).collect();
                chain_backprop_split(&refs, xb.view(), yb.view(), mb.as_ref(), &loss)?
            };
            if !data.is_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: format!("{} loss", names.join("+")),
                });
            }
            pooled.add(data, count);
            let views = nets
                .iter_mut()
                .zip(names)
                .zip(&grads)
                .map(|((net, name), g)| (*name, &mut **net, g))
                .collect();
            adam.step(&mut params_for(views), stage.lr)?;
        }
        curve.record(epoch, stage.epochs, pooled.rmse());
    }
    Ok(())
}
