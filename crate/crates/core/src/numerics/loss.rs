//! Masked and dense mean-squared objectives.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation mask; `true` marks an observed cell.
pub type Mask = Array2<bool>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    MaskedMse,
    DenseMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Weight of `Σ‖W‖²_F`; biases are not regularized.
    pub l2_weight: f64,
}

impl LossSpec {
    pub fn masked(l2_weight: f64) -> Self {
        Self {
            kind: LossKind::MaskedMse,
            l2_weight,
        }
    }

    pub fn dense(l2_weight: f64) -> Self {
        Self {
            kind: LossKind::DenseMse,
            l2_weight,
        }
    }
}

fn check_same(context: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// `Σ_{mask}(pred−target)² / |mask|`. Unobserved cells are never read.
pub fn masked_mse(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: &Mask,
) -> Result<f64> {
    check_same("masked_mse target", pred.dim(), target.dim())?;
    check_same("masked_mse mask", pred.dim(), mask.dim())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    Zip::from(&pred).and(&target).and(mask).for_each(|&p, &t, &m| {
        if m {
            let d = p - t;
            sum += d * d;
            count += 1;
        }
    });
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Masked MSE and its gradient with respect to `pred`.
///
/// With `allow_empty`, an empty mask yields a zero loss and zero gradient
/// instead of an error; training batches use this for rows without ratings.
pub fn masked_mse_grad(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: &Mask,
    allow_empty: bool,
) -> Result<(f64, Array2<f64>)> {
    check_same("masked_mse target", pred.dim(), target.dim())?;
    check_same("masked_mse mask", pred.dim(), mask.dim())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        if allow_empty {
            return Ok((0.0, Array2::zeros(pred.dim())));
        }
        return Err(Error::EmptyMask);
    }
    let scale = 2.0 / count as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = 0.0;
    Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                let d = p - t;
                sum += d * d;
                *g = scale * d;
            }
        });
    Ok((sum / count as f64, grad))
}

/// Mean of `(pred−target)²` over every entry.
pub fn dense_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_same("dense_mse target", pred.dim(), target.dim())?;
    if pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = Zip::from(&pred)
        .and(&target)
        .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
    Ok(sum / pred.len() as f64)
}

pub fn dense_mse_grad(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let value = dense_mse(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    let grad = Zip::from(&pred)
        .and(&target)
        .map_collect(|&p, &t| scale * (p - t));
    Ok((value, grad))
}
