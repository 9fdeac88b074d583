//! Adam with bias correction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One parameter tensor together with its gradient, as seen by an optimizer step.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(sizes: I, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one Adam update to every tensor in `params`.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves both parameters and state unchanged.
    pub fn step(&mut self, params: &mut [Param<'_>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam parameter list",
                self.first.len(),
                params.len(),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.len() != self.first[i].len() || p.grad.len() != p.value.len() {
                return Err(Error::shape(
                    format!("adam tensor `{}`", p.name),
                    self.first[i].len(),
                    format!("value {} / grad {}", p.value.len(), p.grad.len()),
                ));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: p.name.clone(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.value[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Adam for a latent-factor matrix updated a few rows at a time.
///
/// Each row keeps its own step counter; rows absent from a batch keep both
/// their values and their moments unchanged.
#[derive(Clone, Debug)]
pub struct RowAdamState {
    config: AdamConfig,
    steps: Vec<u64>,
    first: Array2<f64>,
    second: Array2<f64>,
}

impl RowAdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            config,
            steps: vec![0; rows],
            first: Array2::zeros((rows, cols)),
            second: Array2::zeros((rows, cols)),
        }
    }

    /// Updates `values[rows[b], :]` with `grads[b, :]`.
    pub fn step_rows(
        &mut self,
        name: &str,
        values: &mut Array2<f64>,
        grads: &Array2<f64>,
        rows: &[usize],
        lr: f64,
    ) -> Result<()> {
        if grads.nrows() != rows.len() || grads.ncols() != values.ncols() {
            return Err(Error::shape(
                format!("row-adam `{name}` gradient"),
                format!("({}, {})", rows.len(), values.ncols()),
                format!("{:?}", grads.dim()),
            ));
        }
        if values.dim() != self.first.dim() {
            return Err(Error::shape(
                format!("row-adam `{name}` values"),
                format!("{:?}", self.first.dim()),
                format!("{:?}", values.dim()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.to_string(),
            });
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (b, &r) in rows.iter().enumerate() {
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for c in 0..values.ncols() {
                let g = grads[[b, c]];
                let m = &mut self.first[[r, c]];
                *m = beta1 * *m + (1.0 - beta1) * g;
                let v = &mut self.second[[r, c]];
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                values[[r, c]] -= lr * (self.first[[r, c]] / c1)
                    / ((self.second[[r, c]] / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(state: &mut AdamState, value: &mut f64, grad: f64, lr: f64) -> Result<()> {
        let mut v = [*value];
        let g = [grad];
        state.step(
            &mut [Param {
                name: "x".into(),
                value: &mut v,
                grad: &g,
            }],
            lr,
        )?;
        *value = v[0];
        Ok(())
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut state = AdamState::new([1], AdamConfig::default());
        let mut x = 0.0;
        step_scalar(&mut state, &mut x, 1.0, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −1e-3 · 1/(1 + 1e-8)
        assert!((x + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut state = AdamState::new([1], AdamConfig::default());
        let mut x = 0.37;
        step_scalar(&mut state, &mut x, 0.0, 1e-2).unwrap();
        assert_eq!(x, 0.37);
    }

    #[test]
    fn two_positive_steps_decrease() {
        let mut state = AdamState::new([1], AdamConfig::default());
        let mut x = 0.0;
        step_scalar(&mut state, &mut x, 0.5, 1e-3).unwrap();
        let after_one = x;
        step_scalar(&mut state, &mut x, 0.5, 1e-3).unwrap();
        assert!(after_one < 0.0);
        assert!(x < after_one);
        // constant gradient → bias-corrected moments are exact, each step is lr·g/(|g|+ε)
        let per_step = 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((x + 2.0 * per_step).abs() < 1e-15);
        assert_eq!(state.step_count(), 2);
        assert!(state.second_moments()[0][0] >= 0.0);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut state = AdamState::new([1, 2], AdamConfig::default());
        let mut a = [0.0];
        let mut b = [0.0, 0.0];
        let ga = [1.0];
        let gb = [0.0, f64::NAN];
        let err = state
            .step(
                &mut [
                    Param {
                        name: "enc.layer0.weights".into(),
                        value: &mut a,
                        grad: &ga,
                    },
                    Param {
                        name: "enc.layer0.bias".into(),
                        value: &mut b,
                        grad: &gb,
                    },
                ],
                1e-3,
            )
            .unwrap_err();
        assert!(err.to_string().contains("enc.layer0.bias"));
        assert_eq!(a[0], 0.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut state = AdamState::new([1], AdamConfig::default());
        let mut x = 0.0;
        assert!(step_scalar(&mut state, &mut x, 1.0, 0.0).is_err());
    }

    #[test]
    fn row_adam_leaves_other_rows() {
        let mut values = Array2::from_elem((3, 2), 1.0);
        let mut state = RowAdamState::new(3, 2, AdamConfig::default());
        let grads = Array2::from_elem((1, 2), 2.0);
        state
            .step_rows("x", &mut values, &grads, &[1], 1e-2)
            .unwrap();
        assert_eq!(values.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(values.row(2).to_vec(), vec![1.0, 1.0]);
        assert!(values[[1, 0]] < 1.0);
    }
}
