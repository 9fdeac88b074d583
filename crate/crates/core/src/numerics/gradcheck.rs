//! Central-difference verification of analytic gradients.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{LossSpec, Mask};
use super::network::{Activation, DenseLayer, DenseNetwork};
use super::{chain_backprop, chain_objective};
use crate::error::{Error, Result};
use crate::seed::{rng_for, streams};

/// Largest relative error a passing check may report.
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Inputs closer than this to a ReLU kink are resampled: a step of `h` can
/// then move a pre-activation across zero and break the finite difference.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Adds `delta` to analytic gradient entry `index` before comparing.
    pub fault: Option<(usize, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            fault: None,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference<F>(x0: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Max relative error between backprop and central differences for a single network.
pub fn grad_check(
    net: &DenseNetwork,
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
    config: &GradCheckConfig,
) -> Result<f64> {
    grad_check_chain(std::slice::from_ref(net), x, target, mask, loss, config)
}

/// Same as [`grad_check`] for the composition `nets[last] ∘ … ∘ nets[0]`.
pub fn grad_check_chain(
    nets: &[DenseNetwork],
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
    config: &GradCheckConfig,
) -> Result<f64> {
    let refs: Vec<&DenseNetwork> = nets.iter().collect();
    let (_, grads) = chain_backprop(&refs, x, target, mask, loss)?;
    let mut analytic: Vec<f64> = grads.iter().flat_map(|g| g.flatten()).collect();
    if let Some((index, delta)) = config.fault {
        if let Some(a) = analytic.get_mut(index) {
            *a += delta;
        }
    }

    let flat: Vec<f64> = nets.iter().flat_map(|n| n.flatten()).collect();
    let counts: Vec<usize> = nets.iter().map(DenseNetwork::param_count).collect();
    let mut scratch: Vec<DenseNetwork> = nets.to_vec();
    let numeric = central_difference(&flat, config.step, |params| {
        let mut offset = 0;
        for (net, &n) in scratch.iter_mut().zip(&counts) {
            net.set_flat(&params[offset..offset + n])?;
            offset += n;
        }
        let refs: Vec<&DenseNetwork> = scratch.iter().collect();
        chain_objective(&refs, x, target, mask, loss)
    })?;
    Ok(max_relative_error(&analytic, &numeric, config.floor))
}

/// Outcome of [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub random_nets: usize,
    /// Worst error over the random single networks.
    pub random_max: f64,
    /// Error of the stacked decoder ∘ mapper ∘ encoder composition.
    pub stacked: f64,
    pub fault_injected: bool,
}

impl SuiteReport {
    pub fn max_relative_error(&self) -> f64 {
        self.random_max.max(self.stacked)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < PASS_THRESHOLD
    }
}

fn uniform<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn random_mask<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mask {
    let mut mask = Array2::from_shape_simple_fn((rows, cols), || rng.random_bool(0.6));
    mask[[rng.random_range(0..rows), rng.random_range(0..cols)]] = true;
    mask
}

/// Glorot weights with biases drawn from ±0.5. Zero biases would leave a
/// unit behind an all-dead layer pinned to its kink for every input.
fn random_net<R: Rng>(sizes: &[usize], output: Activation, rng: &mut R) -> Result<DenseNetwork> {
    let net = DenseNetwork::glorot(sizes, Activation::Relu, output, rng)?;
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let bias = Array1::from_shape_simple_fn(l.bias.len(), || rng.random_range(-0.5..0.5));
            DenseLayer::new(l.weights.clone(), bias, l.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNetwork::new(layers)
}

/// Input rows for `nets` whose every ReLU pre-activation keeps [`KINK_MARGIN`].
fn clear_of_kinks<R: Rng>(nets: &[DenseNetwork], rows: usize, rng: &mut R) -> Result<Array2<f64>> {
    for _ in 0..1000 {
        let x = uniform(rows, nets[0].input_size(), -1.0, 1.0, rng);
        let mut h = x.clone();
        let mut clear = true;
        for net in nets {
            let trace = net.forward_trace(h.view())?;
            clear &= trace.min_kink_distance(net) >= KINK_MARGIN;
            h = trace.into_output();
        }
        if clear {
            return Ok(x);
        }
    }
    Err(Error::Config("could not sample inputs away from ReLU kinks".into()))
}

fn check_case<R: Rng>(
    nets: &[DenseNetwork],
    rng: &mut R,
    masked: bool,
    l2: f64,
    config: &GradCheckConfig,
) -> Result<f64> {
    let rows = 4;
    let x = clear_of_kinks(nets, rows, rng)?;
    let out = nets.last().expect("non-empty chain").output_size();
    let target = uniform(rows, out, 0.0, 1.0, rng);
    if masked {
        let mask = random_mask(rows, out, rng);
        grad_check_chain(nets, x.view(), target.view(), Some(&mask), &LossSpec::masked(l2), config)
    } else {
        grad_check_chain(nets, x.view(), target.view(), None, &LossSpec::dense(l2), config)
    }
}

/// Checks `random_nets` random small networks and one stacked
/// encoder → mapper → decoder chain under a masked loss.
///
/// With `inject_fault`, one analytic gradient entry of every check is
/// perturbed so the suite must fail.
pub fn run_suite(seed: u64, random_nets: usize, inject_fault: bool) -> Result<SuiteReport> {
    let mut rng = rng_for(seed, streams::GRADCHECK);
    let config = GradCheckConfig {
        fault: inject_fault.then_some((0, 1e-2)),
        ..GradCheckConfig::default()
    };
    let mut random_max: f64 = 0.0;
    for _ in 0..random_nets {
        let depth = rng.random_range(1..=3);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=5)).collect();
        let output = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
        let net = random_net(&sizes, output, &mut rng)?;
        let masked = rng.random_bool(0.5);
        let l2 = if rng.random_bool(0.5) { 1e-3 } else { 0.0 };
        random_max = random_max.max(check_case(&[net], &mut rng, masked, l2, &config)?);
    }
    let chain = vec![
        random_net(&[7, 5, 3], Activation::Relu, &mut rng)?,
        random_net(&[3, 4, 3], Activation::Relu, &mut rng)?,
        random_net(&[3, 5, 6], Activation::Identity, &mut rng)?,
    ];
    let stacked = check_case(&chain, &mut rng, true, 1e-3, &config)?;
    Ok(SuiteReport {
        seed,
        random_nets,
        random_max,
        stacked,
        fault_injected: inject_fault,
    })
}
