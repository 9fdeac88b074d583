//! Dense-network engine: forward and backward passes, Adam, masked losses
//! and finite-difference gradient checks.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod network;

use ndarray::{Array2, ArrayView2};

pub use adam::{AdamConfig, AdamState, Param, RowAdamState};
pub use gradcheck::{grad_check, grad_check_chain, run_suite, GradCheckConfig, SuiteReport};
pub use loss::{dense_mse, masked_mse, LossKind, LossSpec, Mask};
pub use network::{Activation, DenseLayer, DenseNetwork, ForwardTrace, LayerGrads, NetworkGrads};

use crate::error::{Error, Result};

fn check_mask_presence(loss: &LossSpec, mask: Option<&Mask>) -> Result<()> {
    match (loss.kind, mask) {
        (LossKind::MaskedMse, None) => Err(Error::Config("masked loss requires a mask".into())),
        (LossKind::DenseMse, Some(_)) => {
            Err(Error::Config("dense loss does not take a mask".into()))
        }
        _ => Ok(()),
    }
}

fn data_loss_grad(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
) -> Result<(f64, Array2<f64>)> {
    match mask {
        Some(m) => loss::masked_mse_grad(pred, target, m, false),
        None => loss::dense_mse_grad(pred, target),
    }
}

/// Loss value of `net(x)` against `target`, including the L2 weight penalty.
pub fn objective(
    net: &DenseNetwork,
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
) -> Result<f64> {
    chain_objective(&[net], x, target, mask, loss)
}

/// Loss value and parameter gradients of `net(x)` against `target`.
pub fn backprop(
    net: &DenseNetwork,
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
) -> Result<(f64, NetworkGrads)> {
    let (value, mut grads) = chain_backprop(&[net], x, target, mask, loss)?;
    Ok((value, grads.pop().expect("one network")))
}

/// Objective of the composition `nets[last] ∘ … ∘ nets[0]`; the L2 penalty
/// covers every network in the chain.
pub fn chain_objective(
    nets: &[&DenseNetwork],
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
) -> Result<f64> {
    check_mask_presence(loss, mask)?;
    let mut out = x.to_owned();
    for net in nets {
        out = net.forward(out.view())?;
    }
    let data = match mask {
        Some(m) => loss::masked_mse(out.view(), target, m)?,
        None => loss::dense_mse(out.view(), target)?,
    };
    let penalty: f64 = nets.iter().map(|n| n.weight_norm_sq()).sum();
    Ok(data + loss.l2_weight * penalty)
}

/// Backpropagation through a chain of networks.
pub fn chain_backprop(
    nets: &[&DenseNetwork],
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
) -> Result<(f64, Vec<NetworkGrads>)> {
    let (data, grads) = chain_backprop_split(nets, x, target, mask, loss)?;
    let penalty: f64 = nets.iter().map(|n| n.weight_norm_sq()).sum();
    Ok((data + loss.l2_weight * penalty, grads))
}

/// Like [`chain_backprop`] but returns the data term alone (gradients still
/// include the L2 contribution).
pub fn chain_backprop_split(
    nets: &[&DenseNetwork],
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: Option<&Mask>,
    loss: &LossSpec,
) -> Result<(f64, Vec<NetworkGrads>)> {
    check_mask_presence(loss, mask)?;
    let mut traces = Vec::with_capacity(nets.len());
    let mut current = x.to_owned();
    for net in nets {
        let trace = net.forward_trace(current.view())?;
        current = trace.output().clone();
        traces.push(trace);
    }
    let (data, delta) = data_loss_grad(current.view(), target, mask)?;
    let grads = chain_backward(nets, &traces, delta, loss.l2_weight)?;
    Ok((data, grads))
}

/// Pushes `∂loss/∂output` back through recorded passes of a chain, adding
/// the L2 gradient to every network.
pub fn chain_backward(
    nets: &[&DenseNetwork],
    traces: &[ForwardTrace],
    grad_output: Array2<f64>,
    l2_weight: f64,
) -> Result<Vec<NetworkGrads>> {
    Ok(chain_backward_input(nets, traces, grad_output, l2_weight)?.0)
}

/// [`chain_backward`] that also returns `∂loss/∂input` of the first network.
pub fn chain_backward_input(
    nets: &[&DenseNetwork],
    traces: &[ForwardTrace],
    grad_output: Array2<f64>,
    l2_weight: f64,
) -> Result<(Vec<NetworkGrads>, Array2<f64>)> {
    let mut delta = grad_output;
    let mut grads = Vec::with_capacity(nets.len());
    for (net, trace) in nets.iter().zip(traces).rev() {
        let (mut g, d) = net.backward(trace, delta)?;
        g.add_l2(net, l2_weight);
        grads.push(g);
        delta = d;
    }
    grads.reverse();
    Ok((grads, delta))
}

/// Builds the optimizer view of a network and its gradients.
pub fn network_params<'a>(
    prefix: &str,
    net: &'a mut DenseNetwork,
    grads: &'a NetworkGrads,
) -> Vec<Param<'a>> {
    let names = net.param_names(prefix);
    net.param_slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(names)
        .map(|((value, grad), name)| Param { name, value, grad })
        .collect()
}

/// Adam state sized for the given networks, in order.
pub fn adam_for(nets: &[&DenseNetwork], config: AdamConfig) -> AdamState {
    AdamState::new(
        nets.iter()
            .flat_map(|n| n.layers().iter().flat_map(|l| [l.weights.len(), l.bias.len()]))
            .collect::<Vec<_>>(),
        config,
    )
}
