//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences with step 1e-3 in `f64`, compared against the
//! analytic gradient with a scaled relative error: the denominator is
//! clamped at 1e-2, so large gradients are held to a relative bound and
//! near-zero gradients to an absolute one. Everything here rebuilds the
//! forward pass from scratch per probe, so it stays independent of the
//! backward implementation it checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

/// Numeric gradients of `loss_fn` with respect to every element of every
/// parameter, by central differences.
pub fn fd_gradients(
    params: &[Tensor<f64>],
    loss_fn: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for j in 0..params[p].numel() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + step;
            let up = loss_fn(&work)?;
            work[p].data_mut()[j] = orig - step;
            let down = loss_fn(&work)?;
            work[p].data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Worst scaled relative error between analytic and numeric gradients.
pub fn max_scaled_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-2);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Build a graph over `params`, backprop the scalar it returns, and compare
/// against finite differences. Returns the worst scaled relative error.
///
/// `build` must be a pure function of the parameter values (seed any
/// randomness inside it).
pub fn check_op(
    params: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let analytic = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
        let loss = build(&mut g, &ids)?;
        let mut grads = g.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
            .collect::<Vec<_>>()
    };
    let numeric = fd_gradients(
        params,
        &|vals: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|p| g.param(p)).collect();
            let loss = build(&mut g, &ids)?;
            Ok(g.value(loss).item())
        },
        FD_STEP,
    )?;
    Ok(max_scaled_rel_err(&analytic, &numeric))
}

/// Deterministic pseudo-random tensors for probes.
pub fn probe_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = crate::rng::StreamRng::new(seed).derive("gradcheck");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| (rng.next_f64() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}
