//! Finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use db2transf::model::{Db2TransF, ModelParams};
use ndarray::{Array3, ArrayView3};

pub const STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that entries that are zero up to
/// round-off do not dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // both numerically zero: report the absolute gap scaled to the floor
        (analytic - numeric).abs() / 1e-7 * 1e-5
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central difference of `f` at `x[i]` for every `i`.
pub fn central_diff(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(x);
            x[i] = orig - STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn mse(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        acc += (p - t) * (p - t);
    }
    acc / pred.len() as f64
}

/// Worst relative error over one named tensor.
#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Compares the analytic MSE gradients of `model` against central
/// differences for every parameter entry and every input entry.
pub fn check_model(model: &Db2TransF, x: &Array3<f64>, target: &Array3<f64>) -> Vec<TensorCheck> {
    let trace = model.forward_trace(x.view()).unwrap();
    let n = target.len() as f64;
    let loss_grad = (&trace.output - target) * (2.0 / n);
    let (grads, d_x) = model.backward(&trace, loss_grad.view()).unwrap();

    let mut out = Vec::new();
    let names: Vec<String> = model.params.tensors().into_iter().map(|t| t.name).collect();
    for (idx, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[idx].data.to_vec();
        let mut flat = model.params.tensors()[idx].data.to_vec();
        let numeric = central_diff(&mut flat, |vals| {
            let mut m = model.clone();
            m.params.tensors_mut()[idx].1.copy_from_slice(vals);
            mse(m.forward(x.view()).unwrap().view(), target.view())
        });
        out.push(summarise(name, &analytic, &numeric));
    }

    let mut flat = x.iter().copied().collect::<Vec<_>>();
    let numeric = central_diff(&mut flat, |vals| {
        let xi = Array3::from_shape_vec(x.raw_dim(), vals.to_vec()).unwrap();
        mse(model.forward(xi.view()).unwrap().view(), target.view())
    });
    let analytic: Vec<f64> = d_x.iter().copied().collect();
    out.push(summarise("input", &analytic, &numeric));
    out
}

fn summarise(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let max_rel_err = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    TensorCheck {
        name: name.to_string(),
        entries: analytic.len(),
        max_rel_err,
    }
}

/// Sum of gradient magnitudes, used to make sure a check is not vacuous.
pub fn grad_mass(g: &ModelParams) -> f64 {
    g.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v.abs()).sum()
}
