//! Dense building blocks with hand-written reverse passes.
//!
//! Everything here works on one sample at a time (`[tokens][features]`);
//! batching is a loop in the caller.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Affine map `y = x·W + b` with `W: [in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform in `±1/√fan_in` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
        let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
        Self { weight, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates into `grad`, returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Per-token normalisation over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// Saved state from [`LayerNorm::forward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (rows, dim) = x.dim();
        let mut normalized = Array2::zeros((rows, dim));
        let mut inv_std = Array1::zeros(rows);
        for (t, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[t] = is;
            for (o, v) in normalized.row_mut(t).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let y = &normalized * &self.gain + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let dim = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for t in 0..dy.nrows() {
            let xhat = cache.normalized.row(t);
            let dxhat = &dy.row(t) * &self.gain;
            let mean_d = dxhat.sum() / dim;
            let mean_dx = (&dxhat * &xhat).sum() / dim;
            let is = cache.inv_std[t];
            for j in 0..dxhat.len() {
                dx[[t, j]] = is * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

/// Time-axis map `T_final → T_pred` shared across features, then `D → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastHead {
    /// `[T_final][T_pred]`
    pub time: Linear,
    /// `[D][C]`
    pub out: Linear,
}

impl ForecastHead {
    pub fn zeros(t_final: usize, t_pred: usize, dim: usize, channels: usize) -> Self {
        Self {
            time: Linear::zeros(t_final, t_pred),
            out: Linear::zeros(dim, channels),
        }
    }

    /// Returns the forecast `[T_pred][C]` and the time-mapped hidden `[T_pred][D]`.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = self.time.weight.t().dot(&x) + &self.time.bias.view().insert_axis(Axis(1));
        let y = self.out.forward(hidden.view());
        (y, hidden)
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        hidden: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut ForecastHead,
    ) -> Array2<f64> {
        let d_hidden = self.out.backward(hidden, dy, &mut grad.out);
        grad.time.weight += &x.dot(&d_hidden.t());
        grad.time.bias += &d_hidden.sum_axis(Axis(1));
        self.time.weight.dot(&d_hidden)
    }
}

/// Batched layer norm over `[B][T][D]`.
pub fn layer_norm(x: ArrayView3<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> Array3<f64> {
    let ln = LayerNorm {
        gain: gain.to_owned(),
        bias: bias.to_owned(),
    };
    map_samples(x, |sample| ln.forward(sample).0)
}

/// Batched per-timestep embedding `[B][T][C] → [B][T][D]`.
pub fn embed(x: ArrayView3<f64>, weight: ArrayView2<f64>, bias: ArrayView1<f64>) -> Array3<f64> {
    let lin = Linear {
        weight: weight.to_owned(),
        bias: bias.to_owned(),
    };
    map_samples(x, |sample| lin.forward(sample))
}

/// Batched forecast head `[B][T_final][D] → [B][T_pred][C]`.
pub fn forecast_head(x: ArrayView3<f64>, head: &ForecastHead) -> Array3<f64> {
    map_samples(x, |sample| head.forward(sample).0)
}

fn map_samples(x: ArrayView3<f64>, f: impl Fn(ArrayView2<f64>) -> Array2<f64>) -> Array3<f64> {
    let outs: Vec<Array2<f64>> = x.outer_iter().map(f).collect();
    let (rows, cols) = outs.first().map(|a| a.dim()).unwrap_or((0, 0));
    let mut y = Array3::zeros((outs.len(), rows, cols));
    for (b, o) in outs.iter().enumerate() {
        y.slice_mut(s![b, .., ..]).assign(o);
    }
    y
}
