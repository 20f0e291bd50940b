//! Multi-head, multi-scale learnable DB2 decomposition.
//!
//! Each head owns a `d_h`-wide slice of the feature axis and, per level, a
//! coefficient vector for each of the four low-pass and four high-pass taps.
//! The classical transform from [`crate::dwt`] is recovered exactly when every
//! coefficient equals its fixed tap value.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dwt::{self, Db2Filter, TAPS};
use crate::error::{Error, Result};

/// Trainable filter coefficients, both shaped `[levels][heads][4][head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableWaveletParams {
    pub alpha: Array4<f64>,
    pub beta: Array4<f64>,
}

impl LearnableWaveletParams {
    pub fn zeros(levels: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            alpha: Array4::zeros((levels, heads, TAPS, head_dim)),
            beta: Array4::zeros((levels, heads, TAPS, head_dim)),
        }
    }

    /// Classical tap values plus i.i.d. `Normal(0, sigma²)` noise drawn from `rng`.
    pub fn init_with_rng<R: Rng + ?Sized>(
        levels: usize,
        heads: usize,
        head_dim: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if levels == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::Precondition(format!(
                "wavelet dims must be positive (levels={levels}, heads={heads}, head_dim={head_dim})"
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "init sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        let filter = Db2Filter::new();
        let mut p = Self::zeros(levels, heads, head_dim);
        let noise = Normal::new(0.0, sigma).expect("validated sigma");
        for ((_, _, k, _), a) in p.alpha.indexed_iter_mut() {
            *a = filter.low[k] + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        }
        for ((_, _, k, _), b) in p.beta.indexed_iter_mut() {
            *b = filter.high[k] + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        }
        Ok(p)
    }

    pub fn levels(&self) -> usize {
        self.alpha.dim().0
    }

    pub fn heads(&self) -> usize {
        self.alpha.dim().1
    }

    pub fn head_dim(&self) -> usize {
        self.alpha.dim().3
    }

    pub fn model_dim(&self) -> usize {
        self.heads() * self.head_dim()
    }

    pub fn param_count(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }
}

/// Seeded initialisation; `sigma = 0` gives the exact classical filters.
pub fn init_params(
    levels: usize,
    heads: usize,
    head_dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<LearnableWaveletParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LearnableWaveletParams::init_with_rng(levels, heads, head_dim, sigma, &mut rng)
}

/// `T' = n_L + Σ_l n_l` with `n_0 = T`, `n_l = ceil(n_{l-1} / 2)`.
pub fn output_length(len: usize, levels: usize) -> Result<usize> {
    let lens = dwt::level_lengths(len, levels)?;
    Ok(lens.iter().sum::<usize>() + lens[levels - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    /// Final approximation `A_L`.
    Approx,
    /// Detail coefficients of the given level (1-based).
    Detail(usize),
}

/// A contiguous run of output rows holding one band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub band: Band,
    pub start: usize,
    pub len: usize,
}

/// Row layout `(A_L, D_1, .., D_L)` for an input of length `len`.
pub fn level_layout(len: usize, levels: usize) -> Result<Vec<Segment>> {
    let lens = dwt::level_lengths(len, levels)?;
    let mut out = Vec::with_capacity(levels + 1);
    out.push(Segment {
        band: Band::Approx,
        start: 0,
        len: lens[levels - 1],
    });
    let mut start = lens[levels - 1];
    for (l, &n) in lens.iter().enumerate() {
        out.push(Segment {
            band: Band::Detail(l + 1),
            start,
            len: n,
        });
        start += n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MldbOutput {
    /// `[batch][T'][D]`
    pub mixed: Array3<f64>,
    pub t_prime: usize,
    pub level_layout: Vec<Segment>,
}

fn check_input(len: usize, dim: usize, p: &LearnableWaveletParams) -> Result<()> {
    if dim != p.model_dim() {
        return Err(if dim % p.heads() != 0 {
            Error::Precondition(format!(
                "feature dim {dim} not divisible by {} heads",
                p.heads()
            ))
        } else {
            Error::shape("wavelet feature dim", p.model_dim(), dim)
        });
    }
    if len < 2 {
        return Err(Error::Precondition(format!(
            "sequence length {len} too short for wavelet mixing"
        )));
    }
    dwt::level_lengths(len, p.levels()).map(|_| ())
}

/// One analysis level on a `[n][w]` block with per-feature taps.
fn analysis_level(
    input: &Array2<f64>,
    low: ArrayView2<f64>,
    high: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, w) = input.dim();
    let padded = n + n % 2;
    let m_out = padded / 2;
    let mut a = Array2::zeros((m_out, w));
    let mut d = Array2::zeros((m_out, w));
    for m in 0..m_out {
        for k in 0..TAPS {
            let src = ((2 * m + k) % padded) % n;
            for j in 0..w {
                let v = input[[src, j]];
                a[[m, j]] += low[[k, j]] * v;
                d[[m, j]] += high[[k, j]] * v;
            }
        }
    }
    (a, d)
}

/// Forward pass for a single sample `[T][D]`, returning `[T'][D]`.
pub fn forward_sample(x: ArrayView2<f64>, p: &LearnableWaveletParams) -> Result<Array2<f64>> {
    let (len, dim) = x.dim();
    check_input(len, dim, p)?;
    let levels = p.levels();
    let hd = p.head_dim();
    let layout = level_layout(len, levels)?;
    let t_prime = layout.iter().map(|s| s.len).sum();
    let mut out = Array2::zeros((t_prime, dim));
    for h in 0..p.heads() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut current = x.slice(cols).to_owned();
        for l in 0..levels {
            let (a, d) = analysis_level(
                &current,
                p.alpha.slice(s![l, h, .., ..]),
                p.beta.slice(s![l, h, .., ..]),
            );
            let seg = layout[l + 1];
            out.slice_mut(s![seg.start..seg.start + seg.len, h * hd..(h + 1) * hd])
                .assign(&d);
            current = a;
        }
        out.slice_mut(s![0..layout[0].len, h * hd..(h + 1) * hd])
            .assign(&current);
    }
    Ok(out)
}

/// Reverse pass for a single sample. Parameter gradients are accumulated into
/// `grad`; the input gradient `[T][D]` is returned.
pub fn backward_sample(
    x: ArrayView2<f64>,
    p: &LearnableWaveletParams,
    upstream: ArrayView2<f64>,
    grad: &mut LearnableWaveletParams,
) -> Result<Array2<f64>> {
    let (len, dim) = x.dim();
    check_input(len, dim, p)?;
    let levels = p.levels();
    let hd = p.head_dim();
    let layout = level_layout(len, levels)?;
    let t_prime: usize = layout.iter().map(|s| s.len).sum();
    if upstream.dim() != (t_prime, dim) {
        return Err(Error::shape(
            "wavelet upstream gradient",
            (t_prime, dim),
            upstream.dim(),
        ));
    }
    if grad.alpha.dim() != p.alpha.dim() || grad.beta.dim() != p.beta.dim() {
        return Err(Error::shape(
            "wavelet gradient accumulator",
            p.alpha.dim(),
            grad.alpha.dim(),
        ));
    }
    let mut grad_x = Array2::zeros((len, dim));
    for h in 0..p.heads() {
        let cols = s![.., h * hd..(h + 1) * hd];
        // inputs to each level, recomputed
        let mut inputs = Vec::with_capacity(levels);
        let mut current = x.slice(cols).to_owned();
        for l in 0..levels {
            let (a, _) = analysis_level(
                &current,
                p.alpha.slice(s![l, h, .., ..]),
                p.beta.slice(s![l, h, .., ..]),
            );
            inputs.push(current);
            current = a;
        }
        let head_up = upstream.slice(cols);
        let mut g_approx = head_up.slice(s![0..layout[0].len, ..]).to_owned();
        for l in (0..levels).rev() {
            let input = &inputs[l];
            let seg = layout[l + 1];
            let g_detail = head_up.slice(s![seg.start..seg.start + seg.len, ..]);
            let mut g_in = Array2::zeros(input.dim());
            accumulate_level(
                input,
                g_approx.view(),
                g_detail,
                p.alpha.slice(s![l, h, .., ..]),
                p.beta.slice(s![l, h, .., ..]),
                grad.alpha.slice_mut(s![l, h, .., ..]),
                grad.beta.slice_mut(s![l, h, .., ..]),
                &mut g_in,
            );
            g_approx = g_in;
        }
        grad_x.slice_mut(cols).assign(&g_approx);
    }
    Ok(grad_x)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_level(
    input: &Array2<f64>,
    g_a: ArrayView2<f64>,
    g_d: ArrayView2<f64>,
    low: ArrayView2<f64>,
    high: ArrayView2<f64>,
    mut g_low: ArrayViewMut2<f64>,
    mut g_high: ArrayViewMut2<f64>,
    g_in: &mut Array2<f64>,
) {
    let (n, w) = input.dim();
    let padded = n + n % 2;
    for m in 0..padded / 2 {
        for k in 0..TAPS {
            let src = ((2 * m + k) % padded) % n;
            for j in 0..w {
                let v = input[[src, j]];
                let (ga, gd) = (g_a[[m, j]], g_d[[m, j]]);
                g_low[[k, j]] += ga * v;
                g_high[[k, j]] += gd * v;
                g_in[[src, j]] += low[[k, j]] * ga + high[[k, j]] * gd;
            }
        }
    }
}

/// Batched forward over `[batch][T][D]`.
pub fn mldb_forward(x: ArrayView3<f64>, p: &LearnableWaveletParams) -> Result<MldbOutput> {
    let (batch, len, dim) = x.dim();
    check_input(len, dim, p)?;
    let level_layout = level_layout(len, p.levels())?;
    let t_prime = level_layout.iter().map(|s| s.len).sum();
    let mut mixed = Array3::zeros((batch, t_prime, dim));
    for b in 0..batch {
        let y = forward_sample(x.slice(s![b, .., ..]), p)?;
        mixed.slice_mut(s![b, .., ..]).assign(&y);
    }
    Ok(MldbOutput {
        mixed,
        t_prime,
        level_layout,
    })
}

/// Batched reverse pass: `(grad_x, grad_params)`.
pub fn mldb_backward(
    x: ArrayView3<f64>,
    p: &LearnableWaveletParams,
    upstream: ArrayView3<f64>,
) -> Result<(Array3<f64>, LearnableWaveletParams)> {
    let (batch, len, dim) = x.dim();
    if upstream.dim().0 != batch {
        return Err(Error::shape("wavelet upstream batch", batch, upstream.dim().0));
    }
    let mut grad = LearnableWaveletParams::zeros(p.levels(), p.heads(), p.head_dim());
    let mut grad_x = Array3::zeros((batch, len, dim));
    for b in 0..batch {
        let g = backward_sample(
            x.slice(s![b, .., ..]),
            p,
            upstream.slice(s![b, .., ..]),
            &mut grad,
        )?;
        grad_x.slice_mut(s![b, .., ..]).assign(&g);
    }
    Ok((grad_x, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_classical_taps() {
        let p = init_params(2, 1, 1, 0.0, 0).unwrap();
        for l in 0..2 {
            assert!((p.alpha[[l, 0, 0, 0]] - 0.4829629131).abs() < 1e-10);
            assert!((p.beta[[l, 0, 2, 0]] + 0.8365163037).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbed_init_is_close() {
        let p = init_params(5, 5, 10, 0.01, 7).unwrap();
        let f = Db2Filter::new();
        let n = p.alpha.len() as f64;
        let mean_abs = p
            .alpha
            .indexed_iter()
            .map(|((_, _, k, _), a)| (a - f.low[k]).abs())
            .sum::<f64>()
            / n;
        assert!(mean_abs > 0.0 && mean_abs < 0.02, "mean |eps| = {mean_abs}");
        assert_eq!(p, init_params(5, 5, 10, 0.01, 7).unwrap());
    }

    #[test]
    fn output_length_examples() {
        assert_eq!(output_length(96, 1).unwrap(), 96);
        assert_eq!(output_length(96, 4).unwrap(), 96);
        assert_eq!(output_length(10, 2).unwrap(), 11);
        assert!(matches!(output_length(4, 3), Err(Error::TooDeep { .. })));
    }

    #[test]
    fn layout_orders_approx_first() {
        let layout = level_layout(10, 2).unwrap();
        assert_eq!(
            layout,
            vec![
                Segment { band: Band::Approx, start: 0, len: 3 },
                Segment { band: Band::Detail(1), start: 3, len: 5 },
                Segment { band: Band::Detail(2), start: 8, len: 3 },
            ]
        );
    }

    #[test]
    fn constant_channels_keep_only_approx() {
        let p = init_params(2, 2, 2, 0.0, 0).unwrap();
        let mut x = Array3::zeros((1, 8, 4));
        for c in 0..4 {
            x.slice_mut(s![0, .., c]).fill(c as f64 + 1.0);
        }
        let out = mldb_forward(x.view(), &p).unwrap();
        for c in 0..4 {
            let approx = (c as f64 + 1.0) * 2.0;
            for t in 0..out.t_prime {
                let v = out.mixed[[0, t, c]];
                if t < 2 {
                    assert!((v - approx).abs() < 1e-10);
                } else {
                    assert!(v.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let p = init_params(1, 3, 1, 0.0, 0).unwrap();
        let x = Array3::<f64>::zeros((1, 8, 4));
        assert!(matches!(
            mldb_forward(x.view(), &p),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn rejects_short_sequence() {
        let p = init_params(3, 1, 1, 0.0, 0).unwrap();
        let x = Array3::<f64>::zeros((1, 4, 1));
        assert!(matches!(mldb_forward(x.view(), &p), Err(Error::TooDeep { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(2, 2, 2, 0.1, 3).unwrap();
        let x = Array3::from_shape_fn((2, 8, 4), |(b, t, c)| (b + t * c) as f64 * 0.1);
        let up = Array3::zeros((2, 8, 4));
        let (gx, gp) = mldb_backward(x.view(), &p, up.view()).unwrap();
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(gp.alpha.iter().chain(gp.beta.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_alpha_gradient_by_hand() {
        // B=1, T=4, D=1, H=1, L=1: A[n] = Σ_k α_k x[(2n+k) mod 4]
        let p = init_params(1, 1, 1, 0.0, 0).unwrap();
        let xs = [0.7, -1.3, 2.0, 0.4];
        let x = Array3::from_shape_vec((1, 4, 1), xs.to_vec()).unwrap();
        let up_a = [0.5, -2.0];
        let up = Array3::from_shape_vec((1, 4, 1), vec![up_a[0], up_a[1], 0.0, 0.0]).unwrap();
        let (_, g) = mldb_backward(x.view(), &p, up.view()).unwrap();
        for k in 0..4 {
            let expected: f64 = (0..2).map(|n| up_a[n] * xs[(2 * n + k) % 4]).sum();
            assert!((g.alpha[[0, 0, k, 0]] - expected).abs() < 1e-14);
            assert_eq!(g.beta[[0, 0, k, 0]], 0.0);
        }
    }

    #[test]
    fn upstream_shape_checked() {
        let p = init_params(1, 1, 2, 0.0, 0).unwrap();
        let x = Array3::<f64>::zeros((1, 8, 2));
        let up = Array3::<f64>::zeros((1, 7, 2));
        assert!(matches!(
            mldb_backward(x.view(), &p, up.view()),
            Err(Error::Shape { .. })
        ));
    }
}
