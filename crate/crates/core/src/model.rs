//! The full wavelet-mixing forecaster: embedding, stacked mixing blocks and a
//! forecast head, with an exact reverse pass over every parameter.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dwt;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, ForecastHead, LayerNorm, LayerNormCache, Linear};
use crate::wavelet::{self, LearnableWaveletParams};

/// Per-window normalisation epsilon (variance floor).
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub depth: usize,
    pub ffn_dim: usize,
    pub init_sigma: f64,
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 7,
            model_dim: 64,
            heads: 4,
            levels: 2,
            depth: 2,
            ffn_dim: 256,
            init_sigma: 0.0,
            instance_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("levels", self.levels),
            ("depth", self.depth),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Precondition(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Precondition(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "init_sigma must be finite and nonnegative, got {}",
                self.init_sigma
            )));
        }
        self.layout().map(|_| ())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Dry-run sizing: sequence length entering each block, then the final
    /// length fed to the head (`depth + 1` entries).
    pub fn layout(&self) -> Result<Vec<usize>> {
        let mut lens = Vec::with_capacity(self.depth + 1);
        let mut len = self.lookback;
        lens.push(len);
        for _ in 0..self.depth {
            if len < 2 || dwt::max_levels(len) < self.levels {
                return Err(Error::TooDeep {
                    levels: self.levels,
                    length: len,
                    max_levels: dwt::max_levels(len),
                });
            }
            len = len.min(wavelet::output_length(len, self.levels)?);
            lens.push(len);
        }
        Ok(lens)
    }

    pub fn final_len(&self) -> Result<usize> {
        Ok(*self.layout()?.last().expect("layout is never empty"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_mix: LayerNorm,
    pub wavelet: LearnableWaveletParams,
    pub proj: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Linear,
    pub blocks: Vec<BlockParams>,
    pub head: ForecastHead,
}

/// A borrowed parameter tensor with its registry name and shape.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

macro_rules! registry {
    ($params:expr, $iter:ident, $as_slice:ident, $push:expr) => {{
        let p = $params;
        let mut push = $push;
        push("embed.weight".to_string(), p.embed.weight.shape().to_vec(), p.embed.weight.$as_slice());
        push("embed.bias".to_string(), p.embed.bias.shape().to_vec(), p.embed.bias.$as_slice());
        for (i, b) in p.blocks.$iter().enumerate() {
            let n = |f: &str| format!("blocks.{i}.{f}");
            push(n("ln_mix.gain"), b.ln_mix.gain.shape().to_vec(), b.ln_mix.gain.$as_slice());
            push(n("ln_mix.bias"), b.ln_mix.bias.shape().to_vec(), b.ln_mix.bias.$as_slice());
            push(n("wavelet.alpha"), b.wavelet.alpha.shape().to_vec(), b.wavelet.alpha.$as_slice());
            push(n("wavelet.beta"), b.wavelet.beta.shape().to_vec(), b.wavelet.beta.$as_slice());
            push(n("proj.weight"), b.proj.weight.shape().to_vec(), b.proj.weight.$as_slice());
            push(n("proj.bias"), b.proj.bias.shape().to_vec(), b.proj.bias.$as_slice());
            push(n("ln_ffn.gain"), b.ln_ffn.gain.shape().to_vec(), b.ln_ffn.gain.$as_slice());
            push(n("ln_ffn.bias"), b.ln_ffn.bias.shape().to_vec(), b.ln_ffn.bias.$as_slice());
            push(n("ffn_in.weight"), b.ffn_in.weight.shape().to_vec(), b.ffn_in.weight.$as_slice());
            push(n("ffn_in.bias"), b.ffn_in.bias.shape().to_vec(), b.ffn_in.bias.$as_slice());
            push(n("ffn_out.weight"), b.ffn_out.weight.shape().to_vec(), b.ffn_out.weight.$as_slice());
            push(n("ffn_out.bias"), b.ffn_out.bias.shape().to_vec(), b.ffn_out.bias.$as_slice());
        }
        push("head.time.weight".to_string(), p.head.time.weight.shape().to_vec(), p.head.time.weight.$as_slice());
        push("head.time.bias".to_string(), p.head.time.bias.shape().to_vec(), p.head.time.bias.$as_slice());
        push("head.out.weight".to_string(), p.head.out.weight.shape().to_vec(), p.head.out.weight.$as_slice());
        push("head.out.bias".to_string(), p.head.out.bias.shape().to_vec(), p.head.out.bias.$as_slice());
    }};
}

trait StdSlice {
    fn std_slice(&self) -> &[f64];
}

trait StdSliceMut {
    fn std_slice_mut(&mut self) -> &mut [f64];
}

impl<D: ndarray::Dimension> StdSlice for ndarray::Array<f64, D> {
    fn std_slice(&self) -> &[f64] {
        self.as_slice().expect("parameters are kept in standard layout")
    }
}

impl<D: ndarray::Dimension> StdSliceMut for ndarray::Array<f64, D> {
    fn std_slice_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("parameters are kept in standard layout")
    }
}

impl ModelParams {
    /// All-zero parameters shaped for `config` (also used as gradient buffers).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln_mix: LayerNorm::zeros(d),
                wavelet: LearnableWaveletParams::zeros(config.levels, config.heads, config.head_dim()),
                proj: Linear::zeros(d, d),
                ln_ffn: LayerNorm::zeros(d),
                ffn_in: Linear::zeros(d, config.ffn_dim),
                ffn_out: Linear::zeros(config.ffn_dim, d),
            })
            .collect();
        Ok(Self {
            embed: Linear::zeros(config.channels, d),
            blocks,
            head: ForecastHead::zeros(config.final_len()?, config.horizon, d, config.channels),
        })
    }

    /// Seeded initialisation: linear layers uniform in `±1/√fan_in`, layer
    /// norms at unit gain, wavelet taps at their classical values plus noise.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let embed = Linear::init(config.channels, d, &mut rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let wavelet = LearnableWaveletParams::init_with_rng(
                config.levels,
                config.heads,
                config.head_dim(),
                config.init_sigma,
                &mut rng,
            )?;
            blocks.push(BlockParams {
                ln_mix: LayerNorm::new(d),
                wavelet,
                proj: Linear::init(d, d, &mut rng),
                ln_ffn: LayerNorm::new(d),
                ffn_in: Linear::init(d, config.ffn_dim, &mut rng),
                ffn_out: Linear::init(config.ffn_dim, d, &mut rng),
            });
        }
        let head = ForecastHead {
            time: Linear::init(config.final_len()?, config.horizon, &mut rng),
            out: Linear::init(d, config.channels, &mut rng),
        };
        Ok(Self { embed, blocks, head })
    }

    /// Ordered registry of every parameter tensor.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        registry!(self, iter, std_slice, |name, shape, data| out.push(NamedTensor { name, shape, data }));
        out
    }

    /// Mutable flat views in registry order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        registry!(self, iter_mut, std_slice_mut, |name, _shape: Vec<usize>, data| out.push((name, data)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let others = other.tensors();
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in dst.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Per-window, per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Z-scores each channel of a `[T][C]` window with its own statistics.
pub fn instance_normalize(x: ArrayView2<f64>) -> (Array2<f64>, InstanceStats) {
    let mean = x.mean_axis(Axis(0)).expect("window has at least one step");
    let var = x.var_axis(Axis(0), 0.0);
    let std = var.mapv(|v| (v + INSTANCE_NORM_EPS).sqrt());
    let normalized = (&x - &mean) / &std;
    (normalized, InstanceStats { mean, std })
}

pub fn instance_denormalize(y: ArrayView2<f64>, stats: &InstanceStats) -> Array2<f64> {
    &y * &stats.std + &stats.mean
}

fn check_finite(a: &Array2<f64>, stage: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage() })
    }
}

/// Intermediates of one block for one sample.
#[derive(Debug, Clone)]
struct BlockTrace {
    ln_mix: LayerNormCache,
    normed: Array2<f64>,
    mixed: Array2<f64>,
    t_out: usize,
    ln_ffn: LayerNormCache,
    ffn_input: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything needed to run the reverse pass for one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    input: Array2<f64>,
    stats: Option<InstanceStats>,
    embed_input: Array2<f64>,
    blocks: Vec<BlockTrace>,
    encoded: Array2<f64>,
    head_hidden: Array2<f64>,
    head_out: Array2<f64>,
}

/// Forward intermediates for a batch, consumed by [`Db2TransF::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    samples: Vec<SampleTrace>,
    pub output: Array3<f64>,
}

fn block_forward(p: &BlockParams, x: ArrayView2<f64>, index: usize) -> Result<(Array2<f64>, BlockTrace)> {
    let t_in = x.nrows();
    let (normed, ln_mix) = p.ln_mix.forward(x);
    let mixed = wavelet::forward_sample(normed.view(), &p.wavelet)?;
    let projected = p.proj.forward(mixed.view());
    check_finite(&projected, || format!("block {index} wavelet mixing"))?;
    let t_out = t_in.min(projected.nrows());
    if t_out < 1 {
        return Err(Error::Precondition(format!("block {index} output length underflow")));
    }
    let z = &x.slice(s![..t_out, ..]) + &projected.slice(s![..t_out, ..]);
    let (ffn_input, ln_ffn) = p.ln_ffn.forward(z.view());
    let pre_act = p.ffn_in.forward(ffn_input.view());
    let act = pre_act.mapv(gelu);
    let out = z + p.ffn_out.forward(act.view());
    check_finite(&out, || format!("block {index} feed-forward"))?;
    Ok((
        out,
        BlockTrace {
            ln_mix,
            normed,
            mixed,
            t_out,
            ln_ffn,
            ffn_input,
            pre_act,
            act,
        },
    ))
}

/// Rows of the feed-forward sublayer processed together at inference time,
/// so the `ffn_dim`-wide hidden activations stay cache-resident.
const INFER_ROW_TILE: usize = 128;

/// Same arithmetic as [`block_forward`] without retaining intermediates.
fn block_infer(p: &BlockParams, x: ArrayView2<f64>, index: usize) -> Result<Array2<f64>> {
    let t_in = x.nrows();
    let (normed, _) = p.ln_mix.forward(x);
    let mixed = wavelet::forward_sample(normed.view(), &p.wavelet)?;
    let projected = p.proj.forward(mixed.view());
    check_finite(&projected, || format!("block {index} wavelet mixing"))?;
    let t_out = t_in.min(projected.nrows());
    if t_out < 1 {
        return Err(Error::Precondition(format!("block {index} output length underflow")));
    }
    let mut out = &x.slice(s![..t_out, ..]) + &projected.slice(s![..t_out, ..]);
    for start in (0..t_out).step_by(INFER_ROW_TILE) {
        let end = (start + INFER_ROW_TILE).min(t_out);
        let mut rows = out.slice_mut(s![start..end, ..]);
        let (ffn_input, _) = p.ln_ffn.forward(rows.view());
        let mut hidden = p.ffn_in.forward(ffn_input.view());
        hidden.mapv_inplace(gelu);
        rows += &p.ffn_out.forward(hidden.view());
    }
    check_finite(&out, || format!("block {index} feed-forward"))?;
    Ok(out)
}

fn block_backward(p: &BlockParams, tr: &BlockTrace, d_out: ArrayView2<f64>, g: &mut BlockParams) -> Result<Array2<f64>> {
    let mut d_z = d_out.to_owned();
    let d_act = p.ffn_out.backward(tr.act.view(), d_out, &mut g.ffn_out);
    let d_pre = d_act * &tr.pre_act.mapv(gelu_grad);
    let d_ffn_input = p.ffn_in.backward(tr.ffn_input.view(), d_pre.view(), &mut g.ffn_in);
    d_z += &p.ln_ffn.backward(&tr.ln_ffn, d_ffn_input.view(), &mut g.ln_ffn);

    let mut d_proj = Array2::zeros((tr.mixed.nrows(), p.proj.fan_out()));
    d_proj.slice_mut(s![..tr.t_out, ..]).assign(&d_z);
    let d_mixed = p.proj.backward(tr.mixed.view(), d_proj.view(), &mut g.proj);
    let d_normed = wavelet::backward_sample(tr.normed.view(), &p.wavelet, d_mixed.view(), &mut g.wavelet)?;
    let mut d_x = p.ln_mix.backward(&tr.ln_mix, d_normed.view(), &mut g.ln_mix);
    let mut head = d_x.slice_mut(s![..tr.t_out, ..]);
    head += &d_z;
    Ok(d_x)
}

/// One mixing block over a batch `[B][T_in][D] → [B][T_out][D]`.
pub fn mldb_block_forward(x: ArrayView3<f64>, p: &BlockParams) -> Result<Array3<f64>> {
    let mut outs = Vec::with_capacity(x.dim().0);
    for sample in x.outer_iter() {
        outs.push(block_forward(p, sample, 0)?.0);
    }
    stack(outs, (0, 0))
}

fn stack(samples: Vec<Array2<f64>>, empty: (usize, usize)) -> Result<Array3<f64>> {
    let (rows, cols) = samples.first().map(|a| a.dim()).unwrap_or(empty);
    let mut out = Array3::zeros((samples.len(), rows, cols));
    for (b, a) in samples.into_iter().enumerate() {
        out.slice_mut(s![b, .., ..]).assign(&a);
    }
    Ok(out)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("mse", target.dim(), pred.dim()));
    }
    let n = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// The network together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Db2TransF {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Db2TransF {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let expected = ModelParams::zeros(&config)?;
        for (want, have) in expected.tensors().iter().zip(params.tensors()) {
            if want.name != have.name || want.shape != have.shape {
                return Err(Error::shape(&have.name, &want.shape, &have.shape));
            }
        }
        if expected.tensors().len() != params.tensors().len() {
            return Err(Error::shape("parameter count", expected.tensors().len(), params.tensors().len()));
        }
        Ok(Self { config, params })
    }

    fn check_batch(&self, x: ArrayView3<f64>) -> Result<()> {
        let (_, t, c) = x.dim();
        if t != self.config.lookback || c != self.config.channels {
            return Err(Error::shape(
                "model input [time, channels]",
                (self.config.lookback, self.config.channels),
                (t, c),
            ));
        }
        Ok(())
    }

    /// Forward for one `[T][C]` window, keeping intermediates.
    pub fn forward_sample(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, SampleTrace)> {
        let p = &self.params;
        check_finite(&x.to_owned(), || "input".into())?;
        let (embed_input, stats) = if self.config.instance_norm {
            let (n, st) = instance_normalize(x);
            (n, Some(st))
        } else {
            (x.to_owned(), None)
        };
        let mut h = p.embed.forward(embed_input.view());
        check_finite(&h, || "embedding".into())?;
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for (i, bp) in p.blocks.iter().enumerate() {
            let (out, tr) = block_forward(bp, h.view(), i)?;
            blocks.push(tr);
            h = out;
        }
        let (head_out, head_hidden) = p.head.forward(h.view());
        check_finite(&head_out, || "forecast head".into())?;
        let y = match &stats {
            Some(st) => instance_denormalize(head_out.view(), st),
            None => head_out.clone(),
        };
        check_finite(&y, || "de-normalisation".into())?;
        Ok((
            y,
            SampleTrace {
                input: x.to_owned(),
                stats,
                embed_input,
                blocks,
                encoded: h,
                head_hidden,
                head_out,
            },
        ))
    }

    /// Reverse pass for one sample. Accumulates into `grad`; returns `dL/dx`.
    pub fn backward_sample(&self, tr: &SampleTrace, d_y: ArrayView2<f64>, grad: &mut ModelParams) -> Result<Array2<f64>> {
        let p = &self.params;
        if d_y.dim() != tr.head_out.dim() {
            return Err(Error::shape("output gradient", tr.head_out.dim(), d_y.dim()));
        }
        let d_head = match &tr.stats {
            Some(st) => &d_y * &st.std,
            None => d_y.to_owned(),
        };
        let mut d_h = p.head.backward(tr.encoded.view(), tr.head_hidden.view(), d_head.view(), &mut grad.head);
        for ((bp, bt), bg) in p.blocks.iter().zip(&tr.blocks).zip(grad.blocks.iter_mut()).rev() {
            d_h = block_backward(bp, bt, d_h.view(), bg)?;
        }
        let d_norm = p.embed.backward(tr.embed_input.view(), d_h.view(), &mut grad.embed);
        let Some(st) = &tr.stats else {
            return Ok(d_norm);
        };
        // de-normalisation uses mean and std directly; normalisation feeds them back
        let len = tr.input.nrows() as f64;
        let centered = &tr.input - &st.mean;
        let g_mean = d_y.sum_axis(Axis(0)) - &(d_norm.sum_axis(Axis(0)) / &st.std);
        let g_std = (&d_y * &tr.head_out).sum_axis(Axis(0))
            - &((&d_norm * &centered).sum_axis(Axis(0)) / &st.std.mapv(|s| s * s));
        let mut d_x = &d_norm / &st.std;
        Zip::from(d_x.rows_mut()).and(centered.rows()).for_each(|mut row, c| {
            row += &(&g_mean / len);
            row += &(&g_std * &c / &(&st.std * len));
        });
        Ok(d_x)
    }

    /// Forecast for one `[T][C]` window without keeping intermediates.
    pub fn predict_sample(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let p = &self.params;
        check_finite(&x.to_owned(), || "input".into())?;
        let (embed_input, stats) = if self.config.instance_norm {
            let (n, st) = instance_normalize(x);
            (n, Some(st))
        } else {
            (x.to_owned(), None)
        };
        let mut h = p.embed.forward(embed_input.view());
        check_finite(&h, || "embedding".into())?;
        for (i, bp) in p.blocks.iter().enumerate() {
            h = block_infer(bp, h.view(), i)?;
        }
        let (head_out, _) = p.head.forward(h.view());
        check_finite(&head_out, || "forecast head".into())?;
        let y = match &stats {
            Some(st) => instance_denormalize(head_out.view(), st),
            None => head_out,
        };
        check_finite(&y, || "de-normalisation".into())?;
        Ok(y)
    }

    /// Batched forecast `[B][T][C] → [B][T_pred][C]`.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check_batch(x)?;
        let outs = x
            .outer_iter()
            .map(|w| self.predict_sample(w))
            .collect::<Result<Vec<_>>>()?;
        stack(outs, (self.config.horizon, self.config.channels))
    }

    /// Batched forward retaining intermediates for [`Self::backward`].
    pub fn forward_trace(&self, x: ArrayView3<f64>) -> Result<ForwardTrace> {
        self.check_batch(x)?;
        let mut outs = Vec::with_capacity(x.dim().0);
        let mut samples = Vec::with_capacity(x.dim().0);
        for w in x.outer_iter() {
            let (y, tr) = self.forward_sample(w)?;
            outs.push(y);
            samples.push(tr);
        }
        Ok(ForwardTrace {
            samples,
            output: stack(outs, (self.config.horizon, self.config.channels))?,
        })
    }

    /// Gradients of every parameter and of the input given `dL/dŷ`.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: ArrayView3<f64>) -> Result<(ModelParams, Array3<f64>)> {
        if loss_grad.dim() != trace.output.dim() {
            return Err(Error::shape("loss gradient", trace.output.dim(), loss_grad.dim()));
        }
        let mut grad = ModelParams::zeros(&self.config)?;
        let mut d_inputs = Vec::with_capacity(trace.samples.len());
        for (tr, g) in trace.samples.iter().zip(loss_grad.outer_iter()) {
            d_inputs.push(self.backward_sample(tr, g, &mut grad)?);
        }
        let d_x = stack(d_inputs, (self.config.lookback, self.config.channels))?;
        Ok((grad, d_x))
    }

    /// MSE loss over the batch and its parameter gradients, one sample at a time.
    pub fn loss_and_grad(&self, x: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<(f64, ModelParams)> {
        self.check_batch(x)?;
        let expected = (x.dim().0, self.config.horizon, self.config.channels);
        if target.dim() != expected {
            return Err(Error::shape("target", expected, target.dim()));
        }
        let n = target.len().max(1) as f64;
        let mut grad = ModelParams::zeros(&self.config)?;
        let mut loss = 0.0;
        for (w, t) in x.outer_iter().zip(target.outer_iter()) {
            let (y, tr) = self.forward_sample(w)?;
            let diff = &y - &t;
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            self.backward_sample(&tr, (diff * (2.0 / n)).view(), &mut grad)?;
        }
        Ok((loss / n, grad))
    }
}

/// Functional form of [`Db2TransF::forward`].
pub fn model_forward(batch: ArrayView3<f64>, params: &ModelParams, config: &ModelConfig) -> Result<Array3<f64>> {
    let model = Db2TransF::from_params(config.clone(), params.clone())?;
    model.forward(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            lookback: 16,
            horizon: 4,
            channels: 3,
            model_dim: 8,
            heads: 2,
            levels: 2,
            depth: 2,
            ffn_dim: 16,
            init_sigma: 0.05,
            instance_norm: true,
        }
    }

    fn random_batch(b: usize, t: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((b, t, c), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig { heads: 3, ..small_config() };
        assert!(matches!(cfg.validate(), Err(Error::Precondition(_))));
    }

    #[test]
    fn layout_is_constant_for_dyadic_lookback() {
        let cfg = ModelConfig { lookback: 96, levels: 4, depth: 3, ..small_config() };
        assert_eq!(cfg.layout().unwrap(), vec![96; 4]);
        let cfg = ModelConfig { lookback: 10, levels: 2, depth: 1, ..small_config() };
        assert_eq!(cfg.layout().unwrap(), vec![10, 10]);
    }

    #[test]
    fn shape_sweep() {
        for &t in &[16, 48, 96] {
            for l in 1..=3 {
                for n in 1..=2 {
                    for &h in &[1, 2, 4] {
                        let cfg = ModelConfig {
                            lookback: t,
                            horizon: 5,
                            channels: 2,
                            model_dim: 8,
                            heads: h,
                            levels: l,
                            depth: n,
                            ffn_dim: 8,
                            ..small_config()
                        };
                        let model = Db2TransF::new(cfg, 1).unwrap();
                        let y = model.forward(random_batch(2, t, 2, 3).view()).unwrap();
                        assert_eq!(y.dim(), (2, 5, 2));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_channel_round_trips_through_instance_norm() {
        let cfg = small_config();
        let mut model = Db2TransF::new(cfg.clone(), 4).unwrap();
        model.params.head = ForecastHead::zeros(16, 4, 8, 3);
        let mut x = random_batch(1, 16, 3, 8);
        x.slice_mut(s![0, .., 1]).fill(7.25);
        let (normed, _) = instance_normalize(x.slice(s![0, .., ..]));
        assert!(normed.column(1).iter().all(|v| v.abs() < 1e-12));
        let y = model.forward(x.view()).unwrap();
        for p in 0..4 {
            assert!((y[[0, p, 1]] - 7.25).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_round_trip() {
        let x = random_batch(1, 20, 4, 2);
        let (n, st) = instance_normalize(x.slice(s![0, .., ..]));
        let back = instance_denormalize(n.view(), &st);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_outputs_make_block_a_passthrough() {
        let cfg = small_config();
        let mut model = Db2TransF::new(cfg, 2).unwrap();
        let bp = &mut model.params.blocks[0];
        bp.proj = Linear::zeros(8, 8);
        bp.ffn_out = Linear::zeros(16, 8);
        let x = random_batch(2, 16, 8, 5);
        let y = mldb_block_forward(x.view(), &model.params.blocks[0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let x = random_batch(3, 16, 3, 6);
        let a = Db2TransF::new(cfg.clone(), 9).unwrap().forward(x.view()).unwrap();
        let b = Db2TransF::new(cfg, 9).unwrap().forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiled_inference_matches_traced_forward() {
        // 300 rows span three inference tiles, the last one partial
        let cfg = ModelConfig { lookback: 300, levels: 3, ..small_config() };
        let model = Db2TransF::new(cfg, 5).unwrap();
        let x = random_batch(2, 300, 3, 7);
        let fast = model.forward(x.view()).unwrap();
        let traced = model.forward_trace(x.view()).unwrap().output;
        for (a, b) in fast.iter().zip(traced.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn nan_input_is_reported_with_stage() {
        let model = Db2TransF::new(small_config(), 0).unwrap();
        let mut x = random_batch(1, 16, 3, 1);
        x[[0, 3, 1]] = f64::NAN;
        match model.forward(x.view()) {
            Err(Error::NonFinite { stage }) => assert_eq!(stage, "input"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_is_linear_in_loss_gradient() {
        let model = Db2TransF::new(small_config(), 3).unwrap();
        let x = random_batch(2, 16, 3, 10);
        let trace = model.forward_trace(x.view()).unwrap();
        let g = random_batch(2, 4, 3, 11);
        let (g1, _) = model.backward(&trace, g.view()).unwrap();
        let (g2, _) = model.backward(&trace, (&g * 2.0).view()).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.data.iter().zip(b.data) {
                assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
        let (g0, dx) = model.backward(&trace, Array3::zeros((2, 4, 3)).view()).unwrap();
        assert!(g0.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let model = Db2TransF::new(small_config(), 3).unwrap();
        let trace = model.forward_trace(random_batch(2, 16, 3, 1).view()).unwrap();
        assert!(model.backward(&trace, Array3::zeros((2, 5, 3)).view()).is_err());
    }

    #[test]
    fn registry_names_are_unique_and_ordered() {
        let p = ModelParams::zeros(&small_config()).unwrap();
        let names: Vec<_> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names.first().unwrap(), "embed.weight");
        assert_eq!(names.last().unwrap(), "head.out.bias");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 2 + 2 * 12 + 4);
    }
}
