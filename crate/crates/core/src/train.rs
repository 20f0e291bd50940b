//! Optimisation: AdamW with per-epoch exponential learning-rate decay, early
//! stopping on validation MSE, and MSE/MAE evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::Db2TransF;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch learning-rate multiplier.
    pub decay_gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay_gamma: 0.9,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 20,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Precondition(format!("train config: {what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return bad("decay_gamma must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1");
        }
        Ok(())
    }
}

/// `lr0 · γ^epoch` (epochs counted from 0).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_gamma.powi(epoch as i32)
}

/// True once the best (first minimum) value is `patience` or more entries
/// behind the newest one.
pub fn early_stopper(val_history: &[f64], patience: usize) -> bool {
    match argmin(val_history) {
        Some(best) => val_history.len() - 1 - best >= patience,
        None => false,
    }
}

fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|b| v < xs[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn mse(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    mean_of(pred, target, |d| d * d)
}

pub fn mae(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    mean_of(pred, target, f64::abs)
}

fn mean_of(pred: ArrayView3<f64>, target: ArrayView3<f64>, f: impl Fn(f64) -> f64) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("metric inputs", target.dim(), pred.dim()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metric"));
    }
    let total: f64 = pred.iter().zip(target.iter()).map(|(p, t)| f(p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Repeats each window's final observation across the horizon.
pub fn naive_repeat_last(inputs: ArrayView3<f64>, horizon: usize) -> Array3<f64> {
    let (b, t, c) = inputs.dim();
    let last = inputs.slice(s![.., t - 1, ..]);
    let mut out = Array3::zeros((b, horizon, c));
    for mut step in out.axis_iter_mut(Axis(1)) {
        step.assign(&last);
    }
    out
}

/// Anything with named flat parameters and an MSE gradient.
pub trait Trainable {
    fn parameter_names(&self) -> Vec<String>;
    fn parameters(&self) -> Vec<&[f64]>;
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;
    fn predict(&self, inputs: ArrayView3<f64>) -> Result<Array3<f64>>;
    /// Batch MSE and its gradient, tensor by tensor in `parameters` order.
    fn loss_and_grad(&self, inputs: ArrayView3<f64>, targets: ArrayView3<f64>) -> Result<(f64, Vec<Vec<f64>>)>;
}

impl Trainable for Db2TransF {
    fn parameter_names(&self) -> Vec<String> {
        self.params.tensors().into_iter().map(|t| t.name).collect()
    }

    fn parameters(&self) -> Vec<&[f64]> {
        self.params.tensors().into_iter().map(|t| t.data).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.tensors_mut().into_iter().map(|(_, d)| d).collect()
    }

    fn predict(&self, inputs: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.forward(inputs)
    }

    fn loss_and_grad(&self, inputs: ArrayView3<f64>, targets: ArrayView3<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, grads) = Db2TransF::loss_and_grad(self, inputs, targets)?;
        Ok((loss, grads.tensors().into_iter().map(|t| t.data.to_vec()).collect()))
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Gradients are checked for
/// finiteness before any parameter is touched.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw tensors", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(names.get(i).map_or("adamw", String::as_str), p.len(), g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| i.to_string())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over every window of `data`, predicted in chunks.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, data: &WindowedDataset, chunk: usize) -> Result<Metrics> {
    evaluate_horizon(model, data, chunk, data.horizon())
}

/// Like [`evaluate`] but scores only the first `horizon` forecast steps.
pub fn evaluate_horizon<M: Trainable + ?Sized>(
    model: &M,
    data: &WindowedDataset,
    chunk: usize,
    horizon: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset"));
    }
    let chunk = chunk.max(1);
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let pred = model.predict(data.inputs.slice(s![start..end, .., ..]))?;
        if pred.dim().1 < horizon {
            return Err(Error::Precondition(format!(
                "model forecasts {} steps, cannot score {horizon}",
                pred.dim().1
            )));
        }
        let pred = pred.slice(s![.., ..horizon, ..]);
        let target = data.targets.slice(s![start..end, ..horizon, ..]);
        if pred.dim() != target.dim() {
            return Err(Error::shape("prediction", target.dim(), pred.dim()));
        }
        for (p, t) in pred.iter().zip(target.iter()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        count += pred.len();
    }
    Ok(Metrics {
        mse: se / count as f64,
        mae: ae / count as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation MSE.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    pub final_test: Metrics,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// One CSV record per epoch: `epoch,lr,train_mse,val_mse,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,val_mse,wall_ms\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{:.3}", e.epoch, e.lr, e.train_mse, e.val_mse, e.wall_ms);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mini-batch training with seeded shuffling, per-epoch validation and early
/// stopping. The best-validation parameters are restored into `model` before
/// the test split is scored.
pub fn fit<M: Trainable + ?Sized>(
    model: &mut M,
    train: &WindowedDataset,
    val: &WindowedDataset,
    test: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    for (name, ds) in [("train", train), ("val", val), ("test", test)] {
        if ds.is_empty() {
            return Err(Error::Data(format!("{name} dataset is empty")));
        }
    }
    let started = Instant::now();
    let names = model.parameter_names();
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let mut state = AdamState::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(idx);
            let (loss, grads) = model.loss_and_grad(x.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: batch_idx,
                });
            }
            weighted += loss * idx.len() as f64;
            let mut params = model.parameters_mut();
            adamw_step(&mut params, &grads, &names, &mut state, lr, cfg)?;
        }
        let train_mse = weighted / train.len() as f64;
        let val_mse = evaluate(model, val, 256)?.mse;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| val_mse < *b) {
            let snapshot = model.parameters().iter().map(|p| p.to_vec()).collect();
            best = Some((epoch + 1, val_mse, snapshot));
        }
        val_history.push(val_mse);
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_mse,
            val_mse,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        if early_stopper(&val_history, cfg.patience) {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_mse, snapshot) = best.expect("at least one epoch ran");
    for (dst, src) in model.parameters_mut().into_iter().zip(&snapshot) {
        dst.copy_from_slice(src);
    }
    let final_test = evaluate(model, test, 256)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_mse,
        stopped_early,
        wall_time_s: started.elapsed().as_secs_f64(),
        final_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use rand::Rng;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert!((lr_schedule(2, &cfg) - 8.1e-4).abs() < 1e-15);
        let flat = TrainConfig { decay_gamma: 1.0, ..cfg };
        assert_eq!(lr_schedule(17, &flat), 1e-3);
    }

    #[test]
    fn stopper_examples() {
        assert!(!early_stopper(&[1.0, 0.9, 0.8], 5));
        assert!(early_stopper(&[0.5, 0.6, 0.6, 0.6, 0.6, 0.6], 5));
        let mut h = vec![0.5, 0.6, 0.4, 0.6];
        assert!(!early_stopper(&h, 2));
        h.push(0.6);
        assert!(early_stopper(&h, 2));
        assert!(!early_stopper(&[], 1));
    }

    #[test]
    fn metric_examples() {
        let a = Array3::from_shape_fn((2, 3, 2), |(i, j, k)| (i + j * k) as f64);
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mae(a.view(), a.view()).unwrap(), 0.0);
        let b = &a + 2.0;
        assert_eq!(mse(b.view(), a.view()).unwrap(), 4.0);
        assert_eq!(mae(b.view(), a.view()).unwrap(), 2.0);
        assert!(mse(a.view(), Array3::zeros((2, 3, 1)).view()).is_err());
    }

    #[test]
    fn metrics_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Array3::from_shape_simple_fn((3, 4, 5), || rng.random_range(-3.0..3.0));
        let t = Array3::from_shape_simple_fn((3, 4, 5), || rng.random_range(-3.0..3.0));
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let d: f64 = p[[i, j, k]] - t[[i, j, k]];
                    se += d * d;
                    ae += d.abs();
                }
            }
        }
        assert!((mse(p.view(), t.view()).unwrap() - se / 60.0).abs() < 1e-12);
        assert!((mae(p.view(), t.view()).unwrap() - ae / 60.0).abs() < 1e-12);
    }

    fn step_scalar(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let cfg = TrainConfig { weight_decay: wd, ..TrainConfig::default() };
        let mut p = vec![theta];
        let mut state = AdamState::new(&[1]);
        adamw_step(&mut [p.as_mut_slice()], &[vec![g]], &["w".into()], &mut state, lr, &cfg).unwrap();
        p[0]
    }

    #[test]
    fn adamw_examples() {
        assert_eq!(step_scalar(0.7, 0.0, 0.1, 0.0), 0.7);
        assert!((step_scalar(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-7);
        assert!((step_scalar(2.0, 0.0, 0.1, 0.01) - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient_by_name() {
        let mut p = vec![1.0, 2.0];
        let mut state = AdamState::new(&[2]);
        let err = adamw_step(
            &mut [p.as_mut_slice()],
            &[vec![0.1, f64::NAN]],
            &["head.bias".into()],
            &mut state,
            0.1,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "head.bias"));
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adamw_minimises_convex_quadratic() {
        // f(θ) = ½ Σ a_i (θ_i − c_i)²
        let a = [1.0, 3.0, 0.5, 10.0];
        let c = [2.0, -1.0, 0.25, 4.0];
        let cfg = TrainConfig { weight_decay: 0.0, decay_gamma: 1.0, ..TrainConfig::default() };
        let mut theta = vec![0.0; 4];
        let mut state = AdamState::new(&[4]);
        let grad = |t: &[f64]| -> Vec<f64> { (0..4).map(|i| a[i] * (t[i] - c[i])).collect() };
        for _ in 0..20_000 {
            let g = grad(&theta);
            adamw_step(&mut [theta.as_mut_slice()], &[g], &["θ".into()], &mut state, 0.01, &cfg).unwrap();
        }
        let norm = grad(&theta).iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn naive_baseline_repeats_last() {
        let x = Array3::from_shape_fn((2, 3, 2), |(b, t, c)| (b * 100 + t * 10 + c) as f64);
        let y = naive_repeat_last(x.view(), 4);
        for b in 0..2 {
            for p in 0..4 {
                for c in 0..2 {
                    assert_eq!(y[[b, p, c]], x[[b, 2, c]]);
                }
            }
        }
    }

    /// ŷ = w·x on single-step windows.
    struct Slope {
        w: Vec<f64>,
    }

    impl Trainable for Slope {
        fn parameter_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn parameters(&self) -> Vec<&[f64]> {
            vec![&self.w]
        }
        fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.w]
        }
        fn predict(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
            Ok(x.mapv(|v| v * self.w[0]))
        }
        fn loss_and_grad(&self, x: ArrayView3<f64>, y: ArrayView3<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
            let pred = self.predict(x)?;
            let n = y.len() as f64;
            let loss = mse(pred.view(), y)?;
            let g: f64 = pred.iter().zip(y.iter()).zip(x.iter()).map(|((p, t), xv)| 2.0 * (p - t) * xv).sum::<f64>() / n;
            Ok((loss, vec![vec![g]]))
        }
    }

    fn slope_data(n: usize, seed: u64, slope: f64) -> WindowedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Array3::from_shape_simple_fn((n, 1, 1), || rng.random_range(-1.0..1.0));
        WindowedDataset {
            targets: inputs.mapv(|v| slope * v),
            inputs,
            scaler: None,
            split_tag: SplitTag::Train,
        }
    }

    #[test]
    fn fit_recovers_slope() {
        let (train, val, test) = (slope_data(64, 1, 2.0), slope_data(16, 2, 2.0), slope_data(16, 3, 2.0));
        let cfg = TrainConfig {
            lr0: 0.05,
            decay_gamma: 1.0,
            weight_decay: 0.0,
            max_epochs: 200,
            patience: 200,
            ..TrainConfig::default()
        };
        let mut model = Slope { w: vec![0.0] };
        let report = fit(&mut model, &train, &val, &test, &cfg).unwrap();
        assert!((model.w[0] - 2.0).abs() < 1e-3, "slope {}", model.w[0]);
        assert!(report.epochs_run() <= 200);
        assert_eq!(report.best_val_mse, report.epochs[report.best_epoch - 1].val_mse);
        assert_eq!(evaluate(&model, &val, 7).unwrap().mse, report.best_val_mse);
    }

    #[test]
    fn fit_stops_on_plateau() {
        // targets are independent of inputs after the first few steps: slope 0 data, model starts at 0
        let (train, val, test) = (slope_data(32, 1, 0.0), slope_data(8, 2, 0.0), slope_data(8, 3, 0.0));
        let cfg = TrainConfig { max_epochs: 50, patience: 5, weight_decay: 0.0, ..TrainConfig::default() };
        let mut model = Slope { w: vec![0.0] };
        let report = fit(&mut model, &train, &val, &test, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.epochs_run(), report.best_epoch + cfg.patience);
    }

    #[test]
    fn fit_is_deterministic() {
        let (train, val, test) = (slope_data(40, 1, -1.5), slope_data(10, 2, -1.5), slope_data(10, 3, -1.5));
        let cfg = TrainConfig { max_epochs: 5, lr0: 0.01, ..TrainConfig::default() };
        let run = || {
            let mut m = Slope { w: vec![0.3] };
            let r = fit(&mut m, &train, &val, &test, &cfg).unwrap();
            (r.epochs.iter().map(|e| (e.train_mse, e.val_mse)).collect::<Vec<_>>(), m.w)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_rejects_empty_dataset() {
        let empty = WindowedDataset {
            inputs: Array3::zeros((0, 1, 1)),
            targets: Array3::zeros((0, 1, 1)),
            scaler: None,
            split_tag: SplitTag::Train,
        };
        let ok = slope_data(4, 1, 1.0);
        let mut m = Slope { w: vec![0.0] };
        assert!(fit(&mut m, &empty, &ok, &ok, &TrainConfig::default()).is_err());
    }

    #[test]
    fn fit_reports_divergence() {
        let mut train = slope_data(8, 1, 1.0);
        train.targets[[0, 0, 0]] = f64::INFINITY;
        let ok = slope_data(4, 2, 1.0);
        let mut m = Slope { w: vec![0.0] };
        let err = fit(&mut m, &train, &ok, &ok, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }
}
