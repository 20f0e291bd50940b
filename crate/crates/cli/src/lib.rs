//! Command implementations behind the `db2transf` binary.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use db2transf::checkpoint::Checkpoint;
use db2transf::data::{self, PreparedData, RawSeries, Scaler};
use db2transf::dwt::{make_db2_filter, wavedec, waverec};
use db2transf::model::Db2TransF;
use ndarray::{Array1, Array2, Array3, Axis};
use db2transf::train::{self, Metrics, TrainConfig, TrainReport};
use db2transf::wavelet;

pub use config::{DataSource, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.db2t";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
const EVAL_CHUNK: usize = 256;

#[derive(Debug)]
pub enum CliError {
    /// Bad or incomplete configuration; exit code 2.
    Config(String),
    /// Everything else; exit code 1.
    Run(db2transf::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<db2transf::Error> for CliError {
    fn from(e: db2transf::Error) -> Self {
        CliError::Run(e)
    }
}

fn config_err(e: db2transf::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Run(db2transf::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Run(db2transf::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub fn load_series(source: &DataSource) -> Result<RawSeries, CliError> {
    Ok(match source {
        DataSource::Csv(p) => data::load_csv(p)?,
        DataSource::Synth(spec) => data::synth_series(spec).map_err(config_err)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub naive: Metrics,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    /// Single-line `key=value` record; free of timings so reruns compare equal.
    pub summary: String,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let source = cfg.data_source()?;
    let train_cfg = TrainConfig::from(&cfg.train);
    train_cfg.validate().map_err(config_err)?;
    let series = load_series(&source)?;
    let model_cfg = cfg.model.to_model_config(series.channels());
    model_cfg.validate().map_err(config_err)?;
    let prepared = data::prepare(&series, cfg.data.ratios, model_cfg.lookback, model_cfg.horizon)?;

    let mut model = Db2TransF::new(model_cfg, cfg.train.seed)?;
    let report = train::fit(&mut model, &prepared.train, &prepared.val, &prepared.test, &train_cfg)?;
    let naive_pred = train::naive_repeat_last(prepared.test.inputs.view(), prepared.test.horizon());
    let naive = Metrics {
        mse: train::mse(naive_pred.view(), prepared.test.targets.view())?,
        mae: train::mae(naive_pred.view(), prepared.test.targets.view())?,
    };

    create_dir(&cfg.output_dir)?;
    let mut ck = Checkpoint::new(&model, cfg.train.seed);
    store_scaler(&mut ck, &prepared);
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;
    let report_csv = cfg.output_dir.join(REPORT_FILE);
    report.write_csv(&report_csv)?;

    let summary = format!(
        "train split=test mse={} mae={} naive_mse={} naive_mae={} best_epoch={} epochs_run={} stopped_early={} best_val_mse={}",
        report.final_test.mse,
        report.final_test.mae,
        naive.mse,
        naive.mae,
        report.best_epoch,
        report.epochs_run(),
        report.stopped_early,
        report.best_val_mse,
    );
    write_file(&cfg.output_dir.join(SUMMARY_FILE), &format!("{summary}\n"))?;
    Ok(TrainOutcome {
        report,
        naive,
        checkpoint,
        report_csv,
        summary,
    })
}

fn store_scaler(ck: &mut Checkpoint, prepared: &PreparedData) {
    let join = |v: &Array1<f64>| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    ck.metadata.insert("scaler.mean".into(), join(&prepared.scaler.mean));
    ck.metadata.insert("scaler.std".into(), join(&prepared.scaler.std));
    for (i, name) in prepared.column_names.iter().enumerate() {
        ck.metadata.insert(format!("column.{i}"), name.clone());
    }
}

fn stored_scaler(ck: &Checkpoint) -> Result<Scaler, CliError> {
    let parse = |key: &str| -> Result<Array1<f64>, CliError> {
        let raw = ck
            .metadata
            .get(key)
            .ok_or_else(|| CliError::Run(db2transf::Error::Checkpoint(format!("metadata `{key}` missing"))))?;
        raw.split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Array1::from)
            .map_err(|_| CliError::Run(db2transf::Error::Checkpoint(format!("metadata `{key}` is malformed"))))
    };
    let scaler = Scaler {
        mean: parse("scaler.mean")?,
        std: parse("scaler.std")?,
    };
    if scaler.mean.len() != ck.config.channels || scaler.std.len() != ck.config.channels {
        return Err(CliError::Run(db2transf::Error::Checkpoint(
            "scaler width does not match channel count".into(),
        )));
    }
    Ok(scaler)
}

fn stored_columns(ck: &Checkpoint) -> Vec<String> {
    (0..ck.config.channels)
        .map(|i| ck.metadata.get(&format!("column.{i}")).cloned().unwrap_or_else(|| format!("ch{i}")))
        .collect()
}

fn check_channels(expected: usize, found: usize) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::Config(format!(
            "checkpoint expects {expected} channels but the data has {found}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub horizon: usize,
    pub summary: String,
}

/// Scores a checkpoint on the test split of the configured data, optionally
/// only on its first `horizon` steps.
pub fn cmd_evaluate(checkpoint: &Path, cfg: &RunConfig, horizon: Option<usize>) -> Result<EvalOutcome, CliError> {
    let source = cfg.data_source()?;
    let ck = Checkpoint::load(checkpoint)?;
    let trained = ck.config.horizon;
    let horizon = horizon.unwrap_or(trained);
    if horizon == 0 || horizon > trained {
        return Err(CliError::Config(format!(
            "--horizon {horizon} is outside 1..={trained}, the forecast length of the checkpoint"
        )));
    }
    let series = load_series(&source)?;
    check_channels(ck.config.channels, series.channels())?;
    let lookback = ck.config.lookback;
    let model = ck.into_model()?;
    let prepared = data::prepare(&series, cfg.data.ratios, lookback, horizon)?;
    let metrics = train::evaluate_horizon(&model, &prepared.test, EVAL_CHUNK, horizon)?;
    let summary = format!(
        "evaluate split=test horizon={horizon} mse={} mae={}",
        metrics.mse, metrics.mae
    );
    Ok(EvalOutcome {
        metrics,
        horizon,
        summary,
    })
}

/// Forecasts the steps after the last `lookback` rows of `input`, in the
/// original units.
pub fn cmd_predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<Array2<f64>, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let scaler = stored_scaler(&ck)?;
    let columns = stored_columns(&ck);
    let series = data::load_csv(input)?;
    check_channels(ck.config.channels, series.channels())?;
    let lookback = ck.config.lookback;
    if series.len() < lookback {
        return Err(CliError::Run(db2transf::Error::Data(format!(
            "{} has {} rows, prediction needs at least {lookback}",
            input.display(),
            series.len()
        ))));
    }
    let tail = series.values.slice(ndarray::s![series.len() - lookback.., ..]);
    let scaled = scaler.apply(tail);
    let model = ck.into_model()?;
    let pred = model.forward(scaled.insert_axis(Axis(0)).view())?;
    let forecast = scaler.invert(pred.index_axis(Axis(0), 0));
    RawSeries {
        column_names: columns,
        values: forecast.clone(),
        timestamps: None,
    }
    .write_csv(output)?;
    Ok(forecast)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOutcome {
    /// `(band, length)` in file order: `A<L>`, `D1`, …, `D<L>`.
    pub sections: Vec<(String, usize)>,
    pub reconstruction_error: f64,
}

/// Writes the classical DB2 coefficients of one column as a long-format CSV
/// (`band,index,value`), followed by a comment line with the max-abs
/// reconstruction error.
pub fn cmd_decompose(input: &Path, column: &str, levels: usize, output: &Path) -> Result<DecomposeOutcome, CliError> {
    let series = data::load_csv(input)?;
    let idx = series
        .column_names
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| {
            CliError::Config(format!(
                "column `{column}` not found; available: {}",
                series.column_names.join(", ")
            ))
        })?;
    let x: Vec<f64> = series.values.column(idx).to_vec();
    let f = make_db2_filter();
    let coeffs = wavedec(&x, &f, levels).map_err(config_err)?;
    let back = waverec(&coeffs, &f)?;
    let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut sections = vec![(format!("A{levels}"), coeffs.approx.as_slice())];
    for (l, d) in coeffs.details.iter().enumerate() {
        sections.push((format!("D{}", l + 1), d.as_slice()));
    }
    let mut out = String::from("band,index,value\n");
    for (band, vals) in &sections {
        for (i, v) in vals.iter().enumerate() {
            let _ = writeln!(out, "{band},{i},{v}");
        }
    }
    let _ = writeln!(out, "# reconstruction_max_abs_error={err:e}");
    write_file(output, &out)?;
    Ok(DecomposeOutcome {
        sections: sections.iter().map(|(b, v)| (b.clone(), v.len())).collect(),
        reconstruction_error: err,
    })
}

pub fn cmd_synth(cfg: &RunConfig, output: &Path) -> Result<RawSeries, CliError> {
    let section = cfg.data.synth.clone().unwrap_or_default();
    let series = data::synth_series(&(&section).into()).map_err(config_err)?;
    series.write_csv(output)?;
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub lookback: usize,
    /// Length predicted by the output-length law.
    pub law_len: usize,
    /// Rows actually produced by the first block's wavelet module.
    pub measured_len: usize,
    pub coefficient_count: usize,
    pub median_ms: f64,
    /// Time relative to the previous row.
    pub ratio: Option<f64>,
}

/// Median-of-`repeats` forward time for each configured lookback.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let b = &cfg.bench;
    if b.lookbacks.is_empty() || b.repeats == 0 || b.batch_size == 0 || b.channels == 0 {
        return Err(CliError::Config(
            "bench needs lookbacks, and positive repeats, batch_size and channels".into(),
        ));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    for &lookback in &b.lookbacks {
        let mut mc = cfg.model.to_model_config(b.channels);
        mc.lookback = lookback;
        mc.validate().map_err(config_err)?;
        let model = Db2TransF::new(mc.clone(), b.seed)?;
        let x = Array3::from_shape_fn((b.batch_size, lookback, b.channels), |(i, t, c)| {
            ((t as f64) * 0.37 + (c as f64) * 1.3 + i as f64).sin()
        });
        let wav = &model.params.blocks[0].wavelet;
        let probe = wavelet::forward_sample(Array2::zeros((lookback, mc.model_dim)).view(), wav)?;
        model.forward(x.view())?;
        let mut times = Vec::with_capacity(b.repeats);
        for _ in 0..b.repeats {
            let start = Instant::now();
            let y = model.forward(x.view())?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(y);
        }
        times.sort_by(f64::total_cmp);
        let median_ms = times[times.len() / 2];
        let ratio = rows.last().map(|p| median_ms / p.median_ms);
        rows.push(BenchRow {
            lookback,
            law_len: wavelet::output_length(lookback, mc.levels)?,
            measured_len: probe.nrows(),
            coefficient_count: probe.nrows() * mc.model_dim,
            median_ms,
            ratio,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("lookback,law_len,measured_len,coefficients,median_ms,ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{}",
            r.lookback, r.law_len, r.measured_len, r.coefficient_count, r.median_ms, ratio
        );
    }
    out
}
