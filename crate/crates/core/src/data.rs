//! Dataset ingestion and preparation: CSV loading, chronological splits,
//! train-only standardisation, sliding windows and synthetic series.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// A multivariate series `[timesteps][channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub column_names: Vec<String>,
    pub values: Array2<f64>,
    /// Leading date column, kept only for reference.
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    fn slice_rows(&self, start: usize, end: usize) -> RawSeries {
        RawSeries {
            column_names: self.column_names.clone(),
            values: self.values.slice(s![start..end, ..]).to_owned(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        }
    }

    /// Writes a header row and one line per timestep; values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&self.column_names.join(","));
        out.push('\n');
        for row in self.values.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a comma-separated file with a header row. A leading column whose
/// first value does not parse as a number is treated as a timestamp column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl std::io::Read) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if header.is_empty() || records.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }
    let has_date = records[0].get(0).is_some_and(|v| v.parse::<f64>().is_err());
    let skip = usize::from(has_date);
    let column_names = header[skip..].to_vec();
    if column_names.is_empty() {
        return Err(Error::Data("CSV has no numeric columns".into()));
    }

    let mut values = Array2::zeros((records.len(), column_names.len()));
    let mut timestamps = has_date.then(Vec::new);
    let mut bad_lines = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let line = rec.position().map_or(i as u64 + 2, |p| p.line());
        if let Some(ts) = timestamps.as_mut() {
            ts.push(rec.get(0).unwrap_or_default().to_string());
        }
        let cells: Vec<Option<f64>> = rec
            .iter()
            .skip(skip)
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        if cells.len() != column_names.len() || cells.iter().any(Option::is_none) {
            bad_lines.push(line);
            continue;
        }
        for (j, v) in cells.into_iter().enumerate() {
            values[[i, j]] = v.expect("checked above");
        }
    }
    if !bad_lines.is_empty() {
        let shown: Vec<String> = bad_lines.iter().take(10).map(u64::to_string).collect();
        return Err(Error::Data(format!(
            "{} row(s) with missing, unparseable or non-finite values; lines: {}{}",
            bad_lines.len(),
            shown.join(", "),
            if bad_lines.len() > 10 { ", ..." } else { "" }
        )));
    }
    Ok(RawSeries {
        column_names,
        values,
        timestamps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Contiguous train/val/test segments. Train and val lengths are floored,
/// the remainder goes to test.
pub fn chronological_split(series: &RawSeries, ratios: (f64, f64, f64)) -> Result<[RawSeries; 3]> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = series.len();
    // nudge so that e.g. 100 * 0.7 = 70.00000000000001 and 10 * 0.3 = 2.9999 floor correctly
    let n_train = (n as f64 * a + 1e-9).floor() as usize;
    let n_val = (n as f64 * b + 1e-9).floor() as usize;
    let n_val = n_val.min(n - n_train);
    Ok([
        series.slice_rows(0, n_train),
        series.slice_rows(n_train, n_train + n_val),
        series.slice_rows(n_train + n_val, n),
    ])
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Scaler {
    pub fn fit(train: &RawSeries) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyInput("standardize"));
        }
        let mean = train.values.mean_axis(Axis(0)).expect("nonempty");
        let std = train.values.std_axis(Axis(0), 0.0);
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!(
                "channel `{}` has zero variance in the training segment",
                train.column_names.get(c).map_or("?", String::as_str)
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: ArrayView2<f64>) -> Array2<f64> {
        (&values - &self.mean) / &self.std
    }

    pub fn invert(&self, values: ArrayView2<f64>) -> Array2<f64> {
        &values * &self.std + &self.mean
    }
}

/// Fits a scaler on the train segment only.
pub fn standardize(train: &RawSeries) -> Result<Scaler> {
    Scaler::fit(train)
}

/// Input/target window pairs from one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `[num_windows][T][C]`
    pub inputs: Array3<f64>,
    /// `[num_windows][T_pred][C]`
    pub targets: Array3<f64>,
    pub scaler: Option<Scaler>,
    pub split_tag: SplitTag,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.inputs.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.targets.dim().1
    }

    pub fn channels(&self) -> usize {
        self.inputs.dim().2
    }

    /// Gathers the windows at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Array3<f64>, Array3<f64>) {
        (
            self.inputs.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
        )
    }
}

/// Every stride-1 window: input rows `i..i+T`, target rows `i+T..i+T+T_pred`.
pub fn make_windows(values: ArrayView2<f64>, lookback: usize, horizon: usize, tag: SplitTag) -> Result<WindowedDataset> {
    let (len, channels) = values.dim();
    let need = lookback + horizon;
    if lookback == 0 || horizon == 0 {
        return Err(Error::Precondition("lookback and horizon must be positive".into()));
    }
    if len < need {
        return Err(Error::Data(format!(
            "{tag} segment has {len} rows; at least {need} (lookback {lookback} + horizon {horizon}) are required"
        )));
    }
    let count = len - need + 1;
    let mut inputs = Array3::zeros((count, lookback, channels));
    let mut targets = Array3::zeros((count, horizon, channels));
    for i in 0..count {
        inputs
            .slice_mut(s![i, .., ..])
            .assign(&values.slice(s![i..i + lookback, ..]));
        targets
            .slice_mut(s![i, .., ..])
            .assign(&values.slice(s![i + lookback..i + need, ..]));
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        scaler: None,
        split_tag: tag,
    })
}

/// Standardised, windowed train/val/test sets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
    pub column_names: Vec<String>,
}

/// Split, fit the scaler on train, standardise every segment, window each.
pub fn prepare(series: &RawSeries, ratios: (f64, f64, f64), lookback: usize, horizon: usize) -> Result<PreparedData> {
    let segments = chronological_split(series, ratios)?;
    let scaler = standardize(&segments[0])?;
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut sets = Vec::with_capacity(3);
    for (seg, tag) in segments.iter().zip(tags) {
        let mut w = make_windows(scaler.apply(seg.values.view()).view(), lookback, horizon, tag)?;
        w.scaler = Some(scaler.clone());
        sets.push(w);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(PreparedData {
        train,
        val,
        test,
        scaler,
        column_names: series.column_names.clone(),
    })
}

/// Parameters of a synthetic sum-of-sinusoids series.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    /// Cycles per timestep.
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise_std: f64,
    pub trend_slope: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 5000,
            channels: 3,
            frequencies: vec![1.0 / 24.0, 1.0 / 100.0],
            amplitudes: vec![1.0, 0.5],
            noise_std: 0.1,
            trend_slope: 0.0,
            seed: 0,
        }
    }
}

/// `x_c[t] = Σ_j a_j sin(2π f_j t + φ_cj) + slope·t + ε`, phases and noise seeded.
pub fn synth_series(spec: &SynthSpec) -> Result<RawSeries> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(Error::Precondition("synthetic length and channels must be positive".into()));
    }
    if spec.frequencies.len() != spec.amplitudes.len() {
        return Err(Error::Precondition(format!(
            "{} frequencies but {} amplitudes",
            spec.frequencies.len(),
            spec.amplitudes.len()
        )));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|_| Error::Precondition(format!("invalid noise_std {}", spec.noise_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase_dist = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let phases: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| spec.frequencies.iter().map(|_| phase_dist.sample(&mut rng)).collect())
        .collect();
    let mut values = Array2::zeros((spec.length, spec.channels));
    for t in 0..spec.length {
        let tf = t as f64;
        for c in 0..spec.channels {
            let mut v = spec.trend_slope * tf;
            for (j, (&f, &a)) in spec.frequencies.iter().zip(&spec.amplitudes).enumerate() {
                v += a * (std::f64::consts::TAU * f * tf + phases[c][j]).sin();
            }
            values[[t, c]] = v + noise.sample(&mut rng);
        }
    }
    Ok(RawSeries {
        column_names: (0..spec.channels).map(|c| format!("ch{c}")).collect(),
        values,
        timestamps: None,
    })
}
