//! Classical Daubechies-2 discrete wavelet transform with periodized boundaries.
//!
//! Analysis follows `A[n] = Σ_k h[k]·x[2n+k]`, `D[n] = Σ_k g[k]·x[2n+k]` with
//! indices wrapped modulo the (even) padded length. Odd-length inputs are
//! periodically extended by one sample first. Synthesis is the adjoint of that
//! exact indexing, which for an orthonormal filter pair is also its inverse.

use crate::error::{Error, Result};

/// Number of taps in the DB2 filters.
pub const TAPS: usize = 4;

/// The fixed DB2 analysis pair: low-pass `low` (h) and high-pass `high` (g).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db2Filter {
    pub low: [f64; TAPS],
    pub high: [f64; TAPS],
}

impl Db2Filter {
    pub fn new() -> Self {
        let s3 = 3f64.sqrt();
        let denom = 4.0 * 2f64.sqrt();
        Self {
            low: [
                (1.0 + s3) / denom,
                (3.0 + s3) / denom,
                (3.0 - s3) / denom,
                (1.0 - s3) / denom,
            ],
            high: [
                (-1.0 + s3) / denom,
                (3.0 - s3) / denom,
                (-3.0 - s3) / denom,
                (1.0 + s3) / denom,
            ],
        }
    }
}

impl Default for Db2Filter {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds the classical DB2 filter pair.
pub fn make_db2_filter() -> Db2Filter {
    Db2Filter::new()
}

/// Multi-level decomposition `{A_L, D_1..D_L}`.
///
/// `level_lengths[l]` is the length of `details[l]` for `l < L`, and
/// `level_lengths[L]` is the length of `approx`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub level_lengths: Vec<usize>,
    pub original_length: usize,
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Total number of coefficients, `len(A_L) + Σ len(D_l)`.
    pub fn total_len(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    /// `‖A_L‖² + Σ‖D_l‖²`.
    pub fn energy(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        sq(&self.approx) + self.details.iter().map(|d| sq(d)).sum::<f64>()
    }
}

/// Coefficient count produced by one level on a sequence of length `n`.
#[inline]
pub fn halved(n: usize) -> usize {
    n.div_ceil(2)
}

/// Deepest decomposition such that every level sees an input of length ≥ 2.
pub fn max_levels(len: usize) -> usize {
    let mut n = len;
    let mut levels = 0;
    while n >= 2 {
        n = halved(n);
        levels += 1;
    }
    levels
}

/// Per-level output lengths `[n_1, .., n_L]` under the ceil-halving law.
pub fn level_lengths(len: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Precondition("at least one level is required".into()));
    }
    let max = max_levels(len);
    if levels > max {
        return Err(Error::TooDeep {
            levels,
            length: len,
            max_levels: max,
        });
    }
    let mut out = Vec::with_capacity(levels);
    let mut n = len;
    for _ in 0..levels {
        n = halved(n);
        out.push(n);
    }
    Ok(out)
}

/// Extends `x` circularly to `target_len` samples.
pub fn periodic_pad(x: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("periodic_pad"));
    }
    if target_len < x.len() {
        return Err(Error::Precondition(format!(
            "pad target {target_len} is shorter than input length {}",
            x.len()
        )));
    }
    Ok((0..target_len).map(|i| x[i % x.len()]).collect())
}

/// One analysis level. Returns `(A, D)`, each of length `ceil(len(x)/2)`.
pub fn dwt_level(x: &[f64], f: &Db2Filter) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::EmptyInput("dwt_level"));
    }
    let n = x.len();
    let padded_len = n + n % 2;
    let out = padded_len / 2;
    let mut a = vec![0.0; out];
    let mut d = vec![0.0; out];
    for m in 0..out {
        let (mut sa, mut sd) = (0.0, 0.0);
        for k in 0..TAPS {
            // padded[i] = x[i mod n], then window index wraps on padded_len
            let v = x[((2 * m + k) % padded_len) % n];
            sa += f.low[k] * v;
            sd += f.high[k] * v;
        }
        a[m] = sa;
        d[m] = sd;
    }
    Ok((a, d))
}

/// One synthesis level: the adjoint of [`dwt_level`], trimmed to `out_len`.
pub fn idwt_level(a: &[f64], d: &[f64], f: &Db2Filter, out_len: usize) -> Result<Vec<f64>> {
    if a.len() != d.len() {
        return Err(Error::shape("idwt_level detail length", a.len(), d.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("idwt_level"));
    }
    let padded_len = 2 * a.len();
    if out_len != padded_len && out_len + 1 != padded_len {
        return Err(Error::Precondition(format!(
            "output length {out_len} incompatible with {} coefficient pairs",
            a.len()
        )));
    }
    let mut x = vec![0.0; padded_len];
    for m in 0..a.len() {
        for k in 0..TAPS {
            x[(2 * m + k) % padded_len] += f.low[k] * a[m] + f.high[k] * d[m];
        }
    }
    x.truncate(out_len);
    Ok(x)
}

/// `levels`-deep decomposition feeding each approximation into the next level.
pub fn wavedec(x: &[f64], f: &Db2Filter, levels: usize) -> Result<WaveletCoeffs> {
    if x.is_empty() {
        return Err(Error::EmptyInput("wavedec"));
    }
    let mut lengths = level_lengths(x.len(), levels)?;
    let mut details = Vec::with_capacity(levels);
    let mut current = x.to_vec();
    for _ in 0..levels {
        let (a, d) = dwt_level(&current, f)?;
        details.push(d);
        current = a;
    }
    lengths.push(current.len());
    Ok(WaveletCoeffs {
        approx: current,
        details,
        level_lengths: lengths,
        original_length: x.len(),
    })
}

/// Inverse of [`wavedec`], trimmed to the recorded original length.
pub fn waverec(c: &WaveletCoeffs, f: &Db2Filter) -> Result<Vec<f64>> {
    let levels = c.details.len();
    let expected = level_lengths(c.original_length, levels)?;
    let consistent = c.level_lengths.len() == levels + 1
        && c.level_lengths[..levels] == expected[..]
        && c.level_lengths[levels] == expected[levels - 1]
        && c.approx.len() == c.level_lengths[levels]
        && c.details.iter().zip(&expected).all(|(d, &n)| d.len() == n);
    if !consistent {
        return Err(Error::shape(
            "waverec level lengths",
            expected,
            c.level_lengths.clone(),
        ));
    }
    let mut current = c.approx.clone();
    for l in (0..levels).rev() {
        let target = if l == 0 { c.original_length } else { expected[l - 1] };
        current = idwt_level(&current, &c.details[l], f, target)?;
    }
    Ok(current)
}
