//! Cost measurements, memory accounting and attention-pattern inspection.

use std::fs;
use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::{attention_batch, attention_entropy, AttentionResult, Mask};
use crate::error::{invalid, Error, Result};
use crate::multihead::MhaResult;
use crate::numerics::{gaussian_fill, Matrix, Rng};
use crate::scalar::Scalar;
use crate::transformer::config::ModelConfig;
use crate::transformer::model::attention_maps;
use crate::transformer::params::ModelParams;

/// Bytes per stored element.
pub const BYTES_PER_ELEMENT: u64 = 8;

/// Multiply-add FLOPs (two per multiply-add) of `Q K^T` for `n_q` queries and
/// `n_kv` keys of width `d_k`.
pub fn score_flops(n_q: usize, n_kv: usize, d_k: usize) -> u64 {
    2 * n_q as u64 * n_kv as u64 * d_k as u64
}

/// FLOPs of one scaled dot-product attention: scores plus the weighted sum
/// of `d_v`-wide values. Softmax and scaling are linear in the score count
/// and left out.
pub fn attention_flops(n_q: usize, n_kv: usize, d_k: usize, d_v: usize) -> u64 {
    score_flops(n_q, n_kv, d_k) + 2 * n_q as u64 * n_kv as u64 * d_v as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub median_secs: f64,
    pub flops: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// Keeps large buffers on the heap. By default glibc serves blocks of 32 MiB
/// and up (an n = 2048 weight matrix) with a fresh mapping on every call, and
/// the resulting page faults hit one size only, skewing the scaling ratio.
/// Process-wide and idempotent.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn pin_heap_allocations() {
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn pin_heap_allocations() {}

/// Median wall time of an unmasked `n x d` attention forward pass for each
/// `n`, after one discarded warm-up run. Kernels run on the calling thread.
///
/// On glibc this raises the allocator's mmap threshold for the rest of the
/// process (see [`pin_heap_allocations`]).
pub fn benchmark_scaling(ns: &[usize], d: usize, repeats: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    if repeats < 3 {
        return Err(invalid(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    if ns.is_empty() || ns.contains(&0) || d == 0 {
        return Err(invalid("benchmark lengths and width must be positive"));
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("benchmark lengths must be strictly ascending"));
    }
    pin_heap_allocations();
    let mut rng = Rng::seed(seed);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let q: Matrix<f64> = gaussian_fill(&mut rng, n, d, 0.0, 1.0)?;
        let k: Matrix<f64> = gaussian_fill(&mut rng, n, d, 0.0, 1.0)?;
        let v: Matrix<f64> = gaussian_fill(&mut rng, n, d, 0.0, 1.0)?;
        let mut times = Vec::with_capacity(repeats);
        for rep in 0..=repeats {
            let start = Instant::now();
            black_box(attention_batch(black_box(&q), &k, &v, &Mask::None, true)?);
            if rep > 0 {
                times.push(start.elapsed().as_secs_f64());
            }
        }
        rows.push(ScalingRow {
            n,
            median_secs: median(times),
            flops: attention_flops(n, n, d, d),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(invalid("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}

/// Analytic activation memory of one multi-head attention block over `n`
/// positions, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// Pre-softmax scores for all heads, `h n^2`.
    pub scores: u64,
    /// Softmax weights for all heads, `h n^2`.
    pub weights: u64,
    /// Softmax weights of a single head, `n^2`.
    pub per_head_weights: u64,
    /// Q, K, V and the concatenated head outputs, `4 n d_model`.
    pub projections: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.scores + self.weights + self.projections
    }
}

pub fn memory_estimate(n: usize, d_model: usize, heads: usize) -> Result<MemoryEstimate> {
    if n == 0 || d_model == 0 || heads == 0 {
        return Err(invalid("memory estimate needs positive dimensions"));
    }
    let (n, d, h) = (n as u64, d_model as u64, heads as u64);
    Ok(MemoryEstimate {
        scores: h * n * n * BYTES_PER_ELEMENT,
        weights: h * n * n * BYTES_PER_ELEMENT,
        per_head_weights: n * n * BYTES_PER_ELEMENT,
        projections: 4 * n * d * BYTES_PER_ELEMENT,
    })
}

/// Formats like C's `%.17g`: seventeen significant digits, trailing zeros
/// dropped, so every finite value reads back exactly.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..17).contains(&exp) {
        strip(&format!("{x:.*}", (16 - exp) as usize))
    } else {
        format!("{}e{exp}", strip(mantissa))
    }
}

/// Writes a matrix as CSV, one row per line.
pub fn write_csv<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| fmt_g17(v.as_f64())).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Matrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| invalid(format!("line {}: bad number {t:?}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(invalid(format!("line {} has {} fields", i + 1, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Anything that carries per-head attention weights.
pub trait HeadWeights<T> {
    fn head_weights(&self) -> Vec<&Matrix<T>>;
}

impl<T> HeadWeights<T> for AttentionResult<T> {
    fn head_weights(&self) -> Vec<&Matrix<T>> {
        vec![&self.weights]
    }
}

impl<T> HeadWeights<T> for MhaResult<T> {
    fn head_weights(&self) -> Vec<&Matrix<T>> {
        self.head_weights.iter().collect()
    }
}

impl<T> HeadWeights<T> for [Matrix<T>] {
    fn head_weights(&self) -> Vec<&Matrix<T>> {
        self.iter().collect()
    }
}

/// Writes `<prefix>_head<i>.csv` into `dir` for every head; row `i` of a
/// file is query position `i`. Returns the paths written.
pub fn export_attention<T: Scalar, R: HeadWeights<T> + ?Sized>(
    result: &R,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Io(format!("{} is not a directory", dir.display())));
    }
    result
        .head_weights()
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let path = dir.join(format!("{prefix}_head{i}.csv"));
            write_csv(&path, w)?;
            Ok(path)
        })
        .collect()
}

/// Mean over query rows of the attention entropy, in nats.
pub fn mean_entropy<T: Scalar>(weights: &Matrix<T>) -> Result<f64> {
    let h = attention_entropy(weights)?;
    if h.is_empty() {
        return Err(invalid("entropy of an empty weight matrix"));
    }
    Ok(h.iter().map(|v| v.as_f64()).sum::<f64>() / h.len() as f64)
}

/// Mean entropies indexed `[layer][head]` for each attention block kind.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub encoder_self: Vec<Vec<f64>>,
    pub decoder_self: Vec<Vec<f64>>,
    pub decoder_cross: Vec<Vec<f64>>,
}

fn profile<T: Scalar>(maps: &[Vec<Matrix<T>>]) -> Result<Vec<Vec<f64>>> {
    maps.iter()
        .map(|layer| layer.iter().map(mean_entropy).collect())
        .collect()
}

/// Entropy of every head for one source and decoder prefix. Encoder and
/// cross-attention values lie in `[0, ln n_src]`, decoder self-attention in
/// `[0, ln n_tgt]`.
pub fn entropy_profile<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    src: &[usize],
    tgt: &[usize],
) -> Result<EntropyProfile> {
    let maps = attention_maps(src, tgt, params, cfg)?;
    Ok(EntropyProfile {
        encoder_self: profile(&maps.encoder_self)?,
        decoder_self: profile(&maps.decoder_self)?,
        decoder_cross: profile(&maps.decoder_cross)?,
    })
}
