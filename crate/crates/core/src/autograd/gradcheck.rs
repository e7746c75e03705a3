//! Central finite-difference checks of every hand-derived gradient.

use std::fmt;

use crate::attention::Mask;
use crate::error::{invalid, Error, Result};
use crate::multihead::{mha_forward_cached, MhaParams, Segment};
use crate::numerics::{gaussian_fill, stable_softmax_rows, DoubleDouble, Matrix, Rng};
use crate::scalar::Scalar;
use crate::training::loss::cross_entropy;
use crate::training::regularization::DropoutCtx;
use crate::transformer::config::{Activation, EmbedScale, ModelConfig, NormPlacement, PeMode, PAD};
use crate::transformer::layers::ffn_rows;
use crate::transformer::model::forward_batch;
use crate::transformer::params::{FfnParams, LayerNormParams, ModelParams};

use super::model::model_backward;
use super::ops::{
    attention_backward, attention_forward, ffn_backward, ffn_forward_taped, layer_norm_backward, layer_norm_forward,
    mha_backward, softmax_backward,
};

/// Step used by every suite.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Random instances per suite.
pub const GRADCHECK_INSTANCES: usize = 20;

/// Largest relative error between `analytic` and central differences of `f`
/// around `point`. The denominator is `max(|analytic|, |numeric|, 1e-8)`.
///
/// The objective is evaluated in the scalar type `S`. With `S = f64` the
/// quotient carries roundoff of order `eps * |f| / h`; with
/// [`DoubleDouble`] that term drops below `1e-25` and only the `O(h^2)`
/// truncation error remains.
pub fn finite_diff_check<S: Scalar>(
    mut f: impl FnMut(&[S]) -> S,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if point.len() != analytic.len() {
        return Err(invalid(format!(
            "{} coordinates but {} analytic partials",
            point.len(),
            analytic.len()
        )));
    }
    let step = S::lit(h);
    let mut x: Vec<S> = point.iter().map(|&v| S::lit(v)).collect();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = ((up - down) / (step + step)).as_f64();
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Outcome of one gradient-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    /// Worst relative error against the double-double oracle; this decides
    /// pass or fail.
    pub max_rel_err: f64,
    /// Same instances against a plain `f64` oracle, for reference.
    pub max_rel_err_f64: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.3e}\t{:.3e}\t{}",
            self.name,
            self.instances,
            self.max_rel_err,
            self.max_rel_err_f64,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 7] = ["softmax", "attention", "mha", "layernorm", "ffn", "cross_entropy", "model"];

fn suite_max<S: Scalar>(name: &str, instances: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let err = match name {
            "softmax" => softmax_instance::<S>(&mut rng, h)?,
            "attention" => attention_instance::<S>(&mut rng, h)?,
            "mha" => mha_instance::<S>(&mut rng, h)?,
            "layernorm" => layernorm_instance::<S>(&mut rng, h)?,
            "ffn" => ffn_instance::<S>(&mut rng, h)?,
            "cross_entropy" => cross_entropy_instance::<S>(&mut rng, h)?,
            "model" => model_instance::<S>(&mut rng, h)?,
            _ => return Err(invalid(format!("unknown gradcheck suite '{name}'"))),
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs one named suite with `instances` random cases at [`GRADCHECK_STEP`],
/// once per oracle precision. Both passes draw identical instances.
pub fn run_suite(name: &str, instances: usize, seed: u64) -> Result<SuiteReport> {
    run_suite_with_step(name, instances, seed, GRADCHECK_STEP)
}

/// [`run_suite`] with an explicit finite-difference step.
pub fn run_suite_with_step(name: &str, instances: usize, seed: u64, h: f64) -> Result<SuiteReport> {
    let name = SUITES
        .iter()
        .find(|&&s| s == name)
        .copied()
        .ok_or_else(|| invalid(format!("unknown gradcheck suite '{name}'")))?;
    Ok(SuiteReport {
        name,
        instances,
        max_rel_err: suite_max::<DoubleDouble>(name, instances, seed, h)?,
        max_rel_err_f64: suite_max::<f64>(name, instances, seed, h)?,
    })
}

/// Every suite, [`GRADCHECK_INSTANCES`] cases each.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, GRADCHECK_INSTANCES, seed)).collect()
}

fn random(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    gaussian_fill(rng, rows, cols, 0.0, std).expect("non-negative std")
}

fn flatten(ms: &[&Matrix<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn unflatten<S: Scalar>(x: &[S], ms: &mut [&mut Matrix<S>]) {
    let mut at = 0;
    for m in ms.iter_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&x[at..at + n]);
        at += n;
    }
}

fn weighted_sum<S: Scalar>(r: &Matrix<S>, y: &Matrix<S>) -> S {
    r.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum()
}

fn softmax_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let n = 1 + rng.below(8);
    let s = random(rng, 1, n, 2.0);
    let u = random(rng, 1, n, 1.0);
    let a = stable_softmax_rows(&s);
    let analytic = softmax_backward(a.row(0), u.row(0))?;
    let u = u.cast::<S>();
    let f = |x: &[S]| weighted_sum(&u, &stable_softmax_rows(&Matrix::row_vector(x)));
    finite_diff_check(f, s.data(), &analytic, h)
}

fn attention_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let m = 1 + rng.below(5);
    let n = if rng.below(2) == 0 { m } else { 1 + rng.below(5) };
    let d = 1 + rng.below(4);
    let dv = 1 + rng.below(4);
    let mask = if m == n && rng.below(2) == 0 { Mask::Causal } else { Mask::None };
    let (q, k, v) = (random(rng, m, d, 1.0), random(rng, n, d, 1.0), random(rng, n, dv, 1.0));
    let r = random(rng, m, dv, 1.0);
    let (_, tape) = attention_forward(&q, &k, &v, &mask, true)?;
    let g = attention_backward(&tape, &r)?;
    let point = flatten(&[&q, &k, &v]);
    let analytic = flatten(&[&g.dq, &g.dk, &g.dv]);
    let (q, k, v, r) = (q.cast::<S>(), k.cast::<S>(), v.cast::<S>(), r.cast::<S>());
    let f = |x: &[S]| {
        let (mut q, mut k, mut v) = (q.clone(), k.clone(), v.clone());
        unflatten(x, &mut [&mut q, &mut k, &mut v]);
        let out = crate::attention::attention_batch(&q, &k, &v, &mask, true).expect("shapes fixed");
        weighted_sum(&r, &out.output)
    };
    finite_diff_check(f, &point, &analytic, h)
}

fn mha_run<S: Scalar>(
    p: &MhaParams<S>,
    xq: &Matrix<S>,
    xkv: Option<&Matrix<S>>,
    q_segs: &[Segment],
    kv_segs: &[Segment],
    mask: &Mask,
) -> (Matrix<S>, crate::multihead::MhaCache<S>) {
    let mut dummy = Rng::seed(0);
    let mut ctx = DropoutCtx { rng: &mut dummy, train: false };
    let kv = xkv.unwrap_or(xq);
    mha_forward_cached(xq, kv, kv, p, q_segs, kv_segs, mask, 0.0, &mut ctx).expect("shapes fixed")
}

fn mha_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let heads = 1 + rng.below(3);
    let d = heads * (1 + rng.below(3));
    let lens_q: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(4)).collect();
    let cross = rng.below(2) == 0;
    let lens_kv: Vec<usize> = if cross {
        lens_q.iter().map(|_| 1 + rng.below(4)).collect()
    } else {
        lens_q.clone()
    };
    let mask = if !cross && rng.below(2) == 0 { Mask::Causal } else { Mask::None };
    let q_segs = Segment::from_lengths(lens_q.iter().copied());
    let kv_segs = Segment::from_lengths(lens_kv.iter().copied());
    let nq: usize = lens_q.iter().sum();
    let nkv: usize = lens_kv.iter().sum();
    let params = MhaParams::<f64>::init(d, heads, rng)?;
    let xq = random(rng, nq, d, 1.0);
    let xkv = cross.then(|| random(rng, nkv, d, 1.0));
    let r = random(rng, nq, d, 1.0);

    let (_, cache) = mha_run(&params, &xq, xkv.as_ref(), &q_segs, &kv_segs, &mask);
    let zero = || Matrix::zeros(d, d);
    let mut grads = MhaParams::new(zero(), zero(), zero(), zero(), heads)?;
    let (gq, gk, gv) = mha_backward(&cache, &params, &r, &mut grads)?;
    let mut point = flatten(&[&params.wq, &params.wk, &params.wv, &params.wo, &xq]);
    let mut analytic = flatten(&[&grads.wq, &grads.wk, &grads.wv, &grads.wo]);
    match &xkv {
        Some(x) => {
            analytic.extend_from_slice(gq.data());
            point.extend_from_slice(x.data());
            analytic.extend_from_slice(gk.add(&gv)?.data());
        }
        None => analytic.extend_from_slice(gq.add(&gk)?.add(&gv)?.data()),
    }

    let (params, xq, r) = (params.cast::<S>(), xq.cast::<S>(), r.cast::<S>());
    let xkv = xkv.map(|m| m.cast::<S>());
    let f = |x: &[S]| {
        let (mut p, mut xq, mut xkv) = (params.clone(), xq.clone(), xkv.clone());
        match xkv.as_mut() {
            Some(kv) => unflatten(x, &mut [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut xq, kv]),
            None => unflatten(x, &mut [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut xq]),
        }
        weighted_sum(&r, &mha_run(&p, &xq, xkv.as_ref(), &q_segs, &kv_segs, &mask).0)
    };
    finite_diff_check(f, &point, &analytic, h)
}

/// Rows whose spread falls below this are redrawn: the central-difference
/// truncation error of a layer norm grows like `(h / sigma)^2`.
const LAYERNORM_MIN_STD: f64 = 0.1;

fn layernorm_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let n = 1 + rng.below(4);
    let d = 2 + rng.below(7);
    let x = loop {
        let x = random(rng, n, d, 2.0);
        let spread_ok = (0..n).all(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            var.sqrt() >= LAYERNORM_MIN_STD
        });
        if spread_ok {
            break x;
        }
    };
    let ln = LayerNormParams {
        gamma: gaussian_fill(rng, 1, d, 1.0, 0.5)?,
        beta: random(rng, 1, d, 0.5),
    };
    let eps = 1e-6;
    let r = random(rng, n, d, 1.0);
    let (_, tape) = layer_norm_forward(&x, &ln, eps)?;
    let (dx, g) = layer_norm_backward(&tape, &r)?;
    let point = flatten(&[&x, &ln.gamma, &ln.beta]);
    let analytic = flatten(&[&dx, &g.gamma, &g.beta]);
    let (x, ln, r) = (x.cast::<S>(), ln.cast::<S>(), r.cast::<S>());
    let f = |v: &[S]| {
        let (mut x, mut ln) = (x.clone(), ln.clone());
        unflatten(v, &mut [&mut x, &mut ln.gamma, &mut ln.beta]);
        weighted_sum(&r, &crate::transformer::layers::layer_norm_rows(&x, &ln, eps).expect("shapes fixed"))
    };
    finite_diff_check(f, &point, &analytic, h)
}

/// ReLU has a kink at zero; instances whose pre-activations sit closer to it
/// than this are redrawn so the central difference never straddles it.
const RELU_KINK_MARGIN: f64 = 1e-3;

fn ffn_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let act = match rng.below(3) {
        0 => Activation::Relu,
        1 => Activation::Gelu,
        _ => Activation::Swish {
            beta: rng.uniform_in(0.5, 2.0),
        },
    };
    loop {
        let n = 1 + rng.below(4);
        let d = 1 + rng.below(5);
        let dff = 1 + rng.below(8);
        let p = FfnParams {
            w1: random(rng, d, dff, 1.0),
            b1: random(rng, 1, dff, 0.5),
            w2: random(rng, dff, d, 1.0),
            b2: random(rng, 1, d, 0.5),
        };
        let x = random(rng, n, d, 1.0);
        if act == Activation::Relu {
            let mut pre = crate::numerics::matmul(&x, &p.w1)?;
            pre.add_row_broadcast(&p.b1)?;
            if pre.data().iter().any(|v| v.abs() < RELU_KINK_MARGIN) {
                continue;
            }
        }
        let r = random(rng, n, d, 1.0);
        let (_, tape) = ffn_forward_taped(&x, &p, act)?;
        let (dx, g) = ffn_backward(&tape, &r)?;
        let point = flatten(&[&x, &p.w1, &p.b1, &p.w2, &p.b2]);
        let analytic = flatten(&[&dx, &g.w1, &g.b1, &g.w2, &g.b2]);
        let (x, p, r) = (x.cast::<S>(), p.cast::<S>(), r.cast::<S>());
        let f = |v: &[S]| {
            let (mut x, mut p) = (x.clone(), p.clone());
            unflatten(v, &mut [&mut x, &mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2]);
            weighted_sum(&r, &ffn_rows(&x, &p, act).expect("shapes fixed"))
        };
        return finite_diff_check(f, &point, &analytic, h);
    }
}

fn cross_entropy_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let m = 1 + rng.below(4);
    let v = 2 + rng.below(7);
    let logits = random(rng, m, v, 2.0);
    let mut targets: Vec<usize> = (0..m).map(|_| 1 + rng.below(v - 1)).collect();
    if m > 1 && rng.below(2) == 0 {
        targets[m - 1] = PAD;
    }
    let eps = if rng.below(2) == 0 { 0.0 } else { 0.1 };
    let (_, grad) = cross_entropy(&logits, &targets, eps)?;
    let f = |x: &[S]| {
        let z = Matrix::from_vec(m, v, x.to_vec()).expect("shape fixed");
        cross_entropy(&z, &targets, eps).expect("targets fixed").0
    };
    finite_diff_check(f, logits.data(), grad.data(), h)
}

/// One-layer encoder-decoder with dropout active. Every evaluation reseeds
/// the dropout stream, so all perturbed forwards share the recorded masks.
fn model_instance<S: Scalar>(rng: &mut Rng, h: f64) -> Result<f64> {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 4,
        heads: 2,
        d_ff: 6,
        n_layers: 1,
        max_len: 6,
        norm_placement: if rng.below(2) == 0 {
            NormPlacement::PostNorm
        } else {
            NormPlacement::PreNorm
        },
        activation: if rng.below(2) == 0 {
            Activation::Gelu
        } else {
            Activation::Swish { beta: 1.0 }
        },
        pe_mode: if rng.below(2) == 0 { PeMode::Sinusoidal } else { PeMode::Learned },
        embed_scale: if rng.below(2) == 0 {
            EmbedScale::One
        } else {
            EmbedScale::SqrtDModel
        },
        dropout_p: 0.1,
        attn_dropout_p: 0.1,
        ln_eps: 1e-6,
    };
    let mut params = ModelParams::<f64>::init(&cfg, rng)?;
    // Move the unit gains and zero biases off their initial values so their
    // gradients are generic.
    for (name, m) in params.names().into_iter().zip(params.matrices_mut()) {
        if name.ends_with("gamma") || name.ends_with("beta") || name.contains(".b") {
            for v in m.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    let batch = 1 + rng.below(2);
    let seq = |rng: &mut Rng| -> Vec<usize> { (0..1 + rng.below(5)).map(|_| 1 + rng.below(6)).collect() };
    let srcs: Vec<Vec<usize>> = (0..batch).map(|_| seq(rng)).collect();
    let tgts: Vec<Vec<usize>> = (0..batch).map(|_| seq(rng)).collect();
    let targets: Vec<usize> = tgts.iter().flat_map(|t| t.iter().map(|&x| (x + 2) % 7)).collect();
    let drop_seed = rng.next_u64();
    let src: Vec<&[usize]> = srcs.iter().map(|s| s.as_slice()).collect();
    let tgt: Vec<&[usize]> = tgts.iter().map(|s| s.as_slice()).collect();

    let mut drng = Rng::seed(drop_seed);
    let (logits, tape) = forward_batch(&src, &tgt, &params, &cfg, &mut drng, true)?;
    let (_, dlogits) = cross_entropy(&logits, &targets, 0.1)?;
    let grads = model_backward(&tape, &params, &dlogits)?;
    let point = flatten(&params.matrices());
    let analytic = flatten(&grads.matrices());

    let base = params.cast::<S>();
    let f = |x: &[S]| {
        let mut p = base.clone();
        unflatten(x, &mut p.matrices_mut());
        let mut drng = Rng::seed(drop_seed);
        forward_batch(&src, &tgt, &p, &cfg, &mut drng, true)
            .and_then(|(logits, _)| cross_entropy(&logits, &targets, 0.1))
            .map(|(loss, _)| loss)
            .unwrap_or_else(|_| S::nan())
    };
    finite_diff_check(f, &point, &analytic, h)
}
