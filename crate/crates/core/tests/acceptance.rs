//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use attnlab::analysis::{benchmark_scaling, fit_loglog_slope};
use attnlab::attention::{score, self_attention, Mask, ScoreVariant};
use attnlab::autograd::run_all;
use attnlab::cli::run_seeds;
use attnlab::multihead::{mha_flops, mha_forward, MhaParams};
use attnlab::numerics::{gaussian_fill, matmul, stable_softmax_rows, Matrix, Rng};
use attnlab::tasks::{sample_batch, TaskKind, TaskSpec};
use attnlab::training::{evaluate, lr, train, TrainConfig};
use attnlab::transformer::checkpoint::encode_checkpoint;
use attnlab::transformer::model::forward_batch;
use attnlab::transformer::{load_checkpoint, pe_offset_matrix, save_checkpoint, sinusoidal_pe};
use attnlab::transformer::{ModelConfig, ModelParams, NormPlacement};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = run_all(1).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let parts: Vec<String> = reports
        .iter()
        .map(|r| format!("{}={:.1e}/{:.1e}", r.name, r.max_rel_err, r.max_rel_err_f64))
        .collect();
    let ok = reports.iter().all(|r| r.passed() && r.instances >= 20) && secs < 60.0;
    check(ok, format!("{} (extended/f64 oracle), {secs:.1} s", parts.join(" ")))
}

fn permutation_equivariance() -> Outcome {
    let mut rng = Rng::seed(20);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(16 / heads));
        let x: Matrix<f64> = gaussian_fill(&mut rng, n, d, 0.0, 1.0).unwrap();
        let perm = rng.permutation(n);
        let px = x.permute_rows(&perm);

        let w = |rng: &mut Rng| gaussian_fill::<f64>(rng, d, d, 0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let (wq, wk, wv) = (w(&mut rng), w(&mut rng), w(&mut rng));
        let single = self_attention(&x, &wq, &wk, &wv, &Mask::None).unwrap().output;
        let single_p = self_attention(&px, &wq, &wk, &wv, &Mask::None).unwrap().output;
        worst = worst.max(single.permute_rows(&perm).max_abs_diff(&single_p).unwrap());

        let p = MhaParams::<f64>::init(d, heads, &mut rng).unwrap();
        let multi = mha_forward(&x, &x, &x, &p, &Mask::None).unwrap().output;
        let multi_p = mha_forward(&px, &px, &px, &p, &Mask::None).unwrap().output;
        worst = worst.max(multi.permute_rows(&perm).max_abs_diff(&multi_p).unwrap());
    }
    check(worst < 1e-10, format!("max deviation {worst:.2e} over 100 trials"))
}

fn score_variance() -> Outcome {
    const PAIRS: usize = 1_000_000;
    let mut rng = Rng::seed(30);
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [4usize, 64, 256] {
        let (mut q, mut k) = (vec![0.0f64; d], vec![0.0f64; d]);
        let (mut s1, mut s2, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..PAIRS {
            q.iter_mut().chain(k.iter_mut()).for_each(|v| *v = rng.normal());
            let raw = score(&ScoreVariant::Dot, &q, &k).unwrap();
            let scaled = score(&ScoreVariant::ScaledDot, &q, &k).unwrap();
            s1 += raw;
            s2 += raw * raw;
            t1 += scaled;
            t2 += scaled * scaled;
        }
        let n = PAIRS as f64;
        let (mean, var) = (s1 / n, s2 / n - (s1 / n).powi(2));
        let svar = t2 / n - (t1 / n).powi(2);
        let df = d as f64;
        ok &= (var / df - 1.0).abs() <= 0.03 && (svar - 1.0).abs() <= 0.03 && mean.abs() < 0.01 * df.sqrt();
        parts.push(format!("d_k={d}: var/d_k={:.4} scaled={svar:.4} mean={mean:+.4}", var / df));
    }
    check(ok, parts.join("; "))
}

fn causality() -> Outcome {
    let mut rng = Rng::seed(40);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            heads: 2,
            d_ff: 24,
            n_layers: 2,
            max_len: 16,
            norm_placement: if trial % 2 == 0 { NormPlacement::PostNorm } else { NormPlacement::PreNorm },
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let src: Vec<usize> = (0..3 + rng.below(6)).map(|_| 3 + rng.below(9)).collect();
        let tgt: Vec<usize> = (0..2 + rng.below(8)).map(|_| 3 + rng.below(9)).collect();
        let run = |t: &[usize]| forward_batch(&[&src[..]], &[t], &params, &cfg, &mut Rng::seed(0), false).unwrap().0;
        let base = run(&tgt);
        for t in 0..tgt.len() - 1 {
            let mut changed = tgt.clone();
            changed[t + 1] = 3 + (changed[t + 1] - 3 + 1 + rng.below(8)) % 9;
            let other = run(&changed);
            worst = worst.max(base.row_block(0, t + 1).max_abs_diff(&other.row_block(0, t + 1)).unwrap());
        }
    }
    check(worst < 1e-12, format!("max change at earlier positions {worst:.2e}"))
}

fn pe_linearity() -> Outcome {
    let d = 64;
    let pe = sinusoidal_pe::<f64>(501 + 17, d).unwrap();
    let mut worst = 0.0f64;
    for k in [1usize, 3, 17] {
        let r = pe_offset_matrix::<f64>(k as i64, d).unwrap();
        let shifted = matmul(&pe.row_block(0, 501), &r).unwrap();
        worst = worst.max(shifted.max_abs_diff(&pe.row_block(k, 501)).unwrap());
    }
    check(worst < 1e-10, format!("max residual {worst:.2e} over pos 0..=500, k in {{1, 3, 17}}"))
}

fn lr_schedule() -> Outcome {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (d, w) = (512usize, 4000u64);
    let at = lr(w, d, w).unwrap();
    let scale = (d as f64).powf(-0.5);
    let decay_branch = scale * (w as f64).powf(-0.5);
    let warm_branch = scale * w as f64 * (w as f64).powf(-1.5);
    let cont = rel(at, decay_branch).max(rel(at, warm_branch));
    // Independent 40-digit evaluation.
    let e1 = rel(lr(1, d, w).unwrap(), 1.746928107421710700319667e-7);
    let e2 = rel(lr(16000, d, w).unwrap(), 3.493856214843421400639334e-4);
    check(
        cont <= 1e-15 && e1 < 5e-11 && e2 < 5e-11,
        format!("continuity {cont:.1e}, spot rel err {e1:.1e} and {e2:.1e}"),
    )
}

fn complexity() -> Outcome {
    let ns = [256usize, 512, 1024, 2048];
    let rows = benchmark_scaling(&ns, 64, 9, 70).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_secs).collect();
    let ratio = ys[3] / ys[2];
    let slope = fit_loglog_slope(&xs, &ys).map_err(|e| e.to_string())?;
    let flops: Vec<u64> = [1, 2, 4, 8, 16].iter().map(|&h| mha_flops(512, 512, 256, h)).collect();
    let invariant = flops.iter().all(|&f| f == flops[0]);
    check(
        (3.2..=4.8).contains(&ratio) && (1.7..=2.3).contains(&slope) && invariant,
        format!("t(2048)/t(1024)={ratio:.3}, slope={slope:.3}, mha flops h-invariant={invariant}"),
    )
}

struct DeskRun {
    accuracy: f64,
    steps: usize,
    secs: f64,
    log: Vec<u8>,
    checkpoint: Vec<u8>,
}

fn desk_run(kind: TaskKind, target: f64, seed: u64) -> DeskRun {
    let (init, data, dropout) = run_seeds(seed);
    let task = TaskSpec::new(kind, 16, 3, 12, data).unwrap();
    let cfg = ModelConfig {
        vocab_size: task.model_vocab_size(),
        d_model: 64,
        heads: 4,
        d_ff: 256,
        n_layers: 2,
        norm_placement: NormPlacement::PostNorm,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        seed: dropout,
        target_accuracy: target,
        ..TrainConfig::default()
    };
    let params = ModelParams::<f64>::init(&cfg, &mut Rng::seed(init)).unwrap();
    let mut log = Vec::new();
    let start = Instant::now();
    let out = train(params, &cfg, &tcfg, &task, Some(&mut log)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    // Scored on pairs never used for training or for the stopping decision.
    let fresh = sample_batch(&task, 1000, &mut Rng::seed(seed ^ 0x5eed_0f_f3e5));
    DeskRun {
        accuracy: evaluate(&out.params, &cfg, &fresh).unwrap(),
        steps: out.records.len(),
        secs,
        log,
        checkpoint: encode_checkpoint(&cfg, &out.params),
    }
}

fn desk_training() -> Outcome {
    let copy = desk_run(TaskKind::Copy, 0.99, 0);
    let again = desk_run(TaskKind::Copy, 0.99, 0);
    let deterministic = copy.log == again.log && copy.checkpoint == again.checkpoint;
    let reverse = desk_run(TaskKind::Reverse, 0.95, 0);
    let ok = copy.accuracy >= 0.99
        && reverse.accuracy >= 0.95
        && copy.secs <= 600.0
        && reverse.secs <= 600.0
        && copy.steps <= 20_000
        && reverse.steps <= 20_000
        && deterministic;
    check(
        ok,
        format!(
            "copy {:.4} in {} steps/{:.0} s, reverse {:.4} in {} steps/{:.0} s, rerun identical={deterministic}",
            copy.accuracy, copy.steps, copy.secs, reverse.accuracy, reverse.steps, reverse.secs
        ),
    )
}

fn softmax_stability() -> Outcome {
    let mut rng = Rng::seed(90);
    let mut rows: Vec<Vec<f64>> = vec![
        vec![1e6, -1e6, 0.0, 999_999.5],
        vec![-1e6; 7],
        vec![1e6; 5],
        vec![1e6, 1e6 - 1e-3, -1e6],
    ];
    for _ in 0..200 {
        let len = 1 + rng.below(64);
        rows.push((0..len).map(|_| rng.uniform_in(-1e6, 1e6)).collect());
    }
    let mut worst = 0.0f64;
    let mut finite = true;
    for r in &rows {
        let p = stable_softmax_rows(&Matrix::<f64>::from_rows(&[r.as_slice()]));
        finite &= p.is_finite();
        worst = worst.max((p.sum() - 1.0).abs());
    }
    check(finite && worst <= 1e-12, format!("{} rows, finite={finite}, max |sum-1|={worst:.1e}", rows.len()))
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 19,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        n_layers: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&cfg, &mut Rng::seed(100)).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.atnf");
    save_checkpoint(&path, &cfg, &params).map_err(|e| e.to_string())?;
    let (cfg2, params2) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(101);
    let mut identical = 0;
    for _ in 0..10 {
        let src: Vec<usize> = (0..2 + rng.below(10)).map(|_| 3 + rng.below(16)).collect();
        let tgt: Vec<usize> = (0..1 + rng.below(10)).map(|_| 3 + rng.below(16)).collect();
        let a = forward_batch(&[&src[..]], &[&tgt[..]], &params, &cfg, &mut Rng::seed(0), false).unwrap().0;
        let b = forward_batch(&[&src[..]], &[&tgt[..]], &params2, &cfg2, &mut Rng::seed(0), false).unwrap().0;
        if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }
    check(identical == 10, format!("{identical}/10 inputs with bit-identical logits"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("permutation equivariance", permutation_equivariance),
        ("score variance", score_variance),
        ("causality", causality),
        ("positional offset linearity", pe_linearity),
        ("learning-rate schedule", lr_schedule),
        ("complexity scaling", complexity),
        ("desk-scale training", desk_training),
        ("softmax stability", softmax_stability),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
