use std::io::Write;

use serde::Serialize;

use crate::autograd::model_backward;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::scalar::Scalar;
use crate::tasks::{payload, sample_batch, token_matches, TaskSpec};
use crate::transformer::config::ModelConfig;
use crate::transformer::model::{forward_batch, greedy_generate_batch};
use crate::transformer::params::ModelParams;

use super::config::TrainConfig;
use super::loss::cross_entropy;
use super::optim::{adam_step, clip_gradients, OptimizerState};
use super::schedule::lr;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub state: OptimizerState<T>,
    pub records: Vec<StepRecord>,
    /// Held-out accuracy at the last evaluation, if any ran.
    pub final_accuracy: Option<f64>,
}

/// Held-out pairs use a stream derived from, but disjoint with, the
/// training stream of the same task seed.
const HELD_OUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// The fixed evaluation set for `task`.
pub fn held_out_set(task: &TaskSpec, count: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    sample_batch(task, count, &mut Rng::seed(task.seed ^ HELD_OUT_SALT))
}

/// Greedy-decoding token accuracy pooled over `pairs`: matching positions
/// divided by compared positions, target payloads against generated bodies.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in pairs.chunks(64) {
        let srcs: Vec<&[usize]> = chunk.iter().map(|(s, _)| s.as_slice()).collect();
        let longest = chunk.iter().map(|(_, t)| payload(t).len()).max().unwrap_or(0);
        let outs = greedy_generate_batch(&srcs, params, cfg, longest + 2)?;
        for (out, (_, tgt)) in outs.iter().zip(chunk) {
            let (h, n) = token_matches(out, payload(tgt));
            hits += h;
            total += n;
        }
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

/// Teacher-forced split of framed targets: decoder inputs drop the final
/// EOS, prediction targets drop the leading BOS.
pub fn teacher_forcing(tgts: &[Vec<usize>]) -> (Vec<&[usize]>, Vec<usize>) {
    let inputs = tgts.iter().map(|t| &t[..t.len() - 1]).collect();
    let targets = tgts.iter().flat_map(|t| t[1..].iter().copied()).collect();
    (inputs, targets)
}

/// Trains `params` on a stream of `task` batches.
///
/// The data stream is seeded from `task.seed`, dropout from `train.seed`.
/// Each step writes one JSON object to `metrics`. A non-finite loss or
/// gradient aborts with an error naming the step.
pub fn train<T: Scalar>(
    mut params: ModelParams<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    task: &TaskSpec,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    cfg.validate()?;
    task.validate_for(model)?;
    let mut state = OptimizerState::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
    let mut data_rng = Rng::seed(task.seed);
    let mut drop_rng = Rng::seed(cfg.seed);
    let held_out = if cfg.eval_every > 0 {
        held_out_set(task, cfg.eval_examples)
    } else {
        Vec::new()
    };
    let mut records = Vec::new();
    let mut final_accuracy = None;

    for step in 1..=cfg.max_steps {
        let batch = sample_batch(task, cfg.batch_size, &mut data_rng);
        let srcs: Vec<&[usize]> = batch.iter().map(|(s, _)| s.as_slice()).collect();
        let tgts: Vec<Vec<usize>> = batch.iter().map(|(_, t)| t.clone()).collect();
        let (inputs, targets) = teacher_forcing(&tgts);

        let (logits, tape) = forward_batch(&srcs, &inputs, &params, model, &mut drop_rng, true)?;
        let (loss, dlogits) = cross_entropy(&logits, &targets, cfg.label_smoothing)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {step}", loss.as_f64())));
        }
        let mut grads = model_backward(&tape, &params, &dlogits)?;
        let grad_norm = clip_gradients(&mut grads, cfg.clip_threshold)?.as_f64();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {grad_norm} at step {step}")));
        }
        let rate = lr(step, model.d_model, cfg.warmup_steps)?;
        adam_step(&mut params, &grads, &mut state, rate, cfg.weight_decay, cfg.decoupled_decay)?;

        let due = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps);
        let accuracy = if due { Some(evaluate(&params, model, &held_out)?) } else { None };
        if accuracy.is_some() {
            final_accuracy = accuracy;
        }
        let record = StepRecord {
            step,
            lr: rate,
            loss: loss.as_f64(),
            grad_norm,
            clipped_grad_norm: grads.global_norm().as_f64(),
            accuracy,
        };
        if let Some(out) = metrics.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        records.push(record);
        if cfg.target_accuracy > 0.0 && accuracy.is_some_and(|a| a >= cfg.target_accuracy) {
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        state,
        records,
        final_accuracy,
    })
}
