use crate::error::{Error, Result};
use crate::transformer::config::parse_num;

/// Optimizer, schedule and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub clip_threshold: f64,
    pub weight_decay: f64,
    /// Apply weight decay outside the adaptive update instead of adding
    /// `weight_decay * theta` to the gradient.
    pub decoupled_decay: bool,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Held-out accuracy is measured every this many steps, and after the
    /// last one. Zero disables evaluation.
    pub eval_every: u64,
    pub eval_examples: usize,
    /// Stop once held-out accuracy reaches this value. Zero never stops early.
    pub target_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 4000,
            label_smoothing: 0.1,
            clip_threshold: 1.0,
            weight_decay: 0.0,
            decoupled_decay: true,
            batch_size: 32,
            max_steps: 20_000,
            seed: 0,
            eval_every: 500,
            eval_examples: 200,
            target_accuracy: 0.0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "beta1",
        "beta2",
        "adam_eps",
        "warmup_steps",
        "label_smoothing",
        "clip_threshold",
        "weight_decay",
        "decoupled_decay",
        "batch_size",
        "max_steps",
        "seed",
        "eval_every",
        "eval_examples",
        "target_accuracy",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(cfg_err(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(cfg_err("adam_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(cfg_err("label_smoothing must lie in [0, 1)"));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(cfg_err("clip_threshold must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(cfg_err("weight_decay must be non-negative"));
        }
        if self.warmup_steps == 0 {
            return Err(cfg_err("warmup_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(cfg_err("target_accuracy must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_num(key, value)?,
            "clip_threshold" => self.clip_threshold = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "decoupled_decay" => self.decoupled_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_steps" => self.max_steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_examples" => self.eval_examples = parse_num(key, value)?,
            "target_accuracy" => self.target_accuracy = parse_num(key, value)?,
            _ => return Err(cfg_err(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}
