use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First payload token id; ids below are reserved.
pub const FIRST_PAYLOAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// `LN(x + Sublayer(x))`
    PostNorm,
    /// `x + Sublayer(LN(x))`
    PreNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Exact `x * Phi(x)`.
    Gelu,
    /// `x * sigmoid(beta * x)`.
    Swish { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeMode {
    Sinusoidal,
    Learned,
}

/// Multiplier applied to token embeddings before the positional term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedScale {
    One,
    SqrtDModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub norm_placement: NormPlacement,
    pub activation: Activation,
    pub pe_mode: PeMode,
    pub embed_scale: EmbedScale,
    pub dropout_p: f64,
    pub attn_dropout_p: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 19,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            n_layers: 2,
            max_len: 64,
            norm_placement: NormPlacement::PostNorm,
            activation: Activation::Relu,
            pe_mode: PeMode::Sinusoidal,
            embed_scale: EmbedScale::One,
            dropout_p: 0.1,
            attn_dropout_p: 0.0,
            ln_eps: 1e-6,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| cfg_err(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_PAYLOAD {
            return Err(cfg_err(format!("vocab_size must exceed {FIRST_PAYLOAD}")));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(cfg_err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(cfg_err("d_ff must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(cfg_err("n_layers must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(cfg_err("max_len must be at least 1"));
        }
        if self.pe_mode == PeMode::Sinusoidal && self.d_model % 2 != 0 {
            return Err(cfg_err("sinusoidal encodings need an even d_model"));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("attn_dropout_p", self.attn_dropout_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(cfg_err(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(cfg_err("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "h" | "heads" => self.heads = parse_num(key, value)?,
            "d_ff" => self.d_ff = parse_num(key, value)?,
            "n_layers" => self.n_layers = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "norm_placement" => self.norm_placement = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "pe_mode" => self.pe_mode = value.parse()?,
            "embed_scale" => self.embed_scale = value.parse()?,
            "dropout_p" => self.dropout_p = parse_num(key, value)?,
            "attn_dropout_p" => self.attn_dropout_p = parse_num(key, value)?,
            "ln_eps" => self.ln_eps = parse_num(key, value)?,
            _ => return Err(cfg_err(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 13] = [
        "vocab_size",
        "d_model",
        "heads",
        "d_ff",
        "n_layers",
        "max_len",
        "norm_placement",
        "activation",
        "pe_mode",
        "embed_scale",
        "dropout_p",
        "attn_dropout_p",
        "ln_eps",
    ];

    /// Canonical textual form, one entry per field, in [`Self::KEYS`] order.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let values = [
            self.vocab_size.to_string(),
            self.d_model.to_string(),
            self.heads.to_string(),
            self.d_ff.to_string(),
            self.n_layers.to_string(),
            self.max_len.to_string(),
            self.norm_placement.to_string(),
            self.activation.to_string(),
            self.pe_mode.to_string(),
            self.embed_scale.to_string(),
            format!("{:?}", self.dropout_p),
            format!("{:?}", self.attn_dropout_p),
            format!("{:?}", self.ln_eps),
        ];
        Self::KEYS
            .iter()
            .map(|k| k.to_string())
            .zip(values)
            .collect()
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::PostNorm => "post",
            NormPlacement::PreNorm => "pre",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "post" | "post_norm" | "PostNorm" => Ok(NormPlacement::PostNorm),
            "pre" | "pre_norm" | "PreNorm" => Ok(NormPlacement::PreNorm),
            other => Err(cfg_err(format!("unknown norm placement {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::Gelu => f.write_str("gelu"),
            Activation::Swish { beta } => write!(f, "swish:{beta:?}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "swish" => Ok(Activation::Swish { beta: 1.0 }),
            _ => match s.strip_prefix("swish:") {
                Some(beta) => Ok(Activation::Swish {
                    beta: parse_num("activation", beta)?,
                }),
                None => Err(cfg_err(format!("unknown activation {s:?}"))),
            },
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::Sinusoidal => "sinusoidal",
            PeMode::Learned => "learned",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sinusoidal" => Ok(PeMode::Sinusoidal),
            "learned" => Ok(PeMode::Learned),
            other => Err(cfg_err(format!("unknown pe_mode {other:?}"))),
        }
    }
}

impl fmt::Display for EmbedScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedScale::One => "1",
            EmbedScale::SqrtDModel => "sqrt_d",
        })
    }
}

impl FromStr for EmbedScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "one" => Ok(EmbedScale::One),
            "sqrt_d" => Ok(EmbedScale::SqrtDModel),
            other => Err(cfg_err(format!("unknown embed_scale {other:?}"))),
        }
    }
}
