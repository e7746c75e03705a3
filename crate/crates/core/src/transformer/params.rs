use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::multihead::MhaParams;
use crate::numerics::{gaussian_fill, Matrix, Rng};
use crate::scalar::Scalar;
use crate::transformer::config::{ModelConfig, NormPlacement, PeMode};

/// Gain and bias of one layer normalization, each `1 x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, T::one()),
            beta: Matrix::zeros(1, d),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

/// Position-wise feed-forward weights; biases are `1 x width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w1: gaussian_fill(rng, d_model, d_ff, 0.0, 1.0 / (d_model as f64).sqrt())?,
            b1: Matrix::zeros(1, d_ff),
            w2: gaussian_fill(rng, d_ff, d_model, 0.0, 1.0 / (d_ff as f64).sqrt())?,
            b2: Matrix::zeros(1, d_model),
        })
    }

    pub fn cast<U: Scalar>(&self) -> FfnParams<U> {
        FfnParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub self_attn: MhaParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub self_attn: MhaParams<T>,
    pub cross_attn: MhaParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ln3: LayerNormParams<T>,
}

/// Every learned matrix of the encoder-decoder model.
///
/// [`ModelParams::named`] lists the matrices under unique dotted names in a
/// fixed canonical order; checkpoints, gradients and optimizer moments all
/// rely on that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Matrix<T>,
    pub learned_pe: Option<Matrix<T>>,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub encoder_final_ln: Option<LayerNormParams<T>>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub decoder_final_ln: Option<LayerNormParams<T>>,
    pub output_projection: Matrix<T>,
    /// Bumped whenever the values may have changed; forward tapes record it.
    pub(crate) generation: u64,
}

static STAMPS: AtomicU64 = AtomicU64::new(1);

/// Process-wide unique value, so two independently modified trees never
/// share a generation.
fn next_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

fn mha_names(prefix: &str) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|n| format!("{prefix}.{n}"))
}

fn ffn_names(prefix: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|n| format!("{prefix}.{n}"))
}

fn ln_names(prefix: &str) -> [String; 2] {
    ["gamma", "beta"].map(|n| format!("{prefix}.{n}"))
}

impl<T: Scalar> ModelParams<T> {
    /// Normal init with std `1 / sqrt(fan_in)`; LN gains one, biases zero.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = gaussian_fill(rng, config.vocab_size, d, 0.0, 1.0 / (d as f64).sqrt())?;
        let learned_pe = match config.pe_mode {
            PeMode::Learned => Some(gaussian_fill(rng, config.max_len, d, 0.0, 1.0 / (d as f64).sqrt())?),
            PeMode::Sinusoidal => None,
        };
        let mut encoder = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            encoder.push(EncoderLayerParams {
                self_attn: MhaParams::init(d, config.heads, rng)?,
                ffn: FfnParams::init(d, config.d_ff, rng)?,
                ln1: LayerNormParams::identity(d),
                ln2: LayerNormParams::identity(d),
            });
        }
        let mut decoder = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            decoder.push(DecoderLayerParams {
                self_attn: MhaParams::init(d, config.heads, rng)?,
                cross_attn: MhaParams::init(d, config.heads, rng)?,
                ffn: FfnParams::init(d, config.d_ff, rng)?,
                ln1: LayerNormParams::identity(d),
                ln2: LayerNormParams::identity(d),
                ln3: LayerNormParams::identity(d),
            });
        }
        let final_ln = || match config.norm_placement {
            NormPlacement::PreNorm => Some(LayerNormParams::identity(d)),
            NormPlacement::PostNorm => None,
        };
        Ok(Self {
            token_embedding,
            learned_pe,
            encoder,
            encoder_final_ln: final_ln(),
            decoder,
            decoder_final_ln: final_ln(),
            output_projection: gaussian_fill(rng, d, config.vocab_size, 0.0, 1.0 / (d as f64).sqrt())?,
            generation: next_stamp(),
        })
    }

    /// Same tree in another scalar type, under a fresh generation.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            token_embedding: self.token_embedding.cast(),
            learned_pe: self.learned_pe.as_ref().map(Matrix::cast),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    self_attn: l.self_attn.cast(),
                    ffn: l.ffn.cast(),
                    ln1: l.ln1.cast(),
                    ln2: l.ln2.cast(),
                })
                .collect(),
            encoder_final_ln: self.encoder_final_ln.as_ref().map(LayerNormParams::cast),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayerParams {
                    self_attn: l.self_attn.cast(),
                    cross_attn: l.cross_attn.cast(),
                    ffn: l.ffn.cast(),
                    ln1: l.ln1.cast(),
                    ln2: l.ln2.cast(),
                    ln3: l.ln3.cast(),
                })
                .collect(),
            decoder_final_ln: self.decoder_final_ln.as_ref().map(LayerNormParams::cast),
            output_projection: self.output_projection.cast(),
            generation: next_stamp(),
        }
    }

    /// Canonical names, in the order used by [`Self::named`].
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embedding.token".to_string()];
        if self.learned_pe.is_some() {
            names.push("embedding.position".into());
        }
        for i in 0..self.encoder.len() {
            let p = format!("encoder.{i}");
            names.extend(mha_names(&format!("{p}.self_attn")));
            names.extend(ffn_names(&format!("{p}.ffn")));
            names.extend(ln_names(&format!("{p}.ln1")));
            names.extend(ln_names(&format!("{p}.ln2")));
        }
        if self.encoder_final_ln.is_some() {
            names.extend(ln_names("encoder.final_ln"));
        }
        for i in 0..self.decoder.len() {
            let p = format!("decoder.{i}");
            names.extend(mha_names(&format!("{p}.self_attn")));
            names.extend(mha_names(&format!("{p}.cross_attn")));
            names.extend(ffn_names(&format!("{p}.ffn")));
            names.extend(ln_names(&format!("{p}.ln1")));
            names.extend(ln_names(&format!("{p}.ln2")));
            names.extend(ln_names(&format!("{p}.ln3")));
        }
        if self.decoder_final_ln.is_some() {
            names.extend(ln_names("decoder.final_ln"));
        }
        names.push("output.projection".into());
        names
    }

    /// All matrices in canonical order.
    pub fn matrices(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.token_embedding];
        out.extend(self.learned_pe.as_ref());
        for l in &self.encoder {
            let a = &l.self_attn;
            out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
            out.extend([&l.ln1.gamma, &l.ln1.beta, &l.ln2.gamma, &l.ln2.beta]);
        }
        if let Some(ln) = &self.encoder_final_ln {
            out.extend([&ln.gamma, &ln.beta]);
        }
        for l in &self.decoder {
            for a in [&l.self_attn, &l.cross_attn] {
                out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
            }
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
            out.extend([&l.ln1.gamma, &l.ln1.beta, &l.ln2.gamma, &l.ln2.beta, &l.ln3.gamma, &l.ln3.beta]);
        }
        if let Some(ln) = &self.decoder_final_ln {
            out.extend([&ln.gamma, &ln.beta]);
        }
        out.push(&self.output_projection);
        out
    }

    /// Mutable matrices in canonical order. Marks the tree as modified.
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.touch();
        let mut out = vec![&mut self.token_embedding];
        out.extend(self.learned_pe.as_mut());
        for l in &mut self.encoder {
            let a = &mut l.self_attn;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            let f = &mut l.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
            out.extend([&mut l.ln1.gamma, &mut l.ln1.beta, &mut l.ln2.gamma, &mut l.ln2.beta]);
        }
        if let Some(ln) = &mut self.encoder_final_ln {
            out.extend([&mut ln.gamma, &mut ln.beta]);
        }
        for l in &mut self.decoder {
            for a in [&mut l.self_attn, &mut l.cross_attn] {
                out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            }
            let f = &mut l.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
            out.extend([
                &mut l.ln1.gamma,
                &mut l.ln1.beta,
                &mut l.ln2.gamma,
                &mut l.ln2.beta,
                &mut l.ln3.gamma,
                &mut l.ln3.beta,
            ]);
        }
        if let Some(ln) = &mut self.decoder_final_ln {
            out.extend([&mut ln.gamma, &mut ln.beta]);
        }
        out.push(&mut self.output_projection);
        out
    }

    /// `(name, matrix)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        self.names().into_iter().zip(self.matrices()).collect()
    }

    /// Same tree shape with every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.matrices_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.matrices().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Errors unless `other` has the same names and shapes.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.named(), other.named());
        if a.len() != b.len() {
            return Err(Error::KeyMismatch(format!("{} vs {} matrices", a.len(), b.len())));
        }
        for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
            if na != nb || ma.shape() != mb.shape() {
                return Err(Error::KeyMismatch(format!("{na} {:?} vs {nb} {:?}", ma.shape(), mb.shape())));
            }
        }
        Ok(())
    }

    /// Global Frobenius norm over the concatenation of every matrix.
    pub fn global_norm(&self) -> T {
        self.matrices()
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// Stamp that changes on every mutable access through
    /// [`Self::matrices_mut`]. Code that edits the public fields directly
    /// should call [`Self::touch`] afterwards.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn touch(&mut self) {
        self.generation = next_stamp();
    }
}
