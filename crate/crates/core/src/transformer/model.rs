//! Full encoder-decoder forward pass.
//!
//! Batches are stacked row-wise: every source sequence becomes a contiguous
//! block of rows in one matrix and every target sequence likewise, so each
//! projection and feed-forward product runs as a single large GEMM while
//! attention stays confined to its own [`Segment`].

use crate::attention::Mask;
use crate::error::{invalid, Error, Result};
use crate::multihead::{mha_forward_cached, MhaCache, MhaParams, Segment};
use crate::numerics::{matmul, Matrix, Rng};
use crate::scalar::Scalar;
use crate::training::regularization::DropoutCtx;
use crate::transformer::config::{EmbedScale, ModelConfig, NormPlacement, PeMode, BOS, EOS};
use crate::transformer::layers::{ffn_rows_cached, layer_norm_rows_cached, FfnCache, LnCache};
use crate::transformer::params::{LayerNormParams, ModelParams};
use crate::transformer::pe::sinusoidal_pe;

/// Embedding lookup record.
#[derive(Debug, Clone)]
pub(crate) struct EmbedTape<T> {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub drop_mask: Option<Matrix<T>>,
}

/// One residual sub-layer: its norm statistics and output dropout mask.
#[derive(Debug, Clone)]
pub(crate) struct SubTape<T> {
    pub ln: LnCache<T>,
    pub drop_mask: Option<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayerTape<T> {
    pub attn: MhaCache<T>,
    pub attn_sub: SubTape<T>,
    pub ffn: FfnCache<T>,
    pub ffn_sub: SubTape<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayerTape<T> {
    pub self_attn: MhaCache<T>,
    pub self_sub: SubTape<T>,
    pub cross_attn: MhaCache<T>,
    pub cross_sub: SubTape<T>,
    pub ffn: FfnCache<T>,
    pub ffn_sub: SubTape<T>,
}

/// Activations recorded by [`forward_batch`] for the backward pass.
///
/// A tape is tied to the parameter generation it was recorded against and
/// is rejected by the backward pass once those parameters change.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    pub(crate) generation: u64,
    pub(crate) config: ModelConfig,
    pub(crate) tgt_segs: Vec<Segment>,
    pub(crate) src_embed: EmbedTape<T>,
    pub(crate) tgt_embed: EmbedTape<T>,
    pub(crate) encoder: Vec<EncoderLayerTape<T>>,
    pub(crate) encoder_final: Option<LnCache<T>>,
    pub(crate) decoder: Vec<DecoderLayerTape<T>>,
    pub(crate) decoder_final: Option<LnCache<T>>,
    /// Input of the output projection.
    pub(crate) dec_out: Matrix<T>,
}

impl<T> ForwardTape<T> {
    /// Row ranges of each target sequence inside the stacked logits.
    pub fn target_segments(&self) -> &[Segment] {
        &self.tgt_segs
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

fn embed<T: Scalar>(
    seqs: &[&[usize]],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ctx: &mut DropoutCtx<'_>,
) -> Result<(Matrix<T>, Vec<Segment>, EmbedTape<T>)> {
    let d = cfg.d_model;
    let mut longest = 0;
    for s in seqs {
        if s.is_empty() {
            return Err(invalid("sequences must contain at least one token"));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        if cfg.pe_mode == PeMode::Learned && s.len() > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: cfg.max_len,
            });
        }
        longest = longest.max(s.len());
    }
    if seqs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let sinusoid;
    let pe = match (&params.learned_pe, cfg.pe_mode) {
        (Some(table), PeMode::Learned) => table,
        (None, PeMode::Sinusoidal) => {
            sinusoid = sinusoidal_pe::<T>(longest, d)?;
            &sinusoid
        }
        _ => return Err(invalid("positional-encoding mode disagrees with the parameter tree")),
    };
    let scale = match cfg.embed_scale {
        EmbedScale::One => T::one(),
        EmbedScale::SqrtDModel => T::lit((d as f64).sqrt()),
    };
    let segs = Segment::from_lengths(seqs.iter().map(|s| s.len()));
    let tokens: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (r, (&tok, &pos)) in tokens.iter().zip(&positions).enumerate() {
        let e = params.token_embedding.row(tok);
        let p = pe.row(pos);
        for ((o, &ev), &pv) in x.row_mut(r).iter_mut().zip(e).zip(p) {
            *o = scale * ev + pv;
        }
    }
    let drop_mask = ctx.apply(&mut x, cfg.dropout_p);
    Ok((
        x,
        segs,
        EmbedTape {
            tokens,
            positions,
            drop_mask,
        },
    ))
}

/// Runs `f` inside a residual wrapper and records what backward needs.
fn residual<T: Scalar, C>(
    x: &Matrix<T>,
    ln: &LayerNormParams<T>,
    cfg: &ModelConfig,
    ctx: &mut DropoutCtx<'_>,
    f: impl FnOnce(&Matrix<T>, &mut DropoutCtx<'_>) -> Result<(Matrix<T>, C)>,
) -> Result<(Matrix<T>, C, SubTape<T>)> {
    match cfg.norm_placement {
        NormPlacement::PostNorm => {
            let (mut y, cache) = f(x, ctx)?;
            let drop_mask = ctx.apply(&mut y, cfg.dropout_p);
            y.add_assign(x)?;
            let (out, ln_cache) = layer_norm_rows_cached(&y, ln, cfg.ln_eps)?;
            Ok((out, cache, SubTape { ln: ln_cache, drop_mask }))
        }
        NormPlacement::PreNorm => {
            let (normed, ln_cache) = layer_norm_rows_cached(x, ln, cfg.ln_eps)?;
            let (mut y, cache) = f(&normed, ctx)?;
            let drop_mask = ctx.apply(&mut y, cfg.dropout_p);
            y.add_assign(x)?;
            Ok((y, cache, SubTape { ln: ln_cache, drop_mask }))
        }
    }
}

fn attend<'a, T: Scalar>(
    p: &'a MhaParams<T>,
    kv: Option<&'a Matrix<T>>,
    q_segs: &'a [Segment],
    kv_segs: &'a [Segment],
    mask: &'a Mask,
    attn_dropout: f64,
) -> impl FnOnce(&Matrix<T>, &mut DropoutCtx<'_>) -> Result<(Matrix<T>, MhaCache<T>)> + 'a {
    move |x, ctx| {
        let kv = kv.unwrap_or(x);
        mha_forward_cached(x, kv, kv, p, q_segs, kv_segs, mask, attn_dropout, ctx)
    }
}

fn check_params<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    if params.token_embedding.shape() != (cfg.vocab_size, d)
        || params.output_projection.shape() != (d, cfg.vocab_size)
        || params.encoder.len() != cfg.n_layers
        || params.decoder.len() != cfg.n_layers
    {
        return Err(invalid("parameter tree does not match the model configuration"));
    }
    Ok(())
}

fn encoder_stack<T: Scalar>(
    src: &[&[usize]],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ctx: &mut DropoutCtx<'_>,
) -> Result<(Matrix<T>, Vec<Segment>, EmbedTape<T>, Vec<EncoderLayerTape<T>>, Option<LnCache<T>>)> {
    let (mut x, segs, embed_tape) = embed(src, params, cfg, ctx)?;
    let mut layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let f = attend(&layer.self_attn, None, &segs, &segs, &Mask::None, cfg.attn_dropout_p);
        let (h, attn, attn_sub) = residual(&x, &layer.ln1, cfg, ctx, f)?;
        let act = cfg.activation;
        let (out, ffn, ffn_sub) = residual(&h, &layer.ln2, cfg, ctx, |m, c| ffn_rows_cached(m, &layer.ffn, act, 0.0, c))?;
        x = out;
        layers.push(EncoderLayerTape {
            attn,
            attn_sub,
            ffn,
            ffn_sub,
        });
    }
    let final_ln = match &params.encoder_final_ln {
        Some(ln) => {
            let (out, cache) = layer_norm_rows_cached(&x, ln, cfg.ln_eps)?;
            x = out;
            Some(cache)
        }
        None => None,
    };
    Ok((x, segs, embed_tape, layers, final_ln))
}

type DecoderOut<T> = (Matrix<T>, Vec<Segment>, EmbedTape<T>, Vec<DecoderLayerTape<T>>, Option<LnCache<T>>, Matrix<T>);

fn decoder_stack<T: Scalar>(
    tgt: &[&[usize]],
    memory: &Matrix<T>,
    mem_segs: &[Segment],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ctx: &mut DropoutCtx<'_>,
) -> Result<DecoderOut<T>> {
    if memory.cols() != cfg.d_model {
        return Err(Error::Shape {
            op: "decode (memory width vs d_model)",
            lhs: memory.shape(),
            rhs: (memory.rows(), cfg.d_model),
        });
    }
    if tgt.len() != mem_segs.len() {
        return Err(invalid(format!(
            "{} target sequences for {} memory blocks",
            tgt.len(),
            mem_segs.len()
        )));
    }
    let (mut x, segs, embed_tape) = embed(tgt, params, cfg, ctx)?;
    let mut layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let f = attend(&layer.self_attn, None, &segs, &segs, &Mask::Causal, cfg.attn_dropout_p);
        let (h1, self_attn, self_sub) = residual(&x, &layer.ln1, cfg, ctx, f)?;
        let f = attend(&layer.cross_attn, Some(memory), &segs, mem_segs, &Mask::None, cfg.attn_dropout_p);
        let (h2, cross_attn, cross_sub) = residual(&h1, &layer.ln2, cfg, ctx, f)?;
        let act = cfg.activation;
        let (out, ffn, ffn_sub) = residual(&h2, &layer.ln3, cfg, ctx, |m, c| ffn_rows_cached(m, &layer.ffn, act, 0.0, c))?;
        x = out;
        layers.push(DecoderLayerTape {
            self_attn,
            self_sub,
            cross_attn,
            cross_sub,
            ffn,
            ffn_sub,
        });
    }
    let final_ln = match &params.decoder_final_ln {
        Some(ln) => {
            let (out, cache) = layer_norm_rows_cached(&x, ln, cfg.ln_eps)?;
            x = out;
            Some(cache)
        }
        None => None,
    };
    let logits = matmul(&x, &params.output_projection)?;
    Ok((logits, segs, embed_tape, layers, final_ln, x))
}

/// Encodes a batch of source sequences and decodes the matching
/// teacher-forced target inputs. Returns stacked logits, one row per target
/// token, and the tape for [`crate::autograd::model_backward`].
pub fn forward_batch<T: Scalar>(
    src: &[&[usize]],
    tgt: &[&[usize]],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<(Matrix<T>, ForwardTape<T>)> {
    check_params(params, cfg)?;
    let mut ctx = DropoutCtx { rng, train: train_mode };
    let (memory, src_segs, src_embed, encoder, encoder_final) = encoder_stack(src, params, cfg, &mut ctx)?;
    let (logits, tgt_segs, tgt_embed, decoder, decoder_final, dec_out) =
        decoder_stack(tgt, &memory, &src_segs, params, cfg, &mut ctx)?;
    let tape = ForwardTape {
        generation: params.generation(),
        config: cfg.clone(),
        tgt_segs,
        src_embed,
        tgt_embed,
        encoder,
        encoder_final,
        decoder,
        decoder_final,
        dec_out,
    };
    Ok((logits, tape))
}

/// Softmax weights of every attention block for one source and target
/// prefix in evaluation mode, indexed `[layer][head]`.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    pub encoder_self: Vec<Vec<Matrix<T>>>,
    pub decoder_self: Vec<Vec<Matrix<T>>>,
    pub decoder_cross: Vec<Vec<Matrix<T>>>,
}

/// Runs one evaluation-mode forward pass and collects [`AttentionMaps`].
pub fn attention_maps<T: Scalar>(
    src: &[usize],
    tgt: &[usize],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<AttentionMaps<T>> {
    let (_, tape) = forward_batch(&[src], &[tgt], params, cfg, &mut Rng::seed(0), false)?;
    let heads = |c: &MhaCache<T>| c.heads.iter().map(|h| h.weights.clone()).collect::<Vec<_>>();
    Ok(AttentionMaps {
        encoder_self: tape.encoder.iter().map(|l| heads(&l.attn)).collect(),
        decoder_self: tape.decoder.iter().map(|l| heads(&l.self_attn)).collect(),
        decoder_cross: tape.decoder.iter().map(|l| heads(&l.cross_attn)).collect(),
    })
}

/// Contextual representations (`n x d_model`) of one source sequence.
pub fn encode<T: Scalar>(
    src: &[usize],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<Matrix<T>> {
    check_params(params, cfg)?;
    let mut ctx = DropoutCtx { rng, train: train_mode };
    Ok(encoder_stack(&[src], params, cfg, &mut ctx)?.0)
}

/// Pre-softmax logits (`m x vocab`) for one target prefix attending to an
/// encoded `memory`. Decoder self-attention is causal.
pub fn decode<T: Scalar>(
    tgt: &[usize],
    memory: &Matrix<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<Matrix<T>> {
    check_params(params, cfg)?;
    if memory.rows() == 0 {
        return Err(invalid("memory has no rows"));
    }
    let mut ctx = DropoutCtx { rng, train: train_mode };
    Ok(decoder_stack(&[tgt], memory, &Segment::whole(memory.rows()), params, cfg, &mut ctx)?.0)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_steps` tokens. The returned
/// body excludes BOS and EOS.
pub fn greedy_generate<T: Scalar>(
    src: &[usize],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    max_steps: usize,
) -> Result<Vec<usize>> {
    Ok(greedy_generate_batch(&[src], params, cfg, max_steps)?.remove(0))
}

/// [`greedy_generate`] over many sources at once, sharing each decoder pass.
pub fn greedy_generate_batch<T: Scalar>(
    srcs: &[&[usize]],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    max_steps: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_steps == 0 {
        return Err(invalid("max_steps must be at least 1"));
    }
    check_params(params, cfg)?;
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = Rng::seed(0);
    let mut ctx = DropoutCtx { rng: &mut rng, train: false };
    let (memory, mem_segs, ..) = encoder_stack(srcs, params, cfg, &mut ctx)?;
    // Learned positions cap the prefix length, BOS included.
    let steps = match cfg.pe_mode {
        PeMode::Learned => max_steps.min(cfg.max_len.saturating_sub(1)),
        PeMode::Sinusoidal => max_steps,
    };
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; srcs.len()];
    let mut done = vec![false; srcs.len()];
    for _ in 0..steps {
        let active: Vec<usize> = (0..srcs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let tgt: Vec<&[usize]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
        let blocks: Vec<Matrix<T>> = active
            .iter()
            .map(|&i| memory.row_block(mem_segs[i].start, mem_segs[i].len))
            .collect();
        let mem = Matrix::vstack(&blocks)?;
        let segs = Segment::from_lengths(active.iter().map(|&i| mem_segs[i].len));
        let (logits, out_segs, ..) = decoder_stack(&tgt, &mem, &segs, params, cfg, &mut ctx)?;
        for (&i, seg) in active.iter().zip(&out_segs) {
            let next = argmax(logits.row(seg.start + seg.len - 1));
            if next == EOS {
                done[i] = true;
            } else {
                prefixes[i].push(next);
            }
        }
    }
    Ok(prefixes.into_iter().map(|mut p| p.split_off(1)).collect())
}
