use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, matmul_tn, Matrix};
use crate::scalar::Scalar;
use crate::training::regularization::backward_opt;
use crate::transformer::config::{EmbedScale, ModelConfig, NormPlacement};
use crate::transformer::model::{EmbedTape, ForwardTape, SubTape};
use crate::transformer::params::{LayerNormParams, ModelParams};

use super::ops::{ffn_backward_acc, ln_backward, mha_backward};

/// Gradient tree with the same names and shapes as [`ModelParams`].
pub type Gradients<T> = ModelParams<T>;

/// Reverse pass through a residual sub-layer. `f_back` maps the gradient at
/// the sub-layer output to the gradient at its input.
fn sublayer_backward<T: Scalar>(
    upstream: Matrix<T>,
    tape: &SubTape<T>,
    ln: &LayerNormParams<T>,
    ln_grad: &mut LayerNormParams<T>,
    cfg: &ModelConfig,
    f_back: impl FnOnce(Matrix<T>) -> Result<Matrix<T>>,
) -> Result<Matrix<T>> {
    match cfg.norm_placement {
        NormPlacement::PostNorm => {
            // y = LN(x + drop(f(x)))
            let g_sum = ln_backward(&upstream, &tape.ln, &ln.gamma, ln_grad);
            let g_f = backward_opt(g_sum.clone(), tape.drop_mask.as_ref(), cfg.dropout_p);
            let mut g_x = f_back(g_f)?;
            g_x.add_assign(&g_sum)?;
            Ok(g_x)
        }
        NormPlacement::PreNorm => {
            // y = x + drop(f(LN(x)))
            let g_f = backward_opt(upstream.clone(), tape.drop_mask.as_ref(), cfg.dropout_p);
            let g_norm = f_back(g_f)?;
            let mut g_x = ln_backward(&g_norm, &tape.ln, &ln.gamma, ln_grad);
            g_x.add_assign(&upstream)?;
            Ok(g_x)
        }
    }
}

fn embed_backward<T: Scalar>(upstream: Matrix<T>, tape: &EmbedTape<T>, cfg: &ModelConfig, grads: &mut Gradients<T>) {
    let g = backward_opt(upstream, tape.drop_mask.as_ref(), cfg.dropout_p);
    let scale = match cfg.embed_scale {
        EmbedScale::One => T::one(),
        EmbedScale::SqrtDModel => T::lit((cfg.d_model as f64).sqrt()),
    };
    for (r, (&tok, &pos)) in tape.tokens.iter().zip(&tape.positions).enumerate() {
        let gr = g.row(r);
        for (o, &v) in grads.token_embedding.row_mut(tok).iter_mut().zip(gr) {
            *o += scale * v;
        }
        if let Some(pe) = grads.learned_pe.as_mut() {
            for (o, &v) in pe.row_mut(pos).iter_mut().zip(gr) {
                *o += v;
            }
        }
    }
}

fn check_tape<T: Scalar>(tape: &ForwardTape<T>, params: &ModelParams<T>, dlogits: &Matrix<T>) -> Result<()> {
    if tape.generation != params.generation() {
        return Err(Error::TapeMismatch(format!(
            "tape recorded against parameter generation {}, parameters are at {}",
            tape.generation,
            params.generation()
        )));
    }
    let rows = tape.dec_out.rows();
    if dlogits.shape() != (rows, params.output_projection.cols()) {
        return Err(Error::TapeMismatch(format!(
            "logit gradient {:?} for {rows} target rows over a vocabulary of {}",
            dlogits.shape(),
            params.output_projection.cols()
        )));
    }
    if tape.encoder.len() != params.encoder.len() || tape.decoder.len() != params.decoder.len() {
        return Err(Error::TapeMismatch("layer counts differ".into()));
    }
    Ok(())
}

/// Reverse pass of [`crate::transformer::forward_batch`].
///
/// `dlogits` is the loss gradient at the stacked logits. Returns gradients
/// for every parameter; contributions from residual branches, from every
/// decoder layer reading the encoder memory, and from repeated tokens all
/// accumulate additively.
pub fn model_backward<T: Scalar>(
    tape: &ForwardTape<T>,
    params: &ModelParams<T>,
    dlogits: &Matrix<T>,
) -> Result<Gradients<T>> {
    check_tape(tape, params, dlogits)?;
    let cfg = &tape.config;
    let mut grads = params.zeros_like();

    grads.output_projection = matmul_tn(&tape.dec_out, dlogits)?;
    let mut g = matmul_nt(dlogits, &params.output_projection)?;
    if let (Some(cache), Some(ln), Some(ln_grad)) = (
        &tape.decoder_final,
        &params.decoder_final_ln,
        grads.decoder_final_ln.as_mut(),
    ) {
        g = ln_backward(&g, cache, &ln.gamma, ln_grad);
    }

    let src_rows = tape.src_embed.tokens.len();
    let mut g_memory = Matrix::zeros(src_rows, cfg.d_model);
    for ((lt, lp), lg) in tape.decoder.iter().zip(&params.decoder).zip(grads.decoder.iter_mut()).rev() {
        let act = cfg.activation;
        let ffn_grad = &mut lg.ffn;
        g = sublayer_backward(g, &lt.ffn_sub, &lp.ln3, &mut lg.ln3, cfg, |up| {
            ffn_backward_acc(&lt.ffn, &lp.ffn, act, 0.0, &up, ffn_grad)
        })?;
        let cross_grad = &mut lg.cross_attn;
        let g_mem = &mut g_memory;
        g = sublayer_backward(g, &lt.cross_sub, &lp.ln2, &mut lg.ln2, cfg, |up| {
            let (gq, gk, gv) = mha_backward(&lt.cross_attn, &lp.cross_attn, &up, cross_grad)?;
            g_mem.add_assign(&gk)?;
            g_mem.add_assign(&gv)?;
            Ok(gq)
        })?;
        let self_grad = &mut lg.self_attn;
        g = sublayer_backward(g, &lt.self_sub, &lp.ln1, &mut lg.ln1, cfg, |up| {
            let (mut gq, gk, gv) = mha_backward(&lt.self_attn, &lp.self_attn, &up, self_grad)?;
            gq.add_assign(&gk)?;
            gq.add_assign(&gv)?;
            Ok(gq)
        })?;
    }
    embed_backward(g, &tape.tgt_embed, cfg, &mut grads);

    let mut g = g_memory;
    if let (Some(cache), Some(ln), Some(ln_grad)) = (
        &tape.encoder_final,
        &params.encoder_final_ln,
        grads.encoder_final_ln.as_mut(),
    ) {
        g = ln_backward(&g, cache, &ln.gamma, ln_grad);
    }
    for ((lt, lp), lg) in tape.encoder.iter().zip(&params.encoder).zip(grads.encoder.iter_mut()).rev() {
        let act = cfg.activation;
        let ffn_grad = &mut lg.ffn;
        g = sublayer_backward(g, &lt.ffn_sub, &lp.ln2, &mut lg.ln2, cfg, |up| {
            ffn_backward_acc(&lt.ffn, &lp.ffn, act, 0.0, &up, ffn_grad)
        })?;
        let attn_grad = &mut lg.self_attn;
        g = sublayer_backward(g, &lt.attn_sub, &lp.ln1, &mut lg.ln1, cfg, |up| {
            let (mut gq, gk, gv) = mha_backward(&lt.attn, &lp.self_attn, &up, attn_grad)?;
            gq.add_assign(&gk)?;
            gq.add_assign(&gv)?;
            Ok(gq)
        })?;
    }
    embed_backward(g, &tape.src_embed, cfg, &mut grads);
    Ok(grads)
}
