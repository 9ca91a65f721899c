//! Encoder forward pass and its exact reverse-mode gradient.
//!
//! Only the unpadded prefix of a sequence is computed. Because the attention
//! mask is a prefix of ones, this is the same as giving every padded key an
//! additive `-inf` score: padded keys get weight exactly zero and nothing
//! reads the content of padded positions.

use super::params::{LayerParams, ModelConfig, Parameters};
use super::tensor::*;
use crate::error::{Error, Result};
use crate::rng::{self, domain, StreamRng};
use crate::tokenizer::EncodedInput;
use rand::Rng;

/// Which heads to evaluate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Heads {
    /// Positions at which to produce MLM logits.
    pub mlm_positions: Vec<usize>,
    pub nsp: bool,
    pub classification: bool,
    pub qa: bool,
}

impl Heads {
    pub fn classification() -> Self {
        Heads { classification: true, ..Default::default() }
    }

    pub fn qa() -> Self {
        Heads { qa: true, ..Default::default() }
    }

    pub fn pretraining(mlm_positions: Vec<usize>) -> Self {
        Heads { mlm_positions, nsp: true, ..Default::default() }
    }
}

/// Dropout stream for one example. `None` disables dropout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub dropout: Option<(u64, u64)>,
}

impl ForwardOptions {
    pub fn train(seed: u64, stream: u64) -> Self {
        ForwardOptions { dropout: Some((seed, stream)) }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub seq_len: usize,
    pub active_len: usize,
    /// `active_len × H`
    pub sequence_output: Vec<T>,
    /// `tanh(pooler · sequence_output[CLS])`
    pub pooled_output: Vec<T>,
    pub mlm_positions: Vec<usize>,
    /// `mlm_positions.len() × V`
    pub mlm_logits: Vec<T>,
    pub nsp_logits: Option<[T; 2]>,
    pub cls_logits: Option<[T; 2]>,
    /// Length `seq_len`; `-inf` at padded positions.
    pub qa_start_logits: Option<Vec<T>>,
    pub qa_end_logits: Option<Vec<T>>,
}

struct Dropout<T> {
    rng: Option<StreamRng>,
    keep: f64,
    scale: T,
}

impl<T: Scalar> Dropout<T> {
    fn new(config: &ModelConfig, opts: &ForwardOptions) -> Self {
        let rng = match opts.dropout {
            Some((seed, stream)) if config.dropout_prob > 0.0 => {
                Some(rng::stream(seed, domain::DROPOUT, stream))
            }
            _ => None,
        };
        let keep = 1.0 - config.dropout_prob;
        Dropout { rng, keep, scale: T::lit(1.0 / keep) }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = self.keep;
        let scale = self.scale;
        Some((0..len).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect())
    }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × n × n`, before dropout.
    probs: Vec<T>,
    probs_mask: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    norm1: NormCache<T>,
    x1: Vec<T>,
    ffn_pre: Vec<T>,
    ffn_act: Vec<T>,
    ffn_mask: Option<Vec<T>>,
    norm2: NormCache<T>,
}

struct MlmCache<T> {
    positions: Vec<usize>,
    selected: Vec<T>,
    pre: Vec<T>,
    norm: NormCache<T>,
    normed: Vec<T>,
}

/// Intermediates recorded by [`forward_example`] for [`backward`].
pub struct Cache<T> {
    n: usize,
    tokens: Vec<usize>,
    segments: Vec<usize>,
    emb_norm: NormCache<T>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    output: Vec<T>,
    pooled: Vec<T>,
    cls_mask: Option<Vec<T>>,
    mlm: Option<MlmCache<T>>,
}

impl<T: Scalar> Cache<T> {
    /// Attention weights of one layer, `heads × n × n` over unpadded positions.
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }

    pub fn active_len(&self) -> usize {
        self.n
    }
}

pub(crate) fn check_input(config: &ModelConfig, input: &EncodedInput) -> Result<()> {
    let len = input.len();
    if input.segment_ids.len() != len || input.attention_mask.len() != len {
        return Err(Error::InvalidInput("input arrays differ in length".into()));
    }
    let active = input.active_len();
    if input.attention_mask.iter().enumerate().any(|(i, &m)| m != u32::from(i < active)) {
        return Err(Error::InvalidInput("attention mask is not a prefix of ones".into()));
    }
    if let Some(&s) = input.segment_ids.iter().find(|&&s| s as usize >= config.num_segments) {
        return Err(Error::InvalidInput(format!("segment id {s}")));
    }
    if len > config.max_positions {
        return Err(Error::SequenceTooLong { len: input.len(), max: config.max_positions });
    }
    for &id in &input.token_ids {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab_size: config.vocab_size });
        }
    }
    if active == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    Ok(())
}

fn attention_forward<T: Scalar>(
    layer: &LayerParams<T>,
    config: &ModelConfig,
    x: &[T],
    n: usize,
    dropout: &mut Dropout<T>,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Option<Vec<T>>, Vec<T>) {
    let hsz = config.hidden_size;
    let heads = config.num_heads;
    let dh = config.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let q = linear(x, &layer.query_w, &layer.query_b, n);
    let k = linear(x, &layer.key_w, &layer.key_b, n);
    let v = linear(x, &layer.value_w, &layer.value_b, n);

    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            let qi = &q[i * hsz + h * dh..i * hsz + (h + 1) * dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * hsz + h * dh..j * hsz + (h + 1) * dh]) * scale;
            }
            softmax_in_place(row);
        }
    }
    let probs_mask = dropout.mask(probs.len());
    let mut ctx = vec![T::zero(); n * hsz];
    for h in 0..heads {
        for i in 0..n {
            let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let out = &mut ctx[i * hsz + h * dh..i * hsz + (h + 1) * dh];
            for j in 0..n {
                let mut p = row[j];
                if let Some(m) = &probs_mask {
                    p *= m[(h * n + i) * n + j];
                }
                if p != T::zero() {
                    axpy(p, &v[j * hsz + h * dh..j * hsz + (h + 1) * dh], out);
                }
            }
        }
    }
    (q, k, v, probs, probs_mask, ctx)
}

/// Runs the encoder over one input and the requested heads.
pub fn forward_example<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    input: &EncodedInput,
    heads: &Heads,
    opts: &ForwardOptions,
) -> Result<(ForwardOutput<T>, Cache<T>)> {
    check_input(config, input)?;
    let n = input.active_len();
    let hsz = config.hidden_size;
    let eps = T::lit(config.layer_norm_eps);
    for &p in &heads.mlm_positions {
        if p >= n {
            return Err(Error::IndexOutOfRange(format!("MLM position {p} outside {n} unpadded positions")));
        }
    }
    let mut dropout = Dropout::<T>::new(config, opts);

    let tokens: Vec<usize> = input.token_ids[..n].iter().map(|&t| t as usize).collect();
    let segments: Vec<usize> = input.segment_ids[..n].iter().map(|&s| s as usize).collect();
    let mut emb = vec![T::zero(); n * hsz];
    for i in 0..n {
        let row = &mut emb[i * hsz..(i + 1) * hsz];
        let (w, p, s) = (params.word_emb.row(tokens[i]), params.pos_emb.row(i), params.seg_emb.row(segments[i]));
        for j in 0..hsz {
            row[j] = w[j] + p[j] + s[j];
        }
    }
    let (mut x, emb_norm) = layer_norm(&emb, &params.emb_norm_g, &params.emb_norm_b, hsz, eps);
    let emb_mask = dropout.mask(x.len());
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(config.num_layers);
    for layer in &params.layers {
        let (q, k, v, probs, probs_mask, ctx) = attention_forward(layer, config, &x, n, &mut dropout);
        let mut attn = linear(&ctx, &layer.attn_out_w, &layer.attn_out_b, n);
        let attn_mask = dropout.mask(attn.len());
        apply_mask(&mut attn, &attn_mask);
        for (a, &xi) in attn.iter_mut().zip(&x) {
            *a += xi;
        }
        let (x1, norm1) = layer_norm(&attn, &layer.attn_norm_g, &layer.attn_norm_b, hsz, eps);

        let ffn_pre = linear(&x1, &layer.ffn_in_w, &layer.ffn_in_b, n);
        let ffn_act: Vec<T> = ffn_pre.iter().map(|&z| gelu(z)).collect();
        let mut ffn = linear(&ffn_act, &layer.ffn_out_w, &layer.ffn_out_b, n);
        let ffn_mask = dropout.mask(ffn.len());
        apply_mask(&mut ffn, &ffn_mask);
        for (f, &xi) in ffn.iter_mut().zip(&x1) {
            *f += xi;
        }
        let (x2, norm2) = layer_norm(&ffn, &layer.ffn_norm_g, &layer.ffn_norm_b, hsz, eps);
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, x2),
            q,
            k,
            v,
            probs,
            probs_mask,
            ctx,
            attn_mask,
            norm1,
            x1,
            ffn_pre,
            ffn_act,
            ffn_mask,
            norm2,
        });
    }
    let output = x;

    let pooled: Vec<T> = linear(&output[..hsz], &params.pooler_w, &params.pooler_b, 1)
        .into_iter()
        .map(|z| z.tanh())
        .collect();

    let nsp_logits = heads.nsp.then(|| {
        let l = linear(&pooled, &params.nsp_w, &params.nsp_b, 1);
        [l[0], l[1]]
    });

    let mut cls_mask = None;
    let cls_logits = if heads.classification {
        cls_mask = dropout.mask(hsz);
        let mut p = pooled.clone();
        apply_mask(&mut p, &cls_mask);
        let l = linear(&p, &params.cls_w, &params.cls_b, 1);
        Some([l[0], l[1]])
    } else {
        None
    };

    let (qa_start_logits, qa_end_logits) = if heads.qa {
        let l = linear(&output, &params.qa_w, &params.qa_b, n);
        let mut start = vec![T::neg_infinity(); input.len()];
        let mut end = vec![T::neg_infinity(); input.len()];
        for i in 0..n {
            start[i] = l[2 * i];
            end[i] = l[2 * i + 1];
        }
        (Some(start), Some(end))
    } else {
        (None, None)
    };

    let (mlm_logits, mlm) = if heads.mlm_positions.is_empty() {
        (Vec::new(), None)
    } else {
        let positions = heads.mlm_positions.clone();
        let kk = positions.len();
        let mut selected = Vec::with_capacity(kk * hsz);
        for &p in &positions {
            selected.extend_from_slice(&output[p * hsz..(p + 1) * hsz]);
        }
        let pre = linear(&selected, &params.mlm_transform_w, &params.mlm_transform_b, kk);
        let act: Vec<T> = pre.iter().map(|&z| gelu(z)).collect();
        let (normed, norm) = layer_norm(&act, &params.mlm_norm_g, &params.mlm_norm_b, hsz, eps);
        let vsz = config.vocab_size;
        let mut logits = Vec::with_capacity(kk * vsz);
        for _ in 0..kk {
            logits.extend_from_slice(&params.mlm_bias.data);
        }
        matmul_nt_acc(&normed, &params.word_emb.data, kk, hsz, vsz, &mut logits);
        (logits, Some(MlmCache { positions, selected, pre, norm, normed }))
    };

    let out = ForwardOutput {
        seq_len: input.len(),
        active_len: n,
        sequence_output: output.clone(),
        pooled_output: pooled.clone(),
        mlm_positions: heads.mlm_positions.clone(),
        mlm_logits,
        nsp_logits,
        cls_logits,
        qa_start_logits,
        qa_end_logits,
    };
    let cache = Cache {
        n,
        tokens,
        segments,
        emb_norm,
        emb_mask,
        layers,
        output,
        pooled,
        cls_mask,
        mlm,
    };
    Ok((out, cache))
}

/// Gradients of the loss with respect to the head outputs of one example.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    /// Same layout as [`ForwardOutput::mlm_logits`].
    pub mlm_logits: Vec<T>,
    pub nsp_logits: Option<[T; 2]>,
    pub cls_logits: Option<[T; 2]>,
    /// Indexed by position; entries past the unpadded prefix are ignored.
    pub qa_start_logits: Option<Vec<T>>,
    pub qa_end_logits: Option<Vec<T>>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reverse pass: accumulates `∂loss/∂θ` for every parameter into `grads`.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    cache: &Cache<T>,
    out_grads: &OutputGrads<T>,
    grads: &mut Parameters<T>,
) {
    let n = cache.n;
    let hsz = config.hidden_size;
    let mut d_out = vec![T::zero(); n * hsz];

    if let (Some(mlm), false) = (&cache.mlm, out_grads.mlm_logits.is_empty()) {
        let kk = mlm.positions.len();
        let vsz = config.vocab_size;
        let dl = &out_grads.mlm_logits;
        for r in 0..kk {
            add_into(&mut grads.mlm_bias.data, &dl[r * vsz..(r + 1) * vsz]);
        }
        matmul_tn_acc(dl, &mlm.normed, kk, vsz, hsz, &mut grads.word_emb.data);
        let mut d_normed = vec![T::zero(); kk * hsz];
        matmul_acc(dl, &params.word_emb.data, kk, vsz, hsz, &mut d_normed);
        let mut d_act =
            layer_norm_backward(&d_normed, &mlm.norm, &params.mlm_norm_g, &mut grads.mlm_norm_g, &mut grads.mlm_norm_b, hsz);
        for (d, &z) in d_act.iter_mut().zip(&mlm.pre) {
            *d *= gelu_grad(z);
        }
        let d_sel = linear_backward(
            &mlm.selected,
            &d_act,
            &params.mlm_transform_w,
            &mut grads.mlm_transform_w,
            &mut grads.mlm_transform_b,
            kk,
        );
        for (r, &p) in mlm.positions.iter().enumerate() {
            add_into(&mut d_out[p * hsz..(p + 1) * hsz], &d_sel[r * hsz..(r + 1) * hsz]);
        }
    }

    let mut d_pooled = vec![T::zero(); hsz];
    let mut pooled_used = false;
    if let Some(d) = out_grads.nsp_logits {
        let dx = linear_backward(&cache.pooled, &d, &params.nsp_w, &mut grads.nsp_w, &mut grads.nsp_b, 1);
        add_into(&mut d_pooled, &dx);
        pooled_used = true;
    }
    if let Some(d) = out_grads.cls_logits {
        let mut p = cache.pooled.clone();
        apply_mask(&mut p, &cache.cls_mask);
        let mut dx = linear_backward(&p, &d, &params.cls_w, &mut grads.cls_w, &mut grads.cls_b, 1);
        apply_mask(&mut dx, &cache.cls_mask);
        add_into(&mut d_pooled, &dx);
        pooled_used = true;
    }
    if pooled_used {
        let dz: Vec<T> = d_pooled
            .iter()
            .zip(&cache.pooled)
            .map(|(&d, &p)| d * (T::one() - p * p))
            .collect();
        let dx = linear_backward(&cache.output[..hsz], &dz, &params.pooler_w, &mut grads.pooler_w, &mut grads.pooler_b, 1);
        add_into(&mut d_out[..hsz], &dx);
    }

    if out_grads.qa_start_logits.is_some() || out_grads.qa_end_logits.is_some() {
        let mut dl = vec![T::zero(); 2 * n];
        if let Some(ds) = &out_grads.qa_start_logits {
            for i in 0..n {
                dl[2 * i] = ds[i];
            }
        }
        if let Some(de) = &out_grads.qa_end_logits {
            for i in 0..n {
                dl[2 * i + 1] = de[i];
            }
        }
        let dx = linear_backward(&cache.output, &dl, &params.qa_w, &mut grads.qa_w, &mut grads.qa_b, n);
        add_into(&mut d_out, &dx);
    }

    let mut dx = d_out;
    for (l, (lc, lp)) in cache.layers.iter().zip(&params.layers).enumerate().rev() {
        let lg = &mut grads.layers[l];
        // x2 = norm(x1 + dropout(ffn(x1)))
        let d_r2 = layer_norm_backward(&dx, &lc.norm2, &lp.ffn_norm_g, &mut lg.ffn_norm_g, &mut lg.ffn_norm_b, hsz);
        let mut d_ffn = d_r2.clone();
        apply_mask(&mut d_ffn, &lc.ffn_mask);
        let mut d_act = linear_backward(&lc.ffn_act, &d_ffn, &lp.ffn_out_w, &mut lg.ffn_out_w, &mut lg.ffn_out_b, n);
        for (d, &z) in d_act.iter_mut().zip(&lc.ffn_pre) {
            *d *= gelu_grad(z);
        }
        let mut d_x1 = linear_backward(&lc.x1, &d_act, &lp.ffn_in_w, &mut lg.ffn_in_w, &mut lg.ffn_in_b, n);
        add_into(&mut d_x1, &d_r2);

        // x1 = norm(x + dropout(attn(x)))
        let d_r1 = layer_norm_backward(&d_x1, &lc.norm1, &lp.attn_norm_g, &mut lg.attn_norm_g, &mut lg.attn_norm_b, hsz);
        let mut d_attn = d_r1.clone();
        apply_mask(&mut d_attn, &lc.attn_mask);
        let d_ctx = linear_backward(&lc.ctx, &d_attn, &lp.attn_out_w, &mut lg.attn_out_w, &mut lg.attn_out_b, n);

        let heads = config.num_heads;
        let dh = config.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dq = vec![T::zero(); n * hsz];
        let mut dk = vec![T::zero(); n * hsz];
        let mut dv = vec![T::zero(); n * hsz];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let base = (h * n + i) * n;
                let probs = &lc.probs[base..base + n];
                let dctx_i = &d_ctx[i * hsz + cols.start..i * hsz + cols.end];
                for j in 0..n {
                    let keep = lc.probs_mask.as_ref().map_or(T::one(), |m| m[base + j]);
                    let vj = &lc.v[j * hsz + cols.start..j * hsz + cols.end];
                    dp[j] = dot(dctx_i, vj) * keep;
                    let pd = probs[j] * keep;
                    if pd != T::zero() {
                        axpy(pd, dctx_i, &mut dv[j * hsz + cols.start..j * hsz + cols.end]);
                    }
                }
                let s: T = (0..n).map(|j| dp[j] * probs[j]).sum();
                for j in 0..n {
                    let ds = probs[j] * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let (qi, kj) = (i * hsz + cols.start, j * hsz + cols.start);
                    for c in 0..dh {
                        dq[qi + c] += ds * lc.k[kj + c];
                        dk[kj + c] += ds * lc.q[qi + c];
                    }
                }
            }
        }
        let mut d_in = d_r1;
        add_into(&mut d_in, &linear_backward(&lc.input, &dq, &lp.query_w, &mut lg.query_w, &mut lg.query_b, n));
        add_into(&mut d_in, &linear_backward(&lc.input, &dk, &lp.key_w, &mut lg.key_w, &mut lg.key_b, n));
        add_into(&mut d_in, &linear_backward(&lc.input, &dv, &lp.value_w, &mut lg.value_w, &mut lg.value_b, n));
        dx = d_in;
    }

    apply_mask(&mut dx, &cache.emb_mask);
    let d_emb = layer_norm_backward(&dx, &cache.emb_norm, &params.emb_norm_g, &mut grads.emb_norm_g, &mut grads.emb_norm_b, hsz);
    for i in 0..n {
        let d = &d_emb[i * hsz..(i + 1) * hsz];
        add_into(grads.word_emb.row_mut(cache.tokens[i]), d);
        add_into(grads.pos_emb.row_mut(i), d);
        add_into(grads.seg_emb.row_mut(cache.segments[i]), d);
    }
}

/// Forward over a batch in evaluation mode (no dropout).
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &[EncodedInput],
    heads: &Heads,
) -> Result<Vec<ForwardOutput<T>>> {
    use rayon::prelude::*;
    batch
        .par_iter()
        .map(|input| forward_example(params, config, input, heads, &ForwardOptions::default()).map(|(o, _)| o))
        .collect()
}
