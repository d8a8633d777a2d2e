//! Transformer encoder stacks in two sizes: a lite configuration for the
//! skim pass and a strong configuration for the intensive pass.
//!
//! Blocks are the standard post-norm layout: multi-head self-attention,
//! add & norm, position-wise feed-forward with ReLU, add & norm. The
//! single-matrix attention primitive `softmax(K·Kᵀ/√d_k)·K` is kept as a
//! separately tested kernel because it defines the quadratic cost term; the
//! blocks use learned Q/K/V projections.

use crate::error::{CoreError, Result};
use crate::tensor::{
    add_bias, column_sums, dropout_backward, dropout_fwd, layer_norm_backward, layer_norm_fwd,
    matmul, matmul_at, matmul_bt, mean_pool, relu_backward, relu_fwd, row_softmax,
    row_softmax_backward, LayerNormCache, Tensor,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Record of encoder invocations (sequence lengths), used by tests to assert
/// which window sizes actually reach an encoder. Captured per thread.
pub mod call_log {
    use std::cell::RefCell;

    thread_local! {
        static CAPTURE: RefCell<Option<Vec<usize>>> = const { RefCell::new(None) };
    }

    /// Start capturing encode call lengths on this thread.
    pub fn start() {
        CAPTURE.with(|c| *c.borrow_mut() = Some(Vec::new()));
    }

    /// Stop capturing and return the recorded lengths.
    pub fn take() -> Vec<usize> {
        CAPTURE.with(|c| c.borrow_mut().take().unwrap_or_default())
    }

    pub(super) fn record(len: usize) {
        CAPTURE.with(|c| {
            if let Some(v) = c.borrow_mut().as_mut() {
                v.push(len);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub p_dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale lite encoder (skim pass).
    pub fn lite_toy(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            max_len,
            vocab_size,
            p_dropout: 0.3,
        }
    }

    /// Desk-scale strong encoder (intensive pass).
    pub fn strong_toy(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            max_len,
            vocab_size,
            p_dropout: 0.3,
        }
    }

    /// Reference dims of the public BERT-Tiny release (2 layers, d=128).
    pub fn lite_full(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 128,
            d_ff: 512,
            max_len,
            vocab_size,
            p_dropout: 0.3,
        }
    }

    /// Reference dims of the public BERT-Base release (12 layers, d=768).
    pub fn strong_full(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            max_len,
            vocab_size,
            p_dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model dim {} must be divisible by head count {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len == 0 || self.vocab_size <= 4 {
            return Err(CoreError::Config(
                "encoder needs max_len >= 1 and a vocabulary beyond the reserved ids".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.p_dropout) {
            return Err(CoreError::Config(format!(
                "dropout probability {} must be in [0, 1)",
                self.p_dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Modeled attention element counts for one forward pass of length `L`:
/// `quadratic = layers·heads·L²` score elements and
/// `linear = layers·d_model·L` activation elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTerms {
    pub quadratic: u128,
    pub linear: u128,
}

pub fn attention_cost(config: &EncoderConfig, len: usize) -> CostTerms {
    let l = len as u128;
    CostTerms {
        quadratic: (config.layers as u128) * (config.heads as u128) * l * l,
        linear: (config.layers as u128) * (config.d_model as u128) * l,
    }
}

/// Roles a parameter can play; weight decay applies only to `Weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
}

pub const INIT_STD: f64 = 0.02;

impl EncoderParams {
    /// Random initialization: embeddings and weights ~ N(0, 0.02²),
    /// layer-norm gain 1 / bias 0, feed-forward biases 0.
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: Tensor::randn(&[d, d], INIT_STD, rng),
                wk: Tensor::randn(&[d, d], INIT_STD, rng),
                wv: Tensor::randn(&[d, d], INIT_STD, rng),
                wo: Tensor::randn(&[d, d], INIT_STD, rng),
                w1: Tensor::randn(&[d, ff], INIT_STD, rng),
                b1: Tensor::zeros(&[ff]),
                w2: Tensor::randn(&[ff, d], INIT_STD, rng),
                b2: Tensor::zeros(&[d]),
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            });
        }
        Ok(EncoderParams {
            config: config.clone(),
            tok_emb: Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            pos_emb: Tensor::randn(&[config.max_len, d], INIT_STD, rng),
            layers,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        f(format!("{prefix}.tok_emb"), ParamKind::Weight, &self.tok_emb);
        f(format!("{prefix}.pos_emb"), ParamKind::Weight, &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            f(format!("{p}.wq"), ParamKind::Weight, &layer.wq);
            f(format!("{p}.wk"), ParamKind::Weight, &layer.wk);
            f(format!("{p}.wv"), ParamKind::Weight, &layer.wv);
            f(format!("{p}.wo"), ParamKind::Weight, &layer.wo);
            f(format!("{p}.w1"), ParamKind::Weight, &layer.w1);
            f(format!("{p}.b1"), ParamKind::Bias, &layer.b1);
            f(format!("{p}.w2"), ParamKind::Weight, &layer.w2);
            f(format!("{p}.b2"), ParamKind::Bias, &layer.b2);
            f(format!("{p}.ln1_gain"), ParamKind::Norm, &layer.ln1_gain);
            f(format!("{p}.ln1_bias"), ParamKind::Norm, &layer.ln1_bias);
            f(format!("{p}.ln2_gain"), ParamKind::Norm, &layer.ln2_gain);
            f(format!("{p}.ln2_bias"), ParamKind::Norm, &layer.ln2_bias);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        f(
            format!("{prefix}.tok_emb"),
            ParamKind::Weight,
            &mut self.tok_emb,
        );
        f(
            format!("{prefix}.pos_emb"),
            ParamKind::Weight,
            &mut self.pos_emb,
        );
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}.layer{i}");
            f(format!("{p}.wq"), ParamKind::Weight, &mut layer.wq);
            f(format!("{p}.wk"), ParamKind::Weight, &mut layer.wk);
            f(format!("{p}.wv"), ParamKind::Weight, &mut layer.wv);
            f(format!("{p}.wo"), ParamKind::Weight, &mut layer.wo);
            f(format!("{p}.w1"), ParamKind::Weight, &mut layer.w1);
            f(format!("{p}.b1"), ParamKind::Bias, &mut layer.b1);
            f(format!("{p}.w2"), ParamKind::Weight, &mut layer.w2);
            f(format!("{p}.b2"), ParamKind::Bias, &mut layer.b2);
            f(format!("{p}.ln1_gain"), ParamKind::Norm, &mut layer.ln1_gain);
            f(format!("{p}.ln1_bias"), ParamKind::Norm, &mut layer.ln1_bias);
            f(format!("{p}.ln2_gain"), ParamKind::Norm, &mut layer.ln2_gain);
            f(format!("{p}.ln2_bias"), ParamKind::Norm, &mut layer.ln2_bias);
        }
    }
}

/// `softmax(K·Kᵀ/√d_k)·K` — the single-matrix attention primitive.
pub fn self_attention(k: &Tensor) -> Result<Tensor> {
    if k.shape().len() != 2 || k.rows() == 0 {
        return Err(CoreError::Empty("self_attention input"));
    }
    let d_k = k.cols() as f64;
    let mut scores = matmul_bt(k, k)?;
    let scale = 1.0 / d_k.sqrt();
    for v in scores.data_mut() {
        *v *= scale;
    }
    let probs = row_softmax(&scores);
    matmul(&probs, k)
}

// ---------------------------------------------------------------------------
// Forward with cache
// ---------------------------------------------------------------------------

fn col_slice(x: &Tensor, lo: usize, width: usize) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[rows, width]);
    for i in 0..rows {
        let src = &x.data()[i * cols + lo..i * cols + lo + width];
        out.data_mut()[i * width..(i + 1) * width].copy_from_slice(src);
    }
    out
}

fn col_slice_add(dst: &mut Tensor, src: &Tensor, lo: usize) {
    let (rows, cols) = (dst.rows(), dst.cols());
    let width = src.cols();
    for i in 0..rows {
        for j in 0..width {
            dst.data_mut()[i * cols + lo + j] += src.data()[i * width + j];
        }
    }
}

struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
}

struct LayerCache {
    input: Tensor,
    attn: AttnCache,
    attn_drop: Option<Tensor>,
    ln1: LayerNormCache,
    norm1: Tensor,
    ff_pre: Tensor,
    ff_hidden: Tensor,
    ff_drop: Option<Tensor>,
    ln2: LayerNormCache,
}

/// Saved forward pass of [`encode`], consumed by [`encode_backward`].
pub struct EncodeCache {
    ids: Vec<u32>,
    emb_drop: Option<Tensor>,
    layers: Vec<LayerCache>,
    pub output: Tensor,
}

/// Encode a token sequence to `[L×d]` contextual vectors.
///
/// Dropout is active only when an RNG is supplied (training mode); without
/// one the pass is deterministic. `keep` optionally masks padding positions
/// out of attention (true = attend to this position).
pub fn encode(
    ids: &[u32],
    params: &EncoderParams,
    mut rng: Option<&mut ChaCha8Rng>,
    keep: Option<&[bool]>,
) -> Result<EncodeCache> {
    let cfg = &params.config;
    let len = ids.len();
    if len == 0 {
        return Err(CoreError::Empty("encode input"));
    }
    if len > cfg.max_len {
        return Err(CoreError::Length {
            len,
            max: cfg.max_len,
        });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(CoreError::VocabRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    call_log::record(len);

    let d = cfg.d_model;
    let mut x = Tensor::zeros(&[len, d]);
    for (t, &id) in ids.iter().enumerate() {
        let tok = params.tok_emb.row(id as usize);
        let pos = params.pos_emb.row(t);
        let row = &mut x.data_mut()[t * d..(t + 1) * d];
        for j in 0..d {
            row[j] = tok[j] + pos[j];
        }
    }

    let p_drop = cfg.p_dropout;
    let mut emb_drop = None;
    if p_drop > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            let (dropped, mask) = dropout_fwd(&x, p_drop, r);
            x = dropped;
            emb_drop = Some(mask);
        }
    }

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);

    for layer in &params.layers {
        let input = x.clone();
        let q = matmul(&x, &layer.wq)?;
        let k = matmul(&x, &layer.wk)?;
        let v = matmul(&x, &layer.wv)?;
        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Tensor::zeros(&[len, d]);
        for a in 0..heads {
            let qa = col_slice(&q, a * dh, dh);
            let ka = col_slice(&k, a * dh, dh);
            let va = col_slice(&v, a * dh, dh);
            let mut scores = matmul_bt(&qa, &ka)?;
            for s in scores.data_mut() {
                *s *= scale;
            }
            if let Some(keep) = keep {
                for i in 0..len {
                    for j in 0..len {
                        if !keep[j] {
                            scores.data_mut()[i * len + j] = -1e30;
                        }
                    }
                }
            }
            let pr = row_softmax(&scores);
            let ca = matmul(&pr, &va)?;
            col_slice_add(&mut ctx, &ca, a * dh);
            probs.push(pr);
        }
        let mut attn_out = matmul(&ctx, &layer.wo)?;
        let mut attn_drop = None;
        if p_drop > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                let (dropped, mask) = dropout_fwd(&attn_out, p_drop, r);
                attn_out = dropped;
                attn_drop = Some(mask);
            }
        }
        let res1 = crate::tensor::add(&x, &attn_out)?;
        let (norm1, ln1) = layer_norm_fwd(&res1, &layer.ln1_gain, &layer.ln1_bias);

        let ff_pre = add_bias(&matmul(&norm1, &layer.w1)?, &layer.b1)?;
        let ff_hidden = relu_fwd(&ff_pre);
        let mut ff_out = add_bias(&matmul(&ff_hidden, &layer.w2)?, &layer.b2)?;
        let mut ff_drop = None;
        if p_drop > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                let (dropped, mask) = dropout_fwd(&ff_out, p_drop, r);
                ff_out = dropped;
                ff_drop = Some(mask);
            }
        }
        let res2 = crate::tensor::add(&norm1, &ff_out)?;
        let (out, ln2) = layer_norm_fwd(&res2, &layer.ln2_gain, &layer.ln2_bias);

        layers.push(LayerCache {
            input,
            attn: AttnCache { q, k, v, probs, ctx },
            attn_drop,
            ln1,
            norm1,
            ff_pre,
            ff_hidden,
            ff_drop,
            ln2,
        });
        x = out;
    }

    Ok(EncodeCache {
        ids: ids.to_vec(),
        emb_drop,
        layers,
        output: x,
    })
}

/// Backward through [`encode`], accumulating parameter gradients in place.
pub fn encode_backward(
    cache: &EncodeCache,
    params: &mut EncoderParams,
    grad_out: &Tensor,
) -> Result<()> {
    let cfg = params.config.clone();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let d = cfg.d_model;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = cache.ids.len();

    let mut dx = grad_out.clone();
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &params.layers[li];

        // out = layer_norm(res2)
        let (d_res2, d_g2, d_b2n) = layer_norm_backward(&lc.ln2, &layer.ln2_gain, &dx);
        // res2 = norm1 + dropout(ff_out)
        let d_ff_out = match &lc.ff_drop {
            Some(mask) => dropout_backward(mask, &d_res2),
            None => d_res2.clone(),
        };
        let mut d_norm1 = d_res2;

        // ff_out = relu(norm1·W1 + b1)·W2 + b2
        let d_b2 = column_sums(&d_ff_out);
        let d_ff_hidden = matmul_bt(&d_ff_out, &layer.w2)?;
        let d_w2 = matmul_at(&lc.ff_hidden, &d_ff_out)?;
        let d_ff_pre = relu_backward(&lc.ff_pre, &d_ff_hidden);
        let d_b1 = column_sums(&d_ff_pre);
        let d_w1 = matmul_at(&lc.norm1, &d_ff_pre)?;
        d_norm1 = crate::tensor::add(&d_norm1, &matmul_bt(&d_ff_pre, &layer.w1)?)?;

        // norm1 = layer_norm(res1)
        let (d_res1, d_g1, d_b1n) = layer_norm_backward(&lc.ln1, &layer.ln1_gain, &d_norm1);
        // res1 = input + dropout(attn_out)
        let d_attn_out = match &lc.attn_drop {
            Some(mask) => dropout_backward(mask, &d_res1),
            None => d_res1.clone(),
        };
        let mut d_input = d_res1;

        // attn_out = ctx·Wo
        let d_ctx = matmul_bt(&d_attn_out, &layer.wo)?;
        let d_wo = matmul_at(&lc.attn.ctx, &d_attn_out)?;

        let mut d_q = Tensor::zeros(&[len, d]);
        let mut d_k = Tensor::zeros(&[len, d]);
        let mut d_v = Tensor::zeros(&[len, d]);
        for a in 0..heads {
            let qa = col_slice(&lc.attn.q, a * dh, dh);
            let ka = col_slice(&lc.attn.k, a * dh, dh);
            let va = col_slice(&lc.attn.v, a * dh, dh);
            let d_ca = col_slice(&d_ctx, a * dh, dh);
            let pr = &lc.attn.probs[a];
            let d_probs = matmul_bt(&d_ca, &va)?;
            let d_va = matmul_at(pr, &d_ca)?;
            let mut d_scores = row_softmax_backward(pr, &d_probs);
            for s in d_scores.data_mut() {
                *s *= scale;
            }
            let d_qa = matmul(&d_scores, &ka)?;
            let d_ka = matmul_at(&d_scores, &qa)?;
            col_slice_add(&mut d_q, &d_qa, a * dh);
            col_slice_add(&mut d_k, &d_ka, a * dh);
            col_slice_add(&mut d_v, &d_va, a * dh);
        }

        // q/k/v = input·W{q,k,v}
        d_input = crate::tensor::add(&d_input, &matmul_bt(&d_q, &layer.wq)?)?;
        d_input = crate::tensor::add(&d_input, &matmul_bt(&d_k, &layer.wk)?)?;
        d_input = crate::tensor::add(&d_input, &matmul_bt(&d_v, &layer.wv)?)?;
        let d_wq = matmul_at(&lc.input, &d_q)?;
        let d_wk = matmul_at(&lc.input, &d_k)?;
        let d_wv = matmul_at(&lc.input, &d_v)?;

        let layer = &mut params.layers[li];
        layer.ln2_gain.accum_grad(d_g2.data());
        layer.ln2_bias.accum_grad(d_b2n.data());
        layer.b2.accum_grad(d_b2.data());
        layer.w2.accum_grad(d_w2.data());
        layer.b1.accum_grad(d_b1.data());
        layer.w1.accum_grad(d_w1.data());
        layer.ln1_gain.accum_grad(d_g1.data());
        layer.ln1_bias.accum_grad(d_b1n.data());
        layer.wo.accum_grad(d_wo.data());
        layer.wq.accum_grad(d_wq.data());
        layer.wk.accum_grad(d_wk.data());
        layer.wv.accum_grad(d_wv.data());

        dx = d_input;
    }

    // embeddings
    let d_emb = match &cache.emb_drop {
        Some(mask) => dropout_backward(mask, &dx),
        None => dx,
    };
    for (t, &id) in cache.ids.iter().enumerate() {
        let row = d_emb.row(t).to_vec();
        let tg = params.tok_emb.grad_mut();
        for j in 0..d {
            tg[id as usize * d + j] += row[j];
        }
        let pg = params.pos_emb.grad_mut();
        for j in 0..d {
            pg[t * d + j] += row[j];
        }
    }
    Ok(())
}

/// Mean over the sequence axis (delegates to the pooling kernel).
pub fn pool(enc: &Tensor) -> Result<Tensor> {
    mean_pool(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cross_entropy, cross_entropy_backward, GradEval};
    use rand::SeedableRng;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 12,
            vocab_size: 10,
            p_dropout: 0.0,
        }
    }

    #[test]
    fn self_attention_single_row_is_identity() {
        let k = Tensor::from_vec(&[1, 3], vec![0.4, -1.0, 2.0]).unwrap();
        let out = self_attention(&k).unwrap();
        assert_eq!(out.data(), k.data());
    }

    #[test]
    fn self_attention_identical_rows_stay_identical() {
        let row = [1.5, -0.5, 0.25, 2.0];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let k = Tensor::from_vec(&[5, 4], data).unwrap();
        let out = self_attention(&k).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((out.data()[i * 4 + j] - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_hand_case() {
        let k = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = self_attention(&k).unwrap();
        // row 0 scores [1/√2, 0] → weights [0.6698, 0.3302]
        assert!((out.data()[0] - 0.6698).abs() < 1e-4, "{}", out.data()[0]);
        assert!((out.data()[1] - 0.3302).abs() < 1e-4);
        // symmetric for row 1
        assert!((out.data()[2] - 0.3302).abs() < 1e-4);
        assert!((out.data()[3] - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn self_attention_outputs_stay_in_row_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k = Tensor::randn(&[6, 3], 2.0, &mut rng);
            let out = self_attention(&k).unwrap();
            for c in 0..3 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..6 {
                    lo = lo.min(k.data()[r * 3 + c]);
                    hi = hi.max(k.data()[r * 3 + c]);
                }
                for r in 0..6 {
                    let v = out.data()[r * 3 + c];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let ids = [2u32, 5, 6, 7, 3];
        let a = encode(&ids, &params, None, None).unwrap();
        let b = encode(&ids, &params, None, None).unwrap();
        assert_eq!(a.output.shape(), &[5, 8]);
        assert_eq!(a.output.data(), b.output.data());
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        assert!(matches!(
            encode(&[99], &params, None, None),
            Err(CoreError::VocabRange { .. })
        ));
        let long = vec![4u32; 13];
        assert!(matches!(
            encode(&long, &params, None, None),
            Err(CoreError::Length { .. })
        ));
    }

    #[test]
    fn encode_is_position_sensitive() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let a = encode(&[4, 5, 6, 7], &params, None, None).unwrap();
        let b = encode(&[5, 4, 6, 7], &params, None, None).unwrap();
        let diff = a
            .output
            .data()
            .iter()
            .zip(b.output.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "permutation left output unchanged");
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let mut cfg = toy_config();
        cfg.p_dropout = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let ids = [4u32, 5, 6];
        let eval = encode(&ids, &params, None, None).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let train = encode(&ids, &params, Some(&mut r1), None).unwrap();
        let diff = eval
            .output
            .data()
            .iter()
            .zip(train.output.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9);
        // same dropout seed → identical training output
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let train2 = encode(&ids, &params, Some(&mut r2), None).unwrap();
        assert_eq!(train.output.data(), train2.output.data());
    }

    #[test]
    fn attention_cost_examples() {
        let mut cfg = toy_config();
        cfg.layers = 12;
        cfg.heads = 1;
        cfg.d_model = 7;
        let c = attention_cost(&cfg, 512);
        assert_eq!(c.quadratic, 3_145_728);
        let c2 = attention_cost(&cfg, 1024);
        assert_eq!(c2.quadratic, 4 * c.quadratic);
        cfg.layers = 0;
        assert_eq!(attention_cost(&cfg, 512).quadratic, 0);
    }

    #[test]
    fn attention_cost_quadratic_ratio_for_all_lengths() {
        let cfg = toy_config();
        for len in [1usize, 3, 10, 64, 333] {
            let a = attention_cost(&cfg, len).quadratic;
            let b = attention_cost(&cfg, 2 * len).quadratic;
            assert_eq!(b, 4 * a);
        }
    }

    #[test]
    fn encode_gradient_wrt_embedding_passes_grad_check() {
        let cfg = EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            max_len: 8,
            vocab_size: 9,
            p_dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let ids = [2u32, 4, 5, 6, 7, 3];
        // loss: cross-entropy of a softmax readout of the pooled encoding
        let target = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let readout = Tensor::randn(&[4, 8], 0.5, &mut rng);

        let f = |inputs: &[Tensor]| -> Result<GradEval> {
            let mut p = params.clone();
            p.tok_emb = inputs[0].clone();
            let cache = encode(&ids, &p, None, None)?;
            let pooled = pool(&cache.output)?;
            let logits = crate::tensor::matvec(&readout, &pooled)?;
            let probs = row_softmax(&logits);
            let value = cross_entropy(&probs, &target)?;

            let d_probs = cross_entropy_backward(&probs, &target);
            let d_logits = row_softmax_backward(&probs, &d_probs);
            let (_, d_pooled) = crate::tensor::matvec_backward(&readout, &pooled, d_logits.data());
            let d_enc = crate::tensor::mean_pool_backward(cache.output.rows(), d_pooled.data());
            encode_backward(&cache, &mut p, &d_enc)?;
            Ok(GradEval {
                value,
                grads: vec![p.tok_emb.grad().unwrap().to_vec()],
            })
        };
        let emb = params.tok_emb.clone();
        let err = crate::tensor::grad_check(f, &[emb], 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn call_log_captures_lengths() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        call_log::start();
        encode(&[4, 5], &params, None, None).unwrap();
        encode(&[4, 5, 6], &params, None, None).unwrap();
        assert_eq!(call_log::take(), vec![2, 3]);
        assert!(call_log::take().is_empty());
    }
}
