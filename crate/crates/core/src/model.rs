//! The skim/intensive pipeline: self-adaptive attention over segment
//! encodings, key-segment selection, and intensive classification of the
//! selected span fused with the global vector.

use crate::encoder::{encode, encode_backward, EncodeCache, EncoderParams, ParamKind};
use crate::error::{CoreError, Result};
use crate::tensor::{
    concat, matmul, matmul_bt, matvec, matvec_backward, mean_pool, mean_pool_backward,
    mean_pool_masked, mean_pool_masked_backward, row_softmax, row_softmax_backward, Tensor,
};
use crate::textio::{validate_geometry, wrap_specials, SegmentedDoc, PAD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything the skim pass produces for one document.
#[derive(Debug, Clone)]
pub struct SkimOutput {
    /// Per-segment encodings, `[n × d_g]`.
    pub p: Tensor,
    /// Segment weights, `[n]`, nonnegative, summing to one.
    pub g: Tensor,
    /// Global vector `g·p`, `[d_g]`.
    pub r_g: Tensor,
    /// Skim-stage class probabilities, `[U]`.
    pub o_pre: Tensor,
}

/// Selected key span: the highest-weighted segment plus context, always
/// exactly `1.5·l` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySegment {
    pub k: usize,
    pub start: usize,
    pub span: Vec<u32>,
}

/// One row of the stage-2 selection audit dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub doc_id: usize,
    pub k: usize,
    pub start: usize,
    pub g: Vec<f64>,
}

/// Full parameter set of the pipeline.
#[derive(Debug, Clone)]
pub struct SkinParams {
    pub lite: EncoderParams,
    /// Segment scorer, `[1 × d_g]`.
    pub w_a: Tensor,
    /// Skim classification head, `[U × d_g]` and `[U]`.
    pub w_op: Tensor,
    pub b_op: Tensor,
    pub strong: EncoderParams,
    /// Intensive head over `[r_l, r_g]`, `[U × (d_l + d_g)]` and `[U]`.
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub num_classes: usize,
    /// When set, padding tokens are masked out of attention and pooling.
    pub mask_padding: bool,
}

impl SkinParams {
    pub fn init(
        lite_cfg: &crate::encoder::EncoderConfig,
        strong_cfg: &crate::encoder::EncoderConfig,
        num_classes: usize,
        mask_padding: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        let lite = EncoderParams::init(lite_cfg, rng)?;
        let strong = EncoderParams::init(strong_cfg, rng)?;
        let d_g = lite_cfg.d_model;
        let d_l = strong_cfg.d_model;
        Ok(SkinParams {
            lite,
            w_a: Tensor::randn(&[1, d_g], crate::encoder::INIT_STD, rng),
            w_op: Tensor::randn(&[num_classes, d_g], crate::encoder::INIT_STD, rng),
            b_op: Tensor::zeros(&[num_classes]),
            strong,
            w_o: Tensor::randn(&[num_classes, d_l + d_g], crate::encoder::INIT_STD, rng),
            b_o: Tensor::zeros(&[num_classes]),
            num_classes,
            mask_padding,
        })
    }

    /// Initialize from a bare seed (one deterministic stream for the whole
    /// parameter set).
    pub fn init_from_seed(
        lite_cfg: &crate::encoder::EncoderConfig,
        strong_cfg: &crate::encoder::EncoderConfig,
        num_classes: usize,
        mask_padding: bool,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(lite_cfg, strong_cfg, num_classes, mask_padding, &mut rng)
    }

    pub fn d_g(&self) -> usize {
        self.lite.config.d_model
    }

    pub fn d_l(&self) -> usize {
        self.strong.config.d_model
    }

    /// Visit the skim-branch parameters in a fixed order.
    pub fn visit_skim(&self, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.lite.visit("lite", f);
        f("w_a".into(), ParamKind::Weight, &self.w_a);
        f("w_op".into(), ParamKind::Weight, &self.w_op);
        f("b_op".into(), ParamKind::Bias, &self.b_op);
    }

    pub fn visit_skim_mut(&mut self, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        self.lite.visit_mut("lite", f);
        f("w_a".into(), ParamKind::Weight, &mut self.w_a);
        f("w_op".into(), ParamKind::Weight, &mut self.w_op);
        f("b_op".into(), ParamKind::Bias, &mut self.b_op);
    }

    /// Visit every parameter of the whole pipeline in a fixed order.
    pub fn visit_all(&self, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.visit_skim(f);
        self.strong.visit("strong", f);
        f("w_o".into(), ParamKind::Weight, &self.w_o);
        f("b_o".into(), ParamKind::Bias, &self.b_o);
    }

    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        self.visit_skim_mut(f);
        self.strong.visit_mut("strong", f);
        f("w_o".into(), ParamKind::Weight, &mut self.w_o);
        f("b_o".into(), ParamKind::Bias, &mut self.b_o);
    }
}

fn keep_mask(wrapped: &[u32]) -> Vec<bool> {
    wrapped.iter().map(|&id| id != PAD).collect()
}

/// Segment scores before and after the softmax: `logits = W_a·pᵀ/√d_g`,
/// `g = softmax(logits)`.
pub fn segment_weights(w_a: &Tensor, p: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_g = p.cols();
    let mut logits = matmul_bt(w_a, p)?;
    let scale = 1.0 / (d_g as f64).sqrt();
    for v in logits.data_mut() {
        *v *= scale;
    }
    let g = row_softmax(&logits);
    Ok((logits, g))
}

/// Global vector `r_g = g·p`.
pub fn global_vector(g: &Tensor, p: &Tensor) -> Result<Tensor> {
    let gm = if g.shape().len() == 1 {
        Tensor::from_vec(&[1, g.numel()], g.data().to_vec())?
    } else {
        g.clone()
    };
    let r = matmul(&gm, p)?;
    Tensor::from_vec(&[p.cols()], r.data().to_vec())
}

/// Saved forward state of the skim pass.
pub struct SkimCache {
    seg_caches: Vec<EncodeCache>,
    seg_keeps: Vec<Option<Vec<bool>>>,
    pub p: Tensor,
    pub g: Tensor,
    pub r_g: Tensor,
    pub o_pre: Tensor,
}

impl SkimCache {
    pub fn output(&self) -> SkimOutput {
        let n = self.g.numel();
        SkimOutput {
            p: self.p.clone(),
            g: Tensor::from_vec(&[n], self.g.data().to_vec()).expect("g shape"),
            r_g: self.r_g.clone(),
            o_pre: self.o_pre.clone(),
        }
    }
}

/// Skim pass: encode every segment with the lite encoder, score the
/// segments, build the global vector, and classify it.
pub fn skim_forward(
    doc: &SegmentedDoc,
    params: &SkinParams,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SkimCache> {
    validate_geometry(doc.n, doc.l)?;
    let d_g = params.d_g();
    let mut p = Tensor::zeros(&[doc.n, d_g]);
    let mut seg_caches = Vec::with_capacity(doc.n);
    let mut seg_keeps = Vec::with_capacity(doc.n);
    for i in 0..doc.n {
        let wrapped = wrap_specials(doc.segment(i));
        let keep = params.mask_padding.then(|| keep_mask(&wrapped));
        let cache = encode(&wrapped, &params.lite, rng.as_deref_mut(), keep.as_deref())?;
        let pooled = match &keep {
            Some(mask) => mean_pool_masked(&cache.output, mask)?,
            None => mean_pool(&cache.output)?,
        };
        p.data_mut()[i * d_g..(i + 1) * d_g].copy_from_slice(pooled.data());
        seg_caches.push(cache);
        seg_keeps.push(keep);
    }
    let (_, g) = segment_weights(&params.w_a, &p)?;
    let r_g = global_vector(&g, &p)?;
    let logits = crate::tensor::add(&matvec(&params.w_op, &r_g)?, &params.b_op)?;
    let o_pre = row_softmax(&logits);
    Ok(SkimCache {
        seg_caches,
        seg_keeps,
        p,
        g,
        r_g,
        o_pre,
    })
}

/// Backward through the skim pass. Either gradient seed may be absent:
/// the skim-only stage seeds `d_o_pre`; joint training seeds `d_r_g`.
pub fn skim_backward(
    cache: &SkimCache,
    params: &mut SkinParams,
    d_o_pre: Option<&[f64]>,
    d_r_g_ext: Option<&[f64]>,
) -> Result<()> {
    let d_g_dim = params.d_g();
    let n = cache.p.rows();
    let mut d_r_g = vec![0.0; d_g_dim];
    if let Some(seed) = d_r_g_ext {
        for (a, b) in d_r_g.iter_mut().zip(seed) {
            *a += b;
        }
    }
    if let Some(seed) = d_o_pre {
        let gy = Tensor::from_vec(&[params.num_classes], seed.to_vec())?;
        let d_logits = row_softmax_backward(&cache.o_pre, &gy);
        let (d_w_op, d_rg_head) = matvec_backward(&params.w_op, &cache.r_g, d_logits.data());
        params.w_op.accum_grad(d_w_op.data());
        params.b_op.accum_grad(d_logits.data());
        for (a, b) in d_r_g.iter_mut().zip(d_rg_head.data()) {
            *a += b;
        }
    }

    // r_g = g·p
    let d_r_g_t = Tensor::from_vec(&[1, d_g_dim], d_r_g.clone())?;
    let d_g = matmul_bt(&d_r_g_t, &cache.p)?; // [1×n]
    let mut d_p = Tensor::zeros(&[n, d_g_dim]);
    for i in 0..n {
        let gi = cache.g.data()[i];
        let row = &mut d_p.data_mut()[i * d_g_dim..(i + 1) * d_g_dim];
        for j in 0..d_g_dim {
            row[j] = gi * d_r_g[j];
        }
    }

    // g = softmax(W_a·pᵀ/√d_g)
    let d_logits = row_softmax_backward(&cache.g, &d_g);
    let scale = 1.0 / (d_g_dim as f64).sqrt();
    let mut d_w_a = matmul(&d_logits, &cache.p)?; // [1×d_g]
    for v in d_w_a.data_mut() {
        *v *= scale;
    }
    params.w_a.accum_grad(d_w_a.data());
    for i in 0..n {
        let dz = d_logits.data()[i] * scale;
        let row = &mut d_p.data_mut()[i * d_g_dim..(i + 1) * d_g_dim];
        for j in 0..d_g_dim {
            row[j] += dz * params.w_a.data()[j];
        }
    }

    // p(i) = pool(lite(segment i))
    for i in 0..n {
        let d_pool = &d_p.data()[i * d_g_dim..(i + 1) * d_g_dim];
        let seg_cache = &cache.seg_caches[i];
        let d_enc = match &cache.seg_keeps[i] {
            Some(keep) => mean_pool_masked_backward(keep, d_pool),
            None => mean_pool_backward(seg_cache.output.rows(), d_pool),
        };
        encode_backward(seg_cache, &mut params.lite, &d_enc)?;
    }
    Ok(())
}

/// Apply the selection rule to a weight vector: take the argmax segment
/// (ties toward the lowest index) and cut a context window of exactly
/// `1.5·l` tokens around it. The first and last segments use edge windows;
/// interior segments use the window `[l·(k−1)−l/4, l·k+l/4)`, whose start
/// saturates at the document head so the span always stays in bounds.
pub fn select_key_segment(g: &Tensor, doc: &SegmentedDoc) -> Result<KeySegment> {
    if doc.n < 2 {
        return Err(CoreError::Config(format!(
            "key segment selection needs n >= 2, got {}",
            doc.n
        )));
    }
    validate_geometry(doc.n, doc.l)?;
    if g.numel() != doc.n {
        return Err(CoreError::Dimension {
            op: "select_key_segment",
            lhs: g.shape().to_vec(),
            rhs: vec![doc.n],
        });
    }
    let mut k = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, &v) in g.data().iter().enumerate() {
        if v > best {
            best = v;
            k = i;
        }
    }
    let n = doc.n as i64;
    let l = doc.l as i64;
    let span_len = l + l / 2;
    let ki = k as i64;
    let start_raw = if ki == 0 {
        0
    } else if ki == n - 1 {
        l * (n - 1) - l / 2
    } else {
        l * (ki - 1) - l / 4
    };
    let start = start_raw.clamp(0, n * l - span_len) as usize;
    let span = doc.tokens[start..start + span_len as usize].to_vec();
    Ok(KeySegment { k, start, span })
}

/// Saved forward state of the intensive pass.
pub struct IntensiveCache {
    enc: EncodeCache,
    keep: Option<Vec<bool>>,
    pub r_l: Tensor,
    pub r: Tensor,
    pub o: Tensor,
}

/// Intensive pass: strong-encode the key span, pool to the local vector,
/// concatenate with the global vector, and classify.
pub fn intensive_forward(
    key: &KeySegment,
    r_g: &Tensor,
    params: &SkinParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<IntensiveCache> {
    let wrapped = wrap_specials(&key.span);
    let keep = params.mask_padding.then(|| keep_mask(&wrapped));
    let enc = encode(&wrapped, &params.strong, rng, keep.as_deref())?;
    let r_l = match &keep {
        Some(mask) => mean_pool_masked(&enc.output, mask)?,
        None => mean_pool(&enc.output)?,
    };
    let r = concat(&r_l, r_g);
    let logits = crate::tensor::add(&matvec(&params.w_o, &r)?, &params.b_o)?;
    let o = row_softmax(&logits);
    Ok(IntensiveCache { enc, keep, r_l, r, o })
}

/// Backward through the intensive pass; returns the gradient w.r.t. the
/// global vector so the caller can chain it into [`skim_backward`].
pub fn intensive_backward(
    cache: &IntensiveCache,
    params: &mut SkinParams,
    d_o: &[f64],
) -> Result<Vec<f64>> {
    let gy = Tensor::from_vec(&[params.num_classes], d_o.to_vec())?;
    let d_logits = row_softmax_backward(&cache.o, &gy);
    let (d_w_o, d_r) = matvec_backward(&params.w_o, &cache.r, d_logits.data());
    params.w_o.accum_grad(d_w_o.data());
    params.b_o.accum_grad(d_logits.data());

    let d_l = params.d_l();
    let d_r_l = &d_r.data()[..d_l];
    let d_r_g = d_r.data()[d_l..].to_vec();
    let d_enc = match &cache.keep {
        Some(keep) => mean_pool_masked_backward(keep, d_r_l),
        None => mean_pool_backward(cache.enc.output.rows(), d_r_l),
    };
    encode_backward(&cache.enc, &mut params.strong, &d_enc)?;
    Ok(d_r_g)
}

/// Inference pass of the whole pipeline: skim, select, intensive.
pub fn skin_predict(doc: &SegmentedDoc, params: &SkinParams) -> Result<Tensor> {
    let skim = skim_forward(doc, params, None)?;
    let key = select_key_segment(&skim.g, doc)?;
    let intensive = intensive_forward(&key, &skim.r_g, params, None)?;
    Ok(intensive.o)
}
