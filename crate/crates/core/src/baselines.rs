//! Encoder-based baselines that share the strong encoder so accuracy and
//! cost comparisons isolate the length-handling strategy: truncation,
//! head+tail concatenation, and the slide-window max/average scheme.

use crate::encoder::{encode, encode_backward, EncodeCache, EncoderConfig, EncoderParams, ParamKind};
use crate::error::{CoreError, Result};
use crate::tensor::{
    cross_entropy, cross_entropy_backward, matvec, matvec_backward, max_pool,
    max_pool_backward, mean_pool, mean_pool_backward, mean_pool_masked, mean_pool_masked_backward,
    row_softmax, row_softmax_backward, Tensor,
};
use crate::textio::{SegmentedDoc, TestSet, TrainSet, PAD, SEP};
use crate::training::{
    adam_over, epoch_rng, evaluate, init_adam_states_over, l2_accum_over, l2_value_over,
    plateaued, smooth_labels, zero_grads_over, EpochStat, EvalReport, TrainConfig,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Truncate or pad to a fixed cap, encode once.
    Truncate512,
    /// First and last `head_len` tokens joined by `[SEP]`.
    HeadTail128,
    /// Encode each segment, max-pool positions, average the segments.
    SlideWindow,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "truncate" => Ok(BaselineKind::Truncate512),
            "headtail" => Ok(BaselineKind::HeadTail128),
            "slidewindow" => Ok(BaselineKind::SlideWindow),
            other => Err(CoreError::Config(format!(
                "unknown baseline `{other}` (expected truncate|headtail|slidewindow)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Truncate512 => "truncate",
            BaselineKind::HeadTail128 => "headtail",
            BaselineKind::SlideWindow => "slidewindow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Truncation cap in tokens (512 at reference dims).
    pub cap: usize,
    /// Per-side window for the head+tail baseline (128 at reference dims).
    pub head_len: usize,
    pub mask_padding: bool,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        BaselineConfig {
            kind,
            cap: 512,
            head_len: 128,
            mask_padding: false,
        }
    }

    /// Longest sequence this baseline feeds the encoder for documents of
    /// `n·l` tokens (including the `[CLS]`/`[SEP]` wrapping).
    pub fn required_max_len(&self, n: usize, l: usize) -> usize {
        match self.kind {
            BaselineKind::Truncate512 => self.cap + 2,
            BaselineKind::HeadTail128 => 2 * self.head_len + 3,
            BaselineKind::SlideWindow => {
                let _ = n;
                l + 2
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub config: BaselineConfig,
    pub encoder: EncoderParams,
    /// Dense head over the pooled feature, `[U × d]` and `[U]`.
    pub w: Tensor,
    pub b: Tensor,
    pub num_classes: usize,
}

impl BaselineParams {
    pub fn init(
        config: BaselineConfig,
        encoder_cfg: &EncoderConfig,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(encoder_cfg, rng)?;
        let d = encoder_cfg.d_model;
        Ok(BaselineParams {
            config,
            encoder,
            w: Tensor::randn(&[num_classes, d], crate::encoder::INIT_STD, rng),
            b: Tensor::zeros(&[num_classes]),
            num_classes,
        })
    }

    pub fn init_from_seed(
        config: BaselineConfig,
        encoder_cfg: &EncoderConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, encoder_cfg, num_classes, &mut rng)
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
        self.encoder.visit("enc", f);
        f("w".into(), ParamKind::Weight, &self.w);
        f("b".into(), ParamKind::Bias, &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        self.encoder.visit_mut("enc", f);
        f("w".into(), ParamKind::Weight, &mut self.w);
        f("b".into(), ParamKind::Bias, &mut self.b);
    }
}

/// The composite head+tail sequence before special-token wrapping:
/// `head_len` tokens, `[SEP]`, `head_len` tokens, each side padded.
pub fn head_tail_sequence(text: &[u32], head_len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(2 * head_len + 1);
    let head = &text[..text.len().min(head_len)];
    out.extend_from_slice(head);
    out.resize(head_len, PAD);
    out.push(SEP);
    let tail_start = text.len().saturating_sub(head_len);
    let tail = &text[tail_start..];
    out.extend_from_slice(tail);
    out.resize(2 * head_len + 1, PAD);
    out
}

/// The truncation-baseline sequence before wrapping: exactly `cap` tokens.
pub fn truncate_sequence(text: &[u32], cap: usize) -> Vec<u32> {
    let mut out = text[..text.len().min(cap)].to_vec();
    out.resize(cap, PAD);
    out
}

enum PoolCache {
    Mean { rows: usize },
    MeanMasked { keep: Vec<bool> },
    SlideMax { rows: usize, argmax: Vec<Vec<usize>> },
}

/// Saved forward pass of a baseline classifier.
pub struct BaselineCache {
    enc_caches: Vec<EncodeCache>,
    pool: PoolCache,
    feat: Tensor,
    pub probs: Tensor,
}

fn dense_softmax(params: &BaselineParams, feat: &Tensor) -> Result<Tensor> {
    let logits = crate::tensor::add(&matvec(&params.w, feat)?, &params.b)?;
    Ok(row_softmax(&logits))
}

/// Forward pass of any baseline, keeping what backward needs.
pub fn baseline_forward(
    doc: &SegmentedDoc,
    params: &BaselineParams,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BaselineCache> {
    match params.config.kind {
        BaselineKind::Truncate512 => {
            let seq = truncate_sequence(doc.raw_tokens(), params.config.cap);
            let wrapped = crate::textio::wrap_specials(&seq);
            let keep: Option<Vec<bool>> = params
                .config
                .mask_padding
                .then(|| wrapped.iter().map(|&t| t != PAD).collect());
            let cache = encode(&wrapped, &params.encoder, rng.as_deref_mut(), keep.as_deref())?;
            let (feat, pool) = match keep {
                Some(keep) => (
                    mean_pool_masked(&cache.output, &keep)?,
                    PoolCache::MeanMasked { keep },
                ),
                None => (
                    mean_pool(&cache.output)?,
                    PoolCache::Mean {
                        rows: cache.output.rows(),
                    },
                ),
            };
            let probs = dense_softmax(params, &feat)?;
            Ok(BaselineCache {
                enc_caches: vec![cache],
                pool,
                feat,
                probs,
            })
        }
        BaselineKind::HeadTail128 => {
            let seq = head_tail_sequence(doc.raw_tokens(), params.config.head_len);
            let wrapped = crate::textio::wrap_specials(&seq);
            let keep: Option<Vec<bool>> = params
                .config
                .mask_padding
                .then(|| wrapped.iter().map(|&t| t != PAD).collect());
            let cache = encode(&wrapped, &params.encoder, rng.as_deref_mut(), keep.as_deref())?;
            let (feat, pool) = match keep {
                Some(keep) => (
                    mean_pool_masked(&cache.output, &keep)?,
                    PoolCache::MeanMasked { keep },
                ),
                None => (
                    mean_pool(&cache.output)?,
                    PoolCache::Mean {
                        rows: cache.output.rows(),
                    },
                ),
            };
            let probs = dense_softmax(params, &feat)?;
            Ok(BaselineCache {
                enc_caches: vec![cache],
                pool,
                feat,
                probs,
            })
        }
        BaselineKind::SlideWindow => {
            let d = params.encoder.config.d_model;
            let mut enc_caches = Vec::with_capacity(doc.n);
            let mut argmax = Vec::with_capacity(doc.n);
            let mut feat = Tensor::zeros(&[d]);
            for i in 0..doc.n {
                let wrapped = crate::textio::wrap_specials(doc.segment(i));
                let cache = encode(&wrapped, &params.encoder, rng.as_deref_mut(), None)?;
                let (pooled, arg) = max_pool(&cache.output)?;
                for j in 0..d {
                    feat.data_mut()[j] += pooled.data()[j];
                }
                enc_caches.push(cache);
                argmax.push(arg);
            }
            let inv = 1.0 / doc.n as f64;
            for v in feat.data_mut() {
                *v *= inv;
            }
            let rows = enc_caches[0].output.rows();
            let probs = dense_softmax(params, &feat)?;
            Ok(BaselineCache {
                enc_caches,
                pool: PoolCache::SlideMax { rows, argmax },
                feat,
                probs,
            })
        }
    }
}

/// Backward through a baseline, accumulating parameter gradients.
pub fn baseline_backward(
    cache: &BaselineCache,
    params: &mut BaselineParams,
    d_probs: &[f64],
) -> Result<()> {
    let gy = Tensor::from_vec(&[params.num_classes], d_probs.to_vec())?;
    let d_logits = row_softmax_backward(&cache.probs, &gy);
    let (d_w, d_feat) = matvec_backward(&params.w, &cache.feat, d_logits.data());
    params.w.accum_grad(d_w.data());
    params.b.accum_grad(d_logits.data());

    match &cache.pool {
        PoolCache::Mean { rows } => {
            let d_enc = mean_pool_backward(*rows, d_feat.data());
            encode_backward(&cache.enc_caches[0], &mut params.encoder, &d_enc)?;
        }
        PoolCache::MeanMasked { keep } => {
            let d_enc = mean_pool_masked_backward(keep, d_feat.data());
            encode_backward(&cache.enc_caches[0], &mut params.encoder, &d_enc)?;
        }
        PoolCache::SlideMax { rows, argmax } => {
            let inv = 1.0 / cache.enc_caches.len() as f64;
            let d_pooled: Vec<f64> = d_feat.data().iter().map(|v| v * inv).collect();
            for (seg_cache, arg) in cache.enc_caches.iter().zip(argmax) {
                let d_enc = max_pool_backward(*rows, arg, &d_pooled);
                encode_backward(seg_cache, &mut params.encoder, &d_enc)?;
            }
        }
    }
    Ok(())
}

/// Probability vector of a baseline in eval mode.
pub fn baseline_predict(doc: &SegmentedDoc, params: &BaselineParams) -> Result<Tensor> {
    Ok(baseline_forward(doc, params, None)?.probs)
}

/// Baseline training: the same minibatch Adam loop as the pipeline stages,
/// at the intensive-stage learning rate.
pub fn train_baseline(
    params: &mut BaselineParams,
    train: &TrainSet,
    cfg: &TrainConfig,
    epochs: usize,
    states: &mut Vec<crate::tensor::AdamState>,
    history: &mut Vec<EpochStat>,
    after_epoch: &mut dyn FnMut(&BaselineParams, &[crate::tensor::AdamState], &[EpochStat]) -> Result<()>,
) -> Result<()> {
    if train.is_empty() {
        return Err(CoreError::Empty("training corpus"));
    }
    if states.is_empty() {
        *states = init_adam_states_over(|f| params.visit(f));
    }
    // stage id 4 keeps the RNG stream distinct from the pipeline stages
    let stage = 4u8;
    let start = history.len();
    for epoch in start..epochs {
        if plateaued(history, cfg.early_stop_patience, cfg.early_stop_min_delta) {
            break;
        }
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            zero_grads_over(|f| params.visit_mut(f));
            let inv_b = 1.0 / batch.len() as f64;
            let mut ce_sum = 0.0;
            for &idx in batch {
                let doc = &train.docs[idx];
                let target = smooth_labels(
                    doc.label,
                    params.num_classes,
                    cfg.gamma,
                    cfg.normalize_smoothing,
                )?;
                let cache = baseline_forward(doc, params, Some(&mut rng))?;
                let loss = cross_entropy(&cache.probs, &target)?;
                let mut d_o = cross_entropy_backward(&cache.probs, &target);
                for v in d_o.data_mut() {
                    *v *= inv_b;
                }
                if doc.label
                    == cache
                        .probs
                        .data()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                {
                    correct += 1;
                }
                baseline_backward(&cache, params, d_o.data())?;
                ce_sum += loss;
            }
            let batch_loss = ce_sum * inv_b + l2_value_over(|f| params.visit(f), cfg.r_l2);
            if !batch_loss.is_finite() {
                return Err(CoreError::Diverged { stage, epoch, step });
            }
            l2_accum_over(|f| params.visit_mut(f), cfg.r_l2);
            adam_over(|f| params.visit_mut(f), states, cfg.adam(cfg.alpha2))?;
            loss_sum += batch_loss;
            steps += 1;
        }
        history.push(EpochStat {
            epoch,
            stage,
            mean_loss: loss_sum / steps.max(1) as f64,
            train_acc: correct as f64 / train.len() as f64,
        });
        after_epoch(params, states, history)?;
    }
    Ok(())
}

pub fn evaluate_baseline(params: &BaselineParams, test: &TestSet) -> Result<EvalReport> {
    evaluate(
        |doc| baseline_predict(doc, params),
        test,
        params.num_classes,
    )
}
