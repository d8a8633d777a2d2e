//! Losses, regularization, the three-stage training procedure, and
//! evaluation metrics.
//!
//! Stage 1 trains the skim branch on its own class output. Stage 2 runs the
//! trained skim branch over the corpus and freezes one key segment per
//! document. Stage 3 trains the whole pipeline jointly on the intensive
//! output, re-encoding all segments each step while keeping the stage-2
//! segment choices fixed.

use crate::encoder::ParamKind;
use crate::error::{CoreError, Result};
use crate::model::{
    intensive_backward, intensive_forward, select_key_segment, skim_backward, skim_forward,
    skin_predict, KeySegment, SelectionRow, SkimOutput, SkinParams,
};
use crate::tensor::{
    adam_step, cross_entropy, cross_entropy_backward, AdamHyper, AdamState, Tensor,
};
use crate::textio::{SegmentedDoc, TestSet, TrainSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training hyperparameters. The defaults are the reference values the
/// pipeline is normally run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub r_l2: f64,
    pub p_dropout: f64,
    /// Label smoothing factor γ: zeros become γ, the one becomes 1−γ.
    pub gamma: f64,
    /// Skim-stage learning rate.
    pub alpha1: f64,
    /// Joint-stage learning rate.
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage3_epochs: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// Renormalize smoothed labels to sum to one (off: literal rule).
    pub normalize_smoothing: bool,
    pub mask_padding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r_l2: 1e-5,
            p_dropout: 0.3,
            gamma: 0.2,
            alpha1: 1e-4,
            alpha2: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 32,
            stage1_epochs: 20,
            stage3_epochs: 10,
            seed: 7,
            early_stop_patience: 3,
            early_stop_min_delta: 1e-4,
            normalize_smoothing: false,
            mask_padding: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Literal label smoothing: the one-hot `1` becomes `1−γ` and every `0`
/// becomes `γ`. The result sums to `1 + (U−2)·γ`, which is intentional;
/// `normalize` divides by that sum for the conventional variant.
pub fn smooth_labels(label: usize, num_classes: usize, gamma: f64, normalize: bool) -> Result<Tensor> {
    if label >= num_classes {
        return Err(CoreError::Validation(format!(
            "label {label} >= number of classes {num_classes}"
        )));
    }
    if !(0.0..0.5).contains(&gamma) {
        return Err(CoreError::Config(format!(
            "smoothing factor {gamma} must be in [0, 0.5)"
        )));
    }
    let mut data = vec![gamma; num_classes];
    data[label] = 1.0 - gamma;
    if normalize {
        let sum: f64 = data.iter().sum();
        for v in data.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(&[num_classes], data)
}

/// `r·‖θ‖²` for a single weight tensor.
pub fn l2_penalty_term(weight: &Tensor, r_l2: f64) -> f64 {
    r_l2 * weight.data().iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`l2_penalty_term`]: `2·r·θ`.
pub fn l2_penalty_grad(weight: &Tensor, r_l2: f64) -> Vec<f64> {
    weight.data().iter().map(|v| 2.0 * r_l2 * v).collect()
}

/// Which slice of the pipeline a stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Skim,
    Full,
}

fn visit_scope(params: &SkinParams, scope: Scope, f: &mut dyn FnMut(String, ParamKind, &Tensor)) {
    match scope {
        Scope::Skim => params.visit_skim(f),
        Scope::Full => params.visit_all(f),
    }
}

fn visit_scope_mut(
    params: &mut SkinParams,
    scope: Scope,
    f: &mut dyn FnMut(String, ParamKind, &mut Tensor),
) {
    match scope {
        Scope::Skim => params.visit_skim_mut(f),
        Scope::Full => params.visit_all_mut(f),
    }
}

/// Squared-norm weight penalty over any parameter visitor. Bias vectors and
/// layer-norm parameters are excluded.
pub fn l2_value_over(
    visit: impl FnOnce(&mut dyn FnMut(String, ParamKind, &Tensor)),
    r_l2: f64,
) -> f64 {
    if r_l2 == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    visit(&mut |_, kind, t| {
        if kind == ParamKind::Weight {
            acc += t.data().iter().map(|v| v * v).sum::<f64>();
        }
    });
    r_l2 * acc
}

/// Add `2·r·θ` to every weight gradient.
pub fn l2_accum_over(
    visit: impl FnOnce(&mut dyn FnMut(String, ParamKind, &mut Tensor)),
    r_l2: f64,
) {
    if r_l2 == 0.0 {
        return;
    }
    visit(&mut |_, kind, t| {
        if kind == ParamKind::Weight {
            let g = l2_penalty_grad(t, r_l2);
            t.accum_grad(&g);
        }
    });
}

/// Fresh Adam buffers matching a visitor's parameter order.
pub fn init_adam_states_over(
    visit: impl FnOnce(&mut dyn FnMut(String, ParamKind, &Tensor)),
) -> Vec<AdamState> {
    let mut states = Vec::new();
    visit(&mut |_, _, t| {
        states.push(AdamState::new(t.numel()));
    });
    states
}

/// Zero every gradient a visitor reaches.
pub fn zero_grads_over(visit: impl FnOnce(&mut dyn FnMut(String, ParamKind, &mut Tensor))) {
    visit(&mut |_, _, t| t.zero_grad());
}

/// One Adam step over every visited parameter, in visit order.
pub fn adam_over(
    visit: impl FnOnce(&mut dyn FnMut(String, ParamKind, &mut Tensor)),
    states: &mut [AdamState],
    hyper: AdamHyper,
) -> Result<()> {
    let mut i = 0usize;
    let mut result = Ok(());
    visit(&mut |name, _, t| {
        if result.is_err() {
            return;
        }
        if i >= states.len() {
            result = Err(CoreError::Validation(format!(
                "optimizer state missing for parameter `{name}`"
            )));
            return;
        }
        if let Err(e) = adam_step(t, &mut states[i], hyper) {
            result = Err(e);
        }
        i += 1;
    });
    result
}

/// Weight penalty over a pipeline scope.
pub fn l2_value(params: &SkinParams, scope: Scope, r_l2: f64) -> f64 {
    l2_value_over(|f| visit_scope(params, scope, f), r_l2)
}

fn l2_accum(params: &mut SkinParams, scope: Scope, r_l2: f64) {
    l2_accum_over(|f| visit_scope_mut(params, scope, f), r_l2);
}

/// Fresh Adam buffers matching the visit order of a scope.
pub fn init_adam_states(params: &SkinParams, scope: Scope) -> Vec<AdamState> {
    init_adam_states_over(|f| visit_scope(params, scope, f))
}

fn zero_grads(params: &mut SkinParams, scope: Scope) {
    zero_grads_over(|f| visit_scope_mut(params, scope, f));
}

fn adam_scope(
    params: &mut SkinParams,
    scope: Scope,
    states: &mut [AdamState],
    hyper: AdamHyper,
) -> Result<()> {
    adam_over(|f| visit_scope_mut(params, scope, f), states, hyper)
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub stage: u8,
    pub mean_loss: f64,
    pub train_acc: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Epoch-local RNG stream: deterministic in (seed, stage, epoch), so a run
/// resumed at an epoch boundary replays exactly.
pub fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mixed = seed
        ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// One observed sample: cross-entropy loss plus predicted class, with
/// gradients already accumulated into the parameters.
type SampleResult = (f64, usize);

fn stage1_sample(
    params: &mut SkinParams,
    doc: &SegmentedDoc,
    target: &Tensor,
    inv_batch: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let cache = skim_forward(doc, params, Some(rng))?;
    let loss = cross_entropy(&cache.o_pre, target)?;
    let mut d_o = cross_entropy_backward(&cache.o_pre, target);
    for v in d_o.data_mut() {
        *v *= inv_batch;
    }
    let pred = argmax(cache.o_pre.data());
    skim_backward(&cache, params, Some(d_o.data()), None)?;
    Ok((loss, pred))
}

fn stage3_sample(
    params: &mut SkinParams,
    doc: &SegmentedDoc,
    key: &KeySegment,
    target: &Tensor,
    inv_batch: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let skim = skim_forward(doc, params, Some(rng))?;
    let intensive = intensive_forward(key, &skim.r_g, params, Some(rng))?;
    let loss = cross_entropy(&intensive.o, target)?;
    let mut d_o = cross_entropy_backward(&intensive.o, target);
    for v in d_o.data_mut() {
        *v *= inv_batch;
    }
    let pred = argmax(intensive.o.data());
    let d_r_g = intensive_backward(&intensive, params, d_o.data())?;
    skim_backward(&skim, params, None, Some(&d_r_g))?;
    Ok((loss, pred))
}

fn run_epoch(
    params: &mut SkinParams,
    train: &TrainSet,
    keys: Option<&[KeySegment]>,
    cfg: &TrainConfig,
    scope: Scope,
    lr: f64,
    stage: u8,
    epoch: usize,
    states: &mut [AdamState],
) -> Result<EpochStat> {
    let n = train.len();
    let mut rng = epoch_rng(cfg.seed, stage, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut correct = 0usize;
    for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        zero_grads(params, scope);
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
            let (loss, pred) = match keys {
                None => stage1_sample(params, doc, &target, inv_b, &mut rng)?,
                Some(keys) => {
                    stage3_sample(params, doc, &keys[idx], &target, inv_b, &mut rng)?
                }
            };
            ce_sum += loss;
            if pred == doc.label {
                correct += 1;
            }
        }
        let batch_loss = ce_sum * inv_b + l2_value(params, scope, cfg.r_l2);
        if !batch_loss.is_finite() {
            return Err(CoreError::Diverged { stage, epoch, step });
        }
        l2_accum(params, scope, cfg.r_l2);
        adam_scope(params, scope, states, cfg.adam(lr))?;
        loss_sum += batch_loss;
        steps += 1;
    }
    Ok(EpochStat {
        epoch,
        stage,
        mean_loss: loss_sum / steps.max(1) as f64,
        train_acc: correct as f64 / n as f64,
    })
}

/// Plateau detector over a loss curve: stop once the loss has failed to
/// improve on the best seen by at least `min_delta` for `patience`
/// consecutive epochs.
pub fn plateaued(history: &[EpochStat], patience: usize, min_delta: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for stat in history {
        if stat.mean_loss < best - min_delta {
            best = stat.mean_loss;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale > patience
}

/// Stage driver shared by the skim and joint stages. `history` carries the
/// curve so far (non-empty when resuming); `after_epoch` runs between
/// epochs with a consistent view of parameters and optimizer state, which
/// is where checkpointing hooks in.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    params: &mut SkinParams,
    train: &TrainSet,
    keys: Option<&[KeySegment]>,
    cfg: &TrainConfig,
    scope: Scope,
    lr: f64,
    stage: u8,
    total_epochs: usize,
    states: &mut Vec<AdamState>,
    history: &mut Vec<EpochStat>,
    after_epoch: &mut dyn FnMut(&SkinParams, &[AdamState], &[EpochStat]) -> Result<()>,
) -> Result<()> {
    if train.is_empty() {
        return Err(CoreError::Empty("training corpus"));
    }
    if states.is_empty() {
        *states = init_adam_states(params, scope);
    }
    let start = history.len();
    for epoch in start..total_epochs {
        if plateaued(history, cfg.early_stop_patience, cfg.early_stop_min_delta) {
            break;
        }
        let stat = run_epoch(params, train, keys, cfg, scope, lr, stage, epoch, states)?;
        history.push(stat);
        after_epoch(params, states, history)?;
    }
    Ok(())
}

/// Skim-branch training on the skim-stage class output.
pub fn train_stage1(
    params: &mut SkinParams,
    train: &TrainSet,
    cfg: &TrainConfig,
    states: &mut Vec<AdamState>,
    history: &mut Vec<EpochStat>,
    after_epoch: &mut dyn FnMut(&SkinParams, &[AdamState], &[EpochStat]) -> Result<()>,
) -> Result<()> {
    run_stage(
        params,
        train,
        None,
        cfg,
        Scope::Skim,
        cfg.alpha1,
        1,
        cfg.stage1_epochs,
        states,
        history,
        after_epoch,
    )
}

/// One document's frozen stage-2 outcome.
#[derive(Debug, Clone)]
pub struct DistilledDoc {
    pub doc_index: usize,
    pub key: KeySegment,
    pub skim: SkimOutput,
}

/// Stage 2: run the trained skim branch in eval mode over the corpus and
/// freeze one key segment per document.
pub fn distill_dataset(train: &TrainSet, params: &SkinParams) -> Result<Vec<DistilledDoc>> {
    let mut out = Vec::with_capacity(train.len());
    for (i, doc) in train.docs.iter().enumerate() {
        let cache = skim_forward(doc, params, None)?;
        let key = select_key_segment(&cache.g, doc)?;
        out.push(DistilledDoc {
            doc_index: i,
            key,
            skim: cache.output(),
        });
    }
    Ok(out)
}

/// Audit rows for the stage-2 dump.
pub fn selection_rows(distilled: &[DistilledDoc]) -> Vec<SelectionRow> {
    distilled
        .iter()
        .map(|d| SelectionRow {
            doc_id: d.doc_index,
            k: d.key.k,
            start: d.key.start,
            g: d.skim.g.data().to_vec(),
        })
        .collect()
}

/// Joint training of both branches on the intensive output, with the
/// stage-2 segment choices held fixed.
pub fn train_stage3(
    params: &mut SkinParams,
    train: &TrainSet,
    keys: &[KeySegment],
    cfg: &TrainConfig,
    states: &mut Vec<AdamState>,
    history: &mut Vec<EpochStat>,
    after_epoch: &mut dyn FnMut(&SkinParams, &[AdamState], &[EpochStat]) -> Result<()>,
) -> Result<()> {
    if keys.len() != train.len() {
        return Err(CoreError::Validation(format!(
            "{} key segments for {} documents",
            keys.len(),
            train.len()
        )));
    }
    run_stage(
        params,
        train,
        Some(keys),
        cfg,
        Scope::Full,
        cfg.alpha2,
        3,
        cfg.stage3_epochs,
        states,
        history,
        after_epoch,
    )
}

/// No-op epoch hook.
pub fn no_hook() -> impl FnMut(&SkinParams, &[AdamState], &[EpochStat]) -> Result<()> {
    |_: &SkinParams, _: &[AdamState], _: &[EpochStat]| Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_accuracy: Option<f64>,
}

/// Argmax evaluation of any forward function over the held-out set.
/// Per-class F1 is zero when precision+recall is zero; the reported F1 is
/// the macro average.
pub fn evaluate<F>(mut forward: F, test: &TestSet, num_classes: usize) -> Result<EvalReport>
where
    F: FnMut(&SegmentedDoc) -> Result<Tensor>,
{
    if test.is_empty() {
        return Err(CoreError::Empty("evaluation corpus"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for doc in test.docs() {
        let probs = forward(doc)?;
        let pred = argmax(probs.data());
        confusion[doc.label][pred] += 1;
    }
    Ok(report_from_confusion(confusion))
}

/// Metrics from a `[true][pred]` confusion matrix.
pub fn report_from_confusion(confusion: Vec<Vec<usize>>) -> EvalReport {
    let u = confusion.len();
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let trace: usize = (0..u).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(u);
    let mut f1_sum = 0.0;
    for c in 0..u {
        let tp = confusion[c][c];
        let fp: usize = (0..u).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let fnn: usize = (0..u).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fnn == 0 {
            0.0
        } else {
            tp as f64 / (tp + fnn) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    EvalReport {
        accuracy: trace as f64 / total.max(1) as f64,
        macro_f1: f1_sum / u.max(1) as f64,
        per_class,
        confusion,
        selection_accuracy: None,
    }
}

/// Fraction of held-out documents whose argmax segment weight matches the
/// planted key index. `None` when the set carries no ground truth.
pub fn selection_accuracy(params: &SkinParams, test: &TestSet) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (doc, planted) in test.docs().iter().zip(test.planted_keys()) {
        let Some(planted) = planted else { continue };
        let cache = skim_forward(doc, params, None)?;
        if argmax(cache.g.data()) == *planted {
            hits += 1;
        }
        total += 1;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Same measurement over a training split (used for audits of the stage-2
/// dump against planted ground truth).
pub fn selection_accuracy_train(params: &SkinParams, train: &TrainSet) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (doc, planted) in train.docs.iter().zip(&train.planted_keys) {
        let Some(planted) = planted else { continue };
        let cache = skim_forward(doc, params, None)?;
        if argmax(cache.g.data()) == *planted {
            hits += 1;
        }
        total += 1;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Evaluate the full pipeline (skim, select, intensive).
pub fn evaluate_skin(params: &SkinParams, test: &TestSet) -> Result<EvalReport> {
    let mut report = evaluate(
        |doc| skin_predict(doc, params),
        test,
        params.num_classes,
    )?;
    report.selection_accuracy = selection_accuracy(params, test)?;
    Ok(report)
}

/// Evaluate the skim branch alone on its class output.
pub fn evaluate_skim(params: &SkinParams, test: &TestSet) -> Result<EvalReport> {
    let mut report = evaluate(
        |doc| Ok(skim_forward(doc, params, None)?.o_pre),
        test,
        params.num_classes,
    )?;
    report.selection_accuracy = selection_accuracy(params, test)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::{grad_check, GradEval};
    use crate::textio::{synth_generate, SynthSpec};

    fn tiny_corpus(docs: usize, seed: u64) -> (TrainSet, TestSet, SynthSpec) {
        let spec = SynthSpec {
            n: 2,
            l: 8,
            num_classes: 3,
            vocab_size: 40,
            signal_tokens: 4,
            noise_rate: 1.0,
            docs,
            seed,
        };
        let corpus = synth_generate(&spec).unwrap();
        let docs_only: Vec<_> = corpus.iter().map(|(d, _)| d.clone()).collect();
        let keys: Vec<_> = corpus.iter().map(|(_, k)| Some(*k)).collect();
        let train = TrainSet {
            docs: docs_only.clone(),
            planted_keys: keys.clone(),
        };
        let test = TestSet::with_keys(docs_only, keys);
        (train, test, spec)
    }

    fn tiny_params(cfg: &TrainConfig, vocab: usize, seed: u64) -> SkinParams {
        let lite = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            vocab_size: vocab,
            p_dropout: cfg.p_dropout,
        };
        let strong = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 12,
            d_ff: 16,
            max_len: 16,
            vocab_size: vocab,
            p_dropout: cfg.p_dropout,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SkinParams::init(&lite, &strong, 3, cfg.mask_padding, &mut rng).unwrap()
    }

    #[test]
    fn smooth_labels_literal_rule() {
        let t = smooth_labels(0, 3, 0.2, false).unwrap();
        assert_eq!(t.data(), &[0.8, 0.2, 0.2]);
        let t = smooth_labels(1, 2, 0.2, false).unwrap();
        assert_eq!(t.data(), &[0.2, 0.8]);
        let t = smooth_labels(2, 4, 0.0, false).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(smooth_labels(3, 3, 0.2, false).is_err());
    }

    #[test]
    fn smooth_labels_sum_identity() {
        for u in 2..6usize {
            for gamma in [0.0, 0.1, 0.2, 0.35] {
                let t = smooth_labels(u - 1, u, gamma, false).unwrap();
                let sum: f64 = t.data().iter().sum();
                let expect = 1.0 + (u as f64 - 2.0) * gamma;
                assert!((sum - expect).abs() < 1e-12, "u={u} gamma={gamma}");
            }
        }
    }

    #[test]
    fn l2_penalty_hand_case() {
        let w = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_penalty_term(&w, 1.0), 25.0);
        assert_eq!(l2_penalty_term(&w, 0.0), 0.0);
        assert_eq!(l2_penalty_grad(&w, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let f = |inputs: &[Tensor]| -> Result<GradEval> {
            let value = l2_penalty_term(&inputs[0], 0.75);
            Ok(GradEval {
                value,
                grads: vec![l2_penalty_grad(&inputs[0], 0.75)],
            })
        };
        let err = grad_check(f, &[w], 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn l2_excludes_biases_and_norm_params() {
        let cfg = TrainConfig {
            p_dropout: 0.0,
            ..TrainConfig::default()
        };
        let params = tiny_params(&cfg, 40, 1);
        let mut weight_only = 0.0;
        params.visit_all(&mut |_, kind, t| {
            if kind == ParamKind::Weight {
                weight_only += t.data().iter().map(|v| v * v).sum::<f64>();
            }
        });
        assert!((l2_value(&params, Scope::Full, 2.0) - 2.0 * weight_only).abs() < 1e-12);
        // norm gains are 1-filled; including them would add at least d_model
        let mut with_everything = 0.0;
        params.visit_all(&mut |_, _, t| {
            with_everything += t.data().iter().map(|v| v * v).sum::<f64>();
        });
        assert!(with_everything > weight_only + 1.0);
    }

    #[test]
    fn loss_with_zero_smoothing_equals_plain_cross_entropy() {
        let probs = Tensor::from_vec(&[3], vec![0.6, 0.3, 0.1]).unwrap();
        let smoothed = smooth_labels(0, 3, 0.0, false).unwrap();
        let one_hot = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let a = cross_entropy(&probs, &smoothed).unwrap();
        let b = cross_entropy(&probs, &one_hot).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stage1_loss_descends_and_is_reproducible() {
        let cfg = TrainConfig {
            batch_size: 8,
            stage1_epochs: 4,
            alpha1: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let (train, _, spec) = tiny_corpus(48, 5);
        let run = || {
            let mut params = tiny_params(&cfg, spec.vocab_size, 2);
            let mut states = Vec::new();
            let mut history = Vec::new();
            train_stage1(
                &mut params,
                &train,
                &cfg,
                &mut states,
                &mut history,
                &mut no_hook(),
            )
            .unwrap();
            (history, params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert!(h1.last().unwrap().mean_loss < h1[0].mean_loss);
        assert_eq!(h1, h2);
        // bit-identical parameters
        let mut identical = true;
        let mut collect1 = Vec::new();
        p1.visit_all(&mut |_, _, t| collect1.push(t.data().to_vec()));
        let mut i = 0;
        p2.visit_all(&mut |_, _, t| {
            if collect1[i] != t.data() {
                identical = false;
            }
            i += 1;
        });
        assert!(identical);
    }

    #[test]
    fn memorization_of_a_small_set_reaches_full_accuracy() {
        let cfg = TrainConfig {
            batch_size: 4,
            stage1_epochs: 200,
            alpha1: 3e-3,
            p_dropout: 0.0,
            r_l2: 0.0,
            gamma: 0.0,
            early_stop_patience: usize::MAX,
            seed: 3,
            ..TrainConfig::default()
        };
        let (train, _, spec) = tiny_corpus(20, 9);
        let mut params = tiny_params(&cfg, spec.vocab_size, 4);
        let mut states = Vec::new();
        let mut history = Vec::new();
        train_stage1(
            &mut params,
            &train,
            &cfg,
            &mut states,
            &mut history,
            &mut no_hook(),
        )
        .unwrap();
        let best = history
            .iter()
            .map(|s| s.train_acc)
            .fold(0.0f64, f64::max);
        assert!(
            (best - 1.0).abs() < 1e-12,
            "memorization stalled at {best} after {} epochs",
            history.len()
        );
    }

    #[test]
    fn distill_conserves_count_and_matches_argmax() {
        let cfg = TrainConfig {
            p_dropout: 0.0,
            ..TrainConfig::default()
        };
        let (train, _, spec) = tiny_corpus(30, 21);
        let params = tiny_params(&cfg, spec.vocab_size, 8);
        let distilled = distill_dataset(&train, &params).unwrap();
        assert_eq!(distilled.len(), train.len());
        for d in &distilled {
            let g = d.skim.g.data();
            assert_eq!(d.key.k, argmax(g));
        }
        let rows = selection_rows(&distilled);
        assert_eq!(rows.len(), distilled.len());
        assert_eq!(rows[3].doc_id, 3);
    }

    #[test]
    fn stage3_descends_and_reaches_both_heads() {
        let cfg = TrainConfig {
            batch_size: 8,
            stage1_epochs: 2,
            stage3_epochs: 3,
            alpha1: 1e-3,
            alpha2: 1e-3,
            seed: 17,
            ..TrainConfig::default()
        };
        let (train, _, spec) = tiny_corpus(32, 33);
        let mut params = tiny_params(&cfg, spec.vocab_size, 6);
        let mut s1 = Vec::new();
        let mut h1 = Vec::new();
        train_stage1(&mut params, &train, &cfg, &mut s1, &mut h1, &mut no_hook()).unwrap();
        let distilled = distill_dataset(&train, &params).unwrap();
        let keys: Vec<KeySegment> = distilled.into_iter().map(|d| d.key).collect();

        // gradient connectivity after one joint batch
        {
            let mut probe = params.clone();
            let mut rng = epoch_rng(cfg.seed, 3, 0);
            let doc = &train.docs[0];
            let target = smooth_labels(doc.label, 3, cfg.gamma, false).unwrap();
            stage3_sample(&mut probe, doc, &keys[0], &target, 1.0, &mut rng).unwrap();
            let wa_grad_norm: f64 = probe
                .w_a
                .grad()
                .unwrap()
                .iter()
                .map(|v| v.abs())
                .sum();
            let wo_grad_norm: f64 = probe
                .w_o
                .grad()
                .unwrap()
                .iter()
                .map(|v| v.abs())
                .sum();
            assert!(wa_grad_norm > 0.0, "no gradient reached the segment scorer");
            assert!(wo_grad_norm > 0.0, "no gradient reached the output head");
        }

        let mut s3 = Vec::new();
        let mut h3 = Vec::new();
        train_stage3(
            &mut params,
            &train,
            &keys,
            &cfg,
            &mut s3,
            &mut h3,
            &mut no_hook(),
        )
        .unwrap();
        assert!(h3.last().unwrap().mean_loss < h3[0].mean_loss);
    }

    #[test]
    fn divergence_guard_reports_stage_and_step() {
        let cfg = TrainConfig {
            batch_size: 4,
            stage1_epochs: 1,
            ..TrainConfig::default()
        };
        let (train, _, spec) = tiny_corpus(8, 2);
        let mut params = tiny_params(&cfg, spec.vocab_size, 5);
        params.w_a.data_mut()[0] = f64::NAN;
        let mut states = Vec::new();
        let mut history = Vec::new();
        let err = train_stage1(
            &mut params,
            &train,
            &cfg,
            &mut states,
            &mut history,
            &mut no_hook(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Diverged { stage: 1, .. }), "{err}");
    }

    #[test]
    fn evaluate_hand_cases() {
        // all correct
        let report = report_from_confusion(vec![vec![3, 0], vec![0, 2]]);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        // uniform confusion
        let report = report_from_confusion(vec![vec![1, 1], vec![1, 1]]);
        assert!((report.accuracy - 0.5).abs() < 1e-12);
        assert!((report.macro_f1 - 0.5).abs() < 1e-12);
        // constant predictor on 3 balanced classes
        let report = report_from_confusion(vec![vec![5, 0, 0], vec![5, 0, 0], vec![5, 0, 0]]);
        assert!((report.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - 0.5 / 3.0).abs() < 1e-12);
        assert_eq!(report.per_class[1].f1, 0.0);
    }

    #[test]
    fn evaluate_runs_forward_over_test_set() {
        let cfg = TrainConfig {
            p_dropout: 0.0,
            ..TrainConfig::default()
        };
        let (_, test, spec) = tiny_corpus(12, 13);
        let params = tiny_params(&cfg, spec.vocab_size, 3);
        let report = evaluate_skim(&params, &test).unwrap();
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, test.len());
        assert!(report.selection_accuracy.is_some());
        let report = evaluate_skin(&params, &test).unwrap();
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
    }

    #[test]
    fn plateau_detector() {
        let mk = |losses: &[f64]| -> Vec<EpochStat> {
            losses
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochStat {
                    epoch: i,
                    stage: 1,
                    mean_loss: l,
                    train_acc: 0.0,
                })
                .collect()
        };
        assert!(!plateaued(&mk(&[1.0, 0.9, 0.8]), 3, 1e-4));
        assert!(plateaued(&mk(&[1.0, 0.99999, 0.99999, 0.99999, 0.99999]), 3, 1e-4));
        assert!(!plateaued(&mk(&[1.0, 0.9, 0.8, 0.7, 0.6]), 3, 1e-4));
    }
}
