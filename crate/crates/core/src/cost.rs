//! Time and memory cost measurement versus input length, with quadratic
//! regression for extrapolation past each method's trainable range.
//!
//! Two length-adaptation modes exist for the skim/intensive pipeline:
//! `skin-invariable` keeps the segment count fixed and grows the segment
//! length with the input, `skin-variable` keeps the segment length fixed
//! and grows the segment count. The analytic model counts attention-score
//! elements on raw window lengths: the quadratic series carries each
//! method's L-dependent terms (for the variable mode that is the skim
//! branch only, whose element count is exactly linear in L), while the
//! total series adds the L-independent intensive pass for absolute
//! comparisons such as the savings figure.

use crate::baselines::{baseline_backward, baseline_forward, BaselineConfig, BaselineKind, BaselineParams};
use crate::encoder::{attention_cost, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::model::{intensive_backward, intensive_forward, select_key_segment, skim_backward, skim_forward, SkinParams};
use crate::tensor::{alloc, cross_entropy, cross_entropy_backward};
use crate::textio::{synth_generate, SegmentedDoc, SynthSpec};
use crate::training::{
    adam_over, init_adam_states_over, l2_accum_over, smooth_labels, zero_grads_over, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bert,
    Slidewindow,
    SkinInvariable,
    SkinVariable,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Bert,
        Method::Slidewindow,
        Method::SkinInvariable,
        Method::SkinVariable,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bert => "bert",
            Method::Slidewindow => "slidewindow",
            Method::SkinInvariable => "skin-invariable",
            Method::SkinVariable => "skin-variable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(Method::Bert),
            "slidewindow" => Ok(Method::Slidewindow),
            "skin-invariable" => Ok(Method::SkinInvariable),
            "skin-variable" => Ok(Method::SkinVariable),
            other => Err(CoreError::Config(format!(
                "unknown method `{other}` (expected bert|slidewindow|skin-invariable|skin-variable)"
            ))),
        }
    }
}

/// Encoder size presets for the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimPreset {
    /// Desk-scale encoders; every method is actually trainable on CPU.
    Toy,
    /// Reference BERT-Tiny/Base dims; lengths beyond each method's
    /// trainable cap are extrapolation-only.
    Full,
}

impl DimPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DimPreset::Toy),
            "full" => Ok(DimPreset::Full),
            other => Err(CoreError::Config(format!(
                "unknown dim preset `{other}` (expected toy|full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DimPreset::Toy => "toy",
            DimPreset::Full => "full",
        }
    }

    pub fn lite(&self, vocab: usize, max_len: usize) -> EncoderConfig {
        match self {
            DimPreset::Toy => EncoderConfig::lite_toy(vocab, max_len),
            DimPreset::Full => EncoderConfig::lite_full(vocab, max_len),
        }
    }

    pub fn strong(&self, vocab: usize, max_len: usize) -> EncoderConfig {
        match self {
            DimPreset::Toy => EncoderConfig::strong_toy(vocab, max_len),
            DimPreset::Full => EncoderConfig::strong_full(vocab, max_len),
        }
    }

    /// Longest input each method can actually be trained on at these dims
    /// (`None` = unlimited). At reference dims the caps mirror where the
    /// respective method runs out of a 512-token encoder or GPU memory.
    pub fn trainable_cap(&self, method: Method) -> Option<usize> {
        match self {
            DimPreset::Toy => None,
            DimPreset::Full => match method {
                Method::Bert => Some(512),
                Method::Slidewindow => Some(1536),
                Method::SkinInvariable => Some(2560),
                Method::SkinVariable => None,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: DimPreset,
    /// Segment count for slide-window and the invariable mode.
    pub fixed_segments: usize,
    /// Segment length for the variable mode.
    pub fixed_seg_len: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: Method::ALL.to_vec(),
            lengths: vec![128, 256, 512, 1024, 2048],
            trials: 5,
            batch_size: 16,
            seed: 7,
            dims: DimPreset::Toy,
            fixed_segments: 8,
            fixed_seg_len: 32,
        }
    }
}

/// Segment geometry implied by a method at a given length.
pub fn skin_geometry(
    method: Method,
    len: usize,
    fixed_segments: usize,
    fixed_seg_len: usize,
) -> Result<(usize, usize)> {
    match method {
        Method::SkinVariable => {
            let l = fixed_seg_len;
            if len % l != 0 || len / l < 2 {
                return Err(CoreError::Config(format!(
                    "length {len} invalid for skin-variable with segment length {l}; \
                     valid lengths are multiples of {l} starting at {}",
                    2 * l
                )));
            }
            Ok((len / l, l))
        }
        Method::SkinInvariable | Method::Slidewindow => {
            let n = fixed_segments;
            if len % n != 0 || (len / n) % 4 != 0 || len / n < 4 {
                return Err(CoreError::Config(format!(
                    "length {len} invalid for {} with {n} segments; valid lengths are \
                     multiples of {}",
                    method.name(),
                    4 * n
                )));
            }
            Ok((n, len / n))
        }
        Method::Bert => Ok((2, len / 2)),
    }
}

/// Key-span length used by the intensive pass for segment length `l`.
fn span_len(l: usize) -> usize {
    l + l / 2
}

/// Modeled attention elements for one document at length `len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeledCost {
    /// The L-dependent scaling series (see module docs).
    pub quadratic: u128,
    /// Scaling series plus any L-independent intensive term.
    pub total: u128,
    /// Linear activation floor `Σ layers·d·L` over every encoder call.
    pub linear: u128,
}

pub fn modeled_cost(
    method: Method,
    len: usize,
    cfg: &SweepConfig,
    lite: &EncoderConfig,
    strong: &EncoderConfig,
) -> Result<ModeledCost> {
    match method {
        Method::Bert => {
            let c = attention_cost(strong, len);
            Ok(ModeledCost {
                quadratic: c.quadratic,
                total: c.quadratic,
                linear: c.linear,
            })
        }
        Method::Slidewindow => {
            let (n, l) = skin_geometry(method, len, cfg.fixed_segments, cfg.fixed_seg_len)?;
            let c = attention_cost(strong, l);
            Ok(ModeledCost {
                quadratic: n as u128 * c.quadratic,
                total: n as u128 * c.quadratic,
                linear: n as u128 * c.linear,
            })
        }
        Method::SkinInvariable => {
            let (n, l) = skin_geometry(method, len, cfg.fixed_segments, cfg.fixed_seg_len)?;
            let skim = attention_cost(lite, l);
            let intensive = attention_cost(strong, span_len(l));
            // the intensive window grows with l here, so the whole series
            // stays proportional to L²
            Ok(ModeledCost {
                quadratic: n as u128 * skim.quadratic + intensive.quadratic,
                total: n as u128 * skim.quadratic + intensive.quadratic,
                linear: n as u128 * skim.linear + intensive.linear,
            })
        }
        Method::SkinVariable => {
            let (n, l) = skin_geometry(method, len, cfg.fixed_segments, cfg.fixed_seg_len)?;
            let skim = attention_cost(lite, l);
            let intensive = attention_cost(strong, span_len(l));
            // at fixed l the intensive window is L-independent: it joins the
            // total but not the scaling series
            Ok(ModeledCost {
                quadratic: n as u128 * skim.quadratic,
                total: n as u128 * skim.quadratic + intensive.quadratic,
                linear: n as u128 * skim.linear + intensive.linear,
            })
        }
    }
}

/// One benchmark point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSample {
    pub method: Method,
    pub len: usize,
    /// Median wall time of the timed trials; absent for extrapolation-only
    /// points.
    pub wall_time_s: Option<f64>,
    pub trial_times_s: Vec<f64>,
    pub modeled_quadratic_elems: u128,
    pub modeled_total_elems: u128,
    pub modeled_linear_elems: u128,
    pub measured_peak_elems: u64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedRun {
    pub method: Method,
    pub len: usize,
    pub timed: bool,
}

/// Validate a sweep and mark which points are actually timed; points past a
/// method's trainable cap are extrapolation-only.
pub fn plan_sweep(cfg: &SweepConfig) -> Result<Vec<PlannedRun>> {
    if cfg.lengths.is_empty() {
        return Err(CoreError::Empty("sweep lengths"));
    }
    if !cfg.lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err(CoreError::Config(
            "sweep lengths must be strictly ascending".into(),
        ));
    }
    if cfg.trials == 0 || cfg.batch_size == 0 {
        return Err(CoreError::Config(
            "sweep needs at least one trial and a non-empty batch".into(),
        ));
    }
    let mut plan = Vec::new();
    for &method in &cfg.methods {
        for &len in &cfg.lengths {
            // geometry must be valid regardless of whether we time it
            skin_geometry(method, len, cfg.fixed_segments, cfg.fixed_seg_len)?;
            let timed = match cfg.dims.trainable_cap(method) {
                Some(cap) => len <= cap,
                None => true,
            };
            plan.push(PlannedRun { method, len, timed });
        }
    }
    Ok(plan)
}

fn bench_docs(n: usize, l: usize, batch: usize, seed: u64) -> Result<Vec<SegmentedDoc>> {
    let spec = SynthSpec {
        n,
        l,
        num_classes: 3,
        vocab_size: 64,
        signal_tokens: (l / 4).clamp(1, 8),
        noise_rate: 1.0,
        docs: batch,
        seed,
    };
    Ok(synth_generate(&spec)?.into_iter().map(|(d, _)| d).collect())
}

fn mix_seed(seed: u64, method: Method, len: usize) -> u64 {
    seed ^ (method as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (len as u64).wrapping_mul(0x2545_F491_4F6C_DD1D)
}

/// One full training step (forward, backward, update) over the batch for a
/// skim/intensive mode. Returns nothing; gradients live and die inside.
fn skin_training_step(
    params: &mut SkinParams,
    states: &mut [crate::tensor::AdamState],
    docs: &[SegmentedDoc],
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    zero_grads_over(|f| params.visit_all_mut(f));
    let inv_b = 1.0 / docs.len() as f64;
    for doc in docs {
        let target = smooth_labels(doc.label, params.num_classes, tc.gamma, false)?;
        let skim = skim_forward(doc, params, Some(rng))?;
        let key = select_key_segment(&skim.g, doc)?;
        let intensive = intensive_forward(&key, &skim.r_g, params, Some(rng))?;
        let mut d_o = cross_entropy_backward(&intensive.o, &target);
        for v in d_o.data_mut() {
            *v *= inv_b;
        }
        let d_r_g = intensive_backward(&intensive, params, d_o.data())?;
        skim_backward(&skim, params, None, Some(&d_r_g))?;
    }
    l2_accum_over(|f| params.visit_all_mut(f), tc.r_l2);
    adam_over(
        |f| params.visit_all_mut(f),
        states,
        tc.adam(tc.alpha2),
    )?;
    Ok(())
}

fn baseline_training_step(
    params: &mut BaselineParams,
    states: &mut [crate::tensor::AdamState],
    docs: &[SegmentedDoc],
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    zero_grads_over(|f| params.visit_mut(f));
    let inv_b = 1.0 / docs.len() as f64;
    for doc in docs {
        let target = smooth_labels(doc.label, params.num_classes, tc.gamma, false)?;
        let cache = baseline_forward(doc, params, Some(rng))?;
        let mut d_o = cross_entropy_backward(&cache.probs, &target);
        for v in d_o.data_mut() {
            *v *= inv_b;
        }
        // keep the loss value live so the step matches training arithmetic
        let _ = cross_entropy(&cache.probs, &target)?;
        baseline_backward(&cache, params, d_o.data())?;
    }
    l2_accum_over(|f| params.visit_mut(f), tc.r_l2);
    adam_over(|f| params.visit_mut(f), states, tc.adam(tc.alpha2))?;
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run the sweep: per (method, length), one full training step per trial on
/// a fresh synthetic batch, with one untimed warm-up; wall time is the
/// median of the timed trials and peak live elements come from the tensor
/// allocation counter. Everything runs single-threaded on the caller's
/// thread.
pub fn run_cost_sweep(cfg: &SweepConfig) -> Result<Vec<CostSample>> {
    let plan = plan_sweep(cfg)?;
    let tc = TrainConfig::default();
    let mut samples = Vec::with_capacity(plan.len());
    for run in &plan {
        let (n, l) = skin_geometry(run.method, run.len, cfg.fixed_segments, cfg.fixed_seg_len)?;
        let vocab = 64;
        let lite = cfg.dims.lite(vocab, l + 2);
        let strong = match run.method {
            Method::Bert => cfg.dims.strong(vocab, run.len + 2),
            Method::Slidewindow => cfg.dims.strong(vocab, l + 2),
            _ => cfg.dims.strong(vocab, span_len(l) + 2),
        };
        let modeled = modeled_cost(run.method, run.len, cfg, &lite, &strong)?;

        let mut trial_times = Vec::new();
        let mut peak = 0u64;
        if run.timed {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, run.method, run.len));
            let docs = bench_docs(n, l, cfg.batch_size, mix_seed(cfg.seed, run.method, run.len))?;
            match run.method {
                Method::Bert | Method::Slidewindow => {
                    let kind = if run.method == Method::Bert {
                        BaselineKind::Truncate512
                    } else {
                        BaselineKind::SlideWindow
                    };
                    let bcfg = BaselineConfig {
                        kind,
                        cap: run.len,
                        head_len: 128,
                        mask_padding: false,
                    };
                    let mut params = BaselineParams::init(bcfg, &strong, 3, &mut rng)?;
                    let mut states = init_adam_states_over(|f| params.visit(f));
                    for trial in 0..=cfg.trials {
                        alloc::reset_peak();
                        let t0 = Instant::now();
                        baseline_training_step(&mut params, &mut states, &docs, &tc, &mut rng)?;
                        let dt = t0.elapsed().as_secs_f64();
                        peak = peak.max(alloc::peak_elems());
                        if trial > 0 {
                            trial_times.push(dt);
                        }
                    }
                }
                Method::SkinInvariable | Method::SkinVariable => {
                    let mut params = SkinParams::init(&lite, &strong, 3, false, &mut rng)?;
                    let mut states =
                        init_adam_states_over(|f| params.visit_all(f));
                    for trial in 0..=cfg.trials {
                        alloc::reset_peak();
                        let t0 = Instant::now();
                        skin_training_step(&mut params, &mut states, &docs, &tc, &mut rng)?;
                        let dt = t0.elapsed().as_secs_f64();
                        peak = peak.max(alloc::peak_elems());
                        if trial > 0 {
                            trial_times.push(dt);
                        }
                    }
                }
            }
            debug_assert!(
                peak as u128 >= modeled.linear,
                "peak {} below modeled linear floor {}",
                peak,
                modeled.linear
            );
        }
        let wall = if trial_times.is_empty() {
            None
        } else {
            let mut copy = trial_times.clone();
            Some(median(&mut copy))
        };
        samples.push(CostSample {
            method: run.method,
            len: run.len,
            wall_time_s: wall,
            trial_times_s: trial_times,
            modeled_quadratic_elems: modeled.quadratic,
            modeled_total_elems: modeled.total,
            modeled_linear_elems: modeled.linear,
            measured_peak_elems: peak,
            extrapolated: !run.timed,
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Quadratic regression
// ---------------------------------------------------------------------------

/// Least-squares quadratic `y = c0 + c1·L + c2·L²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub residual_norm: f64,
}

impl QuadFit {
    pub fn eval(&self, len: f64) -> f64 {
        self.c0 + self.c1 * len + self.c2 * len * len
    }
}

/// Ordinary least squares on the basis `{1, L, L²}` via the normal
/// equations, solved in a column-scaled basis for conditioning. Exact (to
/// round-off) on three distinct points; duplicate abscissae make the system
/// singular.
pub fn quad_fit(points: &[(f64, f64)]) -> Result<QuadFit> {
    if points.len() < 3 {
        return Err(CoreError::Config(format!(
            "quadratic fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut xs: Vec<f64> = points.iter().map(|(x, _)| *x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(CoreError::Singular(
            "quadratic fit needs 3 distinct abscissae".into(),
        ));
    }
    let scale = points
        .iter()
        .map(|(x, _)| x.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);

    // normal equations AᵀA·a = Aᵀy in the scaled basis t = L/scale
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(x, y) in points {
        let t = x / scale;
        let basis = [1.0, t, t * t];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += basis[i] * basis[j];
            }
            aty[i] += basis[i] * y;
        }
    }

    // 3x3 Gaussian elimination with partial pivoting
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&ata[i]);
        m[i][3] = aty[i];
    }
    for col in 0..3 {
        let mut pivot = col;
        for row in col + 1..3 {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        if m[pivot][col].abs() < 1e-300 {
            return Err(CoreError::Singular("rank-deficient quadratic fit".into()));
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut a = [0.0f64; 3];
    for i in (0..3).rev() {
        let mut s = m[i][3];
        for j in i + 1..3 {
            s -= m[i][j] * a[j];
        }
        a[i] = s / m[i][i];
    }

    let fit = QuadFit {
        c0: a[0],
        c1: a[1] / scale,
        c2: a[2] / (scale * scale),
        residual_norm: 0.0,
    };
    let residual_norm = points
        .iter()
        .map(|&(x, y)| {
            let r = y - fit.eval(x);
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(QuadFit {
        residual_norm,
        ..fit
    })
}

/// Log-log slope over the largest decade of L (points with `L ≥ max/10`).
pub fn scaling_exponent(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(CoreError::Config(format!(
            "scaling exponent needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    if !samples.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(CoreError::Config(
            "scaling exponent needs strictly increasing lengths".into(),
        ));
    }
    for &(x, y) in samples {
        if x <= 0.0 || y <= 0.0 {
            return Err(CoreError::Validation(format!(
                "scaling exponent needs positive data, got ({x}, {y})"
            )));
        }
    }
    let max_l = samples.last().unwrap().0;
    let kept: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(x, _)| *x >= max_l / 10.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if kept.len() < 2 {
        return Err(CoreError::Config(
            "fewer than 2 samples in the top decade".into(),
        ));
    }
    let n = kept.len() as f64;
    let sx: f64 = kept.iter().map(|(x, _)| x).sum();
    let sy: f64 = kept.iter().map(|(_, y)| y).sum();
    let sxx: f64 = kept.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = kept.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(CoreError::Singular("degenerate abscissae".into()));
    }
    Ok((n * sxy - sx * sy) / denom)
}

// ---------------------------------------------------------------------------
// Savings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub len: usize,
    /// `100·(1 − skin/bert)`.
    pub percent: f64,
    pub skin_value: f64,
    pub bert_value: f64,
    pub skin_extrapolated: bool,
    pub bert_extrapolated: bool,
}

fn series_value_at(series: &[(usize, f64)], len: usize) -> Result<(f64, bool)> {
    if let Some(&(_, v)) = series.iter().find(|(x, _)| *x == len) {
        return Ok((v, false));
    }
    let pts: Vec<(f64, f64)> = series.iter().map(|&(x, y)| (x as f64, y)).collect();
    let fit = quad_fit(&pts).map_err(|_| {
        CoreError::Config(format!(
            "no value at L={len} and too few points to extrapolate"
        ))
    })?;
    Ok((fit.eval(len as f64), true))
}

/// Percentage of the modeled memory term saved by the pipeline relative to
/// full-attention BERT at a given length, extrapolating (and flagging)
/// whichever side lacks a sample there.
pub fn savings_report(
    skin: &[(usize, f64)],
    bert: &[(usize, f64)],
    len: usize,
) -> Result<Savings> {
    let (skin_value, skin_extrapolated) = series_value_at(skin, len)?;
    let (bert_value, bert_extrapolated) = series_value_at(bert, len)?;
    if bert_value == 0.0 {
        return Err(CoreError::Validation("reference value is zero".into()));
    }
    Ok(Savings {
        len,
        percent: 100.0 * (1.0 - skin_value / bert_value),
        skin_value,
        bert_value,
        skin_extrapolated,
        bert_extrapolated,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub lengths: Vec<usize>,
    pub modeled_quadratic_elems: Vec<u128>,
    pub modeled_total_elems: Vec<u128>,
    pub modeled_linear_elems: Vec<u128>,
    pub peak_elems: Vec<u64>,
    pub extrapolated: Vec<bool>,
    pub modeled_exponent: Option<f64>,
    pub wall_times_s: Vec<Option<f64>>,
    pub time_exponent: Option<f64>,
    pub time_fit: Option<QuadFit>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub dims: String,
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub savings: Option<Savings>,
}

/// Group samples per method and compute fits/exponents. The savings figure
/// compares modeled totals of `skin-variable` (falling back to
/// `skin-invariable`) against `bert` at the largest common length.
pub fn summarize(cfg: &SweepConfig, samples: &[CostSample]) -> Result<BenchSummary> {
    let mut methods = Vec::new();
    for &method in &cfg.methods {
        let rows: Vec<&CostSample> = samples.iter().filter(|s| s.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let lengths: Vec<usize> = rows.iter().map(|s| s.len).collect();
        let modeled: Vec<(f64, f64)> = rows
            .iter()
            .map(|s| (s.len as f64, s.modeled_quadratic_elems as f64))
            .collect();
        let modeled_exponent = scaling_exponent(&modeled).ok();
        let timed: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|s| s.wall_time_s.map(|t| (s.len as f64, t)))
            .collect();
        let time_exponent = scaling_exponent(&timed).ok();
        let time_fit = quad_fit(&timed).ok();
        methods.push(MethodSummary {
            method: method.name().to_string(),
            lengths,
            modeled_quadratic_elems: rows.iter().map(|s| s.modeled_quadratic_elems).collect(),
            modeled_total_elems: rows.iter().map(|s| s.modeled_total_elems).collect(),
            modeled_linear_elems: rows.iter().map(|s| s.modeled_linear_elems).collect(),
            peak_elems: rows.iter().map(|s| s.measured_peak_elems).collect(),
            extrapolated: rows.iter().map(|s| s.extrapolated).collect(),
            modeled_exponent,
            wall_times_s: rows.iter().map(|s| s.wall_time_s).collect(),
            time_exponent,
            time_fit,
        });
    }

    let series = |m: Method| -> Vec<(usize, f64)> {
        samples
            .iter()
            .filter(|s| s.method == m)
            .map(|s| (s.len, s.modeled_total_elems as f64))
            .collect()
    };
    let skin_series = {
        let v = series(Method::SkinVariable);
        if v.is_empty() {
            series(Method::SkinInvariable)
        } else {
            v
        }
    };
    let bert_series = series(Method::Bert);
    let savings = if !skin_series.is_empty() && !bert_series.is_empty() {
        let len = skin_series
            .iter()
            .map(|(l, _)| *l)
            .filter(|l| bert_series.iter().any(|(b, _)| b == l))
            .max();
        match len {
            Some(len) => Some(savings_report(&skin_series, &bert_series, len)?),
            None => None,
        }
    } else {
        None
    };

    Ok(BenchSummary {
        dims: cfg.dims.name().to_string(),
        batch_size: cfg.batch_size,
        trials: cfg.trials,
        seed: cfg.seed,
        methods,
        savings,
    })
}

/// CSV with one row per timed trial:
/// `method,L,trial,wall_time_s,modeled_elems,peak_elems`.
pub fn write_csv(path: &Path, samples: &[CostSample]) -> Result<()> {
    let mut out = String::from("method,L,trial,wall_time_s,modeled_elems,peak_elems\n");
    for s in samples {
        for (trial, t) in s.trial_times_s.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:.9},{},{}\n",
                s.method.name(),
                s.len,
                trial,
                t,
                s.modeled_quadratic_elems,
                s.measured_peak_elems
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Gnuplot-friendly blocks (two blank lines between methods):
/// `L median_time modeled_elems peak_elems extrapolated`.
pub fn write_dat(path: &Path, samples: &[CostSample]) -> Result<()> {
    let mut out = String::new();
    let mut seen: Vec<Method> = Vec::new();
    for s in samples {
        if !seen.contains(&s.method) {
            seen.push(s.method);
        }
    }
    for (i, method) in seen.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("# {}\n", method.name()));
        out.push_str("# L wall_time_s modeled_elems peak_elems extrapolated\n");
        for s in samples.iter().filter(|s| s.method == *method) {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                s.len,
                s.wall_time_s
                    .map_or("nan".to_string(), |t| format!("{t:.9}")),
                s.modeled_quadratic_elems,
                s.measured_peak_elems,
                u8::from(s.extrapolated)
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &BenchSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// The modeled series that drive scope-level checks (used by tests and the
/// acceptance suite without timing anything).
pub fn modeled_series(cfg: &SweepConfig, method: Method) -> Result<Vec<(usize, u128, u128)>> {
    let mut out = Vec::new();
    for &len in &cfg.lengths {
        let (_, l) = skin_geometry(method, len, cfg.fixed_segments, cfg.fixed_seg_len)?;
        let vocab = 64;
        let lite = cfg.dims.lite(vocab, l + 2);
        let strong = match method {
            Method::Bert => cfg.dims.strong(vocab, len + 2),
            Method::Slidewindow => cfg.dims.strong(vocab, l + 2),
            _ => cfg.dims.strong(vocab, span_len(l) + 2),
        };
        let m = modeled_cost(method, len, cfg, &lite, &strong)?;
        out.push((len, m.quadratic, m.total));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sweep() -> SweepConfig {
        SweepConfig {
            methods: Method::ALL.to_vec(),
            lengths: vec![128, 256, 512, 1024, 2048],
            trials: 1,
            batch_size: 1,
            seed: 3,
            dims: DimPreset::Toy,
            fixed_segments: 8,
            fixed_seg_len: 32,
        }
    }

    #[test]
    fn geometry_rules() {
        // variable mode: fixed segment length, growing count
        assert_eq!(
            skin_geometry(Method::SkinVariable, 1024, 8, 128).unwrap(),
            (8, 128)
        );
        assert_eq!(
            skin_geometry(Method::SkinVariable, 2048, 8, 128).unwrap(),
            (16, 128)
        );
        // invariable mode: fixed count, growing length
        assert_eq!(
            skin_geometry(Method::SkinInvariable, 2048, 8, 128).unwrap(),
            (8, 256)
        );
        let err = skin_geometry(Method::SkinVariable, 100, 8, 32).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
    }

    #[test]
    fn bert_modeled_cost_quadruples_per_doubling() {
        let cfg = toy_sweep();
        let series = modeled_series(&cfg, Method::Bert).unwrap();
        for w in series.windows(2) {
            assert_eq!(w[1].1, 4 * w[0].1);
        }
    }

    #[test]
    fn variable_mode_scaling_series_doubles_per_doubling() {
        let cfg = toy_sweep();
        let series = modeled_series(&cfg, Method::SkinVariable).unwrap();
        for w in series.windows(2) {
            assert_eq!(w[1].1, 2 * w[0].1);
        }
        // while the total series carries the constant intensive term
        let constant = series[0].2 - series[0].1;
        for (_, quad, total) in &series {
            assert_eq!(total - quad, constant);
        }
    }

    #[test]
    fn invariable_mode_stays_exactly_quadratic() {
        let cfg = toy_sweep();
        let series = modeled_series(&cfg, Method::SkinInvariable).unwrap();
        for w in series.windows(2) {
            assert_eq!(w[1].1, 4 * w[0].1);
            assert_eq!(w[1].2, 4 * w[0].2);
        }
    }

    #[test]
    fn plan_marks_extrapolation_only_points_at_full_dims() {
        let cfg = SweepConfig {
            dims: DimPreset::Full,
            methods: vec![Method::Bert],
            lengths: vec![256, 512, 1024, 2048, 4096],
            fixed_seg_len: 128,
            ..toy_sweep()
        };
        let plan = plan_sweep(&cfg).unwrap();
        let timed: Vec<bool> = plan.iter().map(|p| p.timed).collect();
        assert_eq!(timed, vec![true, true, false, false, false]);
        // at toy dims everything runs
        let cfg = SweepConfig {
            dims: DimPreset::Toy,
            methods: vec![Method::Bert],
            lengths: vec![256, 512, 1024, 2048, 4096],
            ..toy_sweep()
        };
        assert!(plan_sweep(&cfg).unwrap().iter().all(|p| p.timed));
    }

    #[test]
    fn plan_rejects_unsorted_lengths() {
        let cfg = SweepConfig {
            lengths: vec![256, 128],
            ..toy_sweep()
        };
        assert!(plan_sweep(&cfg).is_err());
    }

    #[test]
    fn quad_fit_exact_square() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 5.0, 8.0]
            .iter()
            .map(|&x| (x, x * x))
            .collect();
        let fit = quad_fit(&pts).unwrap();
        assert!(fit.c0.abs() < 1e-9, "{fit:?}");
        assert!(fit.c1.abs() < 1e-9, "{fit:?}");
        assert!((fit.c2 - 1.0).abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn quad_fit_linear_data_zeroes_the_quadratic_term() {
        let pts: Vec<(f64, f64)> = [1.0, 4.0, 9.0, 16.0]
            .iter()
            .map(|&x| (x, 3.0 + 2.0 * x))
            .collect();
        let fit = quad_fit(&pts).unwrap();
        assert!(fit.c2.abs() < 1e-9, "{fit:?}");
        assert!((fit.c1 - 2.0).abs() < 1e-9);
        assert!((fit.c0 - 3.0).abs() < 1e-9);
    }

    #[test]
    fn quad_fit_rejects_duplicate_abscissae() {
        let pts = vec![(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)];
        assert!(matches!(quad_fit(&pts), Err(CoreError::Singular(_))));
    }

    #[test]
    fn quad_fit_beats_or_matches_grid_search_oracle_on_noisy_data() {
        // independent oracle: sse minimized over a coefficient grid
        let truth = (4.0, -1.5, 0.75);
        let noise = [0.03, -0.02, 0.01, -0.04, 0.02, 0.0];
        let pts: Vec<(f64, f64)> = (1..=6)
            .map(|i| {
                let x = i as f64;
                (
                    x,
                    truth.0 + truth.1 * x + truth.2 * x * x + noise[i - 1],
                )
            })
            .collect();
        let sse = |c: (f64, f64, f64)| -> f64 {
            pts.iter()
                .map(|&(x, y)| {
                    let r = y - (c.0 + c.1 * x + c.2 * x * x);
                    r * r
                })
                .sum()
        };
        let mut best = (0.0, 0.0, 0.0);
        let mut best_sse = f64::INFINITY;
        for i in -80..=80 {
            for j in -40..=40 {
                for k in 0..=30 {
                    let c = (
                        truth.0 + i as f64 * 0.01,
                        truth.1 + j as f64 * 0.01,
                        truth.2 + k as f64 * 0.002 - 0.03,
                    );
                    let s = sse(c);
                    if s < best_sse {
                        best_sse = s;
                        best = c;
                    }
                }
            }
        }
        let fit = quad_fit(&pts).unwrap();
        let fit_sse = sse((fit.c0, fit.c1, fit.c2));
        assert!(fit_sse <= best_sse + 1e-9, "{fit_sse} vs {best_sse}");
        assert!((fit.c0 - best.0).abs() < 0.02);
        assert!((fit.c1 - best.1).abs() < 0.02);
        assert!((fit.c2 - best.2).abs() < 0.005);
    }

    #[test]
    fn quad_fit_extrapolations_are_a_fixed_point() {
        let pts: Vec<(f64, f64)> = [32.0, 64.0, 128.0, 256.0]
            .iter()
            .map(|&x| (x, 5.0 + 0.25 * x + 0.01 * x * x))
            .collect();
        let fit = quad_fit(&pts).unwrap();
        let predicted: Vec<(f64, f64)> = [512.0, 1024.0, 2048.0, 4096.0]
            .iter()
            .map(|&x| (x, fit.eval(x)))
            .collect();
        let refit = quad_fit(&predicted).unwrap();
        assert!((refit.c0 - fit.c0).abs() < 1e-9, "{refit:?} vs {fit:?}");
        assert!((refit.c1 - fit.c1).abs() < 1e-9);
        assert!((refit.c2 - fit.c2).abs() < 1e-9);
    }

    #[test]
    fn scaling_exponent_exact_power_laws() {
        let quad: Vec<(f64, f64)> = [128.0, 256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&x| (x, 5.0 * x * x))
            .collect();
        assert!((scaling_exponent(&quad).unwrap() - 2.0).abs() < 1e-9);
        let lin: Vec<(f64, f64)> = [128.0, 256.0, 512.0, 1024.0]
            .iter()
            .map(|&x| (x, 7.0 * x))
            .collect();
        assert!((scaling_exponent(&lin).unwrap() - 1.0).abs() < 1e-9);
        let mixed: Vec<(f64, f64)> = [128.0, 256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&x| (x, x + 0.001 * x * x))
            .collect();
        let e = scaling_exponent(&mixed).unwrap();
        assert!(e > 1.0 && e < 2.0, "{e}");
    }

    #[test]
    fn scaling_exponent_rejects_nonpositive_values() {
        let pts = vec![(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)];
        assert!(scaling_exponent(&pts).is_err());
    }

    #[test]
    fn savings_arithmetic() {
        // same-config hand arithmetic: (16·128² + 192²)/2048²
        let skin = vec![(2048usize, (16 * 128 * 128 + 192 * 192) as f64)];
        let bert = vec![(2048usize, (2048 * 2048) as f64)];
        let s = savings_report(&skin, &bert, 2048).unwrap();
        assert_eq!(s.percent, 92.87109375);
        assert!(!s.skin_extrapolated && !s.bert_extrapolated);

        let s = savings_report(&[(100, 5.0)], &[(100, 5.0)], 100).unwrap();
        assert_eq!(s.percent, 0.0);
        let s = savings_report(&[(100, 1.0)], &[(100, 10.0)], 100).unwrap();
        assert!((s.percent - 90.0).abs() < 1e-12);
    }

    #[test]
    fn savings_flags_extrapolated_side() {
        let skin: Vec<(usize, f64)> = vec![(128, 10.0), (256, 20.0), (512, 40.0), (1024, 80.0)];
        let bert: Vec<(usize, f64)> = vec![(128, 100.0), (256, 400.0), (512, 1600.0)];
        let s = savings_report(&skin, &bert, 1024).unwrap();
        assert!(!s.skin_extrapolated);
        assert!(s.bert_extrapolated);
        // bert extrapolates on its exact quadratic: 100·(L/128)²
        assert!((s.bert_value - 6400.0).abs() < 1e-6, "{}", s.bert_value);
    }

    #[test]
    fn sweep_smoke_run_produces_consistent_samples() {
        let cfg = SweepConfig {
            methods: vec![Method::Bert, Method::SkinVariable],
            lengths: vec![64, 128],
            trials: 1,
            batch_size: 1,
            seed: 11,
            dims: DimPreset::Toy,
            fixed_segments: 8,
            fixed_seg_len: 32,
        };
        let samples = run_cost_sweep(&cfg).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert!(!s.extrapolated);
            assert_eq!(s.trial_times_s.len(), 1);
            assert!(s.wall_time_s.unwrap() > 0.0);
            assert!(s.measured_peak_elems as u128 >= s.modeled_linear_elems);
        }
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("cost.csv");
        write_csv(&csv, &samples).unwrap();
        let body = std::fs::read_to_string(&csv).unwrap();
        // header + methods × lengths × trials
        assert_eq!(body.lines().count(), 1 + 2 * 2);
        let dat = dir.path().join("cost.dat");
        write_dat(&dat, &samples).unwrap();
        let summary = summarize(&cfg, &samples).unwrap();
        let json = dir.path().join("summary.json");
        write_summary_json(&json, &summary).unwrap();
        assert!(summary.savings.is_some());
    }
}
