//! Command implementations. Every command prepares its output directory,
//! writes the resolved run config first, then produces its artifacts.

use crate::config::{
    prepare_out_dir, write_run_config, BenchRunConfig, EvalRunConfig, SynthRunConfig,
    TrainRunConfig,
};
use crate::data::{load_test_set, load_train_set, load_vocab};
use anyhow::{bail, Context, Result};
use skin_core::baselines::{
    evaluate_baseline, train_baseline, BaselineConfig, BaselineKind, BaselineParams,
};
use skin_core::checkpoint::{
    pack_baseline, pack_skin, unpack_baseline, unpack_skin, Checkpoint,
};
use skin_core::cost;
use skin_core::encoder::EncoderConfig;
use skin_core::model::{KeySegment, SelectionRow, SkinParams};
use skin_core::textio::{doc_to_text, save_jsonl, split_train_test, synth_generate, Record, SynthSpec};
use skin_core::training::{
    distill_dataset, evaluate_skim, evaluate_skin, selection_rows, train_stage1, train_stage3,
    EpochStat,
};
use skin_core::TrainSet;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(mut cfg: SynthRunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.command = Some("synth".into());
    let spec = SynthSpec {
        n: cfg.corpus.n,
        l: cfg.corpus.l,
        num_classes: cfg.corpus.classes,
        vocab_size: cfg.corpus.vocab_size,
        signal_tokens: cfg.corpus.signal_tokens,
        noise_rate: cfg.corpus.noise_rate,
        docs: cfg.corpus.docs,
        seed: cfg.corpus.seed,
    };
    spec.validate()?;
    prepare_out_dir(out, force)?;
    write_run_config(out, &cfg)?;

    let vocab = spec.vocab();
    let corpus = synth_generate(&spec)?;
    let records: Vec<Record> = corpus
        .iter()
        .map(|(doc, key)| Record {
            text: doc_to_text(doc, &vocab),
            label: doc.label,
            key_index: Some(*key),
        })
        .collect();
    let (train, test) = split_train_test(&records, cfg.corpus.eval_fraction, cfg.corpus.seed)?;
    save_jsonl(&out.join("train.jsonl"), &train)?;
    save_jsonl(&out.join("test.jsonl"), &test)?;
    vocab.save(&out.join("vocab.txt"))?;

    print_corpus_stats(cfg.corpus.classes, &train, &test);
    println!(
        "wrote {} train / {} test records to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn print_corpus_stats(classes: usize, train: &[Record], test: &[Record]) {
    let count = |recs: &[Record], label: usize| recs.iter().filter(|r| r.label == label).count();
    println!("{:<8}{:>8}{:>8}{:>8}", "label", "train", "test", "total");
    for label in 0..classes {
        let tr = count(train, label);
        let te = count(test, label);
        println!("{label:<8}{tr:>8}{te:>8}{:>8}", tr + te);
    }
    println!(
        "{:<8}{:>8}{:>8}{:>8}",
        "total",
        train.len(),
        test.len(),
        train.len() + test.len()
    );
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn encoder_presets(
    preset: &str,
    vocab_size: usize,
    lite_max: usize,
    strong_max: usize,
    p_dropout: f64,
) -> Result<(EncoderConfig, EncoderConfig)> {
    let (mut lite, mut strong) = match preset {
        "toy" => (
            EncoderConfig::lite_toy(vocab_size, lite_max),
            EncoderConfig::strong_toy(vocab_size, strong_max),
        ),
        "full" => (
            EncoderConfig::lite_full(vocab_size, lite_max),
            EncoderConfig::strong_full(vocab_size, strong_max),
        ),
        other => bail!("unknown preset `{other}` (expected toy|full)"),
    };
    lite.p_dropout = p_dropout;
    strong.p_dropout = p_dropout;
    Ok((lite, strong))
}

fn span_len(l: usize) -> usize {
    l + l / 2
}

/// Write one checkpoint file atomically enough for our purposes.
fn save_ckpt(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)?;
    Ok(())
}

fn write_train_log(out: &Path, histories: &[&[EpochStat]]) -> Result<()> {
    let mut body = String::from("epoch,stage,mean_loss,train_acc\n");
    for history in histories {
        for s in *history {
            body.push_str(&format!(
                "{},{},{},{}\n",
                s.epoch, s.stage, s.mean_loss, s.train_acc
            ));
        }
    }
    std::fs::write(out.join("train_log.csv"), body)?;
    Ok(())
}

pub fn cmd_train(
    mut cfg: TrainRunConfig,
    out: &Path,
    stage: Option<u8>,
    force: bool,
) -> Result<()> {
    cfg.command = Some("train".into());
    if stage.is_none() {
        prepare_out_dir(out, force)?;
    } else {
        std::fs::create_dir_all(out)?;
    }
    write_run_config(out, &cfg)?;

    match cfg.model.as_str() {
        "skin" => train_skin(&cfg, out, stage),
        "truncate" | "headtail" | "slidewindow" => train_baseline_cmd(&cfg, out),
        other => bail!("unknown model `{other}` (expected skin|truncate|headtail|slidewindow)"),
    }
}

fn stage1_path(out: &Path) -> PathBuf {
    out.join("stage1.ckpt")
}
fn stage3_path(out: &Path) -> PathBuf {
    out.join("stage3.ckpt")
}
fn selections_path(out: &Path) -> PathBuf {
    out.join("selections.jsonl")
}

fn train_skin(cfg: &TrainRunConfig, out: &Path, stage: Option<u8>) -> Result<()> {
    let stages: Vec<u8> = match stage {
        None => vec![1, 2, 3],
        Some(s @ 1..=3) => vec![s],
        Some(s) => bail!("stage {s} out of range (1..=3)"),
    };
    let vocab = load_vocab(&cfg.data)?;
    let train = load_train_set(&cfg.data, &vocab)?;
    let (lite_cfg, strong_cfg) = encoder_presets(
        &cfg.preset,
        vocab.len(),
        cfg.data.l + 2,
        span_len(cfg.data.l) + 2,
        cfg.train.p_dropout,
    )?;

    let mut params: Option<SkinParams> = None;
    let mut stage1_history: Vec<EpochStat> = Vec::new();
    let mut stage3_history: Vec<EpochStat> = Vec::new();

    for &s in &stages {
        match s {
            1 => {
                let partial = out.join("stage1.partial.ckpt");
                let (mut p, mut states, mut history) = if partial.exists() {
                    let ck = Checkpoint::load(&partial)?;
                    let (p, states, history) = unpack_skin(&ck)?;
                    println!("resuming stage 1 from epoch {}", history.len());
                    (p, states, history)
                } else {
                    let p = SkinParams::init_from_seed(
                        &lite_cfg,
                        &strong_cfg,
                        cfg.data.classes,
                        cfg.train.mask_padding,
                        cfg.train.seed,
                    )?;
                    (p, Vec::new(), Vec::new())
                };
                let partial_path = partial.clone();
                train_stage1(
                    &mut p,
                    &train,
                    &cfg.train,
                    &mut states,
                    &mut history,
                    &mut |params, states, history| {
                        pack_skin("skim", params, states, history).save(&partial_path)
                    },
                )?;
                save_ckpt(&pack_skin("skim", &p, &states, &history), &stage1_path(out))?;
                let _ = std::fs::remove_file(&partial);
                println!(
                    "stage 1 done: {} epochs, final loss {:.6}",
                    history.len(),
                    history.last().map_or(f64::NAN, |h| h.mean_loss)
                );
                stage1_history = history;
                params = Some(p);
            }
            2 => {
                let p = match params.take() {
                    Some(p) => p,
                    None => {
                        let ck = Checkpoint::load(&stage1_path(out)).with_context(|| {
                            format!("stage 2 needs {}", stage1_path(out).display())
                        })?;
                        let (p, _, history) = unpack_skin(&ck)?;
                        stage1_history = history;
                        p
                    }
                };
                let distilled = distill_dataset(&train, &p)?;
                let rows = selection_rows(&distilled);
                let mut body = String::new();
                for row in &rows {
                    body.push_str(&serde_json::to_string(row)?);
                    body.push('\n');
                }
                std::fs::write(selections_path(out), body)?;
                println!("stage 2 done: {} selections written", rows.len());
                params = Some(p);
            }
            3 => {
                let partial = out.join("stage3.partial.ckpt");
                let keys = load_selections(out, &train, cfg.data.l)?;
                let (mut p, mut states, mut history) = if partial.exists() {
                    let ck = Checkpoint::load(&partial)?;
                    let (p, states, history) = unpack_skin(&ck)?;
                    println!("resuming stage 3 from epoch {}", history.len());
                    (p, states, history)
                } else {
                    let p = match params.take() {
                        Some(p) => p,
                        None => {
                            let ck = Checkpoint::load(&stage1_path(out)).with_context(|| {
                                format!("stage 3 needs {}", stage1_path(out).display())
                            })?;
                            let (p, _, history) = unpack_skin(&ck)?;
                            stage1_history = history;
                            p
                        }
                    };
                    (p, Vec::new(), Vec::new())
                };
                let partial_path = partial.clone();
                train_stage3(
                    &mut p,
                    &train,
                    &keys,
                    &cfg.train,
                    &mut states,
                    &mut history,
                    &mut |params, states, history| {
                        pack_skin("skin", params, states, history).save(&partial_path)
                    },
                )?;
                save_ckpt(&pack_skin("skin", &p, &states, &history), &stage3_path(out))?;
                let _ = std::fs::remove_file(&partial);
                println!(
                    "stage 3 done: {} epochs, final loss {:.6}",
                    history.len(),
                    history.last().map_or(f64::NAN, |h| h.mean_loss)
                );
                stage3_history = history;
                params = Some(p);
            }
            _ => unreachable!(),
        }
    }

    // gather any history not produced in this invocation so the log is whole
    if stage1_history.is_empty() {
        if let Ok(ck) = Checkpoint::load(&stage1_path(out)) {
            if let Ok((_, _, h)) = unpack_skin(&ck) {
                stage1_history = h;
            }
        }
    }
    if stage3_history.is_empty() {
        if let Ok(ck) = Checkpoint::load(&stage3_path(out)) {
            if let Ok((_, _, h)) = unpack_skin(&ck) {
                stage3_history = h;
            }
        }
    }
    write_train_log(out, &[&stage1_history, &stage3_history])?;
    Ok(())
}

/// Rebuild the frozen key segments from the stage-2 dump: the span is the
/// recorded window of the (unchanged) training document.
fn load_selections(out: &Path, train: &TrainSet, l: usize) -> Result<Vec<KeySegment>> {
    let path = selections_path(out);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("stage 3 needs {}", path.display()))?;
    let mut keys: Vec<Option<KeySegment>> = vec![None; train.len()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SelectionRow = serde_json::from_str(line)
            .with_context(|| format!("selection dump line {}", i + 1))?;
        if row.doc_id >= train.len() {
            bail!(
                "selection dump row {} refers to document {} of {}",
                i + 1,
                row.doc_id,
                train.len()
            );
        }
        let doc = &train.docs[row.doc_id];
        let span = doc.tokens[row.start..row.start + span_len(l)].to_vec();
        keys[row.doc_id] = Some(KeySegment {
            k: row.k,
            start: row.start,
            span,
        });
    }
    keys.into_iter()
        .enumerate()
        .map(|(i, k)| k.ok_or_else(|| anyhow::anyhow!("no selection for document {i}")))
        .collect()
}

fn train_baseline_cmd(cfg: &TrainRunConfig, out: &Path) -> Result<()> {
    let kind = BaselineKind::parse(&cfg.model)?;
    let vocab = load_vocab(&cfg.data)?;
    let train = load_train_set(&cfg.data, &vocab)?;
    let bcfg = BaselineConfig {
        kind,
        cap: cfg.head.truncate_cap,
        head_len: cfg.head.head_tail_len,
        mask_padding: cfg.train.mask_padding,
    };
    let max_len = bcfg.required_max_len(cfg.data.n, cfg.data.l);
    let (_, strong_cfg) = encoder_presets(
        &cfg.preset,
        vocab.len(),
        cfg.data.l + 2,
        max_len,
        cfg.train.p_dropout,
    )?;

    let partial = out.join("baseline.partial.ckpt");
    let (mut params, mut states, mut history) = if partial.exists() {
        let ck = Checkpoint::load(&partial)?;
        let (p, states, history) = unpack_baseline(&ck)?;
        println!("resuming baseline from epoch {}", history.len());
        (p, states, history)
    } else {
        let p = BaselineParams::init_from_seed(bcfg, &strong_cfg, cfg.data.classes, cfg.train.seed)?;
        (p, Vec::new(), Vec::new())
    };
    let partial_path = partial.clone();
    train_baseline(
        &mut params,
        &train,
        &cfg.train,
        cfg.train.stage3_epochs,
        &mut states,
        &mut history,
        &mut |params, states, history| {
            pack_baseline(params, states, history).save(&partial_path)
        },
    )?;
    save_ckpt(
        &pack_baseline(&params, &states, &history),
        &out.join("baseline.ckpt"),
    )?;
    let _ = std::fs::remove_file(&partial);
    write_train_log(out, &[&history])?;
    println!(
        "baseline `{}` done: {} epochs, final loss {:.6}",
        kind.name(),
        history.len(),
        history.last().map_or(f64::NAN, |h| h.mean_loss)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(mut cfg: EvalRunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.command = Some("eval".into());
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no checkpoint configured (set checkpoint or --checkpoint)"))?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let expected_kind = match cfg.model.as_str() {
        "skin" => "skin".to_string(),
        "prc" => "skim".to_string(),
        "truncate" | "headtail" | "slidewindow" => format!("baseline:{}", cfg.model),
        other => bail!("unknown model `{other}` (expected skin|prc|truncate|headtail|slidewindow)"),
    };
    if ck.model_kind != expected_kind {
        bail!(
            "checkpoint {} holds a `{}` model but `{}` evaluation was requested",
            ckpt_path.display(),
            ck.model_kind,
            cfg.model
        );
    }

    prepare_out_dir(out, force)?;
    write_run_config(out, &cfg)?;

    let vocab = load_vocab(&cfg.data)?;
    let test = load_test_set(&cfg.data, &vocab)?;
    let report = match cfg.model.as_str() {
        "skin" => {
            let (params, _, _) = unpack_skin(&ck)?;
            evaluate_skin(&params, &test)?
        }
        "prc" => {
            let (params, _, _) = unpack_skin(&ck)?;
            evaluate_skim(&params, &test)?
        }
        _ => {
            let (params, _, _) = unpack_baseline(&ck)?;
            evaluate_baseline(&params, &test)?
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench(mut cfg: BenchRunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.command = Some("bench".into());
    let sweep = cfg.sweep.to_sweep_config()?;
    cost::plan_sweep(&sweep)?;
    prepare_out_dir(out, force)?;
    write_run_config(out, &cfg)?;

    let samples = cost::run_cost_sweep(&sweep)?;
    let summary = cost::summarize(&sweep, &samples)?;
    cost::write_csv(&out.join("cost.csv"), &samples)?;
    cost::write_dat(&out.join("cost.dat"), &samples)?;
    cost::write_summary_json(&out.join("summary.json"), &summary)?;

    for m in &summary.methods {
        println!(
            "{:<16} modeled exponent {:>7}  time exponent {:>7}",
            m.method,
            m.modeled_exponent
                .map_or("n/a".into(), |e| format!("{e:.3}")),
            m.time_exponent.map_or("n/a".into(), |e| format!("{e:.3}")),
        );
    }
    if let Some(s) = &summary.savings {
        println!(
            "modeled memory savings at L={}: {:.2}%{}",
            s.len,
            s.percent,
            if s.skin_extrapolated || s.bert_extrapolated {
                " (extrapolated)"
            } else {
                ""
            }
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

