//! Corpus loading for the CLI: JSONL records + vocabulary + segment
//! geometry into the training/evaluation set types.

use crate::config::{DataSection, SynthRunConfig, RUN_CONFIG_FILE};
use anyhow::{bail, Context, Result};
use skin_core::textio::{load_jsonl, records_to_docs, Vocab};
use skin_core::{TestSet, TrainSet};
use std::path::Path;

/// Point a data section at a corpus directory produced by `skin synth`:
/// file paths plus geometry come from the directory's run config.
pub fn apply_data_dir(data: &mut DataSection, dir: &Path) -> Result<()> {
    let cfg_path = dir.join(RUN_CONFIG_FILE);
    let cfg: SynthRunConfig = crate::config::load_config(&cfg_path, "synth")
        .with_context(|| format!("reading corpus metadata from {}", cfg_path.display()))?;
    data.train = Some(dir.join("train.jsonl"));
    data.test = Some(dir.join("test.jsonl"));
    data.vocab = Some(dir.join("vocab.txt"));
    data.n = cfg.corpus.n;
    data.l = cfg.corpus.l;
    data.classes = cfg.corpus.classes;
    Ok(())
}

pub fn load_vocab(data: &DataSection) -> Result<Vocab> {
    let path = data
        .vocab
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no vocabulary path configured (set data.vocab or --data)"))?;
    Ok(Vocab::load(path)?)
}

pub fn load_train_set(data: &DataSection, vocab: &Vocab) -> Result<TrainSet> {
    let path = data
        .train
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no training data configured (set data.train or --data)"))?;
    let records = load_jsonl(path, data.classes)?;
    if records.is_empty() {
        bail!("training corpus {} is empty", path.display());
    }
    let (docs, keys) = records_to_docs(&records, vocab, data.n, data.l)?;
    Ok(TrainSet {
        docs,
        planted_keys: keys,
    })
}

pub fn load_test_set(data: &DataSection, vocab: &Vocab) -> Result<TestSet> {
    let path = data
        .test
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no test data configured (set data.test or --data)"))?;
    let records = load_jsonl(path, data.classes)?;
    if records.is_empty() {
        bail!("test corpus {} is empty", path.display());
    }
    let (docs, keys) = records_to_docs(&records, vocab, data.n, data.l)?;
    Ok(TestSet::with_keys(docs, keys))
}
