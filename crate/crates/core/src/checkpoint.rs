//! Versioned binary checkpoints: named f64 tensors plus integer and string
//! metadata. f64 payloads round-trip bit-exactly (raw little-endian bits).

use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::model::SkinParams;
use crate::tensor::{AdamState, Tensor};
use crate::training::{EpochStat, Scope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SKCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub model_kind: String,
    pub strings: Vec<(String, String)>,
    pub meta: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model_kind: &str) -> Self {
        Checkpoint {
            model_kind: model_kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push_meta(&mut self, name: &str, value: u64) {
        self.meta.push((name.to_string(), value));
    }

    pub fn push_f64_meta(&mut self, name: &str, value: f64) {
        self.meta.push((name.to_string(), value.to_bits()));
    }

    pub fn meta_value(&self, name: &str) -> Option<u64> {
        self.meta.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn f64_meta(&self, name: &str) -> Option<f64> {
        self.meta_value(name).map(f64::from_bits)
    }

    pub fn push_string(&mut self, name: &str, value: &str) {
        self.strings.push((name.to_string(), value.to_string()));
    }

    pub fn string_value(&self, name: &str) -> Option<&str> {
        self.strings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor) {
        self.tensors.push((name.to_string(), tensor.clone()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.model_kind);
        buf.extend_from_slice(&(self.strings.len() as u32).to_le_bytes());
        for (name, value) in &self.strings {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(value.len() as u32).to_le_bytes());
            buf.extend_from_slice(value.as_bytes());
        }
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (name, value) in &self.meta {
            write_str(&mut buf, name);
            buf.extend_from_slice(&value.to_le_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_str(&mut buf, name);
            buf.push(tensor.shape().len() as u8);
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "{}: bad magic bytes",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let model_kind = r.string()?;
        let mut strings = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let len = r.u32()? as usize;
            let value = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            strings.push((name, value));
        }
        let mut meta = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            meta.push((name, r.u64()?));
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(r.u64()?));
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint {
            model_kind,
            strings,
            meta,
            tensors,
        })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| CoreError::Checkpoint(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Pipeline snapshots
// ---------------------------------------------------------------------------

fn push_history(ck: &mut Checkpoint, history: &[EpochStat]) {
    ck.push_meta("history.len", history.len() as u64);
    for (i, stat) in history.iter().enumerate() {
        ck.push_meta(&format!("history.{i}.epoch"), stat.epoch as u64);
        ck.push_meta(&format!("history.{i}.stage"), stat.stage as u64);
        ck.push_f64_meta(&format!("history.{i}.loss"), stat.mean_loss);
        ck.push_f64_meta(&format!("history.{i}.acc"), stat.train_acc);
    }
}

fn read_history(ck: &Checkpoint) -> Vec<EpochStat> {
    let len = ck.meta_value("history.len").unwrap_or(0) as usize;
    (0..len)
        .map(|i| EpochStat {
            epoch: ck.meta_value(&format!("history.{i}.epoch")).unwrap_or(0) as usize,
            stage: ck.meta_value(&format!("history.{i}.stage")).unwrap_or(0) as u8,
            mean_loss: ck.f64_meta(&format!("history.{i}.loss")).unwrap_or(0.0),
            train_acc: ck.f64_meta(&format!("history.{i}.acc")).unwrap_or(0.0),
        })
        .collect()
}

fn push_adam(ck: &mut Checkpoint, states: &[AdamState]) {
    ck.push_meta("adam.len", states.len() as u64);
    for (i, st) in states.iter().enumerate() {
        ck.push_meta(&format!("adam.{i}.t"), st.t);
        let m = Tensor::from_vec(&[st.m.len()], st.m.clone()).expect("adam m");
        let v = Tensor::from_vec(&[st.v.len()], st.v.clone()).expect("adam v");
        ck.push_tensor(&format!("adam.{i}.m"), &m);
        ck.push_tensor(&format!("adam.{i}.v"), &v);
    }
}

fn read_adam(ck: &Checkpoint) -> Result<Vec<AdamState>> {
    let len = ck.meta_value("adam.len").unwrap_or(0) as usize;
    let mut states = Vec::with_capacity(len);
    for i in 0..len {
        let m = ck
            .tensor(&format!("adam.{i}.m"))
            .ok_or_else(|| CoreError::Checkpoint(format!("missing adam.{i}.m")))?;
        let v = ck
            .tensor(&format!("adam.{i}.v"))
            .ok_or_else(|| CoreError::Checkpoint(format!("missing adam.{i}.v")))?;
        states.push(AdamState {
            m: m.data().to_vec(),
            v: v.data().to_vec(),
            t: ck.meta_value(&format!("adam.{i}.t")).unwrap_or(0),
        });
    }
    Ok(states)
}

/// Serialize the pipeline plus optimizer state and loss history.
/// `model_kind` is `"skim"` after stage 1 or `"skin"` after stage 3.
pub fn pack_skin(
    model_kind: &str,
    params: &SkinParams,
    states: &[AdamState],
    history: &[EpochStat],
) -> Checkpoint {
    let mut ck = Checkpoint::new(model_kind);
    ck.push_string(
        "lite_config",
        &serde_json::to_string(&params.lite.config).expect("config serializes"),
    );
    ck.push_string(
        "strong_config",
        &serde_json::to_string(&params.strong.config).expect("config serializes"),
    );
    ck.push_meta("num_classes", params.num_classes as u64);
    ck.push_meta("mask_padding", params.mask_padding as u64);
    params.visit_all(&mut |name, _, t| ck.push_tensor(&name, t));
    push_adam(&mut ck, states);
    push_history(&mut ck, history);
    ck
}

/// Rebuild the pipeline from a checkpoint.
pub fn unpack_skin(ck: &Checkpoint) -> Result<(SkinParams, Vec<AdamState>, Vec<EpochStat>)> {
    let lite_cfg: EncoderConfig = serde_json::from_str(
        ck.string_value("lite_config")
            .ok_or_else(|| CoreError::Checkpoint("missing lite_config".into()))?,
    )
    .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let strong_cfg: EncoderConfig = serde_json::from_str(
        ck.string_value("strong_config")
            .ok_or_else(|| CoreError::Checkpoint("missing strong_config".into()))?,
    )
    .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let num_classes = ck
        .meta_value("num_classes")
        .ok_or_else(|| CoreError::Checkpoint("missing num_classes".into()))? as usize;
    let mask_padding = ck.meta_value("mask_padding").unwrap_or(0) != 0;
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut params = SkinParams::init(
        &lite_cfg,
        &strong_cfg,
        num_classes,
        mask_padding,
        &mut throwaway,
    )?;
    let mut missing: Option<String> = None;
    params.visit_all_mut(&mut |name, _, t| {
        match ck.tensor(&name) {
            Some(stored) if stored.shape() == t.shape() => {
                t.data_mut().copy_from_slice(stored.data());
            }
            _ => missing = Some(name),
        }
    });
    if let Some(name) = missing {
        return Err(CoreError::Checkpoint(format!(
            "missing or mismatched tensor `{name}`"
        )));
    }
    let states = read_adam(ck)?;
    let history = read_history(ck);
    Ok((params, states, history))
}

/// Serialize a baseline classifier.
pub fn pack_baseline(
    params: &crate::baselines::BaselineParams,
    states: &[AdamState],
    history: &[EpochStat],
) -> Checkpoint {
    let kind = format!("baseline:{}", params.config.kind.name());
    let mut ck = Checkpoint::new(&kind);
    ck.push_string(
        "encoder_config",
        &serde_json::to_string(&params.encoder.config).expect("config serializes"),
    );
    ck.push_string(
        "baseline_config",
        &serde_json::to_string(&params.config).expect("config serializes"),
    );
    ck.push_meta("num_classes", params.num_classes as u64);
    params.visit(&mut |name, _, t| ck.push_tensor(&name, t));
    push_adam(&mut ck, states);
    push_history(&mut ck, history);
    ck
}

pub fn unpack_baseline(
    ck: &Checkpoint,
) -> Result<(
    crate::baselines::BaselineParams,
    Vec<AdamState>,
    Vec<EpochStat>,
)> {
    let encoder_cfg: EncoderConfig = serde_json::from_str(
        ck.string_value("encoder_config")
            .ok_or_else(|| CoreError::Checkpoint("missing encoder_config".into()))?,
    )
    .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let baseline_cfg: crate::baselines::BaselineConfig = serde_json::from_str(
        ck.string_value("baseline_config")
            .ok_or_else(|| CoreError::Checkpoint("missing baseline_config".into()))?,
    )
    .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let num_classes = ck
        .meta_value("num_classes")
        .ok_or_else(|| CoreError::Checkpoint("missing num_classes".into()))? as usize;
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut params = crate::baselines::BaselineParams::init(
        baseline_cfg,
        &encoder_cfg,
        num_classes,
        &mut throwaway,
    )?;
    let mut missing: Option<String> = None;
    params.visit_mut(&mut |name, _, t| {
        match ck.tensor(&name) {
            Some(stored) if stored.shape() == t.shape() => {
                t.data_mut().copy_from_slice(stored.data());
            }
            _ => missing = Some(name),
        }
    });
    if let Some(name) = missing {
        return Err(CoreError::Checkpoint(format!(
            "missing or mismatched tensor `{name}`"
        )));
    }
    let states = read_adam(ck)?;
    let history = read_history(ck);
    Ok((params, states, history))
}

/// Adam scope implied by a checkpoint's model kind.
pub fn scope_for_kind(kind: &str) -> Scope {
    if kind == "skim" {
        Scope::Skim
    } else {
        Scope::Full
    }
}
