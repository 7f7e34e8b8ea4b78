//! Binary checkpoint format.
//!
//! Layout: magic bytes `DAUG`, a little-endian u32 format version, a
//! length-prefixed JSON header (plan, resolved config, position
//! counters, per-parameter Adam step counts), a manifest of
//! `(name, rows, cols, offset)` entries sorted by name, and the f64
//! arrays little-endian. Saving the result of a load reproduces the
//! input byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ndauto::{AdamConfig, AdamState, Tensor};

use crate::encoder::{EncoderParams, ModelConfig};
use crate::losses::ClassifierHead;
use crate::params::ParamContainer;
use crate::pe::{init_pair, PeConfig, PeKind, PeModule};
use crate::pipeline::{AdamOpt, AugPair, AugmentationKind, ModelState, TrainPlan};
use crate::seeds;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DAUG";
pub const FORMAT_VERSION: u32 = 1;

/// A full training snapshot: plan, parameters, optimizer state and
/// position. Round-trips bit-exactly through [`Checkpoint::save`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub plan: TrainPlan,
    pub config: ModelConfig,
    pub phase_index: u32,
    pub step_in_phase: u64,
    pub global_step: u64,
    pub best_dev: Option<f64>,
    pub state: ModelState,
    pub opt: AdamOpt,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    plan: TrainPlan,
    config: ModelConfig,
    phase_index: u32,
    step_in_phase: u64,
    global_step: u64,
    best_dev: Option<f64>,
    /// Master seed; batching and dropout derive from it, so position
    /// counters plus this seed are the complete RNG state.
    rng_seed: u64,
    /// Prefix modules stored in collapsed (direct) form.
    collapsed: bool,
    adam_learning_rate: f64,
    adam_steps: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn capture(
        plan: &TrainPlan,
        state: &ModelState,
        opt: &AdamOpt,
        phase_index: u32,
        step_in_phase: u64,
        global_step: u64,
        best_dev: Option<f64>,
    ) -> Self {
        Checkpoint {
            plan: plan.clone(),
            config: state.config.clone(),
            phase_index,
            step_in_phase,
            global_step,
            best_dev,
            state: state.clone(),
            opt: opt.clone(),
        }
    }

    fn is_collapsed(&self) -> bool {
        let direct = |m: &PeModule| {
            matches!(
                m,
                PeModule::Prefix(p) if matches!(p.form, crate::pe::PrefixForm::Direct { .. })
            )
        };
        match &self.state.modules {
            AugPair::None => false,
            AugPair::Shared(m) => direct(m),
            AugPair::Pair(a, b) => direct(a) || direct(b),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            plan: self.plan.clone(),
            config: self.config.clone(),
            phase_index: self.phase_index,
            step_in_phase: self.step_in_phase,
            global_step: self.global_step,
            best_dev: self.best_dev,
            rng_seed: self.plan.seed,
            collapsed: self.is_collapsed(),
            adam_learning_rate: self.opt.learning_rate,
            adam_steps: self
                .opt
                .states
                .iter()
                .map(|(k, s)| (k.clone(), s.t))
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize header: {e}")))?;

        // name → (rows, cols, data)
        let mut arrays: BTreeMap<String, (u32, u32, Vec<f64>)> = BTreeMap::new();
        for (name, tensor) in self.state.all_tensors() {
            arrays.insert(
                format!("model.{name}"),
                (tensor.rows() as u32, tensor.cols() as u32, tensor.data),
            );
        }
        for (key, adam) in &self.opt.states {
            arrays.insert(format!("adam.{key}.m"), (1, adam.m.len() as u32, adam.m.clone()));
            arrays.insert(format!("adam.{key}.v"), (1, adam.v.len() as u32, adam.v.clone()));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, (rows, cols, data)) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (data.len() * 8) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, (_, _, data)) in &arrays {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic bytes {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = cur.u32()? as usize;
        let header_bytes = cur.take(header_len)?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

        let n_entries = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("corrupt manifest name: {e}")))?;
            let rows = cur.u32()?;
            let cols = cur.u32()?;
            let offset = cur.u64()?;
            manifest.push((name, rows as usize, cols as usize, offset as usize));
        }
        let data_len = cur.u64()? as usize;
        let data = cur.take(data_len)?;
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "trailing garbage: {} bytes after the data section",
                bytes.len() - cur.pos
            )));
        }

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, rows, cols, offset) in manifest {
            let len = rows * cols * 8;
            let slice = data.get(offset..offset + len).ok_or_else(|| {
                Error::Checkpoint(format!("array {name} overruns the data section"))
            })?;
            let values: Vec<f64> = slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name.clone(), Tensor::matrix(rows, cols, values)?);
        }

        // Rebuild the model with the right shapes, then overwrite.
        let mut state = rebuild_state_shapes(&header)?;
        let model_tensors: std::collections::HashMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("model.")
                    .map(|name| (name.to_string(), v.clone()))
            })
            .collect();
        load_state(&mut state, &model_tensors)?;

        let mut opt = AdamOpt::new(header.adam_learning_rate);
        for (key, t) in &header.adam_steps {
            let m = tensors
                .get(&format!("adam.{key}.m"))
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.{key}.m")))?;
            let v = tensors
                .get(&format!("adam.{key}.v"))
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.{key}.v")))?;
            opt.states.insert(
                key.clone(),
                AdamState {
                    m: m.data.clone(),
                    v: v.data.clone(),
                    t: *t,
                    config: AdamConfig::new(header.adam_learning_rate),
                },
            );
        }

        Ok(Checkpoint {
            plan: header.plan,
            config: header.config,
            phase_index: header.phase_index,
            step_in_phase: header.step_in_phase,
            global_step: header.global_step,
            best_dev: header.best_dev,
            state,
            opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)
            .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
    }

    /// Loads and validates a checkpoint; nothing is mutated on error.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn rebuild_state_shapes(header: &Header) -> Result<ModelState> {
    let config = header.config.clone();
    let encoder = EncoderParams::init(&config, 0);
    let plan = &header.plan;
    let modules = match plan.augmentation {
        AugmentationKind::Dropout | AugmentationKind::TokenReplacement => AugPair::None,
        AugmentationKind::PrefixSame => {
            let pe = PeConfig {
                kind: PeKind::Prefix,
                ..plan.pe
            };
            let (m, _) = init_pair(&pe, &config, 0)?;
            AugPair::Shared(m)
        }
        kind => {
            let pe = PeConfig {
                kind: kind.pe_kind().expect("module-based augmentation"),
                ..plan.pe
            };
            let (m1, m2) = init_pair(&pe, &config, 0)?;
            AugPair::Pair(Box::new(m1), Box::new(m2))
        }
    };
    let head = ClassifierHead::init(config.hidden_dim, seeds::derive(0, &[0x4E]));
    let mut state = ModelState {
        config,
        augmentation: plan.augmentation,
        encoder,
        modules,
        head,
    };
    if header.collapsed {
        let cfg = state.config.clone();
        match &mut state.modules {
            AugPair::Shared(PeModule::Prefix(p)) => p.collapse(&cfg)?,
            AugPair::Pair(a, b) => {
                if let PeModule::Prefix(p) = a.as_mut() {
                    p.collapse(&cfg)?;
                }
                if let PeModule::Prefix(p) = b.as_mut() {
                    p.collapse(&cfg)?;
                }
            }
            _ => {}
        }
    }
    Ok(state)
}

fn load_state(
    state: &mut ModelState,
    tensors: &std::collections::HashMap<String, Tensor>,
) -> Result<()> {
    let ModelState {
        encoder,
        modules,
        head,
        ..
    } = state;
    let mut groups: Vec<(&str, &mut dyn ParamContainer)> = vec![("phi", encoder), ("head", head)];
    match modules {
        AugPair::None => {}
        AugPair::Shared(m) => groups.push(("theta", m)),
        AugPair::Pair(a, b) => {
            groups.push(("theta1", a.as_mut()));
            groups.push(("theta2", b.as_mut()));
        }
    }
    for (ns, container) in groups {
        let scoped: std::collections::HashMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&format!("{ns}."))
                    .map(|name| (name.to_string(), v.clone()))
            })
            .collect();
        container
            .load_from(&scoped)
            .map_err(|e| Error::Checkpoint(format!("namespace {ns}: {e}")))?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            Error::Checkpoint("length overflow while reading".into())
        })?;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
