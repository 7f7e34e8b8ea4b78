//! Parameter-efficient augmentation modules: prefix key/value rows
//! produced from a seed matrix through a reparametrization MLP, plus
//! Adapter and LoRA alternatives. Each kind is instantiated twice to
//! form an augmentation pair, and all three expose the same binding
//! interface so the encoder and pipeline are agnostic to the kind.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ndauto::{NodeId, Tape, Tensor};

use crate::encoder::ModelConfig;
use crate::params::{bind_container, LeafSet, ParamContainer};
use crate::seeds;
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    Prefix,
    Adapter,
    Lora,
}

/// Shape hyperparameters of an augmentation module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub kind: PeKind,
    /// Bottleneck dimension r for Adapter / LoRA.
    pub bottleneck: usize,
    /// LoRA scaling factor, `s ≥ 1`.
    pub lora_scale: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            kind: PeKind::Prefix,
            bottleneck: 4,
            lora_scale: 1.0,
        }
    }
}

/// One materialized key/value prefix pair for a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixPair {
    pub key: Tensor,
    pub value: Tensor,
}

/// Trainable prefix storage. The reparametrized form keeps a seed
/// matrix plus a two-layer MLP (dims `d → 2d → 2·layers·d`); the
/// direct form stores the per-layer matrices themselves (the result
/// of collapsing the MLP after stage 1).
#[derive(Debug, Clone, PartialEq)]
pub enum PrefixForm {
    Reparametrized {
        seed: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    Direct { pairs: Vec<PrefixPair> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixModule {
    pub prefix_len: usize,
    pub form: PrefixForm,
}

impl PrefixModule {
    pub fn init(config: &ModelConfig, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let d = config.hidden_dim;
        let mid = 2 * d;
        let out = 2 * config.layers * d;
        let l = config.prefix_len;
        PrefixModule {
            prefix_len: l,
            form: PrefixForm::Reparametrized {
                seed: Tensor::randn(l, d, INIT_STD, &mut rng).trainable(),
                w1: Tensor::randn(d, mid, INIT_STD, &mut rng).trainable(),
                b1: Tensor::zeros(1, mid).trainable(),
                w2: Tensor::randn(mid, out, INIT_STD, &mut rng).trainable(),
                b2: Tensor::zeros(1, out).trainable(),
            },
        }
    }

    /// Runs the reparametrization on the given tape, splitting the MLP
    /// output into per-layer `(P_k, P_v)` node pairs. Differentiable
    /// end to end. For the direct form the stored matrices are leafed
    /// as-is (ids supplied by the caller's binding map).
    pub fn materialize_on(
        &self,
        tape: &mut Tape,
        ids: &HashMap<String, NodeId>,
        layers: usize,
        hidden_dim: usize,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        match &self.form {
            PrefixForm::Reparametrized { .. } => {
                let get = |name: &str| {
                    *ids.get(name)
                        .unwrap_or_else(|| panic!("prefix binding missing leaf '{name}'"))
                };
                let mut h = tape.matmul(get("seed"), get("w1"))?;
                h = tape.add_bias(h, get("b1"))?;
                h = tape.tanh(h);
                let mut flat = tape.matmul(h, get("w2"))?;
                flat = tape.add_bias(flat, get("b2"))?;
                let d = hidden_dim;
                let mut pairs = Vec::with_capacity(layers);
                for m in 0..layers {
                    let base = 2 * m * d;
                    let k = tape.slice_cols(flat, base, base + d)?;
                    let v = tape.slice_cols(flat, base + d, base + 2 * d)?;
                    pairs.push((k, v));
                }
                Ok(pairs)
            }
            PrefixForm::Direct { pairs } => {
                let get = |name: &str| {
                    *ids.get(name)
                        .unwrap_or_else(|| panic!("prefix binding missing leaf '{name}'"))
                };
                Ok((0..pairs.len())
                    .map(|m| (get(&format!("layer{m}.p_k")), get(&format!("layer{m}.p_v"))))
                    .collect())
            }
        }
    }

    /// Materializes the per-layer matrices as plain tensors.
    pub fn materialize(&self, config: &ModelConfig) -> Result<Vec<PrefixPair>> {
        match &self.form {
            PrefixForm::Direct { pairs } => Ok(pairs.clone()),
            PrefixForm::Reparametrized { .. } => {
                let mut tape = Tape::new();
                let mut leafs = LeafSet::new();
                let map = bind_container(&mut tape, self, "theta", false, &mut leafs);
                let ids = self.materialize_on(&mut tape, &map, config.layers, config.hidden_dim)?;
                Ok(ids
                    .into_iter()
                    .map(|(k, v)| PrefixPair {
                        key: tape.to_tensor(k),
                        value: tape.to_tensor(v),
                    })
                    .collect())
            }
        }
    }

    /// Replaces the reparametrized form with its materialized matrices
    /// (the optional post-stage-1 collapse).
    pub fn collapse(&mut self, config: &ModelConfig) -> Result<()> {
        if let PrefixForm::Reparametrized { .. } = self.form {
            let mut pairs = self.materialize(config)?;
            for p in &mut pairs {
                p.key.requires_grad = true;
                p.value.requires_grad = true;
            }
            self.form = PrefixForm::Direct { pairs };
        }
        Ok(())
    }
}

impl ParamContainer for PrefixModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.form {
            PrefixForm::Reparametrized { seed, w1, b1, w2, b2 } => {
                f("seed", seed);
                f("w1", w1);
                f("b1", b1);
                f("w2", w2);
                f("b2", b2);
            }
            PrefixForm::Direct { pairs } => {
                for (m, p) in pairs.iter().enumerate() {
                    f(&format!("layer{m}.p_k"), &p.key);
                    f(&format!("layer{m}.p_v"), &p.value);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.form {
            PrefixForm::Reparametrized { seed, w1, b1, w2, b2 } => {
                f("seed", seed);
                f("w1", w1);
                f("b1", b1);
                f("w2", w2);
                f("b2", b2);
            }
            PrefixForm::Direct { pairs } => {
                for (m, p) in pairs.iter_mut().enumerate() {
                    f(&format!("layer{m}.p_k"), &mut p.key);
                    f(&format!("layer{m}.p_v"), &mut p.value);
                }
            }
        }
    }
}

/// One Adapter insertion point: two linear maps around a ReLU,
/// applied as a residual update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterUnit {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl AdapterUnit {
    fn init(d: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        // zero-initialized up-projection keeps the encoder's function
        // unchanged until training moves it
        Self {
            w_down: Tensor::randn(d, r, INIT_STD, rng).trainable(),
            b_down: Tensor::zeros(1, r).trainable(),
            w_up: Tensor::zeros(r, d).trainable(),
            b_up: Tensor::zeros(1, d).trainable(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub post_attention: AdapterUnit,
    pub post_ffn: AdapterUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule {
    pub bottleneck: usize,
    pub layers: Vec<AdapterLayer>,
}

impl AdapterModule {
    pub fn init(config: &ModelConfig, bottleneck: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let d = config.hidden_dim;
        AdapterModule {
            bottleneck,
            layers: (0..config.layers)
                .map(|_| AdapterLayer {
                    post_attention: AdapterUnit::init(d, bottleneck, &mut rng),
                    post_ffn: AdapterUnit::init(d, bottleneck, &mut rng),
                })
                .collect(),
        }
    }
}

impl ParamContainer for AdapterModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (point, unit) in [("attn", &layer.post_attention), ("ffn", &layer.post_ffn)] {
                f(&format!("layer{i}.{point}.w_down"), &unit.w_down);
                f(&format!("layer{i}.{point}.b_down"), &unit.b_down);
                f(&format!("layer{i}.{point}.w_up"), &unit.w_up);
                f(&format!("layer{i}.{point}.b_up"), &unit.b_up);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (point, unit) in [
                ("attn", &mut layer.post_attention),
                ("ffn", &mut layer.post_ffn),
            ] {
                f(&format!("layer{i}.{point}.w_down"), &mut unit.w_down);
                f(&format!("layer{i}.{point}.b_down"), &mut unit.b_down);
                f(&format!("layer{i}.{point}.w_up"), &mut unit.w_up);
                f(&format!("layer{i}.{point}.b_up"), &mut unit.b_up);
            }
        }
    }
}

/// LoRA low-rank updates for the query and value projections only.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub q_down: Tensor,
    pub q_up: Tensor,
    pub v_down: Tensor,
    pub v_up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    pub bottleneck: usize,
    pub scaling: f64,
    pub layers: Vec<LoraLayer>,
}

impl LoraModule {
    pub fn init(config: &ModelConfig, bottleneck: usize, scaling: f64, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let d = config.hidden_dim;
        LoraModule {
            bottleneck,
            scaling,
            layers: (0..config.layers)
                .map(|_| LoraLayer {
                    q_down: Tensor::randn(d, bottleneck, INIT_STD, &mut rng).trainable(),
                    q_up: Tensor::zeros(bottleneck, d).trainable(),
                    v_down: Tensor::randn(d, bottleneck, INIT_STD, &mut rng).trainable(),
                    v_up: Tensor::zeros(bottleneck, d).trainable(),
                })
                .collect(),
        }
    }
}

impl ParamContainer for LoraModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.q_down"), &layer.q_down);
            f(&format!("layer{i}.q_up"), &layer.q_up);
            f(&format!("layer{i}.v_down"), &layer.v_down);
            f(&format!("layer{i}.v_up"), &layer.v_up);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.q_down"), &mut layer.q_down);
            f(&format!("layer{i}.q_up"), &mut layer.q_up);
            f(&format!("layer{i}.v_down"), &mut layer.v_down);
            f(&format!("layer{i}.v_up"), &mut layer.v_up);
        }
    }
}

/// An augmentation module of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PeModule {
    Prefix(PrefixModule),
    Adapter(AdapterModule),
    Lora(LoraModule),
}

impl PeModule {
    pub fn kind(&self) -> PeKind {
        match self {
            PeModule::Prefix(_) => PeKind::Prefix,
            PeModule::Adapter(_) => PeKind::Adapter,
            PeModule::Lora(_) => PeKind::Lora,
        }
    }

    /// Leases the module onto a tape and prepares the encoder-facing
    /// binding (materializing prefixes when applicable).
    pub fn bind(
        &self,
        tape: &mut Tape,
        namespace: &str,
        trainable: bool,
        config: &ModelConfig,
        leafs: &mut LeafSet,
    ) -> Result<PeBinding> {
        let map = bind_container(tape, self.container(), namespace, trainable, leafs);
        self.binding_from_map(tape, &map, config)
    }

    /// Builds the encoder-facing binding from already-leafed node ids
    /// (keys are the module's own tensor names).
    pub fn binding_from_map(
        &self,
        tape: &mut Tape,
        map: &HashMap<String, NodeId>,
        config: &ModelConfig,
    ) -> Result<PeBinding> {
        match self {
            PeModule::Prefix(p) => Ok(PeBinding::Prefix {
                pairs: p.materialize_on(tape, map, config.layers, config.hidden_dim)?,
            }),
            PeModule::Adapter(a) => {
                let get = |name: String| map[&name];
                Ok(PeBinding::Adapter {
                    layers: (0..a.layers.len())
                        .map(|i| AdapterLayerBinding {
                            post_attention: AdapterUnitBinding {
                                w_down: get(format!("layer{i}.attn.w_down")),
                                b_down: get(format!("layer{i}.attn.b_down")),
                                w_up: get(format!("layer{i}.attn.w_up")),
                                b_up: get(format!("layer{i}.attn.b_up")),
                            },
                            post_ffn: AdapterUnitBinding {
                                w_down: get(format!("layer{i}.ffn.w_down")),
                                b_down: get(format!("layer{i}.ffn.b_down")),
                                w_up: get(format!("layer{i}.ffn.w_up")),
                                b_up: get(format!("layer{i}.ffn.b_up")),
                            },
                        })
                        .collect(),
                })
            }
            PeModule::Lora(l) => {
                let get = |name: String| map[&name];
                Ok(PeBinding::Lora {
                    scaling: l.scaling,
                    layers: (0..l.layers.len())
                        .map(|i| LoraLayerBinding {
                            q_down: get(format!("layer{i}.q_down")),
                            q_up: get(format!("layer{i}.q_up")),
                            v_down: get(format!("layer{i}.v_down")),
                            v_up: get(format!("layer{i}.v_up")),
                        })
                        .collect(),
                })
            }
        }
    }

    pub fn container(&self) -> &dyn ParamContainer {
        match self {
            PeModule::Prefix(p) => p,
            PeModule::Adapter(a) => a,
            PeModule::Lora(l) => l,
        }
    }

    pub fn container_mut(&mut self) -> &mut dyn ParamContainer {
        match self {
            PeModule::Prefix(p) => p,
            PeModule::Adapter(a) => a,
            PeModule::Lora(l) => l,
        }
    }
}

impl ParamContainer for PeModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.container().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.container_mut().visit_mut(f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterUnitBinding {
    pub w_down: NodeId,
    pub b_down: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterLayerBinding {
    pub post_attention: AdapterUnitBinding,
    pub post_ffn: AdapterUnitBinding,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraLayerBinding {
    pub q_down: NodeId,
    pub q_up: NodeId,
    pub v_down: NodeId,
    pub v_up: NodeId,
}

/// Tape-side view of a bound augmentation module, consumed by
/// [`crate::encoder::encoder_forward_on`].
#[derive(Debug, Clone)]
pub enum PeBinding {
    Prefix { pairs: Vec<(NodeId, NodeId)> },
    Adapter { layers: Vec<AdapterLayerBinding> },
    Lora { layers: Vec<LoraLayerBinding>, scaling: f64 },
}

impl PeBinding {
    pub fn check_layers(&self, expected: usize) -> Result<()> {
        let got = match self {
            PeBinding::Prefix { pairs } => pairs.len(),
            PeBinding::Adapter { layers } => layers.len(),
            PeBinding::Lora { layers, .. } => layers.len(),
        };
        if got != expected {
            return Err(Error::config(format!(
                "augmentation module has {got} layers but the encoder has {expected}"
            )));
        }
        Ok(())
    }
}

/// Residual adapter update `h + relu(h·W_down + b_down)·W_up + b_up`.
pub fn adapter_apply_on(tape: &mut Tape, h: NodeId, unit: &AdapterUnitBinding) -> Result<NodeId> {
    let mut z = tape.matmul(h, unit.w_down)?;
    z = tape.add_bias(z, unit.b_down)?;
    z = tape.relu(z);
    z = tape.matmul(z, unit.w_up)?;
    z = tape.add_bias(z, unit.b_up)?;
    Ok(tape.add(h, z)?)
}

/// Tensor-level adapter update for one insertion point.
pub fn adapter_forward(
    h: &Tensor,
    module: &AdapterModule,
    layer: usize,
    point: AdapterPoint,
) -> Result<Tensor> {
    let unit = match point {
        AdapterPoint::PostAttention => &module.layers[layer].post_attention,
        AdapterPoint::PostFfn => &module.layers[layer].post_ffn,
    };
    let mut tape = Tape::new();
    let h_id = tape.leaf(h);
    let binding = AdapterUnitBinding {
        w_down: tape.leaf(&unit.w_down),
        b_down: tape.leaf(&unit.b_down),
        w_up: tape.leaf(&unit.w_up),
        b_up: tape.leaf(&unit.b_up),
    };
    let out = adapter_apply_on(&mut tape, h_id, &binding)?;
    Ok(tape.to_tensor(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPoint {
    PostAttention,
    PostFfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Query,
    Value,
}

/// Projection with a LoRA update: `x·base + s·x·W_down·W_up`.
pub fn lora_forward(
    x: &Tensor,
    base_projection: &Tensor,
    module: &LoraModule,
    layer: usize,
    target: LoraTarget,
) -> Result<Tensor> {
    let l = &module.layers[layer];
    let (down, up) = match target {
        LoraTarget::Query => (&l.q_down, &l.q_up),
        LoraTarget::Value => (&l.v_down, &l.v_up),
    };
    let mut tape = Tape::new();
    let x_id = tape.leaf(x);
    let base_id = tape.leaf(base_projection);
    let d_id = tape.leaf(down);
    let u_id = tape.leaf(up);
    let main = tape.matmul(x_id, base_id)?;
    let mut low = tape.matmul(x_id, d_id)?;
    low = tape.matmul(low, u_id)?;
    low = tape.scale(low, module.scaling);
    let out = tape.add(main, low)?;
    Ok(tape.to_tensor(out))
}

/// Initializes an augmentation pair `(θ1, θ2)` with distinct
/// sub-seeds derived from `rng_seed`.
pub fn init_pair(
    pe: &PeConfig,
    config: &ModelConfig,
    rng_seed: u64,
) -> Result<(PeModule, PeModule)> {
    if pe.bottleneck == 0 && pe.kind != PeKind::Prefix {
        return Err(Error::config("bottleneck dimension must be at least 1"));
    }
    if pe.lora_scale < 1.0 && pe.kind == PeKind::Lora {
        return Err(Error::config("lora scaling factor must be at least 1"));
    }
    let make = |sub: u64| -> PeModule {
        let s = seeds::derive(rng_seed, &[sub]);
        match pe.kind {
            PeKind::Prefix => PeModule::Prefix(PrefixModule::init(config, s)),
            PeKind::Adapter => PeModule::Adapter(AdapterModule::init(config, pe.bottleneck, s)),
            PeKind::Lora => {
                PeModule::Lora(LoraModule::init(config, pe.bottleneck, pe.lora_scale, s))
            }
        }
    };
    Ok((make(1), make(2)))
}
