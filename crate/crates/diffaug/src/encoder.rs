//! Miniature multi-layer transformer encoder producing sentence
//! embeddings. Attention layers optionally consume prefix key/value
//! rows; Adapter and LoRA hooks cover the other augmentation kinds.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ndauto::{NodeId, Tape, Tensor};

use crate::params::{bind_container, LeafSet, ParamContainer};
use crate::pe::{PeBinding, PeModule};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Embedding-table initialization scale.
const EMBED_INIT_STD: f64 = 0.1;

/// Xavier/Glorot standard deviation for a linear map, keeping
/// activation variance stable through depth at any width.
fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// How a token-level hidden matrix is reduced to one sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    FirstToken,
    Mean,
    MaskToken,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-token" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            "mask-token" => Ok(Pooling::MaskToken),
            other => Err(Error::config(format!(
                "unknown pooling '{other}' (expected first-token, mean or mask-token)"
            ))),
        }
    }
}

/// Architecture hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of self-attention layers.
    pub layers: usize,
    /// Hidden dimension; must be divisible by `n_heads`.
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Dropout probability in `[0, 1)`.
    pub dropout_p: f64,
    pub pooling: Pooling,
    /// Prefix rows per attention layer; zero disables the prefix.
    pub prefix_len: usize,
    /// Token id selected by mask-token pooling.
    pub mask_id: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::config("vocab_size and max_len must be positive"));
        }
        if self.mask_id >= self.vocab_size {
            return Err(Error::config(format!(
                "mask_id {} outside vocabulary of size {}",
                self.mask_id, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// One attention layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_offset: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_offset: Tensor,
}

impl LayerParams {
    fn init(d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |r, c, rng: &mut ChaCha8Rng| {
            Tensor::randn(r, c, xavier_std(r, c), rng).trainable()
        };
        Self {
            w_q: w(d, d, rng),
            b_q: Tensor::zeros(1, d).trainable(),
            w_k: w(d, d, rng),
            b_k: Tensor::zeros(1, d).trainable(),
            w_v: w(d, d, rng),
            b_v: Tensor::zeros(1, d).trainable(),
            w_o: w(d, d, rng),
            b_o: Tensor::zeros(1, d).trainable(),
            w_ff1: w(d, ffn, rng),
            b_ff1: Tensor::zeros(1, ffn).trainable(),
            w_ff2: w(ffn, d, rng),
            b_ff2: Tensor::zeros(1, d).trainable(),
            ln1_scale: Tensor::filled(1, d, 1.0).trainable(),
            ln1_offset: Tensor::zeros(1, d).trainable(),
            ln2_scale: Tensor::filled(1, d, 1.0).trainable(),
            ln2_offset: Tensor::zeros(1, d).trainable(),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
            ("ln1_scale", &self.ln1_scale),
            ("ln1_offset", &self.ln1_offset),
            ("ln2_scale", &self.ln2_scale),
            ("ln2_offset", &self.ln2_offset),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
            ("ln1_scale", &mut self.ln1_scale),
            ("ln1_offset", &mut self.ln1_offset),
            ("ln2_scale", &mut self.ln2_scale),
            ("ln2_offset", &mut self.ln2_offset),
        ]
    }
}

/// All weights of the encoder (the frozen or jointly tuned side of
/// the augmentation pair).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        Self {
            token_embedding: Tensor::randn(config.vocab_size, d, EMBED_INIT_STD, &mut rng)
                .trainable(),
            position_embedding: Tensor::randn(config.max_len, d, EMBED_INIT_STD, &mut rng)
                .trainable(),
            layers: (0..config.layers)
                .map(|_| LayerParams::init(d, config.ffn_dim(), &mut rng))
                .collect(),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        namespace: &str,
        trainable: bool,
        leafs: &mut LeafSet,
    ) -> EncoderBinding {
        let map = bind_container(tape, self, namespace, trainable, leafs);
        EncoderBinding::from_ids(self.layers.len(), &map)
    }
}

impl ParamContainer for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
    }
}

/// Node ids of one layer's leased weights.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
    pub ln1_scale: NodeId,
    pub ln1_offset: NodeId,
    pub ln2_scale: NodeId,
    pub ln2_offset: NodeId,
}

#[derive(Debug, Clone)]
pub struct EncoderBinding {
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub layers: Vec<LayerBinding>,
}

impl EncoderBinding {
    pub fn from_ids(n_layers: usize, ids: &HashMap<String, NodeId>) -> Self {
        let get = |name: &str| {
            *ids.get(name)
                .unwrap_or_else(|| panic!("encoder binding missing leaf '{name}'"))
        };
        EncoderBinding {
            token_embedding: get("token_embedding"),
            position_embedding: get("position_embedding"),
            layers: (0..n_layers)
                .map(|i| LayerBinding {
                    w_q: get(&format!("layer{i}.w_q")),
                    b_q: get(&format!("layer{i}.b_q")),
                    w_k: get(&format!("layer{i}.w_k")),
                    b_k: get(&format!("layer{i}.b_k")),
                    w_v: get(&format!("layer{i}.w_v")),
                    b_v: get(&format!("layer{i}.b_v")),
                    w_o: get(&format!("layer{i}.w_o")),
                    b_o: get(&format!("layer{i}.b_o")),
                    w_ff1: get(&format!("layer{i}.w_ff1")),
                    b_ff1: get(&format!("layer{i}.b_ff1")),
                    w_ff2: get(&format!("layer{i}.w_ff2")),
                    b_ff2: get(&format!("layer{i}.b_ff2")),
                    ln1_scale: get(&format!("layer{i}.ln1_scale")),
                    ln1_offset: get(&format!("layer{i}.ln1_offset")),
                    ln2_scale: get(&format!("layer{i}.ln2_scale")),
                    ln2_offset: get(&format!("layer{i}.ln2_offset")),
                })
                .collect(),
        }
    }
}

/// Eval vs train forward behavior. Train mode enables dropout with
/// masks drawn deterministically from the given seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Which augmentation module(s) produced an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Plain encoder, no augmentation module.
    Bare,
    /// First module of the pair.
    First,
    /// Second module of the pair.
    Second,
    /// Both prefix modules prepended at once (inference).
    Both,
}

/// A pooled sentence vector plus the module that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

/// Per-layer node ids captured during a forward pass, for the
/// diagnostics module: key/value activations (before any prefix rows
/// are attached) and the pre-softmax attention logits per head.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub keys: NodeId,
    pub values: NodeId,
    pub logits: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pooled: NodeId,
    pub layers: Vec<AttentionTrace>,
}

/// Multi-head attention over already-projected Q/K/V with optional
/// prefix key/value rows shared across heads as column blocks.
/// Per-head scaling is `1/sqrt(head_dim)`.
fn multi_head_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix: Option<(NodeId, NodeId)>,
    n_heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (_, d) = tape.dims(q);
    if d % n_heads != 0 {
        return Err(Error::input(format!(
            "hidden dimension {d} is not divisible by {n_heads} heads"
        )));
    }
    let head_dim = d / n_heads;
    let (k_full, v_full) = match prefix {
        Some((p_k, p_v)) => {
            for p in [p_k, p_v] {
                if tape.dims(p).1 != d {
                    return Err(Error::Tensor(ndauto::TensorError::ShapeMismatch {
                        op: "prefix_attention",
                        lhs: vec![tape.dims(k).0, d],
                        rhs: vec![tape.dims(p).0, tape.dims(p).1],
                    }));
                }
            }
            (tape.concat_rows(&[p_k, k])?, tape.concat_rows(&[p_v, v])?)
        }
        None => (k, v),
    };
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut logits_per_head = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let q_h = tape.slice_cols(q, lo, hi)?;
        let k_h = tape.slice_cols(k_full, lo, hi)?;
        let v_h = tape.slice_cols(v_full, lo, hi)?;
        let k_t = tape.transpose(k_h);
        let raw = tape.matmul(q_h, k_t)?;
        let logits = tape.scale(raw, scale);
        let weights = tape.softmax_rows(logits);
        heads.push(tape.matmul(weights, v_h)?);
        logits_per_head.push(logits);
    }
    Ok((tape.concat_cols(&heads)?, logits_per_head))
}

/// Standard scaled dot-product self-attention over projected inputs.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Result<Tensor> {
    attention_with_prefix(q, k, v, None, n_heads)
}

/// Attention over keys `[P_k; K]` and values `[P_v; V]`. The prefix
/// may have zero rows, in which case the result reduces exactly to
/// [`self_attention`].
pub fn prefix_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p_k: &Tensor,
    p_v: &Tensor,
    n_heads: usize,
) -> Result<Tensor> {
    attention_with_prefix(q, k, v, Some((p_k, p_v)), n_heads)
}

fn attention_with_prefix(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prefix: Option<(&Tensor, &Tensor)>,
    n_heads: usize,
) -> Result<Tensor> {
    if q.shape != k.shape || k.shape != v.shape {
        return Err(Error::Tensor(ndauto::TensorError::ShapeMismatch {
            op: "self_attention",
            lhs: q.shape.clone(),
            rhs: if q.shape != k.shape {
                k.shape.clone()
            } else {
                v.shape.clone()
            },
        }));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(q);
    let k = tape.leaf(k);
    let v = tape.leaf(v);
    let prefix = match prefix {
        Some((pk, pv)) => Some((tape.leaf(pk), tape.leaf(pv))),
        None => None,
    };
    let (out, _) = multi_head_attention(&mut tape, q, k, v, prefix, n_heads)?;
    Ok(tape.to_tensor(out))
}

fn dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.dims(x);
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    let m = tape.constant(r, c, mask)?;
    Ok(tape.mul(x, m)?)
}

/// Runs the full encoder on one token sequence, on an existing tape.
/// Returns the pooled embedding node plus per-layer capture ids.
pub fn encoder_forward_on(
    tape: &mut Tape,
    tokens: &[usize],
    config: &ModelConfig,
    enc: &EncoderBinding,
    aug: Option<&PeBinding>,
    mode: EncodeMode,
) -> Result<ForwardPass> {
    let len = tokens.len();
    if len == 0 {
        return Err(Error::input("cannot encode an empty token sequence"));
    }
    if len > config.max_len {
        return Err(Error::input(format!(
            "sequence of length {len} exceeds max_len {}",
            config.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    if let Some(b) = aug {
        b.check_layers(config.layers)?;
    }

    let mut rng = match mode {
        EncodeMode::Eval => None,
        EncodeMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
    };

    let tok = tape.gather(enc.token_embedding, tokens)?;
    let pos = tape.slice_rows(enc.position_embedding, 0, len)?;
    let mut x = tape.add(tok, pos)?;

    let mut traces = Vec::with_capacity(config.layers);
    for (i, layer) in enc.layers.iter().enumerate() {
        let mut q = tape.matmul(x, layer.w_q)?;
        q = tape.add_bias(q, layer.b_q)?;
        let mut k = tape.matmul(x, layer.w_k)?;
        k = tape.add_bias(k, layer.b_k)?;
        let mut v = tape.matmul(x, layer.w_v)?;
        v = tape.add_bias(v, layer.b_v)?;

        let mut prefix_pair = None;
        match aug {
            Some(PeBinding::Prefix { pairs }) => {
                let (p_k, p_v) = pairs[i];
                if tape.dims(p_k).0 > 0 {
                    prefix_pair = Some((p_k, p_v));
                }
            }
            Some(PeBinding::Lora { layers, scaling }) => {
                let lb = &layers[i];
                let q_lo = tape.matmul(x, lb.q_down)?;
                let q_lo = tape.matmul(q_lo, lb.q_up)?;
                let q_lo = tape.scale(q_lo, *scaling);
                q = tape.add(q, q_lo)?;
                let v_lo = tape.matmul(x, lb.v_down)?;
                let v_lo = tape.matmul(v_lo, lb.v_up)?;
                let v_lo = tape.scale(v_lo, *scaling);
                v = tape.add(v, v_lo)?;
            }
            _ => {}
        }

        let (attn, logits) = multi_head_attention(tape, q, k, v, prefix_pair, config.n_heads)?;
        let mut out = tape.matmul(attn, layer.w_o)?;
        out = tape.add_bias(out, layer.b_o)?;
        out = dropout(tape, out, config.dropout_p, rng.as_mut())?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, layer.ln1_scale, layer.ln1_offset, LAYER_NORM_EPS)?;
        if let Some(PeBinding::Adapter { layers }) = aug {
            x = crate::pe::adapter_apply_on(tape, x, &layers[i].post_attention)?;
        }

        let mut ff = tape.matmul(x, layer.w_ff1)?;
        ff = tape.add_bias(ff, layer.b_ff1)?;
        ff = tape.relu(ff);
        ff = tape.matmul(ff, layer.w_ff2)?;
        ff = tape.add_bias(ff, layer.b_ff2)?;
        ff = dropout(tape, ff, config.dropout_p, rng.as_mut())?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, layer.ln2_scale, layer.ln2_offset, LAYER_NORM_EPS)?;
        if let Some(PeBinding::Adapter { layers }) = aug {
            x = crate::pe::adapter_apply_on(tape, x, &layers[i].post_ffn)?;
        }

        traces.push(AttentionTrace {
            keys: k,
            values: v,
            logits,
        });
    }

    let pooled = pool_on(tape, x, config.pooling, tokens, config.mask_id)?;
    Ok(ForwardPass {
        pooled,
        layers: traces,
    })
}

/// Reduces an `L×d` hidden matrix to a `1×d` row per the pooling mode.
pub fn pool_on(
    tape: &mut Tape,
    hidden: NodeId,
    mode: Pooling,
    tokens: &[usize],
    mask_id: usize,
) -> Result<NodeId> {
    let (rows, _) = tape.dims(hidden);
    if rows == 0 {
        return Err(Error::input("cannot pool an empty hidden matrix"));
    }
    match mode {
        Pooling::FirstToken => Ok(tape.row_select(hidden, 0)?),
        Pooling::Mean => Ok(tape.mean_rows(hidden)?),
        Pooling::MaskToken => {
            let positions: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == mask_id)
                .map(|(i, _)| i)
                .collect();
            match positions.as_slice() {
                [p] => Ok(tape.row_select(hidden, *p)?),
                [] => Err(Error::input(format!(
                    "mask-token pooling found no occurrence of mask id {mask_id}"
                ))),
                many => Err(Error::input(format!(
                    "mask-token pooling found {} occurrences of mask id {mask_id}",
                    many.len()
                ))),
            }
        }
    }
}

/// Tensor-level pooling wrapper.
pub fn pool(hidden: &Tensor, mode: Pooling, tokens: &[usize], mask_id: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.leaf(hidden);
    let out = pool_on(&mut tape, h, mode, tokens, mask_id)?;
    Ok(tape.to_tensor(out))
}

/// One-shot sentence encoding on a private tape. `aug` names the
/// module to attach and where it sits in the augmentation pair.
pub fn encoder_forward(
    tokens: &[usize],
    config: &ModelConfig,
    params: &EncoderParams,
    aug: Option<(&PeModule, Provenance)>,
    train_mode: bool,
    seed: u64,
) -> Result<SentenceEmbedding> {
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let enc = params.bind(&mut tape, "phi", false, &mut leafs);
    let (binding, provenance) = match aug {
        Some((module, tag)) => (
            Some(module.bind(&mut tape, "theta", false, config, &mut leafs)?),
            tag,
        ),
        None => (None, Provenance::Bare),
    };
    let mode = if train_mode {
        EncodeMode::Train { dropout_seed: seed }
    } else {
        EncodeMode::Eval
    };
    let pass = encoder_forward_on(&mut tape, tokens, config, &enc, binding.as_ref(), mode)?;
    Ok(SentenceEmbedding {
        vector: tape.value(pass.pooled).to_vec(),
        provenance,
    })
}

/// Eval-mode encoding with raw per-layer prefix key/value matrices
/// (used for inference that prepends both modules at once).
pub fn encode_eval_with_prefix_rows(
    tokens: &[usize],
    config: &ModelConfig,
    params: &EncoderParams,
    pairs: &[(Tensor, Tensor)],
    provenance: Provenance,
) -> Result<SentenceEmbedding> {
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let enc = params.bind(&mut tape, "phi", false, &mut leafs);
    let ids: Vec<(NodeId, NodeId)> = pairs
        .iter()
        .map(|(k, v)| (tape.leaf(k), tape.leaf(v)))
        .collect();
    let binding = PeBinding::Prefix { pairs: ids };
    let pass = encoder_forward_on(&mut tape, tokens, config, &enc, Some(&binding), EncodeMode::Eval)?;
    Ok(SentenceEmbedding {
        vector: tape.value(pass.pooled).to_vec(),
        provenance,
    })
}

/// Which parameter set to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCountKind {
    Encoder,
    OnePrefix,
    TwoPrefixes,
    Adapter { bottleneck: usize },
    Lora { bottleneck: usize },
}

/// Exact trainable-parameter count plus its fraction of the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub count: usize,
    pub fraction_of_encoder: f64,
}

/// Closed-form parameter accounting. Prefixes are counted as their
/// materialized `2·layers·prefix_len·hidden` matrices (the
/// inference-time footprint); the reparametrization MLP is reported
/// by [`prefix_reparam_param_count`].
pub fn param_count(config: &ModelConfig, kind: ParamCountKind) -> ParamCount {
    let d = config.hidden_dim;
    let ffn = config.ffn_dim();
    let per_layer = 4 * (d * d + d)        // q/k/v/o projections with biases
        + (d * ffn + ffn) + (ffn * d + d)  // feed-forward
        + 4 * d; // two layer norms
    let encoder = config.vocab_size * d + config.max_len * d + config.layers * per_layer;
    let count = match kind {
        ParamCountKind::Encoder => encoder,
        ParamCountKind::OnePrefix => config.layers * 2 * config.prefix_len * d,
        ParamCountKind::TwoPrefixes => 2 * config.layers * 2 * config.prefix_len * d,
        ParamCountKind::Adapter { bottleneck: r } => {
            config.layers * 2 * (d * r + r + r * d + d)
        }
        ParamCountKind::Lora { bottleneck: r } => config.layers * 2 * (d * r + r * d),
    };
    ParamCount {
        count,
        fraction_of_encoder: count as f64 / encoder as f64,
    }
}

/// Parameters of the prefix reparametrization MLP (training-time
/// overhead on top of the materialized matrices).
pub fn prefix_reparam_param_count(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    let mid = 2 * d;
    let out = 2 * config.layers * d;
    config.prefix_len * d + (d * mid + mid) + (mid * out + out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            vocab_size: 12,
            max_len: 6,
            dropout_p: 0.1,
            pooling: Pooling::MaskToken,
            prefix_len: 2,
            mask_id: 1,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        // L=1: softmax of one logit is 1, so the output is V exactly.
        let q = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
        let k = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let v = Tensor::matrix(1, 2, vec![5.0, -7.0]).unwrap();
        let out = self_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn identical_keys_average_values() {
        // all K rows equal -> uniform weights -> column mean of V
        let q = Tensor::matrix(2, 2, vec![0.5, 1.5, -0.3, 0.2]).unwrap();
        let k = Tensor::matrix(2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let out = self_attention(&q, &k, &v, 1).unwrap();
        for row in 0..2 {
            assert!((out.at(row, 0) - 4.0).abs() < 1e-12);
            assert!((out.at(row, 1) - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_position_attention_hand_value() {
        // L=2, d=1: logits (1,0), weight e/(e+1) on first key
        let q = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let k = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap();
        let out = self_attention(&q, &k, &v, 1).unwrap();
        let w = std::f64::consts::E / (std::f64::consts::E + 1.0);
        let expected = w * 2.0 + (1.0 - w) * 4.0;
        assert!((out.at(0, 0) - expected).abs() < 1e-12);
        assert!((expected - 2.5378828427399902).abs() < 1e-10);
    }

    #[test]
    fn prefix_attention_hand_value() {
        // l=1, L=1, d=1, equal logits -> output (3+5)/2 = 4
        let q = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let k = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let v = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let p_k = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let p_v = Tensor::matrix(1, 1, vec![5.0]).unwrap();
        let out = prefix_attention(&q, &k, &v, &p_k, &p_v, 1).unwrap();
        assert!((out.at(0, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_reduces_to_self_attention() {
        let q = Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()).unwrap();
        let k = Tensor::matrix(3, 4, (0..12).map(|i| 0.2 * i as f64 - 1.0).collect()).unwrap();
        let v = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let p_k = Tensor::matrix(0, 4, vec![]).unwrap();
        let p_v = Tensor::matrix(0, 4, vec![]).unwrap();
        let plain = self_attention(&q, &k, &v, 2).unwrap();
        let with_prefix = prefix_attention(&q, &k, &v, &p_k, &p_v, 2).unwrap();
        assert_eq!(plain.data, with_prefix.data);
    }

    #[test]
    fn massively_negative_prefix_keys_vanish() {
        let q = Tensor::matrix(2, 2, vec![0.4, -0.1, 0.9, 0.3]).unwrap();
        let k = Tensor::matrix(2, 2, vec![0.2, 0.8, -0.5, 0.1]).unwrap();
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p_k = Tensor::matrix(1, 2, vec![-1e6, -1e6]).unwrap();
        let p_v = Tensor::matrix(1, 2, vec![100.0, 100.0]).unwrap();
        let plain = self_attention(&q, &k, &v, 1).unwrap();
        let with_prefix = prefix_attention(&q, &k, &v, &p_k, &p_v, 1).unwrap();
        for (a, b) in plain.data.iter().zip(&with_prefix.data) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // softmax rows over [P_k; K] sum to 1 and are nonnegative
        let mut tape = Tape::new();
        let q = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let k = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.3).collect()).unwrap();
        let p_k = Tensor::matrix(2, 4, (0..8).map(|i| -0.2 * i as f64).collect()).unwrap();
        let q_id = tape.leaf(&q);
        let k_id = tape.leaf(&k);
        let p_id = tape.leaf(&p_k);
        let cat = tape.concat_rows(&[p_id, k_id]).unwrap();
        let k_t = tape.transpose(cat);
        let logits = tape.matmul(q_id, k_t).unwrap();
        let logits = tape.scale(logits, 1.0 / 2.0);
        let weights = tape.softmax_rows(logits);
        let (r, c) = tape.dims(weights);
        for i in 0..r {
            let row = &tape.value(weights)[i * c..(i + 1) * c];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn pooling_modes() {
        let h = Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let mean = pool(&h, Pooling::Mean, &[5, 1], 1).unwrap();
        assert_eq!(mean.data, vec![2.0, 2.0]);
        let first = pool(&h, Pooling::FirstToken, &[5, 1], 1).unwrap();
        assert_eq!(first.data, vec![1.0, 1.0]);
        let mask = pool(&h, Pooling::MaskToken, &[5, 1], 1).unwrap();
        assert_eq!(mask.data, vec![3.0, 3.0]);

        // single row: all modes agree
        let h1 = Tensor::matrix(1, 2, vec![9.0, -2.0]).unwrap();
        for mode in [Pooling::FirstToken, Pooling::Mean, Pooling::MaskToken] {
            assert_eq!(pool(&h1, mode, &[1], 1).unwrap().data, vec![9.0, -2.0]);
        }

        // mask selection at position 2 of 3
        let h3 = Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        let picked = pool(&h3, Pooling::MaskToken, &[4, 5, 1], 1).unwrap();
        assert_eq!(picked.data, vec![30.0]);

        // zero or multiple masks are input errors
        assert!(pool(&h, Pooling::MaskToken, &[5, 5], 1).is_err());
        assert!(pool(&h, Pooling::MaskToken, &[1, 1], 1).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_validates_inputs() {
        let config = toy_config();
        let params = EncoderParams::init(&config, 3);
        let tokens = [2usize, 5, 9, 1];
        let e1 = encoder_forward(&tokens, &config, &params, None, false, 0).unwrap();
        let e2 = encoder_forward(&tokens, &config, &params, None, false, 99).unwrap();
        assert_eq!(e1.vector, e2.vector);
        assert_eq!(e1.provenance, Provenance::Bare);
        assert!(e1.vector.iter().all(|x| x.is_finite()));

        let over = [2usize; 7];
        assert!(encoder_forward(&over, &config, &params, None, false, 0).is_err());
        let oov = [2usize, 50, 1];
        assert!(encoder_forward(&oov, &config, &params, None, false, 0).is_err());
    }

    #[test]
    fn train_mode_differs_by_seed() {
        let config = toy_config();
        let params = EncoderParams::init(&config, 3);
        let tokens = [2usize, 5, 9, 1];
        let a = encoder_forward(&tokens, &config, &params, None, true, 1).unwrap();
        let b = encoder_forward(&tokens, &config, &params, None, true, 2).unwrap();
        let a2 = encoder_forward(&tokens, &config, &params, None, true, 1).unwrap();
        assert_ne!(a.vector, b.vector);
        assert_eq!(a.vector, a2.vector);
    }

    #[test]
    fn bert_dims_prefix_accounting() {
        let config = ModelConfig {
            layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            vocab_size: 30522,
            max_len: 512,
            dropout_p: 0.1,
            pooling: Pooling::MaskToken,
            prefix_len: 8,
            mask_id: 103,
        };
        let two = param_count(&config, ParamCountKind::TwoPrefixes);
        assert_eq!(two.count, 294_912);
        let frac_of_110m = two.count as f64 / 110e6;
        assert!(frac_of_110m > 0.0025 && frac_of_110m < 0.0030, "{frac_of_110m}");
        // and against this crate's own encoder accounting
        assert!(two.fraction_of_encoder > 0.002 && two.fraction_of_encoder < 0.0035);
    }

    #[test]
    fn zero_prefix_counts_zero() {
        let mut config = toy_config();
        config.prefix_len = 0;
        assert_eq!(param_count(&config, ParamCountKind::OnePrefix).count, 0);
    }

    #[test]
    fn adapter_count_matches_formula() {
        let config = ModelConfig {
            layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            vocab_size: 10,
            max_len: 4,
            dropout_p: 0.0,
            pooling: Pooling::Mean,
            prefix_len: 0,
            mask_id: 1,
        };
        // 2 layers × 2 insertions × (16·4 + 4 + 4·16 + 16)
        let got = param_count(&config, ParamCountKind::Adapter { bottleneck: 4 });
        assert_eq!(got.count, 2 * 2 * (16 * 4 + 4 + 4 * 16 + 16));
        assert_eq!(got.count, 592);
    }
}
