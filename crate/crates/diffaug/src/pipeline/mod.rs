//! Two-stage trainer: cross-entropy tuning of the augmentation pair
//! with the encoder frozen, then joint contrastive fine-tuning, plus
//! the single-phase and full-model schedule variants, dev
//! checkpointing, metrics CSVs, and parameter sweeps.
//!
//! Every random choice (batch composition, dropout masks, token
//! replacement) is a pure function of the plan seed, a phase tag, and
//! the step index, so identical plans give identical trajectories and
//! a resumed checkpoint continues bit-exactly.

pub mod checkpoint;
pub mod sweep;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use ndauto::{cosine_similarity, AdamConfig, AdamState, NodeId, Tape, Tensor};

use crate::corpus::{spearman, Corpus, Sentence};
use crate::diagnostics::{
    repr_divergence, variance_gaps, weight_convergence, DiagnosticsRecord, DivergenceMode,
    KappaMode,
};
use crate::encoder::{
    encode_eval_with_prefix_rows, encoder_forward, encoder_forward_on, EncodeMode, EncoderParams,
    ModelConfig, Pooling, Provenance, SentenceEmbedding,
};
use crate::losses::{
    contrastive_loss_on, joint_loss_on, siamese_ce_batch_on, supervised_contrastive_loss_on,
    ClassifierHead, PairLabel,
};
use crate::params::{assign_grads, LeafSet, ParamContainer};
use crate::pe::{init_pair, PeBinding, PeConfig, PeKind, PeModule};
use crate::seeds;
use crate::{Error, Result};

pub use checkpoint::Checkpoint;
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepResult, SweepRow};

const PROBE_SET_SIZE: usize = 32;
const TOKEN_REPLACEMENT_PROB: f64 = 0.1;

// Phase tags feeding the seed derivation; stable across schedules so
// a two-stage run with zero stage-1 steps matches a pure stage-2 run.
const CE_PHASE_TAG: u64 = 1;
const CONTRASTIVE_PHASE_TAG: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    SemiSupervised,
    Supervised,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" | "semi-supervised" => Ok(Setting::SemiSupervised),
            "sup" | "supervised" => Ok(Setting::Supervised),
            other => Err(Error::config(format!("unknown setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    TwoStage,
    Joint,
    SupUnsup,
    SupJoint,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-stage" => Ok(Schedule::TwoStage),
            "joint" => Ok(Schedule::Joint),
            "sup-unsup" => Ok(Schedule::SupUnsup),
            "sup-joint" => Ok(Schedule::SupJoint),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }
}

/// How positive pairs are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationKind {
    /// Two distinct prefix modules, both tuned in stage 2 (default).
    PrefixDifferent,
    /// One shared prefix module for both views.
    PrefixSame,
    /// Two prefixes, frozen during stage 2.
    PrefixFixed,
    /// Two prefixes, encoder frozen in both stages.
    PrefixTuningOnly,
    /// No module; two stochastic forward passes of the same sentence.
    Dropout,
    /// No module; the second view replaces tokens within their
    /// synonym set with probability 0.1.
    TokenReplacement,
    Adapter,
    Lora,
}

impl AugmentationKind {
    pub fn uses_modules(self) -> bool {
        !matches!(self, AugmentationKind::Dropout | AugmentationKind::TokenReplacement)
    }

    pub fn pe_kind(self) -> Option<PeKind> {
        match self {
            AugmentationKind::PrefixDifferent
            | AugmentationKind::PrefixSame
            | AugmentationKind::PrefixFixed
            | AugmentationKind::PrefixTuningOnly => Some(PeKind::Prefix),
            AugmentationKind::Adapter => Some(PeKind::Adapter),
            AugmentationKind::Lora => Some(PeKind::Lora),
            _ => None,
        }
    }
}

impl std::str::FromStr for AugmentationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix-different" => Ok(Self::PrefixDifferent),
            "prefix-same" => Ok(Self::PrefixSame),
            "prefix-fixed" => Ok(Self::PrefixFixed),
            "prefix-tuning-only" => Ok(Self::PrefixTuningOnly),
            "dropout" => Ok(Self::Dropout),
            "token-replacement" => Ok(Self::TokenReplacement),
            "adapter" => Ok(Self::Adapter),
            "lora" => Ok(Self::Lora),
            other => Err(Error::config(format!("unknown augmentation '{other}'"))),
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::PrefixDifferent => "prefix-different",
            Self::PrefixSame => "prefix-same",
            Self::PrefixFixed => "prefix-fixed",
            Self::PrefixTuningOnly => "prefix-tuning-only",
            Self::Dropout => "dropout",
            Self::TokenReplacement => "token-replacement",
            Self::Adapter => "adapter",
            Self::Lora => "lora",
        };
        f.write_str(s)
    }
}

/// Sentence embedding at inference time when two prefix modules
/// exist: prepend both modules' rows at once, or average the two
/// single-module embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    ConcatPrefixes,
    AverageEmbeddings,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat-prefixes" => Ok(Self::ConcatPrefixes),
            "average-embeddings" => Ok(Self::AverageEmbeddings),
            other => Err(Error::config(format!("unknown inference mode '{other}'"))),
        }
    }
}

/// Encoder shape choices (the vocabulary-dependent fields are filled
/// in from the corpus when a run starts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub pooling: Pooling,
    pub prefix_len: usize,
}

impl ModelTemplate {
    pub fn resolve(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            vocab_size: corpus.vocab.vocab_size(),
            max_len: self.max_len,
            dropout_p: self.dropout_p,
            pooling: self.pooling,
            prefix_len: self.prefix_len,
            mask_id: corpus.vocab.mask_id(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Plan {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Plan {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub alpha: f64,
    pub setting: Setting,
}

/// Stage-2 trainability over the two modules and the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub theta1: bool,
    pub theta2: bool,
    pub phi: bool,
}

impl TrainMask {
    pub fn for_kind(kind: AugmentationKind) -> Self {
        match kind {
            AugmentationKind::PrefixFixed => TrainMask {
                theta1: false,
                theta2: false,
                phi: true,
            },
            AugmentationKind::PrefixTuningOnly => TrainMask {
                theta1: true,
                theta2: true,
                phi: false,
            },
            _ => TrainMask {
                theta1: true,
                theta2: true,
                phi: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub model: ModelTemplate,
    pub stage1: Stage1Plan,
    pub stage2: Stage2Plan,
    pub schedule: Schedule,
    pub mask: TrainMask,
    pub augmentation: AugmentationKind,
    pub pe: PeConfig,
    pub temperature: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub inference: InferenceMode,
    /// Keep the prefix reparametrization MLP through stage 2 (when
    /// false it is collapsed into plain matrices after stage 1).
    pub keep_reparam: bool,
    pub kappa_mode: KappaMode,
}

impl TrainPlan {
    /// Desk-scale defaults: small model, short stages, seeded.
    pub fn toy() -> Self {
        TrainPlan {
            model: ModelTemplate {
                layers: 2,
                hidden_dim: 32,
                n_heads: 2,
                max_len: 16,
                dropout_p: 0.1,
                pooling: Pooling::MaskToken,
                prefix_len: 4,
            },
            stage1: Stage1Plan {
                steps: 500,
                learning_rate: 1e-3,
                batch: 32,
            },
            stage2: Stage2Plan {
                epochs: 2,
                learning_rate: 1e-3,
                batch: 32,
                alpha: 1e-3,
                setting: Setting::SemiSupervised,
            },
            schedule: Schedule::TwoStage,
            mask: TrainMask::for_kind(AugmentationKind::PrefixDifferent),
            augmentation: AugmentationKind::PrefixDifferent,
            pe: PeConfig::default(),
            temperature: 0.05,
            eval_every: 50,
            seed: 0,
            inference: InferenceMode::ConcatPrefixes,
            keep_reparam: true,
            kappa_mode: KappaMode::Activations,
        }
    }

    /// Full-scale hyperparameters for the semi-supervised setting
    /// (stage-1 2000 steps at 1e-3/128, stage-2 1 epoch at 1e-5/256).
    pub fn paper_semi_supervised() -> Self {
        let mut plan = Self::toy();
        plan.model.prefix_len = 8;
        plan.stage1 = Stage1Plan {
            steps: 2000,
            learning_rate: 1e-3,
            batch: 128,
        };
        plan.stage2 = Stage2Plan {
            epochs: 1,
            learning_rate: 1e-5,
            batch: 256,
            alpha: 0.0,
            setting: Setting::SemiSupervised,
        };
        plan
    }

    /// As [`TrainPlan::paper_semi_supervised`] with the auxiliary
    /// objective enabled (stage-1 1500 steps, α = 1e-3).
    pub fn paper_semi_supervised_aux() -> Self {
        let mut plan = Self::paper_semi_supervised();
        plan.stage1.steps = 1500;
        plan.stage2.alpha = 1e-3;
        plan
    }

    /// Full-scale supervised hyperparameters (stage-1 1250 steps,
    /// stage-2 3 epochs at 5e-5/128).
    pub fn paper_supervised() -> Self {
        let mut plan = Self::toy();
        plan.model.prefix_len = 8;
        plan.stage1 = Stage1Plan {
            steps: 1250,
            learning_rate: 1e-3,
            batch: 128,
        };
        plan.stage2 = Stage2Plan {
            epochs: 3,
            learning_rate: 5e-5,
            batch: 128,
            alpha: 0.0,
            setting: Setting::Supervised,
        };
        plan
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.stage2.alpha < 0.0 {
            return Err(Error::config("alpha must be nonnegative"));
        }
        if self.stage1.batch < 2 || self.stage1.batch % 2 != 0 {
            return Err(Error::config(
                "stage-1 batch must be an even number of pairs (two per triplet)",
            ));
        }
        if self.stage2.batch == 0 {
            return Err(Error::config("stage-2 batch must be positive"));
        }
        let derived = TrainMask::for_kind(self.augmentation);
        match self.augmentation {
            AugmentationKind::PrefixFixed if self.mask.theta1 || self.mask.theta2 => {
                return Err(Error::config(
                    "prefix-fixed requires theta1 and theta2 frozen in stage 2",
                ));
            }
            AugmentationKind::PrefixTuningOnly if self.mask.phi => {
                return Err(Error::config(
                    "prefix-tuning-only requires phi frozen in stage 2",
                ));
            }
            _ => {
                let _ = derived;
            }
        }
        Ok(())
    }
}

/// The full trainable bundle: encoder, augmentation pair, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub augmentation: AugmentationKind,
    pub encoder: EncoderParams,
    pub modules: AugPair,
    pub head: ClassifierHead,
}

/// The augmentation pair storage: distinct modules, one shared
/// module, or none (dropout / token-replacement baselines).
#[derive(Debug, Clone, PartialEq)]
pub enum AugPair {
    None,
    Shared(PeModule),
    Pair(Box<PeModule>, Box<PeModule>),
}

impl AugPair {
    pub fn first(&self) -> Option<&PeModule> {
        match self {
            AugPair::None => None,
            AugPair::Shared(m) => Some(m),
            AugPair::Pair(a, _) => Some(a),
        }
    }

    pub fn second(&self) -> Option<&PeModule> {
        match self {
            AugPair::None => None,
            AugPair::Shared(m) => Some(m),
            AugPair::Pair(_, b) => Some(b),
        }
    }
}

impl ModelState {
    pub fn init(plan: &TrainPlan, corpus: &Corpus) -> Result<Self> {
        let config = plan.model.resolve(corpus);
        config.validate()?;
        let encoder = EncoderParams::init(&config, seeds::derive(plan.seed, &[0xE0]));
        let modules = match plan.augmentation {
            AugmentationKind::Dropout | AugmentationKind::TokenReplacement => AugPair::None,
            AugmentationKind::PrefixSame => {
                let pe = PeConfig {
                    kind: PeKind::Prefix,
                    ..plan.pe
                };
                let (m, _) = init_pair(&pe, &config, seeds::derive(plan.seed, &[0xA0]))?;
                AugPair::Shared(m)
            }
            kind => {
                let pe = PeConfig {
                    kind: kind.pe_kind().expect("module-based augmentation"),
                    ..plan.pe
                };
                let (m1, m2) = init_pair(&pe, &config, seeds::derive(plan.seed, &[0xA0]))?;
                AugPair::Pair(Box::new(m1), Box::new(m2))
            }
        };
        let head = ClassifierHead::init(config.hidden_dim, seeds::derive(plan.seed, &[0x4E]));
        Ok(ModelState {
            config,
            augmentation: plan.augmentation,
            encoder,
            modules,
            head,
        })
    }

    /// Namespaces used by gradients, Adam state and checkpoints.
    pub fn namespaces(&self) -> Vec<(&'static str, &dyn ParamContainer)> {
        let mut out: Vec<(&'static str, &dyn ParamContainer)> =
            vec![("phi", &self.encoder), ("head", &self.head)];
        match &self.modules {
            AugPair::None => {}
            AugPair::Shared(m) => out.push(("theta", m)),
            AugPair::Pair(a, b) => {
                out.push(("theta1", a.as_ref()));
                out.push(("theta2", b.as_ref()));
            }
        }
        out
    }

    /// Flattened `namespace.name → tensor` view of every parameter.
    pub fn all_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (ns, container) in self.namespaces() {
            container.visit(&mut |name, t| out.push((format!("{ns}.{name}"), t.clone())));
        }
        out
    }
}

/// Adam bookkeeping across the named parameters of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamOpt {
    pub learning_rate: f64,
    pub states: BTreeMap<String, AdamState>,
}

impl AdamOpt {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        let state = self
            .states
            .entry(key.to_string())
            .or_insert_with(|| AdamState::new(param.numel(), AdamConfig::new(self.learning_rate)));
        state.step(param, grad)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsPoint {
    pub stage: usize,
    pub loss: f64,
    pub record: DiagnosticsRecord,
}

/// Loss and diagnostics history of a run; the step counter is global
/// and monotone across phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: usize,
    pub step: u64,
    pub losses: Vec<StepLoss>,
    pub diagnostics: Vec<DiagnosticsPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub trace: TrainState,
    pub best_dev: Option<f64>,
    pub final_dev: Option<f64>,
    pub test_spearman: Option<f64>,
}

pub struct RunOutcome {
    pub state: ModelState,
    pub report: Report,
    /// Snapshot at the best dev score, when dev evaluation ran.
    pub best: Option<Checkpoint>,
    /// Snapshot of the final state (resume continues from here).
    pub last: Checkpoint,
}

// ── Phase construction ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum PhaseKind {
    CrossEntropy { freeze_phi: bool },
    Contrastive { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PhaseSpec {
    kind: PhaseKind,
    steps: u64,
    learning_rate: f64,
    batch: usize,
    tag: u64,
}

fn contrastive_steps(plan: &TrainPlan, corpus: &Corpus) -> u64 {
    let n = match plan.stage2.setting {
        Setting::SemiSupervised => corpus.unlabeled.len(),
        Setting::Supervised => corpus.triplets.len(),
    };
    let per_epoch = n.div_ceil(plan.stage2.batch);
    (plan.stage2.epochs * per_epoch) as u64
}

fn build_phases(plan: &TrainPlan, corpus: &Corpus) -> Vec<PhaseSpec> {
    let ce = |freeze_phi: bool| PhaseSpec {
        kind: PhaseKind::CrossEntropy { freeze_phi },
        steps: plan.stage1.steps as u64,
        learning_rate: plan.stage1.learning_rate,
        batch: plan.stage1.batch,
        tag: CE_PHASE_TAG,
    };
    let contrastive = |alpha: f64| PhaseSpec {
        kind: PhaseKind::Contrastive { alpha },
        steps: contrastive_steps(plan, corpus),
        learning_rate: plan.stage2.learning_rate,
        batch: plan.stage2.batch,
        tag: CONTRASTIVE_PHASE_TAG,
    };
    let phases = match plan.schedule {
        Schedule::TwoStage => vec![ce(true), contrastive(plan.stage2.alpha)],
        Schedule::Joint => vec![contrastive(plan.stage2.alpha)],
        Schedule::SupUnsup => vec![ce(false), contrastive(0.0)],
        Schedule::SupJoint => vec![ce(false), contrastive(plan.stage2.alpha)],
    };
    phases.into_iter().filter(|p| p.steps > 0).collect()
}

fn check_corpus_for(plan: &TrainPlan, corpus: &Corpus, phases: &[PhaseSpec]) -> Result<()> {
    for phase in phases {
        match phase.kind {
            PhaseKind::CrossEntropy { .. } => {
                if corpus.triplets.is_empty() {
                    return Err(Error::config(
                        "cross-entropy training needs a labeled triplet corpus",
                    ));
                }
            }
            PhaseKind::Contrastive { alpha } => {
                if alpha > 0.0 && corpus.triplets.is_empty() {
                    return Err(Error::config(
                        "alpha > 0 needs a labeled triplet corpus for the auxiliary loss",
                    ));
                }
                match plan.stage2.setting {
                    Setting::SemiSupervised if corpus.unlabeled.is_empty() => {
                        return Err(Error::config(
                            "semi-supervised training needs unlabeled sentences",
                        ));
                    }
                    Setting::Supervised if corpus.triplets.is_empty() => {
                        return Err(Error::config(
                            "supervised contrastive training needs a triplet corpus",
                        ));
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

// ── The trainer ─────────────────────────────────────────────────────

struct Trainability {
    phi: bool,
    theta1: bool,
    theta2: bool,
    head: bool,
}

fn trainability(plan: &TrainPlan, phase: &PhaseSpec) -> Trainability {
    match phase.kind {
        PhaseKind::CrossEntropy { freeze_phi } => Trainability {
            phi: !freeze_phi,
            theta1: true,
            theta2: true,
            head: true,
        },
        PhaseKind::Contrastive { alpha } => Trainability {
            phi: plan.mask.phi,
            theta1: plan.mask.theta1,
            theta2: plan.mask.theta2,
            head: alpha > 0.0,
        },
    }
}

/// Bindings for one training step's tape.
struct StepBindings {
    enc: crate::encoder::EncoderBinding,
    first: Option<PeBinding>,
    second: Option<PeBinding>,
    head: crate::losses::HeadBinding,
    leafs: LeafSet,
}

fn bind_step(
    tape: &mut Tape,
    state: &ModelState,
    train: &Trainability,
) -> Result<StepBindings> {
    let mut leafs = LeafSet::new();
    let enc = state.encoder.bind(tape, "phi", train.phi, &mut leafs);
    let (first, second) = match &state.modules {
        AugPair::None => (None, None),
        AugPair::Shared(m) => {
            let b = m.bind(tape, "theta", train.theta1, &state.config, &mut leafs)?;
            (Some(b.clone()), Some(b))
        }
        AugPair::Pair(a, b) => (
            Some(a.bind(tape, "theta1", train.theta1, &state.config, &mut leafs)?),
            Some(b.bind(tape, "theta2", train.theta2, &state.config, &mut leafs)?),
        ),
    };
    let head = state.head.bind(tape, "head", train.head, &mut leafs);
    Ok(StepBindings {
        enc,
        first,
        second,
        head,
        leafs,
    })
}

fn replace_tokens(sentence: &Sentence, corpus: &Corpus, rng: &mut impl Rng) -> Sentence {
    sentence
        .iter()
        .map(|&tok| {
            if tok == corpus.vocab.mask_id() || tok == corpus.vocab.pad_id() {
                return tok;
            }
            if rng.gen::<f64>() < TOKEN_REPLACEMENT_PROB {
                let set = corpus.vocab.synonym_set(tok);
                set[rng.gen_range(0..set.len())]
            } else {
                tok
            }
        })
        .collect()
}

/// Epoch-wise permutation batching: a pure function of the seed, the
/// phase tag, and the step index, so resumes stay exact.
fn epoch_batch(n: usize, batch: usize, step: u64, seed: u64, tag: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let per_epoch = n.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let pos = ((step % per_epoch) as usize) * batch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeds::rng(seed, &[tag, 0xE9, epoch]));
    perm[pos..(pos + batch).min(n)].to_vec()
}

/// Cross-entropy pair batch: `batch/2` triplets sampled i.i.d., each
/// contributing its entailment and its contradiction pair.
fn ce_batch(corpus: &Corpus, batch: usize, step: u64, seed: u64, tag: u64) -> Vec<(usize, PairLabel)> {
    let mut rng = seeds::rng(seed, &[tag, 0xCE, step]);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch / 2 {
        let idx = rng.gen_range(0..corpus.triplets.len());
        out.push((idx, PairLabel::Entail));
        out.push((idx, PairLabel::Contradict));
    }
    out
}

fn encode_pooled(
    tape: &mut Tape,
    tokens: &[usize],
    state: &ModelState,
    bind: &StepBindings,
    view: u64,
    binding: Option<&PeBinding>,
    seed: u64,
    tag: u64,
    step: u64,
    item: u64,
) -> Result<NodeId> {
    let mode = EncodeMode::Train {
        dropout_seed: seeds::derive(seed, &[tag, step, item, view]),
    };
    let pass = encoder_forward_on(tape, tokens, &state.config, &bind.enc, binding, mode)?;
    Ok(pass.pooled)
}

/// CE loss over a pair batch: premises through the first module,
/// hypotheses through the second.
fn ce_loss_on(
    tape: &mut Tape,
    state: &ModelState,
    bind: &StepBindings,
    corpus: &Corpus,
    batch: usize,
    step: u64,
    seed: u64,
    tag: u64,
) -> Result<NodeId> {
    let items = ce_batch(corpus, batch, step, seed, tag);
    let mut pairs = Vec::with_capacity(items.len());
    for (i, (idx, label)) in items.iter().enumerate() {
        let t = &corpus.triplets[*idx];
        let hypothesis = match label {
            PairLabel::Entail => &t.entail,
            PairLabel::Contradict => &t.contra,
        };
        let u = encode_pooled(
            tape, &t.anchor, state, bind, 1, bind.first.as_ref(), seed, tag, step,
            i as u64,
        )?;
        let v = encode_pooled(
            tape, hypothesis, state, bind, 2, bind.second.as_ref(), seed, tag, step,
            i as u64,
        )?;
        pairs.push((u, v, *label));
    }
    siamese_ce_batch_on(tape, &pairs, &bind.head)
}

fn contrastive_loss_for_phase(
    tape: &mut Tape,
    state: &ModelState,
    bind: &StepBindings,
    corpus: &Corpus,
    plan: &TrainPlan,
    phase: &PhaseSpec,
    step: u64,
) -> Result<NodeId> {
    let seed = plan.seed;
    let tag = phase.tag;
    match plan.stage2.setting {
        Setting::SemiSupervised => {
            let indices = epoch_batch(corpus.unlabeled.len(), phase.batch, step, seed, tag);
            let mut view1 = Vec::with_capacity(indices.len());
            let mut view2 = Vec::with_capacity(indices.len());
            for (i, &idx) in indices.iter().enumerate() {
                let sentence = &corpus.unlabeled[idx];
                view1.push(encode_pooled(
                    tape, sentence, state, bind, 1, bind.first.as_ref(), seed, tag, step,
                    i as u64,
                )?);
                let second_tokens = if state.augmentation == AugmentationKind::TokenReplacement {
                    let mut rng = seeds::rng(seed, &[tag, 0x7A, step, i as u64]);
                    replace_tokens(sentence, corpus, &mut rng)
                } else {
                    sentence.clone()
                };
                view2.push(encode_pooled(
                    tape, &second_tokens, state, bind, 2, bind.second.as_ref(), seed, tag, step,
                    i as u64,
                )?);
            }
            contrastive_loss_on(tape, &view1, &view2, plan.temperature)
        }
        Setting::Supervised => {
            let indices = epoch_batch(corpus.triplets.len(), phase.batch, step, seed, tag);
            let mut anchors = Vec::with_capacity(indices.len());
            let mut positives = Vec::with_capacity(indices.len());
            let mut negatives = Vec::with_capacity(indices.len());
            for (i, &idx) in indices.iter().enumerate() {
                let t = &corpus.triplets[idx];
                anchors.push(encode_pooled(
                    tape, &t.anchor, state, bind, 1, bind.first.as_ref(), seed, tag, step,
                    i as u64,
                )?);
                positives.push(encode_pooled(
                    tape, &t.entail, state, bind, 2, bind.second.as_ref(), seed, tag, step,
                    i as u64,
                )?);
                negatives.push(encode_pooled(
                    tape, &t.contra, state, bind, 3, bind.second.as_ref(), seed, tag, step,
                    i as u64,
                )?);
            }
            supervised_contrastive_loss_on(tape, &anchors, &positives, &negatives, plan.temperature)
        }
    }
}

/// One optimizer step. Returns the loss value.
fn train_step(
    state: &mut ModelState,
    opt: &mut AdamOpt,
    corpus: &Corpus,
    plan: &TrainPlan,
    phase: &PhaseSpec,
    step: u64,
) -> Result<f64> {
    let train = trainability(plan, phase);
    let mut tape = Tape::new();
    let bind = bind_step(&mut tape, state, &train)?;

    let loss = match phase.kind {
        PhaseKind::CrossEntropy { .. } => ce_loss_on(
            &mut tape, state, &bind, corpus, phase.batch, step, plan.seed, phase.tag,
        )?,
        PhaseKind::Contrastive { alpha } => {
            let cl = contrastive_loss_for_phase(&mut tape, state, &bind, corpus, plan, phase, step)?;
            if alpha > 0.0 {
                let ce = ce_loss_on(
                    &mut tape, state, &bind, corpus, plan.stage1.batch, step, plan.seed,
                    phase.tag,
                )?;
                joint_loss_on(&mut tape, cl, ce, alpha)?
            } else {
                cl
            }
        }
    };

    let loss_value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = bind.leafs.grads(&tape);
    drop(tape);
    apply_updates(state, opt, &grads, &train)?;
    Ok(loss_value)
}

fn apply_updates(
    state: &mut ModelState,
    opt: &mut AdamOpt,
    grads: &HashMap<String, Vec<f64>>,
    train: &Trainability,
) -> Result<()> {
    let ModelState {
        encoder,
        modules,
        head,
        ..
    } = state;
    let mut groups: Vec<(&str, &mut dyn ParamContainer, bool)> = vec![
        ("phi", encoder, train.phi),
        ("head", head, train.head),
    ];
    match modules {
        AugPair::None => {}
        AugPair::Shared(m) => groups.push(("theta", m, train.theta1)),
        AugPair::Pair(a, b) => {
            groups.push(("theta1", a.as_mut(), train.theta1));
            groups.push(("theta2", b.as_mut(), train.theta2));
        }
    }
    for (ns, container, trainable) in groups {
        if !trainable {
            continue;
        }
        assign_grads(container, ns, grads);
        let mut failure = None;
        container.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            if let Some(grad) = t.grad.take() {
                if let Err(e) = opt.step(&format!("{ns}.{name}"), t, &grad) {
                    failure = Some(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(())
}

// ── Diagnostics during training ─────────────────────────────────────

fn probe_sentences(corpus: &Corpus) -> Vec<Sentence> {
    corpus
        .sts_dev
        .iter()
        .take(PROBE_SET_SIZE)
        .map(|p| p.s1.clone())
        .collect()
}

fn record_diagnostics(
    state: &ModelState,
    corpus: &Corpus,
    plan: &TrainPlan,
    global_step: u64,
    loss: f64,
) -> Result<DiagnosticsRecord> {
    let probe = probe_sentences(corpus);
    let pairs: Vec<(Sentence, Sentence)> = probe.iter().map(|s| (s.clone(), s.clone())).collect();
    let mode = if state.augmentation == AugmentationKind::Dropout {
        DivergenceMode::Dropout {
            seed: seeds::derive(plan.seed, &[0xD0, global_step]),
        }
    } else {
        DivergenceMode::Eval
    };
    let delta = if pairs.is_empty() {
        0.0
    } else {
        repr_divergence(
            &pairs,
            &state.config,
            &state.encoder,
            state.modules.first(),
            state.modules.second(),
            pairs.len(),
            mode,
        )?
    };

    let (kappa, kappa_k, kappa_v, var_gap) = match state.modules.first() {
        Some(PeModule::Prefix(p)) if p.prefix_len > 0 && !probe.is_empty() => {
            let wc = weight_convergence(&state.config, &state.encoder, p, &probe, plan.kappa_mode)?;
            let gaps = variance_gaps(&state.config, &state.encoder, p, &probe)?;
            (Some(wc.aggregate), wc.per_layer_key, wc.per_layer_value, gaps)
        }
        _ => (None, Vec::new(), Vec::new(), Vec::new()),
    };

    let dev_spearman = if corpus.sts_dev.is_empty() {
        None
    } else {
        evaluate_dev(state, &corpus.sts_dev, plan.inference)?
    };

    let _ = loss;
    Ok(DiagnosticsRecord {
        step: global_step as usize,
        delta,
        kappa,
        kappa_k,
        kappa_v,
        var_gap,
        dev_spearman,
    })
}

// ── Inference and evaluation ────────────────────────────────────────

fn merged_prefix_rows(state: &ModelState) -> Result<Option<Vec<(Tensor, Tensor)>>> {
    let (AugPair::Pair(a, b), true) = (&state.modules, true) else {
        return Ok(None);
    };
    let (PeModule::Prefix(p1), PeModule::Prefix(p2)) = (a.as_ref(), b.as_ref()) else {
        return Ok(None);
    };
    let m1 = p1.materialize(&state.config)?;
    let m2 = p2.materialize(&state.config)?;
    let merged = m1
        .iter()
        .zip(&m2)
        .map(|(x, y)| -> Result<(Tensor, Tensor)> {
            let stack = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
                let mut data = a.data.clone();
                data.extend_from_slice(&b.data);
                Ok(Tensor::matrix(a.rows() + b.rows(), a.cols(), data)?)
            };
            Ok((stack(&x.key, &y.key)?, stack(&x.value, &y.value)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(merged))
}

fn average_embeddings(a: &SentenceEmbedding, b: &SentenceEmbedding) -> SentenceEmbedding {
    SentenceEmbedding {
        vector: a
            .vector
            .iter()
            .zip(&b.vector)
            .map(|(x, y)| 0.5 * (x + y))
            .collect(),
        provenance: Provenance::Both,
    }
}

/// Embeds one sentence for evaluation. With two prefix modules the
/// default prepends both modules' rows at once; the alternative (and
/// the only option for Adapter/LoRA pairs) averages the two
/// single-module embeddings.
pub fn embed_for_inference(
    state: &ModelState,
    tokens: &[usize],
    mode: InferenceMode,
) -> Result<SentenceEmbedding> {
    match &state.modules {
        AugPair::None => encoder_forward(tokens, &state.config, &state.encoder, None, false, 0),
        AugPair::Shared(m) => encoder_forward(
            tokens,
            &state.config,
            &state.encoder,
            Some((m, Provenance::First)),
            false,
            0,
        ),
        AugPair::Pair(a, b) => {
            if mode == InferenceMode::ConcatPrefixes {
                if let Some(merged) = merged_prefix_rows(state)? {
                    return encode_eval_with_prefix_rows(
                        tokens,
                        &state.config,
                        &state.encoder,
                        &merged,
                        Provenance::Both,
                    );
                }
            }
            let e1 = encoder_forward(
                tokens,
                &state.config,
                &state.encoder,
                Some((a, Provenance::First)),
                false,
                0,
            )?;
            let e2 = encoder_forward(
                tokens,
                &state.config,
                &state.encoder,
                Some((b, Provenance::Second)),
                false,
                0,
            )?;
            Ok(average_embeddings(&e1, &e2))
        }
    }
}

/// Spearman correlation between cosine similarities of embedded pairs
/// and the gold scores. `None` when the statistic is undefined.
pub fn evaluate_dev(
    state: &ModelState,
    pairs: &[crate::corpus::ScoredPair],
    mode: InferenceMode,
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Err(Error::input("dev evaluation needs at least one pair"));
    }
    let mut preds = Vec::with_capacity(pairs.len());
    let mut golds = Vec::with_capacity(pairs.len());
    for p in pairs {
        let e1 = embed_for_inference(state, &p.s1, mode)?;
        let e2 = embed_for_inference(state, &p.s2, mode)?;
        preds.push(cosine_similarity(&e1.vector, &e2.vector)?);
        golds.push(p.score);
    }
    spearman(&preds, &golds)
}

// ── Run drivers ─────────────────────────────────────────────────────

struct RunCursor {
    phase_index: usize,
    step_in_phase: u64,
    global_step: u64,
    best_dev: Option<f64>,
}

fn run_phases(
    plan: &TrainPlan,
    corpus: &Corpus,
    state: &mut ModelState,
    opt: &mut AdamOpt,
    cursor: &mut RunCursor,
    trace: &mut TrainState,
    best: &mut Option<Checkpoint>,
) -> Result<()> {
    let phases = build_phases(plan, corpus);
    check_corpus_for(plan, corpus, &phases)?;

    while cursor.phase_index < phases.len() {
        let phase = phases[cursor.phase_index];
        trace.stage = cursor.phase_index;
        if cursor.step_in_phase == 0 {
            // stage-2 optimizer state is fresh, not carried over
            *opt = AdamOpt::new(phase.learning_rate);
            // collapse the reparametrization between stages if asked
            if !plan.keep_reparam
                && cursor.phase_index > 0
                && matches!(phase.kind, PhaseKind::Contrastive { .. })
            {
                collapse_prefixes(state)?;
            }
            record_point(plan, corpus, state, cursor, trace, best, opt, f64::NAN)?;
        }
        while cursor.step_in_phase < phase.steps {
            let loss = train_step(state, opt, corpus, plan, &phase, cursor.step_in_phase)?;
            cursor.step_in_phase += 1;
            cursor.global_step += 1;
            trace.step = cursor.global_step;
            trace.losses.push(StepLoss {
                step: cursor.global_step,
                stage: cursor.phase_index,
                loss,
            });
            if cursor.step_in_phase % plan.eval_every as u64 == 0
                || cursor.step_in_phase == phase.steps
            {
                record_point(plan, corpus, state, cursor, trace, best, opt, loss)?;
            }
            log::debug!(
                "stage {} step {} loss {loss:.6}",
                cursor.phase_index,
                cursor.step_in_phase
            );
        }
        cursor.phase_index += 1;
        cursor.step_in_phase = 0;
    }
    Ok(())
}

fn collapse_prefixes(state: &mut ModelState) -> Result<()> {
    let config = state.config.clone();
    match &mut state.modules {
        AugPair::Shared(PeModule::Prefix(p)) => p.collapse(&config)?,
        AugPair::Pair(a, b) => {
            if let PeModule::Prefix(p) = a.as_mut() {
                p.collapse(&config)?;
            }
            if let PeModule::Prefix(p) = b.as_mut() {
                p.collapse(&config)?;
            }
        }
        _ => {}
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn record_point(
    plan: &TrainPlan,
    corpus: &Corpus,
    state: &ModelState,
    cursor: &mut RunCursor,
    trace: &mut TrainState,
    best: &mut Option<Checkpoint>,
    opt: &AdamOpt,
    loss: f64,
) -> Result<()> {
    let record = record_diagnostics(state, corpus, plan, cursor.global_step, loss)?;
    if let Some(score) = record.dev_spearman {
        if cursor.best_dev.map_or(true, |b| score > b) {
            cursor.best_dev = Some(score);
            *best = Some(Checkpoint::capture(
                plan,
                state,
                opt,
                cursor.phase_index as u32,
                cursor.step_in_phase,
                cursor.global_step,
                cursor.best_dev,
            ));
        }
    }
    trace.diagnostics.push(DiagnosticsPoint {
        stage: cursor.phase_index,
        loss,
        record,
    });
    Ok(())
}

/// Runs the plan's schedule from scratch.
pub fn run_schedule(plan: &TrainPlan, corpus: &Corpus) -> Result<RunOutcome> {
    plan.validate()?;
    let mut state = ModelState::init(plan, corpus)?;
    let mut opt = AdamOpt::new(plan.stage1.learning_rate);
    let mut cursor = RunCursor {
        phase_index: 0,
        step_in_phase: 0,
        global_step: 0,
        best_dev: None,
    };
    let mut trace = TrainState::default();
    let mut best = None;
    run_phases(plan, corpus, &mut state, &mut opt, &mut cursor, &mut trace, &mut best)?;
    finish(plan, corpus, state, opt, cursor, trace, best)
}

/// Continues a checkpointed run to completion.
pub fn resume(ckpt: Checkpoint, corpus: &Corpus) -> Result<RunOutcome> {
    let plan = ckpt.plan.clone();
    plan.validate()?;
    if ckpt.config.vocab_size != corpus.vocab.vocab_size() {
        return Err(Error::config(format!(
            "checkpoint vocabulary ({}) does not match the corpus ({})",
            ckpt.config.vocab_size,
            corpus.vocab.vocab_size()
        )));
    }
    let mut state = ckpt.state;
    let mut opt = ckpt.opt;
    let mut cursor = RunCursor {
        phase_index: ckpt.phase_index as usize,
        step_in_phase: ckpt.step_in_phase,
        global_step: ckpt.global_step,
        best_dev: ckpt.best_dev,
    };
    let mut trace = TrainState {
        stage: cursor.phase_index,
        step: cursor.global_step,
        ..TrainState::default()
    };
    let mut best = None;
    run_phases(&plan, corpus, &mut state, &mut opt, &mut cursor, &mut trace, &mut best)?;
    finish(&plan, corpus, state, opt, cursor, trace, best)
}

fn finish(
    plan: &TrainPlan,
    corpus: &Corpus,
    state: ModelState,
    opt: AdamOpt,
    cursor: RunCursor,
    trace: TrainState,
    best: Option<Checkpoint>,
) -> Result<RunOutcome> {
    let final_dev = if corpus.sts_dev.is_empty() {
        None
    } else {
        evaluate_dev(&state, &corpus.sts_dev, plan.inference)?
    };
    // test follows the dev-checkpointing protocol: score the state
    // with the best dev Spearman, falling back to the final state
    let test_state = best.as_ref().map(|c| &c.state).unwrap_or(&state);
    let test_spearman = if corpus.sts_test.is_empty() {
        None
    } else {
        evaluate_dev(test_state, &corpus.sts_test, plan.inference)?
    };
    let last = Checkpoint::capture(
        plan,
        &state,
        &opt,
        cursor.phase_index as u32,
        cursor.step_in_phase,
        cursor.global_step,
        cursor.best_dev,
    );
    Ok(RunOutcome {
        state,
        report: Report {
            trace,
            best_dev: cursor.best_dev,
            final_dev,
            test_spearman,
        },
        best,
        last,
    })
}

/// Stage 1 alone: cross-entropy over NLI pairs with the encoder
/// frozen, premises through the first module and hypotheses through
/// the second. Returns the loss/diagnostics trace.
pub fn stage1_train(plan: &TrainPlan, corpus: &Corpus, state: &mut ModelState) -> Result<TrainState> {
    plan.validate()?;
    if corpus.triplets.is_empty() {
        return Err(Error::input("stage 1 needs a non-empty triplet corpus"));
    }
    let phase = PhaseSpec {
        kind: PhaseKind::CrossEntropy { freeze_phi: true },
        steps: plan.stage1.steps as u64,
        learning_rate: plan.stage1.learning_rate,
        batch: plan.stage1.batch,
        tag: CE_PHASE_TAG,
    };
    let mut opt = AdamOpt::new(phase.learning_rate);
    let mut cursor = RunCursor {
        phase_index: 0,
        step_in_phase: 0,
        global_step: 0,
        best_dev: None,
    };
    let mut trace = TrainState::default();
    let mut best = None;
    record_point(plan, corpus, state, &mut cursor, &mut trace, &mut best, &opt, f64::NAN)?;
    while cursor.step_in_phase < phase.steps {
        let loss = train_step(state, &mut opt, corpus, plan, &phase, cursor.step_in_phase)?;
        cursor.step_in_phase += 1;
        cursor.global_step += 1;
        trace.step = cursor.global_step;
        trace.losses.push(StepLoss {
            step: cursor.global_step,
            stage: 0,
            loss,
        });
        if cursor.step_in_phase % plan.eval_every as u64 == 0 || cursor.step_in_phase == phase.steps
        {
            record_point(plan, corpus, state, &mut cursor, &mut trace, &mut best, &opt, loss)?;
        }
    }
    Ok(trace)
}

/// Stage 2 alone on an already stage-1-tuned state. Returns the trace
/// plus the best-dev checkpoint.
pub fn stage2_train(
    plan: &TrainPlan,
    corpus: &Corpus,
    state: &mut ModelState,
) -> Result<(TrainState, Option<Checkpoint>)> {
    plan.validate()?;
    let phase = PhaseSpec {
        kind: PhaseKind::Contrastive {
            alpha: plan.stage2.alpha,
        },
        steps: contrastive_steps(plan, corpus),
        learning_rate: plan.stage2.learning_rate,
        batch: plan.stage2.batch,
        tag: CONTRASTIVE_PHASE_TAG,
    };
    check_corpus_for(plan, corpus, &[phase])?;
    if !plan.keep_reparam {
        collapse_prefixes(state)?;
    }
    let mut opt = AdamOpt::new(phase.learning_rate);
    let mut cursor = RunCursor {
        phase_index: 1,
        step_in_phase: 0,
        global_step: 0,
        best_dev: None,
    };
    let mut trace = TrainState::default();
    let mut best = None;
    record_point(plan, corpus, state, &mut cursor, &mut trace, &mut best, &opt, f64::NAN)?;
    while cursor.step_in_phase < phase.steps {
        let loss = train_step(state, &mut opt, corpus, plan, &phase, cursor.step_in_phase)?;
        cursor.step_in_phase += 1;
        cursor.global_step += 1;
        trace.step = cursor.global_step;
        trace.losses.push(StepLoss {
            step: cursor.global_step,
            stage: 1,
            loss,
        });
        if cursor.step_in_phase % plan.eval_every as u64 == 0 || cursor.step_in_phase == phase.steps
        {
            record_point(plan, corpus, state, &mut cursor, &mut trace, &mut best, &opt, loss)?;
        }
    }
    Ok((trace, best))
}

// ── CSV emission ────────────────────────────────────────────────────

/// Metrics CSV: the diagnostics schema plus loss and stage columns.
pub fn write_metrics_csv(report: &Report, layers: usize, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(
        file,
        "{},loss,stage",
        DiagnosticsRecord::csv_header(layers)
    )?;
    for point in &report.trace.diagnostics {
        let loss = if point.loss.is_nan() {
            String::new()
        } else {
            point.loss.to_string()
        };
        writeln!(file, "{},{},{}", point.record.csv_row(layers), loss, point.stage)?;
    }
    Ok(())
}

/// Per-step loss CSV: `step,stage,loss`.
pub fn write_loss_csv(report: &Report, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "step,stage,loss")?;
    for l in &report.trace.losses {
        writeln!(file, "{},{},{}", l.step, l.stage, l.loss)?;
    }
    Ok(())
}
