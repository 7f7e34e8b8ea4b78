//! Full-model gradient audit: checks analytic gradients of every
//! training objective against central finite differences, over every
//! parameter of the encoder, both augmentation modules, and the
//! classifier head.

use std::collections::HashMap;

use rand::Rng;

use ndauto::{grad_check, NodeId, Tape, Tensor, TensorError};

use crate::encoder::{
    encoder_forward_on, EncodeMode, EncoderBinding, EncoderParams, ModelConfig, Pooling,
};
use crate::losses::{
    contrastive_loss_on, joint_loss_on, siamese_ce_batch_on, supervised_contrastive_loss_on,
    ClassifierHead, PairLabel,
};
use crate::pe::{init_pair, PeConfig, PeKind};
use crate::pipeline::{AugPair, AugmentationKind, ModelState};
use crate::seeds;
use crate::{Error, Result};

/// Shape of the toy model the audit runs on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub prefix_len: usize,
    /// Positive pairs / triplets per objective.
    pub batch: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            prefix_len: 4,
            batch: 2,
            seed: 0,
        }
    }
}

const AUDIT_VOCAB: usize = 24;
const AUDIT_SENTENCE_LEN: usize = 5;

/// Maximum relative error per objective, in a fixed order:
/// contrastive, siamese cross-entropy, supervised contrastive, joint.
pub fn gradient_audit(audit: &AuditConfig) -> Result<Vec<(&'static str, f64)>> {
    let config = ModelConfig {
        layers: audit.layers,
        hidden_dim: audit.hidden_dim,
        n_heads: audit.n_heads,
        vocab_size: AUDIT_VOCAB,
        max_len: 8,
        dropout_p: 0.0,
        pooling: Pooling::MaskToken,
        prefix_len: audit.prefix_len,
        mask_id: 1,
    };
    config.validate()?;
    let pe = PeConfig {
        kind: PeKind::Prefix,
        ..PeConfig::default()
    };
    let encoder = EncoderParams::init(&config, seeds::derive(audit.seed, &[0xE0]));
    let (m1, m2) = init_pair(&pe, &config, seeds::derive(audit.seed, &[0xA0]))?;
    let head = ClassifierHead::init(config.hidden_dim, seeds::derive(audit.seed, &[0x4E]));
    let state = ModelState {
        config: config.clone(),
        augmentation: AugmentationKind::PrefixDifferent,
        encoder,
        modules: AugPair::Pair(Box::new(m1), Box::new(m2)),
        head,
    };

    // Fixed synthetic batch: triplets of token sequences with the
    // trailing mask position the pooling selects.
    let mut rng = seeds::rng(audit.seed, &[0x70]);
    let sentence = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut s: Vec<usize> = (0..AUDIT_SENTENCE_LEN - 1)
            .map(|_| rng.gen_range(2..AUDIT_VOCAB))
            .collect();
        s.push(1);
        s
    };
    let batch: Vec<[Vec<usize>; 3]> = (0..audit.batch)
        .map(|_| [sentence(&mut rng), sentence(&mut rng), sentence(&mut rng)])
        .collect();

    let flat = state.all_tensors();
    let names: Vec<String> = flat.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = flat.into_iter().map(|(_, t)| t).collect();

    let run = |objective: Objective| -> Result<f64> {
        let err = grad_check(&tensors, |tape, ids| {
            build_objective(tape, ids, &names, &state, &batch, objective)
                .map_err(|e| TensorError::Domain(e.to_string()))
        })
        .map_err(Error::Tensor)?;
        Ok(err)
    };

    Ok(vec![
        ("contrastive", run(Objective::Contrastive)?),
        ("siamese-ce", run(Objective::SiameseCe)?),
        ("supervised-contrastive", run(Objective::SupervisedContrastive)?),
        ("joint", run(Objective::Joint)?),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Contrastive,
    SiameseCe,
    SupervisedContrastive,
    Joint,
}

struct AuditBindings {
    enc: EncoderBinding,
    first: crate::pe::PeBinding,
    second: crate::pe::PeBinding,
    head: crate::losses::HeadBinding,
}

fn scoped(ids: &HashMap<String, NodeId>, ns: &str) -> HashMap<String, NodeId> {
    ids.iter()
        .filter_map(|(k, v)| k.strip_prefix(&format!("{ns}.")).map(|n| (n.to_string(), *v)))
        .collect()
}

fn bindings_from_leafs(
    tape: &mut Tape,
    ids: &[NodeId],
    names: &[String],
    state: &ModelState,
) -> Result<AuditBindings> {
    let map: HashMap<String, NodeId> = names.iter().cloned().zip(ids.iter().copied()).collect();
    let AugPair::Pair(m1, m2) = &state.modules else {
        return Err(Error::input("audit expects a two-module state"));
    };
    Ok(AuditBindings {
        enc: EncoderBinding::from_ids(state.config.layers, &scoped(&map, "phi")),
        first: m1.binding_from_map(tape, &scoped(&map, "theta1"), &state.config)?,
        second: m2.binding_from_map(tape, &scoped(&map, "theta2"), &state.config)?,
        head: ClassifierHead::binding_from_map(&scoped(&map, "head")),
    })
}

fn build_objective(
    tape: &mut Tape,
    ids: &[NodeId],
    names: &[String],
    state: &ModelState,
    batch: &[[Vec<usize>; 3]],
    objective: Objective,
) -> Result<NodeId> {
    let b = bindings_from_leafs(tape, ids, names, state)?;
    let encode = |tape: &mut Tape, tokens: &[usize], second: bool| -> Result<NodeId> {
        let binding = if second { &b.second } else { &b.first };
        let pass = encoder_forward_on(
            tape,
            tokens,
            &state.config,
            &b.enc,
            Some(binding),
            EncodeMode::Eval,
        )?;
        Ok(pass.pooled)
    };

    let contrastive = |tape: &mut Tape| -> Result<NodeId> {
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        for item in batch {
            v1.push(encode(tape, &item[0], false)?);
            v2.push(encode(tape, &item[0], true)?);
        }
        contrastive_loss_on(tape, &v1, &v2, 0.05)
    };
    let ce = |tape: &mut Tape| -> Result<NodeId> {
        let mut pairs = Vec::new();
        for item in batch {
            let u = encode(tape, &item[0], false)?;
            let v = encode(tape, &item[1], true)?;
            pairs.push((u, v, PairLabel::Entail));
            let u = encode(tape, &item[0], false)?;
            let v = encode(tape, &item[2], true)?;
            pairs.push((u, v, PairLabel::Contradict));
        }
        siamese_ce_batch_on(tape, &pairs, &b.head)
    };

    match objective {
        Objective::Contrastive => contrastive(tape),
        Objective::SiameseCe => ce(tape),
        Objective::SupervisedContrastive => {
            let mut anchors = Vec::new();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for item in batch {
                anchors.push(encode(tape, &item[0], false)?);
                positives.push(encode(tape, &item[1], true)?);
                negatives.push(encode(tape, &item[2], true)?);
            }
            supervised_contrastive_loss_on(tape, &anchors, &positives, &negatives, 0.05)
        }
        Objective::Joint => {
            let cl = contrastive(tape)?;
            let aux = ce(tape)?;
            joint_loss_on(tape, cl, aux, 1e-3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_audit_passes() {
        let audit = AuditConfig {
            layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            prefix_len: 2,
            batch: 2,
            seed: 3,
        };
        for (name, err) in gradient_audit(&audit).unwrap() {
            assert!(err < 1e-5, "{name}: max relative error {err}");
        }
    }
}
