//! Training objectives: in-batch contrastive loss over cosine
//! similarities, its supervised variant with hard negatives, the
//! siamese cross-entropy head used for stage-1 tuning, and the joint
//! combination.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ndauto::{NodeId, Tape, Tensor};

use crate::params::{bind_container, LeafSet, ParamContainer};
use crate::{Error, Result};

/// Temperature and batch-size hyperparameters of the contrastive
/// objective. The default temperature follows the framework this
/// setup builds on; the batch size is the number of positive pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            batch: 32,
        }
    }
}

/// Binary classifier over the siamese feature `[u; v; |u−v|]`,
/// mapping to two logits (contradict = 0, entail = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(hidden_dim: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self {
            weight: Tensor::randn(3 * hidden_dim, 2, 0.02, &mut rng).trainable(),
            bias: Tensor::zeros(1, 2).trainable(),
        }
    }

    pub fn zeroed(hidden_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(3 * hidden_dim, 2).trainable(),
            bias: Tensor::zeros(1, 2).trainable(),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        namespace: &str,
        trainable: bool,
        leafs: &mut LeafSet,
    ) -> HeadBinding {
        let map = bind_container(tape, self, namespace, trainable, leafs);
        Self::binding_from_map(&map)
    }

    pub fn binding_from_map(map: &HashMap<String, NodeId>) -> HeadBinding {
        HeadBinding {
            weight: map["weight"],
            bias: map["bias"],
        }
    }
}

impl ParamContainer for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadBinding {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Entailment / contradiction label for one sentence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Contradict = 0,
    Entail = 1,
}

fn stack_rows(tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId> {
    if rows.is_empty() {
        return Err(Error::input("loss over an empty batch"));
    }
    Ok(tape.concat_rows(rows)?)
}

/// Row-normalizes an `N×d` node; rejects zero-norm rows.
fn normalize_rows(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (n, _) = tape.dims(x);
    let sq = tape.mul(x, x)?;
    let row_sq = tape.sum_rows(sq);
    if tape.value(row_sq).iter().any(|&s| s == 0.0) {
        return Err(Error::Tensor(ndauto::TensorError::Domain(
            "contrastive loss over a zero-norm embedding is undefined".into(),
        )));
    }
    let norms = tape.sqrt(row_sq);
    let ones = tape.constant(n, 1, vec![1.0; n])?;
    let inv = tape.div(ones, norms)?;
    Ok(tape.mul_broadcast_col(x, inv)?)
}

fn diagonal_sum(tape: &mut Tape, square: NodeId) -> Result<NodeId> {
    let (n, m) = tape.dims(square);
    let mut mask = vec![0.0; n * m];
    for i in 0..n {
        mask[i * m + i] = 1.0;
    }
    let mask = tape.constant(n, m, mask)?;
    let picked = tape.mul(square, mask)?;
    Ok(tape.sum(picked))
}

/// In-batch contrastive loss: mean over rows of
/// `logsumexp_j(cos(h_i1, h_j2)/τ) − cos(h_i1, h_i2)/τ`.
pub fn contrastive_loss_on(
    tape: &mut Tape,
    first_views: &[NodeId],
    second_views: &[NodeId],
    temperature: f64,
) -> Result<NodeId> {
    if first_views.len() != second_views.len() {
        return Err(Error::input(format!(
            "contrastive batch sides differ: {} vs {}",
            first_views.len(),
            second_views.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let n = first_views.len();
    let a = stack_rows(tape, first_views)?;
    let b = stack_rows(tape, second_views)?;
    let an = normalize_rows(tape, a)?;
    let bn = normalize_rows(tape, b)?;
    let bt = tape.transpose(bn);
    let sims = tape.matmul(an, bt)?;
    let scaled = tape.scale(sims, 1.0 / temperature);
    let lse = tape.logsumexp_rows(scaled);
    let total_lse = tape.sum(lse);
    let diag = diagonal_sum(tape, scaled)?;
    let diff = tape.sub(total_lse, diag)?;
    Ok(tape.scale(diff, 1.0 / n as f64))
}

/// Supervised contrastive loss with in-batch positives and hard
/// negatives: the denominator sums `exp(cos(aᵢ, posⱼ)/τ)` and
/// `exp(cos(aᵢ, negⱼ)/τ)` over the whole batch.
pub fn supervised_contrastive_loss_on(
    tape: &mut Tape,
    anchors: &[NodeId],
    positives: &[NodeId],
    negatives: &[NodeId],
    temperature: f64,
) -> Result<NodeId> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::input(format!(
            "supervised contrastive batch sides differ: {} anchors, {} positives, {} negatives",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let n = anchors.len();
    let a = stack_rows(tape, anchors)?;
    let p = stack_rows(tape, positives)?;
    let g = stack_rows(tape, negatives)?;
    let an = normalize_rows(tape, a)?;
    let pn = normalize_rows(tape, p)?;
    let gn = normalize_rows(tape, g)?;
    let pt = tape.transpose(pn);
    let gt = tape.transpose(gn);
    let sim_pos = tape.matmul(an, pt)?;
    let sim_pos = tape.scale(sim_pos, 1.0 / temperature);
    let sim_neg = tape.matmul(an, gt)?;
    let sim_neg = tape.scale(sim_neg, 1.0 / temperature);
    let wide = tape.concat_cols(&[sim_pos, sim_neg])?;
    let lse = tape.logsumexp_rows(wide);
    let total_lse = tape.sum(lse);
    let diag = diagonal_sum(tape, sim_pos)?;
    let diff = tape.sub(total_lse, diag)?;
    Ok(tape.scale(diff, 1.0 / n as f64))
}

/// Softmax cross-entropy of the siamese head over `[u; v; |u−v|]`.
pub fn siamese_ce_on(
    tape: &mut Tape,
    u: NodeId,
    v: NodeId,
    label: PairLabel,
    head: &HeadBinding,
) -> Result<NodeId> {
    let (ur, ud) = tape.dims(u);
    let (vr, vd) = tape.dims(v);
    if ur != 1 || vr != 1 || ud != vd {
        return Err(Error::Tensor(ndauto::TensorError::ShapeMismatch {
            op: "siamese_ce",
            lhs: vec![ur, ud],
            rhs: vec![vr, vd],
        }));
    }
    let (wr, _) = tape.dims(head.weight);
    if wr != 3 * ud {
        return Err(Error::Tensor(ndauto::TensorError::ShapeMismatch {
            op: "siamese_ce",
            lhs: vec![1, 3 * ud],
            rhs: vec![wr, 2],
        }));
    }
    let diff = tape.sub(u, v)?;
    let gap = tape.abs(diff);
    let feat = tape.concat_cols(&[u, v, gap])?;
    let logits = tape.matmul(feat, head.weight)?;
    let logits = tape.add_bias(logits, head.bias)?;
    let lse = tape.logsumexp_rows(logits);
    let mut onehot = vec![0.0; 2];
    onehot[label as usize] = 1.0;
    let mask = tape.constant(1, 2, onehot)?;
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum(picked);
    Ok(tape.sub(lse, picked)?)
}

/// Mean siamese cross-entropy over a batch of labeled pairs.
pub fn siamese_ce_batch_on(
    tape: &mut Tape,
    pairs: &[(NodeId, NodeId, PairLabel)],
    head: &HeadBinding,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::input("siamese cross-entropy over an empty batch"));
    }
    let mut total = None;
    for &(u, v, label) in pairs {
        let loss = siamese_ce_on(tape, u, v, label, head)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / pairs.len() as f64))
}

/// `l_cl + α · l_ce`.
pub fn joint_loss_on(tape: &mut Tape, l_cl: NodeId, l_ce: NodeId, alpha: f64) -> Result<NodeId> {
    if alpha < 0.0 {
        return Err(Error::config("auxiliary weight alpha must be nonnegative"));
    }
    let weighted = tape.scale(l_ce, alpha);
    Ok(tape.add(l_cl, weighted)?)
}

// ── Tensor-level conveniences (tests, examples, diagnostics) ────────

pub fn contrastive_loss(
    first_views: &[Tensor],
    second_views: &[Tensor],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<NodeId> = first_views.iter().map(|t| tape.leaf(t)).collect();
    let b: Vec<NodeId> = second_views.iter().map(|t| tape.leaf(t)).collect();
    let loss = contrastive_loss_on(&mut tape, &a, &b, temperature)?;
    Ok(tape.value(loss)[0])
}

pub fn supervised_contrastive_loss(
    anchors: &[Tensor],
    positives: &[Tensor],
    negatives: &[Tensor],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<NodeId> = anchors.iter().map(|t| tape.leaf(t)).collect();
    let p: Vec<NodeId> = positives.iter().map(|t| tape.leaf(t)).collect();
    let n: Vec<NodeId> = negatives.iter().map(|t| tape.leaf(t)).collect();
    let loss = supervised_contrastive_loss_on(&mut tape, &a, &p, &n, temperature)?;
    Ok(tape.value(loss)[0])
}

pub fn siamese_ce(u: &Tensor, v: &Tensor, label: PairLabel, head: &ClassifierHead) -> Result<f64> {
    let mut tape = Tape::new();
    let u_id = tape.leaf(u);
    let v_id = tape.leaf(v);
    let mut leafs = LeafSet::new();
    let binding = head.bind(&mut tape, "head", false, &mut leafs);
    let loss = siamese_ce_on(&mut tape, u_id, v_id, label, &binding)?;
    Ok(tape.value(loss)[0])
}

pub fn joint_loss(l_cl: f64, l_ce: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::config("auxiliary weight alpha must be nonnegative"));
    }
    Ok(l_cl + alpha * l_ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndauto::cosine_similarity;
    use rand::Rng;

    fn vecs(rows: &[&[f64]]) -> Vec<Tensor> {
        rows.iter().map(|r| Tensor::vector(r.to_vec())).collect()
    }

    /// Independent enumeration oracle: plain loops over the similarity
    /// matrix, no tape involved.
    fn contrastive_oracle(h1: &[Tensor], h2: &[Tensor], tau: f64) -> f64 {
        let n = h1.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos = cosine_similarity(&h1[i].data, &h2[i].data).unwrap() / tau;
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cosine_similarity(&h1[i].data, &h2[j].data).unwrap() / tau).exp();
            }
            total += -(pos.exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let h = vecs(&[&[0.3, 0.7]]);
        let loss = contrastive_loss(&h, &h, 0.05).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        let h = vecs(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let loss = contrastive_loss(&h, &h, 0.05).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let h1 = vecs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h2 = vecs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = contrastive_loss(&h1, &h2, 0.05).unwrap();
        let expected = (1.0 + (-20.0_f64).exp()).ln(); // per-row, both rows equal
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!(loss < 3e-9);
    }

    #[test]
    fn matches_enumeration_oracle_for_small_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 1..=4 {
            for _ in 0..10 {
                let h1: Vec<Tensor> = (0..n).map(|_| Tensor::randn(1, 6, 1.0, &mut rng)).collect();
                let h2: Vec<Tensor> = (0..n).map(|_| Tensor::randn(1, 6, 1.0, &mut rng)).collect();
                let got = contrastive_loss(&h1, &h2, 0.05).unwrap();
                let want = contrastive_oracle(&h1, &h2, 0.05);
                assert!((got - want).abs() < 1e-10, "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn invariant_under_global_rotation() {
        // Gram-Schmidt a random orthogonal matrix, rotate all
        // embeddings, and check the loss is unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let cand: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut v = cand.clone();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        let rotate = |t: &Tensor| -> Tensor {
            let out: Vec<f64> = (0..d)
                .map(|j| (0..d).map(|i| t.data[i] * basis[j][i]).sum())
                .collect();
            Tensor::vector(out)
        };
        let h1: Vec<Tensor> = (0..3).map(|_| Tensor::randn(1, d, 1.0, &mut rng)).collect();
        let h2: Vec<Tensor> = (0..3).map(|_| Tensor::randn(1, d, 1.0, &mut rng)).collect();
        let base = contrastive_loss(&h1, &h2, 0.05).unwrap();
        let r1: Vec<Tensor> = h1.iter().map(rotate).collect();
        let r2: Vec<Tensor> = h2.iter().map(rotate).collect();
        let rotated = contrastive_loss(&r1, &r2, 0.05).unwrap();
        assert!((base - rotated).abs() < 1e-10, "{base} vs {rotated}");
    }

    #[test]
    fn invariant_under_single_embedding_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h1: Vec<Tensor> = (0..3).map(|_| Tensor::randn(1, 5, 1.0, &mut rng)).collect();
        let h2: Vec<Tensor> = (0..3).map(|_| Tensor::randn(1, 5, 1.0, &mut rng)).collect();
        let base = contrastive_loss(&h1, &h2, 0.05).unwrap();
        let mut scaled = h1.clone();
        for x in &mut scaled[1].data {
            *x *= 37.5;
        }
        let after = contrastive_loss(&scaled, &h2, 0.05).unwrap();
        assert!((base - after).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_embedding_is_domain_error() {
        let h1 = vecs(&[&[0.0, 0.0]]);
        let h2 = vecs(&[&[1.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&h1, &h2, 0.05),
            Err(Error::Tensor(ndauto::TensorError::Domain(_)))
        ));
    }

    #[test]
    fn supervised_single_anchor_hand_value() {
        // pos = anchor, neg orthogonal, τ=1: −log(e/(e+1)) = ln(1+e⁻¹)
        let a = vecs(&[&[1.0, 0.0]]);
        let p = vecs(&[&[1.0, 0.0]]);
        let n = vecs(&[&[0.0, 1.0]]);
        let loss = supervised_contrastive_loss(&a, &p, &n, 1.0).unwrap();
        let expected = (1.0 + (-1.0_f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((loss - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn supervised_hard_negatives_vanish_in_the_limit() {
        // negatives at cos = −1 with small τ: their exp terms are
        // negligible, so supervised = plain contrastive on positives
        let a = vecs(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let p = vecs(&[&[0.9, 0.1], &[0.5, 0.9]]);
        let n: Vec<Tensor> = a.iter().map(|t| {
            Tensor::vector(t.data.iter().map(|x| -x).collect())
        }).collect();
        let sup = supervised_contrastive_loss(&a, &p, &n, 0.02).unwrap();
        let plain = contrastive_loss(&a, &p, 0.02).unwrap();
        assert!((sup - plain).abs() < 1e-10, "{sup} vs {plain}");
    }

    #[test]
    fn supervised_is_batch_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<Tensor> = (0..4).map(|_| Tensor::randn(1, 4, 1.0, &mut rng)).collect();
        let p: Vec<Tensor> = (0..4).map(|_| Tensor::randn(1, 4, 1.0, &mut rng)).collect();
        let n: Vec<Tensor> = (0..4).map(|_| Tensor::randn(1, 4, 1.0, &mut rng)).collect();
        let base = supervised_contrastive_loss(&a, &p, &n, 0.05).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffle = |v: &[Tensor]| -> Vec<Tensor> { perm.iter().map(|&i| v[i].clone()).collect() };
        let shuffled = supervised_contrastive_loss(&shuffle(&a), &shuffle(&p), &shuffle(&n), 0.05).unwrap();
        assert!((base - shuffled).abs() < 1e-10);
    }

    #[test]
    fn zero_head_gives_ln_two() {
        let head = ClassifierHead::zeroed(3);
        let u = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let v = Tensor::vector(vec![-0.7, 0.3, 0.1]);
        for label in [PairLabel::Entail, PairLabel::Contradict] {
            let loss = siamese_ce(&u, &v, label, &head).unwrap();
            assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_wrong_logits_cost_about_twenty() {
        // head engineered so logits = (+10, −10); label entail picks
        // column 1 -> loss = 20 + ln(1 + e⁻²⁰)
        let mut head = ClassifierHead::zeroed(1);
        head.weight = Tensor::matrix(3, 2, vec![10.0, -10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let u = Tensor::vector(vec![1.0]);
        let v = Tensor::vector(vec![1.0]);
        let loss = siamese_ce(&u, &v, PairLabel::Entail, &head).unwrap();
        assert!((loss - 20.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn swapping_views_changes_loss_except_when_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = ClassifierHead::init(3, 1);
        let u = Tensor::randn(1, 3, 1.0, &mut rng);
        let v = Tensor::randn(1, 3, 1.0, &mut rng);
        let a = siamese_ce(&u, &v, PairLabel::Entail, &head).unwrap();
        let b = siamese_ce(&v, &u, PairLabel::Entail, &head).unwrap();
        assert!((a - b).abs() > 1e-9, "asymmetric feature should differ");
        let c = siamese_ce(&u, &u, PairLabel::Entail, &head).unwrap();
        let d = siamese_ce(&u, &u, PairLabel::Entail, &head).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(0.5, 0.7, 0.0).unwrap(), 0.5);
        let j = joint_loss(0.5, 0.7, 1e-3).unwrap();
        assert!((j - 0.5007).abs() < 1e-15);
        assert!(joint_loss(0.5, 0.7, -0.1).is_err());
    }

    #[test]
    fn joint_gradient_is_weighted_sum() {
        // grad(joint) must equal grad(cl) + α·grad(ce), checked both
        // against finite differences and against the separate parts.
        use ndauto::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let emb: Vec<Tensor> = (0..4).map(|_| Tensor::randn(1, 3, 1.0, &mut rng).trainable()).collect();
        let head = ClassifierHead::init(3, 2);
        let alpha = 1e-3;

        let build = |tape: &mut Tape, ids: &[NodeId], which: u8| -> std::result::Result<NodeId, ndauto::TensorError> {
            let h1 = vec![ids[0], ids[1]];
            let h2 = vec![ids[2], ids[3]];
            let to_te = |e: Error| -> ndauto::TensorError {
                ndauto::TensorError::Domain(e.to_string())
            };
            let cl = contrastive_loss_on(tape, &h1, &h2, 0.05).map_err(to_te)?;
            let mut leafs = LeafSet::new();
            let hb = head.bind(tape, "head", false, &mut leafs);
            let ce = siamese_ce_on(tape, ids[0], ids[2], PairLabel::Entail, &hb).map_err(to_te)?;
            match which {
                0 => joint_loss_on(tape, cl, ce, alpha).map_err(to_te),
                1 => Ok(cl),
                _ => Ok(ce),
            }
        };

        let err = grad_check(&emb, |tape, ids| build(tape, ids, 0)).unwrap();
        assert!(err < 1e-5, "joint loss grad check error {err}");

        // algebraic route: backward each part separately and combine
        let analytic = |which: u8| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = emb.iter().map(|t| tape.leaf(t)).collect();
            let loss = build(&mut tape, &ids, which).unwrap();
            tape.backward(loss).unwrap();
            ids.iter().map(|&id| tape.grad(id).unwrap_or(&[0.0; 3]).to_vec()).collect()
        };
        let joint = analytic(0);
        let cl = analytic(1);
        let ce = analytic(2);
        for i in 0..4 {
            for j in 0..3 {
                let want = cl[i][j] + alpha * ce[i][j];
                assert!((joint[i][j] - want).abs() < 1e-10);
            }
        }
    }
}
