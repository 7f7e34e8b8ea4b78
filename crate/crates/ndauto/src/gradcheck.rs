//! Central finite-difference validation of analytic gradients.
//!
//! The numeric side re-evaluates the loss function at perturbed
//! parameter values and never touches the backward pass, so it stays
//! an independent oracle for everything the tape computes.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::TensorError;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error between analytic and central-difference
/// gradients over every coordinate of every parameter:
/// `|analytic − fd| / max(1, |fd|)`.
///
/// `build_loss` receives a fresh tape plus one leaf per parameter (in
/// order) and must return a scalar loss node. It must be deterministic
/// given the parameter values; non-determinism aborts the check.
pub fn grad_check<F>(params: &[Tensor], build_loss: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    grad_check_with(params, DEFAULT_STEP, build_loss)
}

pub fn grad_check_with<F>(params: &[Tensor], h: f64, build_loss: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |work: &[Tensor], trainable: bool| -> Result<(Tape, NodeId), TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = work.iter().map(|t| tape.leaf_with(t, trainable)).collect();
        let loss = build_loss(&mut tape, &ids)?;
        let (r, c) = tape.dims(loss);
        if r * c != 1 {
            return Err(TensorError::NonScalarLoss { shape: vec![r, c] });
        }
        Ok((tape, loss))
    };

    let mut work = params.to_vec();

    // Determinism gate: two evaluations at the base point must agree bitwise.
    let (tape_a, loss_a) = eval(&work, false)?;
    let (tape_b, loss_b) = eval(&work, false)?;
    let base_a = tape_a.value(loss_a)[0];
    let base_b = tape_b.value(loss_b)[0];
    if base_a.to_bits() != base_b.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "loss evaluated twice at the same point gave {base_a} and {base_b}"
        )));
    }
    drop(tape_a);
    drop(tape_b);

    // Analytic gradients.
    let (mut tape, loss) = eval(&work, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = {
        let mut ids = Vec::new();
        // Leaves were pushed first, in order, so their ids are 0..n.
        for (i, p) in work.iter().enumerate() {
            let id = NodeId(i);
            ids.push(
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()]),
            );
        }
        ids
    };
    drop(tape);

    let mut max_rel = 0.0_f64;
    for pi in 0..work.len() {
        for j in 0..work[pi].numel() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + h;
            let (tp, lp) = eval(&work, false)?;
            let f_plus = tp.value(lp)[0];
            work[pi].data[j] = orig - h;
            let (tm, lm) = eval(&work, false)?;
            let f_minus = tm.value(lm)[0];
            work[pi].data[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let rel = (analytic[pi][j] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::vector(vec![1.0, -2.0, 0.5]).trainable();
        let err = grad_check(&[p], |tape, ids| {
            let w = tape.constant(3, 1, vec![2.0, -1.0, 4.0])?;
            let y = tape.matmul(ids[0], w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(err < 1e-10, "linear grad check error {err}");
    }

    #[test]
    fn softmax_cross_entropy_within_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::randn(4, 5, 1.0, &mut rng).trainable();
        // CE against class 2 of each row via logsumexp - picked logit.
        let err = grad_check(&[logits], |tape, ids| {
            let lse = tape.logsumexp_rows(ids[0]);
            let total_lse = tape.sum(lse);
            let mut mask = vec![0.0; 4 * 5];
            for r in 0..4 {
                mask[r * 5 + 2] = 1.0;
            }
            let m = tape.constant(4, 5, mask)?;
            let picked = tape.mul(ids[0], m)?;
            let total_picked = tape.sum(picked);
            let diff = tape.sub(total_lse, total_picked)?;
            Ok(tape.scale(diff, 0.25))
        })
        .unwrap();
        assert!(err < 1e-6, "softmax-CE grad check error {err}");
    }

    #[test]
    fn non_deterministic_function_aborts() {
        use std::cell::Cell;
        let counter = Cell::new(0.0_f64);
        let p = Tensor::scalar(1.0).trainable();
        let err = grad_check(&[p], |tape, ids| {
            counter.set(counter.get() + 1.0);
            let noise = tape.scalar_const(counter.get());
            let prod = tape.mul(ids[0], noise)?;
            Ok(tape.sum(prod))
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic(_)));
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::randn(3, 4, 1.0, &mut rng).trainable();
        let b = Tensor::randn(3, 4, 1.0, &mut rng).trainable();
        let w = Tensor::randn(4, 3, 1.0, &mut rng).trainable();
        let bias = Tensor::randn(1, 4, 1.0, &mut rng).trainable();
        let col = Tensor::randn(3, 1, 1.0, &mut rng).trainable();
        let scale = Tensor::randn(1, 4, 0.5, &mut rng).trainable();
        let offset = Tensor::randn(1, 4, 0.5, &mut rng).trainable();
        // keep div/sqrt away from zero
        let bpos = {
            let mut t = b.clone();
            for x in &mut t.data {
                *x = x.abs() + 0.5;
            }
            t
        };

        let params = vec![a, bpos, w, bias, col, scale, offset];
        let weights: Vec<f64> = (0..12).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let err = grad_check(&params, move |tape, ids| {
            let (a, b, w, bias, col, scale, offset) =
                (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
            let sum = tape.add(a, b)?;
            let diff = tape.sub(a, b)?;
            let prod = tape.mul(sum, diff)?;
            let quot = tape.div(prod, b)?;
            let biased = tape.add_bias(quot, bias)?;
            let scaled = tape.scale(biased, 0.7);
            let act = tape.tanh(scaled);
            let act = tape.abs(act);
            let act = tape.relu(act);
            let normed = tape.layer_norm(act, scale, offset, 1e-5)?;
            let bc = tape.mul_broadcast_col(normed, col)?;
            let mm = tape.matmul(bc, w)?;
            let mmt = tape.transpose(mm);
            let cat = tape.concat_rows(&[mm, mmt])?;
            let catc = tape.concat_cols(&[cat, cat])?;
            let sl = tape.slice_cols(catc, 1, 4)?;
            let sl = tape.slice_rows(sl, 0, 4)?;
            let sm = tape.softmax_rows(sl);
            let lse = tape.logsumexp_rows(sl);
            let sq = tape.mul(b, b)?;
            let root = tape.sqrt(sq);
            let gat = tape.gather(root, &[1, 1, 0])?;
            let mr = tape.mean_rows(gat)?;
            let rs = tape.row_select(sm, 2)?;
            let sr = tape.sum_rows(sm);

            // weighted sum of everything so all paths contribute
            let smw = tape.constant(4, 3, vec![weights[0]; 12])?;
            let t1 = tape.mul(sm, smw)?;
            let s1 = tape.sum(t1);
            let s2 = tape.sum(lse);
            let s2 = tape.scale(s2, weights[1]);
            let s3 = tape.sum(mr);
            let s3 = tape.scale(s3, weights[2]);
            let s4 = tape.sum(rs);
            let s4 = tape.scale(s4, weights[3]);
            let s5 = tape.sum(sr);
            let s5 = tape.scale(s5, weights[4]);
            let mut total = tape.add(s1, s2)?;
            total = tape.add(total, s3)?;
            total = tape.add(total, s4)?;
            total = tape.add(total, s5)?;
            Ok(total)
        })
        .unwrap();
        assert!(err < 1e-5, "combined op grad check error {err}");
    }
}
