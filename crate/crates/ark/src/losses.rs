//! Task-specific classification losses and the student-teacher consistency
//! loss, all recorded on the tape so gradients flow back into the student.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceMultilabel,
    CeMulticlass,
    MseConsistency,
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean binary cross-entropy with logits. Targets must lie in [0, 1].
pub fn bce_with_logits(
    tape: &mut Tape,
    logits: &Tensor,
    targets: &Tensor,
) -> Result<Tensor, LossError> {
    if targets.values.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(LossError::Data(format!(
            "bce target outside [0, 1]: {:?}",
            targets
                .values
                .iter()
                .find(|y| !(0.0..=1.0).contains(*y))
                .unwrap()
        )));
    }
    Ok(tape.bce_with_logits(logits, targets)?)
}

/// `-log softmax(logits)[class_index]` for a single logit vector.
pub fn ce_multiclass(
    tape: &mut Tape,
    logits: &Tensor,
    class_index: usize,
) -> Result<Tensor, LossError> {
    let k = logits.numel();
    if class_index >= k {
        return Err(LossError::Data(format!(
            "class index {class_index} out of range for {k} classes"
        )));
    }
    Ok(tape.cross_entropy_rows(logits, &[class_index])?)
}

/// Mean cross-entropy over a batch of logit rows.
pub fn ce_multiclass_rows(
    tape: &mut Tape,
    logits: &Tensor,
    classes: &[usize],
) -> Result<Tensor, LossError> {
    let k = logits.shape.last().copied().unwrap_or(0);
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(LossError::Data(format!(
            "class index {c} out of range for {k} classes"
        )));
    }
    Ok(tape.cross_entropy_rows(logits, classes)?)
}

/// Mean squared error between the (stop-gradient) teacher embedding and the
/// student embedding. Gradient flows only into `emb_s`; `emb_t` must come off
/// the teacher path, which never requires gradients.
pub fn mse_consistency(
    tape: &mut Tape,
    emb_t: &Tensor,
    emb_s: &Tensor,
) -> Result<Tensor, LossError> {
    if emb_t.shape != emb_s.shape {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "mse_consistency",
            lhs: emb_t.shape.clone(),
            rhs: emb_s.shape.clone(),
        }));
    }
    Ok(tape.mse(&emb_t.detached(), emb_s)?)
}

/// `task_loss + weight * consistency`.
pub fn total_loss(
    tape: &mut Tape,
    task_loss: &Tensor,
    consistency: &Tensor,
    weight: f64,
) -> Result<Tensor, LossError> {
    if weight < 0.0 {
        return Err(LossError::Config(format!(
            "consistency weight must be >= 0, got {weight}"
        )));
    }
    let scaled = tape.scale(consistency, weight)?;
    Ok(tape.add(task_loss, &scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_logit_zero_target_one_is_ln2() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = Tensor::new(vec![1], vec![1.0]).unwrap();
        let loss = bce_with_logits(&mut tape, &z, &y).unwrap();
        assert!((loss.values[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_no_overflow() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![1], vec![30.0]).unwrap();
        let y = Tensor::new(vec![1], vec![1.0]).unwrap();
        let loss = bce_with_logits(&mut tape, &z, &y).unwrap();
        assert!(loss.values[0] < 1e-9);
        // No NaN/Inf anywhere in the working logit range.
        for &z in &[-700.0, -30.0, 0.0, 30.0, 700.0] {
            let mut tape = Tape::new();
            let zt = Tensor::new(vec![1], vec![z]).unwrap();
            let l = bce_with_logits(&mut tape, &zt, &y).unwrap();
            assert!(l.values[0].is_finite(), "logit {z}");
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let naive = -z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let s = 1.0 / (1.0 + (-z).exp());
                y * s.ln() + (1.0 - y) * (1.0 - s).ln()
            })
            .sum::<f64>()
            / 5.0;
        let mut tape = Tape::new();
        let zt = Tensor::new(vec![5], z).unwrap();
        let yt = Tensor::new(vec![5], y).unwrap();
        let loss = bce_with_logits(&mut tape, &zt, &yt).unwrap();
        assert!((loss.values[0] - naive).abs() < 1e-10);
    }

    #[test]
    fn bce_rejects_target_outside_unit_interval() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = Tensor::new(vec![1], vec![1.5]).unwrap();
        assert!(matches!(
            bce_with_logits(&mut tape, &z, &y),
            Err(LossError::Data(_))
        ));
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        for k in [2usize, 3, 7] {
            let mut tape = Tape::new();
            let z = Tensor::new(vec![k], vec![0.3; k]).unwrap();
            let loss = ce_multiclass(&mut tape, &z, 1).unwrap();
            assert!((loss.values[0] - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_saturated_margin() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![3], vec![30.0, 0.0, 0.0]).unwrap();
        let loss = ce_multiclass(&mut tape, &z, 0).unwrap();
        assert!(loss.values[0] >= 0.0);
        assert!(loss.values[0] < 1e-9);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let zt = tape.leaf(&Tensor::new(vec![4], z.clone()).unwrap().with_grad());
        let loss = ce_multiclass(&mut tape, &zt, 2).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&zt).unwrap();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        for j in 0..4 {
            let p = (z[j] - m).exp() / denom;
            let expect = p - if j == 2 { 1.0 } else { 0.0 };
            assert!((g[j] - expect).abs() < 1e-10, "component {j}");
        }
    }

    #[test]
    fn ce_index_out_of_range() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            ce_multiclass(&mut tape, &z, 3),
            Err(LossError::Data(_))
        ));
    }

    #[test]
    fn mse_identical_is_zero_and_analytic_case() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2], vec![0.4, -0.1]).unwrap();
        let loss = mse_consistency(&mut tape, &a, &a.clone()).unwrap();
        assert_eq!(loss.values[0], 0.0);

        let mut tape = Tape::new();
        let t = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let s = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = mse_consistency(&mut tape, &t, &s).unwrap();
        assert_eq!(loss.values[0], 1.0);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let emb_t = Tensor::new(vec![4], vec![0.2, -0.3, 0.5, 0.9]).unwrap();
        let s0 = Tensor::new(vec![4], vec![0.1, 0.4, -0.2, 0.3]).unwrap();
        let report = crate::tensor::grad_check(
            |tape, s| mse_consistency(tape, &emb_t, s).map_err(|_| TensorError::Contract("loss".into())),
            &s0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // Closed form: 2 (s - t) / d
        let mut tape = Tape::new();
        let s = tape.leaf(&s0.clone().with_grad());
        let loss = mse_consistency(&mut tape, &emb_t, &s).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&s).unwrap();
        for i in 0..4 {
            let expect = 2.0 * (s0.values[i] - emb_t.values[i]) / 4.0;
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_sum_and_weight_zero() {
        let mut tape = Tape::new();
        let a = Tensor::scalar(0.7);
        let b = Tensor::scalar(0.3);
        let total = total_loss(&mut tape, &a, &b, 1.0).unwrap();
        assert!((total.values[0] - 1.0).abs() < 1e-15);
        let total = total_loss(&mut tape, &a, &b, 0.0).unwrap();
        assert_eq!(total.values[0], 0.7);
        let zero = Tensor::scalar(0.0);
        let total = total_loss(&mut tape, &a, &zero, 1.0).unwrap();
        assert_eq!(total.values[0], 0.7);
        assert!(matches!(
            total_loss(&mut tape, &a, &b, -0.5),
            Err(LossError::Config(_))
        ));
    }
}
