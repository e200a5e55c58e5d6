//! Classification loss with label smoothing.

use crate::autodiff::{Tape, Var};
use crate::error::NumericsError;

/// Label-smoothed cross entropy over `[B,K]` logits, averaged over the
/// batch: target distribution `q = (1-eps)*onehot + eps/K`. With `eps = 0`
/// this is ordinary cross entropy.
pub fn label_smoothed_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    eps: f64,
) -> Result<Var, NumericsError> {
    let k = *tape.value(logits).shape().last().unwrap();
    if k < 2 {
        return Err(NumericsError::InvalidConfig {
            what: format!("classification needs at least 2 classes, got {k}"),
        });
    }
    tape.smoothed_cross_entropy(logits, targets, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    fn eval(logits: Tensor, targets: &[usize], eps: f64) -> f64 {
        let mut tape = Tape::new(Precision::F64);
        let l = tape.leaf(logits);
        let loss = label_smoothed_loss(&mut tape, l, targets, eps).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn binary_uniform_logits_give_ln_two() {
        let v = eval(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[0], 0.0);
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln_k_regardless_of_smoothing() {
        for eps in [0.0, 0.05, 0.1, 0.5] {
            let v = eval(Tensor::new(vec![3, 4], vec![1.7; 12]).unwrap(), &[0, 2, 3], eps);
            assert!((v - 4f64.ln()).abs() < 1e-12, "eps={eps}: {v}");
        }
    }

    #[test]
    fn smoothed_ternary_matches_direct_formula() {
        // eps=0.1, K=3, logits=[2,0,0], target 0.
        let (eps, k) = (0.1, 3.0);
        let logits = [2.0f64, 0.0, 0.0];
        let z: f64 = logits.iter().map(|&x| x.exp()).sum();
        let logz = z.ln();
        let q = |c: usize| (if c == 0 { 1.0 - eps } else { 0.0 }) + eps / k;
        let direct: f64 = (0..3).map(|c| q(c) * (logz - logits[c])).sum();
        let v = eval(Tensor::new(vec![1, 3], logits.to_vec()).unwrap(), &[0], eps);
        assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
    }

    #[test]
    fn single_class_logits_are_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let l = tape.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        assert!(label_smoothed_loss(&mut tape, l, &[0], 0.0).is_err());
    }
}
