//! Finite-difference verification of backward passes.
//!
//! A model is supplied as a builder closure so the harness can replay the
//! same forward computation many times with perturbed parameters. The
//! builder must register one `tape.param(...)` per entry of `initial`, in
//! order, using the tensor values it is handed, and return the loss Var.

use crate::autodiff::{Tape, Var};
use crate::error::NumericsError;
use crate::tensor::{Precision, Tensor};

/// One named parameter's worst-case disagreement between backward and
/// central finite differences.
#[derive(Clone, Debug)]
pub struct GradReportEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index inside the tensor where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Full report, sorted worst-first.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradReportEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.first().map(|e| e.max_rel_err).unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loss builder: records the model onto `tape` with the given parameter
/// values and returns the scalar loss node.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &[Tensor]) -> Result<Var, NumericsError> + 'a;

/// Compare backward-pass gradients against central differences
/// `(f(p+eps) - f(p-eps)) / (2*eps)` for every element of every parameter.
///
/// Runs in 64-bit regardless of the surrounding configuration, since the
/// oracle needs the headroom.
pub fn check_gradients(
    names: &[&str],
    initial: &[Tensor],
    eps: f64,
    build: &LossBuilder,
) -> Result<GradReport, NumericsError> {
    if eps <= 0.0 {
        return Err(NumericsError::InvalidConfig {
            what: format!("finite-difference eps {eps} must be > 0"),
        });
    }
    if names.len() != initial.len() {
        return Err(NumericsError::InvalidConfig {
            what: format!("{} names for {} parameters", names.len(), initial.len()),
        });
    }

    // Analytic gradients: one forward + backward at the unperturbed point.
    let mut tape = Tape::new(Precision::F64);
    let loss_var = build(&mut tape, initial)?;
    let params = tape.param_vars();
    if params.len() != initial.len() {
        return Err(NumericsError::InvalidConfig {
            what: format!("builder registered {} params, expected {}", params.len(), initial.len()),
        });
    }
    let grads = tape.backward(loss_var)?;
    let analytic: Vec<&Tensor> = params.iter().map(|&v| grads.of(v).unwrap()).collect();

    let eval = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut t = Tape::new(Precision::F64);
        let lv = build(&mut t, values)?;
        Ok(t.value(lv).item())
    };

    let mut entries = Vec::with_capacity(initial.len());
    for (pi, name) in names.iter().enumerate() {
        let mut worst = GradReportEntry {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..initial[pi].numel() {
            let mut plus = initial.to_vec();
            plus[pi].data_mut()[j] += eps;
            let mut minus = initial.to_vec();
            minus[pi].data_mut()[j] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            // The 1e-3 floor turns the comparison absolute for near-zero
            // gradients, where central differences only deliver about
            // |loss|*1e-16/eps of absolute accuracy.
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / scale;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    entries.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    Ok(GradReport { entries })
}

/// End-to-end check of the full language-model training loss: random
/// token windows through embedding, the recurrent stack, the tied
/// decoder, and cross entropy, with every parameter verified against
/// central differences.
pub fn check_lm_gradients(
    config: &crate::network::ModelConfig,
    t: usize,
    b: usize,
    seed: u64,
    eps: f64,
) -> Result<GradReport, crate::error::NetworkError> {
    use rand::Rng;
    use rand::SeedableRng;

    let lm = crate::network::build_language_model(config, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let ids: Vec<usize> = (0..t * b).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let targets: Vec<usize> = (0..t * b).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let names = lm.params.trainable_names();
    let initial: Vec<Tensor> = lm.params.trainable().map(|(_, tensor)| tensor.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let config = config.clone();
    let report = check_gradients(&name_refs, &initial, eps, &|tape, values| {
        let mut vars = indexmap::IndexMap::new();
        for (name, value) in names.iter().zip(values) {
            vars.insert(name.clone(), tape.param(value.clone()));
        }
        let binding = crate::network::TapeBinding::from_vars(vars);
        let mut state = crate::network::RecurrentState::zeros(&config, b);
        let logits = crate::network::lm_forward(
            tape, &binding, &config, &ids, t, b, &mut state, None,
        )
        .map_err(|e| match e {
            crate::error::NetworkError::Numerics(n) => n,
            other => NumericsError::InvalidConfig { what: other.to_string() },
        })?;
        tape.smoothed_cross_entropy(logits, &targets, 0.0)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameter_model_yields_empty_report() {
        let report = check_gradients(&[], &[], 1e-5, &|tape, _| {
            let c = tape.leaf(Tensor::scalar(3.0));
            tape.sum_all(c)
        })
        .unwrap();
        assert!(report.is_empty());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn linear_regression_toy_is_accurate_to_1e9() {
        // loss = mean((x @ w + b - y)^2) on fixed data.
        let x = Tensor::new(vec![4, 2], vec![0.1, 0.9, -0.4, 0.3, 0.7, -0.2, 0.5, 0.6]).unwrap();
        let y = Tensor::new(vec![4, 1], vec![0.3, -0.1, 0.4, 0.2]).unwrap();
        let w0 = Tensor::new(vec![2, 1], vec![0.25, -0.75]).unwrap();
        let b0 = Tensor::new(vec![1], vec![0.05]).unwrap();
        let report = check_gradients(&["w", "b"], &[w0, b0], 1e-5, &|tape, values| {
            let w = tape.param(values[0].clone());
            let b = tape.param(values[1].clone());
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let pred = tape.matmul(xv, w)?;
            let pred = tape.add_bias(pred, b)?;
            let diff = tape.sub(pred, yv)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean_all(sq)
        })
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(report.max_rel_err() < 1e-9, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn report_is_sorted_by_error_descending() {
        // Route the second parameter through the relu kink at zero, where
        // central differences genuinely disagree with the true derivative.
        let a0 = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        let k0 = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = check_gradients(&["smooth", "kinked"], &[a0, k0], 1e-3, &|tape, values| {
            let a = tape.param(values[0].clone());
            let k = tape.param(values[1].clone());
            let sq = tape.mul(a, a)?;
            let s1 = tape.sum_all(sq)?;
            let r = tape.relu(k)?;
            let s2 = tape.sum_all(r)?;
            tape.add(s1, s2)
        })
        .unwrap();
        assert_eq!(report.entries[0].name, "kinked");
        assert!(report.entries[0].max_rel_err >= report.entries[1].max_rel_err);
    }

    #[test]
    fn builder_param_count_mismatch_is_reported() {
        let err = check_gradients(&["w"], &[Tensor::scalar(1.0)], 1e-5, &|tape, _| {
            let c = tape.leaf(Tensor::scalar(1.0));
            tape.sum_all(c)
        })
        .unwrap_err();
        assert!(matches!(err, NumericsError::InvalidConfig { .. }));
    }
}
