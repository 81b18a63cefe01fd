//! Finite-difference verification of tape gradients.
//!
//! Central differences with a configurable step compare against the analytic
//! reverse-mode gradients, element by element. The error is relative with a
//! unit floor: `|analytic - numeric| / max(1, |analytic|)`.

use super::tape::{Tape, Var};
use super::NdArray;

#[derive(Clone, Copy)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many elements per input (stride-sampled,
    /// deterministic). `None` checks everything.
    pub max_elems_per_input: Option<usize>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-5,
            max_elems_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Runs `f` once on a tape to collect analytic gradients of its scalar
/// output with respect to every input, then perturbs inputs one element at a
/// time and compares.
pub fn check_gradients(
    inputs: &[NdArray],
    f: impl Fn(&Tape, &[Var]) -> Var,
    config: &CheckConfig,
) -> CheckReport {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone(), true))
        .collect();
    let out = f(&tape, &vars);
    assert_eq!(out.numel(), 1, "gradcheck target must be scalar");
    tape.backward(&out).expect("backward on gradcheck target");
    let analytic: Vec<NdArray> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| NdArray::zeros(&v.shape())))
        .collect();

    let eval = |perturbed: &[NdArray]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|a| tape.leaf(a.clone(), false))
            .collect();
        f(&tape, &vars).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match config.max_elems_per_input {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let mut plus = input.data().to_vec();
            let mut minus = plus.clone();
            plus[e] += config.step;
            minus[e] -= config.step;
            let mut work: Vec<NdArray> = inputs.to_vec();
            work[i] = NdArray::new_unchecked(input.shape(), plus);
            let fp = eval(&work);
            work[i] = NdArray::new_unchecked(input.shape(), minus);
            let fm = eval(&work);
            let numeric = (fp - fm) / (2.0 * config.step);
            let an = analytic[i].data()[e];
            let rel = (an - numeric).abs() / an.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    CheckReport {
        max_rel_err,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::ops;

    #[test]
    fn catches_a_wrong_gradient() {
        // A deliberately wrong op: forward x^2 with backward claiming 3x.
        let x = NdArray::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let report = check_gradients(
            &[x],
            |_, vars| {
                let wrong = vars[0].tape().record(
                    &[&vars[0]],
                    vars[0].value().map(|v| v * v),
                    Box::new(|g, saved, _| {
                        vec![Some(
                            g.iter()
                                .zip(saved.parents[0].data())
                                .map(|(g, x)| g * 3.0 * x)
                                .collect(),
                        )]
                    }),
                );
                ops::sum_all(&wrong)
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err > 1e-2, "harness failed to flag a bad rule");
    }

    #[test]
    fn sampling_limits_work() {
        let x = NdArray::full(&[100], 0.5);
        let report = check_gradients(
            &[x],
            |_, vars| ops::sum_all(&ops::tanh(&vars[0])),
            &CheckConfig {
                step: 1e-5,
                max_elems_per_input: Some(10),
            },
        );
        assert!(report.checked <= 10);
        assert!(report.max_rel_err < 1e-8);
    }
}
