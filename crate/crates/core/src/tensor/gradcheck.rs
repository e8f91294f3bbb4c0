//! Finite-difference verification of the reverse-mode tape.
//!
//! The checker rebuilds the forward computation from scratch for every
//! perturbed input, so it shares no state with `backward` and stays an
//! independent oracle. Checks run in `f64`, where a central difference with
//! step 1e-5 resolves gradients to ~1e-10 absolute.

use super::{Graph, TensorId};
use crate::error::Result;

/// Central-difference gradient checker.
pub struct FiniteDiff {
    /// Perturbation half-step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Maximum allowed relative error for well-scaled components.
    pub rtol: f64,
    /// Absolute noise floor for components whose magnitude is below `denom_floor`.
    pub atol: f64,
    /// Components with `max(|analytic|,|numeric|)` below this are compared absolutely.
    pub denom_floor: f64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        FiniteDiff {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-9,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug)]
pub struct GradReport {
    /// Total scalar components compared.
    pub checked: usize,
    pub max_abs_err: f64,
    /// Worst relative error among well-scaled components.
    pub max_rel_err: f64,
    /// Human-readable descriptions of failing components (capped).
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

impl FiniteDiff {
    /// Compare tape gradients of `build`'s scalar output against central
    /// finite differences, for every element of every input tensor.
    ///
    /// `build` must be a pure function of the leaf values: it is re-invoked
    /// on a fresh graph for each perturbation.
    pub fn check<F>(&self, inputs: &[(Vec<usize>, Vec<f64>)], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
    {
        // Analytic pass: all inputs are trainable leaves.
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(inputs.len());
        for (shape, data) in inputs {
            ids.push(g.param(shape.clone(), data.clone())?);
        }
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.data(id).len()])
            })
            .collect();

        let eval = |work: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
            let mut g = Graph::new();
            let mut ids = Vec::with_capacity(work.len());
            for (shape, data) in work {
                ids.push(g.constant(shape.clone(), data.clone())?);
            }
            let loss = build(&mut g, &ids)?;
            Ok(g.scalar_value(loss))
        };

        let mut work = inputs.to_vec();
        let mut report = GradReport {
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        };
        for ti in 0..inputs.len() {
            for k in 0..inputs[ti].1.len() {
                let orig = work[ti].1[k];
                work[ti].1[k] = orig + self.step;
                let fp = eval(&work)?;
                work[ti].1[k] = orig - self.step;
                let fm = eval(&work)?;
                work[ti].1[k] = orig;

                let numeric = (fp - fm) / (2.0 * self.step);
                let ana = analytic[ti][k];
                let abs = (ana - numeric).abs();
                let denom = ana.abs().max(numeric.abs());
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                let ok = if denom <= self.denom_floor {
                    abs <= self.atol.max(self.rtol * self.denom_floor)
                } else {
                    let rel = abs / denom;
                    report.max_rel_err = report.max_rel_err.max(rel);
                    rel <= self.rtol
                };
                if !ok && report.failures.len() < 8 {
                    report.failures.push(format!(
                        "input {ti} element {k}: analytic {ana:.9e} vs numeric {numeric:.9e} (abs err {abs:.3e})",
                    ));
                }
            }
        }
        Ok(report)
    }
}
