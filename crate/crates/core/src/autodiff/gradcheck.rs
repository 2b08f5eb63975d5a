use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over all coordinates.
    pub max_relative_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(x + eps) - f(x - eps)) / 2eps`, one coordinate at a time.
///
/// `f` receives a fresh tape with every input registered as a leaf (in order)
/// and must return a scalar on that tape. It must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config("grad_check eps must be positive"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad").to_vec())
        .collect();
    drop(tape);

    let evaluate = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Usage("grad_check function must return a scalar".into()))
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (i, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let original = probe[i].data()[k];
            probe[i].data_mut()[k] = original + eps;
            let plus = evaluate(&probe)?;
            probe[i].data_mut()[k] = original - eps;
            let minus = evaluate(&probe)?;
            probe[i].data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_relative_error || report.coordinates == 0 {
                report.max_relative_error = err;
                report.worst = (i, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
