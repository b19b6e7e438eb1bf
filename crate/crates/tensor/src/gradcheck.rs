//! Central-difference gradient verification for scalar-valued graphs.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with an absolute floor, so tiny true gradients do not
/// explode the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over every element of every input.
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) for the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h`, for every element of every input. `f` must build a
/// single-element output from the given variables.
pub fn finite_diff_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    finite_diff_check_refined(inputs, &[h], 0.0, f)
}

/// Like [`finite_diff_check`], but when an element's relative error exceeds
/// `accept` at one step size, the next step in `steps` is tried and the best
/// error kept. Central-difference truncation shrinks with the step while a
/// wrong analytic derivative keeps an O(1) relative error at every step, so
/// refinement filters numerical noise without masking real defects. Useful
/// for deep compositions whose third derivatives are large.
pub fn finite_diff_check_refined(
    inputs: &[Tensor<f64>],
    steps: &[f64],
    accept: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    if steps.is_empty() {
        return Err(TensorError::invalid("finite_diff_check", "need at least one step size"));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::invalid("finite_diff_check", "output must be scalar"));
        }
        Ok(tape.data(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let base = input.data()[j];
            let a = analytic[i].data()[j];
            let mut best: Option<(f64, f64)> = None;
            for &h in steps {
                let mut bump = |delta: f64| -> Result<f64> {
                    let mut data = input.data().to_vec();
                    data[j] = base + delta;
                    work[i] = Tensor::from_vec(input.shape().to_vec(), data)?;
                    eval(&work)
                };
                let plus = bump(h)?;
                let minus = bump(-h)?;
                work[i] = input.clone();
                let numeric = (plus - minus) / (2.0 * h);
                let e = rel_err(a, numeric);
                if best.map_or(true, |(be, _)| e < be) {
                    best = Some((e, numeric));
                }
                if best.unwrap().0 <= accept {
                    break;
                }
            }
            let (e, numeric) = best.unwrap();
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
