//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation applied to each input element.
    pub step: f64,
    /// Gradients smaller than this are compared absolutely rather than
    /// relatively.
    pub floor: f64,
    /// Elements whose difference quotients at `step` and `step / 10` differ
    /// by more than this (relative to `floor`) straddle a kink such as a
    /// ReLU switching sign; they are counted but not scored.
    pub kink_tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where it occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
    /// Elements skipped as non-smooth at the finite-difference scale.
    pub n_nonsmooth: usize,
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

impl GradCheck {
    /// Compares the tape gradient of the scalar `f(inputs)` with central
    /// differences for every element of every input. `f` must be
    /// deterministic; stochastic layers need frozen noise.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let (mut tape, vars, out) = evaluate(inputs, &f)?;
        let mut grads = tape.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            n_checked: 0,
            n_nonsmooth: 0,
        };
        let mut probe = inputs.to_vec();
        for i in 0..inputs.len() {
            for j in 0..inputs[i].len() {
                let mut central = |h: f64| -> Result<f64> {
                    let x = inputs[i].data()[j];
                    probe[i].data_mut()[j] = x + h;
                    let (t, _, o) = evaluate(&probe, &f)?;
                    let plus = t.value(o).item();
                    probe[i].data_mut()[j] = x - h;
                    let (t, _, o) = evaluate(&probe, &f)?;
                    let minus = t.value(o).item();
                    probe[i].data_mut()[j] = x;
                    Ok((plus - minus) / (2.0 * h))
                };
                let numeric = central(self.step)?;
                let fine = central(self.step / 10.0)?;
                if (numeric - fine).abs() / numeric.abs().max(fine.abs()).max(self.floor) > self.kink_tolerance {
                    report.n_nonsmooth += 1;
                    continue;
                }
                let a = analytic[i].data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                if !rel.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at input {i}, element {j}")));
                }
                if report.n_checked == 0 || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (i, j);
                    report.analytic = a;
                    report.numeric = numeric;
                }
                report.n_checked += 1;
            }
        }
        Ok(report)
    }
}
