//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the backward rules it is compared against.

use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        self.checked += 1;
    }

    pub fn merge(mut self, other: GradCheck) -> Self {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v)[0]
}

/// Checks d(loss)/d(input) for every element of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.input(t)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(scalar(&tape, loss))
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(param) for the given parameters. At most
/// `per_tensor` evenly spaced coordinates are probed in each tensor. The
/// closure records a full forward pass and returns its tape and loss.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], per_tensor: usize, step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = f(store)?;
    tape.backward_into(loss, store)?;

    let mut report = GradCheck::default();
    for &id in ids {
        let len = store.get(id).len();
        let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; len]);
        let stride = len.div_ceil(per_tensor.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + step;
            let (t, l) = f(store)?;
            let up = scalar(&t, l);
            store.get_mut(id).data_mut()[j] = orig - step;
            let (t, l) = f(store)?;
            let down = scalar(&t, l);
            store.get_mut(id).data_mut()[j] = orig;
            report.record(analytic[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
