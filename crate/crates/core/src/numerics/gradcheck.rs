use alloc::string::String;

use super::{ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter (evenly strided); all when the
    /// parameter is smaller.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|) over checked coordinates.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences for every trainable parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        check_finite(tape.value(loss).item())?;
        tape.backward(loss)?
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    for id in store.ids() {
        let p = store.get(id);
        if !p.requires_grad {
            continue;
        }
        let n = p.value.len();
        let picks = n.min(opts.max_coords_per_param.max(1));
        for j in 0..picks {
            let idx = j * n / picks;
            let orig = p.value.data()[idx];
            probe.get_mut(id).value.data_mut()[idx] = orig + opts.step;
            let up = eval(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[idx] = orig - opts.step;
            let down = eval(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[idx]);
            let err = (analytic - numeric).abs() / f64::max(1.0, numeric.abs());
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = f64::max(err, report.max_relative_error);
                report.worst_param = p.name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let v = tape.value(loss).item();
    check_finite(v)?;
    Ok(v)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: "grad_check",
            detail: alloc::format!("non-finite loss {v}"),
        })
    }
}
