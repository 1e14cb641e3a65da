use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Below this magnitude central differences are dominated by round-off and
/// truncation noise (around 1e-11 at step 1e-5), so a gradient that is exactly
/// zero would otherwise read as a large relative error.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(DENOM_FLOOR, |analytic| + |numeric|)
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compare tape gradients of `loss_fn` against central differences with
/// step `step`, over every entry of every parameter in `params`.
pub fn grad_check<F>(params: &ParamStore, step: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let analytic = tape.gradients(loss)?;

    let mut probe = params.clone();
    let mut eval = |store: &ParamStore, name: &str| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing `{name}`")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst_param: String::new(), worst_index: 0, entries_checked: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let grad = analytic.get(&name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = eval(&probe, &name)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = eval(&probe, &name)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
