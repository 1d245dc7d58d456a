use std::fmt;

use super::tape::{Tape, Var};
use super::ParamStore;
use crate::error::{Error, Result};

/// Worst-case agreement between reverse-mode and finite-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked {} scalars, max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            self.checked, self.max_rel_error, self.worst_param, self.worst_index, self.analytic, self.numeric
        )
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar objective with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every trainable scalar in `params`.
///
/// `f` builds the objective on the tape it is given, reading parameters from
/// the store it is given; it must be deterministic.
pub fn gradient_check<F>(params: &mut ParamStore<f64>, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if out.value().len() != 1 {
        return Err(Error::Config(
            "gradient check objective must be scalar".into(),
        ));
    }
    let grads = tape.backward(&out)?;
    params.accumulate(&tape, &grads, 1.0)?;
    drop(out);
    drop(tape);

    let mut eval = |p: &ParamStore<f64>, name: &str| -> Result<f64> {
        let mut t = Tape::inference();
        let v = f(&mut t, p)?.value().data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "objective while perturbing `{name}`"
            )));
        }
        Ok(v)
    };

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_owned())
        .collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let n = params.value(&name)?.len();
        for i in 0..n {
            let analytic = params.entry(&name)?.grad.data()[i];
            if !analytic.is_finite() {
                return Err(Error::Numerical(format!("gradient of `{name}`[{i}]")));
            }
            let orig = params.value(&name)?.data()[i];
            params.value_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(params, &name)?;
            params.value_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(params, &name)?;
            params.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
