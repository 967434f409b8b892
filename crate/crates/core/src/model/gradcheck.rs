//! Central finite-difference verification of tape gradients.

use crate::parallel::{self, Execution};

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::ModelError;

/// Magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Which parameter entries to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced entries per parameter tensor.
    Strided(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64, ModelError>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, ModelError>,
{
    let mut tape = Tape::new(store);
    let root = build(&mut tape)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(ModelError::Shape(format!(
            "grad check needs a scalar, got {:?}",
            v.shape()
        )));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(ModelError::NonFinite(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)` for the selected entries
/// of every parameter in `params`.
pub fn grad_check<F>(
    params: &ParamStore,
    eps: f64,
    coverage: Coverage,
    exec: Execution,
    build: F,
) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, ModelError> + Sync + Send,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(ModelError::Config(format!(
            "eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let grads = {
        let mut tape = Tape::new(params);
        let root = build(&mut tape)?;
        if !tape.value(root).is_finite() {
            return Err(ModelError::NonFinite("objective".into()));
        }
        tape.backward(root)?
    };
    if !grads.is_finite() {
        return Err(ModelError::NonFinite("analytic gradient".into()));
    }

    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for (id, _, t) in params.iter() {
        let n = t.len();
        match coverage {
            Coverage::All => entries.extend((0..n).map(|i| (id, i))),
            Coverage::Strided(k) if k >= n => entries.extend((0..n).map(|i| (id, i))),
            Coverage::Strided(k) => entries.extend((0..k).map(|j| (id, j * n / k))),
        }
    }

    let numeric = parallel::map_ordered_with(
        &entries,
        exec,
        || params.clone(),
        |store, &(id, i)| -> Result<f64, ModelError> {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, &build);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, &build);
            store.get_mut(id).data_mut()[i] = orig;
            Ok((plus? - minus?) / (2.0 * eps))
        },
    );

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: entries.len(),
    };
    for (&(id, i), num) in entries.iter().zip(numeric) {
        let num = num?;
        let ana = grads.get(id).map_or(0.0, |g| g[i]);
        let err = relative_error(ana, num);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((params.name(id).to_string(), i));
            report.analytic = ana;
            report.numeric = num;
        }
    }
    Ok(report)
}
