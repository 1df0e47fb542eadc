//! Central-difference gradient verification.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Mat, ParamId, ParamStore};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are compared absolutely at this scale.
pub const REL_FLOOR: f64 = 1e-5;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        }
    }

    fn absorb(&mut self, other: &GradCheckReport, offset: usize) {
        if other.max_rel_err > self.max_rel_err || self.coordinates == 0 {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index + offset;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.coordinates += other.coordinates;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `analytic` against `(f(x+h) − f(x−h)) / 2h` coordinate by coordinate.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport::empty();
    report.coordinates = point.len();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Check the gradient of a tape-built scalar with respect to its leaf inputs.
/// `build` receives one leaf per input matrix and must return a `[1 × 1]` node.
pub fn check_inputs<F>(inputs: &[Mat], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let eval = |mats: &[Mat]| -> Result<f64> {
        let mut tape = Tape::detached();
        let leaves: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::detached();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out);

    let mut total = GradCheckReport::empty();
    let mut offset = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads.wrt_or_zero(&tape, leaves[k]).iter().copied().collect();
        let point: Vec<f64> = input.iter().copied().collect();
        let mut failure = None;
        let report = grad_check(
            |x| {
                let mut mats = inputs.to_vec();
                mats[k] = Mat::from_shape_vec(input.raw_dim(), x.to_vec()).expect("shape");
                eval(&mats).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &point,
            &analytic,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        total.absorb(&report?, offset);
        offset += input.len();
    }
    Ok(total)
}

/// Check parameter gradients of `loss(store)` for the given parameters.
/// Parameters with row-sparse gradients (embedding tables) are only probed on
/// the rows listed in `rows_of_interest`, if any; other rows are skipped.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    rows_of_interest: &[(ParamId, Vec<usize>)],
    h: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let out = loss(store, &mut tape)?;
        tape.backward(out).params
    };
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new(s);
        match loss(s, &mut tape) {
            Ok(out) => tape.scalar(out),
            Err(_) => f64::NAN,
        }
    };
    let mut total = GradCheckReport::empty();
    let mut offset = 0;
    let mut probe = store.clone();
    for &id in ids {
        let shape = store.get(id).dim();
        let dense = grads.to_dense(id, shape);
        let rows: Vec<usize> = match rows_of_interest.iter().find(|(pid, _)| *pid == id) {
            Some((_, rows)) => rows.clone(),
            None => (0..shape.0).collect(),
        };
        let coords: Vec<(usize, usize)> = rows.iter().flat_map(|&r| (0..shape.1).map(move |c| (r, c))).collect();
        let point: Vec<f64> = coords.iter().map(|&rc| store.get(id)[rc]).collect();
        let analytic: Vec<f64> = coords.iter().map(|&rc| dense[rc]).collect();
        let report = grad_check(
            |x| {
                for (&rc, &v) in coords.iter().zip(x) {
                    probe.get_mut(id)[rc] = v;
                }
                let f = eval(&probe);
                for (&rc, &v) in coords.iter().zip(&point) {
                    probe.get_mut(id)[rc] = v;
                }
                f
            },
            &point,
            &analytic,
            h,
        )?;
        total.absorb(&report, offset);
        offset += coords.len();
    }
    Ok(total)
}
