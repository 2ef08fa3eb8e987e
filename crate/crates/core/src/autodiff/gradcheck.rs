//! Central-difference gradient checking.
//!
//! The relative error reported for an entry is
//! `|analytic - numeric| / max(1, |numeric|)`, so tiny gradients are compared
//! absolutely and large ones relatively.

use super::{Tape, Tensor, TensorError, Var};

/// Largest step accepted by the checks.
pub const MAX_STEP: f64 = 1e-3;

/// Per-input result of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error for each input, in input order.
    pub max_relative_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn overall(&self) -> f64 {
        self.max_relative_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], tape: &Tape) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(tape, &vars)?;
    let shape = out.shape();
    if out.value().len() != 1 {
        return Err(TensorError::NonScalarLoss { shape });
    }
    Ok(out.item())
}

/// Checks `f`'s analytic gradient with respect to every entry of every input.
///
/// `f` must be deterministic: it is evaluated twice at the unperturbed point
/// and any bitwise difference is reported as [`TensorError::NonDeterministic`].
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    if !(h > 0.0 && h <= MAX_STEP) {
        return Err(TensorError::Precondition(format!(
            "finite-difference step must lie in (0, {MAX_STEP}], got {h}"
        )));
    }
    let mut points: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let base = loss.item();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&points)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(vars);

    let again = evaluate(&f, &points, &Tape::inference())?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic { first: base, second: again });
    }

    let mut max_relative_error = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let mut worst = 0.0f64;
        for j in 0..points[i].len() {
            let orig = points[i].data()[j];
            points[i].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &points, &Tape::inference())?;
            points[i].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &points, &Tape::inference())?;
            points[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        max_relative_error.push(worst);
    }
    Ok(GradCheckReport { max_relative_error })
}

/// Single-input form of [`check_gradients`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let report = check_gradients(std::slice::from_ref(x), |tape, vars| f(tape, vars[0]), h)?;
    Ok(report.overall())
}
