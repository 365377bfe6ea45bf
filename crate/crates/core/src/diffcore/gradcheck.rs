use super::{Array, DiffError, Tape, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of `eval` at `x0` for the listed coordinates.
pub fn central_difference(
    mut eval: impl FnMut(&[f64]) -> Result<f64, DiffError>,
    x0: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>, DiffError> {
    if !(step > 0.0) {
        return Err(DiffError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = eval(&x)?;
        x[i] = orig - step;
        let minus = eval(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiffError::NonFinite {
                op: "finite_difference_probe",
                node: i,
            });
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Differentiates `f` at `x` on a tape and compares every coordinate
/// against central differences with the given step.
pub fn finite_difference_check<F>(f: F, x: &Array, step: f64) -> Result<GradCheck, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(&tape, leaf)?;
        tape.backward(out)?.get(leaf).into_data()
    };
    let shape = x.shape().to_vec();
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = central_difference(
        |probe| {
            let tape = Tape::new();
            let leaf = tape.constant(Array::new(&shape, probe.to_vec())?);
            Ok(f(&tape, leaf)?.item())
        },
        x.data(),
        &coords,
        step,
    )?;
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
