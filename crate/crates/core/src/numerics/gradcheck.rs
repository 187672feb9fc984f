//! Central finite-difference gradient checking.

use super::{NumericsError, Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between two derivative estimates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    /// Which input tensor the coordinate belongs to.
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    /// `None` when the function was not finite at one of the probe points.
    pub numeric: Option<f64>,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol && self.non_finite().next().is_none()
    }

    pub fn non_finite(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| c.numeric.is_none())
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares the tape gradient of a scalar function of one tensor with
/// central differences.
pub fn check_gradients<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step, tol)
}

/// Multi-input variant: `f` receives one leaf per input tensor.
///
/// The analytic gradient is taken at `inputs`; every coordinate of every
/// input is then probed at `±step` on a fresh tape.
pub fn check_gradients_multi<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let evaluate = |inputs: &[Tensor]| -> Option<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).ok()?;
        tape.scalar(out).ok().filter(|v| v.is_finite())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut coords = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_default();
        for (index, &a) in analytic.iter().enumerate() {
            let probe = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                let t = &perturbed[input];
                let mut values = t.values().to_vec();
                values[index] += delta;
                perturbed[input] = Tensor::new(t.shape().to_vec(), values).ok()?;
                evaluate(&perturbed)
            };
            let numeric = match (probe(step), probe(-step)) {
                (Some(hi), Some(lo)) => Some((hi - lo) / (2.0 * step)),
                _ => None,
            };
            let rel_err = numeric.map_or(f64::INFINITY, |n| relative_error(a, n));
            max_rel_err = max_rel_err.max(rel_err);
            coords.push(CoordCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        tol,
        coords,
    })
}
