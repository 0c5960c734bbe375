//! Central finite-difference gradient checking. The checker rebuilds the
//! graph from perturbed copies of the inputs, so it exercises the exact same
//! forward path whose analytic gradients it validates.

use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Result of one finite-difference comparison sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` must construct a scalar loss on the given tape from the supplied
/// inputs (bound as params by the caller's convention). `coords` selects
/// which (input, flat index) coordinates to perturb; pass every coordinate
/// for small instances or a random subset for large ones.
pub fn check_gradients(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) -> Result<FdReport, TensorError> {
    let eval = |tensors: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t)).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("params accumulate grads").to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    for &(ti, flat) in coords {
        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[flat] += step;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[flat] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        max_rel = max_rel.max(rel_err(analytic[ti][flat], numeric));
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        checked: coords.len(),
    })
}

/// Every (tensor, coordinate) pair of the given inputs.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}
