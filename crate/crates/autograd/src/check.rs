//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One coordinate to probe: `(input index, flat element index)`.
pub type Probe = (usize, usize);

/// Per-probe comparison produced by [`check_gradient_probes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub probe: Probe,
    pub autodiff: f64,
    pub numeric: f64,
    pub error: f64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(TensorError::NonScalarLoss(out.shape()));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "check_gradient" });
    }
    Ok(v)
}

/// Compares autodiff against central differences at the listed coordinates.
///
/// Error per probe is `|autodiff - numeric| / max(1, |numeric|)`.
pub fn check_gradient_probes<F>(f: F, inputs: &[Tensor], probes: &[Probe], eps: f64) -> Result<Vec<ProbeResult>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::invalid("check_gradient", "eps must be positive"));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut shifted = inputs.to_vec();
    let mut results = Vec::with_capacity(probes.len());
    for &(which, coord) in probes {
        let Some(base) = inputs.get(which) else {
            return Err(TensorError::IndexOutOfRange {
                op: "check_gradient",
                index: which,
                bound: inputs.len(),
            });
        };
        if coord >= base.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "check_gradient",
                index: coord,
                bound: base.len(),
            });
        }
        let x0 = base.data()[coord];
        shifted[which].data_mut()[coord] = x0 + eps;
        let plus = evaluate(&f, &shifted)?;
        shifted[which].data_mut()[coord] = x0 - eps;
        let minus = evaluate(&f, &shifted)?;
        shifted[which].data_mut()[coord] = x0;

        let numeric = (plus - minus) / (2.0 * eps);
        let autodiff = analytic[which].data()[coord];
        results.push(ProbeResult {
            probe: (which, coord),
            autodiff,
            numeric,
            error: (autodiff - numeric).abs() / numeric.abs().max(1.0),
        });
    }
    Ok(results)
}

/// Maximum relative error over every coordinate of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let probes: Vec<Probe> = (0..x.len()).map(|i| (0, i)).collect();
    let results = check_gradient_probes(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &probes, eps)?;
    Ok(max_error(&results))
}

pub fn max_error(results: &[ProbeResult]) -> f64 {
    results.iter().map(|r| r.error).fold(0.0, f64::max)
}
