use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// ~0 are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with the given `step`, one report entry per input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut probe = inputs.to_vec();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..inputs[index].len() {
            let orig = inputs[index].data()[j];
            probe[index].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[index].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[index].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(REL_FLOOR));
        }
        tensors.push(TensorCheck {
            index,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < tol,
        });
    }
    Ok(GradCheckReport { tensors, tol })
}
