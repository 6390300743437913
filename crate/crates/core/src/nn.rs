//! Small building blocks shared by the model components.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `x · w + b` with `w: [in, out]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform ±1/√fan_in init.
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let (w, b) = init.linear(fan_in, fan_out);
        Self::with(store, name, w, b)
    }

    /// Uniform ±`scale`/√fan_in init (use 0 for an exactly-zero layer).
    pub fn scaled<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
    ) -> Result<Self> {
        let bound = scale / (fan_in as f64).sqrt();
        let w = init.uniform(&[fan_in, fan_out], bound);
        let b = init.uniform(&[fan_out], bound);
        Self::with(store, name, w, b)
    }

    pub fn with<T: Real>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), b)?,
        })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.affine(&p.get(self.w), &p.get(self.b))
    }
}

/// Column `d` of a `[N, D]` variable as `[N, 1]`.
pub fn column<'t, T: Real>(x: &Var<'t, T>, d: usize) -> Result<Var<'t, T>> {
    let dims = x.shape()[1];
    let sel = Tensor::from_fn([dims, 1], |i| if i == d { T::one() } else { T::zero() });
    x.matmul(&x.tape().constant(sel))
}

/// Row `d` of a `[D, C]` variable as `[1, C]`.
pub fn row<'t, T: Real>(x: &Var<'t, T>, d: usize) -> Result<Var<'t, T>> {
    let dims = x.shape()[0];
    let sel = Tensor::from_fn([1, dims], |i| if i == d { T::one() } else { T::zero() });
    x.tape().constant(sel).matmul(x)
}

pub fn constant<'t, T: Real>(tape: &'t Tape<T>, t: &Tensor<f64>) -> Var<'t, T> {
    tape.constant(t.cast())
}
