//! Discrete corrector applied between ODE legs: compress to half resolution,
//! transition with a multi-kernel bottleneck, expand back, blend.

use crate::autodiff::{ConvSpec, PadMode, Var};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Real;

/// Kernel sizes of the parallel grouped convolutions in the transition.
pub const TRANSITION_KERNELS: [usize; 3] = [3, 5, 7];
pub const TRANSITION_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        k: usize,
        cin_per_group: usize,
        cout: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((k * k * cin_per_group) as f64).sqrt();
        let w = store.add(format!("{name}.w"), init.uniform(&[k, k, cin_per_group, cout], bound))?;
        let b = store.add(format!("{name}.b"), init.uniform(&[cout], bound))?;
        Ok(Conv { w, b })
    }

    fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, spec: ConvSpec) -> Result<Var<'t, T>> {
        x.conv2d(&p.get(self.w), spec)?.add(&p.get(self.b))
    }

    fn apply_transpose<'t, T: Real>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, spec: ConvSpec) -> Result<Var<'t, T>> {
        x.conv_transpose2d(&p.get(self.w), spec)?.add(&p.get(self.b))
    }
}

/// `r(z) = D(R(E(z)))` on a `[H·W, C]` vertex state laid out row-major.
#[derive(Clone, Debug)]
pub struct Corrector {
    pub grid: GridSpec,
    pub width: usize,
    down: Conv,
    gain: ParamId,
    shift: ParamId,
    squeeze: Linear,
    branches: Vec<Conv>,
    expand: Linear,
    up: Conv,
}

const DOWN: ConvSpec = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: PadMode::Circular };

impl Corrector {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        grid: &GridSpec,
        width: usize,
    ) -> Result<Self> {
        grid.validate()?;
        if grid.height % 2 != 0 || grid.width % 2 != 0 {
            return Err(Error::contract(format!(
                "corrector needs even grid extents, got {}x{}",
                grid.height, grid.width
            )));
        }
        if width % (2 * TRANSITION_GROUPS) != 0 {
            return Err(Error::contract(format!(
                "corrector width {width} must be a multiple of {}",
                2 * TRANSITION_GROUPS
            )));
        }
        let mid = width / 2;
        let down = Conv::new(store, init, &format!("{name}.down"), 3, width, width)?;
        let gain = store.add(format!("{name}.norm.gain"), crate::Tensor::full([width], T::one()))?;
        let shift = store.add(format!("{name}.norm.shift"), crate::Tensor::zeros([width]))?;
        let squeeze = Linear::new(store, init, &format!("{name}.squeeze"), width, mid)?;
        let branches = TRANSITION_KERNELS
            .iter()
            .map(|&k| Conv::new(store, init, &format!("{name}.k{k}"), k, mid / TRANSITION_GROUPS, mid))
            .collect::<Result<_>>()?;
        let expand = Linear::new(store, init, &format!("{name}.expand"), mid, width)?;
        let up = Conv::new(store, init, &format!("{name}.up"), 4, width, width)?;
        Ok(Corrector { grid: *grid, width, down, gain, shift, squeeze, branches, expand, up })
    }

    /// Compression `σ(affine(LN(conv_s2(z))))`, output `[H/2, W/2, C]`.
    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let img = z.reshape([self.grid.height, self.grid.width, self.width])?;
        let y = self.down.apply(p, &img, DOWN)?.layer_norm()?;
        y.mul(&p.get(self.gain))?.add(&p.get(self.shift))?.sigmoid()
    }

    /// Transition on the half-resolution image.
    pub fn transition<'t, T: Real>(&self, p: &Bound<'t, T>, e: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = e.shape();
        let (h, w) = (shape[0], shape[1]);
        let mid = self.width / 2;
        let s = self.squeeze.apply(p, &e.reshape([h * w, self.width])?)?.reshape([h, w, mid])?;
        let mut acc: Option<Var<'t, T>> = None;
        for (conv, &k) in self.branches.iter().zip(&TRANSITION_KERNELS) {
            let y = conv.apply(p, &s, ConvSpec::same(k, TRANSITION_GROUPS, PadMode::Circular))?;
            acc = Some(match acc {
                Some(a) => a.add(&y)?,
                None => y,
            });
        }
        let summed = acc.expect("at least one branch").reshape([h * w, mid])?;
        self.expand.apply(p, &summed)?.reshape([h, w, self.width])
    }

    /// Expansion back to full resolution with a tanh, output `[H·W, C]`.
    pub fn decode<'t, T: Real>(&self, p: &Bound<'t, T>, r: &Var<'t, T>) -> Result<Var<'t, T>> {
        let spec = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: PadMode::Circular };
        let y = self.up.apply_transpose(p, r, spec)?.tanh()?;
        y.reshape([self.grid.vertices(), self.width])
    }

    /// `r(z)`; depends on nothing but `z` and the parameters.
    pub fn markov_step<'t, T: Real>(&self, p: &Bound<'t, T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape != [self.grid.vertices(), self.width] {
            return Err(Error::shape(
                "markov_step",
                format!("state {shape:?} vs grid {}x{}x{}", self.grid.height, self.grid.width, self.width),
            ));
        }
        let e = self.encode(p, z)?;
        let t = self.transition(p, &e)?;
        self.decode(p, &t)
    }
}

/// Checks a blend weight.
pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("correction weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `z_pre + λ·r(z_prev)`. Returns `z_pre` untouched for λ = 0 or no corrector.
pub fn correct_step<'t, T: Real>(
    corrector: Option<&Corrector>,
    p: &Bound<'t, T>,
    z_pre: &Var<'t, T>,
    z_prev: &Var<'t, T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    check_lambda(lambda)?;
    if z_pre.shape() != z_prev.shape() {
        return Err(Error::shape("correct_step", format!("{:?} vs {:?}", z_pre.shape(), z_prev.shape())));
    }
    match corrector {
        Some(c) if lambda > 0.0 => z_pre.axpy(lambda, &c.markov_step(p, z_prev)?),
        _ => Ok(*z_pre),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::tensor::{bits, Tensor};

    fn build(h: usize, w: usize, width: usize, seed: u64) -> (ParamStore<f64>, Corrector) {
        let mut store = ParamStore::new();
        let c = Corrector::new(&mut store, &mut Init::new(seed), "cor", &GridSpec::new(h, w).unwrap(), width).unwrap();
        (store, c)
    }

    fn zero_with_bias(store: &mut ParamStore<f64>, beta: f64) {
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let id = store.id("cor.up.b").unwrap();
        store.get_mut(id).data_mut().fill(beta);
    }

    fn state(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        Init::new(seed).uniform(&[n, c], 2.0)
    }

    #[test]
    fn zero_weights_give_tanh_of_bias() {
        let (mut store, c) = build(4, 6, 8, 1);
        zero_with_bias(&mut store, 0.7);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let r = c.markov_step(&p, &tape.constant(state(24, 8, 2))).unwrap().tensor();
        assert!(r.data().iter().all(|&v| v == 0.7f64.tanh()));
        zero_with_bias(&mut store, 0.0);
        let p = store.bind_frozen(&tape);
        let r = c.markov_step(&p, &tape.constant(state(24, 8, 2))).unwrap().tensor();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_blend_with_bias_only_corrector() {
        let (mut store, c) = build(4, 4, 8, 3);
        zero_with_bias(&mut store, -0.4);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let pre = state(16, 8, 4);
        let out = correct_step(Some(&c), &p, &tape.constant(pre.clone()), &tape.constant(state(16, 8, 5)), 1.0)
            .unwrap()
            .tensor();
        let want = pre.map(|v| v + (-0.4f64).tanh());
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let (store, c) = build(8, 8, 16, 6);
        let z = state(64, 16, 7);
        let run = || {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            c.markov_step(&p, &tape.constant(z.clone())).unwrap().tensor()
        };
        let first = run();
        // an unrelated call in between must not leave any trace
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        c.markov_step(&p, &tape.constant(state(64, 16, 99))).unwrap();
        assert_eq!(bits(&first), bits(&run()));
    }

    #[test]
    fn halves_then_restores_extents() {
        let (store, c) = build(32, 32, 16, 8);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z = tape.constant(state(1024, 16, 9));
        let e = c.encode(&p, &z).unwrap();
        assert_eq!(e.shape(), vec![16, 16, 16]);
        let t = c.transition(&p, &e).unwrap();
        assert_eq!(t.shape(), vec![16, 16, 16]);
        assert_eq!(c.decode(&p, &t).unwrap().shape(), vec![1024, 16]);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let (store, c) = build(4, 4, 8, 10);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let pre = tape.constant(state(16, 8, 11));
        let prev = tape.constant(state(16, 8, 12));
        let out = correct_step(Some(&c), &p, &pre, &prev, 0.0).unwrap();
        assert_eq!(bits(&out.tensor()), bits(&pre.tensor()));
        let none = correct_step(None, &p, &pre, &prev, 0.5).unwrap();
        assert_eq!(bits(&none.tensor()), bits(&pre.tensor()));
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let (store, c) = build(4, 4, 8, 13);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z = tape.constant(state(16, 8, 14));
        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(correct_step(Some(&c), &p, &z, &z, bad), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn odd_extents_or_width_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let odd = GridSpec::new(5, 4).unwrap();
        assert!(matches!(Corrector::new(&mut store, &mut init, "a", &odd, 8), Err(Error::Contract(_))));
        let even = GridSpec::new(4, 4).unwrap();
        assert!(matches!(Corrector::new(&mut store, &mut init, "b", &even, 12), Err(Error::Contract(_))));
    }

    #[test]
    fn correction_moves_entries_by_at_most_lambda() {
        let (store, c) = build(8, 8, 8, 15);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        for (i, lambda) in [0.1, 0.5, 1.0].into_iter().enumerate() {
            let pre = state(64, 8, 20 + i as u64).map(|v| v * 50.0);
            let prev = state(64, 8, 30 + i as u64).map(|v| v * 50.0);
            let out = correct_step(Some(&c), &p, &tape.constant(pre.clone()), &tape.constant(prev), lambda)
                .unwrap()
                .tensor();
            assert!(out.max_abs_diff(&pre) <= lambda);
        }
    }

    #[test]
    fn corrector_gradients() {
        let (store, c) = build(4, 4, 8, 16);
        let z = state(16, 8, 17).map(|v| v * 0.5);
        let report = grad_check(
            |tape, v| {
                let p = Bound::from_vars(v.to_vec());
                c.markov_step(&p, &tape.constant(z.clone()))?.square()?.sum()
            },
            store.tensors(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
