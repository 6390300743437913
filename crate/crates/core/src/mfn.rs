//! Point encoders: multiplicative filter network with Gabor filters, and a
//! plain MLP used for the encoder ablation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{column, row, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Real;

pub const COORD_DIM: usize = 2;

/// Gabor filter bank. All tensors are stored axis-major: `mu`, `gamma` and
/// `freq` are `[2, C]`, `phase` is `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct GaborLayer {
    pub mu: ParamId,
    pub gamma: ParamId,
    pub freq: ParamId,
    pub phase: ParamId,
    pub width: usize,
}

impl GaborLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        width: usize,
        freq_std: f64,
        gamma_shape: f64,
        gamma_rate: f64,
    ) -> Result<Self> {
        let mu = init.uniform::<T>(&[COORD_DIM, width], 0.5).map(|v| v + T::of(0.5));
        let gamma = init.gamma(&[COORD_DIM, width], gamma_shape, gamma_rate);
        let freq = init.normal(&[COORD_DIM, width], 0.0, freq_std);
        let phase = init.uniform(&[width], PI);
        Ok(GaborLayer {
            mu: store.add(format!("{name}.mu"), mu)?,
            gamma: store.add(format!("{name}.gamma"), gamma)?,
            freq: store.add(format!("{name}.freq"), freq)?,
            phase: store.add(format!("{name}.phase"), phase)?,
            width,
        })
    }

    /// `exp(-½ Σ_d relu(γ_dj)(x_d − μ_dj)²) · sin(x·W + b)` for `x: [N, 2]`.
    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (mu, gamma) = (p.get(self.mu), p.get(self.gamma).relu()?);
        let mut quad: Option<Var<'t, T>> = None;
        for d in 0..COORD_DIM {
            let diff = column(x, d)?.sub(&row(&mu, d)?)?;
            let term = diff.square()?.mul(&row(&gamma, d)?)?;
            quad = Some(match quad {
                None => term,
                Some(q) => q.add(&term)?,
            });
        }
        let env = quad.expect("coordinate dimension is nonzero").scale(-0.5)?.exp()?;
        let wave = x.affine(&p.get(self.freq), &p.get(self.phase))?.sin()?;
        env.mul(&wave)
    }
}

fn default_freq() -> f64 {
    16.0
}

fn default_gamma_shape() -> f64 {
    6.0
}

fn default_gamma_rate() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mfn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Number of Gabor layers M.
    pub layers: usize,
    /// Std of the last layer's Gabor frequencies; layer κ uses κ/M of it.
    #[serde(default = "default_freq")]
    pub freq_scale: f64,
    #[serde(default = "default_gamma_shape")]
    pub gamma_shape: f64,
    #[serde(default = "default_gamma_rate")]
    pub gamma_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Mfn,
            layers: 5,
            freq_scale: default_freq(),
            gamma_shape: default_gamma_shape(),
            gamma_rate: default_gamma_rate(),
        }
    }
}

/// Multiplicative filter network over `(u, x)`, with one shared lift of `u`.
#[derive(Clone, Debug)]
pub struct Mfn {
    pub lift: Linear,
    pub filters: Vec<GaborLayer>,
    pub linears: Vec<Linear>,
    pub width: usize,
}

impl Mfn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
        in_channels: usize,
        width: usize,
    ) -> Result<Self> {
        if cfg.layers < 2 {
            return Err(Error::contract(format!("MFN needs at least 2 layers, got {}", cfg.layers)));
        }
        let m = cfg.layers;
        let lift = Linear::new(store, init, &format!("{name}.lift"), in_channels, width)?;
        let mut filters = Vec::with_capacity(m);
        let mut linears = Vec::with_capacity(m);
        for k in 0..m {
            let std = cfg.freq_scale * (k + 1) as f64 / m as f64;
            filters.push(GaborLayer::new(
                store,
                init,
                &format!("{name}.gabor{k}"),
                width,
                std,
                cfg.gamma_shape,
                cfg.gamma_rate,
            )?);
            linears.push(Linear::new(store, init, &format!("{name}.lin{k}"), width, width)?);
        }
        Ok(Mfn { lift, filters, linears, width })
    }

    /// `u: [N, du]`, `x: [N, 2]` → `[N, C]`.
    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, u: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let lifted = self.lift.apply(p, u)?;
        if lifted.shape()[1] != self.width {
            return Err(Error::contract("observation lift width differs from hidden width"));
        }
        let mut rho = self.filters[0].apply(p, x)?;
        for k in 1..self.filters.len() {
            let inner = lifted.add(&self.linears[k - 1].apply(p, &rho)?)?;
            rho = inner.mul(&self.filters[k].apply(p, x)?)?;
        }
        let last = self.linears.last().expect("at least two layers");
        lifted.add(&last.apply(p, &rho)?)
    }
}

/// Two-layer tanh MLP on the concatenation `[u, x]`.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        Ok(MlpEncoder {
            hidden: Linear::new(store, init, &format!("{name}.hidden"), in_channels + COORD_DIM, width)?,
            out: Linear::new(store, init, &format!("{name}.out"), width, width)?,
        })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, u: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.hidden.apply(p, &Var::concat(&[*u, *x], 1)?)?.tanh()?;
        self.out.apply(p, &h)
    }
}

#[derive(Clone, Debug)]
pub enum PointEncoder {
    Mfn(Mfn),
    Mlp(MlpEncoder),
}

impl PointEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
        in_channels: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(match cfg.kind {
            EncoderKind::Mfn => PointEncoder::Mfn(Mfn::new(store, init, name, cfg, in_channels, width)?),
            EncoderKind::Mlp => PointEncoder::Mlp(MlpEncoder::new(store, init, name, in_channels, width)?),
        })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, u: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            PointEncoder::Mfn(m) => m.apply(p, u, x),
            PointEncoder::Mlp(m) => m.apply(p, u, x),
        }
    }
}
