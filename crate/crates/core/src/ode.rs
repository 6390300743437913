//! Multi-scale graph vector field over the vertex lattice and a fixed-step
//! RK4 integrator.

use std::cell::Cell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMix, Var};
use crate::error::{Error, Result};
use crate::grid::{jump_neighbors, GridSpec};
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Real;

/// Stride-doubling 4-neighbourhoods, one per scale.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub grid: GridSpec,
    pub neighbors: Vec<Vec<Vec<usize>>>,
}

impl Hierarchy {
    pub fn new(grid: &GridSpec, scales: usize) -> Result<Self> {
        grid.validate()?;
        if scales == 0 {
            return Err(Error::contract("need at least one scale"));
        }
        let top = 1usize << (scales - 1);
        if top >= grid.height.min(grid.width) {
            return Err(Error::contract(format!(
                "{scales} scales need stride {top} < min grid extent {}",
                grid.height.min(grid.width)
            )));
        }
        let neighbors = (0..scales).map(|s| jump_neighbors(grid, 1 << s)).collect();
        Ok(Hierarchy { grid: *grid, neighbors })
    }

    pub fn scales(&self) -> usize {
        self.neighbors.len()
    }

    /// Row-stochastic neighbour-mean operators.
    pub fn mean_operators(&self) -> Result<Vec<Arc<RowMix>>> {
        let nv = self.grid.vertices();
        self.neighbors
            .iter()
            .map(|lists| {
                let rows: Vec<Vec<(usize, f64)>> = lists
                    .iter()
                    .map(|l| l.iter().map(|&u| (u, 1.0 / l.len() as f64)).collect())
                    .collect();
                RowMix::from_rows(nv, &rows).map(Arc::new)
            })
            .collect()
    }
}

fn default_head_scale() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    /// Integrated multi-scale graph ODE.
    Ode,
    /// One learned residual map per correction interval (no solver).
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub kind: DynamicsKind,
    pub scales: usize,
    pub layers: usize,
    /// Normalize the per-scale attention weights with a softmax.
    #[serde(default)]
    pub softmax: bool,
    /// Init scale of the output head relative to ±1/√C.
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { kind: DynamicsKind::Ode, scales: 3, layers: 2, softmax: false, head_scale: default_head_scale() }
    }
}

#[derive(Clone, Debug)]
struct ScaleLayer {
    agg: ParamId,
    combine: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    scales: Vec<ScaleLayer>,
    query: ParamId,
    key: ParamId,
}

/// Φ: L blocks of per-scale message passing followed by attention fusion,
/// then a linear head. Autonomous.
#[derive(Clone, Debug)]
pub struct MultiScaleOde {
    blocks: Vec<Block>,
    pub head: Linear,
    pub softmax: bool,
    pub hierarchy: Hierarchy,
}

/// Per-forward context holding the sparse operators.
pub struct OdeContext {
    means: Vec<Arc<RowMix>>,
}

impl MultiScaleOde {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &OdeConfig,
        grid: &GridSpec,
        width: usize,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::contract("ODE function needs at least one layer"));
        }
        let hierarchy = Hierarchy::new(grid, cfg.scales)?;
        let bound = 1.0 / (width as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut scales = Vec::with_capacity(cfg.scales);
            for s in 0..cfg.scales {
                let agg = store.add(format!("{name}.l{l}.s{s}.agg"), init.uniform(&[width, width], bound))?;
                let combine = Linear::new(store, init, &format!("{name}.l{l}.s{s}.combine"), 2 * width, width)?;
                scales.push(ScaleLayer { agg, combine });
            }
            let query = store.add(format!("{name}.l{l}.query"), init.uniform(&[width, width], bound))?;
            let key = store.add(format!("{name}.l{l}.key"), init.uniform(&[width, width], bound))?;
            blocks.push(Block { scales, query, key });
        }
        let head = Linear::scaled(store, init, &format!("{name}.head"), width, width, cfg.head_scale)?;
        Ok(MultiScaleOde { blocks, head, softmax: cfg.softmax, hierarchy })
    }

    pub fn context(&self) -> Result<OdeContext> {
        Ok(OdeContext { means: self.hierarchy.mean_operators()? })
    }

    /// One scale, one layer: `h + relu([h ‖ mean_N(h·W_agg)]·W + b)`.
    pub fn message_pass<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        ctx: &OdeContext,
        h: &Var<'t, T>,
        layer: usize,
        scale: usize,
    ) -> Result<Var<'t, T>> {
        let sl = &self.blocks[layer].scales[scale];
        let agg = h.matmul(&p.get(sl.agg))?.mix_rows(&ctx.means[scale])?;
        let upd = sl.combine.apply(p, &Var::concat(&[*h, agg], 1)?)?.relu()?;
        h.add(&upd)
    }

    /// Per-scale weights `α_s = cos(h_s·W_q, prev·W_k)`, each `[V, 1]`.
    pub fn attention_weights<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        layer: usize,
        per_scale: &[Var<'t, T>],
        prev: &Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        if per_scale.is_empty() {
            return Err(Error::contract("attention needs at least one scale"));
        }
        let b = &self.blocks[layer];
        let key = prev.matmul(&p.get(b.key))?;
        let mut alphas = Vec::with_capacity(per_scale.len());
        for h in per_scale {
            alphas.push(h.matmul(&p.get(b.query))?.cosine_similarity(&key)?);
        }
        if self.softmax {
            let ex: Vec<Var<'t, T>> = alphas.iter().map(|a| a.exp()).collect::<Result<_>>()?;
            let mut total = ex[0];
            for e in &ex[1..] {
                total = total.add(e)?;
            }
            let inv = total.recip()?;
            alphas = ex.iter().map(|e| e.mul(&inv)).collect::<Result<_>>()?;
        }
        Ok(alphas)
    }

    /// `Σ_s α_s·h_s`.
    pub fn attention_fuse<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        layer: usize,
        per_scale: &[Var<'t, T>],
        prev: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let alphas = self.attention_weights(p, layer, per_scale, prev)?;
        let mut fused = per_scale[0].mul(&alphas[0])?;
        for (h, a) in per_scale.iter().zip(&alphas).skip(1) {
            fused = fused.add(&h.mul(a)?)?;
        }
        Ok(fused)
    }

    /// `dh/dt = Φ(h)` for vertex states `[V, C]`.
    pub fn rhs<'t, T: Real>(&self, p: &Bound<'t, T>, ctx: &OdeContext, h: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut states = vec![*h; self.hierarchy.scales()];
        let mut fused = *h;
        for l in 0..self.blocks.len() {
            for (s, st) in states.iter_mut().enumerate() {
                *st = self
                    .message_pass(p, ctx, st, l, s)
                    .map_err(|e| e.context(format!("ode block {l}, scale {s}")))?;
            }
            fused = self
                .attention_fuse(p, l, &states, &fused)
                .map_err(|e| e.context(format!("ode block {l}, attention")))?;
        }
        self.head.apply(p, &fused).map_err(|e| e.context("ode head"))
    }
}

// ── integrator ───────────────────────────────────────────────────────

/// States the integrator can combine linearly.
pub trait OdeState: Clone {
    /// `self + alpha · other`.
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self>;
    fn check_finite(&self) -> bool;
}

impl<T: Real> OdeState for Var<'_, T> {
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        Var::axpy(self, alpha, other)
    }

    fn check_finite(&self) -> bool {
        self.value().is_finite()
    }
}

impl OdeState for Vec<f64> {
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::shape("axpy", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(self.iter().zip(other).map(|(a, b)| a + alpha * b).collect())
    }

    fn check_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// One classical RK4 step of size `h` for an autonomous or time-dependent field.
pub fn rk4_step<S: OdeState>(f: &mut impl FnMut(f64, &S) -> Result<S>, t: f64, y: &S, h: f64) -> Result<S> {
    let k1 = f(t, y)?;
    let k2 = f(t + h / 2.0, &y.axpy(h / 2.0, &k1)?)?;
    let k3 = f(t + h / 2.0, &y.axpy(h / 2.0, &k2)?)?;
    let k4 = f(t + h, &y.axpy(h, &k3)?)?;
    let slope = k1.axpy(2.0, &k2)?.axpy(2.0, &k3)?.axpy(1.0, &k4)?;
    y.axpy(h / 6.0, &slope)
}

/// Relative slack when counting whole steps in a span.
const LATTICE_EPS: f64 = 1e-9;

/// Number of whole steps of size `h` that fit in `span`.
pub fn lattice_steps(span: f64, h: f64) -> usize {
    ((span / h) + LATTICE_EPS).floor().max(0.0) as usize
}

thread_local! {
    static SOLVE_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Solves started on this thread so far (for structural tests).
pub fn solve_calls() -> usize {
    SOLVE_CALLS.with(|c| c.get())
}

/// Fixed-step RK4 on `[ta, tb]`. Returns the state at every lattice point
/// `ta + n·h ≤ tb`, at `tb`, and at each time in `extra` (inside the span),
/// sorted by time. Off-lattice times branch from the last lattice state with
/// one shortened step, so the lattice path never depends on what was asked.
pub fn ode_solve<S: OdeState>(
    f: &mut impl FnMut(f64, &S) -> Result<S>,
    y0: &S,
    ta: f64,
    tb: f64,
    h: f64,
    extra: &[f64],
) -> Result<Vec<(f64, S)>> {
    if !(tb > ta) || !(h > 0.0) {
        return Err(Error::contract(format!("invalid span [{ta}, {tb}] with step {h}")));
    }
    SOLVE_CALLS.with(|c| c.set(c.get() + 1));
    let n = lattice_steps(tb - ta, h);
    let mut lattice = Vec::with_capacity(n + 1);
    lattice.push(y0.clone());
    for i in 0..n {
        let t = ta + i as f64 * h;
        let next = rk4_step(f, t, &lattice[i], h).map_err(|e| e.context(format!("t={t}")))?;
        if !next.check_finite() {
            return Err(Error::Numeric(format!("non-finite state at t={}", t + h)));
        }
        lattice.push(next);
    }
    let mut wanted: Vec<f64> = extra.iter().copied().filter(|&t| t > ta && t < tb).collect();
    wanted.push(tb);
    let mut out: Vec<(f64, S)> = lattice.iter().enumerate().map(|(i, s)| (ta + i as f64 * h, s.clone())).collect();
    for t in wanted {
        let i = lattice_steps(t - ta, h).min(n);
        let base = ta + i as f64 * h;
        let rem = t - base;
        if rem <= LATTICE_EPS * h {
            continue;
        }
        let y = rk4_step(f, base, &lattice[i], rem).map_err(|e| e.context(format!("t={t}")))?;
        if !y.check_finite() {
            return Err(Error::Numeric(format!("non-finite state at t={t}")));
        }
        out.push((t, y));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.dedup_by(|a, b| a.0 == b.0);
    Ok(out)
}
