//! Error bound for corrected ODE rollouts: closed form, the recurrence it
//! comes from, and an end-to-end check on linear systems with known
//! constants.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::ode_solve;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Lipschitz constant of the flow.
    pub l_f: f64,
    pub dt_corr: f64,
    /// Corrector contraction, in [0, 1).
    pub kappa: f64,
    /// Corrector residual.
    pub delta_c: f64,
    /// Per-leg model error.
    pub e_ode: f64,
    /// Error after the (possibly hypothetical) correction at t₀.
    pub e0: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("l_f", self.l_f),
            ("dt_corr", self.dt_corr),
            ("kappa", self.kappa),
            ("delta_c", self.delta_c),
            ("e_ode", self.e_ode),
            ("e0", self.e0),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.kappa >= 1.0 {
            return Err(Error::contract(format!("kappa must be below 1, got {}", self.kappa)));
        }
        Ok(())
    }

    pub fn alpha_eff(&self) -> f64 {
        self.kappa * (self.l_f * self.dt_corr).exp()
    }

    /// Error injected per cycle, κ·E_ODE + δ_C.
    pub fn forcing(&self) -> f64 {
        self.kappa * self.e_ode + self.delta_c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub bound: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha_eff: f64,
}

/// `C₁·α^K + C₂` after `k` corrections.
pub fn bound_at(k: usize, p: &BoundParams) -> Result<BoundValue> {
    p.validate()?;
    let alpha = p.alpha_eff();
    if alpha >= 1.0 {
        return Err(Error::contract(format!("no contraction; bound diverges (alpha_eff = {alpha})")));
    }
    let c2 = p.forcing() / (1.0 - alpha);
    let c1 = (p.e0 - c2).max(0.0);
    Ok(BoundValue { bound: c1 * alpha.powi(k as i32) + c2, c1, c2, alpha_eff: alpha })
}

/// `α^K·e₀ + B·(1 − α^K)/(1 − α)`, the recurrence unrolled K times.
pub fn unrolled(k: usize, p: &BoundParams) -> f64 {
    let alpha = p.alpha_eff();
    let ak = alpha.powi(k as i32);
    let geometric = if alpha == 1.0 { k as f64 } else { (1.0 - ak) / (1.0 - alpha) };
    ak * p.e0 + p.forcing() * geometric
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrenceMode {
    /// Every inequality tight.
    WorstCase,
    /// Amplification, contraction and residuals drawn inside their bounds.
    Sampled { seed: u64 },
}

/// `e₀⁺, e₁⁺, …, e_K⁺`.
pub fn simulate_recurrence(k: usize, p: &BoundParams, mode: RecurrenceMode) -> Result<Vec<f64>> {
    p.validate()?;
    if k == 0 {
        return Err(Error::contract("need at least one correction"));
    }
    let mut e = Vec::with_capacity(k + 1);
    e.push(p.e0);
    match mode {
        RecurrenceMode::WorstCase => {
            let (alpha, b) = (p.alpha_eff(), p.forcing());
            for i in 0..k {
                e.push(alpha * e[i] + b);
            }
        }
        RecurrenceMode::Sampled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let growth = (p.l_f * p.dt_corr).exp();
            for i in 0..k {
                let u = rng.random_range(1.0..=growth);
                let c = rng.random_range(0.0..=p.kappa);
                let eps = rng.random_range(0.0..=p.e_ode);
                let d = rng.random_range(0.0..=p.delta_c);
                e.push(c * (u * e[i] + eps) + d);
            }
        }
    }
    Ok(e)
}

/// Largest singular value of the operator behind `apply` (`x ↦ Jx`) and its
/// adjoint, by power iteration on `JᵀJ`.
pub fn power_iteration(
    dim: usize,
    iters: usize,
    seed: u64,
    mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>,
    mut apply_t: impl FnMut(&DVector<f64>) -> DVector<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let jv = apply(&v);
        sigma = jv.norm();
        let w = apply_t(&jv);
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
    }
    sigma
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystemSpec {
    pub dim: usize,
    pub seed: u64,
    /// Corrections to run.
    pub steps: usize,
    pub l_f: f64,
    pub dt_corr: f64,
    pub dt_solver: f64,
    pub kappa: f64,
    pub delta_c: f64,
    /// Growth-rate bias of the learned flow: ΔA = bias·I + noise·N, ‖N‖ = 1.
    pub bias: f64,
    pub noise: f64,
    /// Initial error, placed along the fastest-growing direction.
    pub e0: f64,
    /// Skip the corrector entirely.
    pub uncorrected: bool,
}

impl LinearSystemSpec {
    pub fn new(dim: usize, seed: u64) -> Self {
        LinearSystemSpec {
            dim,
            seed,
            steps: 50,
            l_f: 1.0,
            dt_corr: 0.5,
            dt_solver: 0.125,
            kappa: 0.5,
            delta_c: 1e-3,
            bias: 0.05,
            noise: 0.01,
            e0: 0.1,
            uncorrected: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRow {
    pub k: usize,
    pub e_measured: f64,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Violated,
    /// A measured assumption failed (κ ≥ 1 or α_eff ≥ 1); no claim either way.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub verdict: Verdict,
    pub note: Option<String>,
    /// Constants measured on the run, which the bound is evaluated with.
    pub measured: BoundParams,
    /// Power-iteration estimate of ‖A‖.
    pub l_f_estimate: f64,
    pub rows: Vec<CertRow>,
    /// Error ratio e⁻_{k+1} / e⁺_k over each leg.
    pub leg_growth: Vec<f64>,
}

/// Relative rounding allowance when comparing a measured error to its bound.
pub const ROUNDING: f64 = 1e-12;

impl CertRow {
    pub fn holds(&self) -> bool {
        self.e_measured <= self.bound * (1.0 + ROUNDING)
    }
}

impl CertReport {
    pub fn satisfied(&self) -> usize {
        self.rows.iter().filter(|r| r.holds()).count()
    }

    /// `k,e_measured,bound,slack`; slack = bound − e_measured.
    pub fn to_csv(&self) -> String {
        rows_csv(self.rows.iter().map(|r| (r.k, r.e_measured, r.bound)))
    }
}

pub fn rows_csv(rows: impl Iterator<Item = (usize, f64, f64)>) -> String {
    let mut s = String::from("k,e_measured,bound,slack\n");
    for (k, e, b) in rows {
        let _ = writeln!(s, "{k},{e:.12e},{b:.12e},{:.12e}", b - e);
    }
    s
}

/// Random orthogonal matrix from the QR of a Gaussian one.
fn orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

struct LinearSystem {
    a: DMatrix<f64>,
    /// exp(A·Δt_corr), exact through the eigenbasis.
    flow: DMatrix<f64>,
    learned: DMatrix<f64>,
    top: DVector<f64>,
    /// Eigenvectors with eigenvalue ≤ 0, as columns.
    stable: DMatrix<f64>,
    contraction: DMatrix<f64>,
    residual: DVector<f64>,
}

impl LinearSystem {
    /// Symmetric A with top eigenvalue +L_F and the rest in [−0.8·L_F, 0.8·L_F],
    /// so ‖A‖ = L_F and the top eigenvector grows by exactly e^{L_F·t}.
    fn build(spec: &LinearSystemSpec) -> LinearSystem {
        let n = spec.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let q = orthogonal(n, &mut rng);
        let eig: Vec<f64> =
            (0..n).map(|i| if i == 0 { spec.l_f } else { spec.l_f * rng.random_range(-0.8..=0.8) }).collect();
        let diag = |f: &dyn Fn(f64) -> f64| DMatrix::from_diagonal(&DVector::from_iterator(n, eig.iter().map(|&l| f(l))));
        let a = &q * diag(&|l| l) * q.transpose();
        let flow = &q * diag(&|l| (l * spec.dt_corr).exp()) * q.transpose();
        let mut noise = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let s = noise.singular_values().max();
        if s > 0.0 {
            noise /= s;
        }
        let learned = &a + DMatrix::identity(n, n) * spec.bias + noise * spec.noise;
        let contraction = orthogonal(n, &mut rng) * spec.kappa;
        let mut residual: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        residual *= spec.delta_c / residual.norm().max(f64::MIN_POSITIVE);
        if spec.delta_c == 0.0 {
            residual.fill(0.0);
        }
        let stable_cols: Vec<usize> = (0..n).filter(|&i| eig[i] <= 0.0).collect();
        let stable = q.select_columns(&stable_cols);
        LinearSystem { top: q.column(0).into_owned(), stable, a, flow, learned, contraction, residual }
    }
}

/// Runs learned-flow legs (RK4 through [`ode_solve`]) with a linear
/// contraction corrector against the exact flow, measures E_ODE, κ, δ_C and
/// ‖A‖ on the run, and checks every e_k⁺ against the bound built from them.
pub fn certify_on_linear_system(spec: &LinearSystemSpec) -> Result<CertReport> {
    if spec.dim == 0 || spec.steps == 0 {
        return Err(Error::contract("dimension and step count must be positive"));
    }
    let sys = LinearSystem::build(spec);
    let n = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5_5A5A);
    // true state in the non-growing eigenspace keeps it O(1) over long runs
    let coef = DVector::from_fn(sys.stable.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let mut truth: DVector<f64> = &sys.stable * coef;
    if truth.norm() > 0.0 {
        truth /= truth.norm();
    }
    let mut est = &truth + &sys.top * spec.e0;

    let mut rhs = |_: f64, h: &Vec<f64>| -> Result<Vec<f64>> { Ok((&sys.learned * DVector::from_column_slice(h)).as_slice().to_vec()) };
    let mut rows = vec![CertRow { k: 0, e_measured: (&est - &truth).norm(), bound: 0.0 }];
    let mut leg_errors = Vec::with_capacity(spec.steps);
    let mut kappa_seen: f64 = 0.0;
    let mut leg_growth = Vec::with_capacity(spec.steps);
    for k in 0..spec.steps {
        let (ta, tb) = (k as f64 * spec.dt_corr, (k + 1) as f64 * spec.dt_corr);
        let path = ode_solve(&mut rhs, &est.as_slice().to_vec(), ta, tb, spec.dt_solver, &[])?;
        let pre = DVector::from_vec(path.last().expect("solve returns the end state").1.clone());
        // model discrepancy measured at the model's own state
        leg_errors.push((&pre - &sys.flow * &est).norm());
        let e_plus = (&est - &truth).norm();
        truth = &sys.flow * &truth;
        let err_pre = &pre - &truth;
        leg_growth.push(if e_plus > 0.0 { err_pre.norm() / e_plus } else { f64::NAN });
        est = if spec.uncorrected {
            pre
        } else {
            let pulled = &sys.contraction * &err_pre;
            if err_pre.norm() > 0.0 {
                kappa_seen = kappa_seen.max(pulled.norm() / err_pre.norm());
            }
            &truth + pulled + &sys.residual
        };
        rows.push(CertRow { k: k + 1, e_measured: (&est - &truth).norm(), bound: 0.0 });
    }

    let l_f_estimate = power_iteration(n, 200, spec.seed, |v| &sys.a * v, |v| sys.a.transpose() * v);
    let measured = BoundParams {
        l_f: spec.l_f.max(l_f_estimate),
        dt_corr: spec.dt_corr,
        kappa: if spec.uncorrected { 1.0 } else { kappa_seen },
        delta_c: sys.residual.norm(),
        e_ode: leg_errors.iter().copied().fold(0.0, f64::max),
        e0: rows[0].e_measured,
    };
    let inconclusive = |note: String, rows: Vec<CertRow>| CertReport {
        verdict: Verdict::Inconclusive,
        note: Some(note),
        measured,
        l_f_estimate,
        rows,
        leg_growth: leg_growth.clone(),
    };
    if measured.kappa >= 1.0 {
        return Ok(inconclusive(format!("measured contraction {} is not below 1", measured.kappa), rows));
    }
    if measured.alpha_eff() >= 1.0 {
        return Ok(inconclusive(format!("alpha_eff {} is not below 1", measured.alpha_eff()), rows));
    }
    for r in &mut rows {
        r.bound = bound_at(r.k, &measured)?.bound;
    }
    let verdict = if rows.iter().all(CertRow::holds) { Verdict::Certified } else { Verdict::Violated };
    Ok(CertReport { verdict, note: None, measured, l_f_estimate, rows, leg_growth })
}

/// Errors of a perfectly learned linear flow with and without the blended
/// correction `z⁺ = z⁻ + λ·r`, r the exact pull back to the truth.
pub fn cadence_check(dim: usize, seed: u64, steps: usize, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::correction::check_lambda(lambda)?;
    let spec = LinearSystemSpec { bias: 0.0, noise: 0.0, ..LinearSystemSpec::new(dim, seed) };
    let sys = LinearSystem::build(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e0 = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng)) * spec.e0;
    let (mut plain, mut corrected) = (e0.clone(), e0);
    let (mut a, mut b) = (vec![plain.norm()], vec![corrected.norm()]);
    for _ in 0..steps {
        plain = &sys.flow * plain;
        let pre = &sys.flow * corrected;
        corrected = &pre - &pre * lambda;
        a.push(plain.norm());
        b.push(corrected.norm());
    }
    Ok((a, b))
}
