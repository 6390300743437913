use std::f64::consts::PI;

use num_complex::Complex64;

use super::field::{FieldSnapshot, PdeKind, Physics, Trajectory};
use super::spectral::Fft2;
use crate::error::{Error, Result};

pub const MAX_GRID: usize = 64;
pub const CFL_LIMIT: f64 = 0.5;

/// Pseudo-spectral 2-D vorticity solver, RK4 in time, 2/3-rule dealiasing.
struct Solver {
    fft: Fft2,
    nu: f64,
    k2: Vec<f64>,
    dx: Vec<Complex64>,
    dy: Vec<Complex64>,
    keep: Vec<bool>,
}

struct Rhs {
    dw: Vec<Complex64>,
    max_speed: f64,
}

impl Solver {
    fn new(h: usize, w: usize, nu: f64) -> Self {
        let fft = Fft2::new(h, w);
        let n = h * w;
        let mut k2 = vec![0.0; n];
        let mut dx = vec![Complex64::default(); n];
        let mut dy = vec![Complex64::default(); n];
        let mut keep = vec![false; n];
        for i in 0..n {
            let (ky, kx) = fft.wavenumber(i);
            k2[i] = (2.0 * PI).powi(2) * (kx * kx + ky * ky);
            if !fft.is_nyquist(i) {
                dx[i] = Complex64::new(0.0, 2.0 * PI * kx);
                dy[i] = Complex64::new(0.0, 2.0 * PI * ky);
            }
            keep[i] = 3.0 * kx.abs() < w as f64 && 3.0 * ky.abs() < h as f64;
        }
        Solver { fft, nu, k2, dx, dy, keep }
    }

    /// Velocity `(u, v) = (∂ψ/∂y, −∂ψ/∂x)` with `−∇²ψ = ω`.
    fn velocity(&self, w_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let psi: Vec<Complex64> = w_hat
            .iter()
            .zip(&self.k2)
            .map(|(w, &k2)| if k2 > 0.0 { w / k2 } else { Complex64::default() })
            .collect();
        let u: Vec<Complex64> = psi.iter().zip(&self.dy).map(|(p, d)| p * d).collect();
        let v: Vec<Complex64> = psi.iter().zip(&self.dx).map(|(p, d)| -p * d).collect();
        (self.fft.inverse_real(&u), self.fft.inverse_real(&v))
    }

    fn rhs(&self, w_hat: &[Complex64]) -> Rhs {
        let (u, v) = self.velocity(w_hat);
        let wx: Vec<Complex64> = w_hat.iter().zip(&self.dx).map(|(a, d)| a * d).collect();
        let wy: Vec<Complex64> = w_hat.iter().zip(&self.dy).map(|(a, d)| a * d).collect();
        let (wx, wy) = (self.fft.inverse_real(&wx), self.fft.inverse_real(&wy));
        let adv: Vec<f64> = (0..u.len()).map(|i| u[i] * wx[i] + v[i] * wy[i]).collect();
        let adv_hat = self.fft.forward_real(&adv);
        let mut dw: Vec<Complex64> = (0..w_hat.len())
            .map(|i| {
                let nl = if self.keep[i] { adv_hat[i] } else { Complex64::default() };
                -nl - w_hat[i] * (self.nu * self.k2[i])
            })
            .collect();
        // the advection term is a divergence, so the mean mode never moves
        dw[0] = Complex64::default();
        let max_speed = u.iter().zip(&v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        Rhs { dw, max_speed }
    }

    fn rk4_step(&self, w_hat: &mut [Complex64], h: f64) -> Result<()> {
        let n = w_hat.len();
        let k1 = self.rhs(w_hat);
        let cells = self.fft.height().max(self.fft.width()) as f64;
        let courant = k1.max_speed * h * cells;
        if courant > CFL_LIMIT {
            return Err(Error::Numeric(format!(
                "CFL condition violated (max|u|*dt*W = {courant:.3} > {CFL_LIMIT}); use a smaller dt or more substeps"
            )));
        }
        let stage = |k: &[Complex64], a: f64| -> Vec<Complex64> { (0..n).map(|i| w_hat[i] + k[i] * a).collect() };
        let k2 = self.rhs(&stage(&k1.dw, h / 2.0)).dw;
        let k3 = self.rhs(&stage(&k2, h / 2.0)).dw;
        let k4 = self.rhs(&stage(&k3, h)).dw;
        for i in 0..n {
            w_hat[i] += (k1.dw[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
        }
        if w_hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite { op: "vorticity rk4".into() });
        }
        Ok(())
    }

    fn advance(&self, w_hat: &mut [Complex64], span: f64, substeps: usize) -> Result<()> {
        let h = span / substeps as f64;
        for _ in 0..substeps {
            self.rk4_step(w_hat, h)?;
        }
        Ok(())
    }
}

fn check_inputs(ic: &FieldSnapshot, nu: f64, dt: f64, substeps: usize) -> Result<()> {
    if ic.channels != 1 {
        return Err(Error::contract(format!("vorticity field must have 1 channel, got {}", ic.channels)));
    }
    if ic.height > MAX_GRID || ic.width > MAX_GRID {
        return Err(Error::contract(format!(
            "vorticity grid {}x{} exceeds {MAX_GRID}x{MAX_GRID}",
            ic.height, ic.width
        )));
    }
    if !(nu > 0.0) {
        return Err(Error::contract(format!("viscosity must be positive, got {nu}")));
    }
    if !(dt > 0.0) {
        return Err(Error::contract(format!("dt must be positive, got {dt}")));
    }
    if substeps == 0 {
        return Err(Error::contract("substeps must be at least 1"));
    }
    Ok(())
}

pub fn simulate_vorticity(ic: &FieldSnapshot, nu: f64, dt: f64, steps: usize) -> Result<Trajectory> {
    simulate_vorticity_substepped(ic, nu, dt, steps, 1)
}

/// As [`simulate_vorticity`] but with `substeps` RK4 steps per stored step.
/// Mid-step snapshots branch off each stored state with `ceil(substeps/2)`
/// steps, which coincides with the main path when `substeps` is even.
pub fn simulate_vorticity_substepped(
    ic: &FieldSnapshot,
    nu: f64,
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<Trajectory> {
    check_inputs(ic, nu, dt, substeps)?;
    let (h, w) = (ic.height, ic.width);
    let solver = Solver::new(h, w, nu);
    let mut state = solver.fft.forward_real(&ic.values);
    let snap = |s: &[Complex64], t: f64| FieldSnapshot::from_channels(h, w, t, &[solver.fft.inverse_real(s)]);
    let half_sub = substeps.div_ceil(2);

    let mut snapshots = vec![snap(&state, ic.t)];
    let mut half_steps = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = ic.t + k as f64 * dt;
        let mut mid = state.clone();
        solver
            .advance(&mut mid, dt / 2.0, half_sub)
            .map_err(|e| e.context(format!("t={t}")))?;
        half_steps.push(snap(&mid, t + dt / 2.0));
        solver.advance(&mut state, dt, substeps).map_err(|e| e.context(format!("t={t}")))?;
        snapshots.push(snap(&state, ic.t + (k + 1) as f64 * dt));
    }
    Ok(Trajectory {
        physics: Physics { pde: PdeKind::Vorticity, nu, velocity: [0.0, 0.0], seed: 0 },
        dt,
        snapshots,
        half_steps,
    })
}

/// Kinetic energy `½ mean(u² + v²)` of a vorticity field.
pub fn kinetic_energy(omega: &FieldSnapshot) -> f64 {
    let solver = Solver::new(omega.height, omega.width, 1.0);
    let (u, v) = solver.velocity(&solver.fft.forward_real(&omega.channel(0)));
    0.5 * u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() / u.len() as f64
}
