use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::field::FieldSnapshot;

/// Wavenumbers per axis used by [`random_ic`].
pub const IC_MODES: usize = 4;

/// Random smooth field: seeded Gaussian combination of the separable
/// cos/sin modes with `kx, ky < 4` (mean mode excluded), scaled to unit max.
pub fn random_ic(height: usize, width: usize, channels: usize, seed: u64) -> FieldSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut coef = Vec::new();
        for ky in 0..IC_MODES {
            for kx in 0..IC_MODES {
                for (sx, sy) in [(false, false), (false, true), (true, false), (true, true)] {
                    if (kx == 0 && sx) || (ky == 0 && sy) || (kx == 0 && ky == 0) {
                        continue;
                    }
                    let a: f64 = StandardNormal.sample(&mut rng);
                    coef.push((kx as f64, ky as f64, sx, sy, a));
                }
            }
        }
        let mut plane = vec![0.0; height * width];
        for r in 0..height {
            for c in 0..width {
                let (x, y) = super::field::node_coord(r, c, height, width);
                plane[r * width + c] = coef
                    .iter()
                    .map(|&(kx, ky, sx, sy, a)| {
                        let fx = if sx { (2.0 * PI * kx * x).sin() } else { (2.0 * PI * kx * x).cos() };
                        let fy = if sy { (2.0 * PI * ky * y).sin() } else { (2.0 * PI * ky * y).cos() };
                        a * fx * fy
                    })
                    .sum();
            }
        }
        let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            plane.iter_mut().for_each(|v| *v /= peak);
        }
        planes.push(plane);
    }
    FieldSnapshot::from_channels(height, width, 0.0, &planes)
}
