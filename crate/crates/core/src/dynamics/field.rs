use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled field on the periodic unit square, stored `[row][col][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub t: f64,
    pub values: Vec<f64>,
}

impl FieldSnapshot {
    pub fn new(height: usize, width: usize, channels: usize, t: f64, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!("empty field {height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(
                "FieldSnapshot",
                format!("{} values for {height}x{width}x{channels}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "FieldSnapshot".into() });
        }
        Ok(FieldSnapshot { height, width, channels, t, values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FieldSnapshot { height, width, channels, t: 0.0, values: vec![0.0; height * width * channels] }
    }

    /// Builds a field by evaluating `f(x, y)` at every node; returns `channels` values.
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(f64, f64) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                let (x, y) = node_coord(r, c, height, width);
                let v = f(x, y);
                if v.len() != channels {
                    return Err(Error::shape("FieldSnapshot::from_fn", format!("{} channels, want {channels}", v.len())));
                }
                values.extend(v);
            }
        }
        FieldSnapshot::new(height, width, channels, 0.0, values)
    }

    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn coord(&self, r: usize, c: usize) -> (f64, f64) {
        node_coord(r, c, self.height, self.width)
    }

    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.values[(r * self.width + c) * self.channels + ch]
    }

    /// Single channel as a row-major `[H, W]` plane.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.values.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    pub(crate) fn from_channels(height: usize, width: usize, t: f64, planes: &[Vec<f64>]) -> Self {
        let channels = planes.len();
        let mut values = vec![0.0; height * width * channels];
        for (ch, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                values[i * channels + ch] = v;
            }
        }
        FieldSnapshot { height, width, channels, t, values }
    }

    pub fn mean(&self, ch: usize) -> f64 {
        self.channel(ch).iter().sum::<f64>() / self.nodes() as f64
    }

    /// Population standard deviation of each channel.
    pub fn channel_std(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|ch| {
                let plane = self.channel(ch);
                let m = plane.iter().sum::<f64>() / plane.len() as f64;
                (plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane.len() as f64).sqrt()
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &FieldSnapshot) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn node_coord(r: usize, c: usize, height: usize, width: usize) -> (f64, f64) {
    ((c as f64 + 0.5) / width as f64, (r as f64 + 0.5) / height as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    DiffusionAdvection,
    Vorticity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    pub pde: PdeKind,
    pub nu: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    pub seed: u64,
}

/// Snapshots at uniform spacing `dt`, plus optional mid-step snapshots at
/// `t_k + dt/2` used as ground truth between stored steps.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub physics: Physics,
    pub dt: f64,
    pub snapshots: Vec<FieldSnapshot>,
    pub half_steps: Vec<FieldSnapshot>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.snapshots.len().saturating_sub(1)
    }

    pub fn initial(&self) -> &FieldSnapshot {
        &self.snapshots[0]
    }

    /// Checks strictly increasing, uniformly spaced time stamps.
    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(Error::contract("trajectory has no snapshots"));
        }
        let t0 = self.snapshots[0].t;
        for (k, s) in self.snapshots.iter().enumerate() {
            let want = t0 + k as f64 * self.dt;
            if (s.t - want).abs() > 1e-9 * (1.0 + want.abs()) {
                return Err(Error::contract(format!("snapshot {k} at t={} (expected {want})", s.t)));
            }
        }
        Ok(())
    }
}
