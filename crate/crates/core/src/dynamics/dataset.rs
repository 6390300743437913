use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::simulate_diffusion_advection;
use super::field::{FieldSnapshot, PdeKind, Physics, Trajectory};
use super::ic::random_ic;
use super::vorticity::simulate_vorticity_substepped;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cops-dataset-v1";
pub const MIN_TRAJECTORIES: usize = 10;

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub pde: PdeKind,
    pub trajectories: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Stored steps after the initial snapshot.
    pub steps: usize,
    pub dt: f64,
    /// Last supervised step; later steps are extrapolation targets.
    pub t_train: usize,
    pub seed: u64,
    pub nu: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Solver steps per stored step (vorticity only).
    #[serde(default = "one")]
    pub substeps: usize,
    /// Peak of the initial condition.
    #[serde(default = "unit")]
    pub amplitude: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories < MIN_TRAJECTORIES {
            return Err(Error::contract(format!(
                "need at least {MIN_TRAJECTORIES} trajectories for a 7:2:1 split, got {}",
                self.trajectories
            )));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::contract("grid must be at least 2x2 with one channel"));
        }
        if self.t_train == 0 || self.t_train > self.steps {
            return Err(Error::contract(format!(
                "t_train must lie in 1..={}, got {}",
                self.steps, self.t_train
            )));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::contract("amplitude must be positive"));
        }
        Ok(())
    }

    pub fn trajectory_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((index as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seeded 7:2:1 partition of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> Result<Splits> {
    if n < MIN_TRAJECTORIES {
        return Err(Error::contract(format!("cannot split {n} trajectories (need {MIN_TRAJECTORIES})")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: sorted(&idx[..n_train]),
        val: sorted(&idx[n_train..n_train + n_val]),
        test: sorted(&idx[n_train + n_val..]),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dt: f64,
    pub steps: usize,
    pub t_train: usize,
    pub count: usize,
    pub splits: Splits,
    pub seeds: Vec<u64>,
    pub physics: Vec<Physics>,
    pub blobs: Vec<String>,
    pub half_blobs: Vec<String>,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug)]
pub struct TrajectoryDataset {
    pub config: DatasetConfig,
    pub splits: Splits,
    pub trajectories: Vec<Trajectory>,
}

fn quantize(s: &mut FieldSnapshot) {
    s.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Simulates one trajectory from a seeded random initial condition.
pub fn simulate_one(config: &DatasetConfig, index: usize) -> Result<Trajectory> {
    let seed = config.trajectory_seed(index);
    let mut ic = random_ic(config.height, config.width, config.channels, seed);
    ic.values.iter_mut().for_each(|v| *v *= config.amplitude);
    let mut traj = match config.pde {
        PdeKind::DiffusionAdvection => {
            simulate_diffusion_advection(&ic, config.nu, config.velocity, config.dt, config.steps)?
        }
        PdeKind::Vorticity => {
            simulate_vorticity_substepped(&ic, config.nu, config.dt, config.steps, config.substeps)?
        }
    };
    traj.physics.seed = seed;
    // stored precision, so in-memory and reloaded datasets agree exactly
    traj.snapshots.iter_mut().chain(traj.half_steps.iter_mut()).for_each(quantize);
    Ok(traj)
}

pub fn make_dataset(config: &DatasetConfig, exec: Exec) -> Result<TrajectoryDataset> {
    config.validate()?;
    let splits = split_indices(config.trajectories, config.seed)?;
    let trajectories = exec
        .try_map_range(config.trajectories, |i| simulate_one(config, i).map_err(|e| e.context(format!("trajectory {i}"))))?;
    Ok(TrajectoryDataset { config: config.clone(), splits, trajectories })
}

fn blob_name(i: usize, half: bool) -> String {
    if half {
        format!("traj_{i:04}_half.f32")
    } else {
        format!("traj_{i:04}.f32")
    }
}

fn encode(snaps: &[FieldSnapshot]) -> Vec<u8> {
    snaps
        .iter()
        .flat_map(|s| s.values.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

impl TrajectoryDataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = (usize, &Trajectory)> {
        let idx = match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        idx.iter().map(move |&i| (i, &self.trajectories[i]))
    }

    /// Steps after the training horizon are extrapolation ground truth.
    pub fn is_ext_t(&self, step: usize) -> bool {
        step > self.config.t_train
    }

    pub fn manifest(&self) -> DatasetManifest {
        let c = &self.config;
        DatasetManifest {
            format: FORMAT.into(),
            height: c.height,
            width: c.width,
            channels: c.channels,
            dt: c.dt,
            steps: c.steps,
            t_train: c.t_train,
            count: self.trajectories.len(),
            splits: self.splits.clone(),
            seeds: self.trajectories.iter().map(|t| t.physics.seed).collect(),
            physics: self.trajectories.iter().map(|t| t.physics.clone()).collect(),
            blobs: (0..self.trajectories.len()).map(|i| blob_name(i, false)).collect(),
            half_blobs: (0..self.trajectories.len()).map(|i| blob_name(i, true)).collect(),
            config: c.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (name, snaps) in [(&manifest.blobs[i], &traj.snapshots), (&manifest.half_blobs[i], &traj.half_steps)] {
                let path = dir.join(name);
                fs::write(&path, encode(snaps)).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&text)?;
        let bad = |detail: String| Error::Format { what: "dataset manifest", detail };
        if m.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", m.format)));
        }
        if m.blobs.len() != m.count || m.half_blobs.len() != m.count || m.physics.len() != m.count {
            return Err(bad("per-trajectory lists disagree with count".into()));
        }
        let (h, w, ch) = (m.height, m.width, m.channels);
        let per = h * w * ch;
        let read = |name: &str, n: usize, t0: f64| -> Result<Vec<FieldSnapshot>> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != n * per * 4 {
                return Err(Error::Format {
                    what: "dataset blob",
                    detail: format!("{} has {} bytes, expected {}", path.display(), bytes.len(), n * per * 4),
                });
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            vals.chunks_exact(per)
                .enumerate()
                .map(|(k, v)| FieldSnapshot::new(h, w, ch, t0 + k as f64 * m.dt, v.to_vec()))
                .collect()
        };
        let mut trajectories = Vec::with_capacity(m.count);
        for i in 0..m.count {
            trajectories.push(Trajectory {
                physics: m.physics[i].clone(),
                dt: m.dt,
                snapshots: read(&m.blobs[i], m.steps + 1, 0.0)?,
                half_steps: read(&m.half_blobs[i], m.steps, 0.5 * m.dt)?,
            });
        }
        Ok(TrajectoryDataset { config: m.config, splits: m.splits, trajectories })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetConfig {
        DatasetConfig {
            pde: PdeKind::DiffusionAdvection,
            trajectories: n,
            height: 8,
            width: 8,
            channels: 1,
            steps: 6,
            dt: 1.0,
            t_train: 3,
            seed: 9,
            nu: 0.002,
            velocity: [0.03, 0.015],
            substeps: 1,
            amplitude: 1.0,
        }
    }

    #[test]
    fn hundred_trajectories_split_seven_two_one() {
        let s = split_indices(100, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(split_indices(40, 5).unwrap(), split_indices(40, 5).unwrap());
        assert_ne!(split_indices(40, 5).unwrap(), split_indices(40, 6).unwrap());
    }

    #[test]
    fn too_few_trajectories() {
        assert!(matches!(split_indices(9, 0), Err(Error::Contract(_))));
        assert!(make_dataset(&small(9), Exec::Sequential).is_err());
    }

    #[test]
    fn ext_t_region_follows_horizon() {
        let mut c = small(10);
        c.steps = 40;
        c.t_train = 20;
        let ds = make_dataset(&c, Exec::Sequential).unwrap();
        let ext: Vec<usize> = (0..=40).filter(|&k| ds.is_ext_t(k)).collect();
        assert_eq!(ext, (21..=40).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let a = make_dataset(&small(12), Exec::Parallel).unwrap();
        let b = make_dataset(&small(12), Exec::Sequential).unwrap();
        for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(x.snapshots, y.snapshots);
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut c = small(10);
        c.pde = PdeKind::Vorticity;
        c.substeps = 2;
        c.dt = 0.1;
        let ds = make_dataset(&c, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = TrajectoryDataset::load(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        assert_eq!(back.splits, ds.splits);
        for (x, y) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(x.physics, y.physics);
            assert_eq!(x.snapshots, y.snapshots);
            assert_eq!(x.half_steps, y.half_steps);
        }
        let bytes = fs::metadata(dir.path().join("traj_0000.f32")).unwrap().len();
        assert_eq!(bytes, (7 * 8 * 8 * 4) as u64);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let ds = make_dataset(&small(10), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        fs::write(dir.path().join("traj_0003.f32"), [0u8; 12]).unwrap();
        let err = TrajectoryDataset::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
