use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{observation_seed, subsample, Model};
use crate::autodiff::Tape;
use crate::dynamics::{node_coord, FieldSnapshot, Split, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpaceTag {
    /// Points observed at t₀.
    InS,
    /// Points never observed.
    ExtS,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeTag {
    /// Integer times inside the training horizon.
    InT,
    /// Integer times beyond it.
    ExtT,
    /// Half-integer times k + 0.5 inside the training horizon.
    ConT,
}

impl SpaceTag {
    pub fn label(self) -> &'static str {
        match self {
            SpaceTag::InS => "In-s",
            SpaceTag::ExtS => "Ext-s",
        }
    }
}

impl TimeTag {
    pub fn label(self) -> &'static str {
        match self {
            TimeTag::InT => "In-t",
            TimeTag::ExtT => "Ext-t",
            TimeTag::ConT => "Con-t",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub split: Split,
    /// Observed fraction at t₀.
    pub ratio: f64,
    /// Run seed the observation masks derive from.
    pub seed: u64,
    pub tags: Vec<(SpaceTag, TimeTag)>,
    /// Input noise as a fraction of each channel's t₀ standard deviation.
    pub noise: f64,
    pub noise_seed: u64,
    pub max_trajectories: Option<usize>,
}

impl EvalProtocol {
    /// Every tag the dataset has ground truth for, on the test split.
    pub fn standard(dataset: &TrajectoryDataset, ratio: f64, seed: u64) -> Self {
        let steps = dataset.config.steps;
        let t_train = dataset.config.t_train;
        let has_half = dataset.trajectories.iter().all(|t| t.half_steps.len() >= t_train);
        let mut tags = Vec::new();
        let spaces: &[SpaceTag] = if ratio < 1.0 { &[SpaceTag::InS, SpaceTag::ExtS] } else { &[SpaceTag::InS] };
        for &s in spaces {
            tags.push((s, TimeTag::InT));
            if steps > t_train {
                tags.push((s, TimeTag::ExtT));
            }
            if has_half {
                tags.push((s, TimeTag::ConT));
            }
        }
        EvalProtocol { split: Split::Test, ratio, seed, tags, noise: 0.0, noise_seed: 0, max_trajectories: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagResult {
    pub space: SpaceTag,
    pub time: TimeTag,
    pub mse: f64,
    /// Persistence baseline (true u(t₀) for every t) on the same entries.
    pub baseline: f64,
    /// Number of evaluated time instants per trajectory.
    pub steps: usize,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub mse: f64,
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tags: Vec<TagResult>,
    /// MSE over all nodes at each evaluated time.
    pub curve: Vec<CurvePoint>,
    pub trajectories: usize,
    pub noise: f64,
}

impl EvalReport {
    pub fn get(&self, space: SpaceTag, time: TimeTag) -> Option<&TagResult> {
        self.tags.iter().find(|r| r.space == space && r.time == time)
    }

    pub fn mse(&self, space: SpaceTag, time: TimeTag) -> Option<f64> {
        self.get(space, time).map(|r| r.mse)
    }

    /// `tag,mse,steps` rows, plus the baseline as `persistence:<tag>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,mse,steps\n");
        for r in &self.tags {
            let _ = writeln!(s, "{}/{},{:.9e},{}", r.space.label(), r.time.label(), r.mse, r.steps);
        }
        for r in &self.tags {
            let _ = writeln!(s, "persistence:{}/{},{:.9e},{}", r.space.label(), r.time.label(), r.baseline, r.steps);
        }
        s
    }
}

/// Per-step MSE of predicting `u(t₀)` for every later snapshot, over all nodes.
pub fn persistence_mse(traj: &Trajectory) -> Vec<f64> {
    let u0 = traj.initial();
    traj.snapshots[1..].iter().map(|s| sq_diff(&u0.values, &s.values) / s.values.len() as f64).collect()
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ground-truth snapshot at an evaluation time (integer or k + 0.5).
fn truth(traj: &Trajectory, t: f64) -> Option<&FieldSnapshot> {
    if t.fract() == 0.0 {
        traj.snapshots.get(t as usize)
    } else {
        traj.half_steps.get(t.floor() as usize)
    }
}

#[derive(Clone, Default)]
struct Acc {
    sq: f64,
    base: f64,
    n: usize,
}

struct TrajResult {
    tags: Vec<Acc>,
    curve: Vec<Acc>,
}

fn times_for(tag: TimeTag, t_train: usize, steps: usize) -> Vec<f64> {
    match tag {
        TimeTag::InT => (1..=t_train).map(|k| k as f64).collect(),
        TimeTag::ExtT => (t_train + 1..=steps).map(|k| k as f64).collect(),
        TimeTag::ConT => (0..t_train).map(|k| k as f64 + 0.5).collect(),
    }
}

/// Scores `store` on the protocol's split: per-tag MSE and the per-time
/// curve, each next to the persistence baseline. With input noise, each
/// trajectory is run with an antithetic pair of perturbations.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    dataset: &TrajectoryDataset,
    protocol: &EvalProtocol,
    exec: Exec,
) -> Result<EvalReport> {
    if protocol.tags.is_empty() {
        return Err(Error::contract("no evaluation tags requested"));
    }
    let (steps, t_train) = (dataset.config.steps, dataset.config.t_train);
    for &(s, t) in &protocol.tags {
        let missing = match (s, t) {
            (SpaceTag::ExtS, _) if protocol.ratio >= 1.0 => Some("every point is observed"),
            (_, TimeTag::ExtT) if steps <= t_train => Some("no steps beyond the training horizon"),
            (_, TimeTag::ConT) if dataset.trajectories.iter().any(|tr| tr.half_steps.len() < t_train) => {
                Some("dataset has no half-step snapshots")
            }
            _ => None,
        };
        if let Some(why) = missing {
            return Err(Error::contract(format!("tag {}/{} has no ground truth: {why}", s.label(), t.label())));
        }
    }
    let mut trajs: Vec<(usize, &Trajectory)> = dataset.split(protocol.split).collect();
    if let Some(m) = protocol.max_trajectories {
        trajs.truncate(m);
    }
    if trajs.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut time_tags: Vec<TimeTag> = Vec::new();
    for &(_, t) in &protocol.tags {
        if !time_tags.contains(&t) {
            time_tags.push(t);
        }
    }
    let mut times: Vec<f64> = time_tags.iter().flat_map(|&t| times_for(t, t_train, steps)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let first = trajs[0].1.initial();
    let (h, w, ch) = (first.height, first.width, first.channels);
    let coords = Tensor::new(
        [h * w, 2],
        (0..h * w)
            .flat_map(|i| {
                let (x, y) = node_coord(i / w, i % w, h, w);
                [x, y]
            })
            .collect(),
    )?;

    let signs: &[f64] = if protocol.noise > 0.0 { &[1.0, -1.0] } else { &[1.0] };
    let results = exec.try_map_range(trajs.len(), |j| -> Result<TrajResult> {
        let (index, traj) = trajs[j];
        let u0 = traj.initial();
        let (obs, mask) = subsample(u0, protocol.ratio, observation_seed(protocol.seed, index))?;
        let std = u0.channel_std();
        let mut tags = vec![Acc::default(); protocol.tags.len()];
        let mut curve = vec![Acc::default(); times.len()];
        for &sign in signs {
            let seen = if protocol.noise > 0.0 {
                obs.with_noise(&std, protocol.noise, protocol.noise_seed ^ (index as u64).wrapping_mul(0x9E37_79B9), sign)
            } else {
                obs.clone()
            };
            let input = model.prepare(&seen)?;
            let tape = Tape::<f32>::new();
            let p = store.bind_frozen(&tape);
            let preds = model.predict(&p, &input, &times, &coords)?;
            for (ti, (&t, pred)) in times.iter().zip(&preds).enumerate() {
                let truth = truth(traj, t).ok_or_else(|| Error::contract(format!("no ground truth at t={t}")))?;
                let pv = pred.value();
                let tag = if t.fract() != 0.0 {
                    TimeTag::ConT
                } else if t as usize <= t_train {
                    TimeTag::InT
                } else {
                    TimeTag::ExtT
                };
                for node in 0..h * w {
                    let space = if mask[node] { SpaceTag::InS } else { SpaceTag::ExtS };
                    let (mut e, mut b) = (0.0, 0.0);
                    for c in 0..ch {
                        let y = truth.values[node * ch + c];
                        e += (pv.data()[node * ch + c].f64() - y).powi(2);
                        b += (u0.values[node * ch + c] - y).powi(2);
                    }
                    let acc = &mut curve[ti];
                    acc.sq += e;
                    acc.base += b;
                    acc.n += ch;
                    if let Some(k) = protocol.tags.iter().position(|&(s, tt)| s == space && tt == tag) {
                        tags[k].sq += e;
                        tags[k].base += b;
                        tags[k].n += ch;
                    }
                }
            }
        }
        Ok(TrajResult { tags, curve })
    })?;

    let mut tag_acc = vec![Acc::default(); protocol.tags.len()];
    let mut curve_acc = vec![Acc::default(); times.len()];
    for r in &results {
        for (a, b) in tag_acc.iter_mut().zip(&r.tags).chain(curve_acc.iter_mut().zip(&r.curve)) {
            a.sq += b.sq;
            a.base += b.base;
            a.n += b.n;
        }
    }
    let tags = protocol
        .tags
        .iter()
        .zip(&tag_acc)
        .map(|(&(space, time), a)| TagResult {
            space,
            time,
            mse: a.sq / a.n.max(1) as f64,
            baseline: a.base / a.n.max(1) as f64,
            steps: times_for(time, t_train, steps).len(),
            entries: a.n,
        })
        .collect();
    let curve = times
        .iter()
        .zip(&curve_acc)
        .map(|(&t, a)| CurvePoint { t, mse: a.sq / a.n as f64, baseline: a.base / a.n as f64 })
        .collect();
    Ok(EvalReport { tags, curve, trajectories: trajs.len(), noise: protocol.noise })
}
