use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{observation_seed, subsample, EncodeInput, Model};
use crate::autodiff::{Tape, Var};
use crate::dynamics::{Split, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::Adam;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// One trajectory prepared for supervision: encoder input at t₀ and the
/// observed-point targets at t = 1..=T_train.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub index: usize,
    pub input: EncodeInput,
    pub coords: Tensor<f64>,
    pub targets: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub times: Vec<f64>,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
}

impl TrainData {
    /// Observed points only; masks come from [`observation_seed`].
    pub fn build(model: &Model, data: &TrainDataSource<'_>) -> Result<Self> {
        let t_train = data.dataset.config.t_train;
        let times: Vec<f64> = (1..=t_train).map(|k| k as f64).collect();
        let make = |split: Split| -> Result<Vec<TrainSample>> {
            data.dataset
                .split(split)
                .map(|(index, traj)| {
                    let seed = observation_seed(model.config.seed, index);
                    let (obs, _) = subsample(traj.initial(), model.config.observe_ratio, seed)?;
                    let n = obs.len();
                    let targets = (1..=t_train)
                        .map(|k| Tensor::new([n, obs.channels], obs.values_from(&traj.snapshots[k])))
                        .collect::<Result<_>>()?;
                    Ok(TrainSample {
                        index,
                        input: model.prepare(&obs)?,
                        coords: Tensor::new([n, 2], obs.coords.iter().flatten().copied().collect())?,
                        targets,
                    })
                })
                .collect()
        };
        let mut train = make(Split::Train)?;
        if let Some(limit) = data.max_train {
            train.truncate(limit);
        }
        let val = make(Split::Val)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::contract("training needs non-empty train and validation splits"));
        }
        Ok(TrainData { times, train, val })
    }
}

/// Where training samples come from.
pub struct TrainDataSource<'a> {
    pub dataset: &'a TrajectoryDataset,
    /// Use only the first `n` training trajectories.
    pub max_train: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (NaN for epoch 0).
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub initial_val: f64,
    /// Set when training stopped on a non-finite loss; parameters are the
    /// best ones seen before that.
    pub diverged: Option<String>,
}

/// Mean over supervised times of the per-point MSE.
pub fn sample_loss<'t, T: Real>(model: &Model, p: &Bound<'t, T>, times: &[f64], s: &TrainSample) -> Result<Var<'t, T>> {
    let preds = model.predict(p, &s.input, times, &s.coords)?;
    let tape = p.tape();
    let mut total: Option<Var<'t, T>> = None;
    for (pred, target) in preds.iter().zip(&s.targets) {
        let err = pred.sub(&crate::nn::constant(tape, target))?.square()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(&err)?,
            None => err,
        });
    }
    total.ok_or_else(|| Error::contract("no supervised times"))?.scale(1.0 / times.len() as f64)
}

fn sample_grad(model: &Model, store: &ParamStore<f32>, times: &[f64], s: &TrainSample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let loss = sample_loss(model, &p, times, s)?;
    let value = loss.value().item().f64();
    let grads = tape.backward(loss)?;
    Ok((value, p.grads(&grads)))
}

/// Mean loss over `samples` with frozen parameters.
pub fn mean_loss(model: &Model, store: &ParamStore<f32>, times: &[f64], samples: &[TrainSample], exec: Exec) -> Result<f64> {
    let losses = exec.try_map_range(samples.len(), |i| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        Ok(sample_loss(model, &p, times, &samples[i])?.value().item().f64())
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Batch gradient: per-sample gradients summed in batch order, then averaged.
fn batch_grad(
    model: &Model,
    store: &ParamStore<f32>,
    data: &TrainData,
    batch: &[usize],
    exec: Exec,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let parts = exec.try_map_range(batch.len(), |j| sample_grad(model, store, &data.times, &data.train[batch[j]]))?;
    let mut acc: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for (l, grads) in &parts {
        loss += l;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, &y) in a.iter_mut().zip(g.data()) {
                *x += y as f64;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = acc
        .into_iter()
        .zip(store.tensors())
        .map(|(a, t)| Tensor::new(t.shape().to_vec(), a.into_iter().map(|v| (v * scale) as f32).collect()))
        .collect::<Result<_>>()?;
    Ok((loss * scale, grads))
}

/// Adam on the observed-point MSE; keeps the parameters with the best
/// validation loss (epoch 0 = initialization) and leaves them in `store`.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &TrainData,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    let cfg = &model.config;
    let initial_val = mean_loss(model, store, &data.times, &data.val, exec)?;
    if !initial_val.is_finite() {
        return Err(Error::Numeric(format!("initial validation loss is {initial_val}")));
    }
    let first = EpochStats { epoch: 0, train_loss: f64::NAN, val_loss: initial_val };
    on_epoch(&first);
    let mut report = TrainReport { epochs: vec![first], best_epoch: 0, best_val: initial_val, initial_val, diverged: None };
    let mut best = store.clone();
    let mut adam = Adam::new(cfg.optimizer, store);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let step = batch_grad(model, store, data, batch, exec);
            let (loss, grads) = match step {
                Ok(x) if x.0.is_finite() => x,
                Ok(x) => {
                    report.diverged = Some(format!("training loss {} at epoch {epoch}", x.0));
                    break 'epochs;
                }
                Err(e) if e.is_numeric() => {
                    report.diverged = Some(format!("{e} at epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam.update(store, &grads);
            sum += loss;
            batches += 1;
        }
        let val_loss = match mean_loss(model, store, &data.times, &data.val, exec) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                report.diverged = Some(format!("validation loss {v} at epoch {epoch}"));
                break;
            }
            Err(e) if e.is_numeric() => {
                report.diverged = Some(format!("{e} at epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let stats = EpochStats { epoch, train_loss: sum / batches as f64, val_loss };
        on_epoch(&stats);
        if val_loss < report.best_val {
            report.best_val = val_loss;
            report.best_epoch = epoch;
            best.assign_from(store)?;
        }
        report.epochs.push(stats);
    }
    store.assign_from(&best)?;
    Ok(report)
}
