//! Encode → corrected ODE legs → decode, with training, evaluation and
//! checkpointing on top.

mod eval;
mod observe;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::correction::{check_lambda, correct_step, Corrector};
use crate::error::{Error, Result};
use crate::grid::{Attachment, Decoder, GridNeighbors, GridSpec, Mapper, MapperConfig};
use crate::mfn::{EncoderConfig, EncoderKind, PointEncoder};
use crate::nn::constant;
use crate::ode::{ode_solve, DynamicsKind, MultiScaleOde, OdeConfig, OdeContext};
use crate::optim::AdamConfig;
use crate::params::{self, Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub use eval::{evaluate, persistence_mse, EvalProtocol, EvalReport, SpaceTag, TagResult, TimeTag};
pub use observe::{observation_seed, subsample, Observations, MIN_OBSERVED};
pub use train::{mean_loss, sample_loss, train, EpochStats, TrainData, TrainDataSource, TrainReport, TrainSample};

/// Slack used when matching times to the correction and solver lattices.
const TIME_EPS: f64 = 1e-9;

fn default_dt_solver() -> f64 {
    0.25
}
fn default_dt_corr() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    200
}
fn default_ratio() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent vertex lattice.
    pub grid: GridSpec,
    /// Hidden width C shared by every stage.
    pub width: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mapper: MapperConfig,
    #[serde(default)]
    pub ode: OdeConfig,
    #[serde(default = "default_dt_solver")]
    pub dt_solver: f64,
    #[serde(default = "default_dt_corr")]
    pub dt_corr: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Build the corrector at all (false drops its parameters).
    #[serde(default = "default_true")]
    pub corrector: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fraction of grid nodes observed at t₀.
    #[serde(default = "default_ratio")]
    pub observe_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec { height: 8, width: 8 },
            width: 16,
            encoder: EncoderConfig::default(),
            mapper: MapperConfig::default(),
            ode: OdeConfig::default(),
            dt_solver: default_dt_solver(),
            dt_corr: default_dt_corr(),
            lambda: default_lambda(),
            corrector: true,
            optimizer: AdamConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            observe_ratio: default_ratio(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.width == 0 {
            return Err(Error::contract("width must be positive"));
        }
        if !(self.dt_solver > 0.0) || !(self.dt_corr > 0.0) {
            return Err(Error::contract("dt_solver and dt_corr must be positive"));
        }
        let legs = self.dt_corr / self.dt_solver;
        if (legs - legs.round()).abs() > TIME_EPS * legs.max(1.0) {
            return Err(Error::contract(format!(
                "dt_solver {} does not divide dt_corr {}",
                self.dt_solver, self.dt_corr
            )));
        }
        check_lambda(self.lambda)?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.observe_ratio > 0.0 && self.observe_ratio <= 1.0) {
            return Err(Error::contract(format!("observe_ratio {} outside (0, 1]", self.observe_ratio)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Encoder replaced by a two-layer MLP on `[u, x]`.
    WoMfn,
    /// ODE leg replaced by one learned residual map per correction interval.
    WoMgo,
    /// No corrector.
    WoNac,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::WoMfn, Variant::WoMgo, Variant::WoNac];

    pub fn label(self) -> &'static str {
        match self {
            Variant::WoMfn => "w/o MFN",
            Variant::WoMgo => "w/o MGO",
            Variant::WoNac => "w/o NAC",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// Accepts `w/o MFN`, `wo-mfn`, `no_mfn`, `mfn`, ...
    fn from_str(s: &str) -> Result<Self> {
        let k: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let k = k.strip_prefix("wo").or_else(|| k.strip_prefix("no")).unwrap_or(&k);
        match k {
            "mfn" => Ok(Variant::WoMfn),
            "mgo" => Ok(Variant::WoMgo),
            "nac" => Ok(Variant::WoNac),
            _ => Err(Error::contract(format!("unknown ablation variant {s:?} (want w/o MFN, w/o MGO or w/o NAC)"))),
        }
    }
}

/// The config of an ablated model; everything not named by the variant is kept.
pub fn ablate(config: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut c = config.clone();
    match variant {
        Variant::WoMfn => c.encoder.kind = EncoderKind::Mlp,
        Variant::WoMgo => c.ode = OdeConfig { kind: DynamicsKind::Residual, scales: 1, layers: 1, ..c.ode },
        Variant::WoNac => {
            c.lambda = 0.0;
            c.corrector = false;
        }
    }
    c
}

/// Everything needed to rebuild a model next to its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub channels: usize,
}

/// Tape-independent encoder input for one observation set.
#[derive(Clone, Debug)]
pub struct EncodeInput {
    att: Attachment,
    values: Tensor<f64>,
    coords: Tensor<f64>,
}

impl EncodeInput {
    pub fn points(&self) -> usize {
        self.coords.shape()[0]
    }
}

/// Latents at requested times plus how many ODE solves produced them.
pub struct Rollout<'t, T: Real> {
    pub latents: Vec<(f64, Var<'t, T>)>,
    pub solver_calls: usize,
}

impl<'t, T: Real> Rollout<'t, T> {
    pub fn at(&self, t: f64) -> Option<&Var<'t, T>> {
        self.latents.iter().find(|(s, _)| (s - t).abs() <= TIME_EPS).map(|(_, z)| z)
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub channels: usize,
    encoder: PointEncoder,
    mapper: Mapper,
    decoder: Decoder,
    dynamics: MultiScaleOde,
    corrector: Option<Corrector>,
    neighbors: GridNeighbors,
    ode_ctx: OdeContext,
}

/// Separate init stream per parameter group, so swapping one group leaves
/// the others' initial values unchanged.
fn group_init(seed: u64, group: u64) -> Init {
    Init::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(group))
}

impl Model {
    /// Registers every parameter in `store` (which should be empty).
    pub fn new<T: Real>(config: &ModelConfig, channels: usize, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::contract("need at least one field channel"));
        }
        let (c, s) = (config.width, config.seed);
        let encoder = PointEncoder::new(store, &mut group_init(s, 1), "enc", &config.encoder, channels, c)?;
        let mapper = Mapper::new(store, &mut group_init(s, 2), "map", &config.mapper, c)?;
        let decoder = Decoder::new(store, &mut group_init(s, 3), "dec", &config.mapper, c, channels)?;
        let dynamics = MultiScaleOde::new(store, &mut group_init(s, 4), "ode", &config.ode, &config.grid, c)?;
        let corrector = if config.corrector {
            Some(Corrector::new(store, &mut group_init(s, 5), "cor", &config.grid, c)?)
        } else {
            None
        };
        Ok(Model {
            config: config.clone(),
            channels,
            encoder,
            mapper,
            decoder,
            ode_ctx: dynamics.context()?,
            dynamics,
            corrector,
            neighbors: GridNeighbors::new(&config.grid)?,
        })
    }

    /// Fresh f32 parameters for `config`.
    pub fn init(config: &ModelConfig, channels: usize) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Model::new(config, channels, &mut store)?;
        Ok((model, store))
    }

    pub fn has_corrector(&self) -> bool {
        self.corrector.is_some()
    }

    pub fn prepare(&self, obs: &Observations) -> Result<EncodeInput> {
        if obs.channels != self.channels {
            return Err(Error::shape(
                "observations",
                format!("{} channels, model expects {}", obs.channels, self.channels),
            ));
        }
        let att = Attachment::build(&self.config.grid, &obs.coords, &obs.values)?;
        let n = obs.coords.len();
        Ok(EncodeInput {
            att,
            values: Tensor::new([n, obs.channels], obs.values.clone())?,
            coords: Tensor::new([n, 2], obs.coords.iter().flatten().copied().collect())?,
        })
    }

    /// Initial latent grid `[V, C]`.
    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, input: &EncodeInput) -> Result<Var<'t, T>> {
        let tape = p.tape();
        let u = constant(tape, &input.values);
        let x = constant(tape, &input.coords);
        let h = self.encoder.apply(p, &u, &x)?;
        self.mapper.encode(p, &h, &input.att, &self.neighbors)
    }

    /// Latent states at each requested time (≥ 0), with correction after
    /// every full leg. Off-lattice times come from a shortened RK4 step.
    pub fn rollout<'t, T: Real>(&self, p: &Bound<'t, T>, z0: &Var<'t, T>, times: &[f64]) -> Result<Rollout<'t, T>> {
        if let Some(&bad) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::contract(format!("query time {bad} is before t0 = 0")));
        }
        let dtc = self.config.dt_corr;
        let t_max = times.iter().copied().fold(0.0, f64::max);
        let legs = (t_max / dtc - TIME_EPS).ceil().max(0.0) as usize;
        let mut out: Vec<(f64, Var<'t, T>)> = Vec::with_capacity(times.len());
        let keep = |t: f64, z: &Var<'t, T>, out: &mut Vec<(f64, Var<'t, T>)>| {
            for &q in times {
                if (q - t).abs() <= TIME_EPS && !out.iter().any(|(s, _)| *s == q) {
                    out.push((q, *z));
                }
            }
        };
        keep(0.0, z0, &mut out);
        let mut z_plus = *z0;
        let mut solver_calls = 0;
        for k in 0..legs {
            let (ta, tb) = (k as f64 * dtc, (k + 1) as f64 * dtc);
            let inner: Vec<f64> = times.iter().copied().filter(|&t| t > ta + TIME_EPS && t < tb - TIME_EPS).collect();
            let (z_minus, inside) = match self.config.ode.kind {
                DynamicsKind::Ode => {
                    solver_calls += 1;
                    let mut f = |_: f64, h: &Var<'t, T>| self.dynamics.rhs(p, &self.ode_ctx, h);
                    let path = ode_solve(&mut f, &z_plus, ta, tb, self.config.dt_solver, &inner)
                        .map_err(|e| e.context(format!("leg {ta}..{tb}")))?;
                    let end = path.last().expect("solve returns the end state").1;
                    (end, path)
                }
                DynamicsKind::Residual => {
                    let step = self.dynamics.rhs(p, &self.ode_ctx, &z_plus)?;
                    let mut path = Vec::with_capacity(inner.len());
                    for &t in &inner {
                        path.push((t, z_plus.axpy((t - ta) / dtc, &step)?));
                    }
                    (z_plus.add(&step)?, path)
                }
            };
            for (t, z) in &inside {
                if *t < tb - TIME_EPS {
                    keep(*t, z, &mut out);
                }
            }
            let corrected = correct_step(self.corrector.as_ref(), p, &z_minus, &z_plus, self.config.lambda)?;
            if !corrected.value().is_finite() {
                return Err(Error::Numeric(format!("non-finite latent at t={tb}")));
            }
            keep(tb, &corrected, &mut out);
            z_plus = corrected;
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Rollout { latents: out, solver_calls })
    }

    /// Predictions `[Q, channels]` at `coords` for each time in `times`.
    pub fn predict<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        input: &EncodeInput,
        times: &[f64],
        coords: &Tensor<f64>,
    ) -> Result<Vec<Var<'t, T>>> {
        let z0 = self.encode(p, input)?;
        let roll = self.rollout(p, &z0, times)?;
        let q = constant(p.tape(), coords);
        let prepared = self.decoder.prepare(p, &self.mapper.phi, &self.config.grid, &q)?;
        times
            .iter()
            .map(|&t| {
                let z = roll.at(t).expect("rollout covers every requested time");
                self.decoder.decode(p, &prepared, z)
            })
            .collect()
    }

    /// Free-form `(t, x)` queries; returns `[channels]` per query, in order.
    pub fn predict_pairs(&self, store: &ParamStore<f32>, obs: &Observations, queries: &[(f64, [f64; 2])]) -> Result<Vec<Vec<f64>>> {
        let input = self.prepare(obs)?;
        let tape = crate::autodiff::Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let mut times: Vec<f64> = queries.iter().map(|q| q.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let z0 = self.encode(&p, &input)?;
        let roll = self.rollout(&p, &z0, &times)?;
        let mut out = vec![Vec::new(); queries.len()];
        for &t in &times {
            let idx: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].0 == t).collect();
            let coords = Tensor::new([idx.len(), 2], idx.iter().flat_map(|&i| queries[i].1).collect())?;
            let prepared = self.decoder.prepare(&p, &self.mapper.phi, &self.config.grid, &constant(&tape, &coords))?;
            let pred = self.decoder.decode(&p, &prepared, roll.at(t).expect("time in rollout"))?;
            let data = pred.value();
            for (row, &i) in idx.iter().enumerate() {
                out[i] = data.row(row).iter().map(|v| v.f64()).collect();
            }
        }
        Ok(out)
    }
}

/// Writes parameters plus the config needed to rebuild the model.
pub fn save_checkpoint(dir: &Path, model: &Model, store: &ParamStore<f32>) -> Result<()> {
    let meta = CheckpointMeta { model: model.config.clone(), channels: model.channels };
    params::save(dir, store, Some(serde_json::to_value(&meta)?))
}

/// Rebuilds a model from a checkpoint directory; the stored parameter names
/// and shapes must match what the embedded config produces.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (store, meta) = params::load(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(meta.ok_or_else(|| Error::Format {
        what: "checkpoint",
        detail: "manifest has no embedded model config".into(),
    })?)?;
    let (model, fresh) = Model::init(&meta.model, meta.channels)?;
    let same = fresh.len() == store.len()
        && fresh.iter().zip(store.iter()).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
    if !same {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "parameters do not match the embedded model config".into(),
        });
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests;
