mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cops_core::bound::{
    bound_at, certify_on_linear_system, rows_csv, simulate_recurrence, BoundParams, LinearSystemSpec, RecurrenceMode,
    Verdict,
};
use cops_core::dynamics::{make_dataset, node_coord, DatasetConfig, PdeKind, Split, TrajectoryDataset};
use cops_core::exec::configure_threads;
use cops_core::pipeline::{
    ablate, evaluate, load_checkpoint, save_checkpoint, train, EvalProtocol, Model, ModelConfig, TrainData,
    TrainDataSource, Variant,
};
use cops_core::{Error, Exec, Result};

use files::{FieldFile, Palette};

#[derive(Parser)]
#[command(name = "cops", version, about = "Sparse-observation spatiotemporal forecasting with corrected graph ODEs")]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic trajectory dataset.
    Generate(GenerateArgs),
    /// Fit a model to a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Predict field values at (t, x, y) queries from sparse observations.
    Predict(PredictArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Build (and optionally train and score) an ablated model.
    Ablate(AblateArgs),
    /// Tabulate the error bound against its recurrence or a linear test system.
    VerifyBound(BoundArgs),
    /// Render one field snapshot as a PPM image and a CSV dump.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pde {
    Diffusion,
    Vorticity,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    pde: Pde,
    /// Grid side (square grid).
    #[arg(long)]
    grid: usize,
    #[arg(long)]
    traj: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Stored time step (default: 1 for diffusion, 0.1 for vorticity).
    #[arg(long)]
    dt: Option<f64>,
    /// Last supervised step (default: half the steps).
    #[arg(long)]
    t_train: Option<usize>,
    /// Viscosity (default: 0.002 for diffusion, 0.001 for vorticity).
    #[arg(long)]
    nu: Option<f64>,
    /// Advection velocity, diffusion only.
    #[arg(long, num_args = 2, value_names = ["VX", "VY"])]
    velocity: Option<Vec<f64>>,
    /// Solver steps per stored step, vorticity only (default 4).
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; also receives train_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Model config JSON (missing keys take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Observed fraction at t0.
    #[arg(long)]
    ratio: Option<f64>,
    /// Use only the first N training trajectories.
    #[arg(long)]
    max_train: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with header x,y,u0[,u1,...].
    #[arg(long)]
    obs: PathBuf,
    /// CSV with header t,x,y.
    #[arg(long)]
    queries: PathBuf,
    /// CSV t,x,y,u0[,u1,...].
    #[arg(long)]
    out: PathBuf,
    /// Also decode a full grid at this time into --field-out.
    #[arg(long, requires = "field_out")]
    field_time: Option<f64>,
    #[arg(long, requires = "field_time")]
    field_out: Option<PathBuf>,
    /// Side of the decoded grid.
    #[arg(long, default_value_t = 32)]
    field_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Observed fraction (default: the model's).
    #[arg(long)]
    ratio: Option<f64>,
    /// Mask seed (default: the model's).
    #[arg(long)]
    seed: Option<u64>,
    /// Input noise as a fraction of each channel's std.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    max_traj: Option<usize>,
    /// Metrics CSV (tag,mse,steps); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-time curve CSV (t,mse,baseline).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// w/o MFN, w/o MGO or w/o NAC.
    #[arg(long)]
    variant: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train and evaluate on this dataset as well.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_train: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Worst,
    Sampled,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    kappa: f64,
    #[arg(long)]
    lf: f64,
    /// Correction interval.
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    eode: f64,
    #[arg(long)]
    deltac: f64,
    /// Number of corrections.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    e0: f64,
    #[arg(long, value_enum, default_value = "worst")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instead of the recurrence, run the linear test system of this dimension.
    #[arg(long, value_name = "DIM")]
    certify: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Field file (CPSF).
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    field: Option<PathBuf>,
    /// Dataset directory, with --traj and --step.
    #[arg(long, requires_all = ["traj", "step"])]
    data: Option<PathBuf>,
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, value_enum, default_value = "heat")]
    palette: Palette,
    /// PPM image path.
    #[arg(long)]
    out: PathBuf,
    /// CSV dump path (default: the image path with .csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn resolved(cmd: &str, value: serde_json::Value) {
    eprintln!("cops {cmd}: {value}");
}

fn exec(cli_sequential: bool) -> Exec {
    if cli_sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(ModelConfig::default()),
    }
}

fn generate(a: &GenerateArgs, ex: Exec) -> Result<()> {
    let diffusion = matches!(a.pde, Pde::Diffusion);
    let velocity = match &a.velocity {
        Some(v) => [v[0], v[1]],
        None if diffusion => [0.01, 0.005],
        None => [0.0, 0.0],
    };
    let cfg = DatasetConfig {
        pde: if diffusion { PdeKind::DiffusionAdvection } else { PdeKind::Vorticity },
        trajectories: a.traj,
        height: a.grid,
        width: a.grid,
        channels: 1,
        steps: a.steps,
        dt: a.dt.unwrap_or(if diffusion { 1.0 } else { 0.1 }),
        t_train: a.t_train.unwrap_or((a.steps / 2).max(1)),
        seed: a.seed,
        nu: a.nu.unwrap_or(if diffusion { 0.002 } else { 0.001 }),
        velocity,
        substeps: a.substeps.unwrap_or(if diffusion { 1 } else { 4 }),
        amplitude: a.amplitude,
    };
    resolved("generate", json!({ "dataset": cfg, "seed": cfg.seed, "out": a.out }));
    let ds = make_dataset(&cfg, ex)?;
    ds.save(&a.out)?;
    eprintln!("wrote {} trajectories to {}", ds.trajectories.len(), a.out.display());
    Ok(())
}

fn fit(model: &Model, store: &mut cops_core::params::ParamStore<f32>, ds: &TrajectoryDataset, max_train: Option<usize>, out: &Path, ex: Exec) -> Result<()> {
    let data = TrainData::build(model, &TrainDataSource { dataset: ds, max_train })?;
    let mut log = String::from("epoch,train_loss,val_loss\n");
    let report = train(model, store, &data, ex, |e| {
        eprintln!("epoch {:>4}  train {:.6e}  val {:.6e}", e.epoch, e.train_loss, e.val_loss);
        log.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
    })?;
    save_checkpoint(out, model, store)?;
    files::write_file(&out.join("train_log.csv"), log.as_bytes())?;
    eprintln!("best val {:.6e} at epoch {} (init {:.6e})", report.best_val, report.best_epoch, report.initial_val);
    match report.diverged {
        Some(why) => Err(Error::Numeric(format!("training diverged: {why}; kept the best checkpoint"))),
        None => Ok(()),
    }
}

fn train_cmd(a: &TrainArgs, ex: Exec) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.ratio {
        cfg.observe_ratio = r;
    }
    cfg.validate()?;
    resolved("train", json!({ "model": cfg, "seed": cfg.seed, "data": a.data, "max_train": a.max_train }));
    let ds = TrajectoryDataset::load(&a.data)?;
    let (model, mut store) = Model::init(&cfg, ds.config.channels)?;
    fit(&model, &mut store, &ds, a.max_train, &a.out, ex)
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let (model, store) = load_checkpoint(&a.model)?;
    let obs = files::read_observations(&a.obs)?;
    let queries = files::read_queries(&a.queries)?;
    resolved(
        "predict",
        json!({ "model": model.config, "seed": model.config.seed, "observations": obs.len(), "queries": queries.len() }),
    );
    let pred = model.predict_pairs(&store, &obs, &queries)?;
    if let Some((i, _)) = pred.iter().enumerate().find(|(_, p)| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite prediction at query {i}")));
    }
    let mut s = String::from("t,x,y");
    for c in 0..model.channels {
        s.push_str(&format!(",u{c}"));
    }
    s.push('\n');
    for ((t, [x, y]), p) in queries.iter().zip(&pred) {
        s.push_str(&format!("{t},{x},{y}"));
        for v in p {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    files::write_file(&a.out, s.as_bytes())?;
    if let (Some(t), Some(path)) = (a.field_time, &a.field_out) {
        let n = a.field_size;
        if n == 0 {
            return Err(Error::contract("field size must be positive"));
        }
        let grid: Vec<(f64, [f64; 2])> = (0..n * n)
            .map(|i| {
                let (x, y) = node_coord(i / n, i % n, n, n);
                (t, [x, y])
            })
            .collect();
        let values: Vec<f32> = model.predict_pairs(&store, &obs, &grid)?.into_iter().flatten().map(|v| v as f32).collect();
        let field = FieldFile { height: n, width: n, channels: model.channels, values };
        files::write_file(path, &field.to_bytes())?;
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, ex: Exec) -> Result<()> {
    let (model, store) = load_checkpoint(&a.model)?;
    let ds = TrajectoryDataset::load(&a.data)?;
    let mut protocol = EvalProtocol::standard(
        &ds,
        a.ratio.unwrap_or(model.config.observe_ratio),
        a.seed.unwrap_or(model.config.seed),
    );
    protocol.split = a.split.into();
    protocol.noise = a.noise;
    protocol.noise_seed = a.noise_seed;
    protocol.max_trajectories = a.max_traj;
    resolved("evaluate", json!({ "model": model.config, "protocol": protocol, "seed": protocol.seed }));
    let report = evaluate(&model, &store, &ds, &protocol, ex)?;
    match &a.out {
        Some(p) => files::write_file(p, report.to_csv().as_bytes())?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.curve {
        let mut s = String::from("t,mse,baseline\n");
        for c in &report.curve {
            s.push_str(&format!("{},{:.9e},{:.9e}\n", c.t, c.mse, c.baseline));
        }
        files::write_file(p, s.as_bytes())?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, ex: Exec) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let mut base = read_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let cfg = ablate(&base, variant);
    cfg.validate()?;
    resolved("ablate", json!({ "variant": variant.label(), "model": cfg, "seed": cfg.seed }));
    files::write_file(&a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let Some(data) = &a.data else { return Ok(()) };
    let ds = TrajectoryDataset::load(data)?;
    let (model, mut store) = Model::init(&cfg, ds.config.channels)?;
    fit(&model, &mut store, &ds, a.max_train, &a.out, ex)?;
    let report = evaluate(&model, &store, &ds, &EvalProtocol::standard(&ds, cfg.observe_ratio, cfg.seed), ex)?;
    files::write_file(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn verify_bound_cmd(a: &BoundArgs) -> Result<()> {
    let p = BoundParams { l_f: a.lf, dt_corr: a.dt, kappa: a.kappa, delta_c: a.deltac, e_ode: a.eode, e0: a.e0 };
    p.validate()?;
    let csv = if let Some(dim) = a.certify {
        let mut spec = LinearSystemSpec::new(dim, a.seed);
        spec.steps = a.k;
        spec.l_f = a.lf;
        spec.dt_corr = a.dt;
        spec.kappa = a.kappa;
        spec.delta_c = a.deltac;
        spec.e0 = a.e0;
        resolved("verify-bound", json!({ "certify": spec_json(&spec), "seed": a.seed }));
        let report = certify_on_linear_system(&spec)?;
        eprintln!(
            "verdict {:?}: {}/{} steps within the bound; measured {}; power-iteration L_F {:.6}{}",
            report.verdict,
            report.satisfied(),
            report.rows.len(),
            json!(report.measured),
            report.l_f_estimate,
            report.note.as_deref().map(|n| format!("; {n}")).unwrap_or_default()
        );
        if report.verdict == Verdict::Violated {
            emit(a.out.as_deref(), &report.to_csv())?;
            return Err(Error::Numeric("measured error exceeds the bound".into()));
        }
        report.to_csv()
    } else {
        let mode = match a.mode {
            ModeArg::Worst => RecurrenceMode::WorstCase,
            ModeArg::Sampled => RecurrenceMode::Sampled { seed: a.seed },
        };
        let v = bound_at(a.k, &p)?;
        resolved("verify-bound", json!({ "params": p, "mode": mode, "k": a.k, "seed": a.seed }));
        eprintln!("alpha_eff {:.9} C1 {:.9e} C2 {:.9e}", v.alpha_eff, v.c1, v.c2);
        let seq = simulate_recurrence(a.k, &p, mode)?;
        let rows = seq.iter().enumerate().map(|(k, &e)| bound_at(k, &p).map(|b| (k, e, b.bound))).collect::<Result<Vec<_>>>()?;
        rows_csv(rows.into_iter())
    };
    emit(a.out.as_deref(), &csv)
}

fn spec_json(s: &LinearSystemSpec) -> serde_json::Value {
    json!({
        "dim": s.dim, "seed": s.seed, "steps": s.steps, "l_f": s.l_f, "dt_corr": s.dt_corr,
        "dt_solver": s.dt_solver, "kappa": s.kappa, "delta_c": s.delta_c, "bias": s.bias,
        "noise": s.noise, "e0": s.e0,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => files::write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let field = match (&a.field, &a.data) {
        (Some(path), _) => FieldFile::read(path)?,
        (None, Some(dir)) => {
            let ds = TrajectoryDataset::load(dir)?;
            let (i, k) = (a.traj.unwrap_or(0), a.step.unwrap_or(0));
            let traj = ds.trajectories.get(i).ok_or_else(|| {
                Error::contract(format!("trajectory {i} out of range ({} stored)", ds.trajectories.len()))
            })?;
            let snap = traj
                .snapshots
                .get(k)
                .ok_or_else(|| Error::contract(format!("step {k} out of range ({} stored)", traj.snapshots.len())))?;
            FieldFile {
                height: snap.height,
                width: snap.width,
                channels: snap.channels,
                values: snap.values.iter().map(|&v| v as f32).collect(),
            }
        }
        (None, None) => return Err(Error::contract("render needs --field or --data")),
    };
    if a.channel >= field.channels {
        return Err(Error::contract(format!("channel {} out of range ({} stored)", a.channel, field.channels)));
    }
    let csv_path = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    resolved(
        "render",
        json!({
            "height": field.height, "width": field.width, "channel": a.channel,
            "palette": format!("{:?}", a.palette).to_lowercase(), "out": a.out, "csv": csv_path, "seed": null,
        }),
    );
    let values = field.channel(a.channel);
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numeric(format!("{bad} non-finite values in the field")));
    }
    files::write_file(&a.out, &files::ppm(field.height, field.width, &values, a.palette))?;
    files::write_file(&csv_path, files::field_csv(field.height, field.width, &values).as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let ex = exec(cli.sequential);
    match &cli.command {
        Command::Generate(a) => generate(a, ex),
        Command::Train(a) => train_cmd(a, ex),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a, ex),
        Command::Ablate(a) => ablate_cmd(a, ex),
        Command::VerifyBound(a) => verify_bound_cmd(a),
        Command::Render(a) => render_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
