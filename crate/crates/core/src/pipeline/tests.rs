use super::*;
use crate::autodiff::Tape;
use crate::dynamics::{
    make_dataset, simulate_diffusion_advection, DatasetConfig, FieldSnapshot, PdeKind, Split, TrajectoryDataset,
};
use crate::exec::Exec;
use crate::ode::solve_calls;
use crate::tensor::bits;

fn tiny() -> ModelConfig {
    ModelConfig {
        grid: GridSpec { height: 4, width: 4 },
        width: 8,
        encoder: EncoderConfig { layers: 2, ..EncoderConfig::default() },
        mapper: MapperConfig { encode_rounds: 1, decode_rounds: 1 },
        ode: OdeConfig { scales: 2, layers: 1, ..OdeConfig::default() },
        dt_solver: 0.5,
        epochs: 2,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

fn field(seed: u64) -> FieldSnapshot {
    let s = seed as f64;
    FieldSnapshot::from_fn(8, 8, 1, |x, y| vec![(6.283 * (x + s * 0.1)).sin() * (6.283 * y).cos() + 0.1 * s]).unwrap()
}

fn obs(seed: u64) -> Observations {
    subsample(&field(seed), 0.5, seed).unwrap().0
}

fn grid_coords(n: usize) -> Tensor<f64> {
    Tensor::new([n * n, 2], (0..n * n).flat_map(|i| [(i / n) as f64 / n as f64, (i % n) as f64 / n as f64]).collect())
        .unwrap()
}

fn predict_values(model: &Model, store: &ParamStore<f32>, o: &Observations, times: &[f64]) -> Vec<Vec<f32>> {
    let input = model.prepare(o).unwrap();
    let tape = Tape::<f32>::new();
    let p = store.bind_frozen(&tape);
    model
        .predict(&p, &input, times, &grid_coords(4))
        .unwrap()
        .iter()
        .map(|v| v.value().data().to_vec())
        .collect()
}

fn raw(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn tiny_dataset() -> TrajectoryDataset {
    let cfg = DatasetConfig {
        pde: PdeKind::DiffusionAdvection,
        trajectories: 10,
        height: 8,
        width: 8,
        channels: 1,
        steps: 4,
        dt: 1.0,
        t_train: 2,
        seed: 3,
        nu: 0.005,
        velocity: [0.02, 0.01],
        substeps: 1,
        amplitude: 1.0,
    };
    make_dataset(&cfg, Exec::Sequential).unwrap()
}

#[test]
fn config_rejects_unknown_keys_and_bad_steps() {
    let good = serde_json::to_string(&tiny()).unwrap();
    assert_eq!(ModelConfig::from_json(&good).unwrap(), tiny());
    let extra = good.replacen('{', "{\"lambada\":0.5,", 1);
    assert!(ModelConfig::from_json(&extra).is_err());
    let mut c = tiny();
    c.dt_solver = 0.3;
    assert!(matches!(c.validate(), Err(Error::Contract(_))));
    c.dt_solver = 0.25;
    c.lambda = 1.5;
    assert!(matches!(c.validate(), Err(Error::Contract(_))));
}

#[test]
fn minimal_json_takes_defaults() {
    let c = ModelConfig::from_json(r#"{"grid":{"height":8,"width":8},"width":16}"#).unwrap();
    assert_eq!(c, ModelConfig::default());
}

#[test]
fn variant_names_parse_leniently() {
    for (s, v) in [("w/o MFN", Variant::WoMfn), ("wo-mgo", Variant::WoMgo), ("no_nac", Variant::WoNac), ("MFN", Variant::WoMfn)] {
        assert_eq!(s.parse::<Variant>().unwrap(), v);
    }
    assert!("attention".parse::<Variant>().is_err());
    for v in Variant::ALL {
        assert_eq!(v.label().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn ablations_change_only_their_part() {
    let base = tiny();
    let a = ablate(&base, Variant::WoMfn);
    assert_eq!(a.encoder.kind, EncoderKind::Mlp);
    assert_eq!(ModelConfig { encoder: base.encoder.clone(), ..a }, base);
    let b = ablate(&base, Variant::WoMgo);
    assert_eq!((b.ode.kind, b.ode.scales, b.ode.layers), (DynamicsKind::Residual, 1, 1));
    assert_eq!(ModelConfig { ode: base.ode.clone(), ..b }, base);
    let c = ablate(&base, Variant::WoNac);
    assert!(!c.corrector && c.lambda == 0.0);
    let (m, _) = Model::init(&c, 1).unwrap();
    assert!(!m.has_corrector());
}

#[test]
fn unchanged_groups_keep_their_initial_values() {
    let (_, full) = Model::init(&tiny(), 1).unwrap();
    let (_, wo) = Model::init(&ablate(&tiny(), Variant::WoNac), 1).unwrap();
    for (name, t) in wo.iter() {
        assert_eq!(full.by_name(name).unwrap(), t, "{name}");
    }
}

#[test]
fn forward_is_deterministic() {
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let o = obs(1);
    let a = predict_values(&model, &store, &o, &[1.0, 2.5]);
    let b = predict_values(&model, &store, &o, &[1.0, 2.5]);
    assert_eq!(a, b);
    let (model2, store2) = Model::init(&tiny(), 1).unwrap();
    assert_eq!(a, predict_values(&model2, &store2, &o, &[1.0, 2.5]));
}

#[test]
fn extra_query_times_do_not_change_a_prediction() {
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let o = obs(2);
    let alone = predict_values(&model, &store, &o, &[1.5]);
    let with = predict_values(&model, &store, &o, &[1.0, 1.5]);
    assert_eq!(raw(&alone[0]), raw(&with[1]));
    let many = predict_values(&model, &store, &o, &[0.25, 1.0, 1.5, 3.0]);
    assert_eq!(raw(&alone[0]), raw(&many[2]));
}

#[test]
fn zero_lambda_matches_no_corrector() {
    let mut zero = tiny();
    zero.lambda = 0.0;
    let (with, store) = Model::init(&zero, 1).unwrap();
    assert!(with.has_corrector());
    let mut none_cfg = zero.clone();
    none_cfg.corrector = false;
    let (without, store2) = Model::init(&none_cfg, 1).unwrap();
    let o = obs(3);
    assert_eq!(
        predict_values(&with, &store, &o, &[1.0, 2.0, 2.5]),
        predict_values(&without, &store2, &o, &[1.0, 2.0, 2.5])
    );
}

#[test]
fn residual_dynamics_never_calls_the_solver() {
    let o = obs(4);
    let (ode, s1) = Model::init(&tiny(), 1).unwrap();
    let before = solve_calls();
    predict_values(&ode, &s1, &o, &[3.0]);
    assert_eq!(solve_calls() - before, 3);
    let (res, s2) = Model::init(&ablate(&tiny(), Variant::WoMgo), 1).unwrap();
    let before = solve_calls();
    let out = predict_values(&res, &s2, &o, &[0.5, 3.0]);
    assert_eq!(solve_calls(), before);
    assert!(out.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn rollout_reports_legs_and_rejects_negative_time() {
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let input = model.prepare(&obs(5)).unwrap();
    let tape = Tape::<f32>::new();
    let p = store.bind_frozen(&tape);
    let z0 = model.encode(&p, &input).unwrap();
    let r = model.rollout(&p, &z0, &[0.0, 2.0, 0.5]).unwrap();
    assert_eq!(r.solver_calls, 2);
    let ts: Vec<f64> = r.latents.iter().map(|l| l.0).collect();
    assert_eq!(ts, vec![0.0, 0.5, 2.0]);
    assert_eq!(r.at(0.0).unwrap().value(), z0.value());
    assert!(matches!(model.rollout(&p, &z0, &[1.0, -0.5]), Err(Error::Contract(_))));
}

#[test]
fn channel_mismatch_is_rejected() {
    let (model, _) = Model::init(&tiny(), 2).unwrap();
    assert!(model.prepare(&obs(1)).is_err());
}

/// Central differences on a few entries of every parameter tensor.
fn sampled_grad_check(model: &Model, store: &ParamStore<f64>, sample: &TrainSample, times: &[f64]) -> f64 {
    let loss_of = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        sample_loss(model, &p, times, sample).unwrap().value().item()
    };
    let tape = Tape::new();
    let p = store.bind(&tape);
    let loss = sample_loss(model, &p, times, sample).unwrap();
    let grads = p.grads(&tape.backward(loss).unwrap());
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (k, g) in grads.iter().enumerate() {
        let n = g.len();
        for j in [0, n / 2, n - 1] {
            let orig = store.tensors()[k].data()[j];
            probe.tensors_mut()[k].data_mut()[j] = orig + h;
            let up = loss_of(&probe);
            probe.tensors_mut()[k].data_mut()[j] = orig - h;
            let down = loss_of(&probe);
            probe.tensors_mut()[k].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "{} [{j}]: analytic {a} vs numeric {fd}", store.names()[k]);
            worst = worst.max(rel);
        }
    }
    worst
}

fn micro_sample(model: &Model) -> TrainSample {
    let f = field(6);
    let (o, _) = subsample(&f, 0.5, 6).unwrap();
    let later = field(7);
    let pts = [o.nodes[0], o.nodes[o.len() - 1]];
    let coords: Vec<f64> = pts.iter().flat_map(|&i| [f.coord(i / 8, i % 8).0, f.coord(i / 8, i % 8).1]).collect();
    let target = |s: f64| Tensor::new([2, 1], pts.iter().map(|&i| later.values[i] * s).collect()).unwrap();
    TrainSample {
        index: 0,
        input: model.prepare(&o).unwrap(),
        coords: Tensor::new([2, 2], coords).unwrap(),
        targets: vec![target(1.0), target(0.9), target(0.8)],
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&tiny(), 1, &mut store).unwrap();
    let sample = micro_sample(&model);
    sampled_grad_check(&model, &store, &sample, &[0.5, 1.0, 2.0]);
}

#[test]
fn residual_variant_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&ablate(&tiny(), Variant::WoMgo), 1, &mut store).unwrap();
    let sample = micro_sample(&model);
    sampled_grad_check(&model, &store, &sample, &[0.5, 1.0, 2.0]);
}

#[test]
fn zero_epochs_leave_parameters_alone() {
    let data = tiny_dataset();
    let mut cfg = tiny();
    cfg.epochs = 0;
    let (model, mut store) = Model::init(&cfg, 1).unwrap();
    let before = store.clone();
    let td = TrainData::build(&model, &TrainDataSource { dataset: &data, max_train: None }).unwrap();
    let report = train(&model, &mut store, &td, Exec::Sequential, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.best_epoch, 0);
    for (a, b) in store.tensors().iter().zip(before.tensors()) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn training_is_reproducible_and_keeps_the_best_epoch() {
    let data = tiny_dataset();
    let run = || {
        let (model, mut store) = Model::init(&tiny(), 1).unwrap();
        let td = TrainData::build(&model, &TrainDataSource { dataset: &data, max_train: Some(4) }).unwrap();
        let report = train(&model, &mut store, &td, Exec::Sequential, |_| {}).unwrap();
        let val = mean_loss(&model, &store, &td.times, &td.val, Exec::Sequential).unwrap();
        (report, store, val)
    };
    let (r1, s1, v1) = run();
    let (r2, s2, _) = run();
    assert_eq!(format!("{:?}", r1.epochs), format!("{:?}", r2.epochs));
    for (a, b) in s1.tensors().iter().zip(s2.tensors()) {
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(r1.epochs.len(), 3);
    assert_eq!(v1, r1.best_val);
    assert!(r1.epochs.iter().all(|e| e.val_loss >= r1.best_val));
}

#[test]
fn parallel_and_sequential_training_agree() {
    let data = tiny_dataset();
    let run = |exec| {
        let (model, mut store) = Model::init(&tiny(), 1).unwrap();
        let td = TrainData::build(&model, &TrainDataSource { dataset: &data, max_train: Some(4) }).unwrap();
        train(&model, &mut store, &td, exec, |_| {}).unwrap();
        store
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn train_targets_use_the_shared_masks() {
    let data = tiny_dataset();
    let (model, _) = Model::init(&tiny(), 1).unwrap();
    let td = TrainData::build(&model, &TrainDataSource { dataset: &data, max_train: None }).unwrap();
    assert_eq!(td.train.len(), 7);
    assert_eq!(td.val.len(), 2);
    assert_eq!(td.times, vec![1.0, 2.0]);
    let s = &td.train[0];
    let (o, _) = subsample(data.trajectories[s.index].initial(), 0.5, observation_seed(0, s.index)).unwrap();
    assert_eq!(s.input.points(), o.len());
    assert_eq!(s.targets[1].data(), &o.values_from(&data.trajectories[s.index].snapshots[2])[..]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    save_checkpoint(dir.path(), &model, &store).unwrap();
    let (back, loaded) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(store.names(), loaded.names());
    for (a, b) in store.tensors().iter().zip(loaded.tensors()) {
        assert_eq!(bits(a), bits(b));
    }
    let o = obs(8);
    assert_eq!(predict_values(&model, &store, &o, &[1.5]), predict_values(&back, &loaded, &o, &[1.5]));
}

#[test]
fn checkpoint_with_foreign_parameters_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = Model::init(&tiny(), 1).unwrap();
    let (_, other) = Model::init(&ablate(&tiny(), Variant::WoNac), 1).unwrap();
    save_checkpoint(dir.path(), &model, &other).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn persistence_of_a_decaying_mode_matches_closed_form() {
    let (a, nu, kx) = (0.7, 0.01, 1.0);
    let ic = FieldSnapshot::from_fn(16, 16, 1, |x, _| vec![a * (2.0 * std::f64::consts::PI * kx * x).cos()]).unwrap();
    let traj = simulate_diffusion_advection(&ic, nu, [0.0, 0.0], 0.5, 8).unwrap();
    let lam = nu * (2.0 * std::f64::consts::PI * kx).powi(2);
    let curve = persistence_mse(&traj);
    assert_eq!(curve.len(), 8);
    for (k, &m) in curve.iter().enumerate() {
        let t = 0.5 * (k + 1) as f64;
        let want = a * a * (1.0 - (-lam * t).exp()).powi(2) / 2.0;
        assert!((m - want).abs() < 1e-12 * (1.0 + want), "t={t}: {m} vs {want}");
    }
    assert!(curve.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn evaluation_covers_every_tag_and_partitions_space() {
    let data = tiny_dataset();
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let protocol = EvalProtocol::standard(&data, 0.5, 0);
    assert_eq!(protocol.tags.len(), 6);
    let r = evaluate(&model, &store, &data, &protocol, Exec::Sequential).unwrap();
    assert_eq!(r.trajectories, 1);
    let ins = r.get(SpaceTag::InS, TimeTag::InT).unwrap();
    let ext = r.get(SpaceTag::ExtS, TimeTag::InT).unwrap();
    assert_eq!((ins.entries, ext.entries), (64, 64));
    assert_eq!(r.get(SpaceTag::InS, TimeTag::ExtT).unwrap().steps, 2);
    assert_eq!(r.get(SpaceTag::InS, TimeTag::ConT).unwrap().steps, 2);
    // curve: t = 0.5, 1, 1.5, 2, 3, 4
    assert_eq!(r.curve.len(), 6);
    let (_, traj) = data.split(Split::Test).next().unwrap();
    let base = persistence_mse(traj);
    for c in r.curve.iter().filter(|c| c.t.fract() == 0.0) {
        assert!((c.baseline - base[c.t as usize - 1]).abs() < 1e-12);
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("tag,mse,steps\nIn-s/In-t,"));
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.contains("persistence:Ext-s/Con-t,"));
}

#[test]
fn noisy_evaluation_is_seeded_and_noise_free_baseline_is_unchanged() {
    let data = tiny_dataset();
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let clean = evaluate(&model, &store, &data, &EvalProtocol::standard(&data, 0.5, 0), Exec::Sequential).unwrap();
    let noisy_p = EvalProtocol { noise: 0.1, noise_seed: 4, ..EvalProtocol::standard(&data, 0.5, 0) };
    let a = evaluate(&model, &store, &data, &noisy_p, Exec::Sequential).unwrap();
    let b = evaluate(&model, &store, &data, &noisy_p, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.tags[0].mse, clean.tags[0].mse);
    assert_eq!(a.tags[0].baseline, clean.tags[0].baseline);
}

#[test]
fn missing_ground_truth_is_a_contract_error() {
    let data = tiny_dataset();
    let (model, store) = Model::init(&tiny(), 1).unwrap();
    let mut p = EvalProtocol::standard(&data, 1.0, 0);
    assert!(p.tags.iter().all(|t| t.0 == SpaceTag::InS));
    p.tags.push((SpaceTag::ExtS, TimeTag::InT));
    assert!(matches!(evaluate(&model, &store, &data, &p, Exec::Sequential), Err(Error::Contract(_))));
}
