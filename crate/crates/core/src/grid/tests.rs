use super::*;
use crate::autodiff::grad_check;
use crate::tensor::bits;

fn g4() -> GridSpec {
    GridSpec::new(4, 4).unwrap()
}

#[test]
fn cell_lookup_examples() {
    let a = locate_cell([0.3, 0.7], &g4());
    assert_eq!(a.cell, (2, 1));
    let mut v = a.vertices.to_vec();
    v.sort_unstable();
    let mut want = vec![g4().id(2, 1), g4().id(2, 2), g4().id(3, 1), g4().id(3, 2)];
    want.sort_unstable();
    assert_eq!(v, want);

    assert_eq!(locate_cell([0.25, 0.25], &g4()).cell, (1, 1));

    let w = locate_cell([0.999, 0.999], &g4());
    assert_eq!(w.cell, (3, 3));
    assert_eq!(w.vertices, [g4().id(3, 3), g4().id(3, 0), g4().id(0, 3), g4().id(0, 0)]);
}

#[test]
fn lower_left_offset_stays_inside_the_cell() {
    let g = GridSpec::new(8, 5).unwrap();
    for i in 0..200 {
        let p = [(i as f64 * 0.6180339) % 1.3 - 0.1, (i as f64 * 0.3819660) % 1.7 - 0.4];
        let a = locate_cell(p, &g);
        let o = a.offsets[0];
        assert!(o[0] >= 0.0 && o[0] < 1.0 / 5.0, "{p:?} {o:?}");
        assert!(o[1] >= 0.0 && o[1] < 1.0 / 8.0, "{p:?} {o:?}");
    }
}

#[test]
fn torus_displacement_is_minimal() {
    let d = min_displacement([0.1, 0.5], [0.7, 0.5]);
    assert!((d[0] + 0.4).abs() < 1e-15 && d[1] == 0.0);
    let f = rel_features(d);
    assert!((f[0] + 0.4).abs() < 1e-15);
}

fn phi_store(zero: bool) -> (ParamStore<f64>, Linear) {
    let mut s = ParamStore::new();
    let l = if zero {
        Linear::scaled(&mut s, &mut Init::new(0), "phi", REL_DIM, 5, 0.0).unwrap()
    } else {
        Linear::new(&mut s, &mut Init::new(0), "phi", REL_DIM, 5).unwrap()
    };
    (s, l)
}

#[test]
fn zero_embedding_and_translation_invariance() {
    let (s, l) = phi_store(true);
    let tape = Tape::new();
    let p = s.bind_frozen(&tape);
    let e = relative_position_embedding(&p, &l, &tape, [0.2, 0.3], [0.9, 0.1]).unwrap();
    assert!(e.value().data().iter().all(|&v| v == 0.0));

    let (s, l) = phi_store(false);
    let p = s.bind_frozen(&tape);
    let a = relative_position_embedding(&p, &l, &tape, [0.2, 0.3], [0.45, 0.1]).unwrap().tensor();
    let b = relative_position_embedding(&p, &l, &tape, [0.95, 0.8], [0.2, 0.6]).unwrap().tensor();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let self_pair = relative_position_embedding(&p, &l, &tape, [0.4, 0.4], [0.4, 0.4]).unwrap().tensor();
    let want = constant(&tape, &Tensor::new([1, 6], vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap())
        .affine(&p.get(l.w), &p.get(l.b))
        .unwrap()
        .tensor();
    assert_eq!(self_pair, want);
}

#[test]
fn jump_adjacency_dedupes_wrapped_neighbours() {
    let g = GridSpec::new(8, 8).unwrap();
    let n = jump_neighbors(&g, 4);
    assert_eq!(n[0], vec![g.id(4, 0), g.id(0, 4)]);
    let n1 = jump_neighbors(&g, 1);
    assert_eq!(n1[g.id(3, 3)], vec![g.id(2, 3), g.id(4, 3), g.id(3, 2), g.id(3, 4)]);
}

struct Setup {
    store: ParamStore<f64>,
    mapper: Mapper,
    decoder: Decoder,
}

fn setup(width: usize, seed: u64) -> Setup {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let cfg = MapperConfig::default();
    let mapper = Mapper::new(&mut store, &mut init, "map", &cfg, width).unwrap();
    let decoder = Decoder::new(&mut store, &mut init, "dec", &cfg, width, 2).unwrap();
    Setup { store, mapper, decoder }
}

fn set(store: &mut ParamStore<f64>, name: &str, v: Tensor<f64>) {
    let id = store.id(name).unwrap();
    *store.get_mut(id) = v;
}

fn zero_all(store: &mut ParamStore<f64>, prefix: &str) {
    for n in store.names().to_vec() {
        if n.starts_with(prefix) {
            let id = store.id(&n).unwrap();
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
    }
}

fn encode(s: &Setup, grid: &GridSpec, coords: &[[f64; 2]], h: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let p = s.store.bind_frozen(&tape);
    let att = Attachment::build(grid, coords, h.data()).unwrap();
    let nb = GridNeighbors::new(grid).unwrap();
    s.mapper.encode(&p, &tape.constant(h.clone()), &att, &nb).unwrap().tensor()
}

fn point_states(n: usize, width: usize, seed: u64) -> Tensor<f64> {
    let mut init = Init::new(seed);
    init.uniform(&[n, width], 1.0)
}

#[test]
fn single_edge_round_copies_the_point_state() {
    let width = 3;
    let mut s = setup(width, 1);
    zero_all(&mut s.store, "map.");
    set(&mut s.store, "map.default", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
    set(&mut s.store, "map.round0.w", Tensor::eye(3));
    let grid = GridSpec::new(2, 2).unwrap();
    let edges = [Edge { point: 0, vertex: 3, slot: 0, delta: [0.1, 0.2] }];
    let att = Attachment::from_edges(&grid, 1, &edges, |_| vec![]).unwrap();
    assert_eq!(att.coverage, vec![false, false, false, true]);
    let tape = Tape::new();
    let p = s.store.bind_frozen(&tape);
    let hp = Tensor::new([1, 3], vec![4.0, 5.0, 6.0]).unwrap();
    let mut one_round = s.mapper.clone();
    one_round.rounds.truncate(1);
    let z = one_round
        .encode(&p, &tape.constant(hp), &att, &GridNeighbors::new(&grid).unwrap())
        .unwrap()
        .tensor();
    assert_eq!(z.row(3), &[4.0, 5.0, 6.0]);
    assert_eq!(z.row(0), &[0.5, -1.0, 2.0]);
}

#[test]
fn zero_maps_keep_the_default_vector() {
    let mut s = setup(4, 2);
    zero_all(&mut s.store, "map.round");
    let grid = GridSpec::new(4, 4).unwrap();
    let coords = [[0.1, 0.2], [0.6, 0.7], [0.33, 0.9]];
    let z = encode(&s, &grid, &coords, &point_states(3, 4, 0));
    let d = s.store.by_name("map.default").unwrap().data().to_vec();
    for v in 0..16 {
        assert_eq!(z.row(v), d.as_slice());
    }
}

#[test]
fn encoding_is_permutation_invariant() {
    let s = setup(5, 3);
    let grid = GridSpec::new(4, 6).unwrap();
    let n = 9;
    let coords: Vec<[f64; 2]> = (0..n).map(|i| [(i as f64 * 0.37) % 1.0, (i as f64 * 0.71) % 1.0]).collect();
    let h = point_states(n, 5, 4);
    let a = encode(&s, &grid, &coords, &h);
    let perm = [4, 8, 0, 2, 7, 1, 6, 3, 5];
    let pc: Vec<[f64; 2]> = perm.iter().map(|&i| coords[i]).collect();
    let ph = Tensor::from_fn([n, 5], |k| h.data()[perm[k / 5] * 5 + k % 5]);
    let b = encode(&s, &grid, &pc, &ph);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn one_cell_shift_cyclically_shifts_the_grid() {
    let s = setup(4, 5);
    let grid = GridSpec::new(8, 8).unwrap();
    let coords: Vec<[f64; 2]> = (0..12).map(|i| [((i * 37) % 64) as f64 / 64.0, ((i * 21) % 64) as f64 / 64.0]).collect();
    let h = point_states(12, 4, 6);
    let a = encode(&s, &grid, &coords, &h);
    let moved: Vec<[f64; 2]> = coords.iter().map(|c| [c[0] + 1.0 / 8.0, c[1]]).collect();
    let b = encode(&s, &grid, &moved, &h);
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(a.row(grid.id(r, c)), b.row(grid.id(r, c + 1)));
        }
    }
}

fn decode(s: &Setup, grid: &GridSpec, z: &Tensor<f64>, q: &[[f64; 2]]) -> Tensor<f64> {
    let tape = Tape::new();
    let p = s.store.bind_frozen(&tape);
    let qv = tape.constant(Tensor::new([q.len(), 2], q.iter().flatten().copied().collect()).unwrap());
    let prep = s.decoder.prepare(&p, &s.mapper.phi, grid, &qv).unwrap();
    s.decoder.decode(&p, &prep, &tape.constant(z.clone())).unwrap().tensor()
}

#[test]
fn zero_mlp_returns_its_bias() {
    let mut s = setup(4, 7);
    zero_all(&mut s.store, "dec.out.w");
    set(&mut s.store, "dec.out.b", Tensor::new([2], vec![0.25, -3.0]).unwrap());
    let grid = GridSpec::new(4, 4).unwrap();
    let out = decode(&s, &grid, &point_states(16, 4, 1), &[[0.3, 0.4], [0.9, 0.05]]);
    assert_eq!(out.data(), &[0.25, -3.0, 0.25, -3.0]);
}

#[test]
fn same_coordinate_same_prediction() {
    let s = setup(4, 8);
    let grid = GridSpec::new(4, 4).unwrap();
    let out = decode(&s, &grid, &point_states(16, 4, 2), &[[0.3, 0.4], [0.7, 0.1], [0.3, 0.4]]);
    assert_eq!(out.row(0), out.row(2));
}

#[test]
fn decoder_is_smooth_in_the_query() {
    let s = setup(4, 9);
    let grid = GridSpec::new(4, 4).unwrap();
    let z = point_states(16, 4, 3);
    let q = Tensor::new([3, 2], vec![0.3, 0.4, 0.61, 0.13, 0.86, 0.77]).unwrap();
    let report = grad_check(
        |tape, v| {
            let p = s.store.bind_frozen(tape);
            let prep = s.decoder.prepare(&p, &s.mapper.phi, &grid, &v[0])?;
            s.decoder.decode(&p, &prep, &tape.constant(z.clone()))?.square()?.sum()
        },
        &[q],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encode_decode_parameter_gradients() {
    let s = setup(3, 10);
    let grid = GridSpec::new(4, 4).unwrap();
    let coords = [[0.1, 0.2], [0.6, 0.7], [0.33, 0.9], [0.8, 0.15]];
    let h = point_states(4, 3, 11);
    let att = Attachment::build(&grid, &coords, h.data()).unwrap();
    let nb = GridNeighbors::new(&grid).unwrap();
    let report = grad_check(
        |tape, v| {
            let p = Bound::from_vars(v.to_vec());
            let z = s.mapper.encode(&p, &tape.constant(h.clone()), &att, &nb)?;
            let q = tape.constant(Tensor::new([2, 2], vec![0.45, 0.5, 0.05, 0.95])?);
            let prep = s.decoder.prepare(&p, &s.mapper.phi, &grid, &q)?;
            s.decoder.decode(&p, &prep, &z)?.square()?.sum()
        },
        s.store.tensors(),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn empty_point_set_is_rejected() {
    assert!(matches!(Attachment::build(&g4(), &[], &[]), Err(Error::Contract(_))));
}
