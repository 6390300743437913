//! Customized uniform grid: point attachment, relative-position message
//! passing from points onto vertices, and query decoding.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{Error, Result};
use crate::mfn::GaborLayer;
use crate::nn::{constant, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const REL_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let g = GridSpec { height, width };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::contract(format!("grid must be at least 2x2, got {}x{}", self.height, self.width)));
        }
        Ok(())
    }

    pub fn vertices(&self) -> usize {
        self.height * self.width
    }

    pub fn id(&self, r: usize, c: usize) -> usize {
        (r % self.height) * self.width + c % self.width
    }

    /// Vertex `(r, c)` sits at `(c/W, r/H)`.
    pub fn vertex_coord(&self, r: usize, c: usize) -> [f64; 2] {
        [c as f64 / self.width as f64, r as f64 / self.height as f64]
    }
}

/// A point's cell and its four corners, in slot order
/// `(r,c), (r,c+1), (r+1,c), (r+1,c+1)`, with `x_point − x_vertex` offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct PointAttachment {
    pub cell: (usize, usize),
    pub vertices: [usize; 4],
    pub offsets: [[f64; 2]; 4],
}

fn axis(p: f64, n: usize) -> (usize, f64) {
    let g = p.rem_euclid(1.0) * n as f64;
    let i = g.floor();
    if i as usize >= n {
        (0, 0.0)
    } else {
        (i as usize, g - i)
    }
}

/// Floor convention: a point on a vertex or edge belongs to the cell whose
/// lower-left corner it is closest to; coordinates wrap onto the torus.
pub fn locate_cell(p: [f64; 2], grid: &GridSpec) -> PointAttachment {
    let (c, fx) = axis(p[0], grid.width);
    let (r, fy) = axis(p[1], grid.height);
    let mut vertices = [0; 4];
    let mut offsets = [[0.0; 2]; 4];
    for (slot, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        vertices[slot] = grid.id(r + dy, c + dx);
        offsets[slot] = [
            (fx - dx as f64) / grid.width as f64,
            (fy - dy as f64) / grid.height as f64,
        ];
    }
    PointAttachment { cell: (r, c), vertices, offsets }
}

/// Minimal periodic displacement `b − a`, each axis in `[-0.5, 0.5)`.
pub fn min_displacement(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let w = |d: f64| d - (d + 0.5).floor();
    [w(b[0] - a[0]), w(b[1] - a[1])]
}

pub fn rel_features(d: [f64; 2]) -> [f64; REL_DIM] {
    let (sx, cx) = (2.0 * PI * d[0]).sin_cos();
    let (sy, cy) = (2.0 * PI * d[1]).sin_cos();
    [d[0], d[1], sx, cx, sy, cy]
}

/// `φ(x_i, x_j)` as a `[1, C]` variable.
pub fn relative_position_embedding<'t, T: Real>(
    p: &Bound<'t, T>,
    phi: &Linear,
    tape: &'t Tape<T>,
    xi: [f64; 2],
    xj: [f64; 2],
) -> Result<Var<'t, T>> {
    let f = rel_features(min_displacement(xi, xj));
    let fv = constant(tape, &Tensor::new([1, REL_DIM], f.to_vec())?);
    phi.apply(p, &fv)
}

/// Neighbours of every vertex at `stride` in order up, down, left, right,
/// with wrap duplicates removed (first occurrence kept).
pub fn jump_neighbors(grid: &GridSpec, stride: usize) -> Vec<Vec<usize>> {
    let (h, w) = (grid.height, grid.width);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let cand = [
                grid.id(r + h - stride % h, c),
                grid.id(r + stride, c),
                grid.id(r, c + w - stride % w),
                grid.id(r, c + stride),
            ];
            let mut list: Vec<usize> = Vec::with_capacity(4);
            for v in cand {
                if !list.contains(&v) && v != r * w + c {
                    list.push(v);
                }
            }
            out.push(list);
        }
    }
    out
}

/// One directed point–vertex edge with `delta = x_point − x_vertex`.
#[derive(Clone, Debug)]
pub struct Edge {
    pub point: usize,
    pub vertex: usize,
    pub slot: u8,
    pub delta: [f64; 2],
}

/// Bipartite point–vertex graph as fixed sparse operators.
#[derive(Clone, Debug)]
pub struct Attachment {
    pub grid: GridSpec,
    pub points: usize,
    /// `[V, N]`: sums point states into vertices in a canonical order.
    pub p2v: Arc<RowMix>,
    /// `[N, V]`: sums each point's corner vertices.
    pub v2p: Arc<RowMix>,
    pub deg_v: Tensor<f64>,
    pub deg_p: Tensor<f64>,
    /// Summed relative features of incoming edges, `Δ = x_point − x_vertex`.
    pub feat_v: Tensor<f64>,
    /// Summed relative features seen from the point, `Δ = x_vertex − x_point`.
    pub feat_p: Tensor<f64>,
    pub coverage: Vec<bool>,
}

impl Attachment {
    /// Attaches every point to its cell corners. `values` (row-major, any
    /// width) only break ties in the per-vertex edge order, which makes the
    /// vertex sums independent of input order.
    pub fn build(grid: &GridSpec, coords: &[[f64; 2]], values: &[f64]) -> Result<Self> {
        grid.validate()?;
        let n = coords.len();
        if n == 0 {
            return Err(Error::contract("no points to attach"));
        }
        let width = if values.is_empty() { 0 } else { values.len() / n };
        if width * n != values.len() {
            return Err(Error::shape("Attachment::build", format!("{} values for {n} points", values.len())));
        }
        let mut edges = Vec::with_capacity(4 * n);
        for (i, &p) in coords.iter().enumerate() {
            let a = locate_cell(p, grid);
            for slot in 0..4 {
                edges.push(Edge { point: i, vertex: a.vertices[slot], slot: slot as u8, delta: a.offsets[slot] });
            }
        }
        let key = |e: &Edge| -> Vec<u64> {
            let mut k = vec![e.slot as u64, e.delta[0].to_bits(), e.delta[1].to_bits()];
            k.extend(values[e.point * width..(e.point + 1) * width].iter().map(|v| v.to_bits()));
            k
        };
        Self::from_edges(grid, n, &edges, key)
    }

    /// General constructor; incoming edges of each vertex are summed in
    /// ascending `key` order.
    pub fn from_edges(grid: &GridSpec, points: usize, edges: &[Edge], key: impl Fn(&Edge) -> Vec<u64>) -> Result<Self> {
        let nv = grid.vertices();
        let mut incoming: Vec<Vec<(Vec<u64>, &Edge)>> = vec![Vec::new(); nv];
        let mut outgoing: Vec<Vec<&Edge>> = vec![Vec::new(); points];
        for e in edges {
            if e.vertex >= nv || e.point >= points {
                return Err(Error::shape("Attachment", format!("edge {e:?} out of range")));
            }
            incoming[e.vertex].push((key(e), e));
            outgoing[e.point].push(e);
        }
        let mut p2v_rows = Vec::with_capacity(nv);
        let mut feat_v = vec![0.0; nv * REL_DIM];
        let mut deg_v = vec![0.0; nv];
        for (v, list) in incoming.iter_mut().enumerate() {
            list.sort_by(|a, b| a.0.cmp(&b.0));
            deg_v[v] = list.len() as f64;
            let mut row = Vec::with_capacity(list.len());
            for (_, e) in list.iter() {
                row.push((e.point, 1.0));
                for (acc, f) in feat_v[v * REL_DIM..(v + 1) * REL_DIM].iter_mut().zip(rel_features(e.delta)) {
                    *acc += f;
                }
            }
            p2v_rows.push(row);
        }
        let mut v2p_rows = Vec::with_capacity(points);
        let mut feat_p = vec![0.0; points * REL_DIM];
        let mut deg_p = vec![0.0; points];
        for (i, list) in outgoing.iter().enumerate() {
            deg_p[i] = list.len() as f64;
            v2p_rows.push(list.iter().map(|e| (e.vertex, 1.0)).collect());
            for e in list {
                let f = rel_features([-e.delta[0], -e.delta[1]]);
                for (acc, f) in feat_p[i * REL_DIM..(i + 1) * REL_DIM].iter_mut().zip(f) {
                    *acc += f;
                }
            }
        }
        Ok(Attachment {
            grid: *grid,
            points,
            p2v: Arc::new(RowMix::from_rows(points, &p2v_rows)?),
            v2p: Arc::new(RowMix::from_rows(nv, &v2p_rows)?),
            coverage: deg_v.iter().map(|&d| d > 0.0).collect(),
            deg_v: Tensor::new([nv, 1], deg_v)?,
            deg_p: Tensor::new([points, 1], deg_p)?,
            feat_v: Tensor::new([nv, REL_DIM], feat_v)?,
            feat_p: Tensor::new([points, REL_DIM], feat_p)?,
        })
    }
}

/// Vertex-to-vertex edges at stride 1, used from the second encoding round.
pub struct GridNeighbors {
    pub sum: Arc<RowMix>,
    pub deg: Tensor<f64>,
    pub feat: Tensor<f64>,
}

impl GridNeighbors {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        let lists = jump_neighbors(grid, 1);
        let nv = grid.vertices();
        let mut feat = vec![0.0; nv * REL_DIM];
        let mut rows = Vec::with_capacity(nv);
        for (v, list) in lists.iter().enumerate() {
            let xv = grid.vertex_coord(v / grid.width, v % grid.width);
            for &u in list {
                let xu = grid.vertex_coord(u / grid.width, u % grid.width);
                for (acc, f) in feat[v * REL_DIM..(v + 1) * REL_DIM].iter_mut().zip(rel_features(min_displacement(xv, xu))) {
                    *acc += f;
                }
            }
            rows.push(list.iter().map(|&u| (u, 1.0)).collect::<Vec<_>>());
        }
        Ok(GridNeighbors {
            sum: Arc::new(RowMix::from_rows(nv, &rows)?),
            deg: Tensor::new([nv, 1], lists.iter().map(|l| l.len() as f64).collect())?,
            feat: Tensor::new([nv, REL_DIM], feat)?,
        })
    }
}

fn default_rounds() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    #[serde(default = "default_rounds")]
    pub encode_rounds: usize,
    #[serde(default = "default_rounds")]
    pub decode_rounds: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig { encode_rounds: 2, decode_rounds: 2 }
    }
}

/// Sum of `(h_j − h_i + φ_ij)` over neighbours, written with precomputed
/// degree and feature sums: `Σh_j − deg·h_i + F·W_φ + deg·b_φ`.
fn message<'t, T: Real>(
    p: &Bound<'t, T>,
    phi: &Linear,
    src_sum: &Var<'t, T>,
    h: &Var<'t, T>,
    deg: &Var<'t, T>,
    feat: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let rel = feat.matmul(&p.get(phi.w))?.add(&deg.mul(&p.get(phi.b))?)?;
    src_sum.sub(&deg.mul(h)?)?.add(&rel)
}

#[derive(Clone, Debug)]
pub struct Mapper {
    pub default: ParamId,
    pub phi: Linear,
    pub rounds: Vec<Linear>,
    pub width: usize,
}

impl Mapper {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &MapperConfig, width: usize) -> Result<Self> {
        if cfg.encode_rounds == 0 {
            return Err(Error::contract("encoder needs at least one message-passing round"));
        }
        let bound = 1.0 / (width as f64).sqrt();
        let default = store.add(format!("{name}.default"), init.uniform(&[width], bound))?;
        let phi = Linear::new(store, init, &format!("{name}.phi"), REL_DIM, width)?;
        let rounds = (0..cfg.encode_rounds)
            .map(|k| Linear::scaled(store, init, &format!("{name}.round{k}"), width, width, 0.5))
            .collect::<Result<_>>()?;
        Ok(Mapper { default, phi, rounds, width })
    }

    /// Point states `[N, C]` → vertex states `[V, C]`.
    pub fn encode<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        points: &Var<'t, T>,
        att: &Attachment,
        nbrs: &GridNeighbors,
    ) -> Result<Var<'t, T>> {
        let tape = points.tape();
        let nv = att.grid.vertices();
        let mut hv = constant(tape, &Tensor::zeros([nv, self.width])).add(&p.get(self.default))?;
        let mut hp = *points;
        let deg_p = constant(tape, &att.deg_p);
        let feat_p = constant(tape, &att.feat_p);
        let bip = (constant(tape, &att.deg_v), constant(tape, &att.feat_v));
        let mask = constant(tape, &att.deg_v.map(|d| if d > 0.0 { 1.0 } else { 0.0 }));
        let full = (
            constant(tape, &Tensor::from_fn([nv, 1], |i| att.deg_v.data()[i] + nbrs.deg.data()[i])),
            constant(tape, &Tensor::from_fn([nv, REL_DIM], |i| att.feat_v.data()[i] + nbrs.feat.data()[i])),
        );
        let full_mask = constant(tape, &Tensor::from_fn([nv, 1], |i| {
            if att.deg_v.data()[i] + nbrs.deg.data()[i] > 0.0 { 1.0 } else { 0.0 }
        }));
        let last = self.rounds.len() - 1;
        for (k, lin) in self.rounds.iter().enumerate() {
            let (w, b) = (p.get(lin.w), p.get(lin.b));
            let from_points = hp.mix_rows(&att.p2v)?;
            let (sum, (deg, feat), m) = if k == 0 {
                (from_points, &bip, &mask)
            } else {
                (from_points.add(&hv.mix_rows(&nbrs.sum)?)?, &full, &full_mask)
            };
            let mv = message(p, &self.phi, &sum, &hv, deg, feat)?;
            let hv_next = hv.add(&mv.matmul(&w)?)?.add(&m.mul(&b)?)?;
            if k < last {
                let mp = message(p, &self.phi, &hv.mix_rows(&att.v2p)?, &hp, &deg_p, &feat_p)?;
                hp = hp.add(&mp.matmul(&w)?)?.add(&b)?;
            }
            hv = hv_next;
        }
        Ok(hv)
    }
}

fn default_decoder_freq() -> f64 {
    16.0
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub gabor: GaborLayer,
    pub rounds: Vec<Linear>,
    pub hidden: Linear,
    pub out: Linear,
}

/// Query-dependent, time-independent decoder inputs.
pub struct PreparedQueries<'t, T: Real> {
    pub att: Attachment,
    h0: Var<'t, T>,
    rel: Var<'t, T>,
    deg: Var<'t, T>,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &MapperConfig,
        width: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let gabor = GaborLayer::new(store, init, &format!("{name}.gabor"), width, default_decoder_freq(), 6.0, 1.0)?;
        let rounds = (0..cfg.decode_rounds)
            .map(|k| Linear::scaled(store, init, &format!("{name}.round{k}"), width, width, 0.5))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            gabor,
            rounds,
            hidden: Linear::new(store, init, &format!("{name}.hidden"), width, width)?,
            out: Linear::new(store, init, &format!("{name}.out"), width, out_channels)?,
        })
    }

    /// Builds the query-side inputs. Relative features are recorded on the
    /// tape, so predictions are differentiable in the query coordinates.
    pub fn prepare<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        phi: &Linear,
        grid: &GridSpec,
        q: &Var<'t, T>,
    ) -> Result<PreparedQueries<'t, T>> {
        let tape = q.tape();
        let qv = q.value();
        if qv.rank() != 2 || qv.shape()[1] != 2 {
            return Err(Error::shape("decoder queries", format!("{:?}, want [Q, 2]", qv.shape())));
        }
        let coords: Vec<[f64; 2]> = qv.data().chunks_exact(2).map(|c| [c[0].f64(), c[1].f64()]).collect();
        let n = coords.len();
        let att = Attachment::build(grid, &coords, &[])?;
        let floors = Tensor::from_fn([n, 2], |i| coords[i / 2][i % 2].floor());
        let wrapped = q.sub(&constant(tape, &floors))?;
        let mut corners = Vec::with_capacity(8 * n);
        for &c in &coords {
            let a = locate_cell(c, grid);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                corners.push((a.cell.1 + dx) as f64 / grid.width as f64);
                corners.push((a.cell.0 + dy) as f64 / grid.height as f64);
            }
        }
        let rep = Arc::new(RowMix::gather(n, &(0..4 * n).map(|i| i / 4).collect::<Vec<_>>())?);
        let delta = constant(tape, &Tensor::new([4 * n, 2], corners)?).sub(&wrapped.mix_rows(&rep)?)?;
        let (dx, dy) = (crate::nn::column(&delta, 0)?, crate::nn::column(&delta, 1)?);
        let (ax, ay) = (dx.scale(2.0 * PI)?, dy.scale(2.0 * PI)?);
        let feats = Var::concat(
            &[dx, dy, ax.sin()?, ax.add_scalar(PI / 2.0)?.sin()?, ay.sin()?, ay.add_scalar(PI / 2.0)?.sin()?],
            1,
        )?;
        let sum4 = Arc::new(RowMix::segment_sum(n, &(0..4 * n).map(|i| i / 4).collect::<Vec<_>>())?);
        let deg = constant(tape, &att.deg_p);
        let rel = feats.mix_rows(&sum4)?.matmul(&p.get(phi.w))?.add(&deg.mul(&p.get(phi.b))?)?;
        let h0 = self.gabor.apply(p, q)?;
        Ok(PreparedQueries { att, h0, rel, deg })
    }

    /// Latent grid `[V, C]` → predictions `[Q, channels]`.
    pub fn decode<'t, T: Real>(&self, p: &Bound<'t, T>, q: &PreparedQueries<'t, T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let from_grid = z.mix_rows(&q.att.v2p)?;
        let mut h = q.h0;
        for lin in &self.rounds {
            let m = from_grid.sub(&q.deg.mul(&h)?)?.add(&q.rel)?;
            h = h.add(&lin.apply(p, &m)?)?;
        }
        let hidden = self.hidden.apply(p, &h)?.tanh()?;
        self.out.apply(p, &hidden)
    }
}

#[cfg(test)]
mod tests;
