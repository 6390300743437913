//! Forward and adjoint kernels on raw slices. No tape bookkeeping here.

use crate::error::{Error, Result};
use crate::tensor::Real;

// ── broadcasting ─────────────────────────────────────────────────────

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed through `out`; broadcast axes get stride 0.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How a broadcast operand's flat index follows the output's.
#[derive(Clone, Copy)]
enum Follow {
    Same,
    Scalar,
    /// Operand spans the trailing axes: index = o mod len.
    Tail(usize),
    /// Operand spans the leading axes: index = o / block.
    Head(usize),
}

impl Follow {
    fn of(shape: &[usize], out: &[usize]) -> Option<Follow> {
        let r = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, r - shape.len()).chain(shape.iter().copied()).collect();
        if padded == out {
            return Some(Follow::Same);
        }
        let len: usize = shape.iter().product();
        if len == 1 {
            return Some(Follow::Scalar);
        }
        let n: usize = out.iter().product();
        for k in 0..=r {
            if padded[..k].iter().all(|&d| d == 1) && padded[k..] == out[k..] {
                return Some(Follow::Tail(len.max(1)));
            }
            if padded[..k] == out[..k] && padded[k..].iter().all(|&d| d == 1) {
                return Some(Follow::Head(n / len.max(1)));
            }
        }
        None
    }

    #[inline(always)]
    fn block(self) -> Option<usize> {
        match self {
            Follow::Tail(b) | Follow::Head(b) => Some(b),
            _ => None,
        }
    }

    #[inline(always)]
    fn in_block(self, row: usize, inner: usize, j: usize) -> usize {
        match self {
            Follow::Same => row * inner + j,
            Follow::Scalar => 0,
            Follow::Tail(_) => j,
            Follow::Head(_) => row,
        }
    }

    #[inline(always)]
    fn at(self, o: usize) -> usize {
        match self {
            Follow::Same => o,
            Follow::Scalar => 0,
            Follow::Tail(len) => o % len,
            Follow::Head(block) => o / block,
        }
    }
}

/// Visits every output element, in order, with the matching flat offsets
/// into `a` and `b`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if let (Some(fa), Some(fb)) = (Follow::of(a, out), Follow::of(b, out)) {
        let inner = match (fa.block(), fb.block()) {
            (Some(x), Some(y)) if x == y => Some(x),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => Some(n.max(1)),
            _ => None,
        };
        if let Some(inner) = inner {
            for row in 0..n / inner {
                for j in 0..inner {
                    f(row * inner + j, fa.in_block(row, inner, j), fb.in_block(row, inner, j));
                }
            }
            return;
        }
        for o in 0..n {
            f(o, fa.at(o), fb.at(o));
        }
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` by reducing broadcast axes.
pub(crate) fn reduce_to<T: Real>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![T::zero(); n];
    match Follow::of(target, out) {
        Some(Follow::Tail(len)) => {
            for row in grad.chunks_exact(len) {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a = *a + g;
                }
            }
        }
        Some(Follow::Head(block)) => {
            for (a, row) in acc.iter_mut().zip(grad.chunks_exact(block)) {
                *a = row.iter().fold(*a, |s, &g| s + g);
            }
        }
        _ => for_each_broadcast(out, target, target, |o, it, _| acc[it] = acc[it] + grad[o]),
    }
    acc
}

/// `f(a, b)` elementwise over the broadcast of `a` and `b` into `out`.
pub(crate) fn broadcast_map<T: Real>(
    out: &[usize],
    (a, sa): (&[T], &[usize]),
    (b, sb): (&[T], &[usize]),
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n: usize = out.iter().product();
    match (Follow::of(sa, out), Follow::of(sb, out)) {
        (Some(Follow::Same), Some(Follow::Same)) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Some(Follow::Same), Some(Follow::Scalar)) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Some(Follow::Scalar), Some(Follow::Same)) => b.iter().map(|&y| f(a[0], y)).collect(),
        (Some(Follow::Same), Some(Follow::Tail(len))) => {
            a.chunks_exact(len).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y))).collect()
        }
        (Some(Follow::Tail(len)), Some(Follow::Same)) => {
            b.chunks_exact(len).flat_map(|row| a.iter().zip(row).map(|(&x, &y)| f(x, y))).collect()
        }
        (Some(Follow::Same), Some(Follow::Head(block))) => a
            .chunks_exact(block)
            .zip(b)
            .flat_map(|(row, &y)| row.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        (Some(Follow::Head(block)), Some(Follow::Same)) => b
            .chunks_exact(block)
            .zip(a)
            .flat_map(|(row, &x)| row.iter().map(move |&y| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        _ => {
            let mut data = vec![T::zero(); n];
            for_each_broadcast(out, sa, sb, |o, ia, ib| data[o] = f(a[ia], b[ib]));
            data
        }
    }
}

// ── matrix products ──────────────────────────────────────────────────

/// `out[m,n] = a[m,k] · b[k,n]`. Blocks of 4 rows × 8 columns accumulate
/// in registers over the whole `k` range; the sum over `p` runs in order.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    const R: usize = 4;
    const W: usize = 8;
    let mut out = vec![T::zero(); m * n];
    let rows = m - m % R;
    let cols = n - n % W;
    for i in (0..rows).step_by(R) {
        for j in (0..cols).step_by(W) {
            let mut acc = [[T::zero(); W]; R];
            for p in 0..k {
                let bv: &[T; W] = b[p * n + j..p * n + j + W].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..W {
                        row[c] = row[c] + av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + W].copy_from_slice(row);
            }
        }
        for j in cols..n {
            for r in 0..R {
                let mut s = T::zero();
                for p in 0..k {
                    s = s + a[(i + r) * k + p] * b[p * n + j];
                }
                out[(i + r) * n + j] = s;
            }
        }
    }
    for i in rows..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`, via an explicit transpose of `b` so the
/// inner loop is the same contiguous axpy as [`matmul`].
pub(crate) fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul(g, &bt, m, n, k)
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`, blocked like [`matmul`] with the sum over
/// `i` in order.
pub(crate) fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    const R: usize = 4;
    const W: usize = 8;
    let mut out = vec![T::zero(); k * n];
    let rows = k - k % R;
    let cols = n - n % W;
    for p in (0..rows).step_by(R) {
        for j in (0..cols).step_by(W) {
            let mut acc = [[T::zero(); W]; R];
            for i in 0..m {
                let gv: &[T; W] = g[i * n + j..i * n + j + W].try_into().unwrap();
                let av: &[T; R] = a[i * k + p..i * k + p + R].try_into().unwrap();
                for (row, &x) in acc.iter_mut().zip(av) {
                    for c in 0..W {
                        row[c] = row[c] + x * gv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(p + r) * n + j..(p + r) * n + j + W].copy_from_slice(row);
            }
        }
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            let lo = if p < rows { cols } else { 0 };
            for (o, &gv) in orow[lo..].iter_mut().zip(&grow[lo..]) {
                *o = *o + aip * gv;
            }
        }
    }
    out
}

// ── convolutions (channels-last: [H, W, C]) ──────────────────────────

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    /// Periodic wrap, matching the torus domain.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    /// Stride 1 with the padding that preserves extents for odd kernel `k`.
    pub fn same(k: usize, groups: usize, pad_mode: PadMode) -> Self {
        ConvSpec {
            stride: 1,
            padding: k / 2,
            groups,
            pad_mode,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    /// Input `[H,W,Cin]`, weight `[KH,KW,Cin/groups,Cout]`.
    pub(crate) fn conv(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let op = "conv2d";
        if x.len() != 3 || w.len() != 4 {
            return Err(Error::shape(op, format!("input {x:?}, weight {w:?}")));
        }
        let (h, wd, cin) = (x[0], x[1], x[2]);
        let (kh, kw, cing, cout) = (w[0], w[1], w[2], w[3]);
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cing {
            return Err(Error::shape(
                op,
                format!("channels in={cin} out={cout} not compatible with groups={g}, weight {w:?}"),
            ));
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::shape(op, format!("kernel {kh}x{kw} larger than padded input {x:?}")));
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(ConvGeom { h, w: wd, cin, kh, kw, cout, ho, wo, spec })
    }

    /// Input `[H,W,Cin]`, weight `[KH,KW,Cin,Cout]`; output extents `(H-1)s - 2p + K`.
    pub(crate) fn conv_transpose(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let op = "conv_transpose2d";
        if x.len() != 3 || w.len() != 4 || spec.groups != 1 || x[2] != w[2] || spec.stride == 0 {
            return Err(Error::shape(op, format!("input {x:?}, weight {w:?}, spec {spec:?}")));
        }
        let (h, wd, cin) = (x[0], x[1], x[2]);
        let (kh, kw, cout) = (w[0], w[1], w[3]);
        let full_h = (h - 1) * spec.stride + kh;
        let full_w = (wd - 1) * spec.stride + kw;
        if full_h <= 2 * spec.padding || full_w <= 2 * spec.padding {
            return Err(Error::shape(op, format!("padding {} too large", spec.padding)));
        }
        let ho = full_h - 2 * spec.padding;
        let wo = full_w - 2 * spec.padding;
        if spec.pad_mode == PadMode::Circular && (ho != h * spec.stride || wo != wd * spec.stride) {
            return Err(Error::shape(
                op,
                format!("circular mode needs output = stride × input, got {ho}x{wo} from {h}x{wd}"),
            ));
        }
        Ok(ConvGeom { h, w: wd, cin, kh, kw, cout, ho, wo, spec })
    }

    /// Maps a padded coordinate to a source index, if it lands inside.
    #[inline]
    fn src(&self, pos: isize, extent: usize) -> Option<usize> {
        match self.spec.pad_mode {
            PadMode::Zero => (pos >= 0 && (pos as usize) < extent).then_some(pos as usize),
            PadMode::Circular => Some(pos.rem_euclid(extent as isize) as usize),
        }
    }

    /// Calls `f(out_offset, in_offset, weight_offset, group_out_range_start)` for every
    /// (output pixel, kernel tap, input channel) triple; the caller loops over the
    /// group's output channels.
    #[inline]
    fn visit_conv(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = self.spec.groups;
        let cing = self.cin / g;
        let coutg = self.cout / g;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let obase = (oy * self.wo + ox) * self.cout;
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy as isize * s + ky as isize - p, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox as isize * s + kx as isize - p, self.w) else {
                            continue;
                        };
                        let ibase = (iy * self.w + ix) * self.cin;
                        let wbase = (ky * self.kw + kx) * cing * self.cout;
                        for gi in 0..g {
                            for icl in 0..cing {
                                let ic = gi * cing + icl;
                                f(obase + gi * coutg, ibase + ic, wbase + icl * self.cout + gi * coutg, coutg);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn conv_forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.ho * self.wo * self.cout];
        self.visit_conv(|o, i, wo, n| {
            let xv = x[i];
            for (dst, &wv) in out[o..o + n].iter_mut().zip(&w[wo..wo + n]) {
                *dst = *dst + xv * wv;
            }
        });
        out
    }

    pub(crate) fn conv_backward<T: Real>(&self, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        self.visit_conv(|o, i, wo, n| {
            let gs = &g[o..o + n];
            let xv = x[i];
            let mut acc = T::zero();
            for ((dwv, &wv), &gv) in dw[wo..wo + n].iter_mut().zip(&w[wo..wo + n]).zip(gs) {
                acc = acc + wv * gv;
                *dwv = *dwv + xv * gv;
            }
            dx[i] = dx[i] + acc;
        });
        (dx, dw)
    }

    /// Transposed convolution visits (input pixel, tap) pairs and scatters.
    #[inline]
    fn visit_transpose(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        for iy in 0..self.h {
            for ix in 0..self.w {
                let ibase = (iy * self.w + ix) * self.cin;
                for ky in 0..self.kh {
                    let Some(oy) = self.dst(iy as isize * s + ky as isize - p, self.ho) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ox) = self.dst(ix as isize * s + kx as isize - p, self.wo) else {
                            continue;
                        };
                        let obase = (oy * self.wo + ox) * self.cout;
                        let wbase = (ky * self.kw + kx) * self.cin * self.cout;
                        for ic in 0..self.cin {
                            f(obase, ibase + ic, wbase + ic * self.cout);
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn dst(&self, pos: isize, extent: usize) -> Option<usize> {
        self.src(pos, extent)
    }

    pub(crate) fn transpose_forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let n = self.cout;
        let mut out = vec![T::zero(); self.ho * self.wo * n];
        self.visit_transpose(|o, i, wo| {
            let xv = x[i];
            for (dst, &wv) in out[o..o + n].iter_mut().zip(&w[wo..wo + n]) {
                *dst = *dst + xv * wv;
            }
        });
        out
    }

    pub(crate) fn transpose_backward<T: Real>(&self, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.cout;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        self.visit_transpose(|o, i, wo| {
            let gs = &g[o..o + n];
            let xv = x[i];
            let mut acc = T::zero();
            for ((dwv, &wv), &gv) in dw[wo..wo + n].iter_mut().zip(&w[wo..wo + n]).zip(gs) {
                acc = acc + wv * gv;
                *dwv = *dwv + xv * gv;
            }
            dx[i] = dx[i] + acc;
        });
        (dx, dw)
    }
}

// ── sparse row mixing ────────────────────────────────────────────────

/// A fixed sparse matrix in CSR form: `out[i] = Σ_(j,w) w · x[j]`.
///
/// Graph aggregations (neighbor means, bipartite sums, gathers) are all
/// expressed through this one operator. Row entries are applied in the order
/// given, which keeps results reproducible bit-for-bit.
#[derive(Clone, Debug)]
pub struct RowMix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    transpose: Option<Box<RowMix>>,
}

impl RowMix {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for r in rows {
            for &(c, w) in r {
                if c >= cols {
                    return Err(Error::shape("row_mix", format!("column {c} out of range {cols}")));
                }
                indices.push(c);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        let mut m = RowMix {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            weights,
            transpose: None,
        };
        m.transpose = Some(Box::new(m.build_transpose()));
        Ok(m)
    }

    /// Pure gather: `out[i] = x[index[i]]`.
    pub fn gather(cols: usize, index: &[usize]) -> Result<Self> {
        let rows: Vec<_> = index.iter().map(|&j| vec![(j, 1.0)]).collect();
        Self::from_rows(cols, &rows)
    }

    /// Segment sum: `out[segment[i]] += x[i]` over `rows` output rows.
    pub fn segment_sum(rows: usize, segment: &[usize]) -> Result<Self> {
        let mut lists = vec![Vec::new(); rows];
        for (i, &s) in segment.iter().enumerate() {
            if s >= rows {
                return Err(Error::shape("row_mix", format!("segment {s} out of range {rows}")));
            }
            lists[s].push((i, 1.0));
        }
        Self::from_rows(segment.len(), &lists)
    }

    fn build_transpose(&self) -> RowMix {
        let mut lists = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for e in self.indptr[r]..self.indptr[r + 1] {
                lists[self.indices[e]].push((r, self.weights[e]));
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for l in lists {
            for (c, w) in l {
                indices.push(c);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        RowMix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            weights,
            transpose: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Entries of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |e| (self.indices[e], self.weights[e]))
    }

    pub(crate) fn apply<T: Real>(&self, x: &[T], width: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for e in self.indptr[r]..self.indptr[r + 1] {
                let w = T::of(self.weights[e]);
                let src = &x[self.indices[e] * width..(self.indices[e] + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
        out
    }

    pub(crate) fn apply_transpose<T: Real>(&self, g: &[T], width: usize) -> Vec<T> {
        self.transpose
            .as_ref()
            .expect("transpose built at construction")
            .apply(g, width)
    }
}
