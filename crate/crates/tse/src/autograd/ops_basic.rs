//! Elementwise ops, reductions and shape plumbing.

use ndarray::{Axis, IxDyn, Slice};

use super::fastmath::{fast_exp, fast_tanh};
use super::{Arr, Graph, NodeId, Op};

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

struct Add;
impl Op for Add {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        vec![
            wants[0].then(|| g.clone()),
            wants[1].then(|| g.clone()),
        ]
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

struct Sub;
impl Op for Sub {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        vec![wants[0].then(|| g.clone()), wants[1].then(|| -g.clone())]
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

struct Mul;
impl Op for Mul {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        vec![
            wants[0].then(|| g * i[1]),
            wants[1].then(|| g * i[0]),
        ]
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

struct Scale(f64);
impl Op for Scale {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        vec![Some(g * self.0)]
    }
    fn name(&self) -> &'static str {
        "scale"
    }
}

struct AddScalar;
impl Op for AddScalar {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        vec![Some(g.clone())]
    }
    fn name(&self) -> &'static str {
        "add_scalar"
    }
}

struct Relu;
impl Op for Relu {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = g.clone();
        gx.zip_mut_with(i[0], |gv, &x| {
            if x <= 0.0 {
                *gv = 0.0
            }
        });
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "relu"
    }
}

struct LeakyRelu(f64);
impl Op for LeakyRelu {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let a = self.0;
        let mut gx = g.clone();
        gx.zip_mut_with(i[0], |gv, &x| {
            if x <= 0.0 {
                *gv *= a
            }
        });
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
}

struct Sigmoid;
impl Op for Sigmoid {
    fn backward(&self, _i: &[&Arr], o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = g.clone();
        gx.zip_mut_with(o, |gv, &y| *gv *= y * (1.0 - y));
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

struct Tanh;
impl Op for Tanh {
    fn backward(&self, _i: &[&Arr], o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = g.clone();
        gx.zip_mut_with(o, |gv, &y| *gv *= 1.0 - y * y);
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "tanh"
    }
}

struct Ln;
impl Op for Ln {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = g.clone();
        gx.zip_mut_with(i[0], |gv, &x| *gv /= x);
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "ln"
    }
}

struct Clamp {
    lo: f64,
    hi: f64,
}
impl Op for Clamp {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = g.clone();
        gx.zip_mut_with(i[0], |gv, &x| {
            if x < self.lo || x > self.hi {
                *gv = 0.0
            }
        });
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "clamp"
    }
}

// ---------------------------------------------------------------------------
// reductions and row-wise helpers
// ---------------------------------------------------------------------------

struct SumAll;
impl Op for SumAll {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let gv = g.iter().next().copied().unwrap();
        vec![Some(Arr::from_elem(i[0].raw_dim(), gv))]
    }
    fn name(&self) -> &'static str {
        "sum_all"
    }
}

struct MeanAll;
impl Op for MeanAll {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let gv = g.iter().next().copied().unwrap() / i[0].len() as f64;
        vec![Some(Arr::from_elem(i[0].raw_dim(), gv))]
    }
    fn name(&self) -> &'static str {
        "mean_all"
    }
}

/// Per-row inner product of two `[B, n]` arrays -> `[B]`.
struct RowDot;
impl Op for RowDot {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let make = |other: &Arr| {
            let o2 = other.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = o2.to_owned();
            for (b, mut row) in out.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v * g1[b]);
            }
            out.into_dyn()
        };
        vec![
            wants[0].then(|| make(i[1])),
            wants[1].then(|| make(i[0])),
        ]
    }
    fn name(&self) -> &'static str {
        "row_dot"
    }
}

/// Subtract each row's own mean, `[B, n]` -> `[B, n]`.
struct SubRowMean;
impl Op for SubRowMean {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let n = g2.ncols() as f64;
        let mut gx = g2.to_owned();
        for mut row in gx.outer_iter_mut() {
            let m: f64 = row.sum() / n;
            row.mapv_inplace(|v| v - m);
        }
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "sub_row_mean"
    }
}

/// `y[b, i] = x[b, i] * v[b]` for `x: [B, n]`, `v: [B]`.
struct MulRowBroadcast;
impl Op for MulRowBroadcast {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let x = i[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = i[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let gx = wants[0].then(|| {
            let mut gx = g2.to_owned();
            for (b, mut row) in gx.outer_iter_mut().enumerate() {
                row.mapv_inplace(|gv| gv * v[b]);
            }
            gx.into_dyn()
        });
        let gv = wants[1].then(|| {
            let mut gv = ndarray::Array1::<f64>::zeros(v.len());
            for b in 0..v.len() {
                gv[b] = g2.row(b).dot(&x.row(b));
            }
            gv.into_dyn()
        });
        vec![gx, gv]
    }
    fn name(&self) -> &'static str {
        "mul_row_broadcast"
    }
}

/// L2-normalize each row of `[B, D]` with a tiny epsilon under the root.
struct L2NormalizeRows {
    eps: f64,
}
impl Op for L2NormalizeRows {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let x = i[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut gx = ndarray::Array2::<f64>::zeros(x.raw_dim());
        for b in 0..x.nrows() {
            let xr = x.row(b);
            let gr = g2.row(b);
            let s = xr.dot(&xr) + self.eps;
            let r = s.powf(-0.5);
            let gdotx = gr.dot(&xr);
            let r3 = r / s;
            let mut out = gx.row_mut(b);
            for j in 0..xr.len() {
                out[j] = r * gr[j] - r3 * gdotx * xr[j];
            }
        }
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }
}

// ---------------------------------------------------------------------------
// bias, shape and slicing plumbing
// ---------------------------------------------------------------------------

/// Add a 1-D bias along `axis`, broadcast over all other axes.
struct AddBiasAxis {
    axis: usize,
}
impl Op for AddBiasAxis {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let gb = wants[1].then(|| {
            let n = i[1].len();
            let mut gb = ndarray::Array1::<f64>::zeros(n);
            for (idx, lane) in g.axis_iter(Axis(self.axis)).enumerate() {
                gb[idx] = lane.sum();
            }
            gb.into_dyn()
        });
        vec![wants[0].then(|| g.clone()), gb]
    }
    fn name(&self) -> &'static str {
        "add_bias_axis"
    }
}

/// Broadcast `[B, D]` -> `[B, D, T]` (repeat along a new trailing axis).
struct BroadcastTime {
    t: usize,
}
impl Op for BroadcastTime {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let _ = self.t;
        vec![Some(g.sum_axis(Axis(2)))]
    }
    fn name(&self) -> &'static str {
        "broadcast_time"
    }
}

struct Reshape {
    from: Vec<usize>,
}
impl Op for Reshape {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let g = g
            .to_owned()
            .into_shape_with_order(IxDyn(&self.from))
            .expect("reshape backward");
        vec![Some(g)]
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

/// Blocked strided transpose with unit column strides on both sides:
/// `dst[j*dst_rs + i] = src[i*src_rs + j]`.
fn transpose_strided(src: &[f64], dst: &mut [f64], rows: usize, cols: usize, src_rs: usize, dst_rs: usize) {
    const BLK: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + BLK).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + BLK).min(cols);
            for i in i0..i1 {
                let sbase = i * src_rs;
                for j in j0..j1 {
                    dst[j * dst_rs + i] = src[sbase + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}

/// Permuted copy with fast paths for every axis order the models use; the
/// general case falls back to ndarray's strided copy.
pub(crate) fn copy_permuted(a: &Arr, order: &[usize]) -> Arr {
    let shape = a.shape();
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let fallback = |a: &Arr| {
        a.view()
            .permuted_axes(IxDyn(order))
            .as_standard_layout()
            .to_owned()
    };
    let Some(src) = a.as_slice() else {
        return fallback(a);
    };
    let mut out = vec![0.0f64; src.len()];
    match (shape.len(), order) {
        (2, [1, 0]) => {
            transpose_strided(src, &mut out, shape[0], shape[1], shape[1], shape[0]);
        }
        (3, [0, 2, 1]) => {
            let (b, r, c) = (shape[0], shape[1], shape[2]);
            for bi in 0..b {
                transpose_strided(
                    &src[bi * r * c..(bi + 1) * r * c],
                    &mut out[bi * r * c..(bi + 1) * r * c],
                    r,
                    c,
                    c,
                    r,
                );
            }
        }
        (3, [1, 0, 2]) => {
            // swap leading axes, contiguous tail: row-block copies
            let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
            for i in 0..d0 {
                for j in 0..d1 {
                    let sbase = (i * d1 + j) * d2;
                    let dbase = (j * d0 + i) * d2;
                    out[dbase..dbase + d2].copy_from_slice(&src[sbase..sbase + d2]);
                }
            }
        }
        (4, [0, 3, 2, 1]) => {
            // [b, n, c, s] -> [b, s, c, n]: per (b, c) transpose n x s
            let (b, n, c, s_dim) = (shape[0], shape[1], shape[2], shape[3]);
            for bi in 0..b {
                for ci in 0..c {
                    let sbase = bi * n * c * s_dim + ci * s_dim;
                    let dbase = bi * s_dim * c * n + ci * n;
                    // views with row strides c*s (src) and c*n (dst)
                    for i0 in (0..n).step_by(32) {
                        let i1 = (i0 + 32).min(n);
                        for j0 in (0..s_dim).step_by(32) {
                            let j1 = (j0 + 32).min(s_dim);
                            for i in i0..i1 {
                                let sb = sbase + i * c * s_dim;
                                for j in j0..j1 {
                                    out[dbase + j * c * n + i] = src[sb + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        (4, [0, 2, 3, 1]) => {
            // [b, n, c, s] -> [b, c, s, n]: per b transpose n x (c*s)
            let (b, n, cs) = (shape[0], shape[1], shape[2] * shape[3]);
            for bi in 0..b {
                transpose_strided(
                    &src[bi * n * cs..(bi + 1) * n * cs],
                    &mut out[bi * n * cs..(bi + 1) * n * cs],
                    n,
                    cs,
                    cs,
                    n,
                );
            }
        }
        (4, [0, 3, 1, 2]) => {
            // inverse of the above: per b transpose (c*s) x n
            let (b, cs, n) = (shape[0], shape[1] * shape[2], shape[3]);
            for bi in 0..b {
                transpose_strided(
                    &src[bi * n * cs..(bi + 1) * n * cs],
                    &mut out[bi * n * cs..(bi + 1) * n * cs],
                    cs,
                    n,
                    n,
                    cs,
                );
            }
        }
        _ => return fallback(a),
    }
    Arr::from_shape_vec(IxDyn(&out_shape), out).expect("permuted copy shape")
}

struct Permute {
    inverse: Vec<usize>,
}
impl Op for Permute {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        vec![Some(copy_permuted(g, &self.inverse))]
    }
    fn name(&self) -> &'static str {
        "permute"
    }
}

struct Concat {
    axis: usize,
    split: usize,
}
impl Op for Concat {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let a = wants[0].then(|| {
            g.slice_axis(Axis(self.axis), Slice::from(0..self.split))
                .to_owned()
        });
        let b = wants[1].then(|| {
            g.slice_axis(Axis(self.axis), Slice::from(self.split..))
                .to_owned()
        });
        vec![a, b]
    }
    fn name(&self) -> &'static str {
        "concat"
    }
}

struct SliceAxis {
    axis: usize,
    start: usize,
    len: usize,
}
impl Op for SliceAxis {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = Arr::zeros(i[0].raw_dim());
        gx.slice_axis_mut(
            Axis(self.axis),
            Slice::from(self.start..self.start + self.len),
        )
        .assign(g);
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "slice_axis"
    }
}

/// Zero-pad at the tail of `axis` up to `new_len`.
struct PadTail {
    axis: usize,
    old_len: usize,
}
impl Op for PadTail {
    fn backward(&self, _i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        vec![Some(
            g.slice_axis(Axis(self.axis), Slice::from(0..self.old_len))
                .to_owned(),
        )]
    }
    fn name(&self) -> &'static str {
        "pad_tail"
    }
}

/// `x[idx]` along axis 0: `[L, ...]` -> `[...]`.
struct SelectAxis0 {
    idx: usize,
}
impl Op for SelectAxis0 {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let mut gx = Arr::zeros(i[0].raw_dim());
        gx.index_axis_mut(Axis(0), self.idx).assign(g);
        vec![Some(gx)]
    }
    fn name(&self) -> &'static str {
        "select_axis0"
    }
}

// ---------------------------------------------------------------------------
// Graph methods
// ---------------------------------------------------------------------------

impl Graph {
    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push_op(v, vec![a, b], Box::new(Add))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push_op(v, vec![a, b], Box::new(Sub))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push_op(v, vec![a, b], Box::new(Mul))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push_op(v, vec![a], Box::new(Scale(c)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push_op(v, vec![a], Box::new(AddScalar))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(v, vec![a], Box::new(Relu))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push_op(v, vec![a], Box::new(LeakyRelu(alpha)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + fast_exp(-x)));
        self.push_op(v, vec![a], Box::new(Sigmoid))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(fast_tanh);
        self.push_op(v, vec![a], Box::new(Tanh))
    }

    /// Natural log; inputs must be strictly positive (callers add an epsilon).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push_op(v, vec![a], Box::new(Ln))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push_op(v, vec![a], Box::new(Clamp { lo, hi }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Arr::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push_op(v, vec![a], Box::new(SumAll))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let v = Arr::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        self.push_op(v, vec![a], Box::new(MeanAll))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "row_dot");
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = ndarray::Array1::<f64>::zeros(av.nrows());
        for b_i in 0..av.nrows() {
            out[b_i] = av.row(b_i).dot(&bv.row(b_i));
        }
        self.push_op(out.into_dyn(), vec![a, b], Box::new(RowDot))
    }

    pub fn sub_row_mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = av.to_owned();
        for mut row in out.outer_iter_mut() {
            let m = row.mean().unwrap();
            row.mapv_inplace(|v| v - m);
        }
        self.push_op(out.into_dyn(), vec![a], Box::new(SubRowMean))
    }

    pub fn mul_row_broadcast(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let vv = self.value(v).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(xv.nrows(), vv.len(), "mul_row_broadcast: row count");
        let mut out = xv.to_owned();
        for (b, mut row) in out.outer_iter_mut().enumerate() {
            row.mapv_inplace(|val| val * vv[b]);
        }
        self.push_op(out.into_dyn(), vec![x, v], Box::new(MulRowBroadcast))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let eps = 1e-12;
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = av.to_owned();
        for mut row in out.outer_iter_mut() {
            let s: f64 = row.dot(&row) + eps;
            let r = s.powf(-0.5);
            row.mapv_inplace(|v| v * r);
        }
        self.push_op(out.into_dyn(), vec![a], Box::new(L2NormalizeRows { eps }))
    }

    pub fn add_bias_axis(&mut self, x: NodeId, bias: NodeId, axis: usize) -> NodeId {
        let n = self.value(bias).len();
        assert_eq!(self.shape(x)[axis], n, "add_bias_axis: bias length");
        let bv = self.value(bias).clone();
        let bs = bv.as_slice().unwrap();
        let mut out = self.value(x).clone();
        for (idx, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            lane.mapv_inplace(|v| v + bs[idx]);
        }
        self.push_op(out, vec![x, bias], Box::new(AddBiasAxis { axis }))
    }

    pub fn broadcast_time(&mut self, e: NodeId, t: usize) -> NodeId {
        let ev = self.value(e).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (b, d) = ev.dim();
        let mut out = ndarray::Array3::<f64>::zeros((b, d, t));
        for bi in 0..b {
            for di in 0..d {
                out.slice_mut(ndarray::s![bi, di, ..]).fill(ev[[bi, di]]);
            }
        }
        self.push_op(out.into_dyn(), vec![e], Box::new(BroadcastTime { t }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let from = self.shape(a).to_vec();
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(v, vec![a], Box::new(Reshape { from }))
    }

    pub fn permute(&mut self, a: NodeId, order: &[usize]) -> NodeId {
        let mut inverse = vec![0usize; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let v = copy_permuted(self.value(a), order);
        self.push_op(v, vec![a], Box::new(Permute { inverse }))
    }

    pub fn concat(&mut self, axis: usize, a: NodeId, b: NodeId) -> NodeId {
        let split = self.shape(a)[axis];
        let v = ndarray::concatenate(Axis(axis), &[self.value(a).view(), self.value(b).view()])
            .expect("concat: shape mismatch");
        self.push_op(v, vec![a, b], Box::new(Concat { axis, split }))
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push_op(v, vec![a], Box::new(SliceAxis { axis, start, len }))
    }

    pub fn pad_tail(&mut self, a: NodeId, axis: usize, new_len: usize) -> NodeId {
        let old_len = self.shape(a)[axis];
        assert!(new_len >= old_len, "pad_tail: shrinking");
        let mut shape = self.shape(a).to_vec();
        shape[axis] = new_len;
        let mut out = Arr::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(0..old_len))
            .assign(self.value(a));
        self.push_op(out, vec![a], Box::new(PadTail { axis, old_len }))
    }

    pub fn select_axis0(&mut self, a: NodeId, idx: usize) -> NodeId {
        let v = self.value(a).index_axis(Axis(0), idx).to_owned();
        self.push_op(v, vec![a], Box::new(SelectAxis0 { idx }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_max_rel_err, Arr, Graph};
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        use rand::Rng;
        Arr::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Generic gradcheck driver: builds the loss twice (analytic + probed).
    fn check(build: impl Fn(&mut Graph, &[super::NodeId]) -> super::NodeId, shapes: &[&[usize]]) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();
        let mut g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);
        let analytic: Vec<Arr> = leaves
            .iter()
            .map(|&l| grads.wrt(l).cloned().unwrap_or_else(|| Arr::zeros(g.value(l).raw_dim())))
            .collect();
        let eval = |vals: &[Arr]| {
            let mut g = Graph::new();
            let leaves: Vec<_> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            let root = build(&mut g, &leaves);
            g.scalar_value(root)
        };
        let err = finite_diff_max_rel_err(&eval, &inputs, &analytic, 30, 1e-6, &mut rng);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        check(
            |g, l| {
                let a = g.mul(l[0], l[1]);
                let b = g.sigmoid(a);
                let c = g.tanh(b);
                let d = g.add(c, l[0]);
                let e = g.leaky_relu(d, 0.2);
                g.mean_all(e)
            },
            &[&[3, 4], &[3, 4]],
        );
    }

    #[test]
    fn gradcheck_row_ops() {
        check(
            |g, l| {
                let zm = g.sub_row_mean(l[0]);
                let d = g.row_dot(zm, l[1]);
                let e = g.mul_row_broadcast(l[1], d);
                let f = g.l2_normalize_rows(e);
                g.sum_all(f)
            },
            &[&[2, 5], &[2, 5]],
        );
    }

    #[test]
    fn gradcheck_shape_plumbing() {
        check(
            |g, l| {
                let c = g.concat(1, l[0], l[1]);
                let p = g.permute(c, &[1, 0]);
                let r = g.reshape(p, &[2, 7]);
                let s = g.slice_axis(r, 1, 1, 5);
                let padded = g.pad_tail(s, 1, 6);
                let bias = g.leaf(arr1(&[0.3, -0.2]).into_dyn());
                let withb = g.add_bias_axis(padded, bias, 0);
                g.mean_all(withb)
            },
            &[&[7, 1], &[7, 1]],
        );
    }

    #[test]
    fn gradcheck_ln_clamp_inside_range() {
        check(
            |g, l| {
                let sq = g.mul(l[0], l[0]);
                let shifted = g.add_scalar(sq, 1.0);
                let lg = g.ln(shifted);
                let cl = g.clamp(lg, -10.0, 10.0);
                g.sum_all(cl)
            },
            &[&[4, 4]],
        );
    }

    #[test]
    fn broadcast_time_values_and_grad() {
        let mut g = Graph::new();
        let e = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.broadcast_time(e, 3);
        assert_eq!(g.shape(b), &[2, 2, 3]);
        assert_eq!(g.value(b)[[1, 0, 2]], 3.0);
        let s = g.sum_all(b);
        let grads = g.backward(s);
        // each element is repeated 3 times
        assert_eq!(grads.wrt(e).unwrap().as_slice().unwrap(), &[3.0; 4]);
    }

    #[test]
    fn select_axis0_picks_last_frame() {
        let mut g = Graph::new();
        let x = g.leaf(
            ndarray::Array3::from_shape_fn((4, 2, 3), |(l, b, h)| (l * 100 + b * 10 + h) as f64)
                .into_dyn(),
        );
        let last = g.select_axis0(x, 3);
        assert_eq!(g.shape(last), &[2, 3]);
        assert_eq!(g.value(last)[[1, 2]], 312.0);
        let s = g.sum_all(last);
        let grads = g.backward(s);
        let gx = grads.wrt(x).unwrap();
        assert_eq!(gx[[3, 0, 0]], 1.0);
        assert_eq!(gx[[2, 0, 0]], 0.0);
    }
}
