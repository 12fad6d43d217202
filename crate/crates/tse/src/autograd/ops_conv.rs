//! Dense matmul and the 1-D convolution family (strided conv, transposed
//! conv, average pooling). Convs are im2col + GEMM.

use ndarray::{Array2, Array3, Axis, Ix2, Ix3};

use super::{Arr, Graph, NodeId, Op};

struct MatMul;
impl Op for MatMul {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let a = i[0].view().into_dimensionality::<Ix2>().unwrap();
        let b = i[1].view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let ga = wants[0].then(|| g2.dot(&b.t()).into_dyn());
        let gb = wants[1].then(|| a.t().dot(&g2).into_dyn());
        vec![ga, gb]
    }
    fn name(&self) -> &'static str {
        "matmul"
    }
}

fn im2col(x: &ndarray::ArrayView2<f64>, k: usize, stride: usize) -> Array2<f64> {
    let (c_in, l) = x.dim();
    let l_out = (l - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((l_out, c_in * k));
    for t in 0..l_out {
        let mut row = cols.row_mut(t);
        let row_slice = row.as_slice_mut().unwrap();
        for c in 0..c_in {
            for u in 0..k {
                row_slice[c * k + u] = x[[c, t * stride + u]];
            }
        }
    }
    cols
}

struct Conv1d {
    stride: usize,
}
impl Op for Conv1d {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let x = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let w = i[1].view().into_dimensionality::<Ix3>().unwrap();
        let gy = g.view().into_dimensionality::<Ix3>().unwrap();
        let (b, c_in, l) = x.dim();
        let (c_out, _, k) = w.dim();
        let l_out = gy.dim().2;
        let wmat = w
            .to_shape((c_out, c_in * k))
            .unwrap()
            .to_owned();

        let mut gx = wants[0].then(|| Array3::<f64>::zeros((b, c_in, l)));
        let mut gw = wants[1].then(|| Array2::<f64>::zeros((c_out, c_in * k)));
        for bi in 0..b {
            // gy[bi]: [c_out, l_out] -> [l_out, c_out]
            let gyt = gy.index_axis(Axis(0), bi).t().as_standard_layout().to_owned();
            if let Some(gx) = gx.as_mut() {
                let gcols = gyt.dot(&wmat); // [l_out, c_in*k]
                let mut gxi = gx.index_axis_mut(Axis(0), bi);
                for t in 0..l_out {
                    let row = gcols.row(t);
                    let row_slice = row.as_slice().unwrap();
                    for c in 0..c_in {
                        for u in 0..k {
                            gxi[[c, t * self.stride + u]] += row_slice[c * k + u];
                        }
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                let cols = im2col(&x.index_axis(Axis(0), bi), k, self.stride);
                *gw += &gyt.t().dot(&cols); // [c_out, c_in*k]
            }
        }
        vec![
            gx.map(|a| a.into_dyn()),
            gw.map(|a| {
                a.into_shape_with_order((c_out, c_in, k))
                    .unwrap()
                    .into_dyn()
            }),
        ]
    }
    fn name(&self) -> &'static str {
        "conv1d"
    }
}

/// Gather `gy[co, j*stride + u]` into `[l, c_out*k]` rows.
fn gather_cols_t(
    gy: &ndarray::ArrayView2<f64>,
    l: usize,
    k: usize,
    stride: usize,
) -> Array2<f64> {
    let c_out = gy.dim().0;
    let mut cols = Array2::<f64>::zeros((l, c_out * k));
    for j in 0..l {
        let mut row = cols.row_mut(j);
        let row_slice = row.as_slice_mut().unwrap();
        for co in 0..c_out {
            for u in 0..k {
                row_slice[co * k + u] = gy[[co, j * stride + u]];
            }
        }
    }
    cols
}

struct ConvTranspose1d {
    stride: usize,
}
impl Op for ConvTranspose1d {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let x = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let w = i[1].view().into_dimensionality::<Ix3>().unwrap();
        let gy = g.view().into_dimensionality::<Ix3>().unwrap();
        let (b, c_in, l) = x.dim();
        let (_, c_out, k) = w.dim();
        let wmat = w.to_shape((c_in, c_out * k)).unwrap().to_owned();

        let mut gx = wants[0].then(|| Array3::<f64>::zeros((b, c_in, l)));
        let mut gw = wants[1].then(|| Array2::<f64>::zeros((c_in, c_out * k)));
        for bi in 0..b {
            let gycols = gather_cols_t(&gy.index_axis(Axis(0), bi), l, k, self.stride);
            if let Some(gx) = gx.as_mut() {
                let gxmat = gycols.dot(&wmat.t()); // [l, c_in]
                gx.index_axis_mut(Axis(0), bi).assign(&gxmat.t());
            }
            if let Some(gw) = gw.as_mut() {
                let xmat = x
                    .index_axis(Axis(0), bi)
                    .t()
                    .as_standard_layout()
                    .to_owned(); // [l, c_in]
                *gw += &xmat.t().dot(&gycols);
            }
        }
        vec![
            gx.map(|a| a.into_dyn()),
            gw.map(|a| {
                a.into_shape_with_order((c_in, c_out, k))
                    .unwrap()
                    .into_dyn()
            }),
        ]
    }
    fn name(&self) -> &'static str {
        "conv_transpose1d"
    }
}

struct AvgPool1d {
    k: usize,
}
impl Op for AvgPool1d {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let x = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let gy = g.view().into_dimensionality::<Ix3>().unwrap();
        let (b, c, l) = x.dim();
        let l_out = gy.dim().2;
        let inv = 1.0 / self.k as f64;
        let mut gx = Array3::<f64>::zeros((b, c, l));
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l_out {
                    let gv = gy[[bi, ci, t]] * inv;
                    for u in 0..self.k {
                        gx[[bi, ci, t * self.k + u]] = gv;
                    }
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "avg_pool1d"
    }
}

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.dim().1, bv.dim().0, "matmul: inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push_op(v, vec![a, b], Box::new(MatMul))
    }

    /// `matmul` plus a bias over columns: `[m, k] x [k, n] + b[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias_axis(y, b, 1)
    }

    /// `x: [B, C_in, L]`, `w: [C_out, C_in, K]` -> `[B, C_out, L_out]`,
    /// `L_out = floor((L - K) / stride) + 1`. Bias is separate
    /// (`add_bias_axis(.., 1)`).
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let (b, c_in, l) = xv.dim();
        let (c_out, c_in_w, k) = wv.dim();
        assert_eq!(c_in, c_in_w, "conv1d: channel mismatch");
        assert!(l >= k, "conv1d: input shorter than kernel");
        let l_out = (l - k) / stride + 1;
        let wmat_t = wv
            .to_shape((c_out, c_in * k))
            .unwrap()
            .t()
            .as_standard_layout()
            .to_owned();
        let mut out = Array3::<f64>::zeros((b, c_out, l_out));
        for bi in 0..b {
            let cols = im2col(&xv.index_axis(Axis(0), bi), k, stride);
            let y = cols.dot(&wmat_t); // [l_out, c_out]
            out.index_axis_mut(Axis(0), bi).assign(&y.t());
        }
        self.push_op(out.into_dyn(), vec![x, w], Box::new(Conv1d { stride }))
    }

    /// `x: [B, C_in, L]`, `w: [C_in, C_out, K]` -> `[B, C_out, (L-1)*stride + K]`.
    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let (b, c_in, l) = xv.dim();
        let (c_in_w, c_out, k) = wv.dim();
        assert_eq!(c_in, c_in_w, "conv_transpose1d: channel mismatch");
        let l_t = (l - 1) * stride + k;
        let wmat = wv.to_shape((c_in, c_out * k)).unwrap().to_owned();
        let mut out = Array3::<f64>::zeros((b, c_out, l_t));
        for bi in 0..b {
            let xmat = xv
                .index_axis(Axis(0), bi)
                .t()
                .as_standard_layout()
                .to_owned(); // [l, c_in]
            let prod = xmat.dot(&wmat); // [l, c_out*k]
            let mut oi = out.index_axis_mut(Axis(0), bi);
            for j in 0..l {
                let row = prod.row(j);
                let row_slice = row.as_slice().unwrap();
                for co in 0..c_out {
                    for u in 0..k {
                        oi[[co, j * stride + u]] += row_slice[co * k + u];
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x, w],
            Box::new(ConvTranspose1d { stride }),
        )
    }

    /// Non-overlapping mean pooling by factor `k` over the last axis.
    pub fn avg_pool1d(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, c, l) = xv.dim();
        assert!(l >= k, "avg_pool1d: input shorter than window");
        let l_out = l / k;
        let inv = 1.0 / k as f64;
        let mut out = Array3::<f64>::zeros((b, c, l_out));
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l_out {
                    let mut acc = 0.0;
                    for u in 0..k {
                        acc += xv[[bi, ci, t * k + u]];
                    }
                    out[[bi, ci, t]] = acc * inv;
                }
            }
        }
        self.push_op(out.into_dyn(), vec![x], Box::new(AvgPool1d { k }))
    }
}
