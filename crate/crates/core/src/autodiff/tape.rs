//! Gradient tape: records forward operations and replays them in reverse.

use super::tensor::{numel, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    GlobalAvgPool(Var),
    Custom(Vec<(Var, Vec<f64>)>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Linear record of a forward pass. Nodes are appended in evaluation order,
/// which is already a topological order for the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// `c = a * b + beta * c` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let src = &input[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst = &mut cols[row * ncols + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncols = g.col_cols();
    let plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let dst = &mut out[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cols[row * ncols + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.data.clone()).expect("tape node with inconsistent shape")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a tensor. Its `requires_grad` flag decides whether a gradient
    /// is produced for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf { param: None })
    }

    /// Record a parameter; [`Tape::backward_into`] routes its gradient back.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = &params.get(id).tensor;
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf { param: Some(id) })
    }

    /// 2-D convolution. `input` is `[N, C, H, W]`, `weight` `[O, C, KH, KW]`,
    /// `bias` `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), ws[0]),
                ));
            }
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: h,
            in_w: w,
            out_c: ws[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![0.0; geom.out_c * ncols];
        gemm(
            geom.out_c,
            rows,
            ncols,
            self.value(weight),
            (rows, 1),
            &cols,
            (ncols, 1),
            0.0,
            &mut y,
            (ncols, 1),
        );
        let plane = geom.out_h * geom.out_w;
        let mut out = vec![0.0; geom.batch * geom.out_c * plane];
        let bias_vals = bias.map(|b| self.value(b).to_vec());
        for n in 0..geom.batch {
            for o in 0..geom.out_c {
                let b = bias_vals.as_ref().map_or(0.0, |v| v[o]);
                let src = &y[o * ncols + n * plane..][..plane];
                let dst = &mut out[(n * geom.out_c + o) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let shape = vec![geom.batch, geom.out_c, geom.out_h, geom.out_w];
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Affine map: `input` `[N, I]`, `weight` `[O, I]`, `bias` `[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * o];
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(n, i, o, self.value(input), (i, 1), self.value(weight), (1, i), 1.0, &mut y, (o, 1));
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, o], y, rg, Op::Linear { input, weight, bias }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, data, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![m], rg, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, rg, Op::Slice { input: x, axis, start }))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-D input, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let data = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1]], data, rg, Op::GlobalAvgPool(x)))
    }

    /// Scalar node with externally computed value and local gradients
    /// `d value / d input` for each input.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.len() != self.value(*v).len() {
                return Err(shape_err(
                    "custom_scalar",
                    format!("gradient of length {} for input {:?}", g.len(), self.shape(*v)),
                ));
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Vec::new(), vec![value], rg, Op::Custom(inputs)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that also accumulates parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                let g = grads.grads[idx]
                    .as_deref()
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; node.data.len()]);
                params.get_mut(id).tensor.accumulate_grad(&g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &|s| {
                    for ((s, &gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                acc(*x, &|s| {
                    for ((s, &gv), &yi) in s.iter_mut().zip(g).zip(y) {
                        *s += gv * yi * (1.0 - yi);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|s| s.iter_mut().zip(g).for_each(|(s, gv)| *s += gv));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| {
                    for ((s, gv), bi) in s.iter_mut().zip(g).zip(bv) {
                        *s += gv * bi;
                    }
                });
                acc(*b, &|s| {
                    for ((s, gv), ai) in s.iter_mut().zip(g).zip(av) {
                        *s += gv * ai;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, gv)| *s += gv));
            }
            Op::MulScalar(x, c) => {
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, gv)| *s += gv * c));
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let len = node.shape[*axis];
                let full = shape[*axis];
                acc(*input, &|s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * full + start) * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s_in = self.shape(*x);
                let plane = s_in[2] * s_in[3];
                acc(*x, &|s| {
                    for (chunk, gv) in s.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / plane as f64);
                    }
                });
            }
            Op::Custom(inputs) => {
                for (v, local) in inputs {
                    acc(*v, &|s| s.iter_mut().zip(local).for_each(|(s, l)| *s += g[0] * l));
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, i) = (xs[0], xs[1]);
                let o = node.shape[1];
                let (xv, wv) = (self.value(*input), self.value(*weight));
                // dX = dY W
                acc(*input, &|s| gemm(n, o, i, g, (o, 1), wv, (i, 1), 1.0, s, (i, 1)));
                // dW = dY^T X
                acc(*weight, &|s| gemm(o, n, i, g, (1, o), xv, (i, 1), 1.0, s, (i, 1)));
                if let Some(b) = bias {
                    acc(*b, &|s| {
                        for row in g.chunks(o) {
                            s.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let plane = geom.out_h * geom.out_w;
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                // gather dY into [O, N * plane]
                let mut dy = vec![0.0; geom.out_c * ncols];
                for n in 0..geom.batch {
                    for o in 0..geom.out_c {
                        dy[o * ncols + n * plane..][..plane]
                            .copy_from_slice(&g[(n * geom.out_c + o) * plane..][..plane]);
                    }
                }
                acc(*weight, &|s| {
                    gemm(geom.out_c, ncols, rows, &dy, (ncols, 1), cols, (1, ncols), 1.0, s, (rows, 1))
                });
                if let Some(b) = bias {
                    acc(*b, &|s| {
                        for (o, sv) in s.iter_mut().enumerate() {
                            *sv += dy[o * ncols..][..ncols].iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(*input) {
                    let wv = self.value(*weight);
                    let mut dcols = vec![0.0; rows * ncols];
                    gemm(rows, geom.out_c, ncols, wv, (1, rows), &dy, (ncols, 1), 0.0, &mut dcols, (ncols, 1));
                    acc(*input, &|s| col2im_add(&dcols, geom, s));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
