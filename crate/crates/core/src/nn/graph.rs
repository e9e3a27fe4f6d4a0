//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates adjoints. Values are 2-D
//! `[rows, cols]` matrices except for convolution inputs/outputs, which are
//! single-sample `[channels, height, width]` volumes.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{gaussian_mask_mass, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Off-road weights for the Gaussian mask penalty, one grid per scene.
#[derive(Debug, Clone)]
pub struct MaskBank {
    pub frame: Frame,
    pub masks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    CenterRotate(Var, Vec<f64>),
    MaskPenalty {
        kp: Var,
        bank: Arc<MaskBank>,
        mask_of_row: Vec<usize>,
        sigma: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    version: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::InvalidArgument(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            version: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant input. Gradients with respect to it are still recorded.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Input that never receives a gradient, so backward work feeding it
    /// can be skipped.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Copy of `a` that blocks gradient flow back into `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.input(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Reads a parameter into the tape; repeated reads share one node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<Var> {
        match self.version {
            None => self.version = Some(params.version()),
            Some(v) if v != params.version() => {
                return Err(Error::StaleTape(
                    "parameters changed while the tape was being recorded".into(),
                ))
            }
            _ => {}
        }
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push(params.value(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[0], s[1..].iter().product())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, n, k, m, &mut out);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if self.value(b).numel() != m {
            return shape_err(format!("bias of {} values for {m} columns", self.value(b).numel()));
        }
        let bv = self.value(b).data.clone();
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::AddBias(x, b)))
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(format!("elementwise shapes {sa:?} vs {sb:?}"));
        }
        let shape = sa.to_vec();
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = &self.nodes[a.0].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map_op(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map_op(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_op(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(sigmoid(x))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != n {
                return shape_err(format!("concat_cols row mismatch {r} vs {n}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor { shape: vec![n, total], data }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != m {
                return shape_err(format!("concat_rows column mismatch {c} vs {m}"));
            }
            n += r;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(a);
        if start + len > m {
            return shape_err(format!("slice {start}..{} of {m} columns", start + len));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![n, len], data }, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("row {bad} out of {n}"));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            Tensor { shape: vec![idx.len(), m], data },
            Op::GatherRows(a, idx.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let data = self.value(a).data.clone();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Single-sample 2-D convolution: `x` is `[C, H, W]`, `w` is
    /// `[O, C, K, K]`, `b` has `O` entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv2d shapes x={xs:?} w={ws:?}"));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if self.value(b).numel() != o {
            return shape_err("conv2d bias size".into());
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d kernel larger than input".into());
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let cols = geom.im2col(&self.nodes[x.0].value.data);
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let n = ho * wo;
        let ckk = c * k * k;
        let mut out = vec![0.0; o * n];
        for oc in 0..o {
            let orow = &mut out[oc * n..(oc + 1) * n];
            orow.fill(bv[oc]);
            for r in 0..ckk {
                let wgt = wv[oc * ckk + r];
                for (dst, &v) in orow.iter_mut().zip(&cols[r * n..(r + 1) * n]) {
                    *dst += wgt * v;
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![o, ho, wo], data: out },
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Treats each row as a sequence of 2-D points, subtracts the row's mean
    /// point and rotates every point by that row's angle.
    pub fn center_rotate(&mut self, a: Var, angles: &[f64]) -> Result<Var> {
        let (n, m) = self.dims2(a);
        if m % 2 != 0 || angles.len() != n {
            return shape_err(format!("center_rotate on [{n}, {m}] with {} angles", angles.len()));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let (mx, my) = point_mean(row);
            let (s, c) = angles[i].sin_cos();
            for j in 0..m / 2 {
                let x = row[2 * j] - mx;
                let y = row[2 * j + 1] - my;
                data[i * m + 2 * j] = c * x - s * y;
                data[i * m + 2 * j + 1] = s * x + c * y;
            }
        }
        Ok(self.push(
            Tensor { shape: vec![n, m], data },
            Op::CenterRotate(a, angles.to_vec()),
        ))
    }

    /// Per-row `(1/K) sum_k mean_cells(mask * gaussian(point_k))` where each
    /// row of `kp` holds `K` interleaved points and uses mask
    /// `mask_of_row[row]`. Output is `[rows, 1]`.
    pub fn mask_penalty(&mut self, kp: Var, bank: Arc<MaskBank>, mask_of_row: &[usize], sigma: f64) -> Result<Var> {
        let (n, m) = self.dims2(kp);
        if m % 2 != 0 || mask_of_row.len() != n || !(sigma > 0.0) {
            return shape_err(format!("mask_penalty on [{n}, {m}]"));
        }
        if mask_of_row.iter().any(|&i| i >= bank.masks.len()) {
            return shape_err("mask index out of range".into());
        }
        let k = m / 2;
        let src = &self.nodes[kp.0].value.data;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mask = &bank.masks[mask_of_row[i]];
            let mut acc = 0.0;
            for j in 0..k {
                let p = crate::geometry::Point2::new(src[i * m + 2 * j], src[i * m + 2 * j + 1]);
                acc += gaussian_mask_mass(mask, bank.frame, p, sigma, false).0;
            }
            out[i] = acc / k as f64;
        }
        Ok(self.push(
            Tensor { shape: vec![n, 1], data: out },
            Op::MaskPenalty {
                kp,
                bank,
                mask_of_row: mask_of_row.to_vec(),
                sigma,
            },
        ))
    }

    /// Reverse pass seeded with `d(output) = 1`; `output` must be a scalar.
    pub fn backward(&self, output: Var) -> Result<Backward> {
        if self.value(output).numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward without an explicit seed needs a scalar output".into(),
            ));
        }
        self.backward_with(output, vec![1.0])
    }

    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Backward> {
        if output.0 >= self.nodes.len() {
            return Err(Error::StaleTape("output variable is not on this tape".into()));
        }
        if seed.len() != self.value(output).numel() {
            return Err(Error::InvalidArgument("seed gradient shape mismatch".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(Some(g)) = grads.get(v.0) {
                params.insert(id, g.clone());
            }
        }
        Ok(Backward {
            node_grads: grads,
            grads: Gradients {
                version: self.version.unwrap_or(0),
                params,
            },
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a);
                let m = self.dims2(*b).1;
                let av = &val(*a).data;
                let bv = &val(*b).data;
                if !matches!(self.nodes[a.0].op, Op::Constant) {
                    let bt = transpose(bv, k, m);
                    gemm_acc(g, &bt, n, m, k, acc(grads, *a, n * k));
                }
                let at = transpose(av, n, k);
                gemm_acc(&at, g, k, n, m, acc(grads, *b, k * m));
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).numel();
                add_into(acc(grads, *x, g.len()), g);
                let gb = acc(grads, *b, m);
                for row in g.chunks(m) {
                    add_into(gb, row);
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                for (o, &gg) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                    *o -= gg;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(a, k) => {
                for (o, &gg) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *o += gg * k;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = &val(*a).data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value.data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > *lo && x[i] < *hi {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::LogSigmoid(a) => {
                let x = &val(*a).data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(-x[i]);
                }
            }
            Op::Exp(a) => {
                let y = &node.value.data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Square(a) => {
                let x = &val(*a).data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * x[i];
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape[0];
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    let gp = acc(grads, p, n * w);
                    for i in 0..n {
                        add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    add_into(acc(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims2(*a);
                let len = node.value.cols();
                let ga = acc(grads, *a, n * m);
                for i in 0..n {
                    add_into(&mut ga[i * m + start..i * m + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            Op::GatherRows(a, idx) => {
                let (n, m) = self.dims2(*a);
                let ga = acc(grads, *a, n * m);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                }
            }
            Op::Reshape(a) => add_into(acc(grads, *a, g.len()), g),
            Op::Sum(a) => {
                let n = val(*a).numel();
                for o in acc(grads, *a, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let d = g[0] / n as f64;
                for o in acc(grads, *a, n).iter_mut() {
                    *o += d;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = &val(*x).shape;
                let ws = &val(*w).shape;
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
                let geom = ConvGeom { c, h, w: wd, k, stride: *stride, pad: *pad, ho, wo };
                let cols = geom.im2col(&val(*x).data);
                let wv = &val(*w).data;
                let n = ho * wo;
                let ckk = c * k * k;
                {
                    let gb = acc(grads, *b, o);
                    for oc in 0..o {
                        gb[oc] += g[oc * n..(oc + 1) * n].iter().sum::<f64>();
                    }
                }
                {
                    let gw = acc(grads, *w, o * ckk);
                    for oc in 0..o {
                        let grow = &g[oc * n..(oc + 1) * n];
                        for r in 0..ckk {
                            gw[oc * ckk + r] += dot(grow, &cols[r * n..(r + 1) * n]);
                        }
                    }
                }
                if !matches!(self.nodes[x.0].op, Op::Constant) {
                    let mut gcols = vec![0.0; ckk * n];
                    for oc in 0..o {
                        let grow = &g[oc * n..(oc + 1) * n];
                        for r in 0..ckk {
                            let wgt = wv[oc * ckk + r];
                            for (dst, &v) in gcols[r * n..(r + 1) * n].iter_mut().zip(grow) {
                                *dst += wgt * v;
                            }
                        }
                    }
                    geom.col2im(&gcols, acc(grads, *x, c * h * wd));
                }
            }
            Op::CenterRotate(a, angles) => {
                let (n, m) = self.dims2(*a);
                let ga = acc(grads, *a, n * m);
                let k = m / 2;
                for i in 0..n {
                    let (s, c) = angles[i].sin_cos();
                    // Transpose of rotation, then transpose of centring
                    // (which is itself).
                    let mut back = vec![0.0; m];
                    for j in 0..k {
                        let gx = g[i * m + 2 * j];
                        let gy = g[i * m + 2 * j + 1];
                        back[2 * j] = c * gx + s * gy;
                        back[2 * j + 1] = -s * gx + c * gy;
                    }
                    let (mx, my) = point_mean(&back);
                    for j in 0..k {
                        ga[i * m + 2 * j] += back[2 * j] - mx;
                        ga[i * m + 2 * j + 1] += back[2 * j + 1] - my;
                    }
                }
            }
            Op::MaskPenalty {
                kp,
                bank,
                mask_of_row,
                sigma,
            } => {
                let (n, m) = self.dims2(*kp);
                let k = m / 2;
                let src = val(*kp).data.clone();
                let gk = acc(grads, *kp, n * m);
                for i in 0..n {
                    let mask = &bank.masks[mask_of_row[i]];
                    for j in 0..k {
                        let p = crate::geometry::Point2::new(src[i * m + 2 * j], src[i * m + 2 * j + 1]);
                        let (_, d) = gaussian_mask_mass(mask, bank.frame, p, *sigma, true);
                        gk[i * m + 2 * j] += g[i] * d.x / k as f64;
                        gk[i * m + 2 * j + 1] += g[i] * d.y / k as f64;
                    }
                }
            }
        }
    }
}

/// Result of a reverse pass: parameter gradients plus per-node adjoints.
#[derive(Debug, Clone)]
pub struct Backward {
    node_grads: Vec<Option<Vec<f64>>>,
    pub grads: Gradients,
}

impl Backward {
    /// Adjoint of any recorded variable (zeros if it did not influence the
    /// output).
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        match self.node_grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; graph.value(v).numel()],
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[n, m] += a[n, k] * b[k, m]`, row-major, with eight output columns
/// held in registers at a time.
fn gemm_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    const W: usize = 8;
    let full = m - m % W;
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for j in (0..full).step_by(W) {
            let mut lanes = [0.0f64; W];
            for (p, &x) in arow.iter().enumerate() {
                let brow = &b[p * m + j..p * m + j + W];
                for l in 0..W {
                    lanes[l] += x * brow[l];
                }
            }
            for l in 0..W {
                orow[j + l] += lanes[l];
            }
        }
        for j in full..m {
            let mut v = 0.0;
            for (p, &x) in arow.iter().enumerate() {
                v += x * b[p * m + j];
            }
            orow[j] += v;
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Layout of one convolution: input `[c, h, w]`, square kernel `k`,
/// output `[*, ho, wo]`.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Patch matrix `[c*k*k, ho*wo]`; padded taps are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.k * self.k * n];
        self.for_each_tap(|r, o, xi| cols[r * n + o] = x[xi]);
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input layout.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let n = self.ho * self.wo;
        self.for_each_tap(|r, o, xi| gx[xi] += cols[r * n + o]);
    }

    /// Calls `f(patch_row, output_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ic in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ic * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ic * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(r, oy * self.wo + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop pipelines.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn point_mean(row: &[f64]) -> (f64, f64) {
    let k = (row.len() / 2) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for pt in row.chunks(2) {
        sx += pt[0];
        sy += pt[1];
    }
    (sx / k, sy / k)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
