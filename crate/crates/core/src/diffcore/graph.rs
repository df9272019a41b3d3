use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Guard below which a vector is treated as zero by normalization and norms.
pub const NORM_EPS: f64 = 1e-12;

/// Sentinel gather index producing a constant zero (used for zero padding).
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    Norm(Var),
    Sum(Var),
    Mean(Var),
    ColSum(Var),
    MaxRows(Var, Vec<usize>),
    SmoothL1(Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Rc<Vec<u32>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly evaluated computation tape.
///
/// Every op computes its value on creation; [`Graph::backward`] walks the
/// tape in reverse. Parameters are looked up by name in a borrowed
/// [`ParamStore`] and each name maps to a single node, so gradients from
/// repeated uses accumulate.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
    kink_margin: f64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any non-smooth op input to its kink
    /// (ReLU at 0, smooth-L1 at |t| = 1, max-pool ties, norms and
    /// normalized rows at 0).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn note_kink(&mut self, d: f64) {
        if d < self.kink_margin {
            self.kink_margin = d;
        }
    }

    /// Constant input; receives no gradient that is reported.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Trainable parameter node; the same name always yields the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = self.push(t, Op::Param);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = mm(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `a[r, c] + b[1, c]`, broadcasting `b` over the leading dimension.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % c])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `out[i, j] = m[i, j] * s[i]`, where `s` holds one value per row of `m`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (tm, ts) = (self.value(m), self.value(s));
        if ts.len() != tm.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", tm.shape(), ts.shape()),
            ));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * ts.data()[i / c])
            .collect();
        let t = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows(m, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x + k);
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.note_kink(m);
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// `max(0, x)`; the hinge `[x]_+` of the triplet losses.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Row-wise L2 normalization; rows with norm `<= NORM_EPS` become zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        let mut smallest = f64::INFINITY;
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            smallest = smallest.min(n);
            if n > NORM_EPS {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(0.0);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.note_kink(smallest);
        self.push(t, Op::L2NormalizeRows(a))
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self
            .value(a)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.note_kink(n);
        self.push(Tensor::scalar(n), Op::Norm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum over rows: `[r, c] -> [1, c]`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::row(out), Op::ColSum(a))
    }

    /// Max over rows for every column: `[r, c] -> [1, c]` (max-pool over
    /// locations). Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut arg = vec![0usize; c];
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut second = vec![f64::NEG_INFINITY; c];
        for i in 0..r {
            for j in 0..c {
                let v = t.data()[i * c + j];
                if v > out[j] {
                    second[j] = out[j];
                    out[j] = v;
                    arg[j] = i;
                } else if v > second[j] {
                    second[j] = v;
                }
            }
        }
        if r > 1 {
            let gap = out
                .iter()
                .zip(&second)
                .fold(f64::INFINITY, |m, (a, b)| m.min(a - b));
            self.note_kink(gap);
        }
        self.push(Tensor::row(out), Op::MaxRows(a, arg))
    }

    /// Elementwise smooth-L1 with threshold 1: `0.5 t^2` for `|t| < 1`,
    /// `|t| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let m = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min((x.abs() - 1.0).abs()));
        self.note_kink(m);
        let t = self.map(a, smooth_l1);
        self.push(t, Op::SmoothL1(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transposed();
        self.push(t, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// `out.flat[i] = a.flat[index[i]]`, or zero where `index[i]` is
    /// [`GATHER_ZERO`]. Covers im2col, point resampling and crops.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<u32>>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output {:?}", index.len(), shape),
            ));
        }
        let mut out = Vec::with_capacity(n);
        for &ix in index.iter() {
            if ix == GATHER_ZERO {
                out.push(0.0);
            } else {
                let v = src.get(ix as usize).ok_or_else(|| {
                    Error::shape("gather", format!("index {ix} out of {}", src.len()))
                })?;
                out.push(*v);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather(a, index)))
    }

    /// Reverse pass from a scalar `root`; returns gradients for every
    /// parameter of the store (zeros for parameters the graph never used).
    pub fn backward(&self, root: Var) -> Result<ParamStore> {
        let grads = self.backward_nodes(root)?;
        let mut out = self.params.zeros_like();
        for (name, v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                *out.get_mut(name).expect("param from store") = g.clone();
            }
        }
        Ok(out)
    }

    /// Gradient of `root` with respect to an input or parameter node.
    pub fn grad_of(&self, root: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.backward_nodes(root)?;
        Ok(grads[wrt.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape_of(wrt))))
    }

    fn backward_nodes(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rt.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            // Leaf and parameter gradients stay in place for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = mm_nt(g.data(), tb.data(), m, n, k);
                    let db = mm_tn(ta.data(), g.data(), m, k, n);
                    accum(&mut grads, *a, ta.shape(), da);
                    accum(&mut grads, *b, tb.shape(), db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.shape(), g.data().to_vec());
                    accum(&mut grads, *b, &g.shape().to_vec(), g.into_data());
                }
                Op::AddRow(a, b) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accum(&mut grads, *b, self.shape_of(*b), db);
                    accum(&mut grads, *a, &g.shape().to_vec(), g.into_data());
                }
                Op::Sub(a, b) => {
                    let neg = g.data().iter().map(|v| -v).collect();
                    accum(&mut grads, *b, g.shape(), neg);
                    accum(&mut grads, *a, &g.shape().to_vec(), g.into_data());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let db = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accum(&mut grads, *a, ta.shape(), da);
                    accum(&mut grads, *b, tb.shape(), db);
                }
                Op::ScaleRows(m, s) => {
                    let (tm, ts) = (self.value(*m), self.value(*s));
                    let c = tm.cols();
                    let mut dm = vec![0.0; tm.len()];
                    let mut ds = vec![0.0; ts.len()];
                    for (i, (gv, mv)) in g.data().iter().zip(tm.data()).enumerate() {
                        dm[i] = gv * ts.data()[i / c];
                        ds[i / c] += gv * mv;
                    }
                    accum(&mut grads, *m, tm.shape(), dm);
                    accum(&mut grads, *s, ts.shape(), ds);
                }
                Op::Scale(a, k) => {
                    let d = g.data().iter().map(|v| v * k).collect();
                    accum(&mut grads, *a, g.shape(), d);
                }
                Op::AddScalar(a) => {
                    accum(&mut grads, *a, &g.shape().to_vec(), g.into_data());
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::SoftmaxRows(a) => {
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accum(&mut grads, *a, y.shape(), d);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, (xr, yr)), gr) in d
                        .chunks_mut(c)
                        .zip(x.data().chunks(c).zip(y.data().chunks(c)))
                        .zip(g.data().chunks(c))
                    {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > NORM_EPS {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dr[j] = (gr[j] - yr[j] * dot) / n;
                            }
                        }
                    }
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::Norm(a) => {
                    let x = self.value(*a);
                    let n = y.item();
                    let gv = g.item();
                    let d = if n > NORM_EPS {
                        x.data().iter().map(|v| gv * v / n).collect()
                    } else {
                        vec![0.0; x.len()]
                    };
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accum(&mut grads, *a, x.shape(), vec![g.item(); x.len()]);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let v = g.item() / x.len() as f64;
                    accum(&mut grads, *a, x.shape(), vec![v; x.len()]);
                }
                Op::ColSum(a) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let d = (0..x.len()).map(|i| g.data()[i % c]).collect();
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::MaxRows(a, arg) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut d = vec![0.0; x.len()];
                    for (j, &r) in arg.iter().enumerate() {
                        d[r * c + j] = g.data()[j];
                    }
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::SmoothL1(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| g * smooth_l1_grad(*x))
                        .collect();
                    accum(&mut grads, *a, x.shape(), d);
                }
                Op::Transpose(a) => {
                    let d = g.transposed();
                    accum(&mut grads, *a, self.shape_of(*a), d.into_data());
                }
                Op::Reshape(a) => {
                    accum(&mut grads, *a, self.shape_of(*a), g.into_data());
                }
                Op::Gather(a, index) => {
                    let x = self.value(*a);
                    let mut d = vec![0.0; x.len()];
                    for (&ix, gv) in index.iter().zip(g.data()) {
                        if ix != GATHER_ZERO {
                            d[ix as usize] += gv;
                        }
                    }
                    accum(&mut grads, *a, x.shape(), d);
                }
            }
        }
        Ok(grads)
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape"));
        }
    }
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `a[m, k] * b[k, n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m, n] * b[k, n]^T -> [m, k]`.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m, k]^T * g[m, n] -> [k, n]`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}
