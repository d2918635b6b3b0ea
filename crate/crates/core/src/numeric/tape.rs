//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, so the graph is acyclic by construction.
//! Non-smooth operations (relu, max-pool, max/min reductions, clamped log,
//! guarded sqrt) append the branch they took to a kink signature, which the
//! finite-difference checker uses to skip coordinates that cross a kink.

use crate::error::{shape_err, Error, Result};
use crate::numeric::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position of a parameter in registration order.
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    /// 3x3 convolution, stride 1, zero padding 1, NHWC layout.
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// 2x2 max pool, stride 2; `argmax` holds the flat input index per output.
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    SqDist(Var, Var),
    SqrtGuarded(Var),
    SoftmaxRows(Var),
    LogClamped(Var, f64),
    Pick(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    MaxAll(Var, usize),
    MinAll(Var, usize),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) | Op::Sub(..) | Op::AddRowBias(..) | Op::AddScalar(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Conv3x3 { .. } | Op::MaxPool2 { .. } => "conv-like",
            Op::Reshape(_) | Op::GatherRows(..) | Op::Pick(..) => "composite",
            Op::GroupMean(..) | Op::Mean(_) | Op::Sum(_) => "mean",
            Op::SqDist(..) | Op::SqrtGuarded(_) => "distance",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogClamped(..) => "log",
            Op::MaxAll(..) | Op::MinAll(..) => "extremum",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRowBias(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Conv3x3 { input, weight, bias } => vec![*input, *weight, *bias],
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::MaxPool2 { input: a, .. }
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::GroupMean(a, _)
            | Op::SqrtGuarded(a)
            | Op::SoftmaxRows(a)
            | Op::LogClamped(a, _)
            | Op::Pick(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::MaxAll(a, _)
            | Op::MinAll(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<F> {
    pub op: Op,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: Vec<Var>,
    verify: bool,
    kinks: Vec<u64>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            verify: false,
            kinks: Vec::new(),
        }
    }

    /// A tape that rejects any non-finite forward value or adjoint.
    pub fn verifying() -> Self {
        Self {
            verify: true,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Branches taken by every non-smooth op, in tape order.
    pub fn kink_signature(&self) -> &[u64] {
        &self.kinks
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> Result<Var> {
        let id = self.nodes.len();
        if self.verify && !value.all_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.kind(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Result<Var> {
        let id = self.params.len();
        let v = self.push(Op::Param(id), value)?;
        self.params.push(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        self.push(Op::Sub(a, b), value)
    }

    /// `[m,n] + [n]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(shape_err(
                "add_row_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::AddRowBias(x, bias), value)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::from_f64_lossy(c);
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).scale(F::from_f64_lossy(c));
        self.push(Op::Scale(x, c), value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = xv.map(|v| if v > F::zero() { v } else { F::zero() });
        self.kinks.extend(xv.data().iter().map(|&v| u64::from(v > F::zero())));
        self.push(Op::Relu(x), value)
    }

    /// `input [n,h,w,cin]`, `weight [3,3,cin,cout]`, `bias [cout]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[3] || bv.len() != ws[3] {
            return Err(shape_err(
                "conv3x3",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", bv.shape()),
            ));
        }
        let (n, h, w, cin, cout) = (xs[0], xs[1], xs[2], xs[3], ws[3]);
        let (x, wt, b) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![F::zero(); n * h * w * cout];
        for img in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let o_base = ((img * h + y) * w + xx) * cout;
                    let o = &mut out[o_base..o_base + cout];
                    o.copy_from_slice(b);
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i_base = ((img * h + iy as usize) * w + ix as usize) * cin;
                            for ci in 0..cin {
                                let a = x[i_base + ci];
                                let w_base = ((ky * 3 + kx) * cin + ci) * cout;
                                for (ov, &wvv) in o.iter_mut().zip(&wt[w_base..w_base + cout]) {
                                    *ov = *ov + a * wvv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, h, w, cout], out)?;
        self.push(Op::Conv3x3 { input, weight, bias }, value)
    }

    /// 2x2 max pooling with stride 2 over NHWC; odd trailing rows/cols are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xv = self.value(input);
        let xs = xv.shape();
        if xs.len() != 4 || xs[1] < 2 || xs[2] < 2 {
            return Err(shape_err("max_pool2", format!("{xs:?}")));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = xv.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for img in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = ((img * h + 2 * y) * w + 2 * xx) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((img * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        self.kinks.extend(argmax.iter().map(|&i| i as u64));
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        self.push(Op::MaxPool2 { input, argmax }, value)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    /// Selects rows (leading-axis slices) of a 2-D value.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("rows {rows:?} from {:?}", xv.shape())));
        }
        let data: Vec<F> = rows.iter().flat_map(|&r| xv.row(r).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), xv.cols()], data)?;
        self.push(Op::GatherRows(x, rows.to_vec()), value)
    }

    /// Row `g` of the output is the mean of the rows of `x` listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || groups.is_empty() {
            return Err(shape_err("group_mean", format!("{:?}", xv.shape())));
        }
        let d = xv.cols();
        let mut data = vec![F::zero(); groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::EmptyGroup(g));
            }
            if let Some(&bad) = members.iter().find(|&&r| r >= xv.rows()) {
                return Err(shape_err("group_mean", format!("row {bad} out of range")));
            }
            let inv = F::one() / F::from_usize(members.len()).unwrap();
            let out = &mut data[g * d..(g + 1) * d];
            for &r in members {
                for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                    *o = *o + v;
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let value = Tensor::new(vec![groups.len(), d], data)?;
        self.push(Op::GroupMean(x, groups.to_vec()), value)
    }

    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sq_dist(self.value(b))?;
        self.push(Op::SqDist(a, b), value)
    }

    /// Elementwise `sqrt`; the derivative at exactly 0 is taken as 0.
    pub fn sqrt_guarded(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.data().iter().any(|&v| v < F::zero()) {
            return Err(Error::Invalid("sqrt of a negative value".into()));
        }
        self.kinks.extend(xv.data().iter().map(|&v| u64::from(v == F::zero())));
        let value = xv.map(|v| v.sqrt());
        self.push(Op::SqrtGuarded(x), value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows()?;
        self.push(Op::SoftmaxRows(x), value)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let fl = F::from_f64_lossy(floor);
        let xv = &self.nodes[x.0].value;
        self.kinks.extend(xv.data().iter().map(|&v| u64::from(v <= fl)));
        let value = xv.map(|v| v.max(fl).ln());
        self.push(Op::LogClamped(x, floor), value)
    }

    /// Selects elements by flat index into a 1-D result.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= xv.len()) {
            return Err(shape_err(
                "pick",
                format!("indices {indices:?} from {} elements", xv.len()),
            ));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        self.push(Op::Pick(x, indices.to_vec()), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / F::from_usize(xv.len()).unwrap());
        self.push(Op::Mean(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let idx = crate::numeric::tensor::argmax(xv.data());
        let value = Tensor::scalar(xv.data()[idx]);
        self.kinks.push(idx as u64);
        self.push(Op::MaxAll(x, idx), value)
    }

    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let idx = crate::numeric::tensor::argmin(xv.data());
        let value = Tensor::scalar(xv.data()[idx]);
        self.kinks.push(idx as u64);
        self.push(Op::MinAll(x, idx), value)
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    /// Nodes that do not influence the loss get zero adjoints.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<F>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if self.verify && !g.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: self.nodes[id].op.kind(),
                });
            }
            for (parent, contrib) in self.local_grads(id, &g)? {
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            adj[id] = Some(g);
        }

        Ok(self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                adj.get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
            })
            .collect())
    }

    /// Gradients of `loss` for every registered parameter, in registration order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor<F>>> {
        let mut adj = self.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|p| std::mem::replace(&mut adj[p.0], Tensor::scalar(F::zero())))
            .collect())
    }

    fn local_grads(&self, id: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()?)?;
                let db = val(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-F::one()))],
            Op::AddRowBias(x, b) => {
                let n = val(*b).len();
                let mut db = vec![F::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(val(*b).shape().to_vec(), db)?)]
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), g.data().to_vec())?)]
            }
            Op::Scale(x, c) => vec![(*x, g.scale(F::from_f64_lossy(*c)))],
            Op::Relu(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::Conv3x3 { input, weight, bias } => {
                let (xv, wv) = (val(*input), val(*weight));
                let (n, h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let cout = wv.shape()[3];
                let (x, wt, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![F::zero(); x.len()];
                let mut dw = vec![F::zero(); wt.len()];
                let mut db = vec![F::zero(); cout];
                for img in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let o_base = ((img * h + y) * w + xx) * cout;
                            let go = &gd[o_base..o_base + cout];
                            for (acc, &v) in db.iter_mut().zip(go) {
                                *acc = *acc + v;
                            }
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let i_base = ((img * h + iy as usize) * w + ix as usize) * cin;
                                    for ci in 0..cin {
                                        let a = x[i_base + ci];
                                        let w_base = ((ky * 3 + kx) * cin + ci) * cout;
                                        let mut acc = F::zero();
                                        for co in 0..cout {
                                            dw[w_base + co] = dw[w_base + co] + a * go[co];
                                            acc = acc + wt[w_base + co] * go[co];
                                        }
                                        dx[i_base + ci] = dx[i_base + ci] + acc;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*weight, Tensor::new(wv.shape().to_vec(), dw)?),
                    (*bias, Tensor::new(val(*bias).shape().to_vec(), db)?),
                ]
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![F::zero(); val(*input).len()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx[src] = dx[src] + d;
                }
                vec![(*input, Tensor::new(val(*input).shape().to_vec(), dx)?)]
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for (r_out, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] = dx[r * d + c] + g.data()[r_out * d + c];
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::GroupMean(x, groups) => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = F::one() / F::from_usize(members.len()).unwrap();
                    for &r in members {
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + g.data()[gi * d + c] * inv;
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (q, c, d) = (av.rows(), bv.rows(), av.cols());
                let two = F::one() + F::one();
                let mut da = vec![F::zero(); av.len()];
                let mut db = vec![F::zero(); bv.len()];
                for i in 0..q {
                    for j in 0..c {
                        let gij = g.data()[i * c + j] * two;
                        if gij == F::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                            da[i * d + k] = da[i * d + k] + gij * diff;
                            db[j * d + k] = db[j * d + k] - gij * diff;
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da)?),
                    (*b, Tensor::new(bv.shape().to_vec(), db)?),
                ]
            }
            Op::SqrtGuarded(x) => {
                let two = F::one() + F::one();
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| if y > F::zero() { d / (two * y) } else { F::zero() })
                    .collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogClamped(x, floor) => {
                let fl = F::from_f64_lossy(*floor);
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > fl { d / v } else { F::zero() })
                    .collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::Pick(x, indices) => {
                let mut dx = vec![F::zero(); val(*x).len()];
                for (&i, &d) in indices.iter().zip(g.data()) {
                    dx[i] = dx[i] + d;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let v = g.item() / F::from_usize(n).unwrap();
                vec![(*x, Tensor::full(val(*x).shape(), v))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::MaxAll(x, idx) | Op::MinAll(x, idx) => {
                let mut dx = Tensor::zeros(val(*x).shape());
                dx.data_mut()[*idx] = g.item();
                vec![(*x, dx)]
            }
        };
        debug_assert!(out.iter().all(|(p, _)| node.op.parents().contains(p)));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        // sum(square(x)) as the squared distance to the origin
        let xr = tape.reshape(x, vec![1, 2]).unwrap();
        let zero = tape.input(Tensor::zeros(&[1, 2])).unwrap();
        let d = tape.sq_dist(xr, zero).unwrap();
        let loss = tape.sum(d).unwrap();
        let grads = tape.param_grads(loss).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.5, 0.25, 9.0])).unwrap();
        let loss = tape.sum(x).unwrap();
        assert_eq!(tape.param_grads(loss).unwrap()[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let p = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.param_grads(loss).unwrap();
        assert_eq!(grads[1], Tensor::zeros(&[2, 2]));
        let _ = p;
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn verifying_tape_names_offending_node() {
        let mut tape = Tape::<f64>::verifying();
        let x = tape.input(t(&[1], &[-1.0])).unwrap();
        let err = tape.log_clamped(x, 0.0).unwrap_err();
        // ln(max(-1, 0)) = -inf
        assert!(matches!(err, Error::NonFinite { node: 1, op: "log" }), "{err}");
    }

    #[test]
    fn relu_gradient_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        assert_eq!(tape.param_grads(loss).unwrap()[0].data(), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.kink_signature(), &[0, 0, 1]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        // one image, 2x2, one channel
        let x = tape.param(t(&[1, 2, 2, 1], &[1.0, 5.0, 3.0, 2.0])).unwrap();
        let p = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let loss = tape.sum(p).unwrap();
        assert_eq!(tape.param_grads(loss).unwrap()[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.param(t(&[3, 3, 1, 1], &k)).unwrap();
        let b = tape.param(t(&[1], &[0.5])).unwrap();
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }
}
