//! Recorded-operation (tape) reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse, propagating only into nodes that transitively depend on a
//! `requires_grad` leaf. Leaf gradients accumulate across calls until
//! [`Tape::zero_grad`].

use super::kernels::{self, axis_split, matmul_plan, mm_nt, mm_tn};
use super::{Float, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: T },
    MulScalar { a: Var, s: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose { a: Var },
    Reshape { a: Var },
    L2Norm { a: Var, axis: usize },
    DivAlong { x: Var, denom: Var, axis: usize },
    Pick { a: Var, index: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A linear record of forward computations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor::new(shape, data).expect("kernel produced consistent shape"), op, rg)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ---- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = kernels::matmul_forward(self.value(a), self.value(b))?;
        Ok(self.derived(shape, data, Op::MatMul { a, b }, &[a, b]))
    }

    /// Elementwise sum; `b` may also match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("add: {:?} and {:?} are not broadcast-compatible", sa, sb));
        }
        let shape = sa.to_vec();
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % period])
            .collect();
        Ok(self.derived(shape, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        self.derived(shape, data, Op::Scale { a, c }, &[a])
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err!("mul_scalar expects a one-element factor, got {:?}", self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| sv * x).collect();
        Ok(self.derived(shape, data, Op::MulScalar { a, s }, &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::ZERO { x } else { T::ZERO })
            .collect();
        self.derived(shape, data, Op::Relu { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = vec![T::ZERO; outer * len * inner];
        kernels::softmax_forward(self.value(a).data(), outer, len, inner, &mut out);
        Ok(self.derived(shape, out, Op::Softmax { a, axis }, &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().ok_or_else(|| dim_err!("log_softmax of a rank-0 tensor"))?;
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; x.len()];
        for (row, orow) in x.chunks(len).zip(out.chunks_mut(len)) {
            let mx = row.iter().copied().fold(row[0], |m, v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.derived(shape, out, Op::LogSoftmax { a }, &[a]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err!("layer_norm of a rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!(
                "layer_norm: input {:?} with gamma {:?} and beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let dn = T::from_f64(d as f64);
        let mut out = vec![T::ZERO; xv.len()];
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.derived(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(dim_err!("concat on axis {axis}: {:?} vs {:?}", base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.derived(shape, data, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let shape_in = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape_in, axis)?;
        if range.start > range.end || range.end > len {
            return Err(dim_err!("slice {:?} out of bounds for axis {axis} of {:?}", range, shape_in));
        }
        let w = range.end - range.start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + range.start) * inner..(o * len + range.end) * inner]);
        }
        let mut shape = shape_in;
        shape[axis] = w;
        Ok(self.derived(shape, data, Op::Slice { a, axis, start: range.start }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("transpose needs rank ≥ 2, got {:?}", s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut data = vec![T::ZERO; src.len()];
        for b in 0..batches {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.derived(shape, data, Op::Transpose { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Euclidean norm along `axis`; the axis is removed from the shape.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape_in = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape_in, axis)?;
        let mut out = vec![T::ZERO; outer * inner];
        kernels::l2_norm_forward(self.value(a).data(), outer, len, inner, &mut out);
        let mut shape = shape_in;
        shape.remove(axis);
        Ok(self.derived(shape, out, Op::L2Norm { a, axis }, &[a]))
    }

    /// Divides `x` by `denom`, broadcast along `axis` (`denom` has `x`'s shape minus that axis).
    pub fn div_along(&mut self, x: Var, denom: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut expect = shape.clone();
        expect.remove(axis);
        if self.shape(denom) != expect.as_slice() {
            return Err(dim_err!("div_along: {:?} by {:?} on axis {axis}", shape, self.shape(denom)));
        }
        let xv = self.value(x).data();
        let dv = self.value(denom).data();
        let mut out = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let idx = (o * len + j) * inner + i;
                    out[idx] = xv[idx] / dv[o * inner + i];
                }
            }
        }
        Ok(self.derived(shape, out, Op::DivAlong { x, denom, axis }, &[x, denom]))
    }

    /// Selects one element of a vector as a rank-0 tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 || index >= s[0] {
            return Err(dim_err!("pick index {index} from {:?}", s));
        }
        let v = self.value(a).data()[index];
        Ok(self.derived(Vec::new(), vec![v], Op::Pick { a, index }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().copied().sum::<T>();
        self.derived(Vec::new(), vec![v], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d(root)/d(leaf) into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        work[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => kernels::add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut work);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], work: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let buf = work[v.0].get_or_insert_with(|| vec![T::ZERO; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (plan, _) = matmul_plan(av.shape(), bv.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                acc(*a, &mut |da| {
                    for bi in 0..plan.batches {
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for bi in 0..plan.batches {
                        mm_tn(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| kernels::add_into(da, g));
                acc(*b, &mut |db| {
                    let p = db.len().max(1);
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % p] += gv;
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * *c;
                }
            }),
            Op::MulScalar { a, s } => {
                let sv = nodes[s.0].value.data()[0];
                let av = nodes[a.0].value.data();
                acc(*a, &mut |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += sv * gv;
                    }
                });
                acc(*s, &mut |ds| {
                    let mut t = T::ZERO;
                    for (&gv, &x) in g.iter().zip(av) {
                        t += gv * x;
                    }
                    ds[0] += t;
                });
            }
            Op::Relu { a } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > T::ZERO {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + ii;
                            let mut dot = T::ZERO;
                            for j in 0..len {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..len {
                                da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                        let gs = grow.iter().copied().sum::<T>();
                        for j in 0..len {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                let rows = rstd.len();
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let dn = T::from_f64(d as f64);
                    for r in 0..rows {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            dx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            kernels::add_into(&mut dp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), *axis).unwrap();
                let w = node.value.shape()[*axis];
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        let dst = &mut da[(o * len + start) * inner..(o * len + start + w) * inner];
                        kernels::add_into(dst, &g[o * w * inner..(o + 1) * w * inner]);
                    }
                });
            }
            Op::Transpose { a } => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batches = s[..s.len() - 2].iter().product::<usize>();
                acc(*a, &mut |da| {
                    for b in 0..batches {
                        let off = b * r * c;
                        for ii in 0..r {
                            for j in 0..c {
                                da[off + ii * c + j] += g[off + j * r + ii];
                            }
                        }
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |da| kernels::add_into(da, g)),
            Op::L2Norm { a, axis } => {
                let xv = nodes[a.0].value.data();
                let nv = node.value.data();
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), *axis).unwrap();
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let n = nv[o * inner + ii];
                            if n == T::ZERO {
                                continue;
                            }
                            let gn = g[o * inner + ii] / n;
                            for j in 0..len {
                                let idx = (o * len + j) * inner + ii;
                                da[idx] += gn * xv[idx];
                            }
                        }
                    }
                });
            }
            Op::DivAlong { x, denom, axis } => {
                let xv = nodes[x.0].value.data();
                let dv = nodes[denom.0].value.data();
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis).unwrap();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for ii in 0..inner {
                                let idx = (o * len + j) * inner + ii;
                                dx[idx] += g[idx] / dv[o * inner + ii];
                            }
                        }
                    }
                });
                acc(*denom, &mut |dd| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let den = dv[o * inner + ii];
                            let mut t = T::ZERO;
                            for j in 0..len {
                                let idx = (o * len + j) * inner + ii;
                                t += g[idx] * xv[idx];
                            }
                            dd[o * inner + ii] -= t / (den * den);
                        }
                    }
                });
            }
            Op::Pick { a, index } => acc(*a, &mut |da| da[*index] += g[0]),
            Op::Sum { a } => acc(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
        }
    }
}
