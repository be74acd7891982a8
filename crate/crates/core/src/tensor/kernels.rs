//! Slice-level numeric kernels shared by eager ops and the tape.

use super::{Float, Tensor};
use crate::error::{dim_err, Result};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn mm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batch layout of a matmul: number of batches, whether `b` is shared, and (m, k, n).
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulPlan {
    pub batches: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(MatmulPlan, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err!("matmul needs rank ≥ 2 operands, got {:?} and {:?}", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {:?} x {:?}", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_b = lead_b.is_empty();
    if !shared_b && lead_a != lead_b {
        return Err(dim_err!("matmul batch extents differ: {:?} x {:?}", a, b));
    }
    let batches: usize = lead_a.iter().product();
    let mut out = lead_a.to_vec();
    out.extend_from_slice(&[m, n]);
    if shared_b {
        // Leading batch dims fold into rows.
        Ok((MatmulPlan { batches: 1, m: m * batches, k, n }, out))
    } else {
        Ok((MatmulPlan { batches, m, k, n }, out))
    }
}

pub(crate) fn matmul_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<usize>, Vec<T>)> {
    let (plan, shape) = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { batches, m, k, n, .. } = plan;
    let mut out = vec![T::ZERO; batches * m * n];
    for bi in 0..batches {
        mm(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok((shape, out))
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {:?}", shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_forward<T: Float>(x: &[T], outer: usize, len: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = x[idx(0)];
            for j in 1..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut total = T::ZERO;
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
}

pub(crate) fn l2_norm_forward<T: Float>(x: &[T], outer: usize, len: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let mut s = T::ZERO;
            for j in 0..len {
                let v = x[(o * len + j) * inner + i];
                s += v * v;
            }
            out[o * inner + i] = s.sqrt();
        }
    }
}

pub(crate) fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
