use super::{
    axis_split, broadcast_shape, broadcast_strides, contiguous_strides, Scalar, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Matrix product over the last two axes. Leading axes are batch axes; they
/// must match, or one side must be a plain matrix that is shared across the
/// batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, false, b, false)
}

/// [`matmul`] with either operand optionally transposed in its last two
/// axes, without materialising the transpose.
pub fn matmul_ex<T: Scalar>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", a.shape(), b.shape());
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ra, ca) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (rb, cb) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    let (m, k, rsa, csa) = if trans_a { (ca, ra, 1, ca) } else { (ra, ca, ca, 1) };
    let (kb, n, rsb, csb) = if trans_b { (cb, rb, 1, cb) } else { (rb, cb, cb, 1) };
    if k != kb {
        return Err(err());
    }
    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let batch_shape: Vec<usize> = if b_batch.is_empty() {
        a_batch.to_vec()
    } else if a_batch.is_empty() || a_batch == b_batch {
        b_batch.to_vec()
    } else {
        return Err(err());
    };
    let batch: usize = batch_shape.iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    let (a_step, b_step) = (
        if a_batch.is_empty() { 0 } else { ra * ca },
        if b_batch.is_empty() { 0 } else { rb * cb },
    );
    let ad = a.data();
    let bd = b.data();
    if b_batch.is_empty() && !trans_a && batch > 1 {
        // Shared right operand: one tall product.
        unsafe {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                ad.as_ptr(),
                rsa as isize,
                csa as isize,
                bd.as_ptr(),
                rsb as isize,
                csb as isize,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    } else {
        for i in 0..batch {
            let ao = &ad[i * a_step..i * a_step + ra * ca];
            let bo = &bd[i * b_step..i * b_step + rb * cb];
            let co = &mut out[i * m * n..(i + 1) * m * n];
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    ao.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    bo.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    T::zero(),
                    co.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    let mut shape = batch_shape;
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

/// Swaps the last two axes.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let r = a.rank();
    if r < 2 {
        return Err(Error::Axis { axis: 1, rank: r });
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    permute(a, &axes)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let r = a.rank();
    let mut seen = vec![false; r];
    if axes.len() != r {
        return Err(Error::shape("permute", a.shape(), axes));
    }
    for &ax in axes {
        if ax >= r || seen[ax] {
            return Err(Error::shape("permute", a.shape(), axes));
        }
        seen[ax] = true;
    }
    let in_strides = contiguous_strides(a.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let src = a.data();
    let mut out = Vec::with_capacity(a.numel());
    if r == 0 {
        out.extend_from_slice(src);
    } else {
        let last = r - 1;
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        let total = a.numel();
        while out.len() < total {
            let (len, st) = (out_shape[last], strides[last]);
            for j in 0..len {
                out.push(src[off + j * st]);
            }
            // advance the odometer over the leading axes
            let mut ax = last;
            loop {
                if ax == 0 {
                    break;
                }
                ax -= 1;
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// `b` matches `out` in every axis but the last, where it has extent 1.
fn is_column(b: &[usize], out: &[usize]) -> bool {
    let r = out.len();
    if r == 0 || b.is_empty() || b[b.len() - 1] != 1 {
        return false;
    }
    let lead = &b[..b.len() - 1];
    let out_lead = &out[..r - 1];
    out_lead.ends_with(lead) && out_lead[..out_lead.len() - lead.len()].iter().all(|&x| x == 1)
}

fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let n: usize = out_shape.iter().product();
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if a.numel() == 1 {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else if a.numel() == n && out_shape.ends_with(b.shape()) {
        let m = b.numel();
        let mut out = Vec::with_capacity(n);
        for row in ad.chunks_exact(m) {
            out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if a.numel() == n && is_column(b.shape(), &out_shape) {
        let cols = out_shape[out_shape.len() - 1];
        let mut out = Vec::with_capacity(n);
        for (row, &y) in ad.chunks_exact(cols).zip(bd) {
            out.extend(row.iter().map(|&x| f(x, y)));
        }
        out
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let r = out_shape.len();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let (mut ia, mut ib) = (0usize, 0usize);
        let last = r - 1;
        while out.len() < n {
            let (len, sta, stb) = (out_shape[last], sa[last], sb[last]);
            for j in 0..len {
                out.push(f(ad[ia + j * sta], bd[ib + j * stb]));
            }
            let mut ax = last;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                ia -= sa[ax] * out_shape[ax];
                ib -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        out
    };
    Ok(Tensor::from_parts(out_shape, data))
}

/// Element-wise binary operation with numpy-style broadcasting. Division
/// fails on any zero denominator; see [`div_guarded`].
pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match op {
        BinaryOp::Add => zip_broadcast("add", a, b, |x, y| x + y),
        BinaryOp::Sub => zip_broadcast("sub", a, b, |x, y| x - y),
        BinaryOp::Mul => zip_broadcast("mul", a, b, |x, y| x * y),
        BinaryOp::Div => {
            let out = zip_broadcast("div", a, b, |x, y| x / y)?;
            if b.data().iter().any(|y| y.is_zero()) {
                // locate the first offending output element
                let ones = Tensor::ones(a.shape());
                let den = zip_broadcast("div", &ones, b, |_, y| y)?;
                let index = den.data().iter().position(|y| y.is_zero()).unwrap_or(0);
                return Err(Error::DivisionByZero { index });
            }
            Ok(out)
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Mul, a, b)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Div, a, b)
}

/// Denominator after the epsilon guard: magnitudes below `eps` are lifted
/// to `eps`, keeping the sign (zero counts as positive).
#[inline]
pub(crate) fn guard<T: Scalar>(y: T, eps: T) -> T {
    if y.abs() >= eps {
        y
    } else if y < T::zero() {
        -eps
    } else {
        eps
    }
}

/// Division whose denominators are guarded by `eps`; never produces
/// Inf/NaN on finite input.
pub fn div_guarded<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    zip_broadcast("div", a, b, |x, y| x / guard(y, eps))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[inline]
pub(crate) fn elu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.exp())
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_scalar)
}

/// ELU with alpha = 1.
pub fn elu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(elu_scalar)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Softmax along the last axis, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = *x.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Reduction along `axis`, keeping it with extent 1.
pub fn reduce_keepdim<T: Scalar>(kind: ReduceOp, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let init = match kind {
        ReduceOp::Max => T::neg_infinity(),
        _ => T::zero(),
    };
    let mut out = vec![init; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
            match kind {
                ReduceOp::Max => dst.iter_mut().zip(row).for_each(|(d, &v)| *d = d.max(v)),
                _ => dst.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v),
            }
        }
    }
    if kind == ReduceOp::Mean {
        let inv = T::one() / T::lit(len as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

/// Reduction along `axis`, dropping it.
pub fn reduce<T: Scalar>(kind: ReduceOp, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let kept = reduce_keepdim(kind, x, axis)?;
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    kept.reshape(&shape)
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().copied().sum()
}

/// Inclusive prefix sum along `axis`, accumulated in index order.
pub fn cumsum<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.to_vec();
    for o in 0..outer {
        let block = &mut out[o * len * inner..(o + 1) * len * inner];
        for l in 1..len {
            let (prev, cur) = block.split_at_mut(l * inner);
            let prev = &prev[(l - 1) * inner..];
            cur[..inner]
                .iter_mut()
                .zip(prev)
                .for_each(|(c, &p)| *c = *c + p);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Reverse (suffix) cumulative sum; the adjoint of [`cumsum`].
pub(crate) fn cumsum_rev<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.to_vec();
    for o in 0..outer {
        let block = &mut out[o * len * inner..(o + 1) * len * inner];
        for l in (0..len.saturating_sub(1)).rev() {
            let (cur, next) = block.split_at_mut((l + 1) * inner);
            let cur = &mut cur[l * inner..];
            cur.iter_mut()
                .zip(&next[..inner])
                .for_each(|(c, &n)| *c = *c + n);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Divides each last-axis row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let cols = *x.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let inv = T::one() / norm.max(eps);
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let out_shape = g.shape();
    if broadcast_shape(shape, out_shape).as_deref() != Some(out_shape) {
        return Err(Error::shape("sum_to_shape", out_shape, shape));
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![T::zero(); n];
    let src = g.data();
    if n == 1 {
        acc[0] = src.iter().copied().sum();
    } else if out_shape.ends_with(shape) {
        for (i, &v) in src.iter().enumerate() {
            acc[i % n] = acc[i % n] + v;
        }
    } else {
        let st = broadcast_strides(shape, out_shape);
        let r = out_shape.len();
        let last = r - 1;
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        let mut pos = 0usize;
        while pos < src.len() {
            let (len, s) = (out_shape[last], st[last]);
            for j in 0..len {
                acc[off + j * s] = acc[off + j * s] + src[pos + j];
            }
            pos += len;
            let mut ax = last;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                off += st[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= st[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), acc))
}

/// Selects rows of a `[rows, cols]` table; output shape `[ids.len(), cols]`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape("gather_rows", table.shape(), &[ids.len()]));
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let src = table.data();
    let mut out = Vec::with_capacity(ids.len() * cols);
    for (pos, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::Input(format!(
                "row id {id} at position {pos} out of range for table with {rows} rows"
            )));
        }
        out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), cols], out))
}

/// Slice `[start, start + len)` of the leading axis.
pub fn narrow0<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let lead = *x.shape().first().ok_or(Error::Axis { axis: 0, rank: 0 })?;
    if start + len > lead {
        return Err(Error::shape("narrow", x.shape(), &[start, len]));
    }
    let inner = x.numel() / lead.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::from_parts(
        shape,
        x.data()[start * inner..(start + len) * inner].to_vec(),
    ))
}

/// Concatenation along the leading axis.
pub fn concat0<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    for p in parts {
        if p.rank() == 0 || &p.shape()[1..] != tail {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = lead;
    Ok(Tensor::from_parts(shape, data))
}
