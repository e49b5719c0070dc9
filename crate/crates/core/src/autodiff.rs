//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] wraps a tensor together with the operation that produced it.
//! Operations whose inputs do not require gradients produce constants and
//! keep no history, so inference paths free intermediates as they go.
//! [`grad`] walks the recorded graph from a scalar loss back to the
//! requested parameters.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self as tn, axis_split, ReduceOp, Scalar, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Var<T>>,
    backward: Backward<T>,
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

#[derive(Clone)]
pub struct Var<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}(grad={}) {:?}", self.0.id, self.0.requires_grad, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// Differentiable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::make(
                value,
                true,
                Some(GradFn {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.matmul_ex(false, rhs, false)
    }

    /// `op(self) · op(rhs)` with optional transposes of the last two axes.
    pub fn matmul_ex(&self, trans_a: bool, rhs: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = rhs.value().clone();
        let out = tn::matmul_ex(&a, trans_a, &b, trans_b)?;
        Ok(Self::from_op(out, vec![self.clone(), rhs.clone()], move |g| {
            let da = if trans_a {
                tn::matmul_ex(&b, trans_b, g, true)?
            } else {
                tn::matmul_ex(g, false, &b, !trans_b)?
            };
            let db = if b.rank() == 2 && a.rank() > 2 && !trans_a {
                // shared right operand: contract over the flattened batch
                let k = a.shape()[a.rank() - 1];
                let a2 = a.reshape(&[a.numel() / k, k])?;
                let n = g.shape()[g.rank() - 1];
                let g2 = g.reshape(&[g.numel() / n, n])?;
                if trans_b {
                    tn::matmul_ex(&g2, true, &a2, false)?
                } else {
                    tn::matmul_ex(&a2, true, &g2, false)?
                }
            } else if trans_b {
                tn::matmul_ex(g, true, &a, trans_a)?
            } else {
                tn::matmul_ex(&a, !trans_a, g, false)?
            };
            Ok(vec![
                Some(collapse_batch(da, a.shape())?),
                Some(collapse_batch(db, b.shape())?),
            ])
        }))
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let out = tn::permute(self.value(), axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(tn::permute(g, &inverse)?)])
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let original = self.shape().to_vec();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(g.reshape(&original)?)])
        }))
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = tn::add(self.value(), rhs.value())?;
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Ok(Self::from_op(out, vec![self.clone(), rhs.clone()], move |g| {
            Ok(vec![
                Some(tn::sum_to_shape(g, &sa)?),
                Some(tn::sum_to_shape(g, &sb)?),
            ])
        }))
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = tn::sub(self.value(), rhs.value())?;
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Ok(Self::from_op(out, vec![self.clone(), rhs.clone()], move |g| {
            Ok(vec![
                Some(tn::sum_to_shape(g, &sa)?),
                Some(tn::sum_to_shape(&tn::scale(g, -T::one()), &sb)?),
            ])
        }))
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value().clone(), rhs.value().clone());
        let out = tn::mul(&a, &b)?;
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Self::from_op(out, vec![self.clone(), rhs.clone()], move |g| {
            let da = if need_a {
                Some(tn::sum_to_shape(&tn::mul(g, &b)?, a.shape())?)
            } else {
                None
            };
            let db = if need_b {
                Some(tn::sum_to_shape(&tn::mul(g, &a)?, b.shape())?)
            } else {
                None
            };
            Ok(vec![da, db])
        }))
    }

    /// Division; a zero denominator element is an error.
    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        tn::div(self.value(), rhs.value())?;
        self.div_impl(rhs, None)
    }

    /// Division with denominators guarded by `eps` (see [`tn::div_guarded`]).
    pub fn div_guarded(&self, rhs: &Var<T>, eps: T) -> Result<Var<T>> {
        self.div_impl(rhs, Some(eps))
    }

    fn div_impl(&self, rhs: &Var<T>, eps: Option<T>) -> Result<Var<T>> {
        let (a, b) = (self.value().clone(), rhs.value().clone());
        let eps_v = eps.unwrap_or(T::zero());
        let out = tn::div_guarded(&a, &b, eps_v)?;
        let need_b = rhs.requires_grad();
        Ok(Self::from_op(out, vec![self.clone(), rhs.clone()], move |g| {
            let bg = b.map(|y| tn::guard(y, eps_v));
            let da = tn::sum_to_shape(&tn::div_guarded(g, &bg, eps_v)?, a.shape())?;
            let db = if need_b {
                // d(a/b)/db = -a/b² where the guard is inactive, 0 where clamped
                let inv_sq = b.map(|y| {
                    if y.abs() >= eps_v && !y.is_zero() {
                        -T::one() / (y * y)
                    } else {
                        T::zero()
                    }
                });
                let t = tn::mul(&tn::mul(g, &a)?, &inv_sq)?;
                Some(tn::sum_to_shape(&t, b.shape())?)
            } else {
                None
            };
            Ok(vec![Some(da), db])
        }))
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = tn::scale(self.value(), s);
        Self::from_op(out, vec![self.clone()], move |g| Ok(vec![Some(tn::scale(g, s))]))
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let out = self.value().map(|x| x + s);
        Self::from_op(out, vec![self.clone()], |g| Ok(vec![Some(g.clone())]))
    }

    pub fn exp(&self) -> Var<T> {
        let out = tn::exp(self.value());
        let y = out.clone();
        Self::from_op(out, vec![self.clone()], move |g| Ok(vec![Some(tn::mul(g, &y)?)]))
    }

    pub fn gelu(&self) -> Var<T> {
        let x = self.value().clone();
        let out = tn::gelu(&x);
        Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(tn::mul(g, &x.map(tn::gelu_grad_scalar))?)])
        })
    }

    pub fn elu(&self) -> Var<T> {
        let x = self.value().clone();
        let out = tn::elu(&x);
        Self::from_op(out, vec![self.clone()], move |g| {
            let d = x.map(|v| if v > T::zero() { T::one() } else { v.exp() });
            Ok(vec![Some(tn::mul(g, &d)?)])
        })
    }

    /// `elu(x) + 1` in one pass: `x + 1` for positive `x`, `exp(x)` otherwise.
    pub fn elu_plus_one(&self) -> Var<T> {
        let out = self.value().map(|v| if v > T::zero() { v + T::one() } else { v.exp() });
        let y = out.clone();
        Self::from_op(out, vec![self.clone()], move |g| {
            let d = y.map(|v| if v > T::one() { T::one() } else { v });
            Ok(vec![Some(tn::mul(g, &d)?)])
        })
    }

    // ---- row-wise ---------------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax_rows(&self) -> Result<Var<T>> {
        let out = tn::softmax_rows(self.value())?;
        let y = out.clone();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(softmax_backward(&y, g, T::one()))])
        }))
    }

    /// Fused `softmax(self · scale + bias)` over the last axis of a
    /// `[groups, rows, keys]` logit tensor. Key `s` of group `grp` receives
    /// the additive `masked_logit` when `key_valid[grp * keys + s]` is false,
    /// or when `causal` and `s > row`.
    pub fn masked_softmax(
        &self,
        scale: T,
        key_valid: &[bool],
        causal: bool,
        masked_logit: T,
    ) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 3 || key_valid.len() != shape[0] * shape[2] {
            return Err(Error::shape("masked_softmax", shape, &[key_valid.len()]));
        }
        let (groups, rows, keys) = (shape[0], shape[1], shape[2]);
        let mut out = self.value().to_vec();
        for grp in 0..groups {
            let valid = &key_valid[grp * keys..(grp + 1) * keys];
            for r in 0..rows {
                let row = &mut out[(grp * rows + r) * keys..(grp * rows + r + 1) * keys];
                for (s, v) in row.iter_mut().enumerate() {
                    *v = *v * scale;
                    if !valid[s] || (causal && s > r) {
                        *v = *v + masked_logit;
                    }
                }
                tn::softmax_in_place(row);
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        let y = out.clone();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(softmax_backward(&y, g, scale))])
        }))
    }

    /// Divides each last-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&self, eps: T) -> Result<Var<T>> {
        let x = self.value().clone();
        let out = tn::l2_normalize_rows(&x, eps)?;
        let y = out.clone();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let cols = *x.shape().last().expect("rank checked in forward");
            let mut dx = g.to_vec();
            for ((dxr, xr), yr) in dx
                .chunks_mut(cols)
                .zip(x.data().chunks(cols))
                .zip(y.data().chunks(cols))
            {
                let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > eps {
                    let dot: T = yr.iter().zip(dxr.iter()).map(|(&a, &b)| a * b).sum();
                    let inv = T::one() / norm;
                    for (d, &yv) in dxr.iter_mut().zip(yr) {
                        *d = (*d - yv * dot) * inv;
                    }
                } else {
                    let inv = T::one() / eps;
                    dxr.iter_mut().for_each(|d| *d = *d * inv);
                }
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
        }))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let cols = *self.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.value();
        let n = T::lit(cols as f64);
        let mut xhat = x.to_vec();
        let mut inv_std = Vec::with_capacity(x.numel() / cols);
        for row in xhat.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
        let out = tn::add(&tn::mul(&xhat, gamma.value())?, beta.value())?;
        let gam = gamma.value().clone();
        Ok(Self::from_op(
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let dxhat = tn::mul(g, &gam)?;
                let mut dx = dxhat.to_vec();
                for ((row, xr), &is) in dx
                    .chunks_mut(cols)
                    .zip(xhat.data().chunks(cols))
                    .zip(&inv_std)
                {
                    let m1 = row.iter().copied().sum::<T>() / n;
                    let m2 = row.iter().zip(xr).map(|(&d, &h)| d * h).sum::<T>() / n;
                    for (d, &h) in row.iter_mut().zip(xr) {
                        *d = is * (*d - m1 - h * m2);
                    }
                }
                let dgamma = tn::sum_to_shape(&tn::mul(g, &xhat)?, &[cols])?;
                let dbeta = tn::sum_to_shape(g, &[cols])?;
                Ok(vec![
                    Some(Tensor::from_parts(xhat.shape().to_vec(), dx)),
                    Some(dgamma),
                    Some(dbeta),
                ])
            },
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceOp::Sum, axis, keepdim)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceOp::Mean, axis, keepdim)
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceOp::Max, axis, keepdim)
    }

    pub fn reduce(&self, kind: ReduceOp, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let x = self.value().clone();
        let kept = tn::reduce_keepdim(kind, &x, axis)?;
        let kept_shape = kept.shape().to_vec();
        let out = if keepdim {
            kept.clone()
        } else {
            let mut s = x.shape().to_vec();
            s.remove(axis);
            kept.reshape(&s)?
        };
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let g = g.reshape(&kept_shape)?;
            let (outer, len, inner) = axis_split(x.shape(), axis)?;
            let dx = match kind {
                ReduceOp::Sum => tn::add(&Tensor::zeros(x.shape()), &g)?,
                ReduceOp::Mean => {
                    tn::add(&Tensor::zeros(x.shape()), &tn::scale(&g, T::one() / T::lit(len as f64)))?
                }
                ReduceOp::Max => {
                    // first arg-max receives the gradient
                    let mut dx = vec![T::zero(); x.numel()];
                    let (xd, gd, md) = (x.data(), g.data(), kept.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let m = md[o * inner + i];
                            if let Some(l) =
                                (0..len).find(|&l| xd[(o * len + l) * inner + i] == m)
                            {
                                dx[(o * len + l) * inner + i] = gd[o * inner + i];
                            }
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), dx)
                }
            };
            Ok(vec![Some(dx)])
        }))
    }

    pub fn sum_all(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(tn::sum_all(self.value()));
        Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Var<T>> {
        let out = tn::cumsum(self.value(), axis)?;
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            Ok(vec![Some(tn::cumsum_rev(g, axis)?)])
        }))
    }

    // ---- indexing ---------------------------------------------------------

    /// Rows of a `[rows, cols]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<T>> {
        let out = tn::gather_rows(self.value(), ids)?;
        let ids = ids.to_vec();
        let table_shape = self.shape().to_vec();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let cols = table_shape[1];
            let mut dt = vec![T::zero(); table_shape[0] * cols];
            for (row, &id) in g.data().chunks(cols).zip(&ids) {
                for (d, &v) in dt[id * cols..(id + 1) * cols].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            Ok(vec![Some(Tensor::from_parts(table_shape.clone(), dt))])
        }))
    }

    pub fn narrow0(&self, start: usize, len: usize) -> Result<Var<T>> {
        let out = tn::narrow0(self.value(), start, len)?;
        let shape = self.shape().to_vec();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let inner = g.numel() / len.max(1);
            let mut d = vec![T::zero(); shape.iter().product()];
            d[start * inner..(start + len) * inner].copy_from_slice(g.data());
            Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
        }))
    }

    pub fn concat0(parts: &[Var<T>]) -> Result<Var<T>> {
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value().clone()).collect();
        let out = tn::concat0(&values)?;
        let leads: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        Ok(Self::from_op(out, parts.to_vec(), move |g| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(leads.len());
            for &len in &leads {
                grads.push(Some(tn::narrow0(g, start, len)?));
                start += len;
            }
            Ok(grads)
        }))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean negative log-likelihood over rows of a `[rows, classes]` logit
    /// matrix whose label is `Some`; unlabelled rows contribute nothing.
    pub fn masked_cross_entropy(&self, labels: &[Option<usize>]) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 2 || labels.len() != shape[0] {
            return Err(Error::shape("masked_cross_entropy", shape, &[labels.len()]));
        }
        let classes = shape[1];
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::Input("no labelled positions in batch".into()));
        }
        let inv = T::one() / T::lit(count as f64);
        let logits = self.value().clone();
        let mut total = T::zero();
        for (row, label) in logits.data().chunks(classes).zip(labels) {
            if let Some(c) = *label {
                if c >= classes {
                    return Err(Error::Input(format!("label {c} out of range {classes}")));
                }
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                total = total + (lse - row[c]);
            }
        }
        let out = Tensor::scalar(total * inv);
        let labels = labels.to_vec();
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let scale = g.data()[0] * inv;
            let mut d = vec![T::zero(); logits.numel()];
            for ((drow, row), label) in d
                .chunks_mut(classes)
                .zip(logits.data().chunks(classes))
                .zip(&labels)
            {
                if let Some(c) = *label {
                    drow.copy_from_slice(row);
                    tn::softmax_in_place(drow);
                    drow[c] = drow[c] - T::one();
                    drow.iter_mut().for_each(|v| *v = *v * scale);
                }
            }
            Ok(vec![Some(Tensor::from_parts(logits.shape().to_vec(), d))])
        }))
    }
}

/// `scale · y ⊙ (g − Σ g⊙y)` row-wise: the softmax vector-Jacobian product.
fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, scale: T) -> Tensor<T> {
    let cols = *y.shape().last().expect("softmax has rank >= 1");
    let mut dx = g.to_vec();
    for (dr, yr) in dx.chunks_mut(cols).zip(y.data().chunks(cols)) {
        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in dr.iter_mut().zip(yr) {
            *d = scale * yv * (*d - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Sums a batched gradient down to an operand that was shared across the
/// batch.
fn collapse_batch<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g);
    }
    let per: usize = shape.iter().product();
    let g3 = g.reshape(&[g.numel() / per, per])?;
    tn::reduce(ReduceOp::Sum, &g3, 0)?.reshape(shape)
}

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
/// Parameters that do not influence the loss get a zero gradient.
pub fn grad<T: Scalar>(loss: &Var<T>, params: &[Var<T>]) -> Result<Vec<Tensor<T>>> {
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(f) = &v.0.grad_fn {
            stack.extend(f.parents.iter().cloned());
        }
        order.push(v);
    }
    // ids grow with creation time, so descending id is a reverse topological order
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let wanted: HashSet<u64> = params.iter().map(Var::id).collect();
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(loss.id(), Tensor::ones(loss.shape()));
    for v in &order {
        let Some(f) = &v.0.grad_fn else { continue };
        let g = if wanted.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        };
        let Some(g) = g else { continue };
        let parent_grads = (f.backward)(&g)?;
        for (p, pg) in f.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() {
                continue;
            }
            match grads.remove(&p.id()) {
                Some(acc) => grads.insert(p.id(), tn::add(&acc, &pg)?),
                None => grads.insert(p.id(), pg),
            };
        }
    }
    Ok(params
        .iter()
        .map(|p| {
            grads
                .get(&p.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn sum_grad_is_ones_and_square_grad_is_2x() {
        let x = Var::param(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let g = grad(&x.sum_all(), std::slice::from_ref(&x)).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 1.0));
        let sq = x.mul(&x).unwrap().sum_all();
        let g = grad(&sq, std::slice::from_ref(&x)).unwrap();
        for (d, v) in g[0].data().iter().zip(x.value().data()) {
            assert_eq!(*d, 2.0 * v);
        }
    }

    #[test]
    fn fused_elu_plus_one_matches_its_composition() {
        let t = Tensor::<f64>::from_fn(&[9], |i| i as f64 * 0.5 - 2.0);
        let w = Var::constant(Tensor::from_fn(&[9], |i| 1.0 + i as f64));
        let (a, b) = (Var::param(t.clone()), Var::param(t));
        let fa = a.elu_plus_one();
        let fb = b.elu().add_scalar(1.0);
        assert!(fa.value().max_abs_diff(fb.value()).unwrap() < 1e-15);
        let ga = grad(&fa.mul(&w).unwrap().sum_all(), &[a]).unwrap();
        let gb = grad(&fb.mul(&w).unwrap().sum_all(), &[b]).unwrap();
        assert!(ga[0].max_abs_diff(&gb[0]).unwrap() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected_and_unused_param_gets_zero() {
        let x = Var::param(Tensor::<f64>::ones(&[2]));
        let unused = Var::param(Tensor::<f64>::ones(&[3]));
        assert!(matches!(grad(&x, std::slice::from_ref(&x)), Err(Error::NonScalarLoss(_))));
        let g = grad(&x.sum_all(), &[unused]).unwrap();
        assert_eq!(g[0].data(), &[0.0; 3]);
    }

    #[test]
    fn constants_keep_no_history() {
        let a = Var::constant(Tensor::<f32>::ones(&[2, 2]));
        let b = a.matmul(&a).unwrap().exp();
        assert!(!b.requires_grad());
        assert!(b.0.grad_fn.is_none());
    }

    type Build = fn(&[Var<f64>]) -> Result<Var<f64>>;

    fn check(name: &str, shapes: &[&[usize]], f: Build) {
        let mut r = rng();
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, &mut r)).collect();
        let report = check_gradients(&inputs, f, 1e-3, usize::MAX, &mut r).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "{name}: max rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn every_differentiable_op_matches_finite_differences() {
        let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
            ("matmul", vec![&[3, 4], &[4, 2]], |v| Ok(v[0].matmul(&v[1])?.mul(&v[0].matmul(&v[1])?)?.sum_all())),
            ("matmul_shared", vec![&[2, 3, 4], &[4, 5]], |v| Ok(v[0].matmul(&v[1])?.exp().sum_all())),
            ("matmul_tn", vec![&[2, 4, 3], &[2, 4, 5]], |v| Ok(v[0].matmul_ex(true, &v[1], false)?.gelu().sum_all())),
            ("matmul_nt", vec![&[2, 3, 4], &[2, 5, 4]], |v| Ok(v[0].matmul_ex(false, &v[1], true)?.gelu().sum_all())),
            ("matmul_nt_shared", vec![&[2, 3, 4], &[5, 4]], |v| Ok(v[0].matmul_ex(false, &v[1], true)?.gelu().sum_all())),
            ("add_broadcast", vec![&[2, 3, 4], &[4]], |v| Ok(v[0].add(&v[1])?.gelu().sum_all())),
            ("sub_broadcast", vec![&[2, 3, 1], &[1, 4]], |v| Ok(v[0].sub(&v[1])?.gelu().sum_all())),
            ("mul_broadcast", vec![&[2, 3, 4], &[2, 1, 4]], |v| Ok(v[0].mul(&v[1])?.gelu().sum_all())),
            ("div_guarded", vec![&[3, 4], &[3, 4]], |v| {
                let den = v[1].mul(&v[1])?.add_scalar(0.5);
                Ok(v[0].div_guarded(&den, 1e-6)?.sum_all())
            }),
            ("exp_scale", vec![&[5]], |v| Ok(v[0].scale(0.7).exp().sum_all())),
            ("gelu", vec![&[7]], |v| Ok(v[0].gelu().mul(&v[0])?.sum_all())),
            ("elu", vec![&[7]], |v| Ok(v[0].elu().mul(&v[0])?.sum_all())),
            ("softmax", vec![&[3, 5], &[3, 5]], |v| Ok(v[0].softmax_rows()?.mul(&v[1])?.sum_all())),
            ("masked_softmax", vec![&[2, 3, 3], &[2, 3, 3]], |v| {
                Ok(v[0]
                    .masked_softmax(0.5, &[true, true, false, true, true, true], true, -1e9)?
                    .mul(&v[1])?
                    .sum_all())
            }),
            ("l2_normalize", vec![&[4, 3], &[4, 3]], |v| Ok(v[0].l2_normalize_rows(1e-12)?.mul(&v[1])?.sum_all())),
            ("layer_norm", vec![&[3, 6], &[6], &[6], &[3, 6]], |v| {
                Ok(v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&v[3])?.sum_all())
            }),
            ("sum_mean_axis", vec![&[3, 4, 2]], |v| {
                let s = v[0].sum_axis(1, false)?;
                Ok(s.mul(&s)?.mean_axis(0, true)?.sum_all())
            }),
            ("max_axis", vec![&[3, 5]], |v| Ok(v[0].max_axis(1, false)?.exp().sum_all())),
            ("cumsum", vec![&[2, 5, 3], &[2, 5, 3]], |v| Ok(v[0].cumsum(1)?.mul(&v[1])?.sum_all())),
            ("permute_reshape", vec![&[2, 3, 4], &[4, 2, 3]], |v| {
                Ok(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.reshape(&[4, 2, 3])?.mul(&v[1])?.sum_all())
            }),
            ("gather", vec![&[5, 3], &[4, 3]], |v| Ok(v[0].gather_rows(&[4, 0, 4, 2])?.mul(&v[1])?.sum_all())),
            ("narrow_concat", vec![&[4, 3], &[4, 3]], |v| {
                let a = v[0].narrow0(1, 2)?;
                let b = v[0].narrow0(0, 2)?;
                Ok(Var::concat0(&[a, b])?.mul(&v[1])?.sum_all())
            }),
            ("cross_entropy", vec![&[4, 6]], |v| v[0].masked_cross_entropy(&[Some(1), None, Some(5), Some(0)])),
        ];
        for (name, shapes, f) in cases {
            check(name, &shapes, f);
        }
    }

    #[test]
    fn cross_entropy_unlabelled_rows_get_exactly_zero_gradient() {
        let logits = Var::param(Tensor::<f64>::randn(&[3, 4], &mut rng()));
        let loss = logits.masked_cross_entropy(&[None, Some(2), None]).unwrap();
        let g = grad(&loss, &[logits]).unwrap();
        assert!(g[0].data()[..4].iter().all(|&v| v == 0.0));
        assert!(g[0].data()[8..].iter().all(|&v| v == 0.0));
        assert!(g[0].data()[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn division_without_guard_errors_on_zero() {
        let a = Var::param(Tensor::<f64>::ones(&[2]));
        let b = Var::constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(a.div(&b).is_err());
        assert!(a.div_guarded(&b, 1e-9).unwrap().value().all_finite());
    }
}
