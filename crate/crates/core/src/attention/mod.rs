//! Attention mechanisms behind one entry point.
//!
//! * `DotProduct`: per-head `softmax(Q_h K_hᵀ · scale) V_h`, quadratic in N.
//! * `Linear`: kernelised `φ(Q_h)(φ(K_h)ᵀ V_h)`, linear in N, `O(N d²/H)`.
//! * `Hydra`: linear attention with one head per feature. For `H = d` the
//!   per-head products collapse into a global vector
//!   `g = Σ_s φ(k_s) ⊙ v_s` and each output row is `φ(q_t) ⊙ g`, `O(N d)`.
//! * `EfficientSeparateSoftmax`: feature softmax on Q rows, token softmax
//!   on K columns, then `ρ(Q)(σ(K)ᵀ V)`.
//!
//! Inputs are `[B, N, d]`. Kernels act on whole `d`-rows before the head
//! split. Causal variants of the linear mechanisms use prefix sums over
//! the token axis, so no mechanism except `DotProduct` ever materialises
//! an `N×N` intermediate.

pub mod reference;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Additive logit for masked keys in dot-product attention.
pub const MASKED_LOGIT: f64 = -1e9;

/// Budget (elements) for one chunk of dot-product logits.
const LOGIT_CHUNK_ELEMS: usize = 1 << 24;

const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    DotProduct,
    Linear,
    Hydra,
    EfficientSeparateSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Identity,
    EluPlusOne,
    L2RowNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Bidirectional,
    Causal,
}

/// Logit scale for dot-product attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `1/√d` with `d` the full model width.
    ModelDim,
    /// `1/√(d/H)`.
    HeadDim,
    Fixed(f64),
}

impl ScaleRule {
    pub fn value(self, d: usize, heads: usize) -> f64 {
        match self {
            ScaleRule::ModelDim => 1.0 / (d as f64).sqrt(),
            ScaleRule::HeadDim => 1.0 / ((d / heads) as f64).sqrt(),
            ScaleRule::Fixed(s) => s,
        }
    }
}

macro_rules! str_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    _ => Err(Error::config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(Mechanism {
    DotProduct => "dot_product",
    Linear => "linear",
    Hydra => "hydra",
    EfficientSeparateSoftmax => "efficient",
});

str_enum!(Kernel {
    Identity => "identity",
    EluPlusOne => "elu_plus_one",
    L2RowNorm => "l2_row_norm",
});

str_enum!(MaskMode {
    Bidirectional => "bidirectional",
    Causal => "causal",
});

impl fmt::Display for ScaleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleRule::ModelDim => f.write_str("model_dim"),
            ScaleRule::HeadDim => f.write_str("head_dim"),
            ScaleRule::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for ScaleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_dim" => Ok(ScaleRule::ModelDim),
            "head_dim" => Ok(ScaleRule::HeadDim),
            other => other.parse::<f64>().map(ScaleRule::Fixed).map_err(|_| {
                Error::config(format!(
                    "unknown scale `{other}` (expected model_dim, head_dim or a number)"
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub mechanism: Mechanism,
    /// Ignored by `DotProduct` and `EfficientSeparateSoftmax`.
    pub kernel: Kernel,
    pub heads: usize,
    pub mask_mode: MaskMode,
    /// Divide each output row by `φ(q_t)·Σφ(k_s)` (linear mechanisms only).
    pub normalize_denominator: bool,
    pub scale: ScaleRule,
    /// Guard for normalising denominators.
    pub eps: f64,
}

impl AttentionSpec {
    pub fn dot_product(heads: usize) -> Self {
        Self {
            mechanism: Mechanism::DotProduct,
            kernel: Kernel::Identity,
            heads,
            mask_mode: MaskMode::Bidirectional,
            normalize_denominator: false,
            scale: ScaleRule::ModelDim,
            eps: 1e-6,
        }
    }

    /// Linear attention; the denominator is on by default only for the
    /// positive `EluPlusOne` feature map.
    pub fn linear(kernel: Kernel, heads: usize) -> Self {
        Self {
            mechanism: Mechanism::Linear,
            kernel,
            normalize_denominator: kernel == Kernel::EluPlusOne,
            ..Self::dot_product(heads)
        }
    }

    /// Hydra attention with cosine-similarity kernel and `H = d`.
    pub fn hydra(d: usize) -> Self {
        Self {
            mechanism: Mechanism::Hydra,
            kernel: Kernel::L2RowNorm,
            normalize_denominator: false,
            ..Self::dot_product(d)
        }
    }

    pub fn efficient(heads: usize) -> Self {
        Self {
            mechanism: Mechanism::EfficientSeparateSoftmax,
            ..Self::dot_product(heads)
        }
    }

    /// Default spec for `mechanism` at width `d` with `heads` heads
    /// (Hydra always uses one head per feature here).
    pub fn preset(mechanism: Mechanism, d: usize, heads: usize) -> Self {
        match mechanism {
            Mechanism::DotProduct => Self::dot_product(heads),
            Mechanism::Linear => Self::linear(Kernel::EluPlusOne, heads),
            Mechanism::Hydra => Self::hydra(d),
            Mechanism::EfficientSeparateSoftmax => Self::efficient(heads),
        }
    }

    pub fn with_mask(mut self, mask_mode: MaskMode) -> Self {
        self.mask_mode = mask_mode;
        self
    }

    pub fn causal(&self) -> bool {
        self.mask_mode == MaskMode::Causal
    }

    /// Every violation against model width `d`.
    pub fn violations(&self, d: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.heads == 0 {
            v.push("attention.heads must be positive".to_string());
        } else if !d.is_multiple_of(self.heads) {
            v.push(format!(
                "attention.heads ({}) must divide the model dimension ({d})",
                self.heads
            ));
        }
        if !(self.eps > 0.0) {
            v.push("attention.eps must be positive".to_string());
        }
        if let ScaleRule::Fixed(s) = self.scale {
            if !s.is_finite() {
                v.push("attention.scale must be finite".to_string());
            }
        }
        v
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let v = self.violations(d);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Short label, e.g. `hydra/l2_row_norm/causal/H64`.
    pub fn label(&self) -> String {
        match self.mechanism {
            Mechanism::DotProduct | Mechanism::EfficientSeparateSoftmax => {
                format!("{}/{}/H{}", self.mechanism, self.mask_mode, self.heads)
            }
            _ => format!(
                "{}/{}/{}/H{}",
                self.mechanism, self.kernel, self.mask_mode, self.heads
            ),
        }
    }
}

/// Which positions of a sequence hold real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingMask {
    pub valid: Vec<bool>,
}

impl PaddingMask {
    pub fn all_valid(n: usize) -> Self {
        Self {
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Batched attention over `[B, N, d]` inputs; `valid` is the row-major
/// `B×N` padding mask. Query rows at padded positions come out as zeros.
pub fn attend<T: Scalar>(
    spec: &AttentionSpec,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    valid: &[bool],
) -> Result<Var<T>> {
    let shape = q.shape().to_vec();
    if shape.len() != 3 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::shape("attend", &shape, k.shape()));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if valid.len() != b * n {
        return Err(Error::shape("attend.mask", &[b, n], &[valid.len()]));
    }
    spec.validate(d)?;
    let ctx = Ctx::new(spec, b, n, d, valid);
    let out = match spec.mechanism {
        Mechanism::DotProduct => dot_product(&ctx, q, k, v)?,
        Mechanism::Linear => {
            let (fq, fk) = (feature_map(spec.kernel, q)?, feature_map(spec.kernel, k)?);
            multihead_linear(&ctx, &fq, &fk, v)?
        }
        Mechanism::Hydra => {
            let (fq, fk) = (feature_map(spec.kernel, q)?, feature_map(spec.kernel, k)?);
            if spec.heads == d {
                hydra_vectorized(&ctx, &fq, &fk, v)?
            } else {
                multihead_linear(&ctx, &fq, &fk, v)?
            }
        }
        Mechanism::EfficientSeparateSoftmax => efficient(&ctx, q, k, v)?,
    };
    out.mul(&ctx.query_mask())
}

/// Single-sequence convenience over `[N, d]` tensors.
pub fn attend_tensors<T: Scalar>(
    spec: &AttentionSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &PaddingMask,
) -> Result<Tensor<T>> {
    if q.rank() != 2 {
        return Err(Error::shape("attend", q.shape(), &[0, 0]));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let lift = |t: &Tensor<T>| -> Result<Var<T>> { Ok(Var::constant(t.reshape(&[1, n, d])?)) };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attend", q.shape(), k.shape()));
    }
    let out = attend(spec, &lift(q)?, &lift(k)?, &lift(v)?, &mask.valid)?;
    out.value().reshape(&[n, d])
}

fn with_mechanism(spec: &AttentionSpec, mechanism: Mechanism) -> AttentionSpec {
    AttentionSpec {
        mechanism,
        ..spec.clone()
    }
}

/// Scaled dot-product attention; `spec.mechanism` is ignored.
pub fn attend_dot_product<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    mask: &PaddingMask,
) -> Result<Tensor<T>> {
    attend_tensors(&with_mechanism(spec, Mechanism::DotProduct), q, k, v, mask)
}

/// Kernelised linear attention; `spec.mechanism` is ignored.
pub fn attend_linear<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    mask: &PaddingMask,
) -> Result<Tensor<T>> {
    attend_tensors(&with_mechanism(spec, Mechanism::Linear), q, k, v, mask)
}

/// Hydra attention; `spec.mechanism` is ignored.
pub fn attend_hydra<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    mask: &PaddingMask,
) -> Result<Tensor<T>> {
    attend_tensors(&with_mechanism(spec, Mechanism::Hydra), q, k, v, mask)
}

/// Separate-softmax efficient attention; `spec.mechanism` is ignored.
pub fn attend_efficient<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    mask: &PaddingMask,
) -> Result<Tensor<T>> {
    attend_tensors(
        &with_mechanism(spec, Mechanism::EfficientSeparateSoftmax),
        q,
        k,
        v,
        mask,
    )
}

struct Ctx<'a> {
    spec: &'a AttentionSpec,
    b: usize,
    n: usize,
    d: usize,
    heads: usize,
    valid: &'a [bool],
}

impl<'a> Ctx<'a> {
    fn new(spec: &'a AttentionSpec, b: usize, n: usize, d: usize, valid: &'a [bool]) -> Self {
        Self {
            spec,
            b,
            n,
            d,
            heads: spec.heads,
            valid,
        }
    }

    fn width(&self) -> usize {
        self.d / self.heads
    }

    fn groups(&self) -> usize {
        self.b * self.heads
    }

    fn mask_tensor<T: Scalar>(&self, shape: &[usize], repeat: usize) -> Var<T> {
        let data = self
            .valid
            .chunks(self.n)
            .flat_map(|row| std::iter::repeat_n(row, repeat).flatten())
            .map(|&ok| if ok { T::one() } else { T::zero() })
            .collect();
        Var::constant(Tensor::new(shape, data).expect("mask shape"))
    }

    /// `[B, N, 1]` of 0/1.
    fn query_mask<T: Scalar>(&self) -> Var<T> {
        self.mask_tensor(&[self.b, self.n, 1], 1)
    }

    /// `[B·H, N, 1]` of 0/1.
    fn group_mask<T: Scalar>(&self) -> Var<T> {
        self.mask_tensor(&[self.groups(), self.n, 1], self.heads)
    }

    fn group_valid(&self) -> Vec<bool> {
        self.valid
            .chunks(self.n)
            .flat_map(|row| std::iter::repeat_n(row, self.heads).flatten().copied())
            .collect()
    }

    /// `[B, N, d]` → `[B·H, N, d/H]`.
    fn split<T: Scalar>(&self, x: &Var<T>) -> Result<Var<T>> {
        if self.heads == 1 {
            return Ok(x.clone());
        }
        x.reshape(&[self.b, self.n, self.heads, self.width()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[self.groups(), self.n, self.width()])
    }

    /// `[B·H, N, d/H]` → `[B, N, d]`.
    fn merge<T: Scalar>(&self, x: &Var<T>) -> Result<Var<T>> {
        if self.heads == 1 {
            return Ok(x.clone());
        }
        x.reshape(&[self.b, self.heads, self.n, self.width()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[self.b, self.n, self.d])
    }
}

/// Applies the feature map φ to each `d`-row.
pub fn feature_map<T: Scalar>(kernel: Kernel, x: &Var<T>) -> Result<Var<T>> {
    match kernel {
        Kernel::Identity => Ok(x.clone()),
        Kernel::EluPlusOne => Ok(x.elu_plus_one()),
        Kernel::L2RowNorm => x.l2_normalize_rows(T::lit(L2_EPS)),
    }
}

fn dot_product<T: Scalar>(ctx: &Ctx<'_>, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (qh, kh, vh) = (ctx.split(q)?, ctx.split(k)?, ctx.split(v)?);
    let scale = T::lit(ctx.spec.scale.value(ctx.d, ctx.heads));
    let masked = T::lit(MASKED_LOGIT);
    let groups = ctx.groups();
    let valid = ctx.group_valid();
    let n = ctx.n;
    let chunk = (LOGIT_CHUNK_ELEMS / (n * n).max(1)).clamp(1, groups);
    let mut parts = Vec::with_capacity(groups.div_ceil(chunk));
    let mut start = 0;
    while start < groups {
        let len = chunk.min(groups - start);
        let slice = |x: &Var<T>| -> Result<Var<T>> {
            if len == groups {
                Ok(x.clone())
            } else {
                x.narrow0(start, len)
            }
        };
        let logits = slice(&qh)?.matmul_ex(false, &slice(&kh)?, true)?;
        let probs = logits.masked_softmax(
            scale,
            &valid[start * n..(start + len) * n],
            ctx.spec.causal(),
            masked,
        )?;
        parts.push(probs.matmul(&slice(&vh)?)?);
        start += len;
    }
    let out = if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        Var::concat0(&parts)?
    };
    ctx.merge(&out)
}

/// Per-head `φ(Q_h)(φ(K_h)ᵀ V_h)`; causal mode swaps the global `φ(K_h)ᵀ V_h`
/// for its running prefix over tokens.
fn multihead_linear<T: Scalar>(
    ctx: &Ctx<'_>,
    fq: &Var<T>,
    fk: &Var<T>,
    v: &Var<T>,
) -> Result<Var<T>> {
    let (g, n, w) = (ctx.groups(), ctx.n, ctx.width());
    let qh = ctx.split(fq)?;
    let kh = ctx.split(fk)?.mul(&ctx.group_mask())?;
    let vh = ctx.split(v)?;
    let (num, z) = if ctx.spec.causal() {
        let outer = kh.reshape(&[g, n, w, 1])?.mul(&vh.reshape(&[g, n, 1, w])?)?;
        let state = outer.cumsum(1)?;
        let num = qh.reshape(&[g, n, w, 1])?.mul(&state)?.sum_axis(2, false)?;
        (num, kh.cumsum(1)?)
    } else {
        let kv = kh.matmul_ex(true, &vh, false)?;
        (qh.matmul(&kv)?, kh.sum_axis(1, true)?)
    };
    let out = if ctx.spec.normalize_denominator {
        let den = qh.mul(&z)?.sum_axis(2, true)?;
        num.div_guarded(&den, T::lit(ctx.spec.eps))?
    } else {
        num
    };
    ctx.merge(&out)
}

/// `H = d`: every head is one feature wide, so the head products become
/// element-wise and the key-value summary is a single `d`-vector.
fn hydra_vectorized<T: Scalar>(
    ctx: &Ctx<'_>,
    fq: &Var<T>,
    fk: &Var<T>,
    v: &Var<T>,
) -> Result<Var<T>> {
    let fk = fk.mul(&ctx.query_mask())?;
    let kv = fk.mul(v)?;
    let (global, z) = if ctx.spec.causal() {
        (kv.cumsum(1)?, fk.cumsum(1)?)
    } else {
        (kv.sum_axis(1, true)?, fk.sum_axis(1, true)?)
    };
    let num = fq.mul(&global)?;
    if ctx.spec.normalize_denominator {
        let den = fq.mul(&z)?;
        num.div_guarded(&den, T::lit(ctx.spec.eps))
    } else {
        Ok(num)
    }
}

fn efficient<T: Scalar>(ctx: &Ctx<'_>, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (g, n, w) = (ctx.groups(), ctx.n, ctx.width());
    let rq = ctx.split(q)?.softmax_rows()?;
    let kh = ctx.split(k)?;
    let vh = ctx.split(v)?;
    let valid = ctx.group_valid();
    // The column softmax is shift invariant, so the stabilising shift is a
    // constant. Causal mode shifts by the first valid key so that no later
    // token can influence earlier outputs.
    let shift = column_shift(kh.value(), &valid, g, n, w, ctx.spec.causal());
    let e = kh
        .sub(&Var::constant(shift))?
        .exp()
        .mul(&ctx.group_mask())?;
    let tiny = T::lit(ctx.spec.eps);
    let out = if ctx.spec.causal() {
        let outer = e.reshape(&[g, n, w, 1])?.mul(&vh.reshape(&[g, n, 1, w])?)?;
        let state = outer.cumsum(1)?;
        let coef = rq.div_guarded(&e.cumsum(1)?, tiny)?;
        coef.reshape(&[g, n, w, 1])?.mul(&state)?.sum_axis(2, false)?
    } else {
        let sk = e.div_guarded(&e.sum_axis(1, true)?, tiny)?;
        rq.matmul(&sk.matmul_ex(true, &vh, false)?)?
    };
    ctx.merge(&out)
}

/// Per-group, per-feature shift `[G, 1, w]`: the column max over valid keys,
/// or the first valid key's value in causal mode.
fn column_shift<T: Scalar>(
    k: &Tensor<T>,
    valid: &[bool],
    g: usize,
    n: usize,
    w: usize,
    causal: bool,
) -> Tensor<T> {
    let kd = k.data();
    let mut out = vec![T::zero(); g * w];
    for grp in 0..g {
        let rows = &valid[grp * n..(grp + 1) * n];
        let dst = &mut out[grp * w..(grp + 1) * w];
        if causal {
            if let Some(t0) = rows.iter().position(|&ok| ok) {
                dst.copy_from_slice(&kd[(grp * n + t0) * w..(grp * n + t0 + 1) * w]);
            }
        } else {
            let mut any = false;
            for (t, _) in rows.iter().enumerate().filter(|(_, &ok)| ok) {
                let row = &kd[(grp * n + t) * w..(grp * n + t + 1) * w];
                for (m, &x) in dst.iter_mut().zip(row) {
                    *m = if any { m.max(x) } else { x };
                }
                any = true;
            }
        }
    }
    Tensor::new(&[g, 1, w], out).expect("shift shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn dot_product_single_token_returns_v() {
        let v = m(&[&[3.0, -1.0, 2.0, 0.5]]);
        let q = m(&[&[0.1, 0.2, 0.3, 0.4]]);
        let out = attend_dot_product(&q, &q, &v, &AttentionSpec::dot_product(2), &PaddingMask::all_valid(1)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn dot_product_two_tokens_matches_direct_evaluation() {
        let q = m(&[&[1.0], &[0.0]]);
        let v = m(&[&[10.0], &[20.0]]);
        let spec = AttentionSpec::dot_product(1);
        let out = attend_dot_product(&q, &q, &v, &spec, &PaddingMask::all_valid(2)).unwrap();
        // row 0 logits (1, 0), row 1 logits (0, 0)
        let e = 1f64.exp();
        let row0 = (10.0 * e + 20.0) / (e + 1.0);
        assert!((out.data()[0] - row0).abs() < 1e-12);
        assert!((out.data()[0] - 12.689).abs() < 1e-3);
        assert!((out.data()[1] - 15.0).abs() < 1e-12);

        let causal = attend_dot_product(&q, &q, &v, &spec.with_mask(MaskMode::Causal), &PaddingMask::all_valid(2)).unwrap();
        assert_eq!(causal.data()[0], 10.0);
    }

    #[test]
    fn linear_identity_rank_one() {
        let q = m(&[&[1.0, 2.0]]);
        let k = m(&[&[0.5, -1.0]]);
        let v = m(&[&[3.0, 4.0]]);
        let spec = AttentionSpec {
            normalize_denominator: false,
            ..AttentionSpec::linear(Kernel::Identity, 1)
        };
        let out = attend_linear(&q, &k, &v, &spec, &PaddingMask::all_valid(1)).unwrap();
        let qk = 1.0 * 0.5 + -2.0;
        assert_eq!(out.data(), &[qk * 3.0, qk * 4.0]);
    }

    #[test]
    fn hydra_worked_example() {
        let qk = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = m(&[&[2.0, 3.0], &[4.0, 5.0]]);
        let out = attend_hydra(&qk, &qk, &v, &AttentionSpec::hydra(2), &PaddingMask::all_valid(2)).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn hydra_all_pad_is_zero() {
        let x = m(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let mask = PaddingMask { valid: vec![false, false] };
        let out = attend_hydra(&x, &x, &x, &AttentionSpec::hydra(2), &mask).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn efficient_single_token_returns_v() {
        let q = m(&[&[0.3, -0.2, 1.5, 0.1]]);
        let v = m(&[&[7.0, 8.0, 9.0, 10.0]]);
        let out = attend_efficient(&q, &q, &v, &AttentionSpec::efficient(2), &PaddingMask::all_valid(1)).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let x = Tensor::<f64>::zeros(&[3, 6]);
        let err = attend_dot_product(&x, &x, &x, &AttentionSpec::dot_product(4), &PaddingMask::all_valid(3));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn enum_names_round_trip() {
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), *m);
        }
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), *k);
        }
        assert_eq!("head_dim".parse::<ScaleRule>().unwrap(), ScaleRule::HeadDim);
        assert_eq!("0.25".parse::<ScaleRule>().unwrap(), ScaleRule::Fixed(0.25));
        assert!("bogus".parse::<Mechanism>().is_err());
    }
}
