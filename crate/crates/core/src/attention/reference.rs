//! Direct-definition attention in plain 64-bit loops.
//!
//! These routines evaluate each mechanism the slow, obvious way: explicit
//! pairwise similarities, explicit per-head loops, and a per-position
//! recomputation of the visible key set in causal mode. They share nothing
//! with the vectorised implementations beyond the [`AttentionSpec`] type and
//! serve as oracles for tests and for the benchmark's pre-timing check.

use super::{AttentionSpec, Kernel, Mechanism, MASKED_LOGIT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> Result<Rows> {
    if t.rank() != 2 {
        return Err(Error::shape("reference", t.shape(), &[0, 0]));
    }
    Ok(t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect())
}

fn phi(kernel: Kernel, row: &[f64]) -> Vec<f64> {
    match kernel {
        Kernel::Identity => row.to_vec(),
        Kernel::EluPlusOne => row
            .iter()
            .map(|&x| if x > 0.0 { x + 1.0 } else { x.exp() })
            .collect(),
        Kernel::L2RowNorm => {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|x| x / norm).collect()
        }
    }
}

fn visible(spec: &AttentionSpec, valid: &[bool], t: usize, s: usize) -> bool {
    valid[s] && !(spec.causal() && s > t)
}

fn finish(out: Rows, valid: &[bool], d: usize) -> Tensor<f64> {
    let n = out.len();
    let data = out
        .into_iter()
        .zip(valid)
        .flat_map(|(row, &ok)| if ok { row } else { vec![0.0; d] })
        .collect();
    Tensor::new(&[n, d], data).expect("reference output shape")
}

/// Any mechanism, by its direct definition.
pub fn attend(
    spec: &AttentionSpec,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    valid: &[bool],
) -> Result<Tensor<f64>> {
    match spec.mechanism {
        Mechanism::DotProduct => dot_product(spec, q, k, v, valid),
        Mechanism::Linear => kernel_pairwise(spec, q, k, v, valid),
        Mechanism::Hydra if spec.heads == q.shape()[1] => hydra_head_loop(spec, q, k, v, valid),
        Mechanism::Hydra => kernel_pairwise(spec, q, k, v, valid),
        Mechanism::EfficientSeparateSoftmax => efficient_expansion(spec, q, k, v, valid),
    }
}

fn check(spec: &AttentionSpec, q: &Tensor<f64>, valid: &[bool]) -> Result<(usize, usize, usize)> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    spec.validate(d)?;
    if valid.len() != n {
        return Err(Error::shape("reference.mask", &[n], &[valid.len()]));
    }
    Ok((n, d, d / spec.heads))
}

/// Per-head softmax attention with explicit exp/sum.
pub fn dot_product(
    spec: &AttentionSpec,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    valid: &[bool],
) -> Result<Tensor<f64>> {
    let (n, d, w) = check(spec, q, valid)?;
    let (q, k, v) = (rows(q)?, rows(k)?, rows(v)?);
    let scale = spec.scale.value(d, spec.heads);
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..spec.heads {
        let cols = h * w..(h + 1) * w;
        for t in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|s| {
                    let dot: f64 = cols.clone().map(|c| q[t][c] * k[s][c]).sum();
                    let mask = if visible(spec, valid, t, s) { 0.0 } else { MASKED_LOGIT };
                    dot * scale + mask
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                out[t][c] = (0..n).map(|s| weights[s] / total * v[s][c]).sum();
            }
        }
    }
    Ok(finish(out, valid, d))
}

/// `Σ_s sim(q_t, k_s) v_s` per head with `sim(a, b) = φ(a)·φ(b)` summed
/// pairwise over visible keys, optionally divided by `Σ_s sim(q_t, k_s)`.
pub fn kernel_pairwise(
    spec: &AttentionSpec,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    valid: &[bool],
) -> Result<Tensor<f64>> {
    let (n, d, w) = check(spec, q, valid)?;
    let fq: Rows = rows(q)?.iter().map(|r| phi(spec.kernel, r)).collect();
    let fk: Rows = rows(k)?.iter().map(|r| phi(spec.kernel, r)).collect();
    let v = rows(v)?;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..spec.heads {
        let cols = h * w..(h + 1) * w;
        for t in 0..n {
            let mut den = 0.0;
            for s in (0..n).filter(|&s| visible(spec, valid, t, s)) {
                let sim: f64 = cols.clone().map(|c| fq[t][c] * fk[s][c]).sum();
                den += sim;
                for c in cols.clone() {
                    out[t][c] += sim * v[s][c];
                }
            }
            if spec.normalize_denominator {
                let den = guard(den, spec.eps);
                for c in cols.clone() {
                    out[t][c] /= den;
                }
            }
        }
    }
    Ok(finish(out, valid, d))
}

fn guard(y: f64, eps: f64) -> f64 {
    if y.abs() >= eps {
        y
    } else if y < 0.0 {
        -eps
    } else {
        eps
    }
}

/// `H = d` Hydra as an explicit loop over `d` one-column heads: for head
/// `j`, `out[t][j] = φ(q_t)_j · Σ_s φ(k_s)_j v_s,j`, the key sum restricted
/// to positions visible from `t`.
pub fn hydra_head_loop(
    spec: &AttentionSpec,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    valid: &[bool],
) -> Result<Tensor<f64>> {
    let (n, d, _) = check(spec, q, valid)?;
    let fq: Rows = rows(q)?.iter().map(|r| phi(spec.kernel, r)).collect();
    let fk: Rows = rows(k)?.iter().map(|r| phi(spec.kernel, r)).collect();
    let v = rows(v)?;
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        for t in 0..n {
            let keys = (0..n).filter(|&s| visible(spec, valid, t, s));
            let (kv, z) = keys.fold((0.0, 0.0), |(kv, z), s| {
                (kv + fk[s][j] * v[s][j], z + fk[s][j])
            });
            out[t][j] = fq[t][j] * kv;
            if spec.normalize_denominator {
                out[t][j] /= guard(fq[t][j] * z, spec.eps);
            }
        }
    }
    Ok(finish(out, valid, d))
}

/// `(ρ(Q) σ(K)ᵀ) V` per head, materialising the `N×N` product. `ρ` is the
/// softmax over a head's features of `q_t`; `σ` the softmax over visible
/// keys of each key feature, recomputed for every query position.
pub fn efficient_expansion(
    spec: &AttentionSpec,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    valid: &[bool],
) -> Result<Tensor<f64>> {
    let (n, d, w) = check(spec, q, valid)?;
    let (q, k, v) = (rows(q)?, rows(k)?, rows(v)?);
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..spec.heads {
        let cols: Vec<usize> = (h * w..(h + 1) * w).collect();
        for t in 0..n {
            let qmax = cols.iter().map(|&c| q[t][c]).fold(f64::NEG_INFINITY, f64::max);
            let qexp: Vec<f64> = cols.iter().map(|&c| (q[t][c] - qmax).exp()).collect();
            let qsum: f64 = qexp.iter().sum();
            let keys: Vec<usize> = (0..n).filter(|&s| visible(spec, valid, t, s)).collect();
            let mut sigma = vec![vec![0.0; w]; n];
            for (i, &c) in cols.iter().enumerate() {
                let kmax = keys.iter().map(|&s| k[s][c]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = keys.iter().map(|&s| (k[s][c] - kmax).exp()).sum();
                for &s in &keys {
                    sigma[s][i] = (k[s][c] - kmax).exp() / z;
                }
            }
            let mut attn = vec![0.0; n];
            for &s in &keys {
                attn[s] = (0..w).map(|i| qexp[i] / qsum * sigma[s][i]).sum();
            }
            for &c in &cols {
                out[t][c] = keys.iter().map(|&s| attn[s] * v[s][c]).sum();
            }
        }
    }
    Ok(finish(out, valid, d))
}
