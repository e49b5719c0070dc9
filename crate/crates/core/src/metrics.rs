//! Single-target ranking metrics under full-catalog ranking.

use serde::{Deserialize, Serialize};

use crate::data::EvalCase;
use crate::error::{Error, Result};
use crate::model::{Model, PAD};
use crate::tensor::Scalar;

/// `1 +` the number of candidates ranked above `target`: strictly greater
/// logits, plus equal logits at a smaller id.
pub fn rank_of_target<T: Scalar>(logits: &[T], target: usize, excluded: &[usize]) -> Result<usize> {
    if target >= logits.len() {
        return Err(Error::Input(format!("target {target} outside {} logits", logits.len())));
    }
    if excluded.contains(&target) {
        return Err(Error::Input(format!("target {target} is an excluded token")));
    }
    let t = logits[target];
    let above = logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| !excluded.contains(&i) && (x > t || (x == t && i < target)))
        .count();
    Ok(above + 1)
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
    count: usize,
}

impl Accumulator {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total() / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub recall: f64,
    pub n_users: usize,
}

/// Per-user ranks folded into mean metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricSums {
    ndcg: Accumulator,
    hr: Accumulator,
}

impl MetricSums {
    pub fn add_rank(&mut self, rank: usize, k: usize) {
        self.ndcg.add(ndcg_at_k(rank, k));
        self.hr.add(hr_at_k(rank, k));
    }

    pub fn result(&self, k: usize) -> EvalResult {
        let hr = self.hr.mean();
        EvalResult {
            k,
            ndcg: self.ndcg.mean(),
            hr,
            // one relevant item per user: recall@k and hit@k coincide
            recall: hr,
            n_users: self.hr.count(),
        }
    }
}

/// Evaluates any scorer that returns one logit row per case.
pub fn evaluate_with<F>(cases: &[EvalCase], k: usize, excluded: &[usize], batch_size: usize, mut scorer: F) -> Result<EvalResult>
where
    F: FnMut(&[EvalCase]) -> Result<Vec<Vec<f32>>>,
{
    if cases.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    let mut sums = MetricSums::default();
    for chunk in cases.chunks(batch_size.max(1)) {
        let scores = scorer(chunk)?;
        for (case, row) in chunk.iter().zip(&scores) {
            sums.add_rank(rank_of_target(row, case.target, excluded)?, k);
        }
    }
    Ok(sums.result(k))
}

/// Full-catalog evaluation of `model` on held-out targets.
pub fn evaluate<T: Scalar>(model: &Model<T>, cases: &[EvalCase], k: usize, batch_size: usize) -> Result<EvalResult> {
    let excluded = [PAD, model.config.mask_token()];
    evaluate_with(cases, k, &excluded, batch_size, |chunk| {
        let seqs: Vec<&[usize]> = chunk.iter().map(|c| c.prefix.as_slice()).collect();
        Ok(model
            .score_next(&seqs, batch_size)?
            .into_iter()
            .map(|row| row.into_iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect())
            .collect())
    })
}

/// One JSON-lines evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mechanism: String,
    pub dataset: String,
    pub split: String,
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub recall: f64,
    pub n_users: usize,
    pub config_hash: String,
}

impl EvalRecord {
    pub fn new(result: &EvalResult, mechanism: &str, dataset: &str, split: &str, config_hash: &str) -> Self {
        Self {
            mechanism: mechanism.into(),
            dataset: dataset.into(),
            split: split.into(),
            k: result.k,
            ndcg: result.ndcg,
            hr: result.hr,
            recall: result.recall,
            n_users: result.n_users,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(4, 10) - 1.0 / 5f64.log2()).abs() < 1e-15);
        assert!((ndcg_at_k(4, 10) - 0.4307).abs() < 1e-4);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
    }

    #[test]
    fn ranks_and_ties() {
        let l = [9.0f32, 1.0, 5.0, 2.0, 9.0];
        assert_eq!(rank_of_target(&l, 2, &[0, 4]).unwrap(), 1);
        assert_eq!(rank_of_target(&l, 3, &[0, 4]).unwrap(), 2);
        let flat = [0.0f32; 6];
        assert_eq!(rank_of_target(&flat, 1, &[0, 5]).unwrap(), 1);
        assert_eq!(rank_of_target(&flat, 4, &[0, 5]).unwrap(), 4);
        assert!(rank_of_target(&flat, 0, &[0, 5]).is_err());
    }

    #[test]
    fn compensated_sum_is_order_independent() {
        let xs: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1e16 } else { 1.0 } * if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
        let mut fwd = Accumulator::default();
        xs.iter().for_each(|&x| fwd.add(x));
        let mut rev = Accumulator::default();
        xs.iter().rev().for_each(|&x| rev.add(x));
        assert!((fwd.total() - rev.total()).abs() < 1e-9);
        assert_eq!(fwd.count(), 1000);
    }
}
