//! Encoder-only transformer over item tokens.
//!
//! Token 0 is padding and the last vocabulary entry is the cloze MASK. Each
//! layer is post-norm: `x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`. The
//! output head is `GELU(x W₁ + b₁) W₂ + b₂` producing one logit per
//! vocabulary entry. Item embedding and output projection are untied.

pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionSpec};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Items + PAD + MASK.
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub attention: AttentionSpec,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Defaults: 2 layers, 8 heads, FFN width 256, dropout 0.1, init std 0.02.
    pub fn new(vocab_size: usize, d: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            d,
            layers: 2,
            attention: AttentionSpec::dot_product(8),
            ffn_dim: 256,
            max_len,
            dropout: 0.1,
            init_std: 0.02,
            ln_eps: 1e-12,
        }
    }

    pub fn with_attention(mut self, attention: AttentionSpec) -> Self {
        self.attention = attention;
        self
    }

    pub fn mask_token(&self) -> usize {
        self.vocab_size - 1
    }

    /// Real items are tokens `1..=num_items()`.
    pub fn num_items(&self) -> usize {
        self.vocab_size.saturating_sub(2)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size < 3 {
            v.push(format!("vocab_size ({}) must be at least 3 (PAD, MASK, one item)", self.vocab_size));
        }
        if self.d == 0 {
            v.push("d must be positive".into());
        }
        if self.layers == 0 {
            v.push("layers must be positive".into());
        }
        if self.ffn_dim == 0 {
            v.push("ffn_dim must be positive".into());
        }
        if self.max_len < 2 {
            v.push(format!("max_len ({}) must be at least 2", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            v.push(format!("init_std ({}) must be positive", self.init_std));
        }
        if !(self.ln_eps > 0.0) {
            v.push("ln_eps must be positive".into());
        }
        if self.d > 0 {
            v.extend(self.attention.violations(self.d));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, n) = (self.vocab_size, self.d, self.ffn_dim, self.max_len);
        let per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d;
        v * d + n * d + self.layers * per_layer + (d * d + d) + (d * v + v)
    }

    /// `(name, shape)` of every parameter in registry order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d, self.ffn_dim);
        let mut out = vec![
            ("item_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("attn.w_q"), vec![d, d]),
                (p("attn.w_k"), vec![d, d]),
                (p("attn.w_v"), vec![d, d]),
                (p("attn.w_o"), vec![d, d]),
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
            ]);
        }
        out.extend([
            ("head.w1".to_string(), vec![d, d]),
            ("head.b1".to_string(), vec![d]),
            ("head.w2".to_string(), vec![d, v]),
            ("head.b2".to_string(), vec![v]),
        ]);
        out
    }
}

const LAYER_PARAMS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

fn init_kind(name: &str) -> Init {
    if name.ends_with("gamma") {
        Init::One
    } else if name.ends_with("beta") || name.contains(".b") {
        Init::Zero
    } else {
        Init::Normal
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// A token batch laid out row-major as `rows × len`.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch<'a> {
    pub tokens: &'a [usize],
    pub valid: &'a [bool],
    pub rows: usize,
    pub len: usize,
}

impl<T: Scalar> Model<T> {
    /// Truncated-normal weights (±2σ), zero biases, unit layer-norm gains,
    /// zero PAD embedding. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let kind = init_kind(&name);
            let mut t = Tensor::from_fn(&shape, |_| match kind {
                Init::Normal => T::lit(truncated_normal(&mut rng) * std),
                Init::Zero => T::zero(),
                Init::One => T::one(),
            });
            if name == "item_embedding" {
                t.data_mut()[..config.d].iter_mut().for_each(|x| *x = T::zero());
            }
            params.push((name, t));
        }
        Ok(Self { config, params })
    }

    /// Builds a model from named tensors, checking names and shapes against
    /// the config's registry.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Parameters as graph leaves; differentiable when `trainable`.
    pub fn bind(&self, trainable: bool) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    Var::param(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect()
    }

    fn check_batch(&self, batch: &TokenBatch<'_>) -> Result<()> {
        let n = batch.rows * batch.len;
        if batch.tokens.len() != n || batch.valid.len() != n {
            return Err(Error::shape(
                "forward",
                &[batch.rows, batch.len],
                &[batch.tokens.len(), batch.valid.len()],
            ));
        }
        if batch.len > self.config.max_len || batch.len == 0 {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                batch.len, self.config.max_len
            )));
        }
        if let Some(pos) = batch.tokens.iter().position(|&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {} at row {} position {} is out of range (vocab size {})",
                batch.tokens[pos],
                pos / batch.len,
                pos % batch.len,
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final hidden states `[rows·len, d]`.
    pub fn encode(&self, vars: &[Var<T>], batch: &TokenBatch<'_>, mode: &mut Mode<'_>) -> Result<Var<T>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, n, d) = (batch.rows, batch.len, cfg.d);
        let tok = vars[0].gather_rows(batch.tokens)?.reshape(&[b, n, d])?;
        let pos = vars[1].narrow0(0, n)?;
        let mut x = self.dropout(tok.add(&pos)?, mode)?;
        for l in 0..cfg.layers {
            let p = &vars[2 + l * LAYER_PARAMS..2 + (l + 1) * LAYER_PARAMS];
            let q = x.matmul(&p[0])?;
            let k = x.matmul(&p[1])?;
            let v = x.matmul(&p[2])?;
            let a = attention::attend(&cfg.attention, &q, &k, &v, batch.valid)?.matmul(&p[3])?;
            let a = self.dropout(a, mode)?;
            x = x.add(&a)?.layer_norm(&p[4], &p[5], T::lit(cfg.ln_eps))?;
            let h = x.matmul(&p[6])?.add(&p[7])?.gelu().matmul(&p[8])?.add(&p[9])?;
            let h = self.dropout(h, mode)?;
            x = x.add(&h)?.layer_norm(&p[10], &p[11], T::lit(cfg.ln_eps))?;
        }
        x.reshape(&[b * n, d])
    }

    fn head(&self, vars: &[Var<T>], hidden: &Var<T>) -> Result<Var<T>> {
        let h = &vars[vars.len() - 4..];
        hidden.matmul(&h[0])?.add(&h[1])?.gelu().matmul(&h[2])?.add(&h[3])
    }

    /// Logits `[rows, len, V]` for every position.
    pub fn forward(&self, vars: &[Var<T>], batch: &TokenBatch<'_>, mut mode: Mode<'_>) -> Result<Var<T>> {
        let hidden = self.encode(vars, batch, &mut mode)?;
        self.head(vars, &hidden)?
            .reshape(&[batch.rows, batch.len, self.config.vocab_size])
    }

    /// Logits `[positions.len(), V]` at flat positions `row·len + col` only.
    pub fn forward_at(
        &self,
        vars: &[Var<T>],
        batch: &TokenBatch<'_>,
        positions: &[usize],
        mut mode: Mode<'_>,
    ) -> Result<Var<T>> {
        let hidden = self.encode(vars, batch, &mut mode)?;
        self.head(vars, &hidden.gather_rows(positions)?)
    }

    fn dropout(&self, x: Var<T>, mode: &mut Mode<'_>) -> Result<Var<T>> {
        let p = self.config.dropout;
        if !mode.is_train() || p == 0.0 {
            return Ok(x);
        }
        let Mode::Train(rng) = mode else { unreachable!() };
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
        x.mul(&Var::constant(mask))
    }

    /// Left-padded `[MASK]`-terminated input for next-item scoring: the last
    /// `max_len − 1` items followed by MASK.
    pub fn next_item_input(&self, sequence: &[usize]) -> (Vec<usize>, Vec<bool>) {
        let n = self.config.max_len;
        let keep = &sequence[sequence.len().saturating_sub(n - 1)..];
        let mut tokens = vec![PAD; n - keep.len() - 1];
        tokens.extend_from_slice(keep);
        tokens.push(self.config.mask_token());
        let valid = tokens.iter().map(|&t| t != PAD).collect();
        (tokens, valid)
    }

    /// Logits at the appended MASK for each sequence, processed in chunks of
    /// `batch_size` sequences.
    pub fn score_next(&self, sequences: &[&[usize]], batch_size: usize) -> Result<Vec<Vec<T>>> {
        let vars = self.bind(false);
        let n = self.config.max_len;
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(batch_size.max(1)) {
            let mut tokens = Vec::with_capacity(chunk.len() * n);
            let mut valid = Vec::with_capacity(chunk.len() * n);
            for seq in chunk {
                if seq.is_empty() {
                    return Err(Error::Input("cannot score an empty sequence".into()));
                }
                let (t, v) = self.next_item_input(seq);
                tokens.extend(t);
                valid.extend(v);
            }
            let batch = TokenBatch {
                tokens: &tokens,
                valid: &valid,
                rows: chunk.len(),
                len: n,
            };
            let positions: Vec<usize> = (0..chunk.len()).map(|r| r * n + n - 1).collect();
            let logits = self.forward_at(&vars, &batch, &positions, Mode::Eval)?;
            let v = self.config.vocab_size;
            out.extend(logits.value().data().chunks(v).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Top-`k` item tokens after `sequence`, excluding PAD and MASK; ties
    /// go to the smaller item id.
    pub fn predict_next(&self, sequence: &[usize], k: usize) -> Result<Vec<usize>> {
        if sequence.is_empty() {
            return Err(Error::Input("cannot predict from an empty sequence".into()));
        }
        let logits = self.score_next(&[sequence], 1)?.remove(0);
        Ok(top_k(&logits, k, &[PAD, self.config.mask_token()]))
    }
}

/// Indices of the `k` largest values not in `excluded`, ties by ascending
/// index.
pub fn top_k<T: Scalar>(logits: &[T], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).filter(|i| !excluded.contains(i)).collect();
    ids.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Standard normal conditioned on `|x| ≤ 2`.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}
