use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use hydrarec::attention::{AttentionSpec, Kernel, MaskMode, Mechanism, ScaleRule};
use hydrarec::bench::{BenchGrid, BenchTarget, Heads, TimingOptions};
use hydrarec::data::InputFormat;
use hydrarec::model::ModelConfig;
use hydrarec::trainer::{Synthetic, TrainConfig};
use sha2::{Digest, Sha256};
use toml::Value;

pub struct Key {
    pub name: &'static str,
    /// TOML literal.
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal, $doc:literal;)+) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, default: $default, doc: $doc }),+];
    };
}

keys! {
    "seed" = "0", "seed for initialisation, batching, dropout, subsampling and synthetic data";
    "data.path" = "\"\"", "interaction log (.dat, .csv) or sequence cache (.tsv)";
    "data.format" = "\"auto\"", "auto, double_colon, csv or cache";
    "data.name" = "\"\"", "dataset label in records; empty uses the file stem or synthetic kind";
    "data.min_len" = "3", "users with fewer interactions are dropped";
    "data.synthetic" = "\"none\"", "none, cyclic or markov; anything but none replaces data.path";
    "data.users" = "500", "synthetic users";
    "data.catalog" = "50", "synthetic catalog size";
    "data.length" = "30", "synthetic sequence length";
    "data.fanout" = "4", "successors per item (markov)";
    "data.markov_p" = "0.8", "probability of the dominant successor (markov)";
    "model.d" = "64", "embedding width";
    "model.layers" = "2", "encoder blocks";
    "model.ffn_dim" = "256", "feed-forward hidden width";
    "model.max_len" = "50", "input window, including the appended mask token";
    "model.dropout" = "0.1", "dropout probability during training";
    "model.init_std" = "0.02", "std of the truncated-normal initialiser";
    "model.ln_eps" = "1e-12", "layer-norm epsilon";
    "attention.mechanism" = "\"hydra\"", "dot_product, linear, hydra or efficient";
    "attention.heads" = "0", "0 picks one head per feature for hydra and 8 otherwise";
    "attention.kernel" = "\"auto\"", "auto, identity, elu_plus_one or l2_row_norm";
    "attention.mask" = "\"bidirectional\"", "bidirectional or causal";
    "attention.normalize" = "\"auto\"", "linear-attention denominator: auto, true or false";
    "attention.scale" = "\"model_dim\"", "dot-product scale: model_dim, head_dim or a number";
    "attention.eps" = "1e-6", "guard for normalising denominators";
    "train.epochs" = "30", "training epochs";
    "train.batch_size" = "128", "sequences per step";
    "train.learning_rate" = "0.001", "Adam step size";
    "train.beta1" = "0.9", "Adam first-moment decay";
    "train.beta2" = "0.999", "Adam second-moment decay";
    "train.adam_eps" = "1e-8", "Adam epsilon";
    "train.max_grad_norm" = "0.0", "global gradient-norm clip; 0 disables";
    "train.mask_prob" = "0.1", "cloze masking probability";
    "train.eval_every" = "1", "validate every this many epochs; 0 disables";
    "train.valid_fraction" = "1.0", "fraction of users validated during training";
    "train.resume" = "\"\"", "trainer checkpoint to continue from";
    "eval.k" = "10", "cutoff for NDCG, HR and recall";
    "eval.batch_size" = "256", "users scored per forward pass";
    "eval.split" = "\"test\"", "valid, test or both";
    "checkpoint" = "\"\"", "model checkpoint read by evaluate and predict";
    "predict.user" = "\"\"", "user to recommend for; empty means every user";
    "predict.k" = "10", "recommendations per user";
    "bench.mechanisms" = "[\"dot_product\", \"linear\", \"hydra\", \"efficient\"]", "mechanisms to time";
    "bench.heads" = "8", "heads for every mechanism except hydra (one per feature)";
    "bench.mask" = "\"bidirectional\"", "bidirectional or causal";
    "bench.n_values" = "[256, 512, 1024, 2048, 4096, 8192]", "sequence lengths for the N sweep";
    "bench.fixed_d" = "64", "width during the N sweep";
    "bench.d_values" = "[16, 32, 64, 128, 256, 512]", "widths for the d sweep";
    "bench.fixed_n" = "2048", "length during the d sweep";
    "bench.repeats" = "5", "timed repeats per point";
    "bench.warmup" = "2", "untimed runs per point";
    "bench.backward" = "false", "time forward and backward";
    "bench.max_n_dot_product" = "0", "cap on N for dot_product; 0 means none";
    "sweep.rows" = "\"attention.heads\"", "key varied across table blocks";
    "sweep.row_values" = "[8, 16, 64]", "values for sweep.rows";
    "sweep.cols" = "\"model.d\"", "key varied across table columns";
    "sweep.col_values" = "[64, 128, 256, 512]", "values for sweep.cols";
}

fn default_value(key: &Key) -> Value {
    parse_literal(key.default).unwrap_or_else(|| panic!("bad default for {}", key.name))
}

fn parse_literal(s: &str) -> Option<Value> {
    let table: toml::Table = toml::from_str(&format!("v = {s}")).ok()?;
    table.get("v").cloned()
}

/// Lines for `--help`: every key with its default.
pub fn key_help() -> String {
    let width = KEYS.iter().map(|k| k.name.len() + k.default.len()).max().unwrap_or(0) + 3;
    let mut s = String::from("Configuration keys (set in --config or with --set key=value):\n");
    for k in KEYS {
        let lhs = format!("{} = {}", k.name, default_value(k));
        let _ = writeln!(s, "  {lhs:width$}  {}", k.doc);
    }
    s
}

/// Effective configuration: every key in [`KEYS`], defaults merged.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name.to_string(), default_value(k))).collect(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Array(_) => "an array",
        Value::Datetime(_) => "a datetime",
        Value::Table(_) => "a table",
    }
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides in order, with every
    /// entry that could not be applied.
    pub fn load(path: Option<&Path>, sets: &[String]) -> (Self, Vec<String>) {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        if let Some(path) = path {
            match std::fs::read_to_string(path) {
                Err(e) => errors.push(format!("{}: {e}", path.display())),
                Ok(text) => match toml::from_str::<toml::Table>(&text) {
                    Err(e) => errors.push(format!("{}: {}", path.display(), e.message())),
                    Ok(table) => {
                        let mut flat = Vec::new();
                        flatten("", &table, &mut flat);
                        for (k, v) in flat {
                            if let Err(e) = cfg.set_value(&k, v) {
                                errors.push(e);
                            }
                        }
                    }
                },
            }
        }
        for s in sets {
            match s.split_once('=') {
                None => errors.push(format!("--set `{s}`: expected key=value")),
                Some((k, raw)) => {
                    if let Err(e) = cfg.set(k.trim(), raw.trim()) {
                        errors.push(e);
                    }
                }
            }
        }
        (cfg, errors)
    }

    /// Sets `key` from a command-line string: a TOML literal when it parses
    /// as one, a bare string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let value = parse_literal(raw).unwrap_or_else(|| Value::String(raw.to_string()));
        self.set_value(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), String> {
        let Some(slot) = self.values.get_mut(key) else {
            return Err(format!("unknown key `{key}`"));
        };
        let value = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::String(_), Value::Boolean(b)) => Value::String(b.to_string()),
            (Value::String(_), Value::Integer(i)) => Value::String(i.to_string()),
            (Value::String(_), Value::Float(f)) => Value::String(f.to_string()),
            (old, new) if std::mem::discriminant(old) == std::mem::discriminant(&new) => new,
            (old, new) => return Err(format!("`{key}` must be {}, got {}", kind(old), kind(&new))),
        };
        *slot = value;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("string key")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("float key")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("bool key")
    }

    /// Non-negative integer; negatives are caught by [`check`](Self::check).
    pub fn uint(&self, key: &str) -> usize {
        self.get(key).as_integer().expect("integer key").max(0) as usize
    }

    fn uint_list(&self, key: &str) -> Vec<usize> {
        self.get(key)
            .as_array()
            .expect("array key")
            .iter()
            .filter_map(Value::as_integer)
            .map(|i| i.max(0) as usize)
            .collect()
    }

    fn str_list(&self, key: &str) -> Vec<&str> {
        self.get(key).as_array().expect("array key").iter().filter_map(Value::as_str).collect()
    }

    pub fn seed(&self) -> u64 {
        self.uint("seed") as u64
    }

    /// `key = value` lines in key order; also a valid TOML document.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Every semantic problem with the configuration.
    pub fn check(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (key, value) in &self.values {
            let negative = match value {
                Value::Integer(i) => *i < 0,
                Value::Array(a) => a.iter().any(|x| x.as_integer().is_some_and(|i| i < 0)),
                _ => false,
            };
            if negative {
                v.push(format!("`{key}` must not be negative"));
            }
        }
        for key in ["bench.n_values", "bench.d_values", "sweep.row_values", "sweep.col_values"] {
            let arr = self.get(key).as_array().expect("array key");
            if key.starts_with("bench") && arr.iter().any(|x| x.as_integer().is_none()) {
                v.push(format!("`{key}` must list integers"));
            }
        }
        if self.get("bench.mechanisms").as_array().expect("array key").iter().any(|x| x.as_str().is_none()) {
            v.push("`bench.mechanisms` must list strings".into());
        }
        for m in self.str_list("bench.mechanisms") {
            push_err(&mut v, Mechanism::from_str(m).map(drop));
        }
        let choice = |v: &mut Vec<String>, key: &str, allowed: &[&str]| {
            let got = self.str(key);
            if !allowed.contains(&got) {
                v.push(format!("`{key}` is `{got}`; expected one of: {}", allowed.join(", ")));
            }
        };
        choice(&mut v, "data.format", &["auto", "double_colon", "dat", "csv", "cache"]);
        choice(&mut v, "data.synthetic", &["none", "cyclic", "markov"]);
        choice(&mut v, "attention.normalize", &["auto", "true", "false"]);
        choice(&mut v, "eval.split", &["valid", "test", "both"]);
        push_err(&mut v, MaskMode::from_str(self.str("bench.mask")).map(drop));
        if self.str("attention.kernel") != "auto" {
            push_err(&mut v, Kernel::from_str(self.str("attention.kernel")).map(drop));
        }
        if self.uint("data.min_len") < 3 {
            v.push("`data.min_len` must be at least 3 (train, validation and test item)".into());
        }
        let frac = self.float("train.valid_fraction");
        if !(frac > 0.0 && frac <= 1.0) {
            v.push("`train.valid_fraction` must lie in (0, 1]".into());
        }
        if self.uint("eval.k") == 0 {
            v.push("`eval.k` must be positive".into());
        }
        if self.uint("predict.k") == 0 {
            v.push("`predict.k` must be positive".into());
        }
        if self.uint("bench.heads") == 0 {
            v.push("`bench.heads` must be positive".into());
        }
        v.extend(self.bench_grid().timing.violations().into_iter().map(|m| format!("bench: {m}")));
        if !(self.float("train.max_grad_norm") >= 0.0) {
            v.push("`train.max_grad_norm` must not be negative".into());
        }
        for key in ["sweep.rows", "sweep.cols"] {
            let target = self.str(key);
            if !self.values.contains_key(target) || target.starts_with("sweep.") {
                v.push(format!("`{key}` names `{target}`, which is not a sweepable key"));
            }
        }
        match self.attention(self.uint("model.d")) {
            Err(e) => v.extend(e),
            Ok(spec) => {
                // vocabulary size is only known once data is loaded
                let model = self.model_config(3, spec);
                v.extend(model.violations().into_iter().filter(|m| !m.contains("vocab")).map(|m| format!("model: {m}")));
            }
        }
        v.extend(self.train_config().violations().into_iter().map(|m| format!("train: {m}")));
        if let Some(s) = self.synthetic() {
            v.extend(s.violations().into_iter().map(|m| format!("data: {m}")));
        }
        v
    }

    pub fn attention(&self, d: usize) -> Result<AttentionSpec, Vec<String>> {
        let mut errs = Vec::new();
        let mechanism = Mechanism::from_str(self.str("attention.mechanism"));
        let mask = MaskMode::from_str(self.str("attention.mask"));
        let scale = ScaleRule::from_str(self.str("attention.scale"));
        let kernel = match self.str("attention.kernel") {
            "auto" => Ok(None),
            k => Kernel::from_str(k).map(Some),
        };
        let (Ok(mechanism), Ok(mask), Ok(scale), Ok(kernel)) = (mechanism, mask, scale, kernel) else {
            push_err(&mut errs, Mechanism::from_str(self.str("attention.mechanism")).map(drop));
            push_err(&mut errs, MaskMode::from_str(self.str("attention.mask")).map(drop));
            push_err(&mut errs, ScaleRule::from_str(self.str("attention.scale")).map(drop));
            return Err(errs);
        };
        let heads = match self.uint("attention.heads") {
            0 if mechanism == Mechanism::Hydra => d,
            0 => 8,
            h => h,
        };
        let mut spec = AttentionSpec::preset(mechanism, d, heads).with_mask(mask);
        spec.heads = heads;
        spec.scale = scale;
        spec.eps = self.float("attention.eps");
        if let Some(k) = kernel {
            spec.kernel = k;
        }
        match self.str("attention.normalize") {
            "true" => spec.normalize_denominator = true,
            "false" => spec.normalize_denominator = false,
            _ => {}
        }
        Ok(spec)
    }

    pub fn model_config(&self, vocab_size: usize, attention: AttentionSpec) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d: self.uint("model.d"),
            layers: self.uint("model.layers"),
            attention,
            ffn_dim: self.uint("model.ffn_dim"),
            max_len: self.uint("model.max_len"),
            dropout: self.float("model.dropout"),
            init_std: self.float("model.init_std"),
            ln_eps: self.float("model.ln_eps"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let clip = self.float("train.max_grad_norm");
        TrainConfig {
            epochs: self.uint("train.epochs"),
            batch_size: self.uint("train.batch_size"),
            learning_rate: self.float("train.learning_rate"),
            seed: self.seed(),
            beta1: self.float("train.beta1"),
            beta2: self.float("train.beta2"),
            adam_eps: self.float("train.adam_eps"),
            max_grad_norm: (clip > 0.0).then_some(clip),
            mask_prob: self.float("train.mask_prob"),
            eval_every: self.uint("train.eval_every"),
            eval_k: self.uint("eval.k"),
            eval_batch_size: self.uint("eval.batch_size"),
        }
    }

    pub fn synthetic(&self) -> Option<Synthetic> {
        let (users, catalog, length) = (self.uint("data.users"), self.uint("data.catalog"), self.uint("data.length"));
        match self.str("data.synthetic") {
            "cyclic" => Some(Synthetic::Cyclic { users, catalog, length }),
            "markov" => Some(Synthetic::Markov {
                users,
                catalog,
                length,
                fanout: self.uint("data.fanout"),
                p: self.float("data.markov_p"),
            }),
            _ => None,
        }
    }

    /// `None` means a sequence cache.
    pub fn input_format(&self, path: &Path) -> Option<InputFormat> {
        match self.str("data.format") {
            "cache" => None,
            "auto" if path.extension().is_some_and(|e| e == "tsv") => None,
            "auto" => Some(InputFormat::from_path(path)),
            f => Some(f.parse().expect("format checked")),
        }
    }

    pub fn bench_grid(&self) -> BenchGrid {
        let mask = MaskMode::from_str(self.str("bench.mask")).unwrap_or(MaskMode::Bidirectional);
        let targets = self
            .str_list("bench.mechanisms")
            .into_iter()
            .filter_map(|m| Mechanism::from_str(m).ok())
            .map(|m| {
                let heads = if m == Mechanism::Hydra { Heads::PerFeature } else { Heads::Fixed(self.uint("bench.heads")) };
                BenchTarget { mask, ..BenchTarget::new(m, heads) }
            })
            .collect();
        let cap = self.uint("bench.max_n_dot_product");
        BenchGrid {
            targets,
            n_values: self.uint_list("bench.n_values"),
            fixed_d: self.uint("bench.fixed_d"),
            d_values: self.uint_list("bench.d_values"),
            fixed_n: self.uint("bench.fixed_n"),
            max_n_dot_product: (cap > 0).then_some(cap),
            timing: TimingOptions {
                repeats: self.uint("bench.repeats"),
                warmup: self.uint("bench.warmup"),
                seed: self.seed(),
                backward: self.bool("bench.backward"),
            },
        }
    }
}

fn push_err(v: &mut Vec<String>, r: hydrarec::Result<()>) {
    if let Err(hydrarec::Error::Config(msgs)) = r {
        v.extend(msgs);
    } else if let Err(e) = r {
        v.push(e.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_parse() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.check(), Vec::<String>::new());
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.bench_grid(), BenchGrid::default());
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.d", "32").unwrap();
        cfg.set("data.path", "ratings.dat").unwrap();
        let table: toml::Table = toml::from_str(&cfg.canonical()).unwrap();
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut back = RunConfig::default();
        for (k, v) in flat {
            back.set_value(&k, v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn every_problem_is_reported() {
        let (cfg, errs) = RunConfig::load(None, &["nope=1".into(), "model.d=abc".into(), "train.epochs=2".into()]);
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert_eq!(cfg.uint("train.epochs"), 2);
        let (cfg, errs) = RunConfig::load(None, &["train.epochs=0".into(), "attention.mask=sideways".into(), "eval.k=-1".into()]);
        assert!(errs.is_empty());
        assert!(cfg.check().len() >= 3, "{:?}", cfg.check());
    }

    #[test]
    fn integers_widen_to_floats() {
        let mut cfg = RunConfig::default();
        cfg.set("train.learning_rate", "1").unwrap();
        assert_eq!(cfg.float("train.learning_rate"), 1.0);
        assert!(cfg.set("train.epochs", "1.5").is_err());
    }
}
