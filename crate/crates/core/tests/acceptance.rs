//! Acceptance run: one PASS/FAIL/NOT RUN line per criterion.
//!
//! The process exits non-zero on any FAIL only when
//! `HYDRAREC_ACCEPTANCE_STRICT=1`; by default the lines are the result, so a
//! known-red criterion does not mask the rest of `cargo test`.
//!
//! The MovieLens-1M criteria read `ratings.dat` from `HYDRAREC_ML1M`.

use std::time::Instant;

use hydrarec::attention::{attend_tensors, AttentionSpec, Kernel, MaskMode, Mechanism, PaddingMask};
use hydrarec::autodiff::Var;
use hydrarec::bench::{run_suite, slope_table, Axis, BenchGrid, BenchTarget, Heads};
use hydrarec::data::{build_sequences, ingest, split_leave_one_out, DatasetStats, EvalCase, InputFormat};
use hydrarec::gradcheck::check_gradients;
use hydrarec::metrics::{evaluate, evaluate_with, hr_at_k, ndcg_at_k, EvalRecord};
use hydrarec::model::{Mode, Model, ModelConfig, TokenBatch};
use hydrarec::tensor::Tensor;
use hydrarec::trainer::{Synthetic, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn random_qkv(n: usize, d: usize, rng: &mut ChaCha8Rng) -> [Tensor<f64>; 3] {
    [0, 1, 2].map(|_| Tensor::<f64>::randn(&[n, d], rng))
}

fn max_abs(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    a.data().iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Hydra at H = d against a loop over d one-feature heads, each computing
/// `φ(q_t)_j Σ_s φ(k_s)_j v_s,j` over visible keys.
fn hydra_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(1..=64);
        let d = [8, 16, 32][i % 3];
        let causal = i % 2 == 1;
        let [q, k, v] = random_qkv(n, d, &mut rng);
        let spec = AttentionSpec::hydra(d).with_mask(if causal { MaskMode::Causal } else { MaskMode::Bidirectional });
        let fast = match attend_tensors(&spec, &q, &k, &v, &PaddingMask::all_valid(n)) {
            Ok(t) => t,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let (fq, fk, v) = (l2_rows(&rows(&q)), l2_rows(&rows(&k)), rows(&v));
        let mut slow = vec![vec![0.0; d]; n];
        for j in 0..d {
            for t in 0..n {
                let last = if causal { t } else { n - 1 };
                let g: f64 = (0..=last).map(|s| fk[s][j] * v[s][j]).sum();
                slow[t][j] = fq[t][j] * g;
            }
        }
        worst = worst.max(max_abs(&fast, &slow));
    }
    verdict(worst <= 1e-5, format!("100 instances, max |Δ| = {worst:.2e} (tolerance 1e-5)"))
}

/// Identity-kernel linear attention against `(Q_h K_hᵀ) V_h` per head.
fn linear_associativity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(1..=64);
        let d = [8, 16, 32][i % 3];
        let heads = [1, 2, 4, 8][rng.gen_range(0..4)];
        let [q, k, v] = random_qkv(n, d, &mut rng);
        let spec = AttentionSpec { normalize_denominator: false, ..AttentionSpec::linear(Kernel::Identity, heads) };
        let fast = match attend_tensors(&spec, &q, &k, &v, &PaddingMask::all_valid(n)) {
            Ok(t) => t,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let (q, k, v) = (rows(&q), rows(&k), rows(&v));
        let w = d / heads;
        let mut slow = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * w..(h + 1) * w;
            for t in 0..n {
                for s in 0..n {
                    let sim: f64 = cols.clone().map(|c| q[t][c] * k[s][c]).sum();
                    for c in cols.clone() {
                        slow[t][c] += sim * v[s][c];
                    }
                }
            }
        }
        let scale = slow.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(max_abs(&fast, &slow) / scale);
    }
    verdict(worst <= 1e-5, format!("100 instances, max |Δ| / max|out| = {worst:.2e} (tolerance 1e-5)"))
}

fn four_mechanisms(d: usize) -> Vec<AttentionSpec> {
    Mechanism::ALL.iter().map(|&m| AttentionSpec::preset(m, d, 2)).collect()
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (v, n) = (30, 10);
    let mut notes = Vec::new();
    let mut ok = true;
    for spec in four_mechanisms(16) {
        let spec = spec.with_mask(MaskMode::Causal);
        let cfg = ModelConfig { layers: 2, ffn_dim: 32, dropout: 0.0, ..ModelConfig::new(v, 16, n) }.with_attention(spec.clone());
        let model = Model::<f32>::init(cfg, 4).expect("valid config");
        let vars = model.bind(false);
        let run = |tokens: &[usize]| {
            let valid = vec![true; n];
            let batch = TokenBatch { tokens, valid: &valid, rows: 1, len: n };
            model.forward(&vars, &batch, Mode::Eval).expect("forward").value().to_vec()
        };
        let mut token_ok = true;
        for t in 0..n - 1 {
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(1..v)).collect();
            let mut b = a.clone();
            for x in &mut b[t + 1..] {
                *x = rng.gen_range(1..v);
            }
            let (la, lb) = (run(&a), run(&b));
            token_ok &= la[..(t + 1) * v] == lb[..(t + 1) * v];
        }

        let mut float_worst = 0.0f32;
        for t in 0..n - 1 {
            let [q, k, val] = [0, 1, 2].map(|_| Tensor::<f32>::randn(&[n, 16], &mut rng));
            let perturb = |x: &Tensor<f32>, rng: &mut ChaCha8Rng| {
                let mut y = x.clone();
                for e in &mut y.data_mut()[(t + 1) * 16..] {
                    *e += rng.gen_range(-1.0..1.0);
                }
                y
            };
            let (q2, k2, v2) = (perturb(&q, &mut rng), perturb(&k, &mut rng), perturb(&val, &mut rng));
            let mask = PaddingMask::all_valid(n);
            let a = attend_tensors(&spec, &q, &k, &val, &mask).expect("attend");
            let b = attend_tensors(&spec, &q2, &k2, &v2, &mask).expect("attend");
            for (x, y) in a.data()[..(t + 1) * 16].iter().zip(&b.data()[..(t + 1) * 16]) {
                float_worst = float_worst.max((x - y).abs());
            }
        }
        ok &= token_ok && float_worst <= 1e-6;
        notes.push(format!(
            "{}: tokens {}, floats max |Δ| {float_worst:.1e}",
            spec.mechanism,
            if token_ok { "exact" } else { "LEAK" }
        ));
    }
    verdict(ok, notes.join("; "))
}

fn gradients() -> Outcome {
    let (v, d, n) = (20, 8, 6);
    let mut notes = Vec::new();
    let mut ok = true;
    for spec in four_mechanisms(d) {
        let cfg = ModelConfig { layers: 1, ffn_dim: 16, dropout: 0.0, init_std: 0.3, ..ModelConfig::new(v, d, n) }
            .with_attention(spec.clone());
        let model = Model::<f64>::init(cfg, 7).expect("valid config");
        let mask_token = model.config.mask_token();
        let tokens = vec![0, 3, 4, mask_token, 6, mask_token, 1, 2, mask_token, 5, 17, mask_token];
        let valid: Vec<bool> = tokens.iter().map(|&t| t != 0).collect();
        let labels = [(3, 5), (5, 9), (8, 3), (11, 14)];
        let positions: Vec<usize> = labels.iter().map(|l| l.0).collect();
        let targets: Vec<Option<usize>> = labels.iter().map(|l| Some(l.1)).collect();
        let batch = TokenBatch { tokens: &tokens, valid: &valid, rows: 2, len: n };
        let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let f = |vars: &[Var<f64>]| model.forward_at(vars, &batch, &positions, Mode::Eval)?.masked_cross_entropy(&targets);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        match check_gradients(&inputs, f, 1e-5, 100, &mut rng) {
            Ok(r) => {
                ok &= r.checked >= 50 && r.max_rel_error <= 1e-4;
                notes.push(format!("{}: {} coords, max rel {:.1e}", spec.mechanism, r.checked, r.max_rel_error));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{}: {e}", spec.mechanism));
            }
        }
    }
    verdict(ok, notes.join("; "))
}

fn complexity() -> Outcome {
    let grid = BenchGrid {
        targets: vec![
            BenchTarget::new(Mechanism::DotProduct, Heads::Fixed(8)),
            BenchTarget::new(Mechanism::Linear, Heads::Fixed(8)),
            BenchTarget::new(Mechanism::Hydra, Heads::PerFeature),
        ],
        ..BenchGrid::default()
    };
    let start = Instant::now();
    let result = match run_suite(&grid, |_| {}) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    eprint!("{}", slope_table(&result));
    let slope = |m, axis| result.find(m, axis).and_then(|s| s.fit.as_ref()).map_or(f64::NAN, |f| f.slope);
    let gates = [
        ("dot_product vs N", slope(Mechanism::DotProduct, Axis::N), ">=", 1.7),
        ("hydra vs N", slope(Mechanism::Hydra, Axis::N), "<=", 1.3),
        ("hydra vs d", slope(Mechanism::Hydra, Axis::D), "<=", 1.35),
        ("linear(H=8) vs d", slope(Mechanism::Linear, Axis::D), ">=", 1.6),
    ];
    let mut ok = minutes <= 30.0;
    let mut notes = Vec::new();
    for (name, s, op, bound) in gates {
        let pass = if op == ">=" { s >= bound } else { s <= bound };
        ok &= pass;
        notes.push(format!("{name} {s:.2} (need {op} {bound}){}", if pass { "" } else { " MISS" }));
    }
    notes.push(format!("suite {minutes:.1} min"));
    verdict(ok, notes.join("; "))
}

fn synthetic_learning() -> Outcome {
    let start = Instant::now();
    let (seqs, vocab, _) = Synthetic::Cyclic { users: 500, catalog: 50, length: 30 }.generate(0).expect("generator");
    let split = split_leave_one_out(&seqs).expect("split");
    let cfg = ModelConfig { layers: 2, ..ModelConfig::new(vocab.vocab_size(), 64, 20) }.with_attention(AttentionSpec::hydra(64));
    let tc = TrainConfig { epochs: 30, batch_size: 32, learning_rate: 1e-3, mask_prob: 0.1, eval_every: 0, ..Default::default() };
    let mut trainer = match Model::init(cfg, 0).and_then(|m| Trainer::new(m, tc)) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    if let Err(e) = trainer.fit(&split.train, &[], |_, _| Ok(())) {
        return Outcome::Fail(e.to_string());
    }
    let r = evaluate(&trainer.model, &split.test, 10, 256).expect("evaluate");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    // the generating rule predicts the successor of the last item
    let oracle = split.test.iter().filter(|c| c.prefix.last().expect("non-empty") % 50 + 1 == c.target).count() as f64
        / split.test.len() as f64;
    verdict(
        r.hr >= 0.9 && r.ndcg >= 0.6 && minutes <= 10.0 && r.hr <= oracle.max(1.0),
        format!("HR@10 {:.4}, NDCG@10 {:.4} after 30 epochs in {minutes:.1} min; oracle HR@1 {oracle:.1}", r.hr, r.ndcg),
    )
}

fn ml1m_path() -> Result<String, Outcome> {
    match std::env::var("HYDRAREC_ML1M") {
        Ok(p) => Ok(p),
        Err(_) if std::env::var("HYDRAREC_REQUIRE_ML1M").as_deref() == Ok("1") => {
            Err(Outcome::Fail("HYDRAREC_ML1M is not set".into()))
        }
        Err(_) => Err(Outcome::NotRun("set HYDRAREC_ML1M to the MovieLens-1M ratings.dat".into())),
    }
}

fn ml1m_directional() -> Outcome {
    let path = match ml1m_path() {
        Ok(p) => p,
        Err(o) => return o,
    };
    let log = match ingest(&path, InputFormat::DoubleColon) {
        Ok(l) => l,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (seqs, vocab) = build_sequences(&log, 3).expect("sequences");
    let split = split_leave_one_out(&seqs).expect("split");
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, mask) in [("HydraRecBi", MaskMode::Bidirectional), ("HydraRecUni", MaskMode::Causal)] {
        let cfg = ModelConfig::new(vocab.vocab_size(), 64, 50).with_attention(AttentionSpec::hydra(64).with_mask(mask));
        let tc = TrainConfig { epochs: 10, batch_size: 128, eval_every: 0, ..Default::default() };
        let mut t = Trainer::new(Model::init(cfg, 0).expect("model"), tc).expect("trainer");
        if let Err(e) = t.fit(&split.train, &[], |_, _| Ok(())) {
            return Outcome::Fail(format!("{name}: {e}"));
        }
        let r = evaluate(&t.model, &split.test, 10, 256).expect("evaluate");
        ok &= r.hr >= 0.30;
        notes.push(format!("{name} HR@10 {:.4} NDCG@10 {:.4}", r.hr, r.ndcg));
    }
    notes.push("reference: HydraRecBi NDCG@10 0.4972 after long training".into());
    verdict(ok, notes.join("; "))
}

fn ml1m_fidelity() -> Outcome {
    let path = match ml1m_path() {
        Ok(p) => p,
        Err(o) => return o,
    };
    let log = match ingest(&path, InputFormat::DoubleColon) {
        Ok(l) => l,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (seqs, vocab) = build_sequences(&log, 3).expect("sequences");
    let s = DatasetStats::of(&seqs, &vocab);
    let interactions_ok = (s.interactions as f64 - 1e6).abs() <= 0.002 * 1e6;
    let sparsity_ok = (s.sparsity - 0.93).abs() <= 0.01;
    verdict(
        s.users == 6040 && interactions_ok && sparsity_ok,
        format!(
            "users {} (need 6040), items {}, interactions {} (need 1e6 ± 0.2%), sparsity {:.2}% (need ≈ 93%)",
            s.users,
            s.items,
            s.interactions,
            100.0 * s.sparsity
        ),
    )
}

fn metric_units() -> Outcome {
    let cases: Vec<EvalCase> = (0..40).map(|u| EvalCase { user: u.to_string(), prefix: vec![1], target: 1 + u % 7 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = evaluate_with(&cases, 10, &[0], 8, |c| Ok(c.iter().map(|_| (0..9).map(|_| rng.gen()).collect()).collect()))
        .expect("evaluate");
    let checks = [
        ("rank 1 → 1", ndcg_at_k(1, 10) == 1.0),
        ("rank 4 → 1/log2 5", (ndcg_at_k(4, 10) - 1.0 / 5f64.log2()).abs() < 1e-15),
        ("rank 11 → 0", ndcg_at_k(11, 10) == 0.0 && hr_at_k(11, 10) == 0.0),
        ("HR ≡ Recall", r.hr == r.recall),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() { checks.map(|c| c.0).join(", ") } else { format!("failed: {}", failed.join(", ")) },
    )
}

fn determinism() -> Outcome {
    let run = || -> hydrarec::Result<(Vec<u8>, String, Vec<f64>)> {
        let (seqs, vocab, _) = Synthetic::Markov { users: 60, catalog: 30, length: 15, fanout: 3, p: 0.7 }.generate(5)?;
        let split = split_leave_one_out(&seqs)?;
        let cfg = ModelConfig { layers: 1, ffn_dim: 32, ..ModelConfig::new(vocab.vocab_size(), 16, 10) }
            .with_attention(AttentionSpec::hydra(16));
        let tc = TrainConfig { epochs: 3, batch_size: 16, seed: 5, ..Default::default() };
        let mut t = Trainer::new(Model::init(cfg, 5)?, tc)?;
        t.fit(&split.train, &split.valid, |_, _| Ok(()))?;
        let mut bytes = Vec::new();
        t.checkpoint().write_to(&mut bytes).map_err(|e| hydrarec::Error::io("<memory>", e))?;
        let r = evaluate(&t.model, &split.test, 10, 64)?;
        let record = EvalRecord::new(&r, &t.model.config.attention.label(), "markov", "test", "-").to_json_line();
        Ok((bytes, record, t.log.iter().map(|e| e.loss).collect()))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => verdict(
            a == b,
            format!("checkpoint ({} bytes), eval record and loss curve {}", a.0.len(), if a == b { "identical" } else { "DIFFER" }),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::Fail(e.to_string()),
    }
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("hydra equals its per-head loop", hydra_equivalence),
        ("linear attention associativity", linear_associativity),
        ("causal masking leaks nothing", causality),
        ("cloze-loss gradients", gradients),
        ("complexity slopes", complexity),
        ("synthetic cyclic learning", synthetic_learning),
        ("MovieLens-1M directional accuracy", ml1m_directional),
        ("MovieLens-1M ingestion fidelity", ml1m_fidelity),
        ("metric unit values", metric_units),
        ("deterministic reruns", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match check() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {:>2} {tag:<7} {name} ({:.1}s): {detail}", i + 1, start.elapsed().as_secs_f64());
    }
    if failed > 0 && std::env::var("HYDRAREC_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
