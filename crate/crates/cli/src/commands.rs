use std::fmt::Write as _;
use std::path::Path;

use hydrarec::bench::{run_suite, slope_table, svg_chart, to_csv, Axis};
use hydrarec::data::{
    build_sequences, ingest as read_log, read_cache, split_leave_one_out, subsample, write_cache_to, DatasetStats,
    EvalCase, ItemSequence, Split, Vocabulary,
};
use hydrarec::metrics::{evaluate, EvalRecord};
use hydrarec::model::checkpoint::Checkpoint;
use hydrarec::model::{top_k, Model, PAD};
use hydrarec::trainer::Trainer;
use serde_json::json;
use toml::Value;

use crate::config::RunConfig;
use crate::run::{CmdResult, Failure, RunDir};

pub struct Dataset {
    pub name: String,
    pub sequences: Vec<ItemSequence>,
    pub vocab: Vocabulary,
    pub malformed_lines: usize,
}

pub fn load_dataset(cfg: &RunConfig) -> CmdResult<Dataset> {
    let label = cfg.str("data.name");
    if let Some(synth) = cfg.synthetic() {
        let (sequences, vocab, _) = synth.generate(cfg.seed())?;
        let name = if label.is_empty() { cfg.str("data.synthetic") } else { label };
        return Ok(Dataset { name: name.to_string(), sequences, vocab, malformed_lines: 0 });
    }
    let path = Path::new(cfg.str("data.path"));
    let name = match label {
        "" => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        l => l.to_string(),
    };
    let (sequences, vocab, malformed_lines) = match cfg.input_format(path) {
        None => {
            let (s, v) = read_cache(path)?;
            (s, v, 0)
        }
        Some(format) => {
            let log = read_log(path, format)?;
            if !log.malformed_lines.is_empty() {
                log::warn!("{}: skipped {} malformed lines", path.display(), log.malformed_lines.len());
            }
            let (s, v) = build_sequences(&log, cfg.uint("data.min_len"))?;
            (s, v, log.malformed_lines.len())
        }
    };
    Ok(Dataset { name, sequences, vocab, malformed_lines })
}

fn header(run: &RunDir) -> String {
    format!("# config_hash = {}\n", run.hash)
}

pub fn write_config(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    run.write("config.toml", header(run) + &cfg.canonical())?;
    Ok(())
}

pub fn ingest(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let ds = load_dataset(cfg)?;
    let stats = DatasetStats::of(&ds.sequences, &ds.vocab);
    let mut cache = header(run).into_bytes();
    write_cache_to(&mut cache, &ds.sequences, &ds.vocab).expect("writing to memory");
    run.write("sequences.tsv", cache)?;
    let report = json!({
        "config_hash": run.hash,
        "dataset": ds.name,
        "users": stats.users,
        "items": stats.items,
        "interactions": stats.interactions,
        "avg_length": stats.avg_length,
        "sparsity": stats.sparsity,
        "malformed_lines": ds.malformed_lines,
    });
    run.write("stats.json", format!("{report:#}\n"))?;
    println!("dataset       {}", ds.name);
    println!("users         {}", stats.users);
    println!("items         {}", stats.items);
    println!("interactions  {}", stats.interactions);
    println!("avg length    {:.2}", stats.avg_length);
    println!("sparsity      {:.2}%", 100.0 * stats.sparsity);
    Ok(())
}

fn eval_records(cfg: &RunConfig, model: &Model<f32>, split: &Split, dataset: &str, hash: &str) -> CmdResult<Vec<EvalRecord>> {
    let which: &[(&str, &[EvalCase])] = match cfg.str("eval.split") {
        "valid" => &[("valid", &split.valid)],
        "test" => &[("test", &split.test)],
        _ => &[("valid", &split.valid), ("test", &split.test)],
    };
    let label = model.config.attention.label();
    which
        .iter()
        .map(|(name, cases)| {
            let r = evaluate(model, cases, cfg.uint("eval.k"), cfg.uint("eval.batch_size"))?;
            Ok(EvalRecord::new(&r, &label, dataset, name, hash))
        })
        .collect()
}

fn write_records(run: &RunDir, records: &[EvalRecord]) -> CmdResult {
    let body: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    run.write("eval.jsonl", body)?;
    for r in records {
        println!(
            "{} {}: NDCG@{k} {:.4}  HR@{k} {:.4}  Recall@{k} {:.4}  ({} users)",
            r.dataset, r.split, r.ndcg, r.hr, r.recall, r.n_users, k = r.k
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &RunDir) -> CmdResult<Vec<EvalRecord>> {
    let ds = load_dataset(cfg)?;
    train_on(cfg, &ds, run)
}

fn train_on(cfg: &RunConfig, ds: &Dataset, run: &RunDir) -> CmdResult<Vec<EvalRecord>> {
    let split = split_leave_one_out(&ds.sequences)?;
    let spec = cfg.attention(cfg.uint("model.d")).map_err(Failure::config)?;
    let model_cfg = cfg.model_config(ds.vocab.vocab_size(), spec);
    let train_cfg = cfg.train_config();
    let mut trainer = match cfg.str("train.resume") {
        "" => Trainer::new(Model::init(model_cfg, cfg.seed())?, train_cfg)?,
        path => {
            let ck = Checkpoint::load(path)?;
            if ck.config.vocab_size != model_cfg.vocab_size {
                return Err(Failure::data(format!(
                    "{path} was trained on {} tokens but the data has {}",
                    ck.config.vocab_size, model_cfg.vocab_size
                )));
            }
            Trainer::resume(&ck, train_cfg)?
        }
    };
    let valid = subsample(&split.valid, cfg.float("train.valid_fraction"), cfg.seed());
    let (mut log, mut timings) = (String::new(), String::from("epoch,wall_seconds\n"));
    let epochs = trainer.config.epochs;
    let fitted = trainer.fit(&split.train, &valid, |r, _| {
        let line = json!({
            "config_hash": run.hash,
            "epoch": r.epoch,
            "loss": r.loss,
            "steps": r.steps,
            "metrics": r.metrics,
        });
        let _ = writeln!(log, "{line}");
        let _ = writeln!(timings, "{},{}", r.epoch, r.wall_seconds);
        let metric = r.metrics.as_ref().map_or(String::new(), |m| format!("  valid NDCG@{} {:.4}", m.k, m.ndcg));
        eprintln!("epoch {}/{epochs}  loss {:.5}{metric}  {:.1}s", r.epoch, r.loss, r.wall_seconds);
        Ok(())
    });
    // `train_log.jsonl` holds everything deterministic; wall times go to a
    // separate file so reruns can be compared byte for byte
    run.write("train_log.jsonl", &log)?;
    run.write("timings.csv", header(run) + &timings)?;
    fitted?;

    let (selected, source) = match &trainer.best {
        Some((_, m)) => (m, "best_valid_ndcg"),
        None => (&trainer.model, "final"),
    };
    let mut ck = trainer.checkpoint();
    ck.metadata["config_hash"] = json!(run.hash);
    ck.save(run.file("trainer.ckpt"))?;
    let meta = json!({ "config_hash": run.hash, "dataset": ds.name, "epoch": trainer.epoch, "selected": source });
    Checkpoint::from_model(selected, meta).save(run.file("model.ckpt"))?;

    let records = eval_records(cfg, selected, &split, &ds.name, &run.hash)?;
    write_records(run, &records)?;
    Ok(records)
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> CmdResult<Model<f32>> {
    let path = cfg.str("checkpoint");
    let model = Checkpoint::load(path)?.model()?;
    if model.config.vocab_size != ds.vocab.vocab_size() {
        return Err(Failure::data(format!(
            "{path} was trained on {} tokens but the data has {}",
            model.config.vocab_size,
            ds.vocab.vocab_size()
        )));
    }
    Ok(model)
}

pub fn evaluate_cmd(cfg: &RunConfig, run: &RunDir) -> CmdResult<Vec<EvalRecord>> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let split = split_leave_one_out(&ds.sequences)?;
    let records = eval_records(cfg, &model, &split, &ds.name, &run.hash)?;
    write_records(run, &records)?;
    Ok(records)
}

pub fn predict(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let wanted = cfg.str("predict.user");
    let users: Vec<&ItemSequence> = ds.sequences.iter().filter(|s| wanted.is_empty() || s.user == wanted).collect();
    if users.is_empty() {
        return Err(Failure::data(format!("user `{wanted}` is not in the data")));
    }
    let seqs: Vec<&[usize]> = users.iter().map(|s| s.items.as_slice()).collect();
    let scores = model.score_next(&seqs, cfg.uint("eval.batch_size"))?;
    let excluded = [PAD, model.config.mask_token()];
    let mut out = String::new();
    for (s, row) in users.iter().zip(&scores) {
        let items: Vec<&str> = top_k(row, cfg.uint("predict.k"), &excluded)
            .into_iter()
            .map(|t| ds.vocab.raw(t).unwrap_or("?"))
            .collect();
        if !wanted.is_empty() {
            println!("{}", items.join(" "));
        }
        let _ = writeln!(out, "{}", json!({ "config_hash": run.hash, "user": s.user, "items": items }));
    }
    run.write("predictions.jsonl", out)?;
    Ok(())
}

pub fn bench(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let grid = cfg.bench_grid();
    let result = run_suite(&grid, |r| {
        eprintln!("{:<12} N={:<5} d={:<4} H={:<4} median {:.3e}s", r.mechanism, r.n, r.d, r.heads, r.median)
    })?;
    run.write("bench.csv", header(run) + &to_csv(&result))?;
    for (axis, file) in [(Axis::N, "bench_n.svg"), (Axis::D, "bench_d.svg")] {
        if result.series.iter().any(|s| s.axis == axis) {
            let title = format!("forward time vs {}", axis.name());
            let svg = format!("<!-- config_hash = {} -->\n{}", run.hash, svg_chart(&result, axis, &title));
            run.write(file, svg)?;
        }
    }
    let table = slope_table(&result);
    run.write("slopes.md", format!("<!-- config_hash = {} -->\n\n{table}", run.hash))?;
    print!("{table}");
    Ok(())
}

fn short(key: &str) -> &str {
    match key {
        "attention.heads" => "h",
        k => k.rsplit('.').next().unwrap_or(k),
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cross product of two keys; one training run per cell and a summary
/// table with one block per row value.
pub fn sweep(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let (rk, ck) = (cfg.str("sweep.rows"), cfg.str("sweep.cols"));
    let values = |key: &str| cfg.get(key).as_array().cloned().unwrap_or_default();
    let (rows, cols) = (values("sweep.row_values"), values("sweep.col_values"));
    if rows.is_empty() || cols.is_empty() {
        return Err(Failure::config(vec!["sweep.row_values and sweep.col_values must not be empty".into()]));
    }
    let mut cells = Vec::new();
    let mut errors = Vec::new();
    for rv in &rows {
        for cv in &cols {
            let name = format!("{}={}, {}={}", short(rk), show(rv), short(ck), show(cv));
            let mut cell = cfg.clone();
            let set = cell.set_value(rk, rv.clone()).and_then(|_| cell.set_value(ck, cv.clone()));
            match set {
                Err(e) => errors.push(format!("{name}: {e}")),
                Ok(()) => errors.extend(cell.check().into_iter().map(|e| format!("{name}: {e}"))),
            }
            cells.push((rv, cv, cell));
        }
    }
    if !errors.is_empty() {
        return Err(Failure::config(errors));
    }
    let touches_data = |k: &str| k.starts_with("data.") || k == "seed";
    let shared = if touches_data(rk) || touches_data(ck) { None } else { Some(load_dataset(cfg)?) };

    let mut results = Vec::new();
    let mut jsonl = String::new();
    for (rv, cv, cell) in &cells {
        eprintln!("cell {}={} {}={}", rk, show(rv), ck, show(cv));
        let dir_name = format!("{}-{}_{}-{}", short(rk), show(rv), short(ck), show(cv)).replace(['/', ' '], "_");
        let child = run.child(&dir_name, &cell.hash())?;
        write_config(cell, &child)?;
        let owned;
        let ds = match &shared {
            Some(ds) => ds,
            None => {
                owned = load_dataset(cell)?;
                &owned
            }
        };
        let records = train_on(cell, ds, &child)?;
        let r = records.iter().find(|r| r.split == "test").unwrap_or(&records[0]).clone();
        let line = json!({
            "config_hash": run.hash,
            "cell_hash": child.hash,
            rk: rv,
            ck: cv,
            "split": r.split,
            "k": r.k,
            "ndcg": r.ndcg,
            "hr": r.hr,
            "recall": r.recall,
            "n_users": r.n_users,
        });
        let _ = writeln!(jsonl, "{line}");
        results.push(r);
    }
    run.write("sweep.jsonl", jsonl)?;
    let table = sweep_table(rk, &rows, ck, &cols, &results);
    run.write("sweep.md", format!("<!-- config_hash = {} -->\n\n{table}", run.hash))?;
    print!("{table}");
    Ok(())
}

/// One markdown block per row value; `results` is row-major.
pub fn sweep_table(rk: &str, rows: &[Value], ck: &str, cols: &[Value], results: &[EvalRecord]) -> String {
    let mut s = String::new();
    for (i, rv) in rows.iter().enumerate() {
        let block = &results[i * cols.len()..(i + 1) * cols.len()];
        let k = block[0].k;
        s.push_str("| Metric |");
        for cv in cols {
            let _ = write!(s, " {} = {}, {} = {} |", short(rk), show(rv), short(ck), show(cv));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(cols.len()));
        s.push('\n');
        let metric_rows: [(&str, fn(&EvalRecord) -> f64); 3] =
            [("NDCG", |r| r.ndcg), ("HIT", |r| r.hr), ("Recall", |r| r.recall)];
        for (name, f) in metric_rows {
            let _ = write!(s, "| {name}@{k} |");
            for r in block {
                let _ = write!(s, " {:.4} |", f(r));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}
