use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.synthetic=cyclic",
    "data.users=30",
    "data.catalog=12",
    "data.length=10",
    "model.d=16",
    "model.layers=1",
    "model.ffn_dim=32",
    "model.max_len=8",
    "train.epochs=2",
    "train.batch_size=8",
];

fn hydrarec(args: &[&str], sets: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hydrarec"));
    cmd.args(args).arg("--out").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn runs(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out).map_or(vec![], |d| d.map(|e| e.unwrap().path()).collect());
    v.sort();
    v
}

fn only_run(out: &Path) -> PathBuf {
    let v = runs(out);
    assert_eq!(v.len(), 1, "{v:?}");
    v[0].clone()
}

/// Every file under `dir`, keyed by relative path.
fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn hash_of(run: &Path) -> String {
    let name = run.file_name().unwrap().to_string_lossy().into_owned();
    name.rsplit('-').next().unwrap().to_string()
}

#[test]
fn help_lists_every_key_with_its_default() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("toy.dat");
    fs::write(&log, "1::10::5::1\n1::11::5::2\n1::12::5::3\n").unwrap();
    let o = hydrarec(&["ingest"], &[&format!("data.path={}", log.display())], &tmp.path().join("runs"));
    ok(&o);
    let effective = fs::read_to_string(only_run(&tmp.path().join("runs")).join("config.toml")).unwrap();

    let help = Command::new(env!("CARGO_BIN_EXE_hydrarec")).arg("--help").output().unwrap();
    let help = String::from_utf8(help.stdout).unwrap();
    let mut keys = 0;
    for line in effective.lines().filter(|l| !l.starts_with('#')) {
        let (key, _) = line.split_once(" = ").unwrap();
        keys += 1;
        if key == "data.path" {
            assert!(help.contains("data.path = \"\""));
        } else {
            assert!(help.contains(line), "--help lacks `{line}`");
        }
    }
    let documented = help.lines().filter(|l| l.starts_with("  ") && l.contains(" = ")).count();
    assert_eq!(documented, keys);
}

#[test]
fn config_errors_exit_2_and_list_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = hydrarec(&["train"], &[TINY, &["train.epochs=0"]].concat(), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(runs(&out).is_empty());

    let o = hydrarec(&["train"], &["train.epochs=0", "attention.mask=sideways", "no.such.key=1", "data.synthetic=cyclic"], &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["epochs", "sideways", "no.such.key"] {
        assert!(err.contains(needle), "{err}");
    }

    let file = tmp.path().join("run.toml");
    fs::write(&file, "[model]\nd = 16\nheads_typo = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hydrarec"))
        .args(["train", "--config"])
        .arg(&file)
        .args(["--set", "data.synthetic=cyclic", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.heads_typo"));
}

#[test]
fn data_and_numeric_failures_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = hydrarec(&["ingest"], &["data.path=/definitely/missing.dat"], &out);
    assert_eq!(o.status.code(), Some(3));

    let o = hydrarec(&["train"], &[TINY, &["model.init_std=1e30"]].concat(), &out);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn reruns_reproduce_every_non_timing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&hydrarec(&["train", "--seed", "7"], TINY, out));
    }
    let (ra, rb) = (only_run(&a), only_run(&b));
    assert_eq!(hash_of(&ra), hash_of(&rb));
    let (fa, fb) = (files(&ra), files(&rb));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name != Path::new("timings.csv") {
            assert!(bytes == &fb[name], "{} differs", name.display());
        }
    }
    let hash = hash_of(&ra);
    for (name, bytes) in &fa {
        let text = String::from_utf8_lossy(bytes);
        assert!(text.contains(&hash), "{} lacks the config hash", name.display());
    }

    // a different seed is a different config
    let c = tmp.path().join("c");
    ok(&hydrarec(&["train", "--seed", "8"], TINY, &c));
    assert_ne!(hash_of(&only_run(&c)), hash);
}

#[test]
fn evaluate_matches_the_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let sets = [TINY, &["eval.split=both"]].concat();
    ok(&hydrarec(&["train"], &sets, &out));
    let train_dir = only_run(&out);
    let ckpt = format!("checkpoint={}", train_dir.join("model.ckpt").display());

    let eval_out = tmp.path().join("eval");
    ok(&hydrarec(&["evaluate"], &[sets.as_slice(), &[&ckpt]].concat(), &eval_out));
    let metrics = |p: PathBuf| -> Vec<serde_json::Value> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("config_hash");
                v
            })
            .collect()
    };
    let trained = metrics(train_dir.join("eval.jsonl"));
    assert_eq!(trained.len(), 2);
    assert_eq!(trained, metrics(only_run(&eval_out).join("eval.jsonl")));

    let pred_out = tmp.path().join("pred");
    let o = hydrarec(&["predict"], &[sets.as_slice(), &[&ckpt, "predict.k=3"]].concat(), &pred_out);
    ok(&o);
    let lines = fs::read_to_string(only_run(&pred_out).join("predictions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["items"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_tabulates_heads_by_width() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let sets = [
        "data.synthetic=cyclic",
        "data.users=12",
        "data.catalog=8",
        "data.length=6",
        "model.layers=1",
        "model.ffn_dim=16",
        "model.max_len=6",
        "train.epochs=1",
        "train.eval_every=0",
    ];
    let o = hydrarec(&["sweep"], &sets, &out);
    ok(&o);
    let run = only_run(&out);
    let table = fs::read_to_string(run.join("sweep.md")).unwrap();
    let blocks: Vec<&str> = table.split("\n\n").filter(|b| b.starts_with("| Metric")).collect();
    assert_eq!(blocks.len(), 3);
    for (block, h) in blocks.iter().zip([8, 16, 64]) {
        let rows: Vec<&str> = block.lines().collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].matches(&format!("h = {h}, d = ")).count(), 4);
        for (row, name) in rows[2..].iter().zip(["NDCG@10", "HIT@10", "Recall@10"]) {
            assert!(row.starts_with(&format!("| {name} |")));
            assert_eq!(row.matches('|').count(), 6);
        }
    }
    assert_eq!(fs::read_to_string(run.join("sweep.jsonl")).unwrap().lines().count(), 12);
    assert_eq!(runs(&run).iter().filter(|p| p.is_dir()).count(), 12);
}

#[test]
fn bench_writes_csv_charts_and_slopes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let sets = [
        "bench.mechanisms=[\"hydra\", \"linear\"]",
        "bench.n_values=[32, 64, 128, 256]",
        "bench.d_values=[8, 16, 32, 64]",
        "bench.fixed_n=64",
        "bench.fixed_d=16",
        "bench.warmup=1",
    ];
    ok(&hydrarec(&["bench"], &sets, &out));
    let run = only_run(&out);
    let csv = fs::read_to_string(run.join("bench.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    assert_eq!(lines.next(), Some("mechanism,kernel,mask,N,d,H,repeat_idx,seconds"));
    assert_eq!(lines.count(), 2 * 2 * 4 * 5);
    for f in ["bench_n.svg", "bench_d.svg", "slopes.md"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = hydrarec(&["bench"], &["bench.repeats=2", "bench.warmup=0"], &tmp.path().join("bad"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("repeats") && err.contains("warmup"), "{err}");
}
