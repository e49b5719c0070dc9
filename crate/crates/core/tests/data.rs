use std::io::Write;

use hydrarec::data::{
    build_sequences, cloze_batches, ingest, read_cache, split_leave_one_out, write_cache, ClozeConfig,
    DatasetStats, InputFormat, ItemSequence,
};
use proptest::prelude::*;

fn write_log(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

fn toy_log() -> Vec<String> {
    let mut lines = Vec::new();
    for u in 1..=30 {
        for j in 0..(3 + u % 7) {
            lines.push(format!("{u}::{}::4::{}", (u * 13 + j * 7) % 41 + 100, 1000 - j));
        }
    }
    lines
}

#[test]
fn reingesting_gives_the_same_vocabulary() {
    let f = write_log(&toy_log());
    let a = build_sequences(&ingest(f.path(), InputFormat::DoubleColon).unwrap(), 3).unwrap();
    let b = build_sequences(&ingest(f.path(), InputFormat::DoubleColon).unwrap(), 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cache_round_trip_preserves_tokens() {
    let f = write_log(&toy_log());
    let (seqs, vocab) = build_sequences(&ingest(f.path(), InputFormat::DoubleColon).unwrap(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seqs.tsv");
    write_cache(&path, &seqs, &vocab).unwrap();
    let (back, vocab2) = read_cache(&path).unwrap();
    assert_eq!(back, seqs);
    assert_eq!(vocab2, vocab);
    for t in 1..=vocab.len() {
        assert_eq!(vocab.token(vocab.raw(t).unwrap()), Some(t));
    }
}

#[test]
fn toy_stats_are_exact() {
    let f = write_log(&[
        "1::a::5::1".into(),
        "1::b::5::2".into(),
        "1::c::5::3".into(),
        "2::a::5::1".into(),
        "2::d::5::2".into(),
        "2::e::5::3".into(),
        "2::f::5::4".into(),
    ]);
    let (seqs, vocab) = build_sequences(&ingest(f.path(), InputFormat::DoubleColon).unwrap(), 3).unwrap();
    let s = DatasetStats::of(&seqs, &vocab);
    assert_eq!((s.users, s.items, s.interactions), (2, 6, 7));
    assert!((s.sparsity - (1.0 - 7.0 / 12.0)).abs() < 1e-12);
}

#[test]
fn masked_fraction_is_near_mask_prob() {
    let train: Vec<Vec<usize>> = (0..100).map(|u| (0..100).map(|i| 1 + (u + i) % 50).collect()).collect();
    let cfg = ClozeConfig { max_len: 100, mask_prob: 0.1, batch_size: 32, seed: 4 };
    let batches = cloze_batches(&train, 51, &cfg, 0).unwrap();
    let masked: usize = batches.iter().map(|b| b.positions().len()).sum();
    let frac = masked as f64 / 10_000.0;
    assert!((0.08..=0.12).contains(&frac), "{frac}");
}

fn sequences() -> impl Strategy<Value = Vec<ItemSequence>> {
    prop::collection::vec(prop::collection::vec(1usize..40, 3..30), 1..20).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(u, items)| ItemSequence { user: u.to_string(), items })
            .collect()
    })
}

proptest! {
    #[test]
    fn split_reconstructs_each_sequence(seqs in sequences()) {
        let split = split_leave_one_out(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let mut rebuilt = split.train[i].clone();
            rebuilt.push(split.valid[i].target);
            rebuilt.push(split.test[i].target);
            prop_assert_eq!(&rebuilt, &s.items);
            prop_assert_eq!(&split.test[i].prefix[..], &s.items[..s.items.len() - 1]);
        }
    }

    #[test]
    fn cloze_labels_restore_the_input(seqs in sequences(), seed in 0u64..1000, p in 0.05f64..0.9) {
        let split = split_leave_one_out(&seqs).unwrap();
        let cfg = ClozeConfig { max_len: 12, mask_prob: p, batch_size: 5, seed };
        let a = cloze_batches(&split.train, 40, &cfg, 2).unwrap();
        prop_assert_eq!(&a, &cloze_batches(&split.train, 40, &cfg, 2).unwrap());
        let mut rows = Vec::new();
        for b in &a {
            for r in 0..b.rows {
                let span = r * b.len..(r + 1) * b.len;
                let restored: Vec<usize> = span
                    .clone()
                    .map(|i| if b.labels[i] != 0 { b.labels[i] } else { b.tokens[i] })
                    .collect();
                prop_assert!(span.clone().any(|i| b.labels[i] != 0));
                for i in span {
                    prop_assert!(b.labels[i] == 0 || b.tokens[i] == 40);
                    prop_assert_eq!(b.valid[i], b.tokens[i] != 0);
                }
                rows.push(restored);
            }
        }
        let mut expected: Vec<Vec<usize>> =
            split.train.iter().map(|t| hydrarec::data::left_pad(t, 12)).collect();
        rows.sort();
        expected.sort();
        prop_assert_eq!(rows, expected);
    }
}
