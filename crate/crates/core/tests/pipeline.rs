mod common;

use std::fs;

use bytelab::data::{BatchStream, PackedDataset, Split};
use bytelab::trainer::{self, read_metrics, MetricSplit, RunManifest, RunOptions, MANIFEST_FILE, METRICS_FILE};
use proptest::prelude::*;

#[test]
fn data_cache_is_reused_until_the_corpus_changes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(dir.path());
    cfg.data_cache = Some(dir.path().join("cache"));
    let first = trainer::load_data(&cfg).unwrap();
    let stamp = fs::metadata(dir.path().join("cache/train.blbd")).unwrap().modified().unwrap();
    let again = trainer::load_data(&cfg).unwrap();
    assert_eq!(first.train.len(), again.train.len());
    assert_eq!(first.val.num_docs(), again.val.num_docs());
    assert_eq!(fs::metadata(dir.path().join("cache/train.blbd")).unwrap().modified().unwrap(), stamp);

    fs::write(dir.path().join("corpus/zz-extra.txt"), "one more document about nothing").unwrap();
    let grown = trainer::load_data(&cfg).unwrap();
    assert_eq!(grown.train.num_docs() + grown.val.num_docs(), 61);
}

#[test]
fn tiny_run_writes_manifest_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(dir.path());
    cfg.intervention = "boundary-end-train-only".parse().unwrap();
    let data = trainer::load_data(&cfg).unwrap();
    let summary = trainer::train(&cfg, &data, &RunOptions::default()).unwrap();
    assert_eq!(summary.last_step, cfg.steps);

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.switch_step, 6);
    assert_eq!(manifest.train_positions, data.train.len());

    let metrics = read_metrics(&cfg.out_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.iter().filter(|r| r.split == MetricSplit::Train).count(), 12);
    let val_steps: Vec<u64> = metrics.iter().filter(|r| r.split == MetricSplit::Val).map(|r| r.step).collect();
    assert!(val_steps.contains(&4) && val_steps.contains(&12));
    assert!(metrics.iter().all(|r| r.bits_per_byte.is_finite()));
    // samples grow by batch_size per step
    let last = metrics.iter().rfind(|r| r.split == MetricSplit::Train).unwrap();
    assert_eq!(last.samples_seen, 24);

    for step in [4, 6, 8, 12] {
        let (meta, ..) = trainer::load_checkpoint(&trainer::checkpoint_path(&cfg.out_dir, step)).unwrap();
        assert_eq!(meta.step, step);
    }
}

fn dataset(seed: u64) -> PackedDataset {
    let docs = common::corpus(12, seed);
    let tok = common::tokenizer(&docs, 300);
    PackedDataset::from_documents(&docs, &tok, Split::Train)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_are_seeded_and_shifted(seed in 0u64..1000, step in 0u64..50, rows in 1usize..4, len in 2usize..40) {
        let ds = dataset(seed % 3);
        let a = BatchStream::new(&ds, rows, len, seed).unwrap().batch(step);
        let b = BatchStream::new(&ds, rows, len, seed).unwrap().batch(step);
        prop_assert_eq!(&a.inputs, &b.inputs);
        prop_assert_eq!(a.inputs.len(), rows * len);
        for r in 0..rows {
            let row = r * len;
            for i in 0..len - 1 {
                prop_assert_eq!(a.targets[row + i], a.inputs[row + i + 1]);
            }
            prop_assert!(!a.target_mask[row + len - 1]);
        }
        prop_assert_eq!(a.bytes.iter().sum::<usize>(), a.target_mask.iter().filter(|&&m| m).count());
    }
}
