//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use bytelab::config::ExperimentConfig;
use bytelab::tokenizer::{train_bpe, TokenizerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "that", "for", "river", "stone", "light",
    "garden", "winter", "number", "window", "letter", "morning", "quietly", "between", "little",
    "people", "history", "measure", "always", "bright", "machine", "language", "signal", "record",
    "forest", "village", "question", "answer", "paper", "under", "over", "through", "without",
    "before", "after", "learning", "model", "table", "simple", "strange", "eleven", "harbor",
    "don't", "naïve", "café",
];

/// English-looking documents with irregular whitespace, digits and punctuation.
pub fn corpus(docs: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|_| {
            let mut s = String::new();
            for i in 0..rng.random_range(30..90) {
                if i > 0 {
                    s.push_str(match rng.random_range(0..40) {
                        0 => "  ",
                        1 => "\n",
                        2 => "\t",
                        3 => ", ",
                        4 => ". ",
                        5 => " (",
                        _ => " ",
                    });
                }
                let mut w = WORDS[rng.random_range(0..WORDS.len())].to_string();
                if rng.random_range(0..8) == 0 {
                    w[..1].make_ascii_uppercase();
                }
                s.push_str(&w);
                if rng.random_range(0..25) == 0 {
                    s.push_str(&rng.random_range(0..2000).to_string());
                }
            }
            s.push_str(".\n");
            s.into_bytes()
        })
        .collect()
}

pub fn write_corpus(dir: &Path, docs: &[Vec<u8>]) {
    fs::create_dir_all(dir).unwrap();
    for (i, d) in docs.iter().enumerate() {
        fs::write(dir.join(format!("doc-{i:04}.txt")), d).unwrap();
    }
}

pub fn tokenizer(docs: &[Vec<u8>], vocab_size: usize) -> TokenizerModel {
    train_bpe(docs, vocab_size).unwrap()
}

/// A 2-layer, d=16 experiment over a generated corpus written under `root`.
pub fn tiny_experiment(root: &Path) -> ExperimentConfig {
    let docs = corpus(60, 1);
    write_corpus(&root.join("corpus"), &docs);
    tokenizer(&docs, 400).save(&root.join("tok.json")).unwrap();
    ExperimentConfig {
        corpus: root.join("corpus"),
        tokenizer: root.join("tok.json"),
        out_dir: root.join("run"),
        dim: 16,
        layers: 2,
        heads: 2,
        kv_heads: 1,
        ffn_hidden: 32,
        seq_len: 32,
        batch_size: 2,
        steps: 12,
        warmup: 2,
        decay: 4,
        switch_step: 6,
        peak_lr: 3e-3,
        eval_interval: 4,
        ckpt_interval: 4,
        val_fraction: 0.1,
        ..Default::default()
    }
}
