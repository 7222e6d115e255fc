#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qa_core::data::{load_squad, EmbeddingTable, QAExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn tiny_examples() -> Vec<QAExample> {
    load_squad(fixture("tiny_squad.json")).unwrap().examples
}

/// Every lowercased token of the given examples' contexts and questions.
pub fn vocabulary(examples: &[QAExample]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for e in examples {
        for t in e.context_tokens().iter().chain(&e.question_tokens) {
            words.insert(t.text.clone());
        }
    }
    words.into_iter().collect()
}

/// Deterministic random vectors in [-1, 1) for `words`.
pub fn random_vectors(words: &[String], dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words
        .iter()
        .map(|w| (w.clone(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

pub fn table_for(examples: &[QAExample], dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::from_entries(dim, random_vectors(&vocabulary(examples), dim, seed)).unwrap()
}

/// Writes a GloVe-format text file covering the fixture vocabulary.
pub fn write_glove(dir: &Path, examples: &[QAExample], dim: usize, seed: u64) -> PathBuf {
    let mut text = String::new();
    for (word, vector) in random_vectors(&vocabulary(examples), dim, seed) {
        text.push_str(&word);
        for v in vector {
            write!(text, " {v}").unwrap();
        }
        text.push('\n');
    }
    let path = dir.join(format!("vectors.{dim}d.txt"));
    std::fs::write(&path, text).unwrap();
    path
}
