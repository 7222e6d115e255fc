use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{QaError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Frozen word vectors. Row 0 is padding (zeros), row 1 the unknown-word
/// vector (mean of all file rows); file words follow in file order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    word_to_id: HashMap<String, usize>,
    matrix: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` pairs. Later duplicates of a word
    /// are ignored.
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        if dim == 0 {
            return Err(QaError::Config("embedding dimension must be positive".into()));
        }
        let mut word_to_id = HashMap::new();
        let mut matrix = vec![0.0; 2 * dim];
        let mut mean = vec![0.0; dim];
        for (word, vector) in entries {
            if vector.len() != dim {
                return Err(QaError::Config(format!(
                    "vector for {word:?} has {} values, expected {dim}",
                    vector.len()
                )));
            }
            if word_to_id.contains_key(&word) {
                continue;
            }
            word_to_id.insert(word, matrix.len() / dim);
            mean.iter_mut().zip(&vector).for_each(|(m, v)| *m += v);
            matrix.extend_from_slice(&vector);
        }
        let words = word_to_id.len();
        if words > 0 {
            for (slot, m) in matrix[dim..2 * dim].iter_mut().zip(&mean) {
                *slot = m / words as f64;
            }
        }
        Ok(Self {
            dim,
            word_to_id,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row count, including the padding and unknown rows.
    pub fn vocab_size(&self) -> usize {
        self.matrix.len() / self.dim
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    pub fn row(&self, id: usize) -> Option<&[f64]> {
        (id < self.vocab_size()).then(|| &self.matrix[id * self.dim..(id + 1) * self.dim])
    }
}

/// Reads the GloVe text format: `word f1 f2 ... f<dim>` per line.
pub fn load_glove(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let read_err = |source| QaError::Read {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(read_err)?);
    let mut entries = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |detail: String| QaError::Format {
            path: path.to_path_buf(),
            line: index + 1,
            detail,
        };
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line").to_string();
        let vector = fields
            .map(|f| f.parse::<f64>().map_err(|_| format_err(format!("invalid float {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vector.len() != dim {
            return Err(format_err(format!("expected {dim} floats, found {}", vector.len())));
        }
        entries.push((word, vector));
    }
    EmbeddingTable::from_entries(dim, entries)
}
