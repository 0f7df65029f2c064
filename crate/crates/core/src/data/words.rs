//! Word-vector tables: loaded from a word2vec-style text file or generated
//! synthetically. Out-of-vocabulary words map to a deterministic
//! hash-seeded unit vector.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::WORD_DIM;
use crate::linalg::{Matrix, Vector};
use crate::seeding::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq)]
pub enum WordSource {
    /// `word v_1 ... v_dim` per line; an optional `count dim` header line.
    File { path: PathBuf, expected_dim: usize },
    /// Unit vectors drawn from `(seed, word)`.
    Synthetic { vocab: Vec<String>, dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct WordVectorTable {
    words: Vec<String>,
    vectors: Matrix,
    oov_seed: u64,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    words: Vec<String>,
    vectors: Matrix,
    oov_seed: u64,
}

impl TryFrom<TableRepr> for WordVectorTable {
    type Error = Error;
    fn try_from(r: TableRepr) -> Result<Self> {
        WordVectorTable::from_parts(r.words, r.vectors, r.oov_seed)
    }
}

impl From<WordVectorTable> for TableRepr {
    fn from(t: WordVectorTable) -> Self {
        TableRepr {
            words: t.words,
            vectors: t.vectors,
            oov_seed: t.oov_seed,
        }
    }
}

fn hashed_unit_vector(seed: u64, salt: &str, word: &str, dim: usize) -> Vector {
    let mut rng = stream_rng(seed, salt, derive_seed(0, word, 0));
    loop {
        let v = Vector::from_fn(dim, |_| StandardNormal.sample(&mut rng));
        let n = v.norm();
        if n > 1e-12 {
            return v.scale(1.0 / n);
        }
    }
}

impl WordVectorTable {
    pub fn from_parts(words: Vec<String>, vectors: Matrix, oov_seed: u64) -> Result<Self> {
        if words.len() != vectors.rows() {
            return Err(Error::dims("WordVectorTable", words.len(), vectors.rows()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::validation("word vectors", format!("duplicate word {w:?}")));
            }
        }
        Ok(WordVectorTable {
            words,
            vectors,
            oov_seed,
            index,
        })
    }

    pub fn synthetic(vocab: &[String], dim: usize, seed: u64) -> Result<Self> {
        let mut words: Vec<String> = Vec::with_capacity(vocab.len());
        let mut seen = std::collections::HashSet::new();
        for w in vocab {
            if seen.insert(w.clone()) {
                words.push(w.clone());
            }
        }
        let mut data = Vec::with_capacity(words.len() * dim);
        for w in &words {
            data.extend(hashed_unit_vector(seed, "synthetic-word", w, dim).into_vec());
        }
        let rows = words.len();
        WordVectorTable::from_parts(words, Matrix::from_vec(rows, dim, data)?, seed)
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vector(&self, word: &str) -> Vector {
        match self.id(word) {
            Some(i) => self.vectors.row_vector(i),
            None => hashed_unit_vector(self.oov_seed, "oov-word", word, self.dim()),
        }
    }

    /// One row per token.
    pub fn lookup(&self, tokens: &[String]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence has no tokens".into()));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for t in tokens {
            match self.id(t) {
                Some(i) => data.extend_from_slice(self.vectors.row(i)),
                None => data.extend(self.vector(t).into_vec()),
            }
        }
        Matrix::from_vec(tokens.len(), self.dim(), data)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Matrix {
        &mut self.vectors
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "{} {}", self.len(), self.dim()).map_err(|e| Error::io(path, e))?;
        for (i, word) in self.words.iter().enumerate() {
            write!(w, "{word}").map_err(|e| Error::io(path, e))?;
            for v in self.vectors.row(i) {
                write!(w, " {v}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: &Path, expected_dim: usize, oov_seed: u64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut words = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if ln == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
                continue;
            }
            if values.len() != expected_dim {
                return Err(Error::validation(
                    format!("{} line {}", path.display(), ln + 1),
                    format!("{} components, expected {expected_dim}", values.len()),
                ));
            }
            for v in values {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::validation(format!("{} line {}", path.display(), ln + 1), format!("bad number {v:?}")))?,
                );
            }
            words.push(word.to_owned());
        }
        let rows = words.len();
        WordVectorTable::from_parts(words, Matrix::from_vec(rows, expected_dim, data)?, oov_seed)
    }
}

/// Builds a table from either source.
pub fn word_vectors(source: &WordSource) -> Result<WordVectorTable> {
    match source {
        WordSource::File { path, expected_dim } => WordVectorTable::load_text(path, *expected_dim, 0),
        WordSource::Synthetic { vocab, dim, seed } => WordVectorTable::synthetic(vocab, *dim, *seed),
    }
}

impl Default for WordSource {
    fn default() -> Self {
        WordSource::Synthetic {
            vocab: Vec::new(),
            dim: WORD_DIM,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vec<String> {
        ["the", "cake", "tent", "snow"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn synthetic_is_deterministic_and_unit() {
        let a = word_vectors(&WordSource::Synthetic {
            vocab: vocab(),
            dim: WORD_DIM,
            seed: 5,
        })
        .unwrap();
        let b = word_vectors(&WordSource::Synthetic {
            vocab: vocab(),
            dim: WORD_DIM,
            seed: 5,
        })
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 300);
        assert!((a.vector("cake").norm() - 1.0).abs() < 1e-12);
        let c = WordVectorTable::synthetic(&vocab(), 8, 6).unwrap();
        assert_ne!(c.vector("cake"), WordVectorTable::synthetic(&vocab(), 8, 5).unwrap().vector("cake"));
    }

    #[test]
    fn oov_fallback_is_deterministic() {
        let t = WordVectorTable::synthetic(&vocab(), 8, 1).unwrap();
        assert_eq!(t.vector("zebra"), t.vector("zebra"));
        assert_ne!(t.vector("zebra"), t.vector("zebras"));
        assert!((t.vector("zebra").norm() - 1.0).abs() < 1e-12);
        let m = t.lookup(&["the".into(), "zebra".into()]).unwrap();
        assert_eq!(m.row(1), t.vector("zebra").as_slice());
    }

    #[test]
    fn file_round_trip_and_dim_check() {
        let t = WordVectorTable::synthetic(&vocab(), WORD_DIM, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        t.save_text(&p).unwrap();
        let back = word_vectors(&WordSource::File {
            path: p.clone(),
            expected_dim: WORD_DIM,
        })
        .unwrap();
        assert_eq!(back.vectors(), t.vectors());
        assert_eq!(back.words(), t.words());
        assert!(word_vectors(&WordSource::File {
            path: p,
            expected_dim: 100
        })
        .is_err());
    }
}
