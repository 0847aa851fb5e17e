//! Tokenization, word embeddings, the stop-word/rare-word filter, and
//! predicate assembly for questions and images.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::matrix::Matrix;

pub const UNK: &str = "<unk>";

/// Word/index bijection plus corpus frequencies.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    word_to_index: HashMap<String, usize>,
    index_to_word: Vec<String>,
    frequency: HashMap<String, usize>,
}

impl Vocabulary {
    /// Index 0 is always `<unk>`.
    pub fn new() -> Self {
        let mut v = Vocabulary::default();
        v.index_to_word.push(UNK.to_string());
        v.word_to_index.insert(UNK.to_string(), 0);
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&i) = self.word_to_index.get(word) {
            return i;
        }
        let i = self.index_to_word.len();
        self.index_to_word.push(word.to_string());
        self.word_to_index.insert(word.to_string(), i);
        i
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.word_to_index.get(word).copied().unwrap_or(0)
    }

    pub fn word_at(&self, i: usize) -> Option<&str> {
        self.index_to_word.get(i).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.index_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_word.is_empty()
    }

    pub fn count_word(&mut self, word: &str) {
        *self.frequency.entry(word.to_string()).or_insert(0) += 1;
    }

    pub fn frequency(&self, word: &str) -> usize {
        self.frequency.get(word).copied().unwrap_or(0)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.index_to_word.iter().map(|s| s.as_str())
    }
}

/// Word vectors, one row per vocabulary entry; the `<unk>` row is zero.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable { dim, vectors: Matrix::zeros(vocab_size, dim) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }

    pub fn set_vector(&mut self, index: usize, v: &[f64]) {
        self.vectors.row_mut(index).copy_from_slice(v);
    }
}

/// A 1-3 word phrase describing an object, attribute-object pair, or
/// object-relation-object triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub words: Vec<String>,
    pub form: PredicateForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateForm {
    Obj,
    AttrObj,
    ObjRelObj,
}

impl PredicateForm {
    pub fn word_count(self) -> usize {
        match self {
            PredicateForm::Obj => 1,
            PredicateForm::AttrObj => 2,
            PredicateForm::ObjRelObj => 3,
        }
    }
}

impl Predicate {
    pub fn new(words: Vec<String>, form: PredicateForm) -> Result<Self> {
        if words.len() != form.word_count() {
            return Err(CfrError::argument(format!(
                "predicate form {:?} needs {} words, got {}",
                form,
                form.word_count(),
                words.len()
            )));
        }
        Ok(Predicate { words, form })
    }

    pub fn obj(word: &str) -> Self {
        Predicate { words: vec![word.to_string()], form: PredicateForm::Obj }
    }

    pub fn attr_obj(attr: &str, obj: &str) -> Self {
        Predicate {
            words: vec![attr.to_string(), obj.to_string()],
            form: PredicateForm::AttrObj,
        }
    }
}

/// Lowercase, strip punctuation (apostrophes inside words survive),
/// split on whitespace.
pub fn tokenize(question: &str) -> Vec<String> {
    let lowered = question.to_lowercase();
    let mut tokens = Vec::new();
    for raw in lowered.split_whitespace() {
        let cleaned: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect();
        let trimmed = cleaned.trim_matches('\'');
        if !trimmed.is_empty() {
            tokens.push(trimmed.to_string());
        }
    }
    tokens
}

/// Stop list union rare words (corpus frequency below `min_freq`).
pub fn build_filter(
    stop_list: &HashSet<String>,
    vocab: &Vocabulary,
    min_freq: usize,
) -> HashSet<String> {
    let mut out = stop_list.clone();
    for (word, &count) in &vocab.frequency {
        if count < min_freq {
            out.insert(word.clone());
        }
    }
    out
}

/// Tokens surviving the filter, each as a single-word predicate.
/// A question filtered down to nothing yields one `<unk>` predicate so
/// downstream shapes stay valid.
pub fn question_predicates(tokens: &[String], filter: &HashSet<String>) -> Vec<Predicate> {
    let kept: Vec<Predicate> = tokens
        .iter()
        .filter(|t| !filter.contains(*t))
        .map(|t| Predicate::obj(t))
        .collect();
    if kept.is_empty() {
        vec![Predicate::obj(UNK)]
    } else {
        kept
    }
}

/// Row i = mean of the word vectors of predicate i; unknown words use
/// the zero `<unk>` row.
pub fn embed_predicates(
    preds: &[Predicate],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<Matrix> {
    if preds.is_empty() {
        return Err(CfrError::argument("cannot embed an empty predicate list"));
    }
    let d = table.dim();
    let mut out = Matrix::zeros(preds.len(), d);
    for (i, p) in preds.iter().enumerate() {
        let row = out.row_mut(i);
        for w in &p.words {
            let v = table.vector(vocab.index_of(w));
            for (r, x) in row.iter_mut().zip(v.iter()) {
                *r += x;
            }
        }
        let n = p.words.len() as f64;
        for r in row.iter_mut() {
            *r /= n;
        }
    }
    Ok(out)
}

/// Load a text embedding file: one `word v1 v2 ... vd` entry per line.
/// Returns the vocabulary (with `<unk>` at 0) and the table (zero
/// `<unk>` row). Duplicate words: last wins.
pub fn load_embeddings(path: &Path) -> Result<(Vocabulary, EmbeddingTable)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut dim: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| CfrError::format_at("missing word", lineno + 1))?
            .to_string();
        let mut vec = Vec::new();
        for tok in parts {
            let v: f64 = tok.parse().map_err(|_| {
                CfrError::format_at(format!("malformed float '{tok}'"), lineno + 1)
            })?;
            vec.push(v);
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(CfrError::format_at(
                    format!("dimension {} differs from {}", vec.len(), d),
                    lineno + 1,
                ));
            }
            _ => {}
        }
        if let Some(&idx) = seen.get(&word) {
            eprintln!("warning: duplicate embedding for '{word}', keeping the later entry");
            entries[idx] = (word, vec);
        } else {
            seen.insert(word.clone(), entries.len());
            entries.push((word, vec));
        }
    }

    let dim = dim.unwrap_or(0);
    let mut vocab = Vocabulary::new();
    let mut table = EmbeddingTable::new(entries.len() + 1, dim);
    for (word, vec) in entries {
        let idx = vocab.add(&word);
        table.set_vector(idx, &vec);
    }
    Ok((vocab, table))
}

/// Load a newline-delimited stop-word file.
pub fn load_stop_words(path: &Path) -> Result<HashSet<String>> {
    let content = std::fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}
