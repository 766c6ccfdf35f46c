//! Training-split vocabularies, TF-IDF document-term matrices and fixed-length
//! index encodings for the neural models.
//!
//! Ids 0 and 1 of every [`Vocabulary`] are reserved for padding and unknown
//! tokens. Sparse feature matrices only have columns for regular tokens, so
//! column `c` corresponds to token id `c + 2`.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const N_SPECIAL: usize = 2;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    /// Indexed by id; zero for the two special ids.
    doc_freq: Vec<usize>,
    n_docs: usize,
}

/// Collects a vocabulary from training documents. Tokens need at least
/// `min_df` documents; `max_size` keeps the most frequent ones (ties broken
/// lexicographically) and does not count the special tokens.
pub fn build_vocabulary<D: AsRef<[String]>>(
    train_docs: &[D],
    min_df: usize,
    max_size: Option<usize>,
) -> Result<Vocabulary> {
    if train_docs.is_empty() {
        return Err(Error::domain("cannot build a vocabulary from zero documents"));
    }
    if min_df == 0 {
        return Err(Error::domain("min_df must be at least 1"));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in train_docs {
        let unique: HashSet<&str> = doc.as_ref().iter().map(String::as_str).collect();
        for tok in unique {
            *df.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = df
        .into_iter()
        .filter(|&(t, n)| n >= min_df && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(max) = max_size {
        kept.truncate(max);
    }
    let mut vocab = Vocabulary::empty(train_docs.len());
    for (tok, n) in kept {
        vocab.push(tok.to_string(), n);
    }
    Ok(vocab)
}

impl Vocabulary {
    fn empty(n_docs: usize) -> Vocabulary {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            doc_freq: Vec::new(),
            n_docs,
        };
        v.push(PAD_TOKEN.to_string(), 0);
        v.push(UNK_TOKEN.to_string(), 0);
        v
    }

    fn push(&mut self, token: String, df: usize) {
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
        self.doc_freq.push(df);
    }

    /// Number of ids including the two specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == N_SPECIAL
    }

    /// Number of regular tokens, i.e. feature-matrix columns.
    pub fn n_features(&self) -> usize {
        self.len() - N_SPECIAL
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Id of `token`, or [`UNK_ID`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn feature_token(&self, col: usize) -> &str {
        &self.id_to_token[col + N_SPECIAL]
    }

    /// Document frequency of a regular token id; `None` for specials.
    pub fn doc_freq(&self, id: usize) -> Option<usize> {
        (id >= N_SPECIAL).then(|| self.doc_freq.get(id).copied()).flatten()
    }

    /// Smoothed inverse document frequency `ln((1 + n) / (1 + df)) + 1`.
    pub fn idf(&self, id: usize) -> Option<f64> {
        self.doc_freq(id).map(|df| {
            ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
        })
    }

    pub fn tokens(&self) -> impl Iterator<Item = (usize, &str)> {
        self.id_to_token
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (i, t.as_str()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            n_docs: self.n_docs,
            tokens: self
                .tokens()
                .map(|(id, token)| VocabEntry {
                    token: token.to_string(),
                    id,
                    doc_freq: self.doc_freq[id],
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Vocabulary> {
        let file: VocabFile = serde_json::from_str(json)?;
        let mut vocab = Vocabulary::empty(file.n_docs);
        for (i, e) in file.tokens.into_iter().enumerate() {
            if e.id != i + N_SPECIAL {
                return Err(Error::domain(format!(
                    "vocabulary ids must be dense from {N_SPECIAL}; `{}` has id {}",
                    e.token, e.id
                )));
            }
            if e.doc_freq == 0 || e.doc_freq > file.n_docs {
                return Err(Error::domain(format!(
                    "token `{}` has document frequency {} outside 1..={}",
                    e.token, e.doc_freq, file.n_docs
                )));
            }
            if vocab.token_to_id.contains_key(&e.token) {
                return Err(Error::domain(format!("duplicate token `{}`", e.token)));
            }
            vocab.push(e.token, e.doc_freq);
        }
        Ok(vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    n_docs: usize,
    tokens: Vec<VocabEntry>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: usize,
    doc_freq: usize,
}

/// Row-compressed sparse matrix; each row is sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<SparseMatrix> {
        for (r, row) in rows.iter().enumerate() {
            for w in row.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(Error::domain(format!(
                        "row {r}: columns must be strictly increasing"
                    )));
                }
            }
            if let Some(&(c, v)) = row.iter().find(|(c, v)| *c >= n_cols || !v.is_finite()) {
                return Err(Error::domain(format!(
                    "row {r}: entry ({c}, {v}) invalid for {n_cols} columns"
                )));
            }
        }
        Ok(SparseMatrix {
            n_rows: rows.len(),
            n_cols,
            rows,
        })
    }

    /// Builds a matrix from dense rows, dropping zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<SparseMatrix> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let sparse = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect()
            })
            .collect();
        SparseMatrix::new(n_cols, sparse)
    }

    pub fn row_dense(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for &(c, v) in &self.rows[r] {
            out[c] = v;
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> SparseMatrix {
        SparseMatrix {
            n_rows: indices.len(),
            n_cols: self.n_cols,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Scales every nonzero row to unit L2 norm.
    pub fn l2_normalize(&mut self) {
        for row in &mut self.rows {
            l2_normalize_row(row);
        }
    }

    /// `row,col,value` CSV with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                w.write_record([r.to_string(), c.to_string(), format!("{v:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`SparseMatrix::write_csv`]. The dimensions
    /// are not stored in the file and must be supplied.
    pub fn read_csv<R: Read>(input: R, n_rows: usize, n_cols: usize) -> Result<SparseMatrix> {
        let mut reader = csv::Reader::from_reader(input);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for (i, rec) in reader.deserialize::<(usize, usize, f64)>().enumerate() {
            let (r, c, v) = rec?;
            if r >= n_rows {
                return Err(Error::Format {
                    line: i + 2,
                    msg: format!("row {r} outside {n_rows} rows"),
                });
            }
            rows[r].push((c, v));
        }
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
        }
        SparseMatrix::new(n_cols, rows)
    }
}

fn l2_normalize_row(row: &mut [(usize, f64)]) {
    let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in row.iter_mut() {
            *v /= norm;
        }
    }
}

fn count_row(vocab: &Vocabulary, doc: &[String]) -> Vec<(usize, f64)> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for tok in doc {
        if let Some(id) = vocab.get(tok) {
            if id >= N_SPECIAL {
                *counts.entry(id - N_SPECIAL).or_insert(0.0) += 1.0;
            }
        }
    }
    let mut row: Vec<(usize, f64)> = counts.into_iter().collect();
    row.sort_by_key(|e| e.0);
    row
}

/// Raw term counts (the input of multinomial naive Bayes).
pub fn count_transform<D: AsRef<[String]>>(vocab: &Vocabulary, docs: &[D]) -> SparseMatrix {
    SparseMatrix {
        n_rows: docs.len(),
        n_cols: vocab.n_features(),
        rows: docs.iter().map(|d| count_row(vocab, d.as_ref())).collect(),
    }
}

/// TF-IDF with raw counts as tf and the smoothed idf of
/// [`Vocabulary::idf`], each row scaled to unit L2 norm. Out-of-vocabulary
/// tokens are ignored, so such documents become all-zero rows.
pub fn tfidf_transform<D: AsRef<[String]>>(vocab: &Vocabulary, docs: &[D]) -> SparseMatrix {
    let rows = docs
        .iter()
        .map(|d| {
            let mut row = count_row(vocab, d.as_ref());
            for (col, v) in row.iter_mut() {
                *v *= vocab.idf(*col + N_SPECIAL).expect("regular token");
            }
            l2_normalize_row(&mut row);
            row
        })
        .collect();
    SparseMatrix {
        n_rows: docs.len(),
        n_cols: vocab.n_features(),
        rows,
    }
}

/// Dense `n_rows x maxlen` grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    pub n_rows: usize,
    pub maxlen: usize,
    pub ids: Vec<usize>,
}

impl IndexMatrix {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.maxlen..(r + 1) * self.maxlen]
    }

    pub fn select_rows(&self, indices: &[usize]) -> IndexMatrix {
        let mut ids = Vec::with_capacity(indices.len() * self.maxlen);
        for &i in indices {
            ids.extend_from_slice(self.row(i));
        }
        IndexMatrix {
            n_rows: indices.len(),
            maxlen: self.maxlen,
            ids,
        }
    }

    /// Number of leading non-pad positions in row `r`.
    pub fn row_len(&self, r: usize) -> usize {
        self.row(r).iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1)
    }
}

fn pad_rows<I>(rows: I, maxlen: usize) -> IndexMatrix
where
    I: ExactSizeIterator<Item = Vec<usize>>,
{
    let n_rows = rows.len();
    let mut ids = Vec::with_capacity(n_rows * maxlen);
    for mut row in rows {
        row.truncate(maxlen);
        row.resize(maxlen, PAD_ID);
        ids.extend(row);
    }
    IndexMatrix { n_rows, maxlen, ids }
}

/// Token ids right-padded with [`PAD_ID`]; longer documents keep their first
/// `maxlen` tokens.
pub fn encode_sequences<D: AsRef<[String]>>(
    vocab: &Vocabulary,
    docs: &[D],
    maxlen: usize,
) -> Result<IndexMatrix> {
    if maxlen == 0 {
        return Err(Error::domain("maxlen must be at least 1"));
    }
    Ok(pad_rows(
        docs.iter()
            .map(|d| d.as_ref().iter().take(maxlen).map(|t| vocab.id(t)).collect()),
        maxlen,
    ))
}

/// Ordered character set for the character-level encoder. Character `i`
/// gets id `i + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharAlphabet {
    chars: Vec<char>,
}

impl CharAlphabet {
    pub fn new(chars: Vec<char>) -> Result<CharAlphabet> {
        if chars.is_empty() {
            return Err(Error::domain("character alphabet is empty"));
        }
        let unique: HashSet<char> = chars.iter().copied().collect();
        if unique.len() != chars.len() {
            return Err(Error::domain("character alphabet contains duplicates"));
        }
        Ok(CharAlphabet { chars })
    }

    /// Vocabulary size including pad and unk.
    pub fn len(&self) -> usize {
        self.chars.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.chars.iter().position(|&x| x == c).map_or(UNK_ID, |p| p + N_SPECIAL)
    }
}

impl Default for CharAlphabet {
    /// Lowercase letters, digits, space and ten punctuation marks.
    fn default() -> Self {
        let chars = ('a'..='z')
            .chain('0'..='9')
            .chain([' ', '.', ',', '!', '?', '\'', '"', '-', ':', ';', '/'])
            .collect();
        CharAlphabet { chars }
    }
}

pub fn encode_chars<S: AsRef<str>>(
    docs: &[S],
    alphabet: &CharAlphabet,
    maxlen_chars: usize,
) -> Result<IndexMatrix> {
    if maxlen_chars == 0 {
        return Err(Error::domain("maxlen_chars must be at least 1"));
    }
    Ok(pad_rows(
        docs.iter().map(|d| {
            d.as_ref()
                .chars()
                .take(maxlen_chars)
                .map(|c| alphabet.id(c))
                .collect()
        }),
        maxlen_chars,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter()
            .map(|d| d.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn vocabulary_examples() {
        let train = docs(&[&["a", "b"], &["a", "c"]]);
        let v = build_vocabulary(&train, 1, None).unwrap();
        assert_eq!(v.n_features(), 3);
        assert_eq!(v.doc_freq(v.id("a")), Some(2));
        assert_eq!(v.doc_freq(v.id("b")), Some(1));
        assert_eq!(v.doc_freq(v.id("c")), Some(1));
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.token(PAD_ID), Some(PAD_TOKEN));

        let v2 = build_vocabulary(&train, 2, None).unwrap();
        assert_eq!(v2.n_features(), 1);
        assert_ne!(v2.id("a"), UNK_ID);
        assert_eq!(v2.id("b"), UNK_ID);

        let empty: Vec<Vec<String>> = Vec::new();
        assert!(build_vocabulary(&empty, 1, None).is_err());
    }

    #[test]
    fn max_size_keeps_most_frequent_with_lexicographic_ties() {
        let train = docs(&[&["x", "b", "a"], &["x", "c"], &["x", "a", "b"]]);
        let v = build_vocabulary(&train, 1, Some(2)).unwrap();
        assert_eq!(v.n_features(), 2);
        assert_eq!(v.feature_token(0), "x");
        assert_eq!(v.feature_token(1), "a");
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn tfidf_examples() {
        let train = docs(&[&["a"], &["a", "b"]]);
        let v = build_vocabulary(&train, 1, None).unwrap();
        let m = tfidf_transform(&v, &docs(&[&["a"]]));
        assert_eq!(m.rows[0].len(), 1);
        assert!((m.rows[0][0].1 - 1.0).abs() < 1e-12);

        // idf(a) = ln(3/3) + 1 = 1, idf(b) = ln(3/2) + 1.
        let idf_b = (1.5f64).ln() + 1.0;
        let norm = (1.0 + idf_b * idf_b).sqrt();
        let m = tfidf_transform(&v, &docs(&[&["a", "b"]]));
        let row = m.row_dense(0);
        let (ca, cb) = (v.id("a") - N_SPECIAL, v.id("b") - N_SPECIAL);
        assert!((row[ca] - 1.0 / norm).abs() < 1e-12);
        assert!((row[cb] - idf_b / norm).abs() < 1e-12);
        assert!((row[ca] - 0.580).abs() < 1e-3 && (row[cb] - 0.815).abs() < 1e-3);

        let m = tfidf_transform(&v, &docs(&[&["q", "r"]]));
        assert!(m.rows[0].is_empty());
    }

    #[test]
    fn sequence_encoding() {
        let v = build_vocabulary(&docs(&[&["a", "b"], &["a"]]), 1, None).unwrap();
        let m = encode_sequences(&v, &docs(&[&["a", "b"]]), 4).unwrap();
        assert_eq!(m.row(0), &[v.id("a"), v.id("b"), PAD_ID, PAD_ID]);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);

        let long: Vec<String> = (0..10).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let m = encode_sequences(&v, &[long], 3).unwrap();
        assert_eq!(m.row(0), &[2, 3, 2]);

        let m = encode_sequences(&v, &docs(&[&[]]), 2).unwrap();
        assert_eq!(m.row(0), &[PAD_ID, PAD_ID]);
        assert_eq!(m.row_len(0), 0);
        assert!(encode_sequences(&v, &docs(&[&["a"]]), 0).is_err());
    }

    #[test]
    fn char_encoding() {
        let alpha = CharAlphabet::new(('a'..='z').collect()).unwrap();
        let m = encode_chars(&["ab"], &alpha, 4).unwrap();
        assert_eq!(m.row(0), &[alpha.id('a'), alpha.id('b'), PAD_ID, PAD_ID]);
        let m = encode_chars(&[""], &alpha, 3).unwrap();
        assert_eq!(m.row(0), &[PAD_ID; 3]);
        let m = encode_chars(&["a!"], &alpha, 3).unwrap();
        assert_eq!(m.row(0), &[alpha.id('a'), UNK_ID, PAD_ID]);
        assert!(CharAlphabet::new(vec!['a', 'a']).is_err());
        assert!(CharAlphabet::new(vec![]).is_err());
        assert_eq!(CharAlphabet::default().len(), 26 + 10 + 11 + 2);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocabulary(&docs(&[&["a", "b"], &["a", "c"], &["d"]]), 1, None).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn sparse_csv_round_trip() {
        let v = build_vocabulary(&docs(&[&["a", "b"], &["a", "c"]]), 1, None).unwrap();
        let m = tfidf_transform(&v, &docs(&[&["a", "b"], &[], &["c", "c", "a"]]));
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = SparseMatrix::read_csv(buf.as_slice(), m.n_rows, m.n_cols).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sparse_matrix_validation() {
        assert!(SparseMatrix::new(2, vec![vec![(1, 1.0), (0, 1.0)]]).is_err());
        assert!(SparseMatrix::new(2, vec![vec![(2, 1.0)]]).is_err());
        assert!(SparseMatrix::new(2, vec![vec![(0, f64::NAN)]]).is_err());
    }
}
