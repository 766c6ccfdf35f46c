//! Word embedding tables: CBOW training with negative sampling and loading of
//! pretrained vectors from the plain-text `word v1 ... vd` format.
//!
//! A table has one row per vocabulary id, including the pad and unk rows,
//! so it can seed an embedding layer directly.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;
use crate::vectorizer::{Vocabulary, N_SPECIAL, PAD_ID, UNK_ID};

/// Range of the uniform draw for words missing from a pretrained file.
pub const OOV_INIT_RANGE: f64 = 0.25;
const UNIGRAM_POWER: f64 = 0.75;
const MIN_LR_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSource {
    Trained,
    Pretrained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Read from a vector file.
    Loaded,
    /// Drawn at random (and possibly trained afterwards).
    RandomInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    /// Row-major `[n_rows, dim]`, row `i` belongs to vocabulary id `i`.
    pub vectors: Vec<f64>,
    pub source: TableSource,
    pub provenance: Vec<Provenance>,
    /// Token for every row, specials included.
    pub words: Vec<String>,
}

impl EmbeddingTable {
    pub fn n_rows(&self) -> usize {
        self.words.len()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// `(loaded, random_init)` counts over the non-special rows.
    pub fn provenance_counts(&self) -> (usize, usize) {
        let loaded = self.provenance[N_SPECIAL..]
            .iter()
            .filter(|&&p| p == Provenance::Loaded)
            .count();
        (loaded, self.n_rows() - N_SPECIAL - loaded)
    }

    /// Writes the non-special rows in the text vector format.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        for id in N_SPECIAL..self.n_rows() {
            write!(out, "{}", self.words[id])?;
            for v in self.vector(id) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn vocab_words(vocab: &Vocabulary) -> Vec<String> {
    (0..vocab.len())
        .map(|id| vocab.token(id).unwrap_or_default().to_string())
        .collect()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbowParams {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CbowParams {
    fn default() -> Self {
        CbowParams {
            dim: 300,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains CBOW vectors: the mean of the window vectors predicts the centre
/// word against `negatives` noise words drawn from the unigram distribution
/// raised to 0.75. Out-of-vocabulary tokens are skipped; the learning rate
/// decays linearly over all training positions.
pub fn cbow_train<D: AsRef<[String]>>(corpus: &[D], vocab: &Vocabulary, params: &CbowParams) -> Result<EmbeddingTable> {
    if params.dim < 2 {
        return Err(Error::domain(format!("embedding dim must be >= 2, got {}", params.dim)));
    }
    if params.window < 1 || params.negatives < 1 {
        return Err(Error::domain("window and negatives must be at least 1"));
    }
    if !(params.lr > 0.0) {
        return Err(Error::domain(format!("learning rate must be > 0, got {}", params.lr)));
    }
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| {
            d.as_ref()
                .iter()
                .map(|t| vocab.id(t))
                .filter(|&id| id >= N_SPECIAL)
                .collect()
        })
        .collect();
    let distinct: HashSet<usize> = docs.iter().flatten().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::domain(format!(
            "corpus has {} distinct in-vocabulary tokens; need at least 2",
            distinct.len()
        )));
    }

    let (n, dim) = (vocab.len(), params.dim);
    let mut rng = rng_for(params.seed, 0);
    let limit = 0.5 / dim as f64;
    let mut input = vec![0.0; n * dim];
    for v in input[N_SPECIAL * dim..].iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    let mut output = vec![0.0; n * dim];

    let mut counts = vec![0.0f64; n];
    for &id in docs.iter().flatten() {
        counts[id] += 1.0;
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(UNIGRAM_POWER)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::domain(e.to_string()))?;

    let total = (params.epochs * docs.iter().map(Vec::len).sum::<usize>()).max(1) as f64;
    let mut processed = 0usize;
    let mut h = vec![0.0; dim];
    let mut neu1e = vec![0.0; dim];
    for _ in 0..params.epochs {
        for doc in &docs {
            for (i, &target) in doc.iter().enumerate() {
                let lr = params.lr * (1.0 - processed as f64 / total).max(MIN_LR_FRACTION);
                processed += 1;
                let lo = i.saturating_sub(params.window);
                let hi = (i + params.window + 1).min(doc.len());
                let context: Vec<usize> = (lo..hi).filter(|&j| j != i).map(|j| doc[j]).collect();
                if context.is_empty() {
                    continue;
                }
                h.iter_mut().for_each(|x| *x = 0.0);
                for &c in &context {
                    for (x, v) in h.iter_mut().zip(&input[c * dim..(c + 1) * dim]) {
                        *x += v;
                    }
                }
                let inv = 1.0 / context.len() as f64;
                h.iter_mut().for_each(|x| *x *= inv);
                neu1e.iter_mut().for_each(|x| *x = 0.0);
                for s in 0..=params.negatives {
                    let (word, label) = if s == 0 {
                        (target, 1.0)
                    } else {
                        let w = noise.sample(&mut rng);
                        if w == target {
                            continue;
                        }
                        (w, 0.0)
                    };
                    let out = &mut output[word * dim..(word + 1) * dim];
                    let f: f64 = h.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                    let g = (label - sigmoid(f)) * lr;
                    for k in 0..dim {
                        neu1e[k] += g * out[k];
                        out[k] += g * h[k];
                    }
                }
                for &c in &context {
                    for (x, e) in input[c * dim..(c + 1) * dim].iter_mut().zip(&neu1e) {
                        *x += e;
                    }
                }
            }
        }
    }
    Ok(EmbeddingTable {
        dim,
        vectors: input,
        source: TableSource::Trained,
        provenance: vec![Provenance::RandomInit; n],
        words: vocab_words(vocab),
    })
}

/// Uniform(-0.25, 0.25) table for `vocab`; the pad row is zero.
pub fn random_table(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    let n = vocab.len();
    let mut rng = rng_for(seed, 0);
    let mut vectors: Vec<f64> = (0..n * dim)
        .map(|_| rng.gen_range(-OOV_INIT_RANGE..OOV_INIT_RANGE))
        .collect();
    vectors[PAD_ID * dim..(PAD_ID + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
    EmbeddingTable {
        dim,
        vectors,
        source: TableSource::Random,
        provenance: vec![Provenance::RandomInit; n],
        words: vocab_words(vocab),
    }
}

/// Reads `word v1 ... vd` lines. An optional leading `count dim` header is
/// accepted. Vocabulary words found in the file take its vectors; the rest
/// (and unk) keep seeded uniform(-0.25, 0.25) vectors. The first occurrence
/// of a repeated word wins.
pub fn load_pretrained<R: BufRead>(input: R, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::domain("embedding dim must be positive"));
    }
    let mut table = random_table(vocab, dim, seed);
    table.source = TableSource::Pretrained;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let header_dim: usize = fields[1].parse().unwrap_or(0);
            if header_dim != dim {
                return Err(Error::Format {
                    line: lineno,
                    msg: format!("header declares dimension {header_dim}, expected {dim}"),
                });
            }
            continue;
        }
        if fields.len() - 1 != dim {
            return Err(Error::Format {
                line: lineno,
                msg: format!("vector has {} components, expected {dim}", fields.len() - 1),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Format {
                    line: lineno,
                    msg: format!("invalid component `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let Some(id) = vocab.get(fields[0]) else { continue };
        if id < N_SPECIAL || id == UNK_ID || table.provenance[id] == Provenance::Loaded {
            continue;
        }
        table.vectors[id * dim..(id + 1) * dim].copy_from_slice(&values);
        table.provenance[id] = Provenance::Loaded;
    }
    Ok(table)
}

/// Top-`k` words by cosine similarity to `word`, excluding the word itself
/// and the special rows. Equal similarities are ordered lexicographically.
pub fn nearest_neighbors(table: &EmbeddingTable, word: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let query = table
        .id(word)
        .filter(|&id| id >= N_SPECIAL)
        .ok_or_else(|| Error::domain(format!("`{word}` is not in the embedding vocabulary")))?;
    let candidates = table.n_rows() - N_SPECIAL;
    if k >= candidates {
        return Err(Error::domain(format!(
            "k = {k} must be below the vocabulary size {candidates}"
        )));
    }
    let q = table.vector(query);
    let mut scored: Vec<(String, f64)> = (N_SPECIAL..table.n_rows())
        .filter(|&id| id != query)
        .map(|id| (table.words[id].clone(), cosine(q, table.vector(id))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectorizer::build_vocabulary;

    fn docs(words: &[&str]) -> Vec<Vec<String>> {
        vec![words.iter().map(|s| s.to_string()).collect()]
    }

    fn two_cluster_corpus() -> Vec<Vec<String>> {
        let a = ["apple", "banana", "cherry", "grape"];
        let b = ["piano", "violin", "guitar", "flute"];
        let mut rng = rng_for(11, 0);
        (0..300)
            .map(|i| {
                let cluster = if i % 2 == 0 { &a } else { &b };
                (0..12).map(|_| cluster[rng.gen_range(0..4)].to_string()).collect()
            })
            .collect()
    }

    #[test]
    fn cbow_separates_clusters() {
        let corpus = two_cluster_corpus();
        let vocab = build_vocabulary(&corpus, 1, None).unwrap();
        let params = CbowParams {
            dim: 16,
            window: 2,
            negatives: 3,
            epochs: 5,
            lr: 0.05,
            seed: 4,
        };
        let table = cbow_train(&corpus, &vocab, &params).unwrap();
        assert!(table.vectors.iter().all(|v| v.is_finite()));
        let fruit = ["apple", "banana", "cherry", "grape"];
        let music = ["piano", "violin", "guitar", "flute"];
        let v = |w: &str| table.vector(vocab.id(w));
        let (mut intra, mut inter) = (Vec::new(), Vec::new());
        for group in [&fruit, &music] {
            for (i, a) in group.iter().enumerate() {
                for b in &group[i + 1..] {
                    intra.push(cosine(v(a), v(b)));
                }
            }
        }
        for a in &fruit {
            for b in &music {
                inter.push(cosine(v(a), v(b)));
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));

        let top = nearest_neighbors(&table, "apple", 1).unwrap();
        assert!(fruit.contains(&top[0].0.as_str()), "{top:?}");
    }

    #[test]
    fn cbow_zero_epochs_and_determinism() {
        let corpus = two_cluster_corpus();
        let vocab = build_vocabulary(&corpus, 1, None).unwrap();
        let p0 = CbowParams { dim: 8, epochs: 0, ..CbowParams::default() };
        let init = cbow_train(&corpus, &vocab, &p0).unwrap();
        let again = cbow_train(&corpus, &vocab, &p0).unwrap();
        assert_eq!(init, again);
        let limit = 0.5 / 8.0;
        assert!(init.vectors[N_SPECIAL * 8..].iter().all(|v| v.abs() <= limit));

        let p = CbowParams { dim: 8, epochs: 2, ..CbowParams::default() };
        assert_eq!(cbow_train(&corpus, &vocab, &p).unwrap(), cbow_train(&corpus, &vocab, &p).unwrap());
        assert_ne!(cbow_train(&corpus, &vocab, &p).unwrap(), init);
    }

    #[test]
    fn cbow_rejects_bad_inputs() {
        let corpus = docs(&["same", "same", "same"]);
        let vocab = build_vocabulary(&corpus, 1, None).unwrap();
        assert!(cbow_train(&corpus, &vocab, &CbowParams { dim: 8, ..Default::default() }).is_err());
        let corpus = two_cluster_corpus();
        let vocab = build_vocabulary(&corpus, 1, None).unwrap();
        assert!(cbow_train(&corpus, &vocab, &CbowParams { dim: 1, ..Default::default() }).is_err());
        assert!(cbow_train(&corpus, &vocab, &CbowParams { window: 0, ..Default::default() }).is_err());
        assert!(cbow_train(&corpus, &vocab, &CbowParams { negatives: 0, ..Default::default() }).is_err());
    }

    fn small_vocab() -> Vocabulary {
        build_vocabulary(&docs(&["alpha", "beta", "gamma", "delta"]), 1, None).unwrap()
    }

    #[test]
    fn pretrained_full_coverage_and_empty_file() {
        let vocab = small_vocab();
        let text = "2 3\nalpha 1 0 0\nbeta 0 1 0\ngamma 0 0 1\ndelta 1 1 1\nzeta 5 5 5\n";
        let table = load_pretrained(text.as_bytes(), &vocab, 3, 0).unwrap();
        assert_eq!(table.provenance_counts(), (4, 0));
        assert_eq!(table.vector(vocab.id("delta")), &[1.0, 1.0, 1.0]);
        assert_eq!(table.vector(PAD_ID), &[0.0; 3]);

        let empty = load_pretrained("".as_bytes(), &vocab, 3, 7).unwrap();
        assert_eq!(empty.provenance_counts(), (0, 4));
        assert_eq!(empty, load_pretrained("".as_bytes(), &vocab, 3, 7).unwrap());
        assert!(empty.vectors.iter().all(|v| v.abs() < OOV_INIT_RANGE));
    }

    #[test]
    fn pretrained_half_coverage_at_300_dims() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i:02}")).collect();
        let vocab = build_vocabulary(std::slice::from_ref(&words), 1, None).unwrap();
        let mut text = String::new();
        for w in words.iter().step_by(2) {
            text.push_str(w);
            for k in 0..300 {
                text.push_str(&format!(" {}", (k as f64) * 0.001));
            }
            text.push('\n');
        }
        let table = load_pretrained(text.as_bytes(), &vocab, 300, 1).unwrap();
        assert_eq!(table.provenance_counts(), (20, 20));
        for w in words.iter().step_by(2) {
            assert_eq!(table.vector(vocab.id(w))[299], 0.299);
        }
    }

    #[test]
    fn pretrained_dimension_mismatch_names_line() {
        let vocab = small_vocab();
        let text = "alpha 1 0 0\nbeta 0 1\n";
        match load_pretrained(text.as_bytes(), &vocab, 3, 0) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let corpus = two_cluster_corpus();
        let vocab = build_vocabulary(&corpus, 1, None).unwrap();
        let table = cbow_train(&corpus, &vocab, &CbowParams { dim: 6, epochs: 1, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        table.write_text(&mut buf).unwrap();
        let back = load_pretrained(buf.as_slice(), &vocab, 6, 0).unwrap();
        assert_eq!(back.provenance_counts(), (vocab.len() - N_SPECIAL, 0));
        assert_eq!(&back.vectors[N_SPECIAL * 6..], &table.vectors[N_SPECIAL * 6..]);
    }

    #[test]
    fn neighbor_contract() {
        let vocab = small_vocab();
        let text = "alpha 1 0\nbeta 1 0\ngamma 0 1\ndelta 0 2\n";
        let table = load_pretrained(text.as_bytes(), &vocab, 2, 0).unwrap();
        let nn = nearest_neighbors(&table, "alpha", 3).unwrap();
        assert_eq!(nn[0], ("beta".to_string(), 1.0));
        assert_eq!(nn[1], ("delta".to_string(), 0.0));
        assert_eq!(nn[2], ("gamma".to_string(), 0.0));
        assert!(nearest_neighbors(&table, "omega", 1).is_err());
        assert!(nearest_neighbors(&table, "alpha", 4).is_err());
        assert!(nn.iter().all(|(w, _)| w != "alpha"));
    }
}
