//! Toy transformer-encoder classifier: a pair-merge subword tokenizer with
//! `[CLS]`/`[SEP]` framing, a post-norm multi-head self-attention encoder
//! with learned positional embeddings, and a dense head on the `[CLS]`
//! position. Weights start from random initialization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::TrainHistory;
use crate::tensor::{adam_step, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::util::{argmax_first, rng_for};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
/// Display prefix for pieces that continue a word.
pub const CONTINUATION: &str = "##";

/// Subword pieces in id order. Pieces match anywhere inside a word; the
/// `##` marker only appears in segmentations for display.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

impl SubwordVocab {
    fn from_pieces(pieces: Vec<String>) -> Result<SubwordVocab> {
        let mut index = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::domain(format!("empty subword piece at id {i}")));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::domain(format!("duplicate subword piece `{p}`")));
            }
        }
        for (id, name) in SPECIALS.iter().enumerate() {
            if pieces.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::domain(format!("id {id} must be {name}")));
            }
        }
        let longest = pieces[SPECIALS.len()..].iter().map(|p| p.chars().count()).max().unwrap_or(0);
        Ok(SubwordVocab { pieces, index, longest })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// Greedy longest-match ids for one (already lowercased) word. A
    /// character no piece covers becomes `[UNK]`.
    pub fn segment_ids(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let max = self.longest.min(chars.len() - pos);
            let found = (1..=max).rev().find_map(|len| {
                let s: String = chars[pos..pos + len].iter().collect();
                self.index.get(&s).map(|&id| (id, len))
            });
            match found {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(UNK);
                    pos += 1;
                }
            }
        }
        out
    }

    /// Display segmentation with continuation pieces prefixed by `##`.
    pub fn segment(&self, word: &str) -> Vec<String> {
        self.segment_ids(&word.to_lowercase())
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let p = &self.pieces[id];
                if i > 0 && id >= SPECIALS.len() {
                    format!("{CONTINUATION}{p}")
                } else {
                    p.clone()
                }
            })
            .collect()
    }

    /// One piece per line in id order.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        for p in &self.pieces {
            writeln!(out, "{p}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<SubwordVocab> {
        let pieces = input.lines().collect::<std::io::Result<Vec<String>>>()?;
        SubwordVocab::from_pieces(pieces)
    }
}

/// Builds a vocabulary of `target_size` pieces: the specials, every
/// character seen in the corpus, then pieces from repeatedly merging the
/// most frequent adjacent pair (ties to the lexicographically smallest
/// pair). Stops early when no pair is left to merge.
pub fn train_subword_vocab<D: AsRef<[String]>>(corpus: &[D], target_size: usize) -> Result<SubwordVocab> {
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for tok in doc.as_ref() {
            *word_freq.entry(tok.to_lowercase()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::domain("cannot train a subword vocabulary on an empty corpus"));
    }
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let base = SPECIALS.len() + chars.len();
    if target_size < base {
        return Err(Error::domain(format!(
            "target size {target_size} is below {base} (specials plus {} characters)",
            chars.len()
        )));
    }
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(chars.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = pieces.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, n)| (w.chars().map(|c| c.to_string()).collect(), n))
        .collect();

    while pieces.len() < target_size {
        let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *pairs.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += n;
            }
        }
        let Some(best) = pairs
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, _)| p.clone())
        else {
            break;
        };
        let merged = format!("{}{}", best.0, best.1);
        for (w, _) in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == best.0 && w[i + 1] == best.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut w[i]));
                    i += 1;
                }
            }
            *w = out;
        }
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    SubwordVocab::from_pieces(pieces)
}

/// Encoded rows, each `[CLS] pieces... [SEP]` right-padded to `maxlen`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedBatch {
    pub n_rows: usize,
    pub maxlen: usize,
    pub ids: Vec<usize>,
    /// 1 on real positions, 0 on padding.
    pub attention_mask: Vec<u8>,
    /// All zero: single-segment inputs.
    pub segment_ids: Vec<u8>,
}

impl EncodedBatch {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.maxlen..(r + 1) * self.maxlen]
    }

    pub fn select_rows(&self, indices: &[usize]) -> EncodedBatch {
        let m = self.maxlen;
        let mut out = EncodedBatch {
            n_rows: indices.len(),
            maxlen: m,
            ids: Vec::with_capacity(indices.len() * m),
            attention_mask: Vec::with_capacity(indices.len() * m),
            segment_ids: Vec::with_capacity(indices.len() * m),
        };
        for &i in indices {
            out.ids.extend_from_slice(&self.ids[i * m..(i + 1) * m]);
            out.attention_mask.extend_from_slice(&self.attention_mask[i * m..(i + 1) * m]);
            out.segment_ids.extend_from_slice(&self.segment_ids[i * m..(i + 1) * m]);
        }
        out
    }
}

/// Lowercases and segments `tokens`; sequences longer than `maxlen` keep
/// their head and end in `[SEP]`.
pub fn encode(vocab: &SubwordVocab, tokens: &[String], maxlen: usize) -> Result<EncodedBatch> {
    encode_batch(vocab, &[tokens], maxlen)
}

pub fn encode_batch<D: AsRef<[String]>>(vocab: &SubwordVocab, docs: &[D], maxlen: usize) -> Result<EncodedBatch> {
    if maxlen < 2 {
        return Err(Error::domain(format!("maxlen must be at least 2, got {maxlen}")));
    }
    let mut batch = EncodedBatch {
        n_rows: docs.len(),
        maxlen,
        ids: Vec::with_capacity(docs.len() * maxlen),
        attention_mask: Vec::with_capacity(docs.len() * maxlen),
        segment_ids: vec![0; docs.len() * maxlen],
    };
    for doc in docs {
        let mut row = vec![CLS];
        for tok in doc.as_ref() {
            if row.len() >= maxlen {
                break;
            }
            row.extend(vocab.segment_ids(&tok.to_lowercase()));
        }
        row.truncate(maxlen - 1);
        row.push(SEP);
        let used = row.len();
        row.resize(maxlen, PAD);
        batch.ids.extend(row);
        batch.attention_mask.extend((0..maxlen).map(|i| u8::from(i < used)));
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub maxlen: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Target size of the subword vocabulary trained per fold.
    pub subword_vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            maxlen: 50,
            lr: 2e-5,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            subword_vocab_size: 1000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::domain("layer, head and width counts must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::domain(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.maxlen < 2 {
            return Err(Error::domain("maxlen must be at least 2 ([CLS] and [SEP])"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::domain(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: (ParamId, ParamId),
    /// No bias: it would shift every score of a query equally.
    wk: ParamId,
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub n_classes: usize,
    pub vocab_size: usize,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub net: Encoder,
    pub store: ParamStore,
}

pub fn build_model(config: &EncoderConfig, n_classes: usize, vocab_size: usize) -> Result<TransformerModel> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {n_classes}")));
    }
    if vocab_size <= SPECIALS.len() {
        return Err(Error::domain("subword vocabulary holds no pieces"));
    }
    let (d, f) = (config.d_model, config.d_ff);
    let mut rng = rng_for(config.seed, 0);
    let mut store = ParamStore::new();
    let token_emb = store.add("token_embedding", Tensor::glorot(&[vocab_size, d], 1, d, &mut rng));
    let pos_emb = store.add("position_embedding", Tensor::glorot(&[config.maxlen, d], 1, d, &mut rng));
    let dense = |name: String, store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, n_in: usize, n_out: usize| {
        let w = store.add(format!("{name}.w"), Tensor::glorot(&[n_in, n_out], n_in, n_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[n_out]));
        (w, b)
    };
    let norm = |name: String, store: &mut ParamStore| {
        let g = store.add(format!("{name}.gamma"), Tensor::new(vec![d], vec![1.0; d]).expect("shape"));
        let b = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        (g, b)
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(Layer {
            wq: dense(format!("layer{l}.q"), &mut store, &mut rng, d, d),
            wk: store.add(format!("layer{l}.k.w"), Tensor::glorot(&[d, d], d, d, &mut rng)),
            wv: dense(format!("layer{l}.v"), &mut store, &mut rng, d, d),
            wo: dense(format!("layer{l}.o"), &mut store, &mut rng, d, d),
            ln1: norm(format!("layer{l}.ln1"), &mut store),
            ff1: dense(format!("layer{l}.ff1"), &mut store, &mut rng, d, f),
            ff2: dense(format!("layer{l}.ff2"), &mut store, &mut rng, f, d),
            ln2: norm(format!("layer{l}.ln2"), &mut store),
        });
    }
    let out = if n_classes == 2 { 1 } else { n_classes };
    let head = dense("head".into(), &mut store, &mut rng, d, out);
    Ok(TransformerModel {
        net: Encoder {
            config: config.clone(),
            n_classes,
            vocab_size,
            token_emb,
            pos_emb,
            layers,
            head,
        },
        store,
    })
}

impl Encoder {
    fn linear(&self, g: &Graph, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        g.add(g.matmul(x, g.param(p.0))?, g.param(p.1))
    }

    /// Hidden states `[B, maxlen, d_model]`.
    pub fn encode(&self, g: &Graph, batch: &EncodedBatch) -> Result<Var> {
        if batch.maxlen != self.config.maxlen {
            return Err(Error::shape("encoder input", &[batch.n_rows, batch.maxlen], &[self.config.maxlen]));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::domain(format!("piece id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let mask: Vec<bool> = batch.attention_mask.iter().map(|&m| m == 1).collect();
        let tok = g.embedding(g.param(self.token_emb), &batch.ids, &[batch.n_rows, batch.maxlen])?;
        let mut x = g.add(tok, g.param(self.pos_emb))?;
        for layer in &self.layers {
            let q = self.linear(g, x, layer.wq)?;
            let k = g.matmul(x, g.param(layer.wk))?;
            let v = self.linear(g, x, layer.wv)?;
            let att = g.attention(q, k, v, &mask, self.config.n_heads)?;
            let o = self.linear(g, att, layer.wo)?;
            x = g.layer_norm(g.add(x, o)?, g.param(layer.ln1.0), g.param(layer.ln1.1))?;
            let h = g.gelu(self.linear(g, x, layer.ff1)?);
            let f = self.linear(g, h, layer.ff2)?;
            x = g.layer_norm(g.add(x, f)?, g.param(layer.ln2.0), g.param(layer.ln2.1))?;
        }
        Ok(x)
    }

    /// Head logits from the `[CLS]` position.
    pub fn forward(&self, g: &Graph, batch: &EncodedBatch) -> Result<Var> {
        let h = self.encode(g, batch)?;
        let cls = g.select_time(h, 0)?;
        self.linear(g, cls, self.head)
    }

    pub fn loss(&self, g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::domain(format!("label {bad} outside {} classes", self.n_classes)));
        }
        if self.n_classes == 2 {
            let t: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            g.sigmoid_bce(logits, &t)
        } else {
            g.softmax_cross_entropy(logits, labels)
        }
    }

    pub fn decode(&self, logits: &Tensor) -> (Vec<usize>, Vec<Vec<f64>>) {
        if self.n_classes == 2 {
            logits
                .data
                .iter()
                .map(|&z| {
                    let p = 1.0 / (1.0 + (-z).exp());
                    (usize::from(p > 0.5), vec![1.0 - p, p])
                })
                .unzip()
        } else {
            (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
                    (argmax_first(&p, 0.0), p)
                })
                .unzip()
        }
    }
}

fn check(batch: &EncodedBatch, labels: &[usize], what: &str) -> Result<()> {
    if batch.n_rows == 0 {
        return Err(Error::domain(format!("{what} data is empty")));
    }
    if batch.n_rows != labels.len() {
        return Err(Error::domain(format!(
            "{what} data has {} rows but {} labels",
            batch.n_rows,
            labels.len()
        )));
    }
    Ok(())
}

pub fn evaluate(model: &TransformerModel, batch: &EncodedBatch, labels: &[usize]) -> Result<(f64, f64)> {
    check(batch, labels, "evaluation")?;
    let bs = model.net.config.batch_size;
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..batch.n_rows).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(batch.n_rows)).collect();
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let g = Graph::new(&model.store);
        let logits = model.net.forward(&g, &batch.select_rows(&idx))?;
        loss += g.scalar(model.net.loss(&g, logits, &yb)?) * idx.len() as f64;
        let (pred, _) = model.net.decode(&g.value(logits));
        correct += pred.iter().zip(&yb).filter(|(a, b)| a == b).count();
    }
    Ok((loss / batch.n_rows as f64, correct as f64 / batch.n_rows as f64))
}

/// Trains every weight with Adam at the configured learning rate.
pub fn fine_tune(model: &mut TransformerModel, batch: &EncodedBatch, labels: &[usize], val: Option<(&EncodedBatch, &[usize])>) -> Result<TrainHistory> {
    check(batch, labels, "training")?;
    if let Some((vb, vy)) = val {
        check(vb, vy, "validation")?;
    }
    let cfg = model.net.config.clone();
    let mut rng = rng_for(cfg.seed, 1);
    let mut adam = AdamState::new(&model.store);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..batch.n_rows).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let started = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = batch.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let g = Graph::new(&model.store);
                let logits = model.net.forward(&g, &xb)?;
                let loss = model.net.loss(&g, logits, &yb)?;
                loss_sum += g.scalar(loss) * chunk.len() as f64;
                let (pred, _) = model.net.decode(&g.value(logits));
                correct += pred.iter().zip(&yb).filter(|(a, b)| a == b).count();
                g.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            adam_step(&mut model.store, &mut adam, cfg.lr)?;
        }
        history.seconds.push(started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        history.train_loss.push(loss_sum / batch.n_rows as f64);
        history.train_accuracy.push(correct as f64 / batch.n_rows as f64);
        match val {
            Some((vb, vy)) => {
                let (l, a) = evaluate(model, vb, vy)?;
                history.val_loss.push(Some(l));
                history.val_accuracy.push(Some(a));
            }
            None => {
                history.val_loss.push(None);
                history.val_accuracy.push(None);
            }
        }
    }
    Ok(history)
}

/// Labels and probability rows from the `[CLS]` head.
pub fn cls_classify(model: &TransformerModel, batch: &EncodedBatch) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let bs = model.net.config.batch_size;
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    for start in (0..batch.n_rows).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(batch.n_rows)).collect();
        let g = Graph::new(&model.store);
        let logits = model.net.forward(&g, &batch.select_rows(&idx))?;
        let (l, p) = model.net.decode(&g.value(logits));
        labels.extend(l);
        probs.extend(p);
    }
    Ok((labels, probs))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: EncoderConfig,
    n_classes: usize,
    vocab_size: usize,
}

/// Writes `<stem>.bin`, `<stem>.json` and the vocabulary as `<stem>.vocab`.
pub fn save_model(model: &TransformerModel, vocab: &SubwordVocab, stem: &Path) -> Result<()> {
    model.store.save(&mut BufWriter::new(File::create(stem.with_extension("bin"))?))?;
    vocab.write_text(BufWriter::new(File::create(stem.with_extension("vocab"))?))?;
    let sidecar = Sidecar {
        config: model.net.config.clone(),
        n_classes: model.net.n_classes,
        vocab_size: model.net.vocab_size,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<(TransformerModel, SubwordVocab)> {
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let vocab = SubwordVocab::read_text(BufReader::new(File::open(stem.with_extension("vocab"))?))?;
    let mut model = build_model(&sidecar.config, sidecar.n_classes, sidecar.vocab_size)?;
    let loaded = ParamStore::load(&mut BufReader::new(File::open(stem.with_extension("bin"))?))?;
    model.store.copy_values_from(&loaded)?;
    Ok((model, vocab))
}
