//! Embedding-based neural text classifiers: word CNN, character CNN, LSTM and
//! bidirectional LSTM, each ending in a dense head. Two-class problems use a
//! single sigmoid unit whose output is the probability of class index 1;
//! larger problems use a softmax.
//!
//! The default learning rate of 0.01 is high for Adam and can make training
//! unstable on some corpora.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::util::{argmax_first, rng_for};
use crate::vectorizer::{IndexMatrix, PAD_ID};

const EMBEDDING_INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    WordCnn,
    CharCnn,
    Lstm,
    Bilstm,
}

impl Arch {
    pub fn is_cnn(self) -> bool {
        matches!(self, Arch::WordCnn | Arch::CharCnn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbeddingInit {
    Random { dim: usize },
    /// Rows must line up with the ids of the encoding vocabulary.
    Pretrained { table: EmbeddingTable },
    Char { dim: usize },
}

impl EmbeddingInit {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingInit::Random { dim } | EmbeddingInit::Char { dim } => *dim,
            EmbeddingInit::Pretrained { table } => table.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    pub arch: Arch,
    pub maxlen: usize,
    pub embedding: EmbeddingInit,
    pub filter_sizes: Vec<usize>,
    pub n_filters: usize,
    pub lstm_units: usize,
    pub dropout_p: f64,
    /// Also apply dropout to the concatenated pooled vector (CNNs).
    pub dropout_on_pooled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub trainable_embeddings: bool,
    /// Share of the training data held out for validation curves.
    pub val_fraction: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            arch: Arch::WordCnn,
            maxlen: 100,
            embedding: EmbeddingInit::Random { dim: 300 },
            filter_sizes: vec![3, 4, 5],
            n_filters: 100,
            lstm_units: 64,
            dropout_p: 0.5,
            dropout_on_pooled: false,
            epochs: 5,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
            trainable_embeddings: true,
            val_fraction: 0.1,
        }
    }
}

impl NeuralConfig {
    /// Defaults for `arch`; the character CNN reads 512 characters through
    /// 16-dimensional embeddings.
    pub fn for_arch(arch: Arch) -> NeuralConfig {
        match arch {
            Arch::CharCnn => NeuralConfig {
                arch,
                maxlen: 512,
                embedding: EmbeddingInit::Char { dim: 16 },
                ..NeuralConfig::default()
            },
            _ => NeuralConfig {
                arch,
                ..NeuralConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.maxlen == 0 {
            return Err(Error::domain("maxlen must be at least 1"));
        }
        if self.arch.is_cnn() {
            let widest = self.filter_sizes.iter().copied().max().ok_or_else(|| Error::domain("filter_sizes is empty"))?;
            if self.filter_sizes.contains(&0) || self.n_filters == 0 {
                return Err(Error::domain("filter sizes and n_filters must be positive"));
            }
            if self.maxlen < widest {
                return Err(Error::domain(format!(
                    "maxlen {} is shorter than the widest filter {widest}",
                    self.maxlen
                )));
            }
        } else if self.lstm_units == 0 {
            return Err(Error::domain("lstm_units must be positive"));
        }
        if self.embedding.dim() == 0 {
            return Err(Error::domain("embedding dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::domain(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::domain(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::domain(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// Per-epoch training curves. Validation entries are `None` when no
/// validation split was given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<Option<f64>>,
    pub val_accuracy: Vec<Option<f64>>,
    /// Wall-clock seconds of each epoch's training pass.
    pub seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn mean_seconds_per_epoch(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LstmParams {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Cnn { filters: Vec<(usize, ParamId, ParamId)> },
    Lstm { forward: LstmParams, backward: Option<LstmParams> },
}

/// Model topology plus the ids of its parameters; the values live in a
/// separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NeuralConfig,
    pub n_classes: usize,
    pub vocab_size: usize,
    embedding: ParamId,
    body: Body,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct NeuralModel {
    pub net: Network,
    pub store: ParamStore,
}

/// Number of output units: one sigmoid unit for two classes, else one per
/// class.
fn output_units(n_classes: usize) -> usize {
    if n_classes == 2 {
        1
    } else {
        n_classes
    }
}

/// Initializes a model for inputs with ids below `vocab_size`.
pub fn build_model(config: &NeuralConfig, n_classes: usize, vocab_size: usize) -> Result<NeuralModel> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {n_classes}")));
    }
    if vocab_size <= PAD_ID + 1 {
        return Err(Error::domain("vocabulary holds no tokens"));
    }
    let mut rng = rng_for(config.seed, 0);
    let mut store = ParamStore::new();
    let dim = config.embedding.dim();
    let table = match &config.embedding {
        EmbeddingInit::Pretrained { table } => {
            if table.n_rows() != vocab_size {
                return Err(Error::domain(format!(
                    "pretrained table has {} rows, vocabulary has {vocab_size}",
                    table.n_rows()
                )));
            }
            Tensor::new(vec![vocab_size, dim], table.vectors.clone())?
        }
        _ => Tensor::uniform(&[vocab_size, dim], EMBEDDING_INIT_RANGE, &mut rng),
    };
    let embedding = store.add("embedding", table);
    store.set_requires_grad(embedding, config.trainable_embeddings);

    let (body, head_in) = match config.arch {
        Arch::WordCnn | Arch::CharCnn => {
            let f = config.n_filters;
            let filters = config
                .filter_sizes
                .iter()
                .map(|&w| {
                    let wt = store.add(format!("conv{w}.w"), Tensor::glorot(&[w * dim, f], w * dim, f, &mut rng));
                    let bt = store.add(format!("conv{w}.b"), Tensor::zeros(&[f]));
                    (w, wt, bt)
                })
                .collect();
            (Body::Cnn { filters }, f * config.filter_sizes.len())
        }
        Arch::Lstm | Arch::Bilstm => {
            let h = config.lstm_units;
            let mut make = |prefix: &str, store: &mut ParamStore| {
                let wx = store.add(format!("{prefix}.wx"), Tensor::glorot(&[dim, 4 * h], dim, 4 * h, &mut rng));
                let wh = store.add(format!("{prefix}.wh"), Tensor::glorot(&[h, 4 * h], h, 4 * h, &mut rng));
                let mut bias = Tensor::zeros(&[4 * h]);
                // Forget-gate bias of one keeps early gradients flowing.
                bias.data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                let b = store.add(format!("{prefix}.b"), bias);
                LstmParams { wx, wh, b }
            };
            let forward = make("lstm_fw", &mut store);
            let backward = (config.arch == Arch::Bilstm).then(|| make("lstm_bw", &mut store));
            let width = if backward.is_some() { 2 * h } else { h };
            (Body::Lstm { forward, backward }, width)
        }
    };
    let out = output_units(n_classes);
    let head_w = store.add("head.w", Tensor::glorot(&[head_in, out], head_in, out, &mut rng));
    let head_b = store.add("head.b", Tensor::zeros(&[out]));
    Ok(NeuralModel {
        net: Network {
            config: config.clone(),
            n_classes,
            vocab_size,
            embedding,
            body,
            head_w,
            head_b,
        },
        store,
    })
}

impl Network {
    /// Width of the vector entering the dense head.
    pub fn head_input_width(&self, store: &ParamStore) -> usize {
        store.value(self.head_w).shape[0]
    }

    /// Logits `[B, 1]` (binary) or `[B, C]` for a batch of encoded rows.
    pub fn forward(&self, g: &Graph, x: &IndexMatrix, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if x.maxlen != self.config.maxlen {
            return Err(Error::domain(format!(
                "input maxlen {} differs from model maxlen {}",
                x.maxlen, self.config.maxlen
            )));
        }
        if let Some(&bad) = x.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::domain(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let (b, t) = (x.n_rows, x.maxlen);
        let p = self.config.dropout_p;
        let emb = g.embedding(g.param(self.embedding), &x.ids, &[b, t])?;
        let features = match &self.body {
            Body::Cnn { filters } => {
                let mut pooled = Vec::with_capacity(filters.len());
                for &(width, w, bias) in filters {
                    let c = g.relu(g.conv1d(emb, g.param(w), g.param(bias), width)?);
                    let c = g.dropout(c, p, train, rng)?;
                    pooled.push(g.max_pool_over_time(c)?);
                }
                let cat = g.concat(&pooled)?;
                if self.config.dropout_on_pooled {
                    g.dropout(cat, p, train, rng)?
                } else {
                    cat
                }
            }
            Body::Lstm { forward, backward } => {
                let steps = (0..b).map(|r| x.row_len(r)).max().unwrap_or(0).max(1);
                let h_fw = self.lstm_pass(g, forward, emb, x, steps, false)?;
                let h = match backward {
                    Some(bw) => {
                        let h_bw = self.lstm_pass(g, bw, emb, x, steps, true)?;
                        g.concat(&[h_fw, h_bw])?
                    }
                    None => h_fw,
                };
                g.dropout(h, p, train, rng)?
            }
        };
        g.add(g.matmul(features, g.param(self.head_w))?, g.param(self.head_b))
    }

    /// Runs one LSTM direction over the first `steps` positions. Padding
    /// positions leave the state untouched, so each row ends on the state
    /// after its last real token.
    fn lstm_pass(&self, g: &Graph, p: &LstmParams, emb: Var, x: &IndexMatrix, steps: usize, reverse: bool) -> Result<Var> {
        let b = x.n_rows;
        let h_units = self.config.lstm_units;
        let proj = g.matmul(emb, g.param(p.wx))?; // [B, T, 4H]
        let wh = g.param(p.wh);
        let bias = g.param(p.b);
        let mut h = g.input(Tensor::zeros(&[b, h_units]));
        let mut c = g.input(Tensor::zeros(&[b, h_units]));
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let live: Vec<f64> = (0..b)
                .map(|r| if x.row(r)[t] != PAD_ID { 1.0 } else { 0.0 })
                .collect();
            if live.iter().all(|&m| m == 0.0) {
                continue;
            }
            let z = g.add(g.add(g.select_time(proj, t)?, g.matmul(h, wh)?)?, bias)?;
            let i = g.sigmoid(g.slice_last(z, 0, h_units)?);
            let f = g.sigmoid(g.slice_last(z, h_units, h_units)?);
            let cand = g.tanh(g.slice_last(z, 2 * h_units, h_units)?);
            let o = g.sigmoid(g.slice_last(z, 3 * h_units, h_units)?);
            let c_new = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
            let h_new = g.mul(o, g.tanh(c_new))?;
            if live.iter().all(|&m| m == 1.0) {
                h = h_new;
                c = c_new;
            } else {
                let keep: Vec<f64> = live.iter().flat_map(|&m| std::iter::repeat_n(m, h_units)).collect();
                let hold: Vec<f64> = keep.iter().map(|m| 1.0 - m).collect();
                let keep = g.input(Tensor::new(vec![b, h_units], keep)?);
                let hold = g.input(Tensor::new(vec![b, h_units], hold)?);
                h = g.add(g.mul(keep, h_new)?, g.mul(hold, h)?)?;
                c = g.add(g.mul(keep, c_new)?, g.mul(hold, c)?)?;
            }
        }
        Ok(h)
    }

    /// Mean loss of a batch: binary cross-entropy on the sigmoid unit or
    /// softmax cross-entropy.
    pub fn loss(&self, g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::domain(format!("label {bad} outside {} classes", self.n_classes)));
        }
        if self.n_classes == 2 {
            let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            g.sigmoid_bce(logits, &targets)
        } else {
            g.softmax_cross_entropy(logits, labels)
        }
    }

    /// Class probability rows and predicted labels from logits.
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
                    let exp: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
                    let s: f64 = exp.iter().sum();
                    let probs: Vec<f64> = exp.iter().map(|e| e / s).collect();
                    (argmax_first(&probs, 0.0), probs)
                })
                .unzip()
        }
    }
}

fn check_split(x: &IndexMatrix, y: &[usize], what: &str) -> Result<()> {
    if x.n_rows == 0 {
        return Err(Error::domain(format!("{what} split is empty")));
    }
    if x.n_rows != y.len() {
        return Err(Error::domain(format!(
            "{what} split has {} rows but {} labels",
            x.n_rows,
            y.len()
        )));
    }
    Ok(())
}

/// Seeded hold-out: returns `(train, validation)` row indices, the latter
/// `round(fraction * n)` rows (kept below `n`).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 3));
    let n_val = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Averages loss and accuracy over `x` without dropout.
pub fn evaluate(model: &NeuralModel, x: &IndexMatrix, y: &[usize]) -> Result<(f64, f64)> {
    check_split(x, y, "evaluation")?;
    let mut rng = rng_for(0, 0);
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..x.n_rows).step_by(model.net.config.batch_size) {
        let idx: Vec<usize> = (start..(start + model.net.config.batch_size).min(x.n_rows)).collect();
        let xb = x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let g = Graph::new(&model.store);
        let logits = model.net.forward(&g, &xb, false, &mut rng)?;
        let l = model.net.loss(&g, logits, &yb)?;
        loss += g.scalar(l) * idx.len() as f64;
        let (pred, _) = model.net.decode(&g.value(logits));
        correct += pred.iter().zip(&yb).filter(|(a, b)| a == b).count();
    }
    Ok((loss / x.n_rows as f64, correct as f64 / x.n_rows as f64))
}

/// Mini-batch Adam training. Rows are reshuffled every epoch from the
/// config seed; dropout is active only here.
pub fn train(model: &mut NeuralModel, train_x: &IndexMatrix, train_y: &[usize], val: Option<(&IndexMatrix, &[usize])>) -> Result<TrainHistory> {
    check_split(train_x, train_y, "training")?;
    if let Some((vx, vy)) = val {
        check_split(vx, vy, "validation")?;
    }
    let cfg = model.net.config.clone();
    let mut shuffle_rng = rng_for(cfg.seed, 1);
    let mut dropout_rng = rng_for(cfg.seed, 2);
    let mut adam = AdamState::new(&model.store);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_x.n_rows).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let started = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let xb = train_x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let grads = {
                let g = Graph::new(&model.store);
                let logits = model.net.forward(&g, &xb, true, &mut dropout_rng)?;
                let loss = model.net.loss(&g, logits, &yb)?;
                loss_sum += g.scalar(loss) * batch.len() as f64;
                let (pred, _) = model.net.decode(&g.value(logits));
                correct += pred.iter().zip(&yb).filter(|(a, b)| a == b).count();
                g.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            adam_step(&mut model.store, &mut adam, cfg.lr)?;
        }
        history.seconds.push(started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        history.train_loss.push(loss_sum / train_x.n_rows as f64);
        history.train_accuracy.push(correct as f64 / train_x.n_rows as f64);
        match val {
            Some((vx, vy)) => {
                let (l, a) = evaluate(model, vx, vy)?;
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

/// Predicted labels and per-class probability rows (`[1 - p, p]` for the
/// sigmoid head).
pub fn predict(model: &NeuralModel, x: &IndexMatrix) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut rng = rng_for(0, 0);
    let (mut labels, mut probs) = (Vec::with_capacity(x.n_rows), Vec::with_capacity(x.n_rows));
    if x.maxlen != model.net.config.maxlen {
        return Err(Error::domain(format!(
            "input maxlen {} differs from model maxlen {}",
            x.maxlen, model.net.config.maxlen
        )));
    }
    for start in (0..x.n_rows).step_by(model.net.config.batch_size) {
        let idx: Vec<usize> = (start..(start + model.net.config.batch_size).min(x.n_rows)).collect();
        let g = Graph::new(&model.store);
        let logits = model.net.forward(&g, &x.select_rows(&idx), false, &mut rng)?;
        let (l, p) = model.net.decode(&g.value(logits));
        labels.extend(l);
        probs.extend(p);
    }
    Ok((labels, probs))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: NeuralConfig,
    n_classes: usize,
    vocab_size: usize,
}

/// Writes `<stem>.bin` (parameters) and `<stem>.json` (topology and config).
pub fn save_model(model: &NeuralModel, stem: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
    model.store.save(&mut w)?;
    let sidecar = Sidecar {
        config: model.net.config.clone(),
        n_classes: model.net.n_classes,
        vocab_size: model.net.vocab_size,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<NeuralModel> {
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let mut model = build_model(&sidecar.config, sidecar.n_classes, sidecar.vocab_size)?;
    let loaded = ParamStore::load(&mut BufReader::new(File::open(stem.with_extension("bin"))?))?;
    model.store.copy_values_from(&loaded)?;
    model.store.set_requires_grad(model.net.embedding, sidecar.config.trainable_embeddings);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small(arch: Arch) -> NeuralConfig {
        NeuralConfig {
            arch,
            maxlen: 8,
            embedding: EmbeddingInit::Random { dim: 4 },
            filter_sizes: vec![2, 3],
            n_filters: 3,
            lstm_units: 3,
            epochs: 3,
            batch_size: 4,
            ..NeuralConfig::default()
        }
    }

    fn batch() -> (IndexMatrix, Vec<usize>) {
        let ids = vec![
            2, 3, 4, 5, 0, 0, 0, 0, //
            6, 7, 2, 0, 0, 0, 0, 0, //
            3, 3, 3, 3, 3, 3, 3, 3, //
            0, 0, 0, 0, 0, 0, 0, 0,
        ];
        (IndexMatrix { n_rows: 4, maxlen: 8, ids }, vec![0, 1, 2, 1])
    }

    #[test]
    fn head_widths() {
        let m = build_model(&NeuralConfig::default(), 2, 50).unwrap();
        assert_eq!(m.net.head_input_width(&m.store), 300);
        let m = build_model(&NeuralConfig::for_arch(Arch::Lstm), 2, 50).unwrap();
        assert_eq!(m.net.head_input_width(&m.store), 64);
        let m = build_model(&NeuralConfig::for_arch(Arch::Bilstm), 2, 50).unwrap();
        assert_eq!(m.net.head_input_width(&m.store), 128);
        let bad = NeuralConfig { maxlen: 4, ..NeuralConfig::default() };
        assert!(build_model(&bad, 2, 50).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, y) = batch();
        for arch in [Arch::WordCnn, Arch::CharCnn, Arch::Lstm, Arch::Bilstm] {
            for n_classes in [2usize, 3] {
                let cfg = small(arch);
                let mut model = build_model(&cfg, n_classes, 8).unwrap();
                let labels: Vec<usize> = y.iter().map(|&l| l % n_classes).collect();
                let net = model.net.clone();
                let err = grad_check(&mut model.store, 1e-5, None, 0, |g| {
                    let logits = net.forward(g, &x, false, &mut rng_for(0, 0))?;
                    net.loss(g, logits, &labels)
                })
                .unwrap();
                assert!(err < 1e-3, "{arch:?}/{n_classes}: {err}");
            }
        }
    }

    #[test]
    fn probabilities_valid_including_all_pad_rows() {
        let (x, _) = batch();
        for arch in [Arch::WordCnn, Arch::Lstm, Arch::Bilstm] {
            for n_classes in [2usize, 4] {
                let model = build_model(&small(arch), n_classes, 8).unwrap();
                let (labels, probs) = predict(&model, &x).unwrap();
                assert_eq!(labels.len(), 4);
                for row in &probs {
                    assert_eq!(row.len(), n_classes);
                    assert!(row.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn maxlen_mismatch_and_empty_split() {
        let model = build_model(&small(Arch::WordCnn), 2, 8).unwrap();
        let x = IndexMatrix { n_rows: 1, maxlen: 5, ids: vec![2; 5] };
        assert!(predict(&model, &x).is_err());
        let mut model = model;
        let empty = IndexMatrix { n_rows: 0, maxlen: 8, ids: vec![] };
        assert!(train(&mut model, &empty, &[], None).is_err());
    }

    #[test]
    fn lstm_ignores_trailing_padding() {
        let model = build_model(&small(Arch::Bilstm), 3, 8).unwrap();
        let a = IndexMatrix { n_rows: 1, maxlen: 8, ids: vec![2, 3, 4, 0, 0, 0, 0, 0] };
        let (_, pa) = predict(&model, &a).unwrap();
        let mut cfg = small(Arch::Bilstm);
        cfg.maxlen = 4;
        let mut short = build_model(&cfg, 3, 8).unwrap();
        short.store = model.store.clone();
        let b = IndexMatrix { n_rows: 1, maxlen: 4, ids: vec![2, 3, 4, 0] };
        let (_, pb) = predict(&short, &b).unwrap();
        for (x, y) in pa[0].iter().zip(&pb[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut ids = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let signal = if class == 0 { 2 } else { 3 };
            let mut row = vec![4 + (i % 3), 5, signal, 6, 4, 0, 0, 0];
            row.rotate_left(i % 4);
            ids.extend(row);
            y.push(class);
        }
        let x = IndexMatrix { n_rows: 40, maxlen: 8, ids };
        let cfg = NeuralConfig { epochs: 8, lr: 0.02, ..small(Arch::WordCnn) };
        let run = || {
            let mut m = build_model(&cfg, 2, 8).unwrap();
            let h = train(&mut m, &x, &y, Some((&x, &y))).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1.store, m2.store);
        assert_eq!(h1.train_loss, h2.train_loss);
        assert_eq!(h1.val_loss, h2.val_loss);
        assert_eq!(h1.seconds.len(), 8);
        assert!(h1.seconds.iter().all(|&s| s > 0.0));
        let (pred, _) = predict(&m1, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 40.0;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn frozen_embeddings_stay_fixed() {
        let (x, y) = batch();
        let cfg = NeuralConfig { trainable_embeddings: false, ..small(Arch::Lstm) };
        let mut m = build_model(&cfg, 3, 8).unwrap();
        let before = m.store.value(m.net.embedding).clone();
        train(&mut m, &x, &y, None).unwrap();
        assert_eq!(m.store.value(m.net.embedding), &before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, _) = batch();
        let model = build_model(&small(Arch::WordCnn), 3, 8).unwrap();
        let stem = dir.path().join("cnn");
        save_model(&model, &stem).unwrap();
        let back = load_model(&stem).unwrap();
        assert_eq!(predict(&back, &x).unwrap(), predict(&model, &x).unwrap());
    }

    #[test]
    fn validation_split_is_seeded_partition() {
        let (tr, va) = validation_split(50, 0.1, 3);
        assert_eq!(va.len(), 5);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(validation_split(50, 0.1, 3), (tr, va));
        assert_eq!(validation_split(1, 0.5, 0).1.len(), 0);
    }
}
