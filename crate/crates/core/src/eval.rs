//! Cross-validation harness: stratified fold plans, the metric suite,
//! per-fold experiment runs with aggregation, hyperparameter sweeps,
//! disagreement reports and tabular summaries.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classic::{self, Kernel, MajorityModel, SvmParams};
use crate::corpus::{Dataset, Task};
use crate::embeddings::{self, CbowParams};
use crate::error::{Error, Result};
use crate::neural::{self, Arch, EmbeddingInit, NeuralConfig, TrainHistory};
use crate::transformer::{self, EncoderConfig};
use crate::util::{mean_std, rng_for};
use crate::vectorizer::{self, CharAlphabet, SparseMatrix, Vocabulary};

/// Assignment of every record to one of `k` test folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub fold_assignment: Vec<usize>,
}

impl FoldPlan {
    /// Stratified plan over a dataset's labels; errors name the class.
    pub fn for_dataset(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
        let names = dataset.class_names();
        stratified_kfold(&dataset.label_indices(), k, seed).map_err(|e| match e {
            Error::Domain(msg) => {
                let mut msg = msg;
                for (i, name) in names.iter().enumerate() {
                    msg = msg.replace(&format!("class {i} "), &format!("class `{name}` "));
                }
                Error::Domain(msg)
            }
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.fold_assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_assignment.is_empty()
    }

    /// Record indices of test fold `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_assignment[i] == fold).collect()
    }

    /// Record indices outside test fold `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_assignment[i] != fold).collect()
    }
}

/// Shuffles each class by `seed` and deals it round-robin to the folds.
/// Each class starts where the previous one stopped, so fold sizes stay
/// within one record of each other as well.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::domain(format!("k must be at least 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < k {
            return Err(Error::domain(format!(
                "class {c} has {} records, fewer than k = {k}",
                m.len()
            )));
        }
    }
    let mut assignment = vec![0; labels.len()];
    let mut dealt = 0;
    for (c, mut m) in members.into_iter().enumerate() {
        m.shuffle(&mut rng_for(seed, c as u64));
        for (j, &i) in m.iter().enumerate() {
            assignment[i] = (dealt + j) % k;
        }
        dealt += m.len();
    }
    Ok(FoldPlan {
        k,
        seed,
        fold_assignment: assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// In class order.
    pub per_class: Vec<ClassMetrics>,
    pub f1_macro: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class, accuracy and the
/// unweighted F1 mean. Zero denominators give 0.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], classes: &[String]) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::domain(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = classes.len();
    if n == 0 {
        return Err(Error::domain("class list is empty"));
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n || p >= n {
            return Err(Error::domain(format!("label {} outside {n} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: classes[c].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let trace: usize = (0..n).map(|c| confusion[c][c]).sum();
    let f1_macro = per_class.iter().map(|m| m.f1).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        accuracy: ratio(trace, y_true.len()),
        per_class,
        f1_macro,
        confusion,
    })
}

/// Where a neural model's word vectors come from. They are built per fold
/// from the fold's training vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Word2vec-style text file; missing words get random vectors.
    Pretrained { path: PathBuf, dim: usize },
    /// CBOW vectors trained on the fold's training documents.
    Cbow {
        #[serde(default)]
        params: CbowParams,
    },
}

fn default_alpha() -> f64 {
    1.0
}

fn default_k() -> usize {
    5
}

/// A classifier together with its full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Majority,
    NaiveBayes {
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Fit on TF-IDF weights instead of raw counts.
        #[serde(default)]
        on_tfidf: bool,
    },
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    Svm {
        #[serde(default)]
        params: SvmParams,
    },
    Neural {
        #[serde(default)]
        config: NeuralConfig,
        /// Overrides `config.embedding` for word-level architectures.
        #[serde(default)]
        embeddings: Option<EmbeddingSource>,
    },
    Transformer {
        #[serde(default)]
        config: EncoderConfig,
    },
}

impl ModelSpec {
    pub fn id(&self) -> String {
        match self {
            ModelSpec::Majority => "majority".into(),
            ModelSpec::NaiveBayes { on_tfidf: false, .. } => "naive_bayes".into(),
            ModelSpec::NaiveBayes { on_tfidf: true, .. } => "naive_bayes_tfidf".into(),
            ModelSpec::Knn { .. } => "knn".into(),
            ModelSpec::Svm { params } => match params.kernel {
                Kernel::Linear => "svm_linear".into(),
                Kernel::Rbf { .. } => "svm_rbf".into(),
                Kernel::Poly { .. } => "svm_poly".into(),
            },
            ModelSpec::Neural { config, .. } => match config.arch {
                Arch::WordCnn => "word_cnn".into(),
                Arch::CharCnn => "char_cnn".into(),
                Arch::Lstm => "lstm".into(),
                Arch::Bilstm => "bilstm".into(),
            },
            ModelSpec::Transformer { .. } => "transformer".into(),
        }
    }

    /// Checks configuration values before any fold runs.
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Majority => Ok(()),
            ModelSpec::NaiveBayes { alpha, .. } if !(*alpha > 0.0) => {
                Err(Error::domain(format!("naive bayes alpha must be > 0, got {alpha}")))
            }
            ModelSpec::NaiveBayes { .. } => Ok(()),
            ModelSpec::Knn { k: 0 } => Err(Error::domain("knn k must be at least 1")),
            ModelSpec::Knn { .. } => Ok(()),
            ModelSpec::Svm { params } if !(params.lambda > 0.0) || params.epochs == 0 => {
                Err(Error::domain("svm lambda must be > 0 and epochs at least 1"))
            }
            ModelSpec::Svm { .. } => Ok(()),
            ModelSpec::Neural { config, .. } => config.validate(),
            ModelSpec::Transformer { config } => config.validate(),
        }
    }

    fn is_trained_per_epoch(&self) -> bool {
        matches!(self, ModelSpec::Neural { .. } | ModelSpec::Transformer { .. })
    }

    /// Copy with `param` set to `value`; only neural and transformer
    /// models have these parameters.
    pub fn with_param(&self, param: SweepParam, value: usize) -> Result<ModelSpec> {
        let mut spec = self.clone();
        match (&mut spec, param) {
            (ModelSpec::Neural { config, .. }, SweepParam::Maxlen) => config.maxlen = value,
            (ModelSpec::Neural { config, .. }, SweepParam::Epochs) => config.epochs = value,
            (ModelSpec::Transformer { config }, SweepParam::Maxlen) => config.maxlen = value,
            (ModelSpec::Transformer { config }, SweepParam::Epochs) => config.epochs = value,
            _ => {
                return Err(Error::domain(format!(
                    "model `{}` has no {param} parameter",
                    self.id()
                )))
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Outcome of one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricsReport,
    /// Record indices of the test fold, ascending.
    pub test_indices: Vec<usize>,
    /// Predicted class index per test record.
    pub predictions: Vec<usize>,
    /// Per-epoch curves of neural and transformer models.
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model_id: String,
    pub task: Task,
    pub classes: Vec<String>,
    pub spec: ModelSpec,
    pub fold_plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_macro_mean: f64,
    pub f1_macro_std: f64,
    /// Confusion counts summed over folds.
    pub confusion_total: Vec<Vec<usize>>,
    /// Mean wall-clock seconds of a training epoch.
    pub seconds_per_epoch: Option<f64>,
}

impl ExperimentResult {
    /// JSON of everything except wall-clock fields.
    pub fn metrics_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        strip_timing(&mut value);
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<ExperimentResult> {
        Ok(serde_json::from_str(json)?)
    }

    /// Prediction per record index, taken from the fold that held it out.
    pub fn record_predictions(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.fold_plan.len()];
        for f in &self.folds {
            for (&i, &p) in f.test_indices.iter().zip(&f.predictions) {
                out[i] = Some(p);
            }
        }
        out
    }
}

fn strip_timing(value: &mut serde_json::Value) {
    if let Some(obj) = value.as_object_mut() {
        obj.remove("seconds_per_epoch");
        if let Some(folds) = obj.get_mut("folds").and_then(|f| f.as_array_mut()) {
            for fold in folds {
                if let Some(h) = fold.get_mut("history").and_then(|h| h.as_object_mut()) {
                    h.remove("seconds");
                }
            }
        }
    }
}

struct FoldData<'a> {
    docs: &'a [Vec<String>],
    texts: &'a [String],
    labels: &'a [usize],
    n_classes: usize,
}

/// Vocabulary built from the fold's training documents only.
pub fn fold_vocabulary(docs: &[Vec<String>], plan: &FoldPlan, fold: usize) -> Result<Vocabulary> {
    let train: Vec<&Vec<String>> = plan.train_indices(fold).into_iter().map(|i| &docs[i]).collect();
    vectorizer::build_vocabulary(&train, 1, None)
}

/// Training and test feature matrices of one fold; TF-IDF unless `counts`.
pub fn fold_features(docs: &[Vec<String>], plan: &FoldPlan, fold: usize, counts: bool) -> Result<(Vocabulary, SparseMatrix, SparseMatrix)> {
    let vocab = fold_vocabulary(docs, plan, fold)?;
    let pick = |idx: Vec<usize>| -> Vec<&Vec<String>> { idx.into_iter().map(|i| &docs[i]).collect() };
    let (train, test) = (pick(plan.train_indices(fold)), pick(plan.test_indices(fold)));
    let transform = |d: &[&Vec<String>]| {
        if counts {
            vectorizer::count_transform(&vocab, d)
        } else {
            vectorizer::tfidf_transform(&vocab, d)
        }
    };
    let (xtr, xte) = (transform(&train), transform(&test));
    Ok((vocab, xtr, xte))
}

fn run_fold(data: &FoldData, spec: &ModelSpec, plan: &FoldPlan, fold: usize, classes: &[String]) -> Result<FoldResult> {
    let train_idx = plan.train_indices(fold);
    let test_idx = plan.test_indices(fold);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::domain("fold has an empty training or test portion"));
    }
    let ytr: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let yte: Vec<usize> = test_idx.iter().map(|&i| data.labels[i]).collect();
    let n = data.n_classes;
    let mut history = None;
    let predictions = match spec {
        ModelSpec::Majority => MajorityModel::fit(&ytr, n)?.predict(test_idx.len()),
        ModelSpec::NaiveBayes { alpha, on_tfidf } => {
            let (_, xtr, xte) = fold_features(data.docs, plan, fold, !on_tfidf)?;
            classic::nb_predict(&classic::nb_fit(&xtr, &ytr, n, *alpha)?, &xte)
        }
        ModelSpec::Knn { k } => {
            let (_, xtr, xte) = fold_features(data.docs, plan, fold, false)?;
            classic::knn_predict(&classic::knn_fit(&xtr, &ytr, n, *k)?, &xte)?
        }
        ModelSpec::Svm { params } => {
            let (_, xtr, xte) = fold_features(data.docs, plan, fold, false)?;
            classic::svm_predict(&classic::svm_fit(&xtr, &ytr, n, params)?, &xte)?
        }
        ModelSpec::Neural { config, embeddings } => {
            let mut config = config.clone();
            let (x, vocab_size) = if config.arch == Arch::CharCnn {
                let alphabet = CharAlphabet::default();
                (vectorizer::encode_chars(data.texts, &alphabet, config.maxlen)?, alphabet.len())
            } else {
                let vocab = fold_vocabulary(data.docs, plan, fold)?;
                match embeddings {
                    Some(EmbeddingSource::Pretrained { path, dim }) => {
                        let file = BufReader::new(File::open(path)?);
                        let table = embeddings::load_pretrained(file, &vocab, *dim, config.seed)?;
                        config.embedding = EmbeddingInit::Pretrained { table };
                    }
                    Some(EmbeddingSource::Cbow { params }) => {
                        let train: Vec<&Vec<String>> = train_idx.iter().map(|&i| &data.docs[i]).collect();
                        let table = embeddings::cbow_train(&train, &vocab, params)?;
                        config.embedding = EmbeddingInit::Pretrained { table };
                    }
                    None => {}
                }
                (vectorizer::encode_sequences(&vocab, data.docs, config.maxlen)?, vocab.len())
            };
            let (fit_rows, val_rows) = neural::validation_split(train_idx.len(), config.val_fraction, config.seed);
            let fit_idx: Vec<usize> = fit_rows.iter().map(|&r| train_idx[r]).collect();
            let val_idx: Vec<usize> = val_rows.iter().map(|&r| train_idx[r]).collect();
            let y_of = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| data.labels[i]).collect() };
            let mut model = neural::build_model(&config, n, vocab_size)?;
            let (xv, yv) = (x.select_rows(&val_idx), y_of(&val_idx));
            let val = (!val_idx.is_empty()).then_some((&xv, yv.as_slice()));
            history = Some(neural::train(&mut model, &x.select_rows(&fit_idx), &y_of(&fit_idx), val)?);
            neural::predict(&model, &x.select_rows(&test_idx))?.0
        }
        ModelSpec::Transformer { config } => {
            let train: Vec<&Vec<String>> = train_idx.iter().map(|&i| &data.docs[i]).collect();
            let vocab = transformer::train_subword_vocab(&train, config.subword_vocab_size)?;
            let enc = transformer::encode_batch(&vocab, data.docs, config.maxlen)?;
            let mut model = transformer::build_model(config, n, vocab.len())?;
            history = Some(transformer::fine_tune(&mut model, &enc.select_rows(&train_idx), &ytr, None)?);
            transformer::cls_classify(&model, &enc.select_rows(&test_idx))?.0
        }
    };
    Ok(FoldResult {
        fold,
        metrics: compute_metrics(&yte, &predictions, classes)?,
        test_indices: test_idx,
        predictions,
        history,
    })
}

/// Runs every fold of `plan`: features and vocabularies are re-fit on the
/// training portion, the held-out fold is predicted and scored.
pub fn run_experiment(dataset: &Dataset, spec: &ModelSpec, plan: &FoldPlan) -> Result<ExperimentResult> {
    run_experiment_parallel(dataset, spec, plan, 1)
}

/// [`run_experiment`] with up to `threads` folds running at once. Metric
/// fields do not depend on `threads`.
pub fn run_experiment_parallel(dataset: &Dataset, spec: &ModelSpec, plan: &FoldPlan, threads: usize) -> Result<ExperimentResult> {
    spec.validate()?;
    if plan.len() != dataset.len() {
        return Err(Error::domain(format!(
            "fold plan covers {} records but the dataset has {}",
            plan.len(),
            dataset.len()
        )));
    }
    if let Some(&bad) = plan.fold_assignment.iter().find(|&&f| f >= plan.k) {
        return Err(Error::domain(format!("fold index {bad} outside k = {}", plan.k)));
    }
    let docs = dataset.token_docs();
    let texts = dataset.clean_texts();
    let labels = dataset.label_indices();
    let classes = dataset.class_names();
    let data = FoldData {
        docs: &docs,
        texts: &texts,
        labels: &labels,
        n_classes: dataset.n_classes(),
    };
    let folds = map_folds(plan.k, threads, |fold| {
        run_fold(&data, spec, plan, fold, &classes).map_err(|e| e.in_fold(fold))
    })?;

    let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let f1: Vec<f64> = folds.iter().map(|f| f.metrics.f1_macro).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (f1_macro_mean, f1_macro_std) = mean_std(&f1);
    let nc = classes.len();
    let mut confusion_total = vec![vec![0; nc]; nc];
    for f in &folds {
        for (r, row) in f.metrics.confusion.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                confusion_total[r][c] += v;
            }
        }
    }
    let seconds_per_epoch = spec.is_trained_per_epoch().then(|| {
        let per_fold: Vec<f64> = folds
            .iter()
            .filter_map(|f| f.history.as_ref().map(TrainHistory::mean_seconds_per_epoch))
            .collect();
        mean_std(&per_fold).0
    });
    Ok(ExperimentResult {
        model_id: spec.id(),
        task: dataset.task,
        classes,
        spec: spec.clone(),
        fold_plan: plan.clone(),
        folds,
        accuracy_mean,
        accuracy_std,
        f1_macro_mean,
        f1_macro_std,
        confusion_total,
        seconds_per_epoch,
    })
}

/// Applies `f` to `0..k` on up to `threads` workers; results come back in
/// fold order and the first failing fold's error wins.
fn map_folds<T: Send>(k: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 {
        return (0..k).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..k).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(k) {
            s.spawn(|| loop {
                let fold = next.fetch_add(1, Ordering::SeqCst);
                if fold >= k {
                    break;
                }
                let r = f(fold);
                slots.lock().expect("fold results lock")[fold] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("fold results lock")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Maxlen,
    Epochs,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Maxlen => "maxlen",
            SweepParam::Epochs => "epochs",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxlen" => Ok(SweepParam::Maxlen),
            "epochs" => Ok(SweepParam::Epochs),
            other => Err(Error::domain(format!("unknown sweep parameter `{other}` (maxlen or epochs)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub results: Vec<ExperimentResult>,
}

/// One experiment per value, all on the same fold plan.
pub fn sweep(dataset: &Dataset, spec: &ModelSpec, plan: &FoldPlan, param: SweepParam, values: &[usize], threads: usize) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::domain("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(format!("sweep values must be strictly increasing: {values:?}")));
    }
    let results = values
        .iter()
        .map(|&v| run_experiment_parallel(dataset, &spec.with_param(param, v)?, plan, threads))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        param,
        values: values.to_vec(),
        results,
    })
}

impl SweepResult {
    /// Columns: value, accuracy, std, f1_macro, std, seconds_per_epoch.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            self.param.to_string().as_str(),
            "accuracy",
            "accuracy_std",
            "f1_macro",
            "f1_macro_std",
            "seconds_per_epoch",
        ])?;
        for (v, r) in self.values.iter().zip(&self.results) {
            w.write_record([
                v.to_string(),
                r.accuracy_mean.to_string(),
                r.accuracy_std.to_string(),
                r.f1_macro_mean.to_string(),
                r.f1_macro_std.to_string(),
                r.seconds_per_epoch.map_or(String::new(), |s| s.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub fold: usize,
    pub index: usize,
    pub review_id: String,
    pub excerpt: String,
    pub true_label: String,
    pub pred_a: String,
    pub pred_b: String,
}

/// Records on which two results predicted differently, by fold then
/// record index, with the text cut to `excerpt_chars` characters.
pub fn disagreement_report(a: &ExperimentResult, b: &ExperimentResult, dataset: &Dataset, excerpt_chars: usize) -> Result<Vec<Disagreement>> {
    if a.fold_plan != b.fold_plan {
        return Err(Error::domain("results were produced on different fold plans"));
    }
    if a.fold_plan.len() != dataset.len() {
        return Err(Error::domain(format!(
            "results cover {} records but the dataset has {}",
            a.fold_plan.len(),
            dataset.len()
        )));
    }
    let classes = dataset.class_names();
    let name = |c: usize| classes.get(c).cloned().unwrap_or_else(|| c.to_string());
    let (pa, pb) = (a.record_predictions(), b.record_predictions());
    let labels = dataset.label_indices();
    let mut out = Vec::new();
    for fold in 0..a.fold_plan.k {
        for i in a.fold_plan.test_indices(fold) {
            let (Some(x), Some(y)) = (pa[i], pb[i]) else {
                return Err(Error::domain(format!("record {i} has no prediction")));
            };
            if x != y {
                let review = &dataset.reviews[i];
                out.push(Disagreement {
                    fold,
                    index: i,
                    review_id: review.id.clone(),
                    excerpt: review.raw_text.chars().take(excerpt_chars).collect(),
                    true_label: name(labels[i]),
                    pred_a: name(x),
                    pred_b: name(y),
                });
            }
        }
    }
    Ok(out)
}

/// Plain-text listing of a disagreement report.
pub fn write_disagreements<W: Write>(report: &[Disagreement], model_a: &str, model_b: &str, mut out: W) -> Result<()> {
    writeln!(out, "{} disagreements between {model_a} and {model_b}", report.len())?;
    for d in report {
        writeln!(out)?;
        writeln!(out, "[fold {}] {} (record {})", d.fold, d.review_id, d.index)?;
        writeln!(out, "true: {}  {model_a}: {}  {model_b}: {}", d.true_label, d.pred_a, d.pred_b)?;
        writeln!(out, "  {}", d.excerpt)?;
    }
    Ok(())
}

/// Summary table: model, accuracy mean and std, F1-macro mean and std.
pub fn write_summary_csv<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "accuracy", "accuracy_std", "f1_macro", "f1_macro_std", "seconds_per_epoch"])?;
    for r in results {
        w.write_record([
            r.model_id.clone(),
            r.accuracy_mean.to_string(),
            r.accuracy_std.to_string(),
            r.f1_macro_mean.to_string(),
            r.f1_macro_std.to_string(),
            r.seconds_per_epoch.map_or(String::new(), |s| s.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary_markdown(results: &[ExperimentResult]) -> String {
    let mut s = String::from("| Model | Accuracy | F1-macro | Sec/epoch |\n|---|---|---|---|\n");
    for r in results {
        let secs = r.seconds_per_epoch.map_or("-".to_string(), |v| format!("{v:.2}"));
        s.push_str(&format!(
            "| {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {} |\n",
            r.model_id, r.accuracy_mean, r.accuracy_std, r.f1_macro_mean, r.f1_macro_std, secs
        ));
    }
    s
}

/// Confusion counts summed over folds as a Markdown table.
pub fn confusion_markdown(result: &ExperimentResult) -> String {
    let mut s = format!("| true \\ predicted | {} |\n", result.classes.join(" | "));
    s.push_str(&format!("|---|{}\n", "---|".repeat(result.classes.len())));
    for (name, row) in result.classes.iter().zip(&result.confusion_total) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn per_fold_counts(plan: &FoldPlan, labels: &[usize], c: usize) -> Vec<usize> {
        (0..plan.k)
            .map(|f| plan.test_indices(f).iter().filter(|&&i| labels[i] == c).count())
            .collect()
    }

    #[test]
    fn balanced_classes_split_evenly() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let plan = stratified_kfold(&labels, 5, 3).unwrap();
        for c in 0..2 {
            assert_eq!(per_fold_counts(&plan, &labels, c), vec![1; 5]);
        }
    }

    #[test]
    fn seven_three_split_in_three_folds() {
        let labels = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let plan = stratified_kfold(&labels, 3, 0).unwrap();
        let mut a = per_fold_counts(&plan, &labels, 0);
        a.sort_unstable();
        assert_eq!(a, vec![2, 2, 3]);
        assert_eq!(per_fold_counts(&plan, &labels, 1), vec![1, 1, 1]);
        let mut sizes: Vec<usize> = (0..3).map(|f| plan.test_indices(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn small_class_is_named() {
        let err = stratified_kfold(&[0, 0, 0, 1, 1], 3, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
        let ds = synth_corpus(0, 20, &SynthSpec::sentiment(0.95)).unwrap();
        let err = FoldPlan::for_dataset(&ds, 3, 0).unwrap_err();
        assert!(err.to_string().contains("`negative`"), "{err}");
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(
            labels in prop::collection::vec(0usize..4, 12..200),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut counts = [0usize; 4];
            for &l in &labels {
                counts[l] += 1;
            }
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let plan = stratified_kfold(&labels, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in 0..k {
                for i in plan.test_indices(f) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            for c in 0..4 {
                let share = counts[c] as f64 / k as f64;
                for n in per_fold_counts(&plan, &labels, c) {
                    prop_assert!((n as f64 - share).abs() < 1.0);
                }
            }
        }

        #[test]
        fn accuracy_is_trace_over_total(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..300),
        ) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = compute_metrics(&t, &p, &names(3)).unwrap();
            let trace: usize = (0..3).map(|c| m.confusion[c][c]).sum();
            prop_assert_eq!(m.accuracy, trace as f64 / t.len() as f64);
            let mean = m.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
            prop_assert_eq!(m.f1_macro, mean);
            for c in &m.per_class {
                prop_assert!((0.0..=1.0).contains(&c.f1));
            }
        }
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 1, 0, 1], &names(2)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        for c in &m.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (0.5, 0.5, 0.5));
        }
        assert_eq!(m.f1_macro, 0.5);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![1, 1]]);

        let m = compute_metrics(&[0, 1, 2], &[0, 1, 1], &names(3)).unwrap();
        assert_eq!(m.per_class[2].precision, 0.0);
        assert_eq!(m.per_class[2].f1, 0.0);

        let m = compute_metrics(&[2, 0, 1], &[2, 0, 1], &names(3)).unwrap();
        assert_eq!((m.accuracy, m.f1_macro), (1.0, 1.0));
        assert!(compute_metrics(&[0], &[0, 1], &names(2)).is_err());
    }

    fn imbalanced() -> Dataset {
        synth_corpus(1, 200, &SynthSpec::sentiment(0.9)).unwrap()
    }

    #[test]
    fn majority_dummy_on_ninety_ten() {
        let ds = imbalanced();
        let plan = FoldPlan::for_dataset(&ds, 5, 0).unwrap();
        let r = run_experiment(&ds, &ModelSpec::Majority, &plan).unwrap();
        assert!((r.accuracy_mean - 0.9).abs() < 1e-12);
        // f1 of the majority class is 2 * 0.9 / 1.9; the minority scores 0.
        assert!((r.f1_macro_mean - 0.9 / 1.9).abs() < 1e-12);
        assert!(r.seconds_per_epoch.is_none());
        assert_eq!(r.folds.len(), 5);
    }

    #[test]
    fn linear_svm_learns_separable_corpus() {
        let ds = synth_corpus(2, 300, &SynthSpec::sentiment(0.5)).unwrap();
        let plan = FoldPlan::for_dataset(&ds, 5, 1).unwrap();
        let r = run_experiment(&ds, &ModelSpec::Svm { params: SvmParams::default() }, &plan).unwrap();
        assert!(r.accuracy_mean >= 0.95, "{}", r.accuracy_mean);
    }

    #[test]
    fn parallel_and_repeated_runs_agree() {
        let ds = synth_corpus(3, 120, &SynthSpec::topic([0.25; 4])).unwrap();
        let plan = FoldPlan::for_dataset(&ds, 4, 9).unwrap();
        let spec = ModelSpec::Knn { k: 3 };
        let a = run_experiment(&ds, &spec, &plan).unwrap();
        let b = run_experiment_parallel(&ds, &spec, &plan, 3).unwrap();
        assert_eq!(a.metrics_json().unwrap(), b.metrics_json().unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_json_drops_timing() {
        let ds = synth_corpus(4, 40, &SynthSpec::sentiment(0.5)).unwrap();
        let plan = FoldPlan::for_dataset(&ds, 2, 0).unwrap();
        let spec = ModelSpec::Neural {
            config: NeuralConfig {
                embedding: EmbeddingInit::Random { dim: 8 },
                n_filters: 4,
                epochs: 1,
                maxlen: 20,
                ..NeuralConfig::default()
            },
            embeddings: None,
        };
        let r = run_experiment(&ds, &spec, &plan).unwrap();
        assert!(r.seconds_per_epoch.unwrap() > 0.0);
        let json = r.metrics_json().unwrap();
        assert!(!json.contains("seconds"));
        assert!(json.contains("train_loss"));
    }

    #[test]
    fn features_ignore_test_documents() {
        let ds = synth_corpus(5, 60, &SynthSpec::sentiment(0.5)).unwrap();
        let plan = FoldPlan::for_dataset(&ds, 3, 2).unwrap();
        let docs = ds.token_docs();
        let (vocab, xtr, _) = fold_features(&docs, &plan, 0, false).unwrap();
        let mut edited = docs.clone();
        for i in plan.test_indices(0) {
            edited[i] = vec!["leak".to_string(); 5];
        }
        let (v2, x2, _) = fold_features(&edited, &plan, 0, false).unwrap();
        assert_eq!(vocab, v2);
        assert_eq!(xtr, x2);
        assert!(vocab.get("leak").is_none());
    }

    #[test]
    fn sweep_rules() {
        let ds = imbalanced();
        let plan = FoldPlan::for_dataset(&ds, 5, 0).unwrap();
        let spec = ModelSpec::Transformer { config: EncoderConfig::default() };
        assert!(sweep(&ds, &spec, &plan, SweepParam::Maxlen, &[], 1).is_err());
        assert!(sweep(&ds, &spec, &plan, SweepParam::Maxlen, &[50, 50], 1).is_err());
        assert!(sweep(&ds, &ModelSpec::Majority, &plan, SweepParam::Epochs, &[1], 1).is_err());
        assert_eq!("epochs".parse::<SweepParam>().unwrap(), SweepParam::Epochs);
    }

    #[test]
    fn disagreements_follow_fold_order() {
        let ds = synth_corpus(6, 40, &SynthSpec::sentiment(0.5)).unwrap();
        let plan = FoldPlan::for_dataset(&ds, 4, 0).unwrap();
        let a = run_experiment(&ds, &ModelSpec::Majority, &plan).unwrap();
        assert!(disagreement_report(&a, &a, &ds, 20).unwrap().is_empty());

        let mut b = a.clone();
        for f in &mut b.folds {
            for p in &mut f.predictions {
                *p = 1 - *p;
            }
        }
        let report = disagreement_report(&a, &b, &ds, 10).unwrap();
        assert_eq!(report.len(), ds.len());
        assert!(report.windows(2).all(|w| (w[0].fold, w[0].index) < (w[1].fold, w[1].index)));
        assert!(report.iter().all(|d| d.excerpt.chars().count() <= 10));

        let other = run_experiment(&ds, &ModelSpec::Majority, &FoldPlan::for_dataset(&ds, 4, 1).unwrap()).unwrap();
        assert!(disagreement_report(&a, &other, &ds, 10).is_err());
    }

    #[test]
    fn tables_and_spec_json() {
        let ds = imbalanced();
        let plan = FoldPlan::for_dataset(&ds, 5, 0).unwrap();
        let r = run_experiment(&ds, &ModelSpec::Majority, &plan).unwrap();
        let mut csv = Vec::new();
        write_summary_csv(std::slice::from_ref(&r), &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("model,accuracy,accuracy_std,f1_macro,f1_macro_std"));
        assert!(summary_markdown(std::slice::from_ref(&r)).contains("| majority | 0.900 ± 0.000 |"));
        assert!(confusion_markdown(&r).contains("| positive | 180 | 0 |"));
        assert_eq!(ExperimentResult::from_json(&r.to_json().unwrap()).unwrap(), r);

        let spec: ModelSpec = serde_json::from_str(r#"{"type":"svm","params":{"kernel":{"type":"rbf","gamma":null}}}"#).unwrap();
        assert_eq!(spec.id(), "svm_rbf");
        let spec: ModelSpec = serde_json::from_str(r#"{"type":"neural","config":{"arch":"bilstm"}}"#).unwrap();
        assert_eq!(spec.id(), "bilstm");
        assert!(serde_json::from_str::<ModelSpec>(r#"{"type":"neural","config":{"arch":"gru"}}"#).is_err());
    }
}
