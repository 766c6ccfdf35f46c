//! Bag-of-words classifiers: multinomial naive Bayes, k-nearest neighbours
//! and Pegasos-trained support vector machines (linear, RBF, polynomial).
//!
//! Labels are class indices `0..n_classes` in declaration order; every
//! argmax breaks ties toward the lower index.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{argmax_first, rng_for};
use crate::vectorizer::SparseMatrix;

/// Relative tolerance under which naive Bayes posteriors count as tied.
/// Summation order differs between classes, so exact ties in real arithmetic
/// can differ in the last bits.
const NB_TIE_TOL: f64 = 1e-12;

fn check_labels(x: &SparseMatrix, y: &[usize], n_classes: usize) -> Result<()> {
    if x.n_rows != y.len() {
        return Err(Error::domain(format!(
            "{} feature rows but {} labels",
            x.n_rows,
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::domain(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    Ok(())
}

fn dot_sparse_dense(row: &[(usize, f64)], dense: &[f64]) -> f64 {
    row.iter().map(|&(c, v)| v * dense[c]).sum()
}

fn dot_sparse(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

fn sq_norm(a: &[(usize, f64)]) -> f64 {
    a.iter().map(|(_, v)| v * v).sum()
}

/// Predicts the most frequent training class. Baseline for imbalanced data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityModel {
    pub class: usize,
    pub n_classes: usize,
}

impl MajorityModel {
    pub fn fit(y: &[usize], n_classes: usize) -> Result<MajorityModel> {
        if y.is_empty() {
            return Err(Error::domain("majority model needs at least one label"));
        }
        let mut counts = vec![0usize; n_classes];
        for &c in y {
            *counts
                .get_mut(c)
                .ok_or_else(|| Error::domain(format!("label {c} outside {n_classes} classes")))? += 1;
        }
        let scores: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Ok(MajorityModel {
            class: argmax_first(&scores, 0.0),
            n_classes,
        })
    }

    pub fn predict(&self, n_rows: usize) -> Vec<usize> {
        vec![self.class; n_rows]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    pub class_log_prior: Vec<f64>,
    /// `[class][feature]` log P(token | class).
    pub token_log_likelihood: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Multinomial naive Bayes with additive (Lidstone) smoothing. `x` holds raw
/// term counts.
pub fn nb_fit(x: &SparseMatrix, y: &[usize], n_classes: usize, alpha: f64) -> Result<NaiveBayesModel> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("smoothing alpha must be > 0, got {alpha}")));
    }
    check_labels(x, y, n_classes)?;
    let n_features = x.n_cols;
    let mut doc_counts = vec![0usize; n_classes];
    let mut token_counts = vec![vec![0.0; n_features]; n_classes];
    for (row, &c) in x.rows.iter().zip(y) {
        doc_counts[c] += 1;
        for &(col, v) in row {
            token_counts[c][col] += v;
        }
    }
    if let Some(empty) = doc_counts.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!(
            "class {empty} has no training documents"
        )));
    }
    let n = y.len() as f64;
    let class_log_prior = doc_counts.iter().map(|&d| (d as f64 / n).ln()).collect();
    let token_log_likelihood = token_counts
        .iter()
        .map(|counts| {
            let total: f64 = counts.iter().sum();
            let denom = (total + alpha * n_features as f64).ln();
            counts.iter().map(|&k| (k + alpha).ln() - denom).collect()
        })
        .collect();
    Ok(NaiveBayesModel {
        class_log_prior,
        token_log_likelihood,
        alpha,
    })
}

impl NaiveBayesModel {
    pub fn n_classes(&self) -> usize {
        self.class_log_prior.len()
    }

    /// Unnormalized log posteriors, one per class.
    pub fn log_scores(&self, row: &[(usize, f64)]) -> Vec<f64> {
        self.class_log_prior
            .iter()
            .zip(&self.token_log_likelihood)
            .map(|(prior, ll)| prior + dot_sparse_dense(row, ll))
            .collect()
    }
}

pub fn nb_predict(model: &NaiveBayesModel, x: &SparseMatrix) -> Vec<usize> {
    x.rows
        .iter()
        .map(|row| argmax_first(&model.log_scores(row), NB_TIE_TOL))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub train: SparseMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub k: usize,
}

/// Stores the training rows, L2-normalized.
pub fn knn_fit(x: &SparseMatrix, y: &[usize], n_classes: usize, k: usize) -> Result<KnnModel> {
    check_labels(x, y, n_classes)?;
    if k == 0 || k > x.n_rows {
        return Err(Error::domain(format!(
            "k = {k} must be in 1..={} (training rows)",
            x.n_rows
        )));
    }
    let mut train = x.clone();
    train.l2_normalize();
    Ok(KnnModel {
        train,
        labels: y.to_vec(),
        n_classes,
        k,
    })
}

/// Cosine-similarity k-NN. Equal similarities prefer the lower training row;
/// equal vote counts prefer the lower class.
pub fn knn_predict(model: &KnnModel, x: &SparseMatrix) -> Result<Vec<usize>> {
    if model.k > model.train.n_rows {
        return Err(Error::domain(format!(
            "k = {} exceeds {} training rows",
            model.k, model.train.n_rows
        )));
    }
    if x.n_cols != model.train.n_cols {
        return Err(Error::shape(
            "knn_predict",
            &[x.n_rows, x.n_cols],
            &[model.train.n_rows, model.train.n_cols],
        ));
    }
    let mut query = vec![0.0; x.n_cols];
    let mut out = Vec::with_capacity(x.n_rows);
    for row in &x.rows {
        let mut normalized = row.clone();
        let norm = sq_norm(&normalized).sqrt();
        if norm > 0.0 {
            normalized.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        for &(c, v) in &normalized {
            query[c] = v;
        }
        let mut sims: Vec<(f64, usize)> = model
            .train
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (dot_sparse_dense(r, &query), i))
            .collect();
        for &(c, _) in &normalized {
            query[c] = 0.0;
        }
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0; model.n_classes];
        for &(_, i) in sims.iter().take(model.k) {
            votes[model.labels[i]] += 1.0;
        }
        out.push(argmax_first(&votes, 0.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    /// `exp(-gamma * |a - b|^2)`; `None` means `1 / n_features`.
    Rbf { gamma: Option<f64> },
    /// `(gamma * a.b + coef0)^degree`; `None` gamma means `1 / n_features`.
    Poly {
        degree: u32,
        gamma: Option<f64>,
        coef0: f64,
    },
}

impl Kernel {
    pub fn rbf() -> Kernel {
        Kernel::Rbf { gamma: None }
    }

    pub fn poly() -> Kernel {
        Kernel::Poly {
            degree: 3,
            gamma: None,
            coef0: 1.0,
        }
    }

    /// Replaces defaulted parameters with their values for `n_features`.
    fn resolve(self, n_features: usize) -> Kernel {
        let default_gamma = 1.0 / n_features.max(1) as f64;
        match self {
            Kernel::Linear => Kernel::Linear,
            Kernel::Rbf { gamma } => Kernel::Rbf {
                gamma: Some(gamma.unwrap_or(default_gamma)),
            },
            Kernel::Poly { degree, gamma, coef0 } => Kernel::Poly {
                degree,
                gamma: Some(gamma.unwrap_or(default_gamma)),
                coef0,
            },
        }
    }

    /// Kernel value plus one; the constant absorbs the bias term.
    fn eval(&self, a: &[(usize, f64)], b: &[(usize, f64)], na: f64, nb: f64) -> f64 {
        let k = match *self {
            Kernel::Linear => dot_sparse(a, b),
            Kernel::Rbf { gamma } => {
                let d2 = (na + nb - 2.0 * dot_sparse(a, b)).max(0.0);
                (-gamma.expect("resolved") * d2).exp()
            }
            Kernel::Poly { degree, gamma, coef0 } => {
                (gamma.expect("resolved") * dot_sparse(a, b) + coef0).powi(degree as i32)
            }
        };
        k + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub kernel: Kernel,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            kernel: Kernel::Linear,
            lambda: 1e-4,
            epochs: 10,
            seed: 0,
        }
    }
}

/// One one-vs-rest scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scorer {
    /// Explicit weights; the bias is the weight of a constant feature.
    Linear { weights: Vec<f64>, bias: f64 },
    /// `score(x) = sum_j coef_j * (K(x_j, x) + 1)` over the support rows.
    Kernel { support: Vec<usize>, coef: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub lambda: f64,
    pub n_features: usize,
    pub scorers: Vec<Scorer>,
    /// Training rows referenced by kernel scorers (empty for linear).
    pub support_vectors: SparseMatrix,
    /// Regularized hinge objective at the end of each epoch, per scorer.
    pub objective_history: Vec<Vec<f64>>,
}

/// One-vs-rest SVMs trained with the Pegasos stochastic subgradient method
/// (step `1 / (lambda t)`). Each epoch visits the rows in a fresh seeded
/// permutation.
pub fn svm_fit(x: &SparseMatrix, y: &[usize], n_classes: usize, params: &SvmParams) -> Result<SvmModel> {
    if !(params.lambda > 0.0) || !params.lambda.is_finite() {
        return Err(Error::domain(format!("lambda must be > 0, got {}", params.lambda)));
    }
    if params.epochs < 1 {
        return Err(Error::domain("svm needs at least one epoch"));
    }
    check_labels(x, y, n_classes)?;
    if n_classes < 2 {
        return Err(Error::domain("svm needs at least two classes"));
    }
    for c in 0..n_classes {
        if !y.contains(&c) {
            return Err(Error::domain(format!("class {c} has no training samples")));
        }
    }
    let kernel = params.kernel.resolve(x.n_cols);
    let mut scorers = Vec::with_capacity(n_classes);
    let mut history = Vec::with_capacity(n_classes);
    match kernel {
        Kernel::Linear => {
            for c in 0..n_classes {
                let targets: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                let (scorer, hist) = pegasos_linear(x, &targets, params, c as u64);
                scorers.push(scorer);
                history.push(hist);
            }
            Ok(SvmModel {
                kernel,
                lambda: params.lambda,
                n_features: x.n_cols,
                scorers,
                support_vectors: SparseMatrix {
                    n_rows: 0,
                    n_cols: x.n_cols,
                    rows: Vec::new(),
                },
                objective_history: history,
            })
        }
        _ => {
            let gram = Gram::new(x, kernel);
            let mut used = vec![false; x.n_rows];
            let mut raw = Vec::with_capacity(n_classes);
            for c in 0..n_classes {
                let targets: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                let (coef, hist) = pegasos_kernel(&gram, &targets, params, c as u64);
                for (i, a) in coef.iter().enumerate() {
                    used[i] |= *a != 0.0;
                }
                raw.push(coef);
                history.push(hist);
            }
            // Compact support rows shared by all scorers.
            let support_rows: Vec<usize> = (0..x.n_rows).filter(|&i| used[i]).collect();
            let position: HashMap<usize, usize> =
                support_rows.iter().enumerate().map(|(p, &i)| (i, p)).collect();
            for coef in raw {
                let (support, coef): (Vec<usize>, Vec<f64>) = coef
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a != 0.0)
                    .map(|(i, a)| (position[&i], *a))
                    .unzip();
                scorers.push(Scorer::Kernel { support, coef });
            }
            Ok(SvmModel {
                kernel,
                lambda: params.lambda,
                n_features: x.n_cols,
                scorers,
                support_vectors: x.select_rows(&support_rows),
                objective_history: history,
            })
        }
    }
}

fn pegasos_linear(x: &SparseMatrix, targets: &[f64], params: &SvmParams, stream: u64) -> (Scorer, Vec<f64>) {
    let lambda = params.lambda;
    // w = scale * v keeps the shrink step O(1).
    let mut v = vec![0.0; x.n_cols];
    let mut v_bias = 0.0;
    let mut scale = 1.0;
    let mut t = 0usize;
    let mut rng = rng_for(params.seed, stream);
    let mut order: Vec<usize> = (0..x.n_rows).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let row = &x.rows[i];
            let margin = targets[i] * scale * (dot_sparse_dense(row, &v) + v_bias);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|w| *w = 0.0);
                v_bias = 0.0;
                scale = 1.0;
            } else {
                scale *= shrink;
            }
            if margin < 1.0 {
                let step = eta * targets[i] / scale;
                for &(c, val) in row {
                    v[c] += step * val;
                }
                v_bias += step;
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                v_bias *= scale;
                scale = 1.0;
            }
        }
        let w: Vec<f64> = v.iter().map(|a| a * scale).collect();
        let b = v_bias * scale;
        let hinge: f64 = x
            .rows
            .iter()
            .zip(targets)
            .map(|(r, &yt)| (1.0 - yt * (dot_sparse_dense(r, &w) + b)).max(0.0))
            .sum::<f64>()
            / x.n_rows as f64;
        let reg = 0.5 * lambda * (w.iter().map(|a| a * a).sum::<f64>() + b * b);
        history.push(reg + hinge);
    }
    let weights: Vec<f64> = v.iter().map(|a| a * scale).collect();
    (
        Scorer::Linear {
            weights,
            bias: v_bias * scale,
        },
        history,
    )
}

/// Kernel matrix (with the +1 bias constant), cached when small enough.
struct Gram<'a> {
    x: &'a SparseMatrix,
    kernel: Kernel,
    norms: Vec<f64>,
    cache: Option<Vec<f64>>,
}

const GRAM_CACHE_LIMIT: usize = 4000;

impl<'a> Gram<'a> {
    fn new(x: &'a SparseMatrix, kernel: Kernel) -> Gram<'a> {
        let norms: Vec<f64> = x.rows.iter().map(|r| sq_norm(r)).collect();
        let n = x.n_rows;
        let cache = (n <= GRAM_CACHE_LIMIT).then(|| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let k = kernel.eval(&x.rows[i], &x.rows[j], norms[i], norms[j]);
                    m[i * n + j] = k;
                    m[j * n + i] = k;
                }
            }
            m
        });
        Gram { x, kernel, norms, cache }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match &self.cache {
            Some(m) => m[i * self.x.n_rows + j],
            None => self
                .kernel
                .eval(&self.x.rows[i], &self.x.rows[j], self.norms[i], self.norms[j]),
        }
    }
}

/// Kernelized Pegasos. Returns per-row coefficients `y_i alpha_i / (lambda T)`.
fn pegasos_kernel(gram: &Gram<'_>, targets: &[f64], params: &SvmParams, stream: u64) -> (Vec<f64>, Vec<f64>) {
    let n = targets.len();
    let lambda = params.lambda;
    let mut alpha = vec![0.0f64; n];
    let mut t = 0usize;
    let mut rng = rng_for(params.seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(params.epochs);
    let decision = |alpha: &[f64], i: usize, t: usize| -> f64 {
        let s: f64 = alpha
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(j, a)| a * targets[j] * gram.get(j, i))
            .sum();
        s / (lambda * t as f64)
    };
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            if targets[i] * decision(&alpha, i, t) < 1.0 {
                alpha[i] += 1.0;
            }
        }
        let coef: Vec<f64> = alpha
            .iter()
            .zip(targets)
            .map(|(a, y)| a * y / (lambda * t as f64))
            .collect();
        let active: Vec<usize> = (0..n).filter(|&j| coef[j] != 0.0).collect();
        let mut reg = 0.0;
        for &a in &active {
            for &b in &active {
                reg += coef[a] * coef[b] * gram.get(a, b);
            }
        }
        let hinge: f64 = (0..n)
            .map(|i| {
                let f: f64 = active.iter().map(|&j| coef[j] * gram.get(j, i)).sum();
                (1.0 - targets[i] * f).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        history.push(0.5 * lambda * reg + hinge);
    }
    let coef = alpha
        .iter()
        .zip(targets)
        .map(|(a, y)| a * y / (lambda * t as f64))
        .collect();
    (coef, history)
}

impl SvmModel {
    /// Decision values of every class scorer for one row.
    pub fn scores(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let norm = sq_norm(row);
        self.scorers
            .iter()
            .map(|s| match s {
                Scorer::Linear { weights, bias } => dot_sparse_dense(row, weights) + bias,
                Scorer::Kernel { support, coef } => support
                    .iter()
                    .zip(coef)
                    .map(|(&j, c)| {
                        let sv = &self.support_vectors.rows[j];
                        c * self.kernel.eval(sv, row, sq_norm(sv), norm)
                    })
                    .sum(),
            })
            .collect()
    }

    /// Lowest end-of-epoch objective seen so far, per epoch, for scorer `c`.
    pub fn best_objective_so_far(&self, c: usize) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.objective_history[c]
            .iter()
            .map(|&o| {
                best = best.min(o);
                best
            })
            .collect()
    }
}

pub fn svm_predict(model: &SvmModel, x: &SparseMatrix) -> Result<Vec<usize>> {
    if x.n_cols != model.n_features {
        return Err(Error::shape(
            "svm_predict",
            &[x.n_rows, x.n_cols],
            &[model.n_features],
        ));
    }
    Ok(x.rows
        .iter()
        .map(|row| argmax_first(&model.scores(row), 0.0))
        .collect())
}

/// Versioned JSON container for fitted classic models. Reals are written as
/// decimal strings with 17 significant digits.
pub mod container {
    use serde::{Deserialize, Serialize};

    use super::*;

    pub const FORMAT: &str = "reviewbench-classic-model";
    pub const VERSION: u32 = 1;

    fn enc(v: f64) -> String {
        format!("{v:.16e}")
    }

    fn enc_all(v: &[f64]) -> Vec<String> {
        v.iter().map(|&x| enc(x)).collect()
    }

    fn dec(s: &str) -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::domain(format!("invalid decimal `{s}`")))
    }

    fn dec_all(v: &[String]) -> Result<Vec<f64>> {
        v.iter().map(|s| dec(s)).collect()
    }

    #[derive(Serialize, Deserialize)]
    struct Envelope {
        format: String,
        version: u32,
        model: Body,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Body {
        NaiveBayes {
            alpha: String,
            class_log_prior: Vec<String>,
            token_log_likelihood: Vec<Vec<String>>,
        },
        Svm {
            kernel: Kernel,
            lambda: String,
            n_features: usize,
            scorers: Vec<ScorerBody>,
            support_vectors: Vec<Vec<(usize, String)>>,
        },
    }

    #[derive(Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    enum ScorerBody {
        Linear { weights: Vec<String>, bias: String },
        Kernel { support: Vec<usize>, coef: Vec<String> },
    }

    fn wrap(model: Body) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Envelope {
            format: FORMAT.into(),
            version: VERSION,
            model,
        })?)
    }

    fn unwrap(json: &str) -> Result<Body> {
        let env: Envelope = serde_json::from_str(json)?;
        if env.format != FORMAT || env.version != VERSION {
            return Err(Error::domain(format!(
                "unsupported model container {} v{}",
                env.format, env.version
            )));
        }
        Ok(env.model)
    }

    pub fn nb_to_json(m: &NaiveBayesModel) -> Result<String> {
        wrap(Body::NaiveBayes {
            alpha: enc(m.alpha),
            class_log_prior: enc_all(&m.class_log_prior),
            token_log_likelihood: m.token_log_likelihood.iter().map(|r| enc_all(r)).collect(),
        })
    }

    pub fn nb_from_json(json: &str) -> Result<NaiveBayesModel> {
        match unwrap(json)? {
            Body::NaiveBayes {
                alpha,
                class_log_prior,
                token_log_likelihood,
            } => Ok(NaiveBayesModel {
                alpha: dec(&alpha)?,
                class_log_prior: dec_all(&class_log_prior)?,
                token_log_likelihood: token_log_likelihood
                    .iter()
                    .map(|r| dec_all(r))
                    .collect::<Result<_>>()?,
            }),
            Body::Svm { .. } => Err(Error::domain("container holds an svm, not naive bayes")),
        }
    }

    pub fn svm_to_json(m: &SvmModel) -> Result<String> {
        wrap(Body::Svm {
            kernel: m.kernel,
            lambda: enc(m.lambda),
            n_features: m.n_features,
            scorers: m
                .scorers
                .iter()
                .map(|s| match s {
                    Scorer::Linear { weights, bias } => ScorerBody::Linear {
                        weights: enc_all(weights),
                        bias: enc(*bias),
                    },
                    Scorer::Kernel { support, coef } => ScorerBody::Kernel {
                        support: support.clone(),
                        coef: enc_all(coef),
                    },
                })
                .collect(),
            support_vectors: m
                .support_vectors
                .rows
                .iter()
                .map(|r| r.iter().map(|&(c, v)| (c, enc(v))).collect())
                .collect(),
        })
    }

    pub fn svm_from_json(json: &str) -> Result<SvmModel> {
        match unwrap(json)? {
            Body::Svm {
                kernel,
                lambda,
                n_features,
                scorers,
                support_vectors,
            } => {
                let rows = support_vectors
                    .iter()
                    .map(|r| r.iter().map(|(c, v)| Ok((*c, dec(v)?))).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let scorers = scorers
                    .into_iter()
                    .map(|s| match s {
                        ScorerBody::Linear { weights, bias } => Ok(Scorer::Linear {
                            weights: dec_all(&weights)?,
                            bias: dec(&bias)?,
                        }),
                        ScorerBody::Kernel { support, coef } => Ok(Scorer::Kernel {
                            support,
                            coef: dec_all(&coef)?,
                        }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SvmModel {
                    kernel,
                    lambda: dec(&lambda)?,
                    n_features,
                    scorers,
                    support_vectors: SparseMatrix::new(n_features, rows)?,
                    objective_history: Vec::new(),
                })
            }
            Body::NaiveBayes { .. } => Err(Error::domain("container holds naive bayes, not an svm")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> SparseMatrix {
        SparseMatrix::from_dense(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn nb_priors_and_likelihoods() {
        // Features: 0 = good, 1 = bad.
        let x = dense(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let m = nb_fit(&x, &[0, 0, 1, 1], 2, 1.0).unwrap();
        assert!((m.class_log_prior[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((m.class_log_prior[1] - 0.5f64.ln()).abs() < 1e-12);

        let x = dense(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = nb_fit(&x, &[0, 1], 2, 1.0).unwrap();
        assert!((m.token_log_likelihood[0][0].exp() - 2.0 / 3.0).abs() < 1e-12);
        for ll in &m.token_log_likelihood {
            let total: f64 = ll.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert_eq!(nb_predict(&m, &dense(&[&[1.0, 0.0]])), vec![0]);
        assert_eq!(nb_predict(&m, &dense(&[&[0.0, 1.0]])), vec![1]);
        // Equal posteriors fall back to declaration order.
        assert_eq!(nb_predict(&m, &dense(&[&[1.0, 1.0]])), vec![0]);
    }

    #[test]
    fn nb_empty_row_uses_priors() {
        let x = dense(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 2.0]]);
        let m = nb_fit(&x, &[0, 1, 1], 2, 1.0).unwrap();
        let empty = SparseMatrix::new(2, vec![vec![]]).unwrap();
        assert_eq!(nb_predict(&m, &empty), vec![1]);
    }

    #[test]
    fn nb_errors() {
        let x = dense(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(nb_fit(&x, &[0, 1], 2, 0.0).is_err());
        assert!(nb_fit(&x, &[0, 0], 2, 1.0).is_err());
        assert!(nb_fit(&x, &[0], 2, 1.0).is_err());
    }

    #[test]
    fn knn_examples() {
        let x = dense(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let m = knn_fit(&x, &[0, 1, 1], 2, 3).unwrap();
        assert_eq!(knn_predict(&m, &dense(&[&[0.0, 1.0]])).unwrap(), vec![1]);

        let m1 = knn_fit(&x, &[0, 1, 1], 2, 1).unwrap();
        assert_eq!(knn_predict(&m1, &dense(&[&[1.0, 0.0]])).unwrap(), vec![0]);
        assert_eq!(knn_predict(&m1, &dense(&[&[0.6, 0.8]])).unwrap(), vec![1]);

        // k = all rows gives the global majority.
        assert_eq!(knn_predict(&m, &dense(&[&[1.0, 0.0]])).unwrap(), vec![1]);
        assert!(knn_fit(&x, &[0, 1, 1], 2, 4).is_err());
    }

    #[test]
    fn knn_vote_ties_prefer_first_class() {
        let x = dense(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = knn_fit(&x, &[1, 0], 2, 2).unwrap();
        assert_eq!(knn_predict(&m, &dense(&[&[1.0, 0.0]])).unwrap(), vec![0]);
    }

    fn separable() -> (SparseMatrix, Vec<usize>) {
        // Separator x0 + x1 = 0, functional margin 1 for every point.
        (
            dense(&[&[1.0, 1.0], &[2.0, 0.5], &[-1.0, -1.0], &[-0.5, -2.0]]),
            vec![0, 0, 1, 1],
        )
    }

    fn xor() -> (SparseMatrix, Vec<usize>) {
        (
            dense(&[&[1.0, 1.0], &[-1.0, -1.0], &[1.0, -1.0], &[-1.0, 1.0]]),
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn linear_svm_separates_toy_set() {
        let (x, y) = separable();
        let params = SvmParams {
            lambda: 0.01,
            epochs: 50,
            ..SvmParams::default()
        };
        let m = svm_fit(&x, &y, 2, &params).unwrap();
        assert_eq!(svm_predict(&m, &x).unwrap(), y);
        for c in 0..2 {
            let best = m.best_objective_so_far(c);
            assert!(best.iter().all(|o| o.is_finite()));
            assert!(best.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn linear_svm_cannot_solve_xor() {
        let (x, y) = xor();
        let m = svm_fit(&x, &y, 2, &SvmParams { lambda: 0.01, epochs: 100, ..Default::default() }).unwrap();
        let pred = svm_predict(&m, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 4.0;
        assert!(acc <= 0.75);
    }

    #[test]
    fn rbf_svm_solves_xor() {
        let (x, y) = xor();
        let params = SvmParams {
            kernel: Kernel::Rbf { gamma: Some(1.0) },
            lambda: 0.01,
            epochs: 100,
            seed: 3,
        };
        let m = svm_fit(&x, &y, 2, &params).unwrap();
        assert_eq!(svm_predict(&m, &x).unwrap(), y);
    }

    #[test]
    fn poly_svm_fits_xor() {
        let (x, y) = xor();
        let params = SvmParams {
            kernel: Kernel::Poly { degree: 2, gamma: Some(1.0), coef0: 1.0 },
            lambda: 0.01,
            epochs: 100,
            seed: 1,
        };
        let m = svm_fit(&x, &y, 2, &params).unwrap();
        assert_eq!(svm_predict(&m, &x).unwrap(), y);
    }

    #[test]
    fn svm_errors_and_determinism() {
        let (x, y) = separable();
        assert!(svm_fit(&x, &y, 2, &SvmParams { lambda: 0.0, ..Default::default() }).is_err());
        assert!(svm_fit(&x, &y, 2, &SvmParams { epochs: 0, ..Default::default() }).is_err());
        assert!(svm_fit(&x, &[0, 0, 0, 0], 2, &SvmParams::default()).is_err());
        let a = svm_fit(&x, &y, 2, &SvmParams::default()).unwrap();
        let b = svm_fit(&x, &y, 2, &SvmParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svm_constant_prediction_when_one_scorer_dominates() {
        let (x, _) = separable();
        let m = SvmModel {
            kernel: Kernel::Linear,
            lambda: 1.0,
            n_features: 2,
            scorers: vec![
                Scorer::Linear { weights: vec![0.0, 0.0], bias: -1.0 },
                Scorer::Linear { weights: vec![0.0, 0.0], bias: 5.0 },
                Scorer::Linear { weights: vec![0.0, 0.0], bias: 0.0 },
            ],
            support_vectors: SparseMatrix::new(2, vec![]).unwrap(),
            objective_history: vec![],
        };
        assert_eq!(svm_predict(&m, &x).unwrap(), vec![1; 4]);
    }

    #[test]
    fn model_containers_round_trip() {
        let (x, y) = xor();
        let nb = nb_fit(&dense(&[&[1.0, 2.0], &[3.0, 0.0]]), &[0, 1], 2, 0.5).unwrap();
        let back = container::nb_from_json(&container::nb_to_json(&nb).unwrap()).unwrap();
        assert_eq!(back, nb);

        let params = SvmParams { kernel: Kernel::rbf(), lambda: 0.1, epochs: 5, seed: 0 };
        let svm = svm_fit(&x, &y, 2, &params).unwrap();
        let json = container::svm_to_json(&svm).unwrap();
        assert!(json.contains("reviewbench-classic-model"));
        let back = container::svm_from_json(&json).unwrap();
        assert_eq!(back.scorers, svm.scorers);
        assert_eq!(svm_predict(&back, &x).unwrap(), svm_predict(&svm, &x).unwrap());
        assert!(container::nb_from_json(&json).is_err());
    }
}
