//! Review ingestion, cleaning, labeling and descriptive statistics.
//!
//! Reviews arrive as CSV or JSONL records (`id,rating,course_title,text`),
//! are cleaned into lowercase tokens, and are turned into a labeled
//! [`Dataset`] for either the sentiment task (rating 4-5 positive, 1-3
//! negative) or the topic task (course title matched against a [`TopicMap`]).
//! [`synth_corpus`] produces deterministic labeled corpora with planted class
//! signal for tests and experiments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;
use crate::vectorizer;

/// Minimum token count for a review to be kept in a dataset.
pub const MIN_TOKENS: usize = 2;

/// English stop words removed before n-gram ranking (never from classifier
/// features).
pub const STOP_WORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "for", "with", "by",
    "from", "as", "is", "was", "were", "are", "be", "been", "it", "its", "this", "that",
    "these", "those", "i", "me", "my", "we", "our", "you", "your", "he", "she", "they", "them",
    "their", "his", "her", "so", "very", "just", "if", "than", "then", "there", "have",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sentiment,
    Topic,
}

impl Task {
    /// Class names in declaration order. Tie-breaking throughout the crate
    /// follows this order.
    pub fn class_names(self) -> Vec<String> {
        self.labels().iter().map(|l| l.name().to_string()).collect()
    }

    pub fn labels(self) -> Vec<Label> {
        match self {
            Task::Sentiment => vec![
                Label::Sentiment(SentimentLabel::Positive),
                Label::Sentiment(SentimentLabel::Negative),
            ],
            Task::Topic => TopicLabel::ALL.iter().map(|&t| Label::Topic(t)).collect(),
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Task::Sentiment => 2,
            Task::Topic => 4,
        }
    }

    /// Default number of cross-validation folds for the task.
    pub fn default_folds(self) -> usize {
        match self {
            Task::Sentiment => 10,
            Task::Topic => 5,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sentiment => "sentiment",
            Task::Topic => "topic",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(Task::Sentiment),
            "topic" => Ok(Task::Topic),
            other => Err(Error::domain(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentimentLabel {
    Positive,
    Negative,
}

/// Course topic. Discriminants are the published integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicLabel {
    Programming = 1,
    WebDevelopment = 2,
    NonProgramming = 3,
    DataScience = 4,
}

impl TopicLabel {
    pub const ALL: [TopicLabel; 4] = [
        TopicLabel::Programming,
        TopicLabel::WebDevelopment,
        TopicLabel::NonProgramming,
        TopicLabel::DataScience,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// A class label of either task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Sentiment(SentimentLabel),
    Topic(TopicLabel),
}

impl Label {
    pub fn task(self) -> Task {
        match self {
            Label::Sentiment(_) => Task::Sentiment,
            Label::Topic(_) => Task::Topic,
        }
    }

    /// Position of the label in its task's declaration order.
    pub fn index(self) -> usize {
        match self {
            Label::Sentiment(SentimentLabel::Positive) => 0,
            Label::Sentiment(SentimentLabel::Negative) => 1,
            Label::Topic(t) => t.code() as usize - 1,
        }
    }

    pub fn from_index(task: Task, index: usize) -> Result<Label> {
        task.labels()
            .get(index)
            .copied()
            .ok_or_else(|| Error::domain(format!("class index {index} out of range for {task}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Sentiment(SentimentLabel::Positive) => "positive",
            Label::Sentiment(SentimentLabel::Negative) => "negative",
            Label::Topic(TopicLabel::Programming) => "programming",
            Label::Topic(TopicLabel::WebDevelopment) => "web_development",
            Label::Topic(TopicLabel::NonProgramming) => "non_programming",
            Label::Topic(TopicLabel::DataScience) => "data_science",
        }
    }

    pub fn parse(task: Task, name: &str) -> Result<Label> {
        task.labels()
            .into_iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::domain(format!("unknown {task} label `{name}`")))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One course review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub raw_text: String,
    pub rating: Option<u8>,
    pub course_title: Option<String>,
    pub tokens: Vec<String>,
}

impl Review {
    /// Validates the rating and cleans the text.
    pub fn new(
        id: impl Into<String>,
        raw_text: impl Into<String>,
        rating: Option<u8>,
        course_title: Option<String>,
    ) -> Result<Review> {
        let id = id.into();
        if let Some(r) = rating {
            if !(1..=5).contains(&r) {
                return Err(Error::domain(format!(
                    "review {id}: rating {r} outside 1..=5"
                )));
            }
        }
        let raw_text = raw_text.into();
        let tokens = clean_text(&raw_text);
        Ok(Review {
            id,
            raw_text,
            rating,
            course_title,
            tokens,
        })
    }
}

fn tag_regex() -> &'static Regex {
    static TAG: OnceLock<Regex> = OnceLock::new();
    TAG.get_or_init(|| Regex::new(r"<[^>]*>").expect("static regex"))
}

/// Strip HTML tags, lowercase, split on whitespace and trim punctuation from
/// both ends of every token. Tags are replaced by a space so that
/// `word<br>word` yields two tokens.
pub fn clean_text(raw: &str) -> Vec<String> {
    let stripped = tag_regex().replace_all(raw, " ");
    stripped
        .to_lowercase()
        .split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|tok| !tok.is_empty())
        .map(str::to_string)
        .collect()
}

/// Ratings 4 and 5 are positive; 1 to 3 are negative.
pub fn derive_sentiment_label(rating: u8) -> Result<SentimentLabel> {
    match rating {
        4 | 5 => Ok(SentimentLabel::Positive),
        1..=3 => Ok(SentimentLabel::Negative),
        other => Err(Error::domain(format!("rating {other} outside 1..=5"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRule {
    pub pattern: String,
    pub topic: TopicLabel,
}

/// Ordered, case-insensitive substring patterns mapping course titles to
/// topics. The first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMap {
    pub version: u32,
    pub rules: Vec<TopicRule>,
}

impl Default for TopicMap {
    fn default() -> Self {
        use TopicLabel::*;
        // Web development comes first so "JavaScript" is not claimed by "java".
        let table: [(&str, TopicLabel); 27] = [
            ("web development", WebDevelopment),
            ("web developer", WebDevelopment),
            ("web design", WebDevelopment),
            ("javascript", WebDevelopment),
            ("full stack", WebDevelopment),
            ("full-stack", WebDevelopment),
            ("front end", WebDevelopment),
            ("front-end", WebDevelopment),
            ("back end", WebDevelopment),
            ("back-end", WebDevelopment),
            ("data science", DataScience),
            ("data analytics", DataScience),
            ("business analytics", DataScience),
            ("data analysis", DataScience),
            ("machine learning", DataScience),
            ("ux design", NonProgramming),
            ("ui/ux", NonProgramming),
            ("product design", NonProgramming),
            ("marketing", NonProgramming),
            ("product management", NonProgramming),
            (".net", Programming),
            ("ios", Programming),
            ("java", Programming),
            ("python", Programming),
            ("android", Programming),
            ("software engineering", Programming),
            ("programming", Programming),
        ];
        TopicMap {
            version: 1,
            rules: table
                .iter()
                .map(|&(pattern, topic)| TopicRule {
                    pattern: pattern.to_string(),
                    topic,
                })
                .collect(),
        }
    }
}

impl TopicMap {
    pub fn from_json(json: &str) -> Result<TopicMap> {
        let map: TopicMap = serde_json::from_str(json)?;
        if let Some(rule) = map.rules.iter().find(|r| r.pattern.is_empty()) {
            return Err(Error::domain(format!(
                "topic map: empty pattern for {:?}",
                rule.topic
            )));
        }
        Ok(map)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// First rule whose pattern occurs in the title, ignoring case.
pub fn assign_topic(course_title: &str, topic_map: &TopicMap) -> Option<TopicLabel> {
    let title = course_title.to_lowercase();
    topic_map
        .rules
        .iter()
        .find(|rule| title.contains(&rule.pattern.to_lowercase()))
        .map(|rule| rule.topic)
}

/// A labeled, ordered collection of reviews for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub reviews: Vec<Review>,
    pub labels: Vec<Label>,
    pub class_counts: BTreeMap<Label, usize>,
}

/// Why reviews were left out of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub too_short: usize,
    pub unrated: usize,
    pub no_topic: usize,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.too_short + self.unrated + self.no_topic
    }
}

impl Dataset {
    /// Builds a dataset from already-labeled reviews.
    pub fn from_labeled(task: Task, reviews: Vec<Review>, labels: Vec<Label>) -> Result<Dataset> {
        if reviews.len() != labels.len() {
            return Err(Error::domain(format!(
                "{} reviews but {} labels",
                reviews.len(),
                labels.len()
            )));
        }
        if reviews.is_empty() {
            return Err(Error::domain("dataset is empty"));
        }
        if let Some(l) = labels.iter().find(|l| l.task() != task) {
            return Err(Error::domain(format!("label `{l}` does not belong to {task}")));
        }
        let mut class_counts = BTreeMap::new();
        for &l in &labels {
            *class_counts.entry(l).or_insert(0) += 1;
        }
        Ok(Dataset {
            task,
            reviews,
            labels,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.task.class_names()
    }

    pub fn n_classes(&self) -> usize {
        self.task.n_classes()
    }

    /// Labels as indices into [`Task::labels`].
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn token_docs(&self) -> Vec<Vec<String>> {
        self.reviews.iter().map(|r| r.tokens.clone()).collect()
    }

    /// Cleaned text (tokens joined by single spaces), the input to the
    /// character encoder.
    pub fn clean_texts(&self) -> Vec<String> {
        self.reviews.iter().map(|r| r.tokens.join(" ")).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    /// Writes one JSON object per review.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (review, label) in self.reviews.iter().zip(&self.labels) {
            let row = DatasetRow {
                id: review.id.clone(),
                rating: review.rating,
                course_title: review.course_title.clone(),
                text: review.raw_text.clone(),
                tokens: review.tokens.clone(),
                task: self.task,
                label: label.name().to_string(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
        let mut task = None;
        let mut reviews = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: DatasetRow = serde_json::from_str(&line).map_err(|e| Error::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let t = *task.get_or_insert(row.task);
            if t != row.task {
                return Err(Error::Format {
                    line: i + 1,
                    msg: format!("task {} differs from earlier rows ({t})", row.task),
                });
            }
            let label = Label::parse(t, &row.label).map_err(|e| Error::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
            reviews.push(Review {
                id: row.id,
                raw_text: row.text,
                rating: row.rating,
                course_title: row.course_title,
                tokens: row.tokens,
            });
            labels.push(label);
        }
        let task = task.ok_or_else(|| Error::domain("dataset file has no rows"))?;
        Dataset::from_labeled(task, reviews, labels)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    id: String,
    rating: Option<u8>,
    course_title: Option<String>,
    text: String,
    tokens: Vec<String>,
    task: Task,
    label: String,
}

/// Drops short reviews, derives labels and counts classes.
pub fn build_dataset(
    reviews: Vec<Review>,
    task: Task,
    topic_map: Option<&TopicMap>,
) -> Result<Dataset> {
    build_dataset_with_report(reviews, task, topic_map).map(|(d, _)| d)
}

/// As [`build_dataset`], also reporting how many reviews were dropped and why.
pub fn build_dataset_with_report(
    reviews: Vec<Review>,
    task: Task,
    topic_map: Option<&TopicMap>,
) -> Result<(Dataset, DropReport)> {
    if task == Task::Topic && topic_map.is_none() {
        return Err(Error::domain("topic task requires a topic map"));
    }
    let mut report = DropReport::default();
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for review in reviews {
        if review.tokens.len() < MIN_TOKENS {
            report.too_short += 1;
            continue;
        }
        let label = match task {
            Task::Sentiment => match review.rating {
                Some(r) => Label::Sentiment(derive_sentiment_label(r)?),
                None => {
                    report.unrated += 1;
                    continue;
                }
            },
            Task::Topic => {
                let map = topic_map.expect("checked above");
                match review.course_title.as_deref().and_then(|t| assign_topic(t, map)) {
                    Some(topic) => Label::Topic(topic),
                    None => {
                        report.no_topic += 1;
                        continue;
                    }
                }
            }
        };
        kept.push(review);
        labels.push(label);
    }
    if kept.is_empty() {
        return Err(Error::domain(format!(
            "no reviews left for the {task} dataset ({} dropped)",
            report.total()
        )));
    }
    Ok((Dataset::from_labeled(task, kept, labels)?, report))
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    rating: Option<serde_json::Value>,
    course_title: Option<String>,
    text: String,
}

fn parse_rating(value: Option<&str>, line: usize) -> Result<Option<u8>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<u8>() {
            Ok(r) if (1..=5).contains(&r) => Ok(Some(r)),
            _ => Err(Error::Format {
                line,
                msg: format!("rating `{s}` is not an integer in 1..=5"),
            }),
        },
    }
}

/// Reads `id,rating,course_title,text` CSV (header required, RFC 4180
/// quoting). Empty rating or title fields become `None`.
pub fn read_reviews_csv<R: Read>(input: R) -> Result<Vec<Review>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format {
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (id_col, rating_col, title_col, text_col) =
        (col("id")?, col("rating")?, col("course_title")?, col("text")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let rating = parse_rating(Some(field(rating_col)), line)?;
        let title = Some(field(title_col).trim())
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        out.push(Review::new(field(id_col), field(text_col), rating, title)?);
    }
    Ok(out)
}

/// Reads one JSON object per line with keys `id`, `rating`, `course_title`,
/// `text`. Rating may be a number, a numeric string or null.
pub fn read_reviews_jsonl<R: BufRead>(input: R) -> Result<Vec<Review>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let rating_text = match &rec.rating {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(v) => Some(v.to_string()),
        };
        let rating = parse_rating(rating_text.as_deref(), i + 1)?;
        let title = rec.course_title.filter(|t| !t.trim().is_empty());
        out.push(Review::new(rec.id, rec.text, rating, title)?);
    }
    Ok(out)
}

/// Token-length and class-balance summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub task: Task,
    pub n_reviews: usize,
    pub class_counts: Vec<(String, usize)>,
    pub tokens_min: usize,
    pub tokens_mean: f64,
    pub tokens_std: f64,
    pub tokens_max: usize,
    pub dropped: DropReport,
}

impl CorpusStats {
    pub fn compute(dataset: &Dataset, dropped: DropReport) -> CorpusStats {
        let lengths: Vec<f64> = dataset.reviews.iter().map(|r| r.tokens.len() as f64).collect();
        let (mean, std) = crate::util::mean_std(&lengths);
        CorpusStats {
            task: dataset.task,
            n_reviews: dataset.len(),
            class_counts: dataset
                .task
                .labels()
                .into_iter()
                .map(|l| (l.name().to_string(), dataset.count(l)))
                .collect(),
            tokens_min: dataset.reviews.iter().map(|r| r.tokens.len()).min().unwrap_or(0),
            tokens_mean: mean,
            tokens_std: std,
            tokens_max: dataset.reviews.iter().map(|r| r.tokens.len()).max().unwrap_or(0),
            dropped,
        }
    }

    /// Two-column `statistic,value` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "value"])?;
        w.write_record(["task", &self.task.to_string()])?;
        w.write_record(["n_reviews", &self.n_reviews.to_string()])?;
        for (name, count) in &self.class_counts {
            w.write_record([format!("class_count:{name}"), count.to_string()])?;
            let share = if self.n_reviews == 0 {
                0.0
            } else {
                100.0 * *count as f64 / self.n_reviews as f64
            };
            w.write_record([format!("class_percent:{name}"), format!("{share:.2}")])?;
        }
        w.write_record(["tokens_min", &self.tokens_min.to_string()])?;
        w.write_record(["tokens_mean", &format!("{:.4}", self.tokens_mean)])?;
        w.write_record(["tokens_std", &format!("{:.4}", self.tokens_std)])?;
        w.write_record(["tokens_max", &self.tokens_max.to_string()])?;
        w.write_record(["dropped_too_short", &self.dropped.too_short.to_string()])?;
        w.write_record(["dropped_unrated", &self.dropped.unrated.to_string()])?;
        w.write_record(["dropped_no_topic", &self.dropped.no_topic.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramStat {
    pub ngram: Vec<String>,
    pub label: String,
    pub score: f64,
}

fn ngrams_of(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

/// Top-`k` n-grams per class ranked by mean TF-IDF within the class's
/// documents. Stop words are removed before n-grams are formed.
pub fn top_ngrams(dataset: &Dataset, n: usize, k: usize) -> Result<BTreeMap<Label, Vec<NgramStat>>> {
    if !(1..=3).contains(&n) {
        return Err(Error::domain(format!("n-gram order {n} outside 1..=3")));
    }
    if dataset.is_empty() {
        return Err(Error::domain("top_ngrams on an empty dataset"));
    }
    let stop: HashSet<&str> = STOP_WORDS.iter().copied().collect();
    let mut out = BTreeMap::new();
    for label in dataset.task.labels() {
        let docs: Vec<Vec<String>> = dataset
            .reviews
            .iter()
            .zip(&dataset.labels)
            .filter(|(_, l)| **l == label)
            .map(|(r, _)| {
                let kept: Vec<String> = r
                    .tokens
                    .iter()
                    .filter(|t| !stop.contains(t.as_str()))
                    .cloned()
                    .collect();
                ngrams_of(&kept, n)
            })
            .collect();
        if docs.is_empty() || docs.iter().all(Vec::is_empty) {
            out.insert(label, Vec::new());
            continue;
        }
        let vocab = vectorizer::build_vocabulary(&docs, 1, None)?;
        let matrix = vectorizer::tfidf_transform(&vocab, &docs);
        let mut sums = vec![0.0; matrix.n_cols];
        for row in &matrix.rows {
            for &(col, v) in row {
                sums[col] += v;
            }
        }
        let n_docs = docs.len() as f64;
        let mut ranked: Vec<(String, f64)> = sums
            .into_iter()
            .enumerate()
            .map(|(col, s)| (vocab.feature_token(col).to_string(), s / n_docs))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.insert(
            label,
            ranked
                .into_iter()
                .take(k)
                .map(|(g, score)| NgramStat {
                    ngram: g.split(' ').map(str::to_string).collect(),
                    label: label.name().to_string(),
                    score,
                })
                .collect(),
        );
    }
    Ok(out)
}

/// One class of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub prior: f64,
    /// Class-specific signal tokens.
    pub vocabulary: Vec<String>,
}

/// Generator settings for [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub classes: Vec<ClassSpec>,
    /// Shared background vocabulary every document draws from.
    pub background: Vec<String>,
    /// Inclusive document length range, in tokens.
    pub doc_len: (usize, usize),
    pub signal_per_doc: usize,
    /// Late-signal mode: signal tokens are placed only at positions at or
    /// after this index.
    pub signal_after: Option<usize>,
    /// Probability that a document carries another class's signal tokens
    /// while keeping its own label.
    pub label_noise: f64,
}

const POSITIVE_WORDS: [&str; 12] = [
    "excellent", "amazing", "recommend", "helpful", "supportive", "fantastic", "outstanding",
    "worthwhile", "engaging", "knowledgeable", "inspiring", "rewarding",
];
const NEGATIVE_WORDS: [&str; 12] = [
    "waste", "terrible", "refund", "disorganized", "outdated", "scam", "useless",
    "disappointing", "overpriced", "unprepared", "misleading", "frustrating",
];
const TOPIC_WORDS: [[&str; 8]; 4] = [
    ["java", "swift", "compiler", "dotnet", "pointers", "xcode", "classes", "algorithms"],
    ["javascript", "react", "html", "css", "frontend", "nodejs", "browser", "webpack"],
    ["ux", "marketing", "wireframes", "branding", "personas", "campaigns", "figma", "seo"],
    ["pandas", "regression", "statistics", "tableau", "datasets", "sql", "visualization", "numpy"],
];
const TOPIC_TITLES: [&str; 4] = [
    "Java Programming Immersive",
    "Full Stack Web Development",
    "UX Design Bootcamp",
    "Intro to Data Science",
];

fn background_words(n: usize) -> Vec<String> {
    const SYLLABLES: [&str; 16] = [
        "ka", "lo", "mi", "ser", "tu", "van", "re", "dos", "pe", "rin", "ba", "col", "fe", "nu",
        "ta", "gor",
    ];
    (0..n)
        .map(|i| format!("{}{}{}", SYLLABLES[i % 16], SYLLABLES[(i / 16) % 16], i / 256))
        .collect()
}

impl SynthSpec {
    /// Binary sentiment corpus with positive/negative signal words.
    pub fn sentiment(positive_prior: f64) -> SynthSpec {
        SynthSpec {
            task: Task::Sentiment,
            classes: vec![
                ClassSpec {
                    label: "positive".into(),
                    prior: positive_prior,
                    vocabulary: POSITIVE_WORDS.iter().map(|s| s.to_string()).collect(),
                },
                ClassSpec {
                    label: "negative".into(),
                    prior: 1.0 - positive_prior,
                    vocabulary: NEGATIVE_WORDS.iter().map(|s| s.to_string()).collect(),
                },
            ],
            background: background_words(300),
            doc_len: (10, 30),
            signal_per_doc: 2,
            signal_after: None,
            label_noise: 0.0,
        }
    }

    /// Four-topic corpus with the given priors (declaration order).
    pub fn topic(priors: [f64; 4]) -> SynthSpec {
        SynthSpec {
            task: Task::Topic,
            classes: TopicLabel::ALL
                .iter()
                .zip(priors)
                .zip(TOPIC_WORDS)
                .map(|((&t, prior), words)| ClassSpec {
                    label: Label::Topic(t).name().to_string(),
                    prior,
                    vocabulary: words.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
            background: background_words(300),
            doc_len: (10, 30),
            signal_per_doc: 2,
            signal_after: None,
            label_noise: 0.0,
        }
    }

    /// Topic corpus whose signal tokens all sit at or after `after`.
    pub fn late_signal_topic(priors: [f64; 4], after: usize) -> SynthSpec {
        SynthSpec {
            doc_len: (after + 10, after + 40),
            signal_after: Some(after),
            ..SynthSpec::topic(priors)
        }
    }

    fn validate(&self) -> Result<Vec<Label>> {
        if self.classes.is_empty() {
            return Err(Error::domain("synthetic spec has no classes"));
        }
        let mut labels = Vec::new();
        for c in &self.classes {
            let label = Label::parse(self.task, &c.label)?;
            if labels.contains(&label) {
                return Err(Error::domain(format!("class `{}` listed twice", c.label)));
            }
            if !(c.prior > 0.0) || !c.prior.is_finite() {
                return Err(Error::domain(format!(
                    "class `{}` has degenerate prior {}",
                    c.label, c.prior
                )));
            }
            if c.vocabulary.is_empty() {
                return Err(Error::domain(format!("class `{}` has no vocabulary", c.label)));
            }
            labels.push(label);
        }
        let total: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("class priors sum to {total}, not 1")));
        }
        if self.background.is_empty() {
            return Err(Error::domain("synthetic spec has no background vocabulary"));
        }
        let (lo, hi) = self.doc_len;
        if lo < MIN_TOKENS || lo > hi {
            return Err(Error::domain(format!("invalid document length range {lo}..={hi}")));
        }
        let room = lo.saturating_sub(self.signal_after.unwrap_or(0));
        if self.signal_per_doc > room {
            return Err(Error::domain(format!(
                "{} signal tokens do not fit after position {} in documents of length {lo}",
                self.signal_per_doc,
                self.signal_after.unwrap_or(0)
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::domain(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        Ok(labels)
    }
}

/// Exact per-class document counts by largest-remainder rounding; leftover
/// documents go to the largest fractional parts, earlier classes first.
pub fn quota_allocation(priors: &[f64], size: usize) -> Vec<usize> {
    let raw: Vec<f64> = priors.iter().map(|p| p * size as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(size.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Deterministic synthetic corpus: each document mixes background tokens
/// with `signal_per_doc` tokens from its class vocabulary.
pub fn synth_corpus(seed: u64, size: usize, spec: &SynthSpec) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::domain("synthetic corpus size must be positive"));
    }
    let labels = spec.validate()?;
    let priors: Vec<f64> = spec.classes.iter().map(|c| c.prior).collect();
    let counts = quota_allocation(&priors, size);
    let mut classes: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = rng_for(seed, 0);
    classes.shuffle(&mut rng);

    let mut reviews = Vec::with_capacity(size);
    let mut out_labels = Vec::with_capacity(size);
    for (i, &class) in classes.iter().enumerate() {
        let len = rng.gen_range(spec.doc_len.0..=spec.doc_len.1);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| spec.background[rng.gen_range(0..spec.background.len())].clone())
            .collect();
        let signal_class = if spec.classes.len() > 1 && rng.gen_bool(spec.label_noise) {
            let other = rng.gen_range(0..spec.classes.len() - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        let start = spec.signal_after.unwrap_or(0);
        let positions = rand::seq::index::sample(&mut rng, len - start, spec.signal_per_doc);
        let vocab = &spec.classes[signal_class].vocabulary;
        for p in positions.iter() {
            tokens[start + p] = vocab[rng.gen_range(0..vocab.len())].clone();
        }
        let label = labels[class];
        let (rating, title) = match label {
            Label::Sentiment(SentimentLabel::Positive) => (Some(rng.gen_range(4..=5)), None),
            Label::Sentiment(SentimentLabel::Negative) => (Some(rng.gen_range(1..=3)), None),
            Label::Topic(t) => (None, Some(TOPIC_TITLES[t.code() as usize - 1].to_string())),
        };
        let text = tokens.join(" ");
        reviews.push(Review {
            id: format!("syn-{seed}-{i:06}"),
            raw_text: text,
            rating,
            course_title: title,
            tokens,
        });
        out_labels.push(label);
    }
    Dataset::from_labeled(spec.task, reviews, out_labels)
}
