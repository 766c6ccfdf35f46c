use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reviewbench::corpus::Task;
use reviewbench::eval::{EmbeddingSource, ModelSpec};
use reviewbench::classic::SvmParams;
use reviewbench::neural::NeuralConfig;
use reviewbench::transformer::EncoderConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    /// Defaults to 10 for sentiment and 5 for topic.
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn all_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Markdown]
}

/// One run: a dataset, one model and the cross-validation setup. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Checked against the dataset's own task when given.
    #[serde(default)]
    pub task: Option<Task>,
    pub dataset: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Artifact file stem; the model id when absent.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "all_formats")]
    pub formats: Vec<ReportFormat>,
}

fn path_error<T: serde::de::DeserializeOwned>(value: &Value) -> Option<(String, String)> {
    serde_path_to_error::deserialize::<_, T>(value)
        .err()
        .map(|e| (e.path().to_string(), e.inner().to_string()))
}

/// Internally tagged enums buffer their fields, which hides the path below
/// `model`. Re-parse the variant's own fields to recover it.
fn model_error(text: &str) -> Option<(String, String)> {
    let root: Value = serde_json::from_str(text).ok()?;
    let model = root.get("model")?;
    let sub = |key: &'static str| model.get(key).map(|v| (key, v));
    let (key, err) = match model.get("type")?.as_str()? {
        "svm" => sub("params").map(|(k, v)| (k, path_error::<SvmParams>(v)))?,
        "neural" => sub("config")
            .map(|(k, v)| (k, path_error::<NeuralConfig>(v)))
            .or_else(|| sub("embeddings").map(|(k, v)| (k, path_error::<Option<EmbeddingSource>>(v))))?,
        "transformer" => sub("config").map(|(k, v)| (k, path_error::<EncoderConfig>(v)))?,
        _ => return None,
    };
    err.map(|(p, msg)| (if p == "." { key.to_string() } else { format!("{key}.{p}") }, msg))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut field = e.path().to_string();
            let mut msg = e.inner().to_string();
            if field == "model" {
                if let Some((inner, inner_msg)) = model_error(&text) {
                    field = format!("model.{inner}");
                    msg = inner_msg;
                }
            }
            anyhow::anyhow!("config {}: field `{field}`: {msg}", path.display())
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        if let Some(out) = self.output_dir.as_mut() {
            fix(out);
        }
        if let ModelSpec::Neural {
            embeddings: Some(EmbeddingSource::Pretrained { path, .. }),
            ..
        } = &mut self.model
        {
            fix(path);
        }
    }

    /// Field-level checks that do not need the dataset contents.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.is_file() {
            bail!("field `dataset`: no such file {}", self.dataset.display());
        }
        if let Some(k) = self.cv.k {
            if k < 2 {
                bail!("field `cv.k`: must be at least 2, got {k}");
            }
        }
        if let ModelSpec::Neural {
            embeddings: Some(EmbeddingSource::Pretrained { path, .. }),
            ..
        } = &self.model
        {
            if !path.is_file() {
                bail!("field `model.embeddings.path`: no such file {}", path.display());
            }
        }
        self.model.validate().map_err(|e| anyhow::anyhow!("field `model`: {e}"))?;
        if let Some(name) = &self.name {
            if name.is_empty() || name.contains(['/', '\\']) {
                bail!("field `name`: must be a non-empty file stem, got {name:?}");
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.id())
    }
}
