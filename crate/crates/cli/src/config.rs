use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use catrace_core::factgen::GenerationJob;
use catrace_core::{Bucket, Component, TraceConfig};
use serde::{Deserialize, Serialize};

/// Problem with the run configuration or its referenced files.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    /// Recorded in output sidecars.
    pub id: String,
    pub weights: PathBuf,
    pub config: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerPaths {
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub bucket: Bucket,
    pub component: Component,
}

impl View {
    pub fn slug(&self) -> String {
        format!("{}_{}", self.component.as_str(), self.bucket.as_str())
    }
}

fn default_views() -> Vec<View> {
    vec![
        View {
            bucket: Bucket::LastSubject,
            component: Component::MlpOut,
        },
        View {
            bucket: Bucket::LastToken,
            component: Component::AttnOut,
        },
    ]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSelection {
    #[serde(default = "default_views")]
    pub views: Vec<View>,
    /// Subcategories left out of cross-category averages, in addition to
    /// those listed in more than one manifest.
    #[serde(default)]
    pub shared: Vec<String>,
}

impl Default for ReportSelection {
    fn default() -> Self {
        Self {
            views: default_views(),
            shared: Vec::new(),
        }
    }
}

fn default_max_batches() -> usize {
    50
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub model: String,
    pub archive: PathBuf,
    #[serde(default = "default_max_batches")]
    pub max_batches: usize,
    pub jobs: Vec<GenerationJob>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelPaths>,
    pub tokenizer: Option<TokenizerPaths>,
    #[serde(default)]
    pub facts: Vec<PathBuf>,
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    #[serde(default)]
    pub trace: TraceConfig,
    /// Noise scale; calibrated from the fact prompts when absent.
    pub sigma: Option<f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report: ReportSelection,
    pub generation: Option<GenerationConfig>,
}

impl RunConfig {
    /// Reads a config file. Relative paths are taken relative to the file's
    /// directory, and every referenced input must exist.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn empty(output_dir: PathBuf) -> Self {
        Self {
            model: None,
            tokenizer: None,
            facts: Vec::new(),
            manifests: Vec::new(),
            trace: TraceConfig::default(),
            sigma: None,
            output_dir,
            report: ReportSelection::default(),
            generation: None,
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = self.model.as_mut() {
            fix(&mut m.weights);
            fix(&mut m.config);
        }
        if let Some(t) = self.tokenizer.as_mut() {
            fix(&mut t.vocab);
            fix(&mut t.merges);
        }
        self.facts.iter_mut().for_each(fix);
        self.manifests.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        if let Some(g) = self.generation.as_mut() {
            fix(&mut g.archive);
        }
    }

    fn check(&self) -> anyhow::Result<()> {
        let mut missing = Vec::new();
        let mut need = |p: &Path| {
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        };
        if let Some(m) = &self.model {
            need(&m.weights);
            need(&m.config);
        }
        if let Some(t) = &self.tokenizer {
            need(&t.vocab);
            need(&t.merges);
        }
        self.facts.iter().for_each(|p| need(p));
        self.manifests.iter().for_each(|p| need(p));
        if !missing.is_empty() {
            return Err(config_err(format!("missing input files: {}", missing.join(", "))));
        }
        self.trace.validate().map_err(|e| config_err(e.to_string()))?;
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config_err("sigma must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn stage_dir(&self, stage: &str) -> anyhow::Result<PathBuf> {
        let dir = self.output_dir.join(stage);
        fs::create_dir_all(&dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}
