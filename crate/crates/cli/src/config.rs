use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nextutt::corpus::{Delimiter, PairFileOptions, RankingLayout, TokenizeOptions};
use nextutt::embed::Word2vecConfig;
use nextutt::esim::EsimConfig;

/// Everything a run depends on. Loaded from TOML, then patched by `--set`
/// and subcommand flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub word2vec: Word2vecSection,
    pub esim: EsimConfig,
    pub metrics: MetricsConfig,
}

/// Fallbacks for the matching subcommand flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub trained: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelimiterName {
    Csv,
    Tsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutName {
    Grouped,
    Triples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorFormatName {
    /// word2vec text when the first line is `count dim`, GloVe text otherwise.
    Auto,
    Glove,
    Word2vec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub delimiter: DelimiterName,
    pub has_header: bool,
    pub lowercase: bool,
    pub strip_tags: bool,
    pub ranking_layout: LayoutName,
    /// Records per group for the `triples` layout.
    pub group_size: usize,
    /// Minimum count for the model vocabulary.
    pub min_count: u64,
    pub vector_format: VectorFormatName,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            delimiter: DelimiterName::Csv,
            has_header: true,
            lowercase: true,
            strip_tags: false,
            ranking_layout: LayoutName::Grouped,
            group_size: 10,
            min_count: 1,
            vector_format: VectorFormatName::Auto,
        }
    }
}

impl CorpusConfig {
    pub fn pair_options(&self) -> PairFileOptions {
        PairFileOptions {
            delimiter: match self.delimiter {
                DelimiterName::Csv => Delimiter::Csv,
                DelimiterName::Tsv => Delimiter::Tsv,
            },
            has_header: self.has_header,
            tokenize: TokenizeOptions { lowercase: self.lowercase, strip_tags: self.strip_tags },
        }
    }

    pub fn layout(&self) -> RankingLayout {
        match self.ranking_layout {
            LayoutName::Grouped => RankingLayout::Grouped,
            LayoutName::Triples => RankingLayout::Triples { group_size: self.group_size },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Word2vecSection {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub min_count: u64,
    pub initial_lr: f32,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for Word2vecSection {
    fn default() -> Self {
        Word2vecConfig::default().into()
    }
}

impl From<Word2vecConfig> for Word2vecSection {
    fn from(c: Word2vecConfig) -> Self {
        Word2vecSection {
            dim: c.dim,
            window: c.window,
            negatives: c.negatives,
            epochs: c.epochs,
            min_count: c.min_count,
            initial_lr: c.initial_lr,
            subsample: c.subsample,
            seed: c.seed,
        }
    }
}

impl Word2vecSection {
    pub fn to_config(&self) -> Word2vecConfig {
        Word2vecConfig {
            dim: self.dim,
            window: self.window,
            negatives: self.negatives,
            epochs: self.epochs,
            min_count: self.min_count,
            initial_lr: self.initial_lr,
            subsample: self.subsample,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Skip groups with no positive or only positives.
    pub filter_degenerate: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(ConfigError(format!("override {assignment:?} is not key=value")));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ConfigError(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(ConfigError(format!("override {key:?}: {p} is not a section"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), literal(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional file, then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ConfigError(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        cfg.esim.validate()?;
        cfg.word2vec.to_config().validate()?;
        if cfg.corpus.group_size == 0 {
            bail!(ConfigError("corpus.group_size must be >= 1".into()));
        }
        Ok(cfg)
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Picks the flag, else the config path, else fails naming the flag.
pub fn require(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| ConfigError(format!("missing input: pass --{name} or set paths.{}", name.replace('-', "_"))).into())
}
