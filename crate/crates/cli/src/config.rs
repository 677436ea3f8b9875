use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tup_core::encoder::{Embedder, HashingEmbedder, RemoteEmbedSettings, RemoteEmbedder};
use tup_core::ingest::{CatalogFields, InteractionFields};
use tup_core::profiler::{RemoteGenerator, RemoteLlmSettings, TemplateGenerator, TextGenerator};
use tup_core::{PipelineConfig, Result, SynthConfig, TupError, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LlmBackend {
    #[default]
    Template,
    RemoteLlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedBackend {
    #[default]
    Hashing,
    RemoteEmbed,
}

/// Everything one run needs. Input is either a pair of JSONL files or an
/// inline synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub interaction_fields: InteractionFields,
    pub catalog_fields: CatalogFields,
    /// Abort on the first malformed record instead of rejecting it.
    pub strict: bool,
    pub llm_backend: LlmBackend,
    pub embed_backend: EmbedBackend,
    pub remote_llm: RemoteLlmSettings,
    pub remote_embed: RemoteEmbedSettings,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: None,
            catalog: None,
            synth: None,
            interaction_fields: InteractionFields::default(),
            catalog_fields: CatalogFields::default(),
            strict: false,
            llm_backend: LlmBackend::default(),
            embed_backend: EmbedBackend::default(),
            remote_llm: RemoteLlmSettings::default(),
            remote_embed: RemoteEmbedSettings::default(),
            output_dir: PathBuf::from("run"),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Flags shared by every stage. Each one overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run config; `-` reads it from stdin.
    #[arg(long, short)]
    pub config: Option<String>,
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Output directory of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Comma-separated variant tags.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub backend: Option<LlmBackend>,
    #[arg(long, value_enum)]
    pub embed_backend: Option<EmbedBackend>,
    #[arg(long)]
    pub min_history: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Skip the popularity and MF reference recommenders.
    #[arg(long)]
    pub no_reference: bool,
}

pub fn parse_variant(tag: &str) -> Result<VariantKind> {
    tag.trim()
        .parse()
        .map_err(|_| TupError::Config(format!("unknown variant tag `{tag}`")))
}

fn read_config(source: &str) -> Result<RunConfig> {
    let text = if source == "-" {
        let mut buf = String::new();
        std::io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| TupError::io("<stdin>", e))?;
        buf
    } else {
        std::fs::read_to_string(source).map_err(|e| TupError::io(source, e))?
    };
    serde_json::from_str(&text).map_err(|e| TupError::Config(format!("{source}: {e}")))
}

impl Overrides {
    /// The config file, if any, with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(src) => read_config(src)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.interactions {
            c.interactions = Some(p.clone());
            c.synth = None;
        }
        if let Some(p) = &self.catalog {
            c.catalog = Some(p.clone());
            c.synth = None;
        }
        if let Some(p) = &self.out {
            c.output_dir = p.clone();
        }
        if let Some(p) = &self.cache_dir {
            c.pipeline.cache_dir = Some(p.clone());
        }
        if let Some(s) = self.seed {
            c.pipeline.seed = s;
            if let Some(synth) = &mut c.synth {
                synth.seed = s;
            }
        }
        if let Some(d) = self.dim {
            c.pipeline.dim = d;
        }
        if let Some(v) = &self.variants {
            c.pipeline.variants = v.iter().map(|t| parse_variant(t)).collect::<Result<_>>()?;
        }
        if let Some(ks) = &self.ks {
            c.pipeline.ks = ks.clone();
        }
        if let Some(b) = self.backend {
            c.llm_backend = b;
        }
        if let Some(b) = self.embed_backend {
            c.embed_backend = b;
        }
        if let Some(m) = self.min_history {
            c.pipeline.split.min_history = m;
        }
        if let Some(m) = self.max_epochs {
            c.pipeline.train.max_epochs = m;
        }
        if let Some(p) = self.patience {
            c.pipeline.train.patience = p;
        }
        if let Some(b) = self.batch_size {
            c.pipeline.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.pipeline.train.lr = lr;
        }
        if self.no_reference {
            c.pipeline.popularity = false;
            c.pipeline.mf = false;
        }
        c.finish()?;
        Ok(c)
    }
}

impl RunConfig {
    /// Fills derived defaults and checks the config as a whole.
    pub fn finish(&mut self) -> Result<()> {
        if self.pipeline.cache_dir.is_none() {
            self.pipeline.cache_dir = Some(self.output_dir.join("cache"));
        }
        if self.pipeline.checkpoint_dir.is_none() {
            self.pipeline.checkpoint_dir = Some(self.output_dir.join("checkpoints"));
        }
        if self.embed_backend == EmbedBackend::RemoteEmbed {
            self.remote_embed.dim = self.pipeline.dim;
        }
        self.pipeline.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    /// Where the dataset comes from, checked for existence.
    pub fn source(&self) -> Result<Source<'_>> {
        match (&self.interactions, &self.catalog, &self.synth) {
            (Some(i), Some(c), _) => {
                for p in [i, c] {
                    if !p.exists() {
                        return Err(TupError::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
                        ));
                    }
                }
                Ok(Source::Files { interactions: i, catalog: c })
            }
            (None, None, Some(s)) => Ok(Source::Synth(s)),
            (Some(_), None, _) | (None, Some(_), _) => {
                Err(TupError::Config("`interactions` and `catalog` must be given together".into()))
            }
            (None, None, None) => Err(TupError::Config(
                "no dataset: set `interactions` and `catalog`, or `synth`".into(),
            )),
        }
    }

    /// Fails before any work when a remote backend lacks its credentials.
    pub fn generator(&self) -> Result<Box<dyn TextGenerator>> {
        Ok(match self.llm_backend {
            LlmBackend::Template => Box::new(TemplateGenerator::new(self.pipeline.short_window)),
            LlmBackend::RemoteLlm => Box::new(RemoteGenerator::from_env(self.remote_llm.clone())?),
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.embed_backend {
            EmbedBackend::Hashing => Box::new(HashingEmbedder::new(self.pipeline.dim, self.pipeline.seed)),
            EmbedBackend::RemoteEmbed => Box::new(RemoteEmbedder::from_env(self.remote_embed.clone())?),
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Writes the effective config into the output directory.
    pub fn echo(&self) -> Result<()> {
        write_json(&self.out("config.json"), self)
    }
}

pub enum Source<'a> {
    Files { interactions: &'a Path, catalog: &'a Path },
    Synth(&'a SynthConfig),
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| TupError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| TupError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| TupError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TupError::Format(format!("{}: {e}", path.display())))
}
