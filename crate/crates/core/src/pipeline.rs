//! End-to-end experiment runs: profiles, embeddings, per-variant training
//! and evaluation over one split.
//!
//! Every user representation is computed from the user's train prefix
//! alone. [`prepare`] only hands train histories to the profiler and the
//! baseline builders, so val and test interactions can influence nothing
//! but evaluation targets and early stopping.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::RetryPolicy;
use crate::baselines::{self, popularity_fit, MfParams};
use crate::cache::CacheStats;
use crate::datamodel::{Horizon, SplitDataset, UserHistory};
use crate::encoder::{profile_key, Embedder, Encoder, EncoderConfig, EmbeddingTable};
use crate::error::{Result, TupError};
use crate::eval::{compare_to_baseline, emit_report, evaluate, MetricsReport, SignificanceTable};
use crate::ingest::SplitConfig;
use crate::model::{ModelConfig, ModelParams, UserRepr, VariantKind};
use crate::profiler::{ProfileText, Profiler, ProfilerConfig, PromptRecord, TextGenerator};
use crate::trainer::{self, Features, IndexedSplit, NeuralObjective, TrainConfig, TrainHistory};

pub const POPULARITY_TAG: &str = "popularity";
pub const MF_TAG: &str = "mf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Titles the template backend lists in a short-term profile.
    pub short_window: usize,
    pub tempfusion_cutoff: usize,
    pub history_budget: usize,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub mf_k: usize,
    pub ks: Vec<usize>,
    pub variants: Vec<VariantKind>,
    pub popularity: bool,
    pub mf: bool,
    /// Seeds the hashing embedder and every training stream.
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dim: crate::encoder::DEFAULT_DIM,
            hidden: vec![128],
            dropout: 0.2,
            short_window: 3,
            tempfusion_cutoff: 3,
            history_budget: crate::profiler::DEFAULT_HISTORY_BUDGET,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            mf_k: 64,
            ks: vec![5, 10, 20],
            variants: VariantKind::ALL.to_vec(),
            popularity: true,
            mf: true,
            seed: 0,
            cache_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.split.ratios.validate()?;
        if self.short_window == 0 || self.tempfusion_cutoff == 0 {
            return Err(TupError::Config("short_window and tempfusion_cutoff must be positive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(TupError::Config("ks must be non-empty and positive".into()));
        }
        if self.mf && self.mf_k == 0 {
            return Err(TupError::Config("mf_k must be positive".into()));
        }
        Ok(())
    }

    fn sub_cache(&self, name: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(name))
    }
}

/// Everything the variants share: the split, profile texts, the prompts
/// that produced them, embedding tables and per-variant representations.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub indexed: IndexedSplit,
    pub profiles: Vec<ProfileText>,
    pub prompts: Vec<PromptRecord>,
    pub item_table: EmbeddingTable,
    pub profile_table: EmbeddingTable,
    pub reprs: BTreeMap<VariantKind, BTreeMap<String, UserRepr>>,
}

/// Train prefixes, the only histories representations may read.
pub fn train_histories(split: &SplitDataset) -> Vec<&UserHistory> {
    split.users.values().map(|s| &s.train).collect()
}

fn profile_reprs(variant: VariantKind, split: &SplitDataset, table: &EmbeddingTable) -> Result<BTreeMap<String, UserRepr>> {
    let get = |user: &str, h: Horizon| table.require(&profile_key(user, h)).cloned();
    split
        .users
        .keys()
        .map(|u| {
            let repr = match variant {
                VariantKind::Full | VariantKind::Dp => UserRepr::pair(get(u, Horizon::Short)?, get(u, Horizon::Long)?)?,
                VariantKind::St => UserRepr::single_short(get(u, Horizon::Short)?),
                VariantKind::Lt => UserRepr::single_long(get(u, Horizon::Long)?),
                VariantKind::Nots => UserRepr::single_long(get(u, Horizon::General)?),
                VariantKind::Centric | VariantKind::TempFusion => unreachable!("baseline representations are built from items"),
            };
            Ok((u.clone(), repr))
        })
        .collect()
}

/// Profile texts for every user and horizon, from train prefixes, with the
/// prompts that produced them.
pub fn generate_profiles(
    split: &SplitDataset,
    generator: &dyn TextGenerator,
    config: &PipelineConfig,
) -> Result<(Vec<ProfileText>, Vec<PromptRecord>, CacheStats)> {
    let profiler = Profiler::new(
        generator,
        config.sub_cache("profiles"),
        ProfilerConfig {
            history_budget: config.history_budget,
            ..ProfilerConfig::default()
        },
    )?
    .with_prompt_log();
    let profiles = profiler.generate_all(&train_histories(split), &split.catalog, &Horizon::ALL)?;
    Ok((profiles, profiler.prompts(), profiler.cache_stats()))
}

/// Item and profile embedding tables.
pub fn encode_tables(
    split: &SplitDataset,
    profiles: &[ProfileText],
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<(EmbeddingTable, EmbeddingTable, CacheStats)> {
    let encoder = Encoder::new(
        embedder,
        config.sub_cache("embeddings"),
        EncoderConfig {
            dim: config.dim,
            retry: RetryPolicy::default(),
        },
    )?;
    let item_table = encoder.encode_items(&split.catalog)?;
    let profile_table = encoder.encode_profiles(profiles, &Horizon::ALL)?;
    Ok((item_table, profile_table, encoder.cache_stats()))
}

/// Builds the representation of every configured variant from finished
/// embedding tables.
pub fn assemble(
    split: SplitDataset,
    profiles: Vec<ProfileText>,
    prompts: Vec<PromptRecord>,
    item_table: EmbeddingTable,
    profile_table: EmbeddingTable,
    config: &PipelineConfig,
) -> Result<Prepared> {
    config.validate()?;
    let indexed = IndexedSplit::new(&split)?;
    let mut reprs = BTreeMap::new();
    let needs_baselines = config
        .variants
        .iter()
        .any(|v| matches!(v, VariantKind::Centric | VariantKind::TempFusion));
    if needs_baselines {
        let (centric, tempfusion) = baselines::baseline_reprs(&split, &item_table, config.tempfusion_cutoff)?;
        if config.variants.contains(&VariantKind::Centric) {
            reprs.insert(VariantKind::Centric, centric);
        }
        if config.variants.contains(&VariantKind::TempFusion) {
            reprs.insert(VariantKind::TempFusion, tempfusion);
        }
    }
    for &v in &config.variants {
        if let std::collections::btree_map::Entry::Vacant(slot) = reprs.entry(v) {
            slot.insert(profile_reprs(v, &split, &profile_table)?);
        }
    }
    Ok(Prepared {
        split,
        indexed,
        profiles,
        prompts,
        item_table,
        profile_table,
        reprs,
    })
}

/// Generates profiles, encodes items and profiles, and assembles the user
/// representation of every configured variant.
pub fn prepare(
    split: SplitDataset,
    generator: &dyn TextGenerator,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<Prepared> {
    config.validate()?;
    let (profiles, prompts, _) = generate_profiles(&split, generator, config)?;
    let (item_table, profile_table, _) = encode_tables(&split, &profiles, embedder, config)?;
    assemble(split, profiles, prompts, item_table, profile_table, config)
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub tag: String,
    pub report: MetricsReport,
    pub history: Option<TrainHistory>,
    pub params: Option<ModelParams>,
    /// (alpha_short, alpha_long) per user for attention variants.
    pub attention: BTreeMap<String, (f64, f64)>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Report order: baselines, then neural variants as configured.
    pub order: Vec<String>,
    pub runs: BTreeMap<String, VariantRun>,
}

impl ExperimentOutcome {
    pub fn reports(&self) -> BTreeMap<String, MetricsReport> {
        self.runs.iter().map(|(k, r)| (k.clone(), r.report.clone())).collect()
    }

    pub fn report(&self, tag: &str) -> Result<&MetricsReport> {
        self.runs
            .get(tag)
            .map(|r| &r.report)
            .ok_or_else(|| TupError::invalid(format!("no report for `{tag}`")))
    }

    /// Paired significance of every run against Centric, empty without it.
    pub fn significance(&self) -> Result<SignificanceTable> {
        if !self.runs.contains_key(VariantKind::Centric.tag()) {
            return Ok(SignificanceTable::new());
        }
        compare_to_baseline(&self.reports(), VariantKind::Centric.tag())
    }

    /// Writes `report.csv` and `report_per_user.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        emit_report(dir, &self.order, &self.reports(), &self.significance()?)
    }
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn lookup(index: &HashMap<&str, usize>, id: &str) -> Result<usize> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| TupError::invalid(format!("`{id}` is not in the training index")))
}

fn features(prepared: &Prepared, variant: VariantKind) -> Result<Features> {
    let reprs = prepared
        .reprs
        .get(&variant)
        .ok_or_else(|| TupError::invalid(format!("variant {variant} was not prepared")))?;
    Features::build(variant, &prepared.indexed, reprs, &prepared.item_table)
}

/// Trains one neural variant. With a checkpoint directory, the best
/// parameters are written to `<dir>/<tag>.json`.
pub fn train_variant(prepared: &Prepared, variant: VariantKind, config: &PipelineConfig) -> Result<(ModelParams, TrainHistory)> {
    let features = features(prepared, variant)?;
    let init = ModelParams::init(&config.model_config(), config.seed)?;
    let checkpoint = match &config.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TupError::io(dir, e))?;
            Some(dir.join(format!("{}.json", variant.tag())))
        }
        None => None,
    };
    trainer::train_model(
        &config.train_config(),
        &prepared.indexed,
        &features,
        variant,
        init,
        checkpoint.as_deref(),
    )
}

/// Ranks held-out items with fixed parameters.
pub fn evaluate_variant(
    prepared: &Prepared,
    variant: VariantKind,
    params: ModelParams,
    history: Option<TrainHistory>,
    config: &PipelineConfig,
) -> Result<VariantRun> {
    let start = Instant::now();
    let features = features(prepared, variant)?;
    let obj = NeuralObjective::new(variant, params, &features)?;
    let projections = obj.item_projections();
    let users = index_of(&prepared.indexed.user_ids);
    let items = index_of(&prepared.indexed.item_ids);
    let scorer = |user: &str, ids: &[&str]| -> Result<Vec<f64>> {
        let u = lookup(&users, user)?;
        let idx = ids.iter().map(|i| lookup(&items, i)).collect::<Result<Vec<_>>>()?;
        obj.scores_with(u, &idx, &projections)
    };
    let report = evaluate(&scorer, &prepared.split, &config.ks)?;
    let mut attention = BTreeMap::new();
    if variant.uses_attention() {
        for (u, id) in prepared.indexed.user_ids.iter().enumerate() {
            if let Some(a) = obj.attention(u)? {
                attention.insert(id.clone(), a);
            }
        }
    }
    Ok(VariantRun {
        tag: variant.tag().to_string(),
        report,
        history,
        params: Some(obj.params),
        attention,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains and evaluates one neural variant on prepared inputs.
pub fn run_variant(prepared: &Prepared, variant: VariantKind, config: &PipelineConfig) -> Result<VariantRun> {
    let start = Instant::now();
    let (params, history) = train_variant(prepared, variant, config)?;
    let mut run = evaluate_variant(prepared, variant, params, Some(history), config)?;
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}

pub fn run_popularity(prepared: &Prepared, config: &PipelineConfig) -> Result<VariantRun> {
    let start = Instant::now();
    let model = popularity_fit(&prepared.split);
    let scorer = |_: &str, ids: &[&str]| -> Result<Vec<f64>> { Ok(ids.iter().map(|i| model.count(i) as f64).collect()) };
    Ok(VariantRun {
        tag: POPULARITY_TAG.into(),
        report: evaluate(&scorer, &prepared.split, &config.ks)?,
        history: None,
        params: None,
        attention: BTreeMap::new(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn train_mf(prepared: &Prepared, config: &PipelineConfig) -> Result<(MfParams, TrainHistory)> {
    let (obj, history) = baselines::mf_train(&prepared.indexed, config.mf_k, &config.train_config())?;
    Ok((obj.into_params(&prepared.indexed), history))
}

pub fn evaluate_mf(prepared: &Prepared, params: &MfParams, history: Option<TrainHistory>, config: &PipelineConfig) -> Result<VariantRun> {
    let start = Instant::now();
    let scorer = |user: &str, ids: &[&str]| -> Result<Vec<f64>> { ids.iter().map(|i| params.predict(user, i)).collect() };
    Ok(VariantRun {
        tag: MF_TAG.into(),
        report: evaluate(&scorer, &prepared.split, &config.ks)?,
        history,
        params: None,
        attention: BTreeMap::new(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_mf(prepared: &Prepared, config: &PipelineConfig) -> Result<VariantRun> {
    let start = Instant::now();
    let (params, history) = train_mf(prepared, config)?;
    let mut run = evaluate_mf(prepared, &params, Some(history), config)?;
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}

/// Report row order: representation baselines, popularity, MF, then the
/// remaining variants as configured.
pub fn report_order(config: &PipelineConfig) -> Vec<String> {
    let is_baseline = |v: &VariantKind| matches!(v, VariantKind::Centric | VariantKind::TempFusion);
    let mut order: Vec<String> = config.variants.iter().filter(|v| is_baseline(v)).map(|v| v.tag().to_string()).collect();
    if config.popularity {
        order.push(POPULARITY_TAG.into());
    }
    if config.mf {
        order.push(MF_TAG.into());
    }
    order.extend(config.variants.iter().filter(|v| !is_baseline(v)).map(|v| v.tag().to_string()));
    order
}

/// Runs every configured variant plus the enabled reference recommenders.
pub fn run_all(prepared: &Prepared, config: &PipelineConfig) -> Result<ExperimentOutcome> {
    let mut order = Vec::new();
    let mut runs = BTreeMap::new();
    let mut push = |run: VariantRun| {
        log::info!("{}: {:.1}s", run.tag, run.seconds);
        order.push(run.tag.clone());
        runs.insert(run.tag.clone(), run);
    };
    let baselines_first = config
        .variants
        .iter()
        .filter(|v| matches!(v, VariantKind::Centric | VariantKind::TempFusion));
    for &v in baselines_first {
        push(run_variant(prepared, v, config)?);
    }
    if config.popularity {
        push(run_popularity(prepared, config)?);
    }
    if config.mf {
        push(run_mf(prepared, config)?);
    }
    for &v in config.variants.iter().filter(|v| !matches!(v, VariantKind::Centric | VariantKind::TempFusion)) {
        push(run_variant(prepared, v, config)?);
    }
    Ok(ExperimentOutcome { order, runs })
}

pub fn run_pipeline(
    split: SplitDataset,
    generator: &dyn TextGenerator,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<(Prepared, ExperimentOutcome)> {
    let prepared = prepare(split, generator, embedder, config)?;
    let outcome = run_all(&prepared, config)?;
    Ok((prepared, outcome))
}
