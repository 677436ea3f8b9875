use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tup_core::baselines::MfParams;
use tup_core::cache::{CacheStats, Digest32};
use tup_core::ingest::{self, DatasetStats, Reject};
use tup_core::model::read_checkpoint;
use tup_core::pipeline::{self, ExperimentOutcome, Prepared, VariantRun, MF_TAG, POPULARITY_TAG};
use tup_core::profiler::PromptRecord;
use tup_core::synth::{self, SynthConfig};
use tup_core::{EmbeddingTable, Metric, ProfileText, Result, SplitDataset, TupError};

use crate::config::{read_json, write_json, RunConfig, Source};

pub const SPLIT: &str = "split.json";
pub const STATS: &str = "stats.json";
pub const PROFILES: &str = "profiles.jsonl";
pub const PROMPTS: &str = "prompts.jsonl";
pub const ITEM_TABLE: &str = "items.emb";
pub const PROFILE_TABLE: &str = "profiles.emb";
pub const TRAIN_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    #[serde(flatten)]
    pub dataset: DatasetStats,
    pub excluded_users: usize,
    pub rejected_interactions: usize,
    pub rejected_catalog: usize,
    pub dropped_unknown_items: usize,
    pub dropped_duplicates: usize,
    pub min_history: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub backend: String,
    pub model: String,
    pub outputs: usize,
    /// Requests that reached the backend, zero for a warm cache.
    pub backend_calls: usize,
    /// Backend requests that went over the network.
    pub network_calls: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub hit_rate: f64,
}

impl StageStats {
    fn new(backend: &str, model: &str, outputs: usize, backend_calls: usize, cache: CacheStats) -> Self {
        StageStats {
            backend: backend.into(),
            model: model.into(),
            outputs,
            backend_calls,
            network_calls: if backend.starts_with("remote") { backend_calls } else { 0 },
            cache_hits: cache.hits,
            cache_misses: cache.misses,
            hit_rate: cache.hit_rate(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| TupError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| TupError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| TupError::io(path, e))?))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w).map_err(|e| TupError::io(path, e))?;
    }
    w.flush().map_err(|e| TupError::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| TupError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| TupError::Parse {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(rows)
}

fn write_table(path: &Path, table: &EmbeddingTable) -> Result<()> {
    table.write(create(path)?).map_err(|e| TupError::io(path, e))
}

fn read_table(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::read(open(path)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

/// Parses or generates the dataset and splits it, without writing anything.
pub fn load_split(cfg: &RunConfig) -> Result<(SplitDataset, IngestStats, Vec<Reject>, Vec<Reject>)> {
    let (split, bad_i, bad_c, unknown, dups) = match cfg.source()? {
        Source::Files { interactions, catalog } => {
            let parsed_i = ingest::parse_interactions(ingest::open_input(interactions)?, &cfg.interaction_fields, cfg.strict)?;
            let parsed_c = ingest::parse_catalog(ingest::open_input(catalog)?, &cfg.catalog_fields, cfg.strict)?;
            for w in parsed_i.warnings.iter().chain(&parsed_c.warnings) {
                log::warn!("{w}");
            }
            let histories = ingest::build_histories(parsed_i.value, &parsed_c.value, cfg.pipeline.split.dedup)?;
            let split = ingest::split_dataset(&histories.users, parsed_c.value, &cfg.pipeline.split)?;
            (split, parsed_i.rejects, parsed_c.rejects, histories.dropped_unknown_items, histories.dropped_duplicates)
        }
        Source::Synth(s) => {
            let data = synth::generate(s)?;
            (synth::to_split(&data, &cfg.pipeline.split)?, Vec::new(), Vec::new(), 0, 0)
        }
    };
    let stats = IngestStats {
        dataset: ingest::dataset_stats(&split),
        excluded_users: split.excluded_users.len(),
        rejected_interactions: bad_i.len(),
        rejected_catalog: bad_c.len(),
        dropped_unknown_items: unknown,
        dropped_duplicates: dups,
        min_history: cfg.pipeline.split.min_history.max(ingest::MIN_HISTORY),
    };
    Ok((split, stats, bad_i, bad_c))
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let (split, stats, bad_i, bad_c) = load_split(cfg)?;
    cfg.echo()?;
    write_json(&cfg.out(SPLIT), &split)?;
    write_json(&cfg.out(STATS), &stats)?;
    ingest::write_rejects_csv(create(&cfg.out("rejects_interactions.csv"))?, &bad_i)?;
    ingest::write_rejects_csv(create(&cfg.out("rejects_catalog.csv"))?, &bad_c)?;
    print_json(&stats)
}

/// Dataset statistics of the ingested split, or of the configured input
/// when nothing has been ingested yet.
pub fn stats(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out(SPLIT);
    let dataset = if path.exists() {
        ingest::dataset_stats(&read_json::<SplitDataset>(&path)?)
    } else {
        load_split(cfg)?.1.dataset
    };
    print_json(&dataset)
}

fn read_split(cfg: &RunConfig) -> Result<SplitDataset> {
    let path = cfg.out(SPLIT);
    if !path.exists() {
        return Err(TupError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no split; run `tup ingest` first"),
        ));
    }
    read_json(&path)
}

pub fn profile(cfg: &RunConfig) -> Result<()> {
    let generator = cfg.generator()?;
    let split = read_split(cfg)?;
    cfg.echo()?;
    let (profiles, prompts, cache) = pipeline::generate_profiles(&split, generator.as_ref(), &cfg.pipeline)?;
    write_jsonl(&cfg.out(PROFILES), &profiles)?;
    write_jsonl(&cfg.out(PROMPTS), &prompts)?;
    let stats = StageStats::new(generator.backend_id(), generator.model_id(), profiles.len(), generator.calls(), cache);
    write_json(&cfg.out("profile_stats.json"), &stats)?;
    print_json(&stats)
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let embedder = cfg.embedder()?;
    let split = read_split(cfg)?;
    let profiles: Vec<ProfileText> = read_jsonl(&cfg.out(PROFILES))?;
    cfg.echo()?;
    let (items, users, cache) = pipeline::encode_tables(&split, &profiles, embedder.as_ref(), &cfg.pipeline)?;
    write_table(&cfg.out(ITEM_TABLE), &items)?;
    write_table(&cfg.out(PROFILE_TABLE), &users)?;
    let stats = StageStats::new(
        embedder.backend_id(),
        embedder.model_id(),
        items.len() + users.len(),
        embedder.calls(),
        cache,
    );
    write_json(&cfg.out("embed_stats.json"), &stats)?;
    print_json(&stats)
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let split = read_split(cfg)?;
    let profiles: Vec<ProfileText> = read_jsonl(&cfg.out(PROFILES))?;
    let prompts: Vec<PromptRecord> = read_jsonl(&cfg.out(PROMPTS))?;
    let items = read_table(&cfg.out(ITEM_TABLE))?;
    let users = read_table(&cfg.out(PROFILE_TABLE))?;
    if items.dim() != cfg.pipeline.dim {
        return Err(TupError::DimMismatch {
            expected: cfg.pipeline.dim,
            got: items.dim(),
        });
    }
    pipeline::assemble(split, profiles, prompts, items, users, &cfg.pipeline)
}

fn checkpoint_dir(cfg: &RunConfig) -> &Path {
    cfg.pipeline
        .checkpoint_dir
        .as_deref()
        .expect("checkpoint_dir is filled by RunConfig::finish")
}

/// Digest of everything training reads: the training-relevant config and
/// the stage inputs.
fn train_fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut settings = cfg.pipeline.clone();
    settings.cache_dir = None;
    settings.checkpoint_dir = None;
    settings.ks.clear();
    let settings = serde_json::to_vec(&settings)?;
    let mut parts = vec![settings];
    for name in [SPLIT, ITEM_TABLE, PROFILE_TABLE] {
        let path = cfg.out(name);
        parts.push(std::fs::read(&path).map_err(|e| TupError::io(&path, e))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(Digest32::of_parts(&refs).to_hex())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainManifest {
    fingerprint: String,
    trained: Vec<String>,
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    variant: &'a str,
    epochs: usize,
    best_epoch: usize,
}

fn write_history(cfg: &RunConfig, tag: &str, history: &tup_core::TrainHistory) -> Result<()> {
    history.write_csv(create(&cfg.out(&format!("train_history_{tag}.csv")))?)
}

/// Trains every configured neural variant and MF. A rerun over unchanged
/// inputs leaves the checkpoints alone.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let prepared = load_prepared(cfg)?;
    cfg.echo()?;
    let dir = checkpoint_dir(cfg);
    let fingerprint = train_fingerprint(cfg)?;
    let manifest_path = dir.join(TRAIN_MANIFEST);
    let mut wanted: Vec<String> = cfg.pipeline.variants.iter().map(|v| v.tag().to_string()).collect();
    if cfg.pipeline.mf {
        wanted.push(MF_TAG.into());
    }
    if manifest_path.exists() {
        let old: TrainManifest = read_json(&manifest_path)?;
        let present = wanted.iter().all(|t| dir.join(format!("{t}.json")).exists());
        if old.fingerprint == fingerprint && old.trained == wanted && present {
            print_json(&serde_json::json!({"train": "up to date", "fingerprint": fingerprint}))?;
            return Ok(());
        }
    }
    for &v in &cfg.pipeline.variants {
        let (_, history) = pipeline::train_variant(&prepared, v, &cfg.pipeline)?;
        write_history(cfg, v.tag(), &history)?;
        print_json(&TrainSummary {
            variant: v.tag(),
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
        })?;
    }
    if cfg.pipeline.mf {
        let (params, history) = pipeline::train_mf(&prepared, &cfg.pipeline)?;
        write_json(&dir.join(format!("{MF_TAG}.json")), &params)?;
        write_history(cfg, MF_TAG, &history)?;
        print_json(&TrainSummary {
            variant: MF_TAG,
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
        })?;
    }
    write_json(
        &manifest_path,
        &TrainManifest {
            fingerprint,
            trained: wanted,
        },
    )
}

fn load_variant(cfg: &RunConfig, prepared: &Prepared, tag: &str) -> Result<VariantRun> {
    let dir = checkpoint_dir(cfg);
    let path = dir.join(format!("{tag}.json"));
    if tag == POPULARITY_TAG {
        return pipeline::run_popularity(prepared, &cfg.pipeline);
    }
    if tag == MF_TAG {
        let params: MfParams = read_json(&path)?;
        return pipeline::evaluate_mf(prepared, &params, None, &cfg.pipeline);
    }
    let (variant, params) = read_checkpoint(open(&path)?)?;
    if variant.tag() != tag {
        return Err(TupError::Format(format!("{} holds variant `{variant}`, expected `{tag}`", path.display())));
    }
    pipeline::evaluate_variant(prepared, variant, params, None, &cfg.pipeline)
}

fn write_attention(cfg: &RunConfig, outcome: &ExperimentOutcome) -> Result<()> {
    let path = cfg.out("attention.csv");
    let mut w = create(&path)?;
    let io = |e| TupError::io(&path, e);
    writeln!(w, "variant,user_id,alpha_short,alpha_long").map_err(io)?;
    for tag in &outcome.order {
        for (user, (s, l)) in &outcome.runs[tag].attention {
            writeln!(w, "{tag},{user},{s:?},{l:?}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Serialize)]
struct ReportLine<'a> {
    variant: &'a str,
    recall_at_10: Option<f64>,
    ndcg_at_10: Option<f64>,
    users: usize,
}

fn finish_report(cfg: &RunConfig, outcome: &ExperimentOutcome) -> Result<()> {
    outcome.emit(&cfg.output_dir)?;
    write_attention(cfg, outcome)?;
    for tag in &outcome.order {
        let report = &outcome.runs[tag].report;
        print_json(&ReportLine {
            variant: tag,
            recall_at_10: report.value(Metric::Recall, 10).ok(),
            ndcg_at_10: report.value(Metric::Ndcg, 10).ok(),
            users: report.per_user.len(),
        })?;
    }
    Ok(())
}

/// Evaluates trained checkpoints and writes the comparison reports.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let prepared = load_prepared(cfg)?;
    cfg.echo()?;
    let order = pipeline::report_order(&cfg.pipeline);
    let mut runs = BTreeMap::new();
    for tag in &order {
        runs.insert(tag.clone(), load_variant(cfg, &prepared, tag)?);
    }
    finish_report(cfg, &ExperimentOutcome { order, runs })
}

/// Every stage in sequence: ingest, profiles, embeddings, training and the
/// comparison report of all configured variants.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    // Credentials are checked before any stage runs.
    cfg.generator()?;
    cfg.embedder()?;
    ingest(cfg)?;
    profile(cfg)?;
    embed(cfg)?;
    train(cfg)?;
    eval(cfg)
}

/// The run config of a synthetic experiment. With `data_dir`, the dataset is
/// written there as JSONL and the config points at the files.
pub fn synth_config(synth: SynthConfig, dim: usize, data_dir: Option<&Path>) -> Result<RunConfig> {
    synth.validate()?;
    let mut cfg = RunConfig {
        pipeline: tup_core::pipeline::PipelineConfig {
            dim,
            seed: synth.seed,
            ..synth::reference_pipeline_config()
        },
        ..RunConfig::default()
    };
    match data_dir {
        Some(dir) => {
            let (i, c) = synth::generate(&synth)?.write(dir)?;
            cfg.interactions = Some(i);
            cfg.catalog = Some(c);
        }
        None => cfg.synth = Some(synth),
    }
    Ok(cfg)
}
