//! Seeded synthetic datasets with two-topic preference drift.
//!
//! Items are assigned round-robin to topics and described with words from a
//! per-topic vocabulary, so item texts of different topics share no tokens.
//! Each user draws a home topic and a second topic. Events before the drift
//! index come from the home topic; later events come from the second topic
//! with probability `drift_strength`. The second topic is drawn from all
//! topics, so some users never change.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Interaction, ItemCatalog, ItemRecord, SplitDataset};
use crate::encoder::HashingEmbedder;
use crate::error::{Result, TupError};
use crate::ingest::{
    build_histories, parse_catalog, parse_interactions, split_dataset, write_catalog, write_interactions, CatalogFields,
    InteractionFields, SplitConfig,
};
use crate::pipeline::{run_pipeline, ExperimentOutcome, PipelineConfig, Prepared};
use crate::profiler::TemplateGenerator;
use crate::seed::{rng_for, Rng};

pub const VOCAB_SIZE: usize = 50;
const BASE_TIMESTAMP: i64 = 1_500_000_000;

/// Where a user's drift index sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftAnchor {
    /// `drift_point` of the user's training prefix (the first
    /// `train_fraction` of their events).
    TrainWindow,
    /// `drift_point` of the whole timeline.
    FullHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub drift_point: f64,
    pub drift_strength: f64,
    pub drift_anchor: DriftAnchor,
    pub train_fraction: f64,
    /// Exponent of the within-topic Zipf popularity; 0 is uniform.
    pub popularity_skew: f64,
    pub title_keywords: usize,
    pub description_keywords: usize,
    /// Zipf exponent of keyword frequency within a vocabulary; 0 is uniform.
    pub keyword_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 100,
            n_topics: 2,
            events_min: 20,
            events_max: 40,
            drift_point: 0.7,
            drift_strength: 0.9,
            drift_anchor: DriftAnchor::TrainWindow,
            train_fraction: 0.6,
            popularity_skew: 1.0,
            title_keywords: 3,
            description_keywords: 8,
            keyword_skew: 1.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TupError::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_topics == 0 {
            return bad("synth counts must be positive".into());
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return bad(format!("bad events range {}..={}", self.events_min, self.events_max));
        }
        for (name, p) in [
            ("drift_point", self.drift_point),
            ("drift_strength", self.drift_strength),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1]"));
            }
        }
        for (name, v) in [("popularity_skew", self.popularity_skew), ("keyword_skew", self.keyword_skew)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be non-negative"));
            }
        }
        let per_topic = self.n_items / self.n_topics;
        if per_topic < self.events_max {
            return bad(format!(
                "{per_topic} items per topic cannot supply {} distinct events",
                self.events_max
            ));
        }
        if self.title_keywords == 0 || self.title_keywords > VOCAB_SIZE || self.description_keywords < 3 || self.description_keywords > VOCAB_SIZE {
            return bad("keyword counts must be in 1..=50 (title) and 3..=50 (description)".into());
        }
        Ok(())
    }

    /// Index of the first event that may come from the second topic.
    pub fn drift_index(&self, n_events: usize) -> usize {
        let span = match self.drift_anchor {
            DriftAnchor::TrainWindow => (self.train_fraction * n_events as f64 + 1e-9).floor() as usize,
            DriftAnchor::FullHistory => n_events,
        };
        (self.drift_point * span as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUser {
    pub user_id: String,
    pub home_topic: usize,
    pub second_topic: usize,
    pub drift_index: usize,
}

impl SynthUser {
    pub fn drifts(&self) -> bool {
        self.home_topic != self.second_topic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub interactions: Vec<Interaction>,
    pub catalog: ItemCatalog,
    pub item_topic: BTreeMap<String, usize>,
    pub vocabularies: Vec<Vec<String>>,
    pub users: Vec<SynthUser>,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
    w
}

/// Disjoint per-topic word lists.
fn vocabularies(n_topics: usize, rng: &mut Rng) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    (0..n_topics)
        .map(|_| {
            let mut words = Vec::with_capacity(VOCAB_SIZE);
            while words.len() < VOCAB_SIZE {
                let w = pseudo_word(rng);
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Zipf weight of 0-based rank `r`.
fn zipf(r: usize, exponent: f64) -> f64 {
    ((r + 1) as f64).powf(-exponent)
}

fn weighted_pick(weights: &[f64], available: &[bool], rng: &mut Rng) -> Option<usize> {
    let total: f64 = weights.iter().zip(available).filter(|(_, &a)| a).map(|(w, _)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    let mut last = None;
    for (i, (&w, &a)) in weights.iter().zip(available).enumerate() {
        if !a {
            continue;
        }
        last = Some(i);
        if x < w {
            return Some(i);
        }
        x -= w;
    }
    last
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "synth-text");
    let vocab = vocabularies(config.n_topics, &mut rng);
    let width = config.n_items.saturating_sub(1).to_string().len().max(3);
    let word_weight: Vec<f64> = (0..VOCAB_SIZE).map(|r| zipf(r, config.keyword_skew)).collect();
    let pick_words = |words: &[String], n: usize, rng: &mut Rng| -> Result<Vec<String>> {
        let ranked: Vec<(usize, &String)> = words.iter().enumerate().collect();
        Ok(ranked
            .choose_multiple_weighted(rng, n, |(r, _)| word_weight[*r])
            .map_err(|e| TupError::invalid(format!("keyword sampling: {e}")))?
            .map(|(_, w)| (*w).clone())
            .collect())
    };

    let mut catalog = ItemCatalog::new();
    let mut item_topic = BTreeMap::new();
    let mut topic_items: Vec<Vec<String>> = vec![Vec::new(); config.n_topics];
    for i in 0..config.n_items {
        let topic = i % config.n_topics;
        let words = &vocab[topic];
        let title_words: Vec<String> = pick_words(words, config.title_keywords, &mut rng)?
            .iter()
            .map(|w| capitalize(w))
            .collect();
        let title = format!("{} {:0width$}", title_words.join(" "), i);
        let desc_words = pick_words(words, config.description_keywords, &mut rng)?;
        let description = format!("{}.", capitalize(&desc_words.join(" ")));
        let id = format!("item{:0width$}", i);
        catalog.insert(ItemRecord::new(id.clone(), title, description));
        item_topic.insert(id.clone(), topic);
        topic_items[topic].push(id);
    }

    // Within-topic popularity: Zipf weights over a seeded rank order.
    let mut rng = rng_for(config.seed, "synth-popularity");
    let weights: Vec<Vec<f64>> = topic_items
        .iter()
        .map(|items| {
            let mut ranks: Vec<usize> = (0..items.len()).collect();
            ranks.shuffle(&mut rng);
            ranks
                .iter()
                .map(|&r| zipf(r, config.popularity_skew))
                .collect()
        })
        .collect();

    let mut rng = rng_for(config.seed, "synth-users");
    let uwidth = config.n_users.saturating_sub(1).to_string().len().max(4);
    let mut interactions = Vec::new();
    let mut users = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let user_id = format!("user{:0uwidth$}", u);
        let home = rng.random_range(0..config.n_topics);
        let second = rng.random_range(0..config.n_topics);
        let n = rng.random_range(config.events_min..=config.events_max);
        let drift_index = config.drift_index(n);
        let mut available: Vec<Vec<bool>> = topic_items.iter().map(|t| vec![true; t.len()]).collect();
        let mut ts = BASE_TIMESTAMP + rng.random_range(0..30 * 86_400);
        for k in 0..n {
            let mut topic = if k >= drift_index && rng.random::<f64>() < config.drift_strength {
                second
            } else {
                home
            };
            if !available[topic].iter().any(|&a| a) {
                topic = home;
            }
            let j = weighted_pick(&weights[topic], &available[topic], &mut rng)
                .ok_or_else(|| TupError::invalid("synthetic topic ran out of items"))?;
            available[topic][j] = false;
            interactions.push(Interaction::new(&user_id, &topic_items[topic][j], ts)?);
            ts += rng.random_range(3_600..3 * 86_400);
        }
        users.push(SynthUser {
            user_id,
            home_topic: home,
            second_topic: second,
            drift_index,
        });
    }

    Ok(SynthDataset {
        interactions,
        catalog,
        item_topic,
        vocabularies: vocab,
        users,
    })
}

impl SynthDataset {
    /// Writes `interactions.jsonl` and `catalog.jsonl` in the ingest formats.
    pub fn write(&self, dir: &std::path::Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| TupError::io(dir, e))?;
        let ip = dir.join("interactions.jsonl");
        let cp = dir.join("catalog.jsonl");
        let file = std::fs::File::create(&ip).map_err(|e| TupError::io(&ip, e))?;
        write_interactions(std::io::BufWriter::new(file), &InteractionFields::default(), &self.interactions)
            .map_err(|e| TupError::io(&ip, e))?;
        let file = std::fs::File::create(&cp).map_err(|e| TupError::io(&cp, e))?;
        write_catalog(std::io::BufWriter::new(file), &CatalogFields::default(), &self.catalog)
            .map_err(|e| TupError::io(&cp, e))?;
        Ok((ip, cp))
    }

    /// Topic of each of the user's events, chronological.
    pub fn topic_sequence(&self, user_id: &str) -> Vec<usize> {
        self.interactions
            .iter()
            .filter(|e| e.user_id == user_id)
            .map(|e| self.item_topic[&e.item_id])
            .collect()
    }
}

/// Serializes to the ingest formats and parses back, so synthetic runs take
/// the same path as real data.
pub fn to_split(data: &SynthDataset, split: &SplitConfig) -> Result<SplitDataset> {
    let mut ibuf = Vec::new();
    write_interactions(&mut ibuf, &InteractionFields::default(), &data.interactions).map_err(|e| TupError::io("<memory>", e))?;
    let mut cbuf = Vec::new();
    write_catalog(&mut cbuf, &CatalogFields::default(), &data.catalog).map_err(|e| TupError::io("<memory>", e))?;
    let interactions = parse_interactions(&ibuf[..], &InteractionFields::default(), true)?.value;
    let catalog = parse_catalog(&cbuf[..], &CatalogFields::default(), true)?.value;
    let histories = build_histories(interactions, &catalog, split.dedup)?;
    split_dataset(&histories.users, catalog, split)
}

/// Pipeline settings of the reference drift experiment.
pub fn reference_pipeline_config() -> PipelineConfig {
    PipelineConfig {
        dim: 32,
        seed: 7,
        ..PipelineConfig::default()
    }
}

/// Template profiles and hashing embeddings over a generated dataset.
pub fn run_drift_experiment(synth: &SynthConfig, pipeline: &PipelineConfig) -> Result<(Prepared, ExperimentOutcome)> {
    let data = generate(synth)?;
    let split = to_split(&data, &pipeline.split)?;
    let generator = TemplateGenerator::new(pipeline.short_window);
    let embedder = HashingEmbedder::new(pipeline.dim, pipeline.seed);
    run_pipeline(split, &generator, &embedder, pipeline)
}
