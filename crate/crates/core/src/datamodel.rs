//! Shared domain types: interactions, per-user histories, the item catalog,
//! embeddings and the temporally split dataset.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TupError};

/// One timestamped user-item event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Unix seconds.
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Result<Self> {
        let user_id = user_id.into();
        let item_id = item_id.into();
        if user_id.is_empty() {
            return Err(TupError::invalid("empty user id"));
        }
        if item_id.is_empty() {
            return Err(TupError::invalid("empty item id"));
        }
        if timestamp < 0 {
            return Err(TupError::invalid(format!("negative timestamp {timestamp}")));
        }
        Ok(Interaction {
            user_id,
            item_id,
            timestamp,
        })
    }
}

/// A single user's events in chronological order.
///
/// Ordering is ascending by timestamp; ties go to the lexically smaller
/// item id, then to input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub events: Vec<Interaction>,
}

impl UserHistory {
    /// Builds a history, sorting the events. Fails on mixed user ids.
    pub fn new(user_id: impl Into<String>, events: Vec<Interaction>) -> Result<Self> {
        validate_history(UserHistory {
            user_id: user_id.into(),
            events,
        })
    }

    pub fn empty(user_id: impl Into<String>) -> Self {
        UserHistory {
            user_id: user_id.into(),
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.item_id.as_str())
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.events.first().map(|e| e.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.events.last().map(|e| e.timestamp)
    }
}

/// Stable chronological sort with the item-id tie rule. Idempotent.
pub fn validate_history(mut history: UserHistory) -> Result<UserHistory> {
    if let Some(bad) = history.events.iter().find(|e| e.user_id != history.user_id) {
        return Err(TupError::invalid(format!(
            "history for `{}` contains an event of user `{}`",
            history.user_id, bad.user_id
        )));
    }
    history
        .events
        .sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>, description: impl Into<String>) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            title: title.into(),
            description: description.into(),
        }
    }

    /// Text fed to the embedder: title and description joined by one space,
    /// or the title alone when the description is empty.
    pub fn text(&self) -> String {
        let title = self.title.trim();
        let desc = self.description.trim();
        match (title.is_empty(), desc.is_empty()) {
            (false, false) => format!("{title} {desc}"),
            (false, true) => title.to_owned(),
            (true, false) => desc.to_owned(),
            (true, true) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    items: BTreeMap<String, ItemRecord>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record, returning the one it replaced.
    pub fn insert(&mut self, record: ItemRecord) -> Option<ItemRecord> {
        self.items.insert(record.item_id.clone(), record)
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items.get(item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Records in item-id order.
    pub fn iter(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn title(&self, item_id: &str) -> Result<&str> {
        self.get(item_id)
            .map(|r| r.title.as_str())
            .ok_or_else(|| TupError::invalid(format!("item `{item_id}` is not in the catalog")))
    }
}

impl FromIterator<ItemRecord> for ItemCatalog {
    fn from_iter<T: IntoIterator<Item = ItemRecord>>(iter: T) -> Self {
        let mut catalog = ItemCatalog::new();
        for record in iter {
            catalog.insert(record);
        }
        catalog
    }
}

/// Fixed-dimension real vector. Entries are stored as `f32`, the width used by
/// every file format in this crate; arithmetic that needs more precision
/// widens with [`Embedding::to_f64`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(TupError::invalid("embedding must have positive dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TupError::NonFinite("embedding".into()));
        }
        Ok(Embedding { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Profile horizon a generated text describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Short,
    Long,
    General,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::Short, Horizon::Long, Horizon::General];

    pub fn as_str(self) -> &'static str {
        match self {
            Horizon::Short => "short",
            Horizon::Long => "long",
            Horizon::General => "general",
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Horizon {
    type Err = TupError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Horizon::Short),
            "long" => Ok(Horizon::Long),
            "general" => Ok(Horizon::General),
            other => Err(TupError::invalid(format!("unknown horizon `{other}`"))),
        }
    }
}

/// One user's chronological partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: UserHistory,
    pub val: UserHistory,
    pub test: UserHistory,
}

impl UserSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the boundary ordering: max(train) <= min(val) <= min(test),
    /// skipping empty parts.
    pub fn boundaries_hold(&self) -> bool {
        let parts = [&self.train, &self.val, &self.test];
        let mut prev_max: Option<i64> = None;
        for part in parts {
            if let (Some(prev), Some(first)) = (prev_max, part.first_timestamp()) {
                if first < prev {
                    return false;
                }
            }
            if let Some(last) = part.last_timestamp() {
                prev_max = Some(prev_max.map_or(last, |p| p.max(last)));
            }
        }
        true
    }
}

/// Temporally split dataset over all retained users.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: BTreeMap<String, UserSplit>,
    pub catalog: ItemCatalog,
    /// Users dropped for having too short a history.
    #[serde(default)]
    pub excluded_users: Vec<String>,
}

impl SplitDataset {
    pub fn user(&self, user_id: &str) -> Result<&UserSplit> {
        self.users
            .get(user_id)
            .ok_or_else(|| TupError::invalid(format!("user `{user_id}` is not in the split")))
    }

    pub fn n_interactions(&self) -> usize {
        self.users.values().map(UserSplit::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user_id: String,
    pub item_id: String,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(TupError::invalid(format!("label must be 0 or 1, got {label}")));
        }
        Ok(LabeledPair {
            user_id: user_id.into(),
            item_id: item_id.into(),
            label,
        })
    }
}
