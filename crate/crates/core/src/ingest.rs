//! Reading newline-delimited JSON interaction and metadata dumps, building
//! per-user histories and the chronological train/validation/test split.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{Interaction, ItemCatalog, ItemRecord, SplitDataset, UserHistory, UserSplit};
use crate::error::{Result, TupError};

/// JSON field names for interaction records. Defaults follow the Amazon
/// review dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionFields {
    pub user: String,
    pub item: String,
    pub timestamp: String,
    /// Raw timestamps are divided by this (1000 for millisecond dumps).
    pub timestamp_divisor: i64,
}

impl Default for InteractionFields {
    fn default() -> Self {
        InteractionFields {
            user: "reviewerID".into(),
            item: "asin".into(),
            timestamp: "unixReviewTime".into(),
            timestamp_divisor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogFields {
    pub item: String,
    pub title: String,
    pub description: String,
}

impl Default for CatalogFields {
    fn default() -> Self {
        CatalogFields {
            item: "asin".into(),
            title: "title".into(),
            description: "description".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub rejects: Vec<Reject>,
    pub warnings: Vec<String>,
}

/// Opens a file for line reading, transparently decompressing gzip input.
pub fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| TupError::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| TupError::io(path, e))?;
    let file = File::open(path).map_err(|e| TupError::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn timestamp_field(obj: &serde_json::Map<String, Value>, key: &str) -> std::result::Result<i64, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(format!("missing timestamp field `{key}`")),
        Some(Value::Number(n)) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| format!("timestamp `{n}` is not an integer")),
        Some(Value::String(s)) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("timestamp `{s}` is not an integer")),
        Some(other) => Err(format!("timestamp has unsupported type: {other}")),
    }
}

fn for_each_record<R: BufRead>(
    stream: R,
    mut f: impl FnMut(usize, serde_json::Map<String, Value>) -> std::result::Result<(), String>,
    strict: bool,
) -> Result<Vec<Reject>> {
    let mut rejects = Vec::new();
    for (idx, line) in stream.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TupError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(obj)) => f(line_no, obj),
            Ok(_) => Err("record is not a JSON object".to_owned()),
            Err(e) => Err(format!("malformed JSON: {e}")),
        };
        if let Err(reason) = outcome {
            if strict {
                return Err(TupError::Parse { line: line_no, reason });
            }
            rejects.push(Reject { line_no, reason });
        }
    }
    Ok(rejects)
}

/// Parses one interaction per line, in input order. Bad lines go to the
/// rejects list, or abort the parse in strict mode.
pub fn parse_interactions<R: BufRead>(stream: R, fields: &InteractionFields, strict: bool) -> Result<Parsed<Vec<Interaction>>> {
    if fields.timestamp_divisor <= 0 {
        return Err(TupError::Config("timestamp_divisor must be positive".into()));
    }
    let mut out = Vec::new();
    let rejects = for_each_record(
        stream,
        |_, obj| {
            let user = string_field(&obj, &fields.user).ok_or_else(|| format!("missing user field `{}`", fields.user))?;
            let item = string_field(&obj, &fields.item).ok_or_else(|| format!("missing item field `{}`", fields.item))?;
            let ts = timestamp_field(&obj, &fields.timestamp)? / fields.timestamp_divisor;
            let interaction = Interaction::new(user, item, ts).map_err(|e| e.to_string())?;
            out.push(interaction);
            Ok(())
        },
        strict,
    )?;
    Ok(Parsed {
        value: out,
        rejects,
        warnings: Vec::new(),
    })
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    match obj.get(key) {
        Some(Value::String(s)) => s.trim().to_owned(),
        // Some dumps store descriptions as a list of paragraphs.
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" "),
        _ => String::new(),
    }
}

/// Parses item metadata. A repeated item id replaces the earlier record and
/// adds a warning.
pub fn parse_catalog<R: BufRead>(stream: R, fields: &CatalogFields, strict: bool) -> Result<Parsed<ItemCatalog>> {
    let mut catalog = ItemCatalog::new();
    let mut warnings = Vec::new();
    let rejects = for_each_record(
        stream,
        |line_no, obj| {
            let item_id = string_field(&obj, &fields.item)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("missing item field `{}`", fields.item))?;
            let title = text_field(&obj, &fields.title);
            let description = text_field(&obj, &fields.description);
            if title.is_empty() && description.is_empty() {
                return Err(format!("item `{item_id}` has neither title nor description"));
            }
            if catalog.insert(ItemRecord::new(item_id.clone(), title, description)).is_some() {
                let msg = format!("line {line_no}: duplicate item `{item_id}` replaces earlier record");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Ok(())
        },
        strict,
    )?;
    Ok(Parsed {
        value: catalog,
        rejects,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histories {
    pub users: BTreeMap<String, UserHistory>,
    /// Interactions whose item is missing from the catalog.
    pub dropped_unknown_items: usize,
    /// Repeated (user, item) events removed when deduplication is on.
    pub dropped_duplicates: usize,
}

/// Groups interactions by user and sorts each history chronologically.
pub fn build_histories(interactions: Vec<Interaction>, catalog: &ItemCatalog, dedup: bool) -> Result<Histories> {
    let mut grouped: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    let mut dropped_unknown_items = 0;
    for interaction in interactions {
        if !catalog.contains(&interaction.item_id) {
            dropped_unknown_items += 1;
            continue;
        }
        grouped.entry(interaction.user_id.clone()).or_default().push(interaction);
    }
    let mut dropped_duplicates = 0;
    let mut users = BTreeMap::new();
    for (user_id, events) in grouped {
        let mut history = UserHistory::new(user_id.clone(), events)?;
        if dedup {
            let mut seen = HashSet::new();
            let before = history.events.len();
            history.events.retain(|e| seen.insert(e.item_id.clone()));
            dropped_duplicates += before - history.events.len();
        }
        users.insert(user_id, history);
    }
    Ok(Histories {
        users,
        dropped_unknown_items,
        dropped_duplicates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || self.train <= 0.0 || self.test <= 0.0 {
            return Err(TupError::Config(format!("invalid split ratios {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TupError::Config(format!("split ratios {self:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Train/val and val/test cut indices for a history of length `n`.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        // Ratios like 0.6 are not exact in binary; the slack keeps
        // floor(0.6 * 10) at 6 rather than 5.
        const SLACK: f64 = 1e-9;
        let nf = n as f64;
        let train_end = ((self.train * nf) + SLACK).floor() as usize;
        let val_end = (((self.train + self.val) * nf) + SLACK).floor() as usize;
        let train_end = train_end.clamp(1.min(n), n);
        let val_end = val_end.clamp(train_end, n.saturating_sub(1).max(train_end));
        (train_end, val_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    /// Users with fewer events are excluded. Values below 3 are raised to 3.
    pub min_history: usize,
    pub dedup: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: SplitRatios::default(),
            min_history: MIN_HISTORY,
            dedup: false,
        }
    }
}

/// One event per split part.
pub const MIN_HISTORY: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum SplitOutcome {
    Split(UserSplit),
    Excluded,
}

/// Chronological split of one history. Cut points are floor(0.6n) and
/// floor(0.8n) for the default ratios.
pub fn temporal_split(history: &UserHistory, ratios: &SplitRatios, min_history: usize) -> Result<SplitOutcome> {
    if history.is_empty() {
        return Err(TupError::invalid(format!("history of `{}` is empty", history.user_id)));
    }
    ratios.validate()?;
    let n = history.len();
    if n < min_history.max(MIN_HISTORY) {
        return Ok(SplitOutcome::Excluded);
    }
    let (train_end, val_end) = ratios.boundaries(n);
    let part = |range: std::ops::Range<usize>| UserHistory {
        user_id: history.user_id.clone(),
        events: history.events[range].to_vec(),
    };
    Ok(SplitOutcome::Split(UserSplit {
        train: part(0..train_end),
        val: part(train_end..val_end),
        test: part(val_end..n),
    }))
}

pub fn split_dataset(histories: &BTreeMap<String, UserHistory>, catalog: ItemCatalog, config: &SplitConfig) -> Result<SplitDataset> {
    config.ratios.validate()?;
    let mut users = BTreeMap::new();
    let mut excluded_users = Vec::new();
    for (user_id, history) in histories {
        if history.is_empty() {
            excluded_users.push(user_id.clone());
            continue;
        }
        match temporal_split(history, &config.ratios, config.min_history)? {
            SplitOutcome::Split(split) => {
                users.insert(user_id.clone(), split);
            }
            SplitOutcome::Excluded => excluded_users.push(user_id.clone()),
        }
    }
    Ok(SplitDataset {
        users,
        catalog,
        excluded_users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    /// Interactions divided by users.
    pub avg_profile_size: f64,
}

pub fn dataset_stats(split: &SplitDataset) -> DatasetStats {
    let mut items = HashSet::new();
    let mut n_interactions = 0;
    for user in split.users.values() {
        for part in [&user.train, &user.val, &user.test] {
            n_interactions += part.len();
            items.extend(part.item_ids());
        }
    }
    let n_users = split.users.len();
    DatasetStats {
        n_users,
        n_items: items.len(),
        n_interactions,
        avg_profile_size: if n_users == 0 { 0.0 } else { n_interactions as f64 / n_users as f64 },
    }
}

pub fn write_rejects_csv<W: Write>(writer: W, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["line_no", "reason"])?;
    for r in rejects {
        w.write_record([r.line_no.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| TupError::io("rejects.csv", e))?;
    Ok(())
}

/// Writes interactions in the ingest input format.
pub fn write_interactions<'a, W: Write>(
    mut writer: W,
    fields: &InteractionFields,
    interactions: impl IntoIterator<Item = &'a Interaction>,
) -> std::io::Result<()> {
    for it in interactions {
        let mut obj = serde_json::Map::new();
        obj.insert(fields.user.clone(), Value::String(it.user_id.clone()));
        obj.insert(fields.item.clone(), Value::String(it.item_id.clone()));
        obj.insert(fields.timestamp.clone(), Value::from(it.timestamp * fields.timestamp_divisor));
        writeln!(writer, "{}", Value::Object(obj))?;
    }
    Ok(())
}

pub fn write_catalog<W: Write>(mut writer: W, fields: &CatalogFields, catalog: &ItemCatalog) -> std::io::Result<()> {
    for record in catalog.iter() {
        let mut obj = serde_json::Map::new();
        obj.insert(fields.item.clone(), Value::String(record.item_id.clone()));
        obj.insert(fields.title.clone(), Value::String(record.title.clone()));
        obj.insert(fields.description.clone(), Value::String(record.description.clone()));
        writeln!(writer, "{}", Value::Object(obj))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interactions(src: &str) -> Parsed<Vec<Interaction>> {
        parse_interactions(src.as_bytes(), &InteractionFields::default(), false).unwrap()
    }

    fn history(n: usize) -> UserHistory {
        let events = (0..n).map(|t| Interaction::new("u", format!("i{t:03}"), t as i64).unwrap()).collect();
        UserHistory::new("u", events).unwrap()
    }

    fn sizes(outcome: SplitOutcome) -> (usize, usize, usize) {
        match outcome {
            SplitOutcome::Split(s) => (s.train.len(), s.val.len(), s.test.len()),
            SplitOutcome::Excluded => panic!("excluded"),
        }
    }

    #[test]
    fn parses_amazon_fields() {
        let p = interactions(r#"{"reviewerID":"u1","asin":"i9","unixReviewTime":1500000000}"#);
        assert_eq!(p.value, vec![Interaction::new("u1", "i9", 1_500_000_000).unwrap()]);
        assert!(p.rejects.is_empty());
    }

    #[test]
    fn missing_item_is_rejected_and_parse_continues() {
        let src = "{\"reviewerID\":\"u1\",\"unixReviewTime\":1}\n{\"reviewerID\":\"u1\",\"asin\":\"a\",\"unixReviewTime\":2}\n";
        let p = interactions(src);
        assert_eq!(p.value.len(), 1);
        assert_eq!(p.rejects.len(), 1);
        assert_eq!(p.rejects[0].line_no, 1);
    }

    #[test]
    fn missing_timestamp_rejected() {
        let p = interactions(r#"{"reviewerID":"u1","asin":"a"}"#);
        assert!(p.value.is_empty());
        assert!(p.rejects[0].reason.contains("timestamp"));
    }

    #[test]
    fn strict_mode_is_fatal() {
        let err = parse_interactions("not json\n".as_bytes(), &InteractionFields::default(), true).unwrap_err();
        assert!(matches!(err, TupError::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_stream() {
        assert!(interactions("").value.is_empty());
    }

    #[test]
    fn custom_field_names_and_millis() {
        let fields = InteractionFields {
            user: "user_id".into(),
            item: "parent_asin".into(),
            timestamp: "timestamp".into(),
            timestamp_divisor: 1000,
        };
        let p = parse_interactions(r#"{"user_id":"u","parent_asin":"p","timestamp":1500000000123}"#.as_bytes(), &fields, true).unwrap();
        assert_eq!(p.value[0].timestamp, 1_500_000_000);
    }

    #[test]
    fn catalog_duplicates_and_empty_description() {
        let src = concat!(
            r#"{"asin":"i1","title":"Halo","description":"shooter"}"#,
            "\n",
            r#"{"asin":"i2","title":"Tetris"}"#,
            "\n",
            r#"{"asin":"i1","title":"Halo 2","description":["a","b"]}"#,
            "\n",
            r#"{"title":"orphan"}"#,
            "\n"
        );
        let p = parse_catalog(src.as_bytes(), &CatalogFields::default(), false).unwrap();
        assert_eq!(p.value.len(), 2);
        assert_eq!(p.value.get("i1").unwrap().title, "Halo 2");
        assert_eq!(p.value.get("i1").unwrap().description, "a b");
        assert_eq!(p.value.get("i2").unwrap().description, "");
        assert_eq!(p.warnings.len(), 1);
        assert_eq!(p.rejects.len(), 1);
    }

    #[test]
    fn histories_sorted_and_unknown_dropped() {
        let catalog: ItemCatalog = ["a", "b", "c"].iter().map(|i| ItemRecord::new(*i, *i, "")).collect();
        let raw = vec![
            Interaction::new("u1", "a", 9).unwrap(),
            Interaction::new("u2", "b", 4).unwrap(),
            Interaction::new("u1", "b", 1).unwrap(),
            Interaction::new("u1", "c", 5).unwrap(),
            Interaction::new("u2", "zz", 2).unwrap(),
        ];
        let h = build_histories(raw, &catalog, false).unwrap();
        assert_eq!(h.dropped_unknown_items, 1);
        let ts: Vec<i64> = h.users["u1"].events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![1, 5, 9]);
        assert_eq!(h.users["u2"].len(), 1);
    }

    #[test]
    fn dedup_flag() {
        let catalog: ItemCatalog = ["a"].iter().map(|i| ItemRecord::new(*i, *i, "")).collect();
        let raw = vec![Interaction::new("u", "a", 1).unwrap(), Interaction::new("u", "a", 2).unwrap()];
        assert_eq!(build_histories(raw.clone(), &catalog, false).unwrap().users["u"].len(), 2);
        let d = build_histories(raw, &catalog, true).unwrap();
        assert_eq!(d.users["u"].len(), 1);
        assert_eq!(d.dropped_duplicates, 1);
    }

    #[test]
    fn split_sizes() {
        let r = SplitRatios::default();
        assert_eq!(sizes(temporal_split(&history(10), &r, 3).unwrap()), (6, 2, 2));
        assert_eq!(sizes(temporal_split(&history(5), &r, 3).unwrap()), (3, 1, 1));
        assert_eq!(sizes(temporal_split(&history(3), &r, 3).unwrap()), (1, 1, 1));
        assert_eq!(temporal_split(&history(2), &r, 3).unwrap(), SplitOutcome::Excluded);
        assert!(temporal_split(&UserHistory::empty("u"), &r, 3).is_err());
    }

    #[test]
    fn min_history_filter() {
        let r = SplitRatios::default();
        assert_eq!(temporal_split(&history(4), &r, 5).unwrap(), SplitOutcome::Excluded);
        assert!(matches!(temporal_split(&history(5), &r, 5).unwrap(), SplitOutcome::Split(_)));
    }

    #[test]
    fn stats_ratio() {
        let catalog: ItemCatalog = (0..5).map(|i| ItemRecord::new(format!("i{i:03}"), "t", "")).collect();
        let mut histories = BTreeMap::new();
        let mk = |u: &str, n: usize| {
            let events = (0..n).map(|t| Interaction::new(u, format!("i{t:03}"), t as i64).unwrap()).collect();
            UserHistory::new(u, events).unwrap()
        };
        histories.insert("a".to_string(), mk("a", 3));
        histories.insert("b".to_string(), mk("b", 5));
        let split = split_dataset(&histories, catalog, &SplitConfig::default()).unwrap();
        let stats = dataset_stats(&split);
        assert_eq!(stats.n_users, 2);
        assert_eq!(stats.n_items, 5);
        assert_eq!(stats.n_interactions, 8);
        assert!((stats.avg_profile_size - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gzip_input_is_detected() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::default());
        enc.write_all(br#"{"reviewerID":"u","asin":"a","unixReviewTime":3}"#).unwrap();
        enc.finish().unwrap();
        let p = parse_interactions(open_input(&path).unwrap(), &InteractionFields::default(), true).unwrap();
        assert_eq!(p.value.len(), 1);
    }

    #[test]
    fn rejects_csv_columns() {
        let mut buf = Vec::new();
        write_rejects_csv(&mut buf, &[Reject { line_no: 3, reason: "bad".into() }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "line_no,reason\n3,bad\n");
    }

    #[test]
    fn writer_round_trips_through_parser() {
        let fields = InteractionFields::default();
        let events = vec![Interaction::new("u", "a", 10).unwrap(), Interaction::new("v", "b", 20).unwrap()];
        let mut buf = Vec::new();
        write_interactions(&mut buf, &fields, &events).unwrap();
        assert_eq!(parse_interactions(buf.as_slice(), &fields, true).unwrap().value, events);
    }
}
