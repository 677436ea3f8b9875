//! Full-catalog ranking evaluation: Recall@K, NDCG@K, paired significance
//! and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datamodel::{SplitDataset, UserSplit};
use crate::error::{Result, TupError};

/// Scores every catalog item for a user. Implementations see only the
/// user id and must be built from train-derived inputs.
pub trait Scorer {
    /// Scores aligned with `item_ids`.
    fn score_items(&self, user_id: &str, item_ids: &[&str]) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&str, &[&str]) -> Result<Vec<f64>>,
{
    fn score_items(&self, user_id: &str, item_ids: &[&str]) -> Result<Vec<f64>> {
        self(user_id, item_ids)
    }
}

/// Catalog items minus the user's train and val items.
pub fn candidate_set<'a>(user: &UserSplit, catalog_ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeSet<&'a str>> {
    let seen: BTreeSet<&str> = user.train.item_ids().chain(user.val.item_ids()).collect();
    let out: BTreeSet<&str> = catalog_ids.into_iter().filter(|i| !seen.contains(i)).collect();
    if out.is_empty() {
        return Err(TupError::invalid(format!("user `{}` has no candidate items", user.train.user_id)));
    }
    Ok(out)
}

/// Sorts by score descending, ties by id ascending; returns the full order.
pub fn rank_items<'a>(scored: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Vec<&'a str>> {
    let mut v: Vec<(&str, f64)> = scored.into_iter().collect();
    if let Some((id, _)) = v.iter().find(|(_, s)| !s.is_finite()) {
        return Err(TupError::NonFinite(format!("score of item `{id}`")));
    }
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(v.into_iter().map(|(id, _)| id).collect())
}

/// `None` when `relevant` is empty.
pub fn recall_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with `1 / log2(rank + 1)` discount. `None` when
/// `relevant` is empty.
pub fn ndcg_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }
}

/// Per-K values, aligned with the report's `ks`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl UserMetrics {
    pub fn get(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Recall => &self.recall,
            Metric::Ndcg => &self.ndcg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub per_user: BTreeMap<String, UserMetrics>,
    /// Means of `per_user`, in user-id order.
    pub aggregate: UserMetrics,
    pub n_users_evaluated: usize,
    /// Users without relevant test items after removing train/val items.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn value(&self, metric: Metric, k: usize) -> Result<f64> {
        let idx = self.k_index(k)?;
        Ok(self.aggregate.get(metric)[idx])
    }

    fn k_index(&self, k: usize) -> Result<usize> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .ok_or_else(|| TupError::invalid(format!("report has no K={k}")))
    }

    pub fn from_per_user(ks: Vec<usize>, per_user: BTreeMap<String, UserMetrics>, skipped: Vec<String>) -> Result<Self> {
        let n = per_user.len();
        if n == 0 {
            return Err(TupError::invalid("no evaluable users"));
        }
        let mean = |pick: fn(&UserMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..ks.len())
                .map(|j| per_user.values().map(|m| pick(m)[j]).sum::<f64>() / n as f64)
                .collect()
        };
        let aggregate = UserMetrics {
            recall: mean(|m| &m.recall),
            ndcg: mean(|m| &m.ndcg),
        };
        Ok(MetricsReport {
            ks,
            per_user,
            aggregate,
            n_users_evaluated: n,
            skipped,
        })
    }
}

/// Ranks each user's candidate set and scores it against their test items.
pub fn evaluate(scorer: &dyn Scorer, split: &SplitDataset, ks: &[usize]) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(TupError::Config("ks must be non-empty and positive".into()));
    }
    let catalog: Vec<&str> = split.catalog.ids().collect();
    let mut per_user = BTreeMap::new();
    let mut skipped = Vec::new();
    for (user, s) in &split.users {
        let candidates = candidate_set(s, catalog.iter().copied())?;
        let mut relevant: BTreeSet<&str> = s.test.item_ids().collect();
        let before = relevant.len();
        relevant.retain(|i| candidates.contains(i));
        if relevant.len() < before {
            log::warn!("user `{user}`: {} test item(s) also seen in train/val; dropped from relevant set", before - relevant.len());
        }
        if relevant.is_empty() {
            skipped.push(user.clone());
            continue;
        }
        let ids: Vec<&str> = candidates.iter().copied().collect();
        let scores = scorer.score_items(user, &ids)?;
        if scores.len() != ids.len() {
            return Err(TupError::invalid(format!("scorer returned {} scores for {} items", scores.len(), ids.len())));
        }
        let ranked = rank_items(ids.iter().copied().zip(scores))?;
        let mut m = UserMetrics::default();
        for &k in ks {
            m.recall.push(recall_at_k(&ranked, &relevant, k).expect("relevant is non-empty"));
            m.ndcg.push(ndcg_at_k(&ranked, &relevant, k).expect("relevant is non-empty"));
        }
        per_user.insert(user.clone(), m);
    }
    MetricsReport::from_per_user(ks.to_vec(), per_user, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceResult {
    pub metric: Metric,
    pub k: usize,
    pub mean_diff: f64,
    pub p_value: f64,
    pub test: String,
}

/// Two-sided p-value of a paired t-test on `diffs`. All-zero differences
/// give 1, constant nonzero differences give 0, fewer than two give 1.
pub fn paired_t_test(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| TupError::invalid(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

/// Paired test of `a - b` over per-user values of `metric` at `k`.
pub fn paired_significance(a: &MetricsReport, b: &MetricsReport, metric: Metric, k: usize) -> Result<SignificanceResult> {
    if !a.per_user.keys().eq(b.per_user.keys()) {
        return Err(TupError::invalid("reports cover different user sets"));
    }
    let (ia, ib) = (a.k_index(k)?, b.k_index(k)?);
    let diffs: Vec<f64> = a
        .per_user
        .values()
        .zip(b.per_user.values())
        .map(|(x, y)| x.get(metric)[ia] - y.get(metric)[ib])
        .collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok(SignificanceResult {
        metric,
        k,
        mean_diff,
        p_value: paired_t_test(&diffs)?,
        test: "paired two-sided t-test".into(),
    })
}

/// `%.6g`-style formatting: six significant digits, trailing zeros removed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

pub type SignificanceTable = BTreeMap<(String, Metric, usize), SignificanceResult>;

/// Significance of every report against `baseline`, for every metric and K.
pub fn compare_to_baseline(reports: &BTreeMap<String, MetricsReport>, baseline: &str) -> Result<SignificanceTable> {
    let base = reports
        .get(baseline)
        .ok_or_else(|| TupError::invalid(format!("no report for baseline `{baseline}`")))?;
    let mut out = BTreeMap::new();
    for (name, report) in reports {
        if name == baseline {
            continue;
        }
        for metric in [Metric::Recall, Metric::Ndcg] {
            for &k in &report.ks {
                out.insert((name.clone(), metric, k), paired_significance(report, base, metric, k)?);
            }
        }
    }
    Ok(out)
}

/// Writes `report.csv` (variant, metric, K, value, p_value_vs_centric) and
/// `report_per_user.csv` into `dir`, variants in `order`.
pub fn emit_report(
    dir: &Path,
    order: &[String],
    reports: &BTreeMap<String, MetricsReport>,
    significance: &SignificanceTable,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TupError::io(dir, e))?;
    let path = dir.join("report.csv");
    let file = std::fs::File::create(&path).map_err(|e| TupError::io(&path, e))?;
    write_report(file, order, reports, significance)?;
    let path = dir.join("report_per_user.csv");
    let file = std::fs::File::create(&path).map_err(|e| TupError::io(&path, e))?;
    write_per_user(file, order, reports)
}

fn ordered<'a>(order: &'a [String], reports: &'a BTreeMap<String, MetricsReport>) -> Result<Vec<(&'a str, &'a MetricsReport)>> {
    order
        .iter()
        .map(|name| {
            reports
                .get(name)
                .map(|r| (name.as_str(), r))
                .ok_or_else(|| TupError::invalid(format!("no report for `{name}`")))
        })
        .collect()
}

pub fn write_report<W: Write>(
    w: W,
    order: &[String],
    reports: &BTreeMap<String, MetricsReport>,
    significance: &SignificanceTable,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "metric", "K", "value", "p_value_vs_centric"])?;
    for (name, report) in ordered(order, reports)? {
        for metric in [Metric::Recall, Metric::Ndcg] {
            for (j, &k) in report.ks.iter().enumerate() {
                let p = significance
                    .get(&(name.to_owned(), metric, k))
                    .map(|s| format_sig6(s.p_value))
                    .unwrap_or_default();
                out.write_record([
                    name,
                    metric.name(),
                    &k.to_string(),
                    &format_sig6(report.aggregate.get(metric)[j]),
                    &p,
                ])?;
            }
        }
    }
    out.flush().map_err(|e| TupError::io("report.csv", e))?;
    Ok(())
}

pub fn write_per_user<W: Write>(w: W, order: &[String], reports: &BTreeMap<String, MetricsReport>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "user_id", "metric", "K", "value"])?;
    for (name, report) in ordered(order, reports)? {
        for (user, m) in &report.per_user {
            for metric in [Metric::Recall, Metric::Ndcg] {
                for (j, &k) in report.ks.iter().enumerate() {
                    out.write_record([name, user, metric.name(), &k.to_string(), &format_sig6(m.get(metric)[j])])?;
                }
            }
        }
    }
    out.flush().map_err(|e| TupError::io("report_per_user.csv", e))?;
    Ok(())
}

/// Aggregate rows of a `report.csv`: (variant, metric, K) to value string.
pub fn read_report<R: std::io::Read>(r: R) -> Result<BTreeMap<(String, String, usize), (String, String)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(TupError::Format(format!("report row has {} fields", rec.len())));
        }
        let k: usize = rec[2]
            .parse()
            .map_err(|_| TupError::Format(format!("bad K `{}`", &rec[2])))?;
        out.insert((rec[0].to_owned(), rec[1].to_owned(), k), (rec[3].to_owned(), rec[4].to_owned()));
    }
    Ok(out)
}
