//! Non-LLM user representations (item-mean Centric, recency-split
//! Temp-Fusion) and the reference recommenders (popularity, matrix
//! factorization).

use std::collections::BTreeMap;

use rand_distr::{Distribution, Uniform};

use crate::datamodel::{Embedding, SplitDataset, UserHistory};
use crate::encoder::EmbeddingTable;
use crate::error::{Result, TupError};
use crate::model::{sigmoid, UserRepr};
use crate::seed::{rng_for, Rng};
use crate::trainer::{self, Example, IndexedSplit, Objective, TrainConfig, TrainHistory};

pub const CENTRIC_KEY: &str = "centric";
pub const TF_SHORT_KEY: &str = "tf_short";
pub const TF_LONG_KEY: &str = "tf_long";

fn mean_embedding<'a>(events: impl Iterator<Item = &'a str>, items: &EmbeddingTable) -> Result<Embedding> {
    let mut sum = vec![0.0f64; items.dim()];
    let mut n = 0usize;
    for id in events {
        for (s, &v) in sum.iter_mut().zip(items.require(id)?.values()) {
            *s += f64::from(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(TupError::invalid("mean over an empty history"));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Embedding::from_f64(&sum)
}

/// Mean of the user's train item embeddings, each event weighted once.
/// Not renormalized.
pub fn centric_profile(train: &UserHistory, items: &EmbeddingTable) -> Result<Embedding> {
    if train.is_empty() {
        return Err(TupError::invalid(format!("user `{}` has no train events", train.user_id)));
    }
    mean_embedding(train.item_ids(), items)
}

/// Short = mean of the `cutoff` most recent train events, long = mean of
/// the earlier ones; long copies short when nothing earlier remains.
pub fn tempfusion_profiles(train: &UserHistory, items: &EmbeddingTable, cutoff: usize) -> Result<UserRepr> {
    if train.is_empty() {
        return Err(TupError::invalid(format!("user `{}` has no train events", train.user_id)));
    }
    if cutoff == 0 {
        return Err(TupError::Config("temp-fusion cutoff must be positive".into()));
    }
    let split_at = train.len().saturating_sub(cutoff);
    let ids: Vec<&str> = train.item_ids().collect();
    let short = mean_embedding(ids[split_at..].iter().copied(), items)?;
    let long = if split_at == 0 {
        short.clone()
    } else {
        mean_embedding(ids[..split_at].iter().copied(), items)?
    };
    UserRepr::pair(short, long)
}

/// Baseline profiles of every user in an embedding table keyed
/// `user#centric`, `user#tf_short`, `user#tf_long`.
pub fn export_baseline_profiles(
    centric: &BTreeMap<String, UserRepr>,
    tempfusion: &BTreeMap<String, UserRepr>,
    dim: usize,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim);
    for (user, repr) in centric {
        if let Some(e) = &repr.long {
            table.insert(format!("{user}#{CENTRIC_KEY}"), e.clone())?;
        }
    }
    for (user, repr) in tempfusion {
        if let (Some(s), Some(l)) = (&repr.short, &repr.long) {
            table.insert(format!("{user}#{TF_SHORT_KEY}"), s.clone())?;
            table.insert(format!("{user}#{TF_LONG_KEY}"), l.clone())?;
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityModel {
    pub counts: BTreeMap<String, usize>,
    /// Counted items by (count desc, item_id asc).
    pub order: Vec<String>,
}

impl PopularityModel {
    pub fn count(&self, item_id: &str) -> usize {
        self.counts.get(item_id).copied().unwrap_or(0)
    }
}

/// Interaction counts over train events only.
pub fn popularity_fit(split: &SplitDataset) -> PopularityModel {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in split.users.values() {
        for id in s.train.item_ids() {
            *counts.entry(id.to_owned()).or_default() += 1;
        }
    }
    let mut order: Vec<String> = counts.keys().cloned().collect();
    order.sort_by(|a, b| counts[b].cmp(&counts[a]).then_with(|| a.cmp(b)));
    PopularityModel { counts, order }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MfParams {
    pub k: usize,
    pub user_factors: BTreeMap<String, Vec<f64>>,
    pub item_factors: BTreeMap<String, Vec<f64>>,
}

impl MfParams {
    pub fn predict(&self, user_id: &str, item_id: &str) -> Result<f64> {
        let p = self
            .user_factors
            .get(user_id)
            .ok_or_else(|| TupError::invalid(format!("no factors for user `{user_id}`")))?;
        let q = self
            .item_factors
            .get(item_id)
            .ok_or_else(|| TupError::invalid(format!("no factors for item `{item_id}`")))?;
        Ok(sigmoid(crate::model::dot(p, q)))
    }
}

/// Matrix factorization as a training objective: `sigmoid(p_u . q_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfObjective {
    pub k: usize,
    /// Row-major `n_users x k`.
    pub users: Vec<f64>,
    /// Row-major `n_items x k`.
    pub items: Vec<f64>,
}

impl MfObjective {
    /// Factors uniform in [-0.01, 0.01].
    pub fn init(n_users: usize, n_items: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(TupError::Config("mf factor size must be positive".into()));
        }
        let dist = Uniform::new_inclusive(-0.01, 0.01).expect("finite bounds");
        Ok(MfObjective {
            k,
            users: (0..n_users * k).map(|_| dist.sample(rng)).collect(),
            items: (0..n_items * k).map(|_| dist.sample(rng)).collect(),
        })
    }

    pub fn zeros(n_users: usize, n_items: usize, k: usize) -> Self {
        MfObjective {
            k,
            users: vec![0.0; n_users * k],
            items: vec![0.0; n_items * k],
        }
    }

    fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.k..(u + 1) * self.k]
    }

    fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.k..(i + 1) * self.k]
    }

    pub fn predict(&self, u: usize, i: usize) -> f64 {
        sigmoid(crate::model::dot(self.user(u), self.item(i)))
    }

    pub fn into_params(self, split: &IndexedSplit) -> MfParams {
        let k = self.k;
        MfParams {
            k,
            user_factors: split
                .user_ids
                .iter()
                .enumerate()
                .map(|(u, id)| (id.clone(), self.user(u).to_vec()))
                .collect(),
            item_factors: split
                .item_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.item(i).to_vec()))
                .collect(),
        }
    }
}

impl Objective for MfObjective {
    fn group_names(&self) -> Vec<String> {
        vec!["user_factors".into(), "item_factors".into()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.users, &mut self.items]
    }

    fn loss_grad(&self, batch: &[Example], _dropout: Option<&mut Rng>) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(TupError::invalid("empty batch"));
        }
        let n = batch.len() as f64;
        let k = self.k;
        let mut gu = vec![0.0; self.users.len()];
        let mut gi = vec![0.0; self.items.len()];
        let mut preds = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for ex in batch {
            let p = self.predict(ex.user, ex.item);
            preds.push(p);
            labels.push(ex.label);
            let dz = if p > trainer::BCE_EPS && p < 1.0 - trainer::BCE_EPS {
                (p - ex.label) / n
            } else {
                0.0
            };
            let (pu, qi) = (self.user(ex.user), self.item(ex.item));
            for f in 0..k {
                gu[ex.user * k + f] += dz * qi[f];
                gi[ex.item * k + f] += dz * pu[f];
            }
        }
        for (name, g) in [("user_factors", &gu), ("item_factors", &gi)] {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TupError::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok((trainer::bce_loss(&preds, &labels)?, vec![gu, gi]))
    }

    fn scores(&self, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        Ok(items.iter().map(|&i| self.predict(user, i)).collect())
    }
}

/// Trains factors with the shared loop (BCE, sampled negatives, Adam,
/// early stopping).
pub fn mf_train(split: &IndexedSplit, k: usize, config: &TrainConfig) -> Result<(MfObjective, TrainHistory)> {
    let mut rng = rng_for(config.seed, "mf-init");
    let obj = MfObjective::init(split.n_users(), split.n_items(), k, &mut rng)?;
    trainer::train_loop(obj, split, config, |_| Ok(()))
}

/// Centric and Temp-Fusion representations for every user of the split.
pub fn baseline_reprs(
    split: &SplitDataset,
    items: &EmbeddingTable,
    cutoff: usize,
) -> Result<(BTreeMap<String, UserRepr>, BTreeMap<String, UserRepr>)> {
    let mut centric = BTreeMap::new();
    let mut tempfusion = BTreeMap::new();
    for (user, s) in &split.users {
        centric.insert(user.clone(), UserRepr::single_long(centric_profile(&s.train, items)?));
        tempfusion.insert(user.clone(), tempfusion_profiles(&s.train, items, cutoff)?);
    }
    Ok((centric, tempfusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Interaction, ItemCatalog, ItemRecord, UserSplit};

    fn table(rows: &[(&str, Vec<f32>)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(rows[0].1.len());
        for (k, v) in rows {
            t.insert(*k, Embedding::new(v.clone()).unwrap()).unwrap();
        }
        t
    }

    fn history(items: &[&str]) -> UserHistory {
        let events = items
            .iter()
            .enumerate()
            .map(|(t, i)| Interaction::new("u", *i, t as i64).unwrap())
            .collect();
        UserHistory::new("u", events).unwrap()
    }

    #[test]
    fn centric_examples() {
        let t = table(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        assert_eq!(centric_profile(&history(&["a", "b"]), &t).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(centric_profile(&history(&["b"]), &t).unwrap().values(), &[0.0, 1.0]);
        let weighted = centric_profile(&history(&["a", "a", "b"]), &t).unwrap();
        assert_eq!(weighted.values(), &[(2.0f64 / 3.0) as f32, (1.0f64 / 3.0) as f32]);
        assert!(centric_profile(&UserHistory::empty("u"), &t).is_err());
    }

    #[test]
    fn centric_is_permutation_invariant() {
        let t = table(&[("a", vec![0.1, 0.7]), ("b", vec![0.3, -0.2]), ("c", vec![-0.9, 0.4])]);
        let x = centric_profile(&history(&["a", "b", "c"]), &t).unwrap();
        let y = centric_profile(&history(&["c", "a", "b"]), &t).unwrap();
        for (p, q) in x.values().iter().zip(y.values()) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn tempfusion_examples() {
        let t = table(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![1.0, 1.0]),
            ("d", vec![0.0, 0.0]),
            ("e", vec![2.0, 0.0]),
        ]);
        let r = tempfusion_profiles(&history(&["a", "b", "c", "d", "e"]), &t, 3).unwrap();
        assert_eq!(r.short.unwrap().values(), &[1.0, 1.0 / 3.0]);
        assert_eq!(r.long.unwrap().values(), &[0.5, 0.5]);

        let r = tempfusion_profiles(&history(&["a", "b"]), &t, 3).unwrap();
        assert_eq!(r.short, r.long);
        assert_eq!(r.short.unwrap(), centric_profile(&history(&["a", "b"]), &t).unwrap());

        let r = tempfusion_profiles(&history(&["a", "b", "e"]), &t, 1).unwrap();
        assert_eq!(r.short.unwrap().values(), &[2.0, 0.0]);
        assert!(tempfusion_profiles(&history(&["a"]), &t, 0).is_err());
    }

    fn split_of(users: &[(&str, &[&str])]) -> SplitDataset {
        let mut catalog = ItemCatalog::new();
        let mut out = BTreeMap::new();
        for (u, items) in users {
            for i in *items {
                catalog.insert(ItemRecord::new(*i, format!("title {i}"), ""));
            }
            let events: Vec<Interaction> = items
                .iter()
                .enumerate()
                .map(|(t, i)| Interaction::new(*u, *i, t as i64).unwrap())
                .collect();
            out.insert(
                u.to_string(),
                UserSplit {
                    train: UserHistory::new(*u, events).unwrap(),
                    val: UserHistory::empty(*u),
                    test: UserHistory::empty(*u),
                },
            );
        }
        SplitDataset {
            users: out,
            catalog,
            excluded_users: Vec::new(),
        }
    }

    #[test]
    fn popularity_examples() {
        let m = popularity_fit(&split_of(&[("u1", &["A", "A", "C"]), ("u2", &["A", "B", "C"])]));
        assert_eq!(m.order, vec!["A", "C", "B"]);
        let m = popularity_fit(&split_of(&[("u1", &["B", "A"]), ("u2", &["A", "B"])]));
        assert_eq!(m.order, vec!["A", "B"]);
        assert!(popularity_fit(&split_of(&[])).order.is_empty());
    }

    #[test]
    fn mf_zero_init_predicts_half() {
        let m = MfObjective::zeros(3, 4, 8);
        assert!((0..3).all(|u| (0..4).all(|i| m.predict(u, i) == 0.5)));
    }

    fn block_split() -> IndexedSplit {
        // Users 0..10 consume items 0..8, users 10..20 consume items 8..16.
        let mut split = IndexedSplit {
            user_ids: (0..20).map(|u| format!("u{u:02}")).collect(),
            item_ids: (0..16).map(|i| format!("i{i:02}")).collect(),
            train: Vec::new(),
            val: Vec::new(),
            train_set: Vec::new(),
        };
        for u in 0..20usize {
            let base = if u < 10 { 0 } else { 8 };
            let own: Vec<usize> = (0..8).map(|j| base + (j + u) % 8).collect();
            let mut set = own[..6].to_vec();
            set.sort_unstable();
            split.train.push(own[..6].to_vec());
            split.val.push(own[6..].to_vec());
            split.train_set.push(set);
        }
        split
    }

    #[test]
    fn mf_separates_blocks_and_is_deterministic() {
        let split = block_split();
        let config = TrainConfig {
            lr: 0.05,
            batch_size: 64,
            max_epochs: 30,
            patience: 30,
            seed: 1,
            ..TrainConfig::default()
        };
        let (m, h) = mf_train(&split, 8, &config).unwrap();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for u in 0..20 {
            for i in 0..16 {
                let same = (u < 10) == (i < 8);
                if same { &mut within } else { &mut across }.push(m.predict(u, i));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) > mean(&across) + 0.2, "{} vs {}", mean(&within), mean(&across));

        let (again, h2) = mf_train(&split, 8, &config).unwrap();
        assert_eq!(m, again);
        assert_eq!(h.metric_trace(), h2.metric_trace());
        let params = m.into_params(&split);
        assert_eq!(params.user_factors.len(), 20);
        assert!(params.predict("u00", "i00").unwrap() > params.predict("u00", "i15").unwrap());
    }

    #[test]
    fn export_keys() {
        let e = Embedding::new(vec![1.0, 0.0]).unwrap();
        let mut c = BTreeMap::new();
        c.insert("u".to_string(), UserRepr::single_long(e.clone()));
        let mut tf = BTreeMap::new();
        tf.insert("u".to_string(), UserRepr::pair(e.clone(), e).unwrap());
        let t = export_baseline_profiles(&c, &tf, 2).unwrap();
        let keys: Vec<&str> = t.iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec!["u#centric", "u#tf_long", "u#tf_short"]);
    }
}
