//! Negative-sampled BCE training with hand-written backpropagation through
//! the MLP head and the attention fusion, Adam updates and early stopping.
//!
//! The first MLP layer acts on `[e_u; e_i]`, so its pre-activation splits
//! into `W_u e_u + W_i e_i`. A batch computes each half once per distinct
//! user and item and accumulates the first-layer gradient per user and per
//! item, which keeps per-example cost at O(hidden).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::SplitDataset;
use crate::encoder::EmbeddingTable;
use crate::error::{Result, TupError};
use crate::model::{self, DropoutMask, ModelParams, UserRepr, VariantKind};
use crate::seed::{rng_for, Rng};

pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMetric {
    #[serde(rename = "ndcg@10")]
    Ndcg10,
    #[serde(rename = "val_loss")]
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub eval_metric: EvalMetric,
    /// Sampled negatives each validation positive is ranked against.
    pub val_negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2048,
            max_epochs: 100,
            patience: 5,
            negatives_per_positive: 5,
            seed: 0,
            eval_metric: EvalMetric::Ndcg10,
            val_negatives: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TupError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.negatives_per_positive == 0 || self.val_negatives == 0 {
            return Err(TupError::Config("batch_size, max_epochs, patience, negatives and val_negatives must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TupError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(TupError::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(TupError::invalid("bce over an empty batch"));
    }
    let total: f64 = preds.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum();
    Ok(total / preds.len() as f64)
}

fn bce_term(p: f64, y: f64) -> f64 {
    let c = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
}

/// d bce_term / d logit. Zero where the clamp is active.
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if p > BCE_EPS && p < 1.0 - BCE_EPS {
        p - y
    } else {
        0.0
    }
}

/// Draws `n` distinct item indices from `0..n_items` not in `positives`
/// (sorted, deduplicated). A pool smaller than `n` is returned whole, shuffled.
pub fn sample_negatives(n_items: usize, positives: &[usize], n: usize, rng: &mut Rng) -> Vec<usize> {
    let pool = n_items - positives.len();
    if pool <= n {
        if pool < n {
            log::debug!("negative pool of {pool} items is smaller than {n}; using all of it");
        }
        let mut all: Vec<usize> = (0..n_items).filter(|i| positives.binary_search(i).is_err()).collect();
        all.shuffle(rng);
        return all;
    }
    let mut out = Vec::with_capacity(n);
    if pool < 4 * n {
        // Dense regime: partial Fisher-Yates over the explicit pool.
        let mut all: Vec<usize> = (0..n_items).filter(|i| positives.binary_search(i).is_err()).collect();
        let (chosen, _) = all.partial_shuffle(rng, n);
        out.extend_from_slice(chosen);
        return out;
    }
    while out.len() < n {
        let i = rng.random_range(0..n_items);
        if positives.binary_search(&i).is_err() && !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Users and items of a split, indexed in id order.
#[derive(Debug, Clone)]
pub struct IndexedSplit {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Train events per user as item indices, chronological, with repeats.
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    /// Sorted distinct train items per user.
    pub train_set: Vec<Vec<usize>>,
}

impl IndexedSplit {
    pub fn new(split: &SplitDataset) -> Result<Self> {
        let item_ids: Vec<String> = split.catalog.ids().map(str::to_owned).collect();
        let index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| TupError::invalid(format!("item `{id}` is not in the catalog")))
        };
        let mut out = IndexedSplit {
            user_ids: Vec::new(),
            item_ids: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            train_set: Vec::new(),
        };
        for (user, s) in &split.users {
            let train = s.train.item_ids().map(lookup).collect::<Result<Vec<_>>>()?;
            let val = s.val.item_ids().map(lookup).collect::<Result<Vec<_>>>()?;
            let mut set = train.clone();
            set.sort_unstable();
            set.dedup();
            out.user_ids.push(user.clone());
            out.train.push(train);
            out.val.push(val);
            out.train_set.push(set);
        }
        out.item_ids = item_ids;
        Ok(out)
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserInput {
    /// Used as is by the scorer.
    Fixed(Vec<f64>),
    /// Fused by the attention before scoring.
    Fused { short: Vec<f64>, long: Vec<f64> },
}

/// Frozen embeddings feeding a neural variant, indexed like an [`IndexedSplit`].
#[derive(Debug, Clone)]
pub struct Features {
    pub dim: usize,
    pub users: Vec<UserInput>,
    pub items: Vec<Vec<f64>>,
}

impl Features {
    pub fn build(
        variant: VariantKind,
        split: &IndexedSplit,
        reprs: &BTreeMap<String, UserRepr>,
        items: &EmbeddingTable,
    ) -> Result<Self> {
        let dim = items.dim();
        let item_vecs = split
            .item_ids
            .iter()
            .map(|id| items.require(id).map(|e| e.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        let mut users = Vec::with_capacity(split.n_users());
        for user in &split.user_ids {
            let repr = reprs
                .get(user)
                .ok_or_else(|| TupError::invalid(format!("no representation for user `{user}`")))?;
            let input = user_input(variant, repr)?;
            let got = match &input {
                UserInput::Fixed(v) => v.len(),
                UserInput::Fused { short, .. } => short.len(),
            };
            if got != dim {
                return Err(TupError::DimMismatch { expected: dim, got });
            }
            users.push(input);
        }
        Ok(Features { dim, users, items: item_vecs })
    }

    fn user_embedding(&self, user: usize, w_a: &[f64]) -> Result<(Vec<f64>, Option<(f64, f64)>)> {
        match &self.users[user] {
            UserInput::Fixed(v) => Ok((v.clone(), None)),
            UserInput::Fused { short, long } => {
                let alpha = model::attention_weights(w_a, short, long)?;
                Ok((model::fuse(alpha, short, long)?, Some(alpha)))
            }
        }
    }
}

pub fn user_input(variant: VariantKind, repr: &UserRepr) -> Result<UserInput> {
    let missing = |what: &str| TupError::invalid(format!("variant {variant} needs a {what} representation"));
    if variant.uses_attention() {
        let short = repr.short.as_ref().ok_or_else(|| missing("short"))?;
        let long = repr.long.as_ref().ok_or_else(|| missing("long"))?;
        if short.dim() != long.dim() {
            return Err(TupError::DimMismatch {
                expected: short.dim(),
                got: long.dim(),
            });
        }
        return Ok(UserInput::Fused {
            short: short.to_f64(),
            long: long.to_f64(),
        });
    }
    let slot = match variant {
        VariantKind::St => repr.short.as_ref().ok_or_else(|| missing("short"))?,
        _ => repr.long.as_ref().ok_or_else(|| missing("long"))?,
    };
    Ok(UserInput::Fixed(slot.to_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

/// Anything the shared training loop can optimize.
pub trait Objective: Clone {
    fn group_names(&self) -> Vec<String>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Mean clamped BCE over `batch` and its gradient per parameter group.
    /// `dropout` of `None` disables dropout.
    fn loss_grad(&self, batch: &[Example], dropout: Option<&mut Rng>) -> Result<(f64, Vec<Vec<f64>>)>;
    /// Evaluation-mode probabilities for one user over `items`.
    fn scores(&self, user: usize, items: &[usize]) -> Result<Vec<f64>>;
    /// `scores` for many (user, items) queries; implementations may share
    /// per-item work across queries.
    fn scores_many(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        queries.iter().map(|(u, items)| self.scores(*u, items)).collect()
    }
}

/// A neural variant bound to its frozen features.
#[derive(Debug, Clone)]
pub struct NeuralObjective<'a> {
    pub variant: VariantKind,
    pub params: ModelParams,
    pub features: &'a Features,
}

impl<'a> NeuralObjective<'a> {
    pub fn new(variant: VariantKind, params: ModelParams, features: &'a Features) -> Result<Self> {
        if params.dim != features.dim {
            return Err(TupError::DimMismatch {
                expected: params.dim,
                got: features.dim,
            });
        }
        Ok(NeuralObjective { variant, params, features })
    }

    fn first_layer_half(&self, x: &[f64], offset: usize) -> Vec<f64> {
        let l = &self.params.hidden[0];
        let d = self.params.dim;
        l.weight
            .chunks_exact(l.cols)
            .map(|row| model::dot(&row[offset..offset + d], x))
            .collect()
    }

    /// Evaluation-mode logits for one user embedding over many items, with
    /// item projections supplied by the caller.
    fn mlp_logit(&self, a_u: &[f64], b_i: &[f64], scratch: &mut (Vec<f64>, Vec<f64>)) -> f64 {
        let p = &self.params;
        let (x, next) = scratch;
        x.clear();
        x.extend(a_u.iter().zip(b_i).zip(&p.hidden[0].bias).map(|((a, b), c)| (a + b + c).max(0.0)));
        for layer in &p.hidden[1..] {
            layer.forward(x, next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(x, next);
        }
        p.output.bias[0] + model::dot(&p.output.weight, x)
    }

    /// Item halves of the first layer for every catalog item.
    pub fn item_projections(&self) -> Vec<Vec<f64>> {
        if !self.variant.uses_mlp() {
            return Vec::new();
        }
        let d = self.params.dim;
        self.features.items.iter().map(|e| self.first_layer_half(e, d)).collect()
    }

    pub fn user_embedding(&self, user: usize) -> Result<Vec<f64>> {
        Ok(self.features.user_embedding(user, &self.params.w_a)?.0)
    }

    /// Attention weights of an attention variant, `None` otherwise.
    pub fn attention(&self, user: usize) -> Result<Option<(f64, f64)>> {
        Ok(self.features.user_embedding(user, &self.params.w_a)?.1)
    }

    /// Evaluation-mode scores for `items`, reusing precomputed item halves.
    pub fn scores_with(&self, user: usize, items: &[usize], projections: &[Vec<f64>]) -> Result<Vec<f64>> {
        let e_u = self.user_embedding(user)?;
        if !self.variant.uses_mlp() {
            return Ok(items
                .iter()
                .map(|&i| model::sigmoid(model::dot(&e_u, &self.features.items[i])))
                .collect());
        }
        let a_u = self.first_layer_half(&e_u, 0);
        let mut scratch = (Vec::new(), Vec::new());
        let out: Vec<f64> = items
            .iter()
            .map(|&i| model::sigmoid(self.mlp_logit(&a_u, &projections[i], &mut scratch)))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TupError::NonFinite("mlp output".into()));
        }
        Ok(out)
    }
}

/// Slots of the distinct users or items of a batch, in first-seen order.
fn slots(keys: impl Iterator<Item = usize>) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut order = Vec::new();
    let mut map = HashMap::new();
    for k in keys {
        map.entry(k).or_insert_with(|| {
            order.push(k);
            order.len() - 1
        });
    }
    (order, map)
}

impl Objective for NeuralObjective<'_> {
    fn group_names(&self) -> Vec<String> {
        self.params.groups().into_iter().map(|(n, _)| n).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.groups_mut()
    }

    fn loss_grad(&self, batch: &[Example], mut dropout: Option<&mut Rng>) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(TupError::invalid("empty batch"));
        }
        let p = &self.params;
        let d = p.dim;
        let n = batch.len() as f64;
        let mut grad = ModelParams::zeros(&p.config())?;

        let (users, user_slot) = slots(batch.iter().map(|e| e.user));
        let mut user_emb = Vec::with_capacity(users.len());
        for &u in &users {
            user_emb.push(self.features.user_embedding(u, &p.w_a)?);
        }
        // dL/de_u per distinct user.
        let mut d_eu = vec![vec![0.0; d]; users.len()];
        let mut loss = 0.0;

        if self.variant.uses_mlp() {
            let (items, item_slot) = slots(batch.iter().map(|e| e.item));
            let a: Vec<Vec<f64>> = user_emb.iter().map(|(e, _)| self.first_layer_half(e, 0)).collect();
            let b: Vec<Vec<f64>> = items.iter().map(|&i| self.first_layer_half(&self.features.items[i], d)).collect();
            let h0 = p.hidden[0].rows;
            let mut g_u = vec![vec![0.0; h0]; users.len()];
            let mut g_i = vec![vec![0.0; h0]; items.len()];
            let depth = p.hidden.len();
            let mut pre: Vec<Vec<f64>> = vec![Vec::new(); depth];
            let mut out: Vec<Vec<f64>> = vec![Vec::new(); depth];

            for ex in batch {
                let (us, is) = (user_slot[&ex.user], item_slot[&ex.item]);
                let mask = dropout.as_deref_mut().map(|rng| DropoutMask::sample(p, rng));
                pre[0].clear();
                pre[0].extend(a[us].iter().zip(&b[is]).zip(&p.hidden[0].bias).map(|((x, y), c)| x + y + c));
                for l in 0..depth {
                    if l > 0 {
                        p.hidden[l].forward(&out[l - 1], &mut pre[l]);
                    }
                    out[l].clear();
                    out[l].extend(pre[l].iter().map(|v| v.max(0.0)));
                    if let Some(m) = &mask {
                        out[l].iter_mut().zip(&m.0[l]).for_each(|(o, s)| *o *= s);
                    }
                }
                let last = &out[depth - 1];
                let logit = p.output.bias[0] + model::dot(&p.output.weight, last);
                if !logit.is_finite() {
                    return Err(TupError::NonFinite("mlp output".into()));
                }
                let prob = model::sigmoid(logit);
                loss += bce_term(prob, ex.label);
                let dz = bce_logit_grad(prob, ex.label) / n;
                if dz == 0.0 {
                    continue;
                }
                grad.output.bias[0] += dz;
                grad.output.weight.iter_mut().zip(last).for_each(|(g, h)| *g += dz * h);
                let mut delta: Vec<f64> = p.output.weight.iter().map(|w| dz * w).collect();
                for l in (0..depth).rev() {
                    for (j, dj) in delta.iter_mut().enumerate() {
                        let scale = mask.as_ref().map_or(1.0, |m| m.0[l][j]);
                        if pre[l][j] <= 0.0 {
                            *dj = 0.0;
                        } else {
                            *dj *= scale;
                        }
                    }
                    if l == 0 {
                        break;
                    }
                    let layer = &p.hidden[l];
                    let g = &mut grad.hidden[l];
                    let input = &out[l - 1];
                    let mut below = vec![0.0; layer.cols];
                    for (j, &dj) in delta.iter().enumerate() {
                        if dj == 0.0 {
                            continue;
                        }
                        g.bias[j] += dj;
                        let row = j * layer.cols;
                        for k in 0..layer.cols {
                            g.weight[row + k] += dj * input[k];
                            below[k] += dj * layer.weight[row + k];
                        }
                    }
                    delta = below;
                }
                grad.hidden[0].bias.iter_mut().zip(&delta).for_each(|(g, v)| *g += v);
                g_u[us].iter_mut().zip(&delta).for_each(|(g, v)| *g += v);
                g_i[is].iter_mut().zip(&delta).for_each(|(g, v)| *g += v);
            }

            let first = &p.hidden[0];
            let cols = first.cols;
            let gw = &mut grad.hidden[0].weight;
            for (us, gu) in g_u.iter().enumerate() {
                let e_u = &user_emb[us].0;
                for (j, &gj) in gu.iter().enumerate() {
                    if gj == 0.0 {
                        continue;
                    }
                    let row = j * cols;
                    for k in 0..d {
                        gw[row + k] += gj * e_u[k];
                        d_eu[us][k] += gj * first.weight[row + k];
                    }
                }
            }
            for (is, gi) in g_i.iter().enumerate() {
                let e_i = &self.features.items[items[is]];
                for (j, &gj) in gi.iter().enumerate() {
                    if gj == 0.0 {
                        continue;
                    }
                    let row = j * cols + d;
                    for k in 0..d {
                        gw[row + k] += gj * e_i[k];
                    }
                }
            }
        } else {
            for ex in batch {
                let us = user_slot[&ex.user];
                let e_i = &self.features.items[ex.item];
                let prob = model::sigmoid(model::dot(&user_emb[us].0, e_i));
                loss += bce_term(prob, ex.label);
                let dz = bce_logit_grad(prob, ex.label) / n;
                d_eu[us].iter_mut().zip(e_i).for_each(|(g, x)| *g += dz * x);
            }
        }

        // Attention path: e_u = a r_s + (1 - a) r_l, a = sigmoid(w_a.(r_s - r_l)).
        for (us, &u) in users.iter().enumerate() {
            let (Some((a_s, a_l)), UserInput::Fused { short, long }) = (user_emb[us].1, &self.features.users[u]) else {
                continue;
            };
            let d_alpha: f64 = d_eu[us].iter().zip(short).zip(long).map(|((g, s), l)| g * (s - l)).sum();
            let k = d_alpha * a_s * a_l;
            grad.w_a.iter_mut().zip(short).zip(long).for_each(|((g, s), l)| *g += k * (s - l));
        }

        for (name, values) in grad.groups() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TupError::NonFinite(format!("gradient of {name}")));
            }
        }
        let groups = grad.groups_mut().into_iter().map(|g| g.to_vec()).collect();
        Ok((loss / n, groups))
    }

    fn scores(&self, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        let d = self.params.dim;
        if !self.variant.uses_mlp() {
            return self.scores_with(user, items, &[]);
        }
        let mut projections = vec![Vec::new(); self.features.items.len()];
        for &i in items {
            if projections[i].is_empty() {
                projections[i] = self.first_layer_half(&self.features.items[i], d);
            }
        }
        self.scores_with(user, items, &projections)
    }

    fn scores_many(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        let projections = if self.variant.uses_mlp() { self.item_projections() } else { Vec::new() };
        queries
            .iter()
            .map(|(u, items)| self.scores_with(*u, items, &projections))
            .collect()
    }
}

/// Adam with bias correction; `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: Vec<&mut [f64]>, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TupError::invalid("optimizer state does not match parameter groups"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TupError::DimMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Higher is better; an epoch improves only if strictly above the best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NDCG@10 or validation loss, per the configured metric.
    pub val_metric: f64,
    pub seconds: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_metric", "seconds", "stopped_flag"])?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                format!("{:.6}", r.val_metric),
                format!("{:.3}", r.seconds),
                u8::from(r.stopped).to_string(),
            ])?;
        }
        out.flush().map_err(|e| TupError::io("epoch log", e))?;
        Ok(())
    }

    /// Metric values only, without wall-clock time.
    pub fn metric_trace(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|r| (r.train_loss, r.val_metric)).collect()
    }
}

/// Fixed validation candidates: each val positive with sampled negatives.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub rows: Vec<(usize, usize, Vec<usize>)>,
}

impl ValidationSet {
    pub fn sample(split: &IndexedSplit, n_negatives: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "validation-negatives");
        let mut rows = Vec::new();
        for u in 0..split.n_users() {
            if split.val[u].is_empty() {
                continue;
            }
            let mut seen = split.train_set[u].clone();
            seen.extend(&split.val[u]);
            seen.sort_unstable();
            seen.dedup();
            for &pos in &split.val[u] {
                let negs = sample_negatives(split.n_items(), &seen, n_negatives, &mut rng);
                rows.push((u, pos, negs));
            }
        }
        ValidationSet { rows }
    }

    /// Mean over users of the per-user mean NDCG@10 of the positive.
    pub fn ndcg10<O: Objective>(&self, obj: &O) -> Result<f64> {
        let candidates: Vec<Vec<usize>> = self
            .rows
            .iter()
            .map(|(_, pos, negs)| std::iter::once(*pos).chain(negs.iter().copied()).collect())
            .collect();
        let queries: Vec<(usize, &[usize])> = self.rows.iter().zip(&candidates).map(|(r, c)| (r.0, &c[..])).collect();
        let all = obj.scores_many(&queries)?;
        let mut per_user: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for ((u, pos, negs), s) in self.rows.iter().zip(&all) {
            let above = negs
                .iter()
                .zip(&s[1..])
                .filter(|(&i, &v)| v > s[0] || (v == s[0] && i < *pos))
                .count();
            let rank = above + 1;
            let gain = if rank <= 10 { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
            let e = per_user.entry(*u).or_default();
            e.0 += gain;
            e.1 += 1;
        }
        if per_user.is_empty() {
            return Err(TupError::invalid("no validation interactions"));
        }
        Ok(per_user.values().map(|(g, c)| g / *c as f64).sum::<f64>() / per_user.len() as f64)
    }

    /// BCE over the positives and the first `k` negatives of each row.
    pub fn loss<O: Objective>(&self, obj: &O, k: usize) -> Result<f64> {
        let candidates: Vec<Vec<usize>> = self
            .rows
            .iter()
            .map(|(_, pos, negs)| std::iter::once(*pos).chain(negs.iter().take(k).copied()).collect())
            .collect();
        let queries: Vec<(usize, &[usize])> = self.rows.iter().zip(&candidates).map(|(r, c)| (r.0, &c[..])).collect();
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for s in obj.scores_many(&queries)? {
            labels.push(1.0);
            labels.extend(std::iter::repeat_n(0.0, s.len() - 1));
            preds.extend(s);
        }
        bce_loss(&preds, &labels)
    }
}

/// One epoch of examples: shuffled positives, each followed by its negatives.
pub fn epoch_examples(split: &IndexedSplit, negatives: usize, rng: &mut Rng) -> Vec<Example> {
    let mut positives: Vec<(usize, usize)> = split
        .train
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    positives.shuffle(rng);
    let mut out = Vec::with_capacity(positives.len() * (negatives + 1));
    for (u, i) in positives {
        out.push(Example { user: u, item: i, label: 1.0 });
        for j in sample_negatives(split.n_items(), &split.train_set[u], negatives, rng) {
            out.push(Example { user: u, item: j, label: 0.0 });
        }
    }
    out
}

/// Runs the shared loop and returns the best-epoch state. `on_improve` is
/// called with the new best state each time the validation metric improves.
pub fn train_loop<O: Objective>(
    mut obj: O,
    split: &IndexedSplit,
    config: &TrainConfig,
    mut on_improve: impl FnMut(&O) -> Result<()>,
) -> Result<(O, TrainHistory)> {
    config.validate()?;
    if split.n_train() == 0 {
        return Err(TupError::invalid("empty training set"));
    }
    let val = ValidationSet::sample(split, config.val_negatives, config.seed);
    let shapes: Vec<usize> = obj.params_mut().iter().map(|g| g.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = obj.clone();
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut rng = rng_for(config.seed, &format!("epoch-{epoch}"));
        let examples = epoch_examples(split, config.negatives_per_positive, &mut rng);
        let mut total = 0.0;
        for batch in examples.chunks(config.batch_size) {
            let (loss, grads) = obj.loss_grad(batch, Some(&mut rng))?;
            total += loss * batch.len() as f64;
            adam_step(obj.params_mut(), &grads, &mut adam, config.lr)?;
        }
        let train_loss = total / examples.len() as f64;
        let (val_metric, score) = match config.eval_metric {
            EvalMetric::Ndcg10 => {
                let v = val.ndcg10(&obj)?;
                (v, v)
            }
            EvalMetric::ValLoss => {
                let v = val.loss(&obj, config.negatives_per_positive)?;
                (v, -v)
            }
        };
        let decision = stopper.observe(epoch, score);
        if decision == StopDecision::Improved {
            best = obj.clone();
            on_improve(&best)?;
        }
        let stopped = decision == StopDecision::Stop;
        log::debug!("epoch {epoch}: train_loss {train_loss:.6} val {val_metric:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            seconds: started.elapsed().as_secs_f64(),
            stopped,
        });
        if stopped {
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
        },
    ))
}

/// Trains one neural variant; writes a checkpoint at every improvement
/// when `checkpoint` is given.
pub fn train_model(
    config: &TrainConfig,
    split: &IndexedSplit,
    features: &Features,
    variant: VariantKind,
    init: ModelParams,
    checkpoint: Option<&Path>,
) -> Result<(ModelParams, TrainHistory)> {
    let obj = NeuralObjective::new(variant, init, features)?;
    let (best, history) = train_loop(obj, split, config, |o| {
        if let Some(path) = checkpoint {
            let file = std::fs::File::create(path).map_err(|e| TupError::io(path, e))?;
            model::write_checkpoint(std::io::BufWriter::new(file), o.variant, &o.params)?;
        }
        Ok(())
    })?;
    Ok((best.params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Mode};

    fn toy_features(n_users: usize, n_items: usize, dim: usize, seed: u64, fused: bool) -> Features {
        let mut rng = rng_for(seed, "toy");
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let users = (0..n_users)
            .map(|_| {
                if fused {
                    UserInput::Fused { short: v(dim), long: v(dim) }
                } else {
                    UserInput::Fixed(v(dim))
                }
            })
            .collect();
        let items = (0..n_items).map(|_| v(dim)).collect();
        Features { dim, users, items }
    }

    fn toy_batch(n_users: usize, n_items: usize, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_for(seed, "batch");
        (0..n)
            .map(|k| Example {
                user: rng.random_range(0..n_users),
                item: rng.random_range(0..n_items),
                label: (k % 2) as f64,
            })
            .collect()
    }

    fn params(dim: usize, hidden: Vec<usize>, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(&ModelConfig { dim, hidden, dropout: 0.2 }, seed).unwrap();
        let mut rng = rng_for(seed, "extra");
        p.w_a.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        for l in &mut p.hidden {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        p
    }

    /// Loss through the reference per-example forward in `model`.
    fn reference_loss(variant: VariantKind, p: &ModelParams, f: &Features, batch: &[Example]) -> f64 {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for ex in batch {
            let e_u = match &f.users[ex.user] {
                UserInput::Fixed(v) => v.clone(),
                UserInput::Fused { short, long } => {
                    model::fuse(model::attention_weights(&p.w_a, short, long).unwrap(), short, long).unwrap()
                }
            };
            preds.push(model::score(variant, p, &e_u, &f.items[ex.item]).unwrap());
            labels.push(ex.label);
        }
        bce_loss(&preds, &labels).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0], &[1.0]).unwrap() <= 1e-11);
        assert!((bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.9], &[0.0]).unwrap() - std::f64::consts::LN_10).abs() < 1e-6);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(bce_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn negatives_exclude_positives() {
        let mut rng = rng_for(1, "neg");
        let mut got = sample_negatives(3, &[0], 2, &mut rng);
        got.sort();
        assert_eq!(got, vec![1, 2]);
        let small = sample_negatives(3, &[0], 5, &mut rng);
        assert_eq!(small.len(), 2);
        for _ in 0..50 {
            let s = sample_negatives(1000, &[3, 7, 9], 5, &mut rng);
            let mut d = s.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 5);
            assert!(s.iter().all(|i| ![3, 7, 9].contains(i)));
        }
        let a = sample_negatives(50, &[1], 5, &mut rng_for(4, "x"));
        let b = sample_negatives(50, &[1], 5, &mut rng_for(4, "x"));
        assert_eq!(a, b);
    }

    #[test]
    fn factored_loss_matches_reference_forward() {
        for variant in [VariantKind::Full, VariantKind::Lt, VariantKind::Dp] {
            let f = toy_features(5, 7, 4, 2, variant.uses_attention());
            let p = params(4, vec![6, 3], 5);
            let batch = toy_batch(5, 7, 20, 9);
            let obj = NeuralObjective::new(variant, p.clone(), &f).unwrap();
            let (loss, _) = obj.loss_grad(&batch, None).unwrap();
            assert!((loss - reference_loss(variant, &p, &f, &batch)).abs() < 1e-12, "{variant}");
            let s = obj.scores(0, &[0, 3, 6]).unwrap();
            let e_u = obj.user_embedding(0).unwrap();
            for (k, &i) in [0, 3, 6].iter().enumerate() {
                let r = model::score(variant, &p, &e_u, &f.items[i]).unwrap();
                assert!((s[k] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        for (variant, hidden) in [
            (VariantKind::Full, vec![5]),
            (VariantKind::Full, vec![4, 3]),
            (VariantKind::Dp, vec![3]),
            (VariantKind::St, vec![5]),
        ] {
            let f = toy_features(4, 6, 3, 3, variant.uses_attention());
            let batch = toy_batch(4, 6, 10, 1);
            let p = params(3, hidden, 8);
            let obj = NeuralObjective::new(variant, p.clone(), &f).unwrap();
            let (_, grads) = obj.loss_grad(&batch, None).unwrap();
            let n_groups = grads.len();
            for g in 0..n_groups {
                for k in 0..grads[g].len() {
                    let mut plus = p.clone();
                    plus.groups_mut()[g][k] += h;
                    let mut minus = p.clone();
                    minus.groups_mut()[g][k] -= h;
                    let num = (reference_loss(variant, &plus, &f, &batch) - reference_loss(variant, &minus, &f, &batch)) / (2.0 * h);
                    let ana = grads[g][k];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
                    assert!(rel < 1e-6, "{variant} group {g}[{k}]: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn dropout_gradient_matches_fixed_mask_differences() {
        let f = toy_features(3, 5, 3, 1, true);
        let batch = toy_batch(3, 5, 8, 2);
        let p = params(3, vec![6], 4);
        let obj = NeuralObjective::new(VariantKind::Full, p.clone(), &f).unwrap();
        let (_, grads) = obj.loss_grad(&batch, Some(&mut rng_for(0, "mask"))).unwrap();
        let loss_at = |q: &ModelParams| {
            NeuralObjective::new(VariantKind::Full, q.clone(), &f)
                .unwrap()
                .loss_grad(&batch, Some(&mut rng_for(0, "mask")))
                .unwrap()
                .0
        };
        let h = 1e-6;
        for g in [0, 1, 3] {
            for k in 0..grads[g].len() {
                let mut plus = p.clone();
                plus.groups_mut()[g][k] += h;
                let mut minus = p.clone();
                minus.groups_mut()[g][k] -= h;
                let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (grads[g][k] - num).abs() / grads[g][k].abs().max(num.abs()).max(1e-3);
                assert!(rel < 1e-6);
            }
        }
    }

    #[test]
    fn equal_short_and_long_give_zero_attention_gradient() {
        let mut f = toy_features(4, 6, 3, 3, true);
        for u in &mut f.users {
            if let UserInput::Fused { short, long } = u {
                *long = short.clone();
            }
        }
        let obj = NeuralObjective::new(VariantKind::Full, params(3, vec![5], 1), &f).unwrap();
        let (_, grads) = obj.loss_grad(&toy_batch(4, 6, 12, 0), None).unwrap();
        assert!(grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perfect_predictions_have_vanishing_gradient() {
        // A huge output bias saturates every prediction at 1 for positive labels.
        let f = toy_features(2, 3, 3, 0, true);
        let mut p = params(3, vec![4], 0);
        p.output.bias[0] = 40.0;
        let batch: Vec<Example> = (0..4).map(|k| Example { user: k % 2, item: k % 3, label: 1.0 }).collect();
        let (_, grads) = NeuralObjective::new(VariantKind::Full, p, &f).unwrap().loss_grad(&batch, None).unwrap();
        let norm: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-9);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![vec![1.0, -2.0, 0.5]];
        let mut state = AdamState::new(&[3]);
        adam_step(p.iter_mut().map(|v| v.as_mut_slice()).collect(), &[vec![0.0; 3]], &mut state, 0.1).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);

        let mut p = vec![vec![0.0, 0.0, 0.0]];
        let mut state = AdamState::new(&[3]);
        let g = vec![0.3, -2.0, 0.05];
        adam_step(p.iter_mut().map(|v| v.as_mut_slice()).collect(), &[g.clone()], &mut state, 1e-3).unwrap();
        for k in 0..3 {
            // m_hat = g, v_hat = g^2 after one step.
            let expected = -1e-3 * g[k] / (g[k].abs() + 1e-8);
            assert!((p[0][k] - expected).abs() < 1e-15);
            assert!((p[0][k] + 1e-3 * g[k].signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStopping::new(5);
        let decisions: Vec<_> = (1..=6).map(|e| s.observe(e, 0.5)).collect();
        assert_eq!(decisions[0], StopDecision::Improved);
        assert_eq!(decisions[5], StopDecision::Stop);
        assert!(decisions[1..5].iter().all(|d| *d == StopDecision::Continue));
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(5);
        assert!((1..=100).all(|e| s.observe(e, e as f64) == StopDecision::Improved));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { patience: 200, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eval_forward_needs_no_mask_in_scores() {
        let f = toy_features(2, 3, 3, 0, false);
        let p = params(3, vec![4], 0);
        let obj = NeuralObjective::new(VariantKind::Lt, p.clone(), &f).unwrap();
        let s = obj.scores(1, &[2]).unwrap()[0];
        let UserInput::Fixed(e_u) = &f.users[1] else { unreachable!() };
        assert_eq!(s, model::mlp_forward(&p, e_u, &f.items[2], Mode::Eval, None).unwrap());
    }

    /// Two clusters of eight items; each user trains on six and validates on
    /// the other two of one cluster, so every validation negative comes from
    /// the other cluster.
    fn separable_toy(seed: u64) -> (IndexedSplit, Features) {
        let dim = 8;
        let mut rng = rng_for(seed, "separable");
        let center = |c: usize| (0..dim).map(|k| if k % 2 == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let mut items = Vec::new();
        for i in 0..16 {
            let mut v = center(i % 2);
            v.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
            items.push(v);
        }
        let mut split = IndexedSplit {
            user_ids: Vec::new(),
            item_ids: (0..16).map(|i| format!("i{i:02}")).collect(),
            train: Vec::new(),
            val: Vec::new(),
            train_set: Vec::new(),
        };
        let mut users = Vec::new();
        for u in 0..20 {
            let c = u % 2;
            let mut own: Vec<usize> = (0..16).filter(|i| i % 2 == c).collect();
            own.shuffle(&mut rng);
            let mut set = own[..6].to_vec();
            set.sort_unstable();
            split.user_ids.push(format!("u{u:02}"));
            split.train.push(own[..6].to_vec());
            split.val.push(own[6..8].to_vec());
            split.train_set.push(set);
            users.push(UserInput::Fused { short: center(c), long: center(c) });
        }
        (split, Features { dim, users, items })
    }

    #[test]
    fn separable_toy_trains() {
        let (split, features) = separable_toy(3);
        let config = TrainConfig {
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(&ModelConfig { dim: 8, hidden: vec![16], dropout: 0.2 }, 3).unwrap();
        let (_, history) = train_model(&config, &split, &features, VariantKind::Full, init.clone(), None).unwrap();
        let losses: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        let best = history.epochs[history.best_epoch - 1].val_metric;
        assert!(best >= 0.9, "best val ndcg {best}");

        let (_, again) = train_model(&config, &split, &features, VariantKind::Full, init, None).unwrap();
        assert_eq!(history.metric_trace(), again.metric_trace());
    }

    #[test]
    fn best_params_are_never_worse_than_earlier_best() {
        let (split, features) = separable_toy(5);
        let config = TrainConfig {
            batch_size: 32,
            max_epochs: 12,
            patience: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(&ModelConfig { dim: 8, hidden: vec![8], dropout: 0.2 }, 5).unwrap();
        let (best, history) = train_model(&config, &split, &features, VariantKind::Full, init, None).unwrap();
        let top = history.epochs.iter().map(|e| e.val_metric).fold(f64::MIN, f64::max);
        let val = ValidationSet::sample(&split, config.val_negatives, config.seed);
        let obj = NeuralObjective::new(VariantKind::Full, best, &features).unwrap();
        assert_eq!(val.ndcg10(&obj).unwrap(), top);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]
            #[test]
            fn full_batch_step_does_not_increase_loss(seed in 0u64..10_000) {
                let f = toy_features(4, 6, 3, seed, true);
                let batch = toy_batch(4, 6, 16, seed);
                let mut obj = NeuralObjective::new(VariantKind::Full, params(3, vec![5], seed), &f).unwrap();
                let (before, grads) = obj.loss_grad(&batch, None).unwrap();
                let mut state = AdamState::new(&grads.iter().map(Vec::len).collect::<Vec<_>>());
                adam_step(obj.params_mut(), &grads, &mut state, 1e-3).unwrap();
                let (after, _) = obj.loss_grad(&batch, None).unwrap();
                prop_assert!(after <= before + 1e-9);
            }
        }
    }
}
