//! Forward computation: two-way attention over short/long user embeddings,
//! convex fusion, and the scoring heads (MLP over `[e_u; e_i]`, or a plain
//! dot product).
//!
//! All reference arithmetic is `f64`. [`FastMlp`] is a 32-bit copy of the
//! MLP head for scoring large candidate sets.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::datamodel::Embedding;
use crate::error::{Result, TupError};
use crate::seed::{rng_for, Rng};

/// Model variants: the full method, its ablations and the two
/// representation baselines that reuse the same scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Full,
    St,
    Lt,
    Nots,
    Dp,
    Centric,
    #[serde(rename = "tempfusion")]
    TempFusion,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Centric,
        VariantKind::TempFusion,
        VariantKind::Full,
        VariantKind::St,
        VariantKind::Lt,
        VariantKind::Nots,
        VariantKind::Dp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::St => "st",
            VariantKind::Lt => "lt",
            VariantKind::Nots => "nots",
            VariantKind::Dp => "dp",
            VariantKind::Centric => "centric",
            VariantKind::TempFusion => "tempfusion",
        }
    }

    /// Whether the user embedding comes from the learned attention fusion.
    pub fn uses_attention(self) -> bool {
        matches!(self, VariantKind::Full | VariantKind::Dp | VariantKind::TempFusion)
    }

    pub fn uses_mlp(self) -> bool {
        self != VariantKind::Dp
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for VariantKind {
    type Err = TupError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| TupError::invalid(format!("unknown variant `{s}`")))
    }
}

/// Short- and long-horizon user embeddings. Single-representation variants
/// put their vector in the `long` slot (general profile for `nots`, item
/// mean for `centric`).
#[derive(Debug, Clone, PartialEq)]
pub struct UserRepr {
    pub short: Option<Embedding>,
    pub long: Option<Embedding>,
}

impl UserRepr {
    pub fn pair(short: Embedding, long: Embedding) -> Result<Self> {
        if short.dim() != long.dim() {
            return Err(TupError::DimMismatch {
                expected: short.dim(),
                got: long.dim(),
            });
        }
        Ok(UserRepr {
            short: Some(short),
            long: Some(long),
        })
    }

    pub fn single_long(long: Embedding) -> Self {
        UserRepr { short: None, long: Some(long) }
    }

    pub fn single_short(short: Embedding) -> Self {
        UserRepr { short: Some(short), long: None }
    }
}

/// Fully connected layer, row-major `rows x cols` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Dense {
            rows,
            cols,
            weight: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; rows],
        }
    }

    fn apply<F: Float>(weight: &[F], bias: &[F], cols: usize, x: &[F], out: &mut Vec<F>) {
        out.clear();
        for (row, &b) in weight.chunks_exact(cols).zip(bias) {
            let mut acc = b;
            for (&w, &v) in row.iter().zip(x) {
                acc = acc + w * v;
            }
            out.push(acc);
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        Self::apply(&self.weight, &self.bias, self.cols, x, out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Hidden layer widths; one layer of 128 by default.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: crate::encoder::DEFAULT_DIM,
            hidden: vec![128],
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(TupError::Config("model needs a positive dim and at least one non-empty hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TupError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// The trainable state: attention vector plus MLP layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub w_a: Vec<f64>,
    pub hidden: Vec<Dense>,
    /// Maps the last hidden layer to one logit.
    pub output: Dense,
    pub dropout_rate: f64,
}

impl ModelParams {
    /// Attention starts at zero (equal weights); MLP weights are Glorot
    /// uniform from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init");
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut fan_in = 2 * config.dim;
        for &width in &config.hidden {
            hidden.push(Dense::glorot(width, fan_in, &mut rng));
            fan_in = width;
        }
        Ok(ModelParams {
            dim: config.dim,
            w_a: vec![0.0; config.dim],
            hidden,
            output: Dense::glorot(1, fan_in, &mut rng),
            dropout_rate: config.dropout,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::new();
        let mut fan_in = 2 * config.dim;
        for &width in &config.hidden {
            hidden.push(Dense::zeros(width, fan_in));
            fan_in = width;
        }
        Ok(ModelParams {
            dim: config.dim,
            w_a: vec![0.0; config.dim],
            hidden,
            output: Dense::zeros(1, fan_in),
            dropout_rate: config.dropout,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            hidden: self.hidden.iter().map(|l| l.rows).collect(),
            dropout: self.dropout_rate,
        }
    }

    /// Named views of every parameter array, in a fixed order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("w_a".into(), &self.w_a)];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), &l.weight));
            out.push((format!("hidden{i}.bias"), &l.bias));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.w_a];
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, values) in self.groups() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TupError::NonFinite(name));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(TupError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Softmax over the two scores `w_a·r_short` and `w_a·r_long`, shifted by
/// their maximum. Returns `(alpha_short, alpha_long)` with
/// `alpha_long = 1 - alpha_short`.
///
/// Both weights stay strictly inside (0, 1) while the score gap is below
/// about 36 in magnitude; past that the larger weight rounds to 1.
pub fn attention_weights(w_a: &[f64], r_short: &[f64], r_long: &[f64]) -> Result<(f64, f64)> {
    check_dims(w_a.len(), r_short.len())?;
    check_dims(w_a.len(), r_long.len())?;
    let s1 = dot(w_a, r_short);
    let s2 = dot(w_a, r_long);
    if !(s1.is_finite() && s2.is_finite()) {
        return Err(TupError::NonFinite("attention scores".into()));
    }
    Ok(softmax2(s1, s2))
}

fn softmax2(s1: f64, s2: f64) -> (f64, f64) {
    let m = s1.max(s2);
    let a = (s1 - m).exp();
    let b = (s2 - m).exp();
    let short = a / (a + b);
    (short, 1.0 - short)
}

/// `alpha_short * r_short + alpha_long * r_long`, each coordinate kept
/// within [min, max] of the two inputs.
pub fn fuse(alpha: (f64, f64), r_short: &[f64], r_long: &[f64]) -> Result<Vec<f64>> {
    check_dims(r_short.len(), r_long.len())?;
    if ((alpha.0 + alpha.1) - 1.0).abs() > 1e-9 {
        return Err(TupError::invalid(format!("attention weights {alpha:?} do not sum to 1")));
    }
    Ok(r_short
        .iter()
        .zip(r_long)
        .map(|(&s, &l)| {
            let v = alpha.0 * s + alpha.1 * l;
            v.clamp(s.min(l), s.max(l))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer inverted-dropout multipliers for one example (0 or 1/(1-p)).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<Vec<f64>>);

impl DropoutMask {
    pub fn sample(params: &ModelParams, rng: &mut Rng) -> Self {
        let p = params.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        DropoutMask(
            params
                .hidden
                .iter()
                .map(|l| (0..l.rows).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
                .collect(),
        )
    }
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    /// Post-ReLU, post-dropout output of each hidden layer.
    pub hidden_out: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pub hidden_pre: Vec<Vec<f64>>,
    pub logit: f64,
    pub prob: f64,
}

pub fn mlp_trace(params: &ModelParams, e_u: &[f64], e_i: &[f64], mask: Option<&DropoutMask>) -> Result<MlpTrace> {
    check_dims(params.dim, e_u.len())?;
    check_dims(params.dim, e_i.len())?;
    let mut input = Vec::with_capacity(2 * params.dim);
    input.extend_from_slice(e_u);
    input.extend_from_slice(e_i);
    let mut hidden_out = Vec::with_capacity(params.hidden.len());
    let mut hidden_pre = Vec::with_capacity(params.hidden.len());
    for (li, layer) in params.hidden.iter().enumerate() {
        let x = hidden_out.last().unwrap_or(&input);
        let mut pre = Vec::with_capacity(layer.rows);
        layer.forward(x, &mut pre);
        let mut out: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        if let Some(mask) = mask {
            out.iter_mut().zip(&mask.0[li]).for_each(|(o, m)| *o *= m);
        }
        hidden_pre.push(pre);
        hidden_out.push(out);
    }
    let last = hidden_out.last().unwrap_or(&input);
    let logit = params.output.bias[0] + dot(&params.output.weight, last);
    if !logit.is_finite() {
        return Err(TupError::NonFinite("mlp output".into()));
    }
    Ok(MlpTrace {
        input,
        hidden_out,
        hidden_pre,
        logit,
        prob: sigmoid(logit),
    })
}

/// sigmoid(MLP([e_u; e_i])). Training mode requires a dropout mask.
pub fn mlp_forward(params: &ModelParams, e_u: &[f64], e_i: &[f64], mode: Mode, mask: Option<&DropoutMask>) -> Result<f64> {
    let mask = match mode {
        Mode::Eval => None,
        Mode::Train => Some(mask.ok_or_else(|| TupError::invalid("training-mode forward needs a dropout mask"))?),
    };
    Ok(mlp_trace(params, e_u, e_i, mask)?.prob)
}

pub fn dot_score(e_u: &[f64], e_i: &[f64]) -> Result<f64> {
    check_dims(e_u.len(), e_i.len())?;
    Ok(sigmoid(dot(e_u, e_i)))
}

fn require<'a>(slot: &'a Option<Embedding>, what: &str, variant: VariantKind) -> Result<&'a Embedding> {
    slot.as_ref()
        .ok_or_else(|| TupError::invalid(format!("variant {variant} needs a {what} representation")))
}

/// The user embedding a variant feeds to its scorer.
pub fn assemble_user_embedding(variant: VariantKind, repr: &UserRepr, params: &ModelParams) -> Result<Vec<f64>> {
    match variant {
        VariantKind::Full | VariantKind::Dp | VariantKind::TempFusion => {
            let short = require(&repr.short, "short", variant)?.to_f64();
            let long = require(&repr.long, "long", variant)?.to_f64();
            let alpha = attention_weights(&params.w_a, &short, &long)?;
            fuse(alpha, &short, &long)
        }
        VariantKind::St => Ok(require(&repr.short, "short", variant)?.to_f64()),
        VariantKind::Lt | VariantKind::Nots | VariantKind::Centric => Ok(require(&repr.long, "long", variant)?.to_f64()),
    }
}

/// Scores one (user embedding, item embedding) pair in evaluation mode.
pub fn score(variant: VariantKind, params: &ModelParams, e_u: &[f64], e_i: &[f64]) -> Result<f64> {
    if variant.uses_mlp() {
        mlp_forward(params, e_u, e_i, Mode::Eval, None)
    } else {
        dot_score(e_u, e_i)
    }
}

/// 32-bit evaluation copy of the MLP head.
#[derive(Debug, Clone)]
pub struct FastMlp {
    layers: Vec<(Vec<f32>, Vec<f32>, usize)>,
    output: Vec<f32>,
    output_bias: f32,
}

impl FastMlp {
    pub fn new(params: &ModelParams) -> Self {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        FastMlp {
            layers: params
                .hidden
                .iter()
                .map(|l| (narrow(&l.weight), narrow(&l.bias), l.cols))
                .collect(),
            output: narrow(&params.output.weight),
            output_bias: params.output.bias[0] as f32,
        }
    }

    pub fn score(&self, e_u: &[f32], e_i: &[f32]) -> f32 {
        let mut x: Vec<f32> = e_u.iter().chain(e_i).copied().collect();
        let mut next = Vec::new();
        for (w, b, cols) in &self.layers {
            next.clear();
            next.extend(w.chunks_exact(*cols).zip(b).map(|(row, &b)| (b + lane_dot(row, &x)).max(0.0)));
            std::mem::swap(&mut x, &mut next);
        }
        let z = self.output_bias + lane_dot(&self.output, &x);
        1.0 / (1.0 + (-z).exp())
    }
}

/// Dot product over 8 independent partial sums, so it vectorizes.
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut acc = [0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

// ---- checkpoints ----

const CHECKPOINT_VERSION: u32 = 1;

/// Serializes floats as JSON numbers with 17 significant digits.
struct Floats<'a>(&'a [f64]);

impl Serialize for Floats<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::{Error, SerializeSeq};
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for v in self.0 {
            if !v.is_finite() {
                return Err(S::Error::custom("non-finite parameter"));
            }
            let raw = serde_json::value::RawValue::from_string(format!("{v:.16e}")).map_err(S::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct LayerOut<'a> {
    rows: usize,
    cols: usize,
    weight: Floats<'a>,
    bias: Floats<'a>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    variant: &'a str,
    dim: usize,
    hidden: Vec<usize>,
    dropout_rate: Floats<'a>,
    w_a: Floats<'a>,
    layers: Vec<LayerOut<'a>>,
    output: LayerOut<'a>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format_version: u32,
    variant: VariantKind,
    dim: usize,
    hidden: Vec<usize>,
    dropout_rate: Vec<f64>,
    w_a: Vec<f64>,
    layers: Vec<Dense>,
    output: Dense,
}

fn layer_out(l: &Dense) -> LayerOut<'_> {
    LayerOut {
        rows: l.rows,
        cols: l.cols,
        weight: Floats(&l.weight),
        bias: Floats(&l.bias),
    }
}

pub fn write_checkpoint<W: Write>(w: W, variant: VariantKind, params: &ModelParams) -> Result<()> {
    params.check_finite()?;
    let rate = [params.dropout_rate];
    let doc = CheckpointOut {
        format_version: CHECKPOINT_VERSION,
        variant: variant.tag(),
        dim: params.dim,
        hidden: params.hidden.iter().map(|l| l.rows).collect(),
        dropout_rate: Floats(&rate),
        w_a: Floats(&params.w_a),
        layers: params.hidden.iter().map(layer_out).collect(),
        output: layer_out(&params.output),
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(VariantKind, ModelParams)> {
    let doc: CheckpointIn = serde_json::from_reader(r)?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(TupError::Format(format!("unsupported checkpoint version {}", doc.format_version)));
    }
    let bad = |what: &str| TupError::Format(format!("checkpoint shape mismatch: {what}"));
    if doc.w_a.len() != doc.dim || doc.layers.len() != doc.hidden.len() || doc.dropout_rate.len() != 1 {
        return Err(bad("header"));
    }
    let mut fan_in = 2 * doc.dim;
    for (l, &h) in doc.layers.iter().zip(&doc.hidden) {
        if l.rows != h || l.cols != fan_in || l.weight.len() != h * fan_in || l.bias.len() != h {
            return Err(bad("hidden layer"));
        }
        fan_in = h;
    }
    let o = &doc.output;
    if o.rows != 1 || o.cols != fan_in || o.weight.len() != fan_in || o.bias.len() != 1 {
        return Err(bad("output layer"));
    }
    let params = ModelParams {
        dim: doc.dim,
        w_a: doc.w_a,
        hidden: doc.layers,
        output: doc.output,
        dropout_rate: doc.dropout_rate[0],
    };
    params.check_finite()?;
    Ok((doc.variant, params))
}
