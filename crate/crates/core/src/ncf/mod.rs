//! Neural collaborative filtering.
//!
//! The input of a multilayer perceptron is the concatenation of a model
//! embedding, a task embedding and (for the factor variants) one embedding
//! per descriptive factor; the output passes through a sigmoid. All
//! parameters live in one flat vector so that optimizers, gradient checks
//! and checkpoints treat them uniformly.

mod encoder;

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use encoder::{Code, Encoded, FactorEncoder, FactorSpec, MIN_CATEGORY_COUNT};

use crate::dataset::{Factor, Records, ScoreMatrix};
use crate::dataset::synth::logistic;
use crate::error::{Error, Result};
use crate::mf::{join, parse_row, TrainConfig, TRACE_EVERY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    IdOnly,
    FactorEnhanced,
    /// Descriptive factors only: models with identical records are
    /// indistinguishable.
    FactorOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::IdOnly, Variant::FactorEnhanced, Variant::FactorOnly];

    pub fn uses_ids(self) -> bool {
        self != Variant::FactorOnly
    }

    pub fn uses_factors(self) -> bool {
        self != Variant::IdOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::IdOnly => "id_only",
            Variant::FactorEnhanced => "factor_enhanced",
            Variant::FactorOnly => "factor_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// A subset of the 16 factors, as a bitmask over [`Factor::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactorSet(pub u16);

impl FactorSet {
    pub const ALL: FactorSet = FactorSet(u16::MAX);
    pub const EMPTY: FactorSet = FactorSet(0);

    pub fn contains(self, f: Factor) -> bool {
        self.0 & (1 << f.index()) != 0
    }

    pub fn with(self, f: Factor) -> FactorSet {
        FactorSet(self.0 | (1 << f.index()))
    }

    pub fn without(self, f: Factor) -> FactorSet {
        FactorSet(self.0 & !(1 << f.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromIterator<Factor> for FactorSet {
    fn from_iter<I: IntoIterator<Item = Factor>>(iter: I) -> Self {
        iter.into_iter().fold(FactorSet::EMPTY, FactorSet::with)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcfConfig {
    /// `iterations` counts training examples consumed, so one update step
    /// uses `batch_size` of them.
    pub train: TrainConfig,
    pub batch_size: usize,
    pub embed_width: usize,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
}

impl Default for NcfConfig {
    fn default() -> Self {
        NcfConfig {
            train: TrainConfig::default(),
            batch_size: 64,
            embed_width: 8,
            hidden: vec![64, 32],
            optimizer: Optimizer::Adam,
        }
    }
}

impl NcfConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.batch_size == 0 || self.embed_width == 0 {
            return Err(Error::Config("batch_size and embed_width must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    model_emb: Range<usize>,
    task_emb: Range<usize>,
    /// Table (categorical) or projection vector (numerical), per factor.
    factor: Vec<Range<usize>>,
    layers: Vec<Dense>,
    input: usize,
    total: usize,
}

impl Layout {
    fn new(variant: Variant, n: usize, m: usize, d: usize, enc: Option<&FactorEncoder>, hidden: &[usize]) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let (model_emb, task_emb) = if variant.uses_ids() {
            (take(n * d), take(m * d))
        } else {
            (0..0, 0..0)
        };
        let mut input = if variant.uses_ids() { 2 * d } else { 0 };
        let mut factor = Vec::new();
        if let Some(enc) = enc {
            for spec in &enc.specs {
                factor.push(take(spec.rows() * enc.width));
            }
            input += 16 * enc.width;
        }
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &fan_out in hidden.iter().chain(&[1]) {
            let w = take(fan_in * fan_out).start;
            let b = take(fan_out).start;
            layers.push(Dense {
                w,
                b,
                fan_in,
                fan_out,
            });
            fan_in = fan_out;
        }
        Layout {
            model_emb,
            task_emb,
            factor,
            layers,
            input,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcfModel {
    variant: Variant,
    n_models: usize,
    n_tasks: usize,
    dim: usize,
    hidden: Vec<usize>,
    encoder: Option<FactorEncoder>,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-sample activations, reused across samples.
struct Scratch {
    acts: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl NcfModel {
    /// A freshly initialized network. Embeddings and factor parameters are
    /// drawn from N(0, 0.1), hidden weights use He scaling, biases start at 0.
    pub fn new(
        variant: Variant,
        n_models: usize,
        n_tasks: usize,
        encoder: Option<FactorEncoder>,
        config: &NcfConfig,
    ) -> Result<Self> {
        config.validate()?;
        if variant.uses_factors() != encoder.is_some() {
            return Err(Error::Input(format!(
                "variant {variant} {} a factor encoder",
                if variant.uses_factors() { "needs" } else { "takes no" }
            )));
        }
        let dim = config.train.latent_dim;
        let layout = Layout::new(variant, n_models, n_tasks, dim, encoder.as_ref(), &config.hidden);
        let mut model = NcfModel {
            variant,
            n_models,
            n_tasks,
            dim,
            hidden: config.hidden.clone(),
            encoder,
            params: vec![0.0; layout.total],
            layout,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let small = Normal::new(0.0, 0.1).unwrap();
        let mut fill = |params: &mut [f64], dist: &Normal<f64>| {
            params.iter_mut().for_each(|p| *p = dist.sample(&mut rng));
        };
        let l = model.layout.clone();
        fill(&mut model.params[l.model_emb.clone()], &small);
        fill(&mut model.params[l.task_emb.clone()], &small);
        for r in &l.factor {
            fill(&mut model.params[r.clone()], &small);
        }
        let last = l.layers.len() - 1;
        for (k, layer) in l.layers.iter().enumerate() {
            let gain = if k == last { 1.0 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / layer.fan_in.max(1) as f64).sqrt()).unwrap();
            fill(&mut model.params[layer.w..layer.w + layer.fan_in * layer.fan_out], &dist);
        }
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn encoder(&self) -> Option<&FactorEncoder> {
        self.encoder.as_ref()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter groups, in storage order.
    pub fn param_classes(&self) -> Vec<(String, Range<usize>)> {
        let l = &self.layout;
        let mut out = Vec::new();
        if self.variant.uses_ids() {
            out.push(("model_embedding".to_string(), l.model_emb.clone()));
            out.push(("task_embedding".to_string(), l.task_emb.clone()));
        }
        if let Some(enc) = &self.encoder {
            for ((f, spec), r) in Factor::ALL.iter().zip(&enc.specs).zip(&l.factor) {
                let kind = match spec {
                    FactorSpec::Categorical { .. } => "table",
                    FactorSpec::Numerical { .. } => "projection",
                };
                out.push((format!("{}_{kind}", f.column()), r.clone()));
            }
        }
        for (k, d) in l.layers.iter().enumerate() {
            out.push((format!("layer{k}_weight"), d.w..d.w + d.fan_in * d.fan_out));
            out.push((format!("layer{k}_bias"), d.b..d.b + d.fan_out));
        }
        out
    }

    /// Factor parameters (table or projection) of one factor.
    pub fn factor_params_mut(&mut self, f: Factor) -> Option<&mut [f64]> {
        let r = self.layout.factor.get(f.index())?.clone();
        Some(&mut self.params[r])
    }

    /// Columns of the first layer's weight matrix fed by factor `f`.
    pub fn first_layer_columns(&self, f: Factor) -> Option<Range<usize>> {
        let enc = self.encoder.as_ref()?;
        let ids = if self.variant.uses_ids() { 2 * self.dim } else { 0 };
        let start = ids + f.index() * enc.width;
        Some(start..start + enc.width)
    }

    /// Mutable first-layer weight matrix, row-major `fan_out x fan_in`.
    pub fn first_layer_mut(&mut self) -> (&mut [f64], usize) {
        let d = &self.layout.layers[0];
        let (w, n, fan_in) = (d.w, d.fan_in * d.fan_out, d.fan_in);
        (&mut self.params[w..w + n], fan_in)
    }

    pub fn encode(&self, records: &Records) -> Option<Encoded> {
        self.encoder.as_ref().map(|e| e.encode(records))
    }

    fn scratch(&self) -> Scratch {
        let mut acts = vec![vec![0.0; self.layout.input]];
        for d in &self.layout.layers {
            acts.push(vec![0.0; d.fan_out]);
        }
        let grads = acts.clone();
        Scratch { acts, grads }
    }

    fn check(&self, enc: Option<&Encoded>, mi: usize, ti: usize) -> Result<()> {
        if self.variant.uses_ids() && (mi >= self.n_models || ti >= self.n_tasks) {
            return Err(Error::Index(format!(
                "({mi}, {ti}) outside a {}x{} model",
                self.n_models, self.n_tasks
            )));
        }
        if self.variant.uses_factors() {
            let enc = enc.ok_or_else(|| {
                Error::Input(format!("variant {} needs factor records", self.variant))
            })?;
            if mi >= enc.models.len() || ti >= enc.tasks.len() {
                return Err(Error::Index(format!(
                    "({mi}, {ti}) outside the supplied records"
                )));
            }
        }
        Ok(())
    }

    fn code(enc: &Encoded, mi: usize, ti: usize, f: Factor) -> Code {
        let k = f.index();
        if k < 12 {
            enc.models[mi][k]
        } else {
            enc.tasks[ti][k - 12]
        }
    }

    fn fill_input(&self, x: &mut [f64], enc: Option<&Encoded>, mi: usize, ti: usize, mask: FactorSet) {
        let d = self.dim;
        let mut at = 0;
        if self.variant.uses_ids() {
            let p = self.layout.model_emb.start + mi * d;
            let q = self.layout.task_emb.start + ti * d;
            x[..d].copy_from_slice(&self.params[p..p + d]);
            x[d..2 * d].copy_from_slice(&self.params[q..q + d]);
            at = 2 * d;
        }
        if let (Some(enc), Some(e)) = (enc, &self.encoder) {
            let w = e.width;
            for f in Factor::ALL {
                let slot = &mut x[at..at + w];
                let base = self.layout.factor[f.index()].start;
                match Self::code(enc, mi, ti, f) {
                    Code::Row(r) if mask.contains(f) => {
                        slot.copy_from_slice(&self.params[base + r * w..base + (r + 1) * w])
                    }
                    Code::Value(z) if mask.contains(f) => {
                        for (s, v) in slot.iter_mut().zip(&self.params[base..base + w]) {
                            *s = z * v;
                        }
                    }
                    _ => slot.fill(0.0),
                }
                at += w;
            }
        }
    }

    /// Returns the pre-sigmoid output; `s.acts[0]` must hold the input.
    fn forward_filled(&self, s: &mut Scratch) -> f64 {
        let last = self.layout.layers.len() - 1;
        for (k, d) in self.layout.layers.iter().enumerate() {
            let (before, after) = s.acts.split_at_mut(k + 1);
            let x = &before[k];
            let out = &mut after[0];
            for j in 0..d.fan_out {
                let row = &self.params[d.w + j * d.fan_in..d.w + (j + 1) * d.fan_in];
                let mut z = self.params[d.b + j];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    z += wi * xi;
                }
                out[j] = if k < last { z.max(0.0) } else { z };
            }
        }
        s.acts[last + 1][0]
    }

    /// Accumulates `dz * d(output)/d(params)` into `grad`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        s: &mut Scratch,
        dz: f64,
        grad: &mut [f64],
        enc: Option<&Encoded>,
        mi: usize,
        ti: usize,
        mask: FactorSet,
    ) {
        let layers = &self.layout.layers;
        let last = layers.len() - 1;
        s.grads[last + 1][0] = dz;
        for k in (0..layers.len()).rev() {
            let d = &layers[k];
            let (gb, ga) = s.grads.split_at_mut(k + 1);
            let g_out = &ga[0];
            let g_in = &mut gb[k];
            g_in.iter_mut().for_each(|g| *g = 0.0);
            let x = &s.acts[k];
            for j in 0..d.fan_out {
                let g = g_out[j];
                if g == 0.0 {
                    continue;
                }
                grad[d.b + j] += g;
                let w0 = d.w + j * d.fan_in;
                let row = &self.params[w0..w0 + d.fan_in];
                let grow = &mut grad[w0..w0 + d.fan_in];
                for i in 0..d.fan_in {
                    grow[i] += g * x[i];
                    g_in[i] += g * row[i];
                }
            }
            if k > 0 {
                // ReLU: the stored activation is post-rectification.
                for (gi, xi) in g_in.iter_mut().zip(x.iter()) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
        }
        let gx = &s.grads[0];
        let dim = self.dim;
        let mut at = 0;
        if self.variant.uses_ids() {
            let p = self.layout.model_emb.start + mi * dim;
            let q = self.layout.task_emb.start + ti * dim;
            for k in 0..dim {
                grad[p + k] += gx[k];
                grad[q + k] += gx[dim + k];
            }
            at = 2 * dim;
        }
        if let (Some(enc), Some(e)) = (enc, &self.encoder) {
            let w = e.width;
            for f in Factor::ALL {
                let base = self.layout.factor[f.index()].start;
                let slot = &gx[at..at + w];
                match Self::code(enc, mi, ti, f) {
                    Code::Row(r) if mask.contains(f) => {
                        for (g, s) in grad[base + r * w..base + (r + 1) * w].iter_mut().zip(slot) {
                            *g += s;
                        }
                    }
                    Code::Value(z) if mask.contains(f) => {
                        for (g, s) in grad[base..base + w].iter_mut().zip(slot) {
                            *g += z * s;
                        }
                    }
                    _ => {}
                }
                at += w;
            }
        }
    }

    /// Prediction with the factors outside `mask` treated as missing.
    pub fn predict_masked(&self, enc: Option<&Encoded>, mi: usize, ti: usize, mask: FactorSet) -> Result<f64> {
        self.check(enc, mi, ti)?;
        let mut s = self.scratch();
        self.fill_input(&mut s.acts[0], enc, mi, ti, mask);
        Ok(logistic(self.forward_filled(&mut s)))
    }

    pub fn predict_encoded(&self, enc: Option<&Encoded>, mi: usize, ti: usize) -> Result<f64> {
        self.predict_masked(enc, mi, ti, FactorSet::ALL)
    }

    /// Batch predictions sharing one scratch buffer.
    pub fn predict_many(&self, enc: Option<&Encoded>, cells: &[(usize, usize)], mask: FactorSet) -> Result<Vec<f64>> {
        let mut s = self.scratch();
        cells
            .iter()
            .map(|&(mi, ti)| {
                self.check(enc, mi, ti)?;
                self.fill_input(&mut s.acts[0], enc, mi, ti, mask);
                Ok(logistic(self.forward_filled(&mut s)))
            })
            .collect()
    }

    /// Mean squared error over `batch` and its gradient with respect to
    /// every parameter.
    pub fn loss_and_grad(&self, batch: &[(usize, usize, f64)], enc: Option<&Encoded>) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut s = self.scratch();
        let loss = self.accumulate(batch.iter().copied(), batch.len(), enc, &mut s, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate(
        &self,
        batch: impl Iterator<Item = (usize, usize, f64)>,
        len: usize,
        enc: Option<&Encoded>,
        s: &mut Scratch,
        grad: &mut [f64],
    ) -> Result<f64> {
        let scale = 1.0 / len.max(1) as f64;
        let mut loss = 0.0;
        for (mi, ti, target) in batch {
            self.check(enc, mi, ti)?;
            self.fill_input(&mut s.acts[0], enc, mi, ti, FactorSet::ALL);
            let y = logistic(self.forward_filled(s));
            let err = y - target;
            loss += err * err * scale;
            let dz = 2.0 * err * y * (1.0 - y) * scale;
            self.backward(s, dz, grad, enc, mi, ti, FactorSet::ALL);
        }
        Ok(loss)
    }

    pub fn training_mse(&self, train: &ScoreMatrix, enc: Option<&Encoded>) -> Result<f64> {
        let cells: Vec<(usize, usize)> = train.entries().iter().map(|e| (e.model, e.task)).collect();
        let preds = self.predict_many(enc, &cells, FactorSet::ALL)?;
        let sum: f64 = preds
            .iter()
            .zip(train.entries())
            .map(|(p, e)| (p - e.score).powi(2))
            .sum();
        Ok(sum / train.len().max(1) as f64)
    }

    /// Hash over the variant, dimensions and factor encoding; a checkpoint
    /// only loads against data encoded the same way.
    pub fn schema_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.header_text().as_bytes());
        hex::encode(h.finalize())
    }

    fn header_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant {}", self.variant).unwrap();
        writeln!(s, "models {}", self.n_models).unwrap();
        writeln!(s, "tasks {}", self.n_tasks).unwrap();
        writeln!(s, "dim {}", self.dim).unwrap();
        writeln!(s, "hidden {}", self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")).unwrap();
        match &self.encoder {
            Some(e) => {
                writeln!(s, "encoder").unwrap();
                s.push_str(&e.describe());
            }
            None => writeln!(s, "encoder none").unwrap(),
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{NCF_MAGIC}").unwrap();
        writeln!(s, "schema {}", self.schema_hash()).unwrap();
        s.push_str(&self.header_text());
        writeln!(s, "params {}", self.params.len()).unwrap();
        writeln!(s, "{}", join(&self.params)).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(NCF_MAGIC) {
            return Err(bad("not a neural collaborative filtering checkpoint".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header".into()))?;
            line.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' ').or(if v.is_empty() { Some("") } else { None }))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected '{key}', got '{line}'")))
        };
        let stored = field("schema")?;
        let variant: Variant = field("variant")?.parse().map_err(|e: Error| bad(e.to_string()))?;
        let num = |v: String| v.parse::<usize>().map_err(|_| bad(format!("bad count '{v}'")));
        let n_models = num(field("models")?)?;
        let n_tasks = num(field("tasks")?)?;
        let dim = num(field("dim")?)?;
        let hidden = field("hidden")?
            .split_whitespace()
            .map(|t| num(t.to_string()))
            .collect::<Result<Vec<_>>>()?;
        let encoder = match field("encoder")?.as_str() {
            "none" => None,
            "" => Some(FactorEncoder::parse(&mut lines)?),
            other => return Err(bad(format!("bad encoder tag '{other}'"))),
        };
        let count = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("missing params count".into()))?;
        let params = parse_row(lines.next().unwrap_or(""))?;
        let layout = Layout::new(variant, n_models, n_tasks, dim, encoder.as_ref(), &hidden);
        if params.len() != count || count != layout.total {
            return Err(bad(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        let model = NcfModel {
            variant,
            n_models,
            n_tasks,
            dim,
            hidden,
            encoder,
            layout,
            params,
        };
        if model.schema_hash() != stored {
            return Err(bad("schema hash does not match the checkpoint contents".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Loads a checkpoint and refuses it unless its schema hash is `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &str) -> Result<Self> {
        let model = Self::load(path)?;
        if model.schema_hash() != expected {
            return Err(Error::Checkpoint(format!(
                "schema hash {} does not match the expected {expected}",
                model.schema_hash()
            )));
        }
        Ok(model)
    }
}

const NCF_MAGIC: &str = "collabperf-ncf v1";

/// Encoder for `variant` fitted on the training registry, or `None` for the
/// id-only variant. Factor variants without records are an input error.
pub fn fit_encoder(
    train: &ScoreMatrix,
    records: Option<&Records>,
    variant: Variant,
    width: usize,
) -> Result<Option<FactorEncoder>> {
    if !variant.uses_factors() {
        return Ok(None);
    }
    let records = records.ok_or_else(|| Error::Input(format!("variant {variant} needs factor records")))?;
    Ok(Some(FactorEncoder::fit(records, train, width)?))
}

pub fn train_ncf(train: &ScoreMatrix, records: Option<&Records>, variant: Variant, config: &NcfConfig) -> Result<NcfModel> {
    Ok(train_ncf_traced(train, records, variant, config)?.0)
}

/// Also returns the training MSE after every `TRACE_EVERY` examples.
pub fn train_ncf_traced(
    train: &ScoreMatrix,
    records: Option<&Records>,
    variant: Variant,
    config: &NcfConfig,
) -> Result<(NcfModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Input("training matrix is empty".into()));
    }
    let encoder = fit_encoder(train, records, variant, config.embed_width)?;
    let mut model = NcfModel::new(variant, train.n_models(), train.n_tasks(), encoder, config)?;
    let enc = records.and_then(|r| model.encode(r));
    let enc = enc.as_ref();

    let tc = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let entries = train.entries();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut pos = order.len();
    let mut grad = vec![0.0; model.params.len()];
    let mut m1 = vec![0.0; model.params.len()];
    let mut m2 = vec![0.0; model.params.len()];
    let mut s = model.scratch();
    let mut trace = Vec::new();
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let steps = tc.iterations.div_ceil(config.batch_size);
    let mut seen = 0;

    for step in 0..steps {
        let size = config.batch_size.min(tc.iterations - seen);
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let e = &entries[order[pos]];
            batch.push((e.model, e.task, e.score));
            pos += 1;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.accumulate(batch.into_iter(), size, enc, &mut s, &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: "batch loss is not finite".into(),
            });
        }
        if tc.l2_penalty > 0.0 {
            for (g, p) in grad.iter_mut().zip(&model.params) {
                *g += 2.0 * tc.l2_penalty * p;
            }
        }
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params.iter_mut().zip(&grad) {
                    *p -= tc.learning_rate * g;
                }
            }
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for k in 0..grad.len() {
                    let g = grad[k];
                    m1[k] = beta1 * m1[k] + (1.0 - beta1) * g;
                    m2[k] = beta2 * m2[k] + (1.0 - beta2) * g * g;
                    model.params[k] -= tc.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + eps);
                }
            }
        }
        let before = seen;
        seen += size;
        if seen / TRACE_EVERY > before / TRACE_EVERY {
            let mse = model.training_mse(train, enc)?;
            if !mse.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "training loss is not finite".into(),
                });
            }
            trace.push(mse);
        }
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training {
            step: steps,
            message: "parameters are not finite".into(),
        });
    }
    Ok((model, trace))
}

/// Prediction for cell `(mi, ti)`; factor variants read the factors of the
/// `mi`-th model and `ti`-th task of `records`.
pub fn predict_ncf(model: &NcfModel, mi: usize, ti: usize, records: Option<&Records>) -> Result<f64> {
    if model.variant.uses_factors() && records.is_none() {
        return Err(Error::Input(format!("variant {} needs factor records", model.variant)));
    }
    let enc = records.and_then(|r| model.encode(r));
    model.predict_encoded(enc.as_ref(), mi, ti)
}
