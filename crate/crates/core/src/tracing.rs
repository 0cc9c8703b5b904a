//! Causal tracing: corrupt the subject embeddings with Gaussian noise, restore
//! clean activations at individual sites, and measure how much of the
//! object's probability comes back.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::darc::FactRecord;
use crate::model::{
    argmax, token_probability, ActivationCache, Component, EmbeddingNoise, Gpt2, InterventionSet, ModelError,
    Restoration, Site,
};
use crate::tokenizer::{bucketize, locate_subject, Bucket, PositionBuckets, TokenSpan, TokenizerError, Vocab};

/// Minimum number of tokens accepted for noise calibration.
pub const MIN_CALIBRATION_TOKENS: usize = 100;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("fact {0} is not predicted correctly")]
    NotCorrectlyPredicted(String),
    #[error("invalid trace config: {0}")]
    InvalidConfig(String),
    #[error("no calibration tokens")]
    EmptyCalibration,
    #[error("{found} calibration tokens, need at least {MIN_CALIBRATION_TOKENS}")]
    InsufficientCalibration { found: usize },
    #[error("aggregate csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSelection {
    AllBuckets,
    Subset(Vec<Bucket>),
}

impl PositionSelection {
    fn includes(&self, bucket: Bucket) -> bool {
        match self {
            PositionSelection::AllBuckets => true,
            PositionSelection::Subset(b) => b.contains(&bucket),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub noise_scale_factor: f64,
    pub noise_samples: usize,
    /// Layers restored jointly around the target for MLP and attention
    /// sites. Residual sites always restore a single layer.
    pub window: usize,
    pub components: Vec<Component>,
    pub positions: PositionSelection,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            noise_scale_factor: 3.0,
            noise_samples: 10,
            window: 10,
            components: Component::ALL.to_vec(),
            positions: PositionSelection::AllBuckets,
            seed: 0,
        }
    }
}

impl TraceConfig {
    /// MLP at the last subject token and attention at the last token only.
    pub fn quick() -> Self {
        Self {
            components: vec![Component::MlpOut, Component::AttnOut],
            positions: PositionSelection::Subset(vec![Bucket::LastSubject, Bucket::LastToken]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidConfig(m.to_string()));
        if !(self.noise_scale_factor >= 0.0 && self.noise_scale_factor.is_finite()) {
            return bad("noise_scale_factor must be finite and non-negative");
        }
        if self.noise_samples == 0 {
            return bad("noise_samples must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.components.is_empty() {
            return bad("no components selected");
        }
        let mut seen = self.components.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.components.len() {
            return bad("duplicate component");
        }
        if let PositionSelection::Subset(b) = &self.positions {
            if b.is_empty() {
                return bad("empty position subset");
            }
        }
        Ok(())
    }

    /// Layers restored for a target layer, clipped to the model.
    pub fn window_layers(&self, component: Component, target: usize, n_layer: usize) -> Range<usize> {
        if component == Component::Residual {
            return target..target + 1;
        }
        let start = target.saturating_sub(self.window / 2);
        let end = (target + self.window - self.window / 2).min(n_layer);
        start..end
    }
}

/// Standard deviation of token-embedding components over every token
/// occurrence in the calibration prompts.
pub fn calibrate_noise(model: &Gpt2, prompts: &[Vec<u32>]) -> Result<f64, TraceError> {
    let total: usize = prompts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(TraceError::EmptyCalibration);
    }
    if total < MIN_CALIBRATION_TOKENS {
        return Err(TraceError::InsufficientCalibration { found: total });
    }
    let vocab = model.config().vocab_size;
    let mut stats = RunningStats::default();
    for &t in prompts.iter().flatten() {
        if t as usize >= vocab {
            return Err(ModelError::UnknownToken(t).into());
        }
        for &v in model.token_embedding_row(t) {
            stats.push(v as f64);
        }
    }
    Ok(stats.population_stddev().unwrap_or(0.0))
}

/// Stable identifier for a fact: its `known_id` when it has a real one,
/// otherwise a content hash.
pub fn fact_id(fact: &FactRecord) -> String {
    match fact.known_id.as_deref() {
        Some(id) if !id.trim().is_empty() && id != "NONE" => id.to_string(),
        _ => {
            let mut h = Sha256::new();
            for part in [&fact.full_fact, &fact.subject, &fact.prompt, &fact.group] {
                h.update(part.as_bytes());
                h.update([0u8]);
            }
            hex::encode(&h.finalize()[..8])
        }
    }
}

/// RNG seed for one noise sample of one fact.
pub fn sample_seed(seed: u64, fact_id: &str, sample: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((fact_id.len() as u64).to_le_bytes());
    h.update(fact_id.as_bytes());
    h.update((sample as u64).to_le_bytes());
    h.finalize().into()
}

/// Noise added to the subject span for one sample: i.i.d.
/// N(0, (noise_scale_factor * sigma)^2) per component.
pub fn sample_noise(
    config: &TraceConfig,
    sigma: f64,
    fact_id: &str,
    sample: usize,
    span: TokenSpan,
    d_model: usize,
) -> EmbeddingNoise {
    let mut rng = ChaCha20Rng::from_seed(sample_seed(config.seed, fact_id, sample));
    let scale = (config.noise_scale_factor * sigma) as f32;
    let noise = (0..span.len() * d_model)
        .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
        .collect();
    EmbeddingNoise { span, noise }
}

/// First token of the object as it would follow the prompt.
///
/// The object is encoded with a leading space unless the prompt already ends
/// in whitespace. If that yields a bare space token, the raw object encoding
/// is used instead.
pub fn object_token(prompt: &str, object: &str, vocab: &Vocab) -> Option<u32> {
    if object.trim().is_empty() {
        return None;
    }
    let spaced = if prompt.ends_with(char::is_whitespace) {
        object.to_string()
    } else {
        format!(" {object}")
    };
    let first = *vocab.encode(&spaced).first()?;
    if vocab.token(first) == Some("\u{120}") {
        log::debug!("object {object:?} starts with a bare space token, using raw encoding");
        return vocab.encode(object).first().copied();
    }
    Some(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    WrongPrediction,
    SubjectNotFound,
    EmptyObject,
    ContextOverflow,
    ModelError,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::WrongPrediction => "wrong_prediction",
            SkipReason::SubjectNotFound => "subject_not_found",
            SkipReason::EmptyObject => "empty_object",
            SkipReason::ContextOverflow => "context_overflow",
            SkipReason::ModelError => "model_error",
        }
    }
}

/// A fact prepared for tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceInput {
    pub fact_id: String,
    pub tokens: Vec<u32>,
    pub subject: TokenSpan,
    pub object_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionCheck {
    Correct(TraceInput),
    Skipped { reason: SkipReason, detail: String },
}

/// Tokenize a fact, locate its subject and test whether the model's top
/// prediction is the object's first token.
pub fn check_prediction(fact: &FactRecord, model: &Gpt2, vocab: &Vocab) -> PredictionCheck {
    let skip = |reason, detail: String| PredictionCheck::Skipped { reason, detail };
    let (tokens, subject) = match locate_subject(&fact.prompt, &fact.subject, vocab) {
        Ok(v) => v,
        Err(e) => return skip(SkipReason::SubjectNotFound, e.to_string()),
    };
    let Some(object_id) = object_token(&fact.prompt, &fact.prediction, vocab) else {
        return skip(SkipReason::EmptyObject, "object encodes to no tokens".into());
    };
    let logits = match model.forward(&tokens, None, false) {
        Ok(o) => o.logits,
        Err(e @ ModelError::ContextOverflow { .. }) => return skip(SkipReason::ContextOverflow, e.to_string()),
        Err(e) => return skip(SkipReason::ModelError, e.to_string()),
    };
    let top = argmax(&logits);
    if top != object_id {
        return skip(
            SkipReason::WrongPrediction,
            format!(
                "predicted {:?}, expected {:?}",
                vocab.token(top),
                vocab.token(object_id)
            ),
        );
    }
    PredictionCheck::Correct(TraceInput {
        fact_id: fact_id(fact),
        tokens,
        subject,
        object_id,
    })
}

pub fn is_correct_prediction(fact: &FactRecord, model: &Gpt2, vocab: &Vocab) -> bool {
    match check_prediction(fact, model, vocab) {
        PredictionCheck::Correct(_) => true,
        PredictionCheck::Skipped { reason, detail } => {
            log::debug!("fact {} not traced: {} ({detail})", fact_id(fact), reason.as_str());
            false
        }
    }
}

/// Result of tracing one fact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactTrace {
    pub fact_id: String,
    pub tokens: Vec<u32>,
    pub subject: TokenSpan,
    pub object_id: u32,
    pub clean_p: f64,
    /// Mean over noise samples.
    pub corrupt_p: f64,
    pub corrupt_p_samples: Vec<f64>,
    pub total_effect: f64,
    /// Leading 8 bytes of each sample's RNG seed, little-endian.
    pub noise_seeds: Vec<u64>,
    pub buckets: PositionBuckets,
    pub components: Vec<Component>,
    /// Traced positions, ascending.
    pub positions: Vec<usize>,
    pub n_layer: usize,
    /// Indirect effects, `[layer][traced position][component]`.
    pub ie: Vec<f64>,
}

impl FactTrace {
    pub fn ie(&self, layer: usize, position: usize, component: Component) -> Option<f64> {
        let p = self.positions.binary_search(&position).ok()?;
        let c = self.components.iter().position(|&x| x == component)?;
        if layer >= self.n_layer {
            return None;
        }
        Some(self.ie[(layer * self.positions.len() + p) * self.components.len() + c])
    }

    /// Mean IE over this fact's traced positions in `bucket`.
    pub fn bucket_mean(&self, layer: usize, bucket: Bucket, component: Component) -> Option<f64> {
        let vals: Vec<f64> = self
            .buckets
            .positions_of(bucket)
            .filter_map(|p| self.ie(layer, p, component))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

struct SampleRun {
    corrupt_p: f64,
    restored: Vec<f64>,
}

fn checked_input(model: &Gpt2, input: &TraceInput) -> Result<(), TraceError> {
    let seq = input.tokens.len();
    if input.subject.end >= seq {
        return Err(ModelError::SiteOutOfRange(format!("subject span {:?}", input.subject)).into());
    }
    if input.object_id as usize >= model.config().vocab_size {
        return Err(ModelError::UnknownToken(input.object_id).into());
    }
    Ok(())
}

/// Trace a prepared fact. Noise samples run in parallel; every site of one
/// sample sees the same noise realization.
pub fn trace_input(
    model: &Gpt2,
    input: &TraceInput,
    config: &TraceConfig,
    sigma: f64,
) -> Result<FactTrace, TraceError> {
    config.validate()?;
    checked_input(model, input)?;
    let n_layer = model.config().n_layer;
    let d = model.config().d_model;
    let seq = input.tokens.len();
    let buckets = bucketize(input.subject, seq);
    let positions: Vec<usize> = (0..seq)
        .filter(|&p| config.positions.includes(buckets.assignment[p]))
        .collect();

    let clean = model.forward(&input.tokens, None, true)?;
    let clean_p = token_probability(&clean.logits, input.object_id);
    let clean_cache = clean.cache.expect("capture requested");

    let runs: Vec<SampleRun> = (0..config.noise_samples)
        .into_par_iter()
        .map(|s| {
            let noise = sample_noise(config, sigma, &input.fact_id, s, input.subject, d);
            run_sample(model, input, config, &noise, &clean_cache, &positions)
        })
        .collect::<Result<_, TraceError>>()?;

    let n = config.noise_samples as f64;
    let corrupt_p_samples: Vec<f64> = runs.iter().map(|r| r.corrupt_p).collect();
    let corrupt_p = corrupt_p_samples.iter().sum::<f64>() / n;
    let sites = n_layer * positions.len() * config.components.len();
    let mut ie = vec![0f64; sites];
    for run in &runs {
        for (acc, &r) in ie.iter_mut().zip(&run.restored) {
            *acc += r - run.corrupt_p;
        }
    }
    ie.iter_mut().for_each(|v| *v /= n);

    Ok(FactTrace {
        fact_id: input.fact_id.clone(),
        tokens: input.tokens.clone(),
        subject: input.subject,
        object_id: input.object_id,
        clean_p,
        corrupt_p,
        corrupt_p_samples,
        total_effect: clean_p - corrupt_p,
        noise_seeds: (0..config.noise_samples)
            .map(|s| {
                let seed = sample_seed(config.seed, &input.fact_id, s);
                u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"))
            })
            .collect(),
        buckets,
        components: config.components.clone(),
        positions,
        n_layer,
        ie,
    })
}

fn run_sample(
    model: &Gpt2,
    input: &TraceInput,
    config: &TraceConfig,
    noise: &EmbeddingNoise,
    clean: &ActivationCache,
    positions: &[usize],
) -> Result<SampleRun, TraceError> {
    let n_layer = model.config().n_layer;
    let corrupt = model.forward(&input.tokens, Some(&InterventionSet::noise(noise)), true)?;
    let corrupt_p = token_probability(&corrupt.logits, input.object_id);
    let corrupt_cache = corrupt.cache.expect("capture requested");

    let mut restored = Vec::with_capacity(n_layer * positions.len() * config.components.len());
    for layer in 0..n_layer {
        for &pos in positions {
            for &component in &config.components {
                let window = config.window_layers(component, layer, n_layer);
                let start = window.start;
                let restorations: Vec<Restoration<'_>> = window
                    .map(|l| Restoration {
                        site: Site::block(l, pos, component),
                        source: clean,
                    })
                    .collect();
                let logits = model.forward_from_layer(start, &corrupt_cache, &restorations)?;
                restored.push(token_probability(&logits, input.object_id));
            }
        }
    }
    Ok(SampleRun { corrupt_p, restored })
}

/// Mean over noise samples of the probability recovered when `sites` are
/// restored together from the clean run. Uses the same noise as
/// [`trace_input`].
pub fn joint_indirect_effect(
    model: &Gpt2,
    input: &TraceInput,
    config: &TraceConfig,
    sigma: f64,
    sites: &[Site],
) -> Result<f64, TraceError> {
    config.validate()?;
    checked_input(model, input)?;
    let d = model.config().d_model;
    let clean = model.forward(&input.tokens, None, true)?;
    let clean_cache = clean.cache.expect("capture requested");
    let mut total = 0.0;
    for s in 0..config.noise_samples {
        let noise = sample_noise(config, sigma, &input.fact_id, s, input.subject, d);
        let corrupt = model.forward(&input.tokens, Some(&InterventionSet::noise(&noise)), false)?;
        let mut iv = InterventionSet::noise(&noise);
        for &site in sites {
            iv = iv.restore(site, &clean_cache);
        }
        let restored = model.forward(&input.tokens, Some(&iv), false)?;
        total +=
            token_probability(&restored.logits, input.object_id) - token_probability(&corrupt.logits, input.object_id);
    }
    Ok(total / config.noise_samples as f64)
}

/// Trace a fact record end to end.
pub fn trace_fact(
    fact: &FactRecord,
    model: &Gpt2,
    vocab: &Vocab,
    config: &TraceConfig,
    sigma: f64,
) -> Result<FactTrace, TraceError> {
    match check_prediction(fact, model, vocab) {
        PredictionCheck::Correct(input) => trace_input(model, &input, config, sigma),
        PredictionCheck::Skipped {
            reason: SkipReason::SubjectNotFound,
            ..
        } => Err(TokenizerError::SubjectNotFound {
            subject: fact.subject.clone(),
            prompt: fact.prompt.clone(),
        }
        .into()),
        PredictionCheck::Skipped { .. } => Err(TraceError::NotCorrectlyPredicted(fact_id(fact))),
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combine two accumulators (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Sample standard deviation; 0 for a single value.
    pub fn stddev(&self) -> Option<f64> {
        match self.count {
            0 => None,
            1 => Some(0.0),
            n => Some((self.m2.max(0.0) / (n - 1) as f64).sqrt()),
        }
    }

    pub fn population_stddev(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.m2.max(0.0) / self.count as f64).sqrt())
    }
}

/// Summary statistics for one (layer, bucket, component) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: Option<f64>,
    pub count: u64,
    pub stddev: Option<f64>,
}

impl From<&RunningStats> for CellStats {
    fn from(s: &RunningStats) -> Self {
        Self {
            mean: s.mean(),
            count: s.count,
            stddev: s.stddev(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAggregate {
    pub subcategory: String,
    pub n_layer: usize,
    pub components: Vec<Component>,
    /// `[layer][analyzed bucket][component]`.
    cells: Vec<CellStats>,
    pub facts_traced: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub total_effect: CellStats,
}

impl CategoryAggregate {
    pub fn empty(subcategory: &str, n_layer: usize, components: &[Component]) -> Self {
        let empty = CellStats::from(&RunningStats::default());
        Self {
            subcategory: subcategory.to_string(),
            n_layer,
            components: components.to_vec(),
            cells: vec![empty; n_layer * Bucket::ANALYZED.len() * components.len()],
            facts_traced: 0,
            skipped: BTreeMap::new(),
            total_effect: empty,
        }
    }

    /// Average within each fact's bucket first, then across facts, in the
    /// order given.
    pub fn from_traces(
        subcategory: &str,
        n_layer: usize,
        components: &[Component],
        traces: &[FactTrace],
        skipped: BTreeMap<SkipReason, usize>,
    ) -> Self {
        let nb = Bucket::ANALYZED.len();
        let nc = components.len();
        let mut stats = vec![RunningStats::default(); n_layer * nb * nc];
        let mut te = RunningStats::default();
        for t in traces {
            te.push(t.total_effect);
            for layer in 0..n_layer {
                for (bi, &bucket) in Bucket::ANALYZED.iter().enumerate() {
                    for (ci, &component) in components.iter().enumerate() {
                        if let Some(v) = t.bucket_mean(layer, bucket, component) {
                            stats[(layer * nb + bi) * nc + ci].push(v);
                        }
                    }
                }
            }
        }
        Self {
            subcategory: subcategory.to_string(),
            n_layer,
            components: components.to_vec(),
            cells: stats.iter().map(CellStats::from).collect(),
            facts_traced: traces.len(),
            skipped,
            total_effect: CellStats::from(&te),
        }
    }

    pub fn cell(&self, layer: usize, bucket: Bucket, component: Component) -> Option<&CellStats> {
        let bi = Bucket::ANALYZED.iter().position(|&b| b == bucket)?;
        let ci = self.components.iter().position(|&c| c == component)?;
        if layer >= self.n_layer {
            return None;
        }
        self.cells
            .get((layer * Bucket::ANALYZED.len() + bi) * self.components.len() + ci)
    }

    /// Mean AIE per layer for one bucket and component; `None` where no fact
    /// contributed.
    pub fn layer_curve(&self, bucket: Bucket, component: Component) -> Option<Vec<Option<f64>>> {
        (0..self.n_layer)
            .map(|l| self.cell(l, bucket, component).map(|c| c.mean))
            .collect()
    }

    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    /// CSV with columns `layer,bucket,component,mean_aie,count,stddev`.
    /// Undefined means and deviations are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| TraceError::Csv(e.to_string());
        w.write_record(["layer", "bucket", "component", "mean_aie", "count", "stddev"])
            .map_err(err)?;
        for layer in 0..self.n_layer {
            for bucket in Bucket::ANALYZED {
                for &component in &self.components {
                    let c = self.cell(layer, bucket, component).expect("in range");
                    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    w.write_record([
                        layer.to_string(),
                        bucket.as_str().to_string(),
                        component.as_str().to_string(),
                        fmt(c.mean),
                        c.count.to_string(),
                        fmt(c.stddev),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| TraceError::Csv(e.to_string()))
    }

    /// Reads a CSV written by [`CategoryAggregate::write_csv`]. Skip counts and
    /// total-effect statistics live in the sidecar and are not restored.
    pub fn read_csv<R: Read>(subcategory: &str, input: R) -> Result<Self, TraceError> {
        let mut rows = Vec::new();
        let mut reader = csv::Reader::from_reader(input);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| TraceError::Csv(e.to_string()))?;
            let bad = |m: String| TraceError::Csv(format!("row {}: {m}", i + 2));
            if rec.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", rec.len())));
            }
            let layer: usize = rec[0].parse().map_err(|e| bad(format!("layer: {e}")))?;
            let bucket: Bucket = rec[1].parse().map_err(bad)?;
            let component: Component = rec[2].parse().map_err(bad)?;
            let opt = |s: &str| -> Result<Option<f64>, TraceError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| bad(format!("{s:?}: {e}")))
                }
            };
            let mean = opt(&rec[3])?;
            let count: u64 = rec[4].parse().map_err(|e| bad(format!("count: {e}")))?;
            let stddev = opt(&rec[5])?;
            rows.push((layer, bucket, component, CellStats { mean, count, stddev }));
        }
        let n_layer = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let mut components: Vec<Component> = Vec::new();
        for r in &rows {
            if !components.contains(&r.2) {
                components.push(r.2);
            }
        }
        let mut agg = Self::empty(subcategory, n_layer, &components);
        let nb = Bucket::ANALYZED.len();
        let nc = components.len();
        let mut filled = vec![false; agg.cells.len()];
        for (layer, bucket, component, stats) in rows {
            let bi = Bucket::ANALYZED
                .iter()
                .position(|&b| b == bucket)
                .ok_or_else(|| TraceError::Csv(format!("bucket {bucket} is not aggregated")))?;
            let ci = components.iter().position(|&c| c == component).expect("collected");
            let idx = (layer * nb + bi) * nc + ci;
            if filled[idx] {
                return Err(TraceError::Csv(format!("duplicate cell {layer},{bucket},{component}")));
            }
            filled[idx] = true;
            agg.cells[idx] = stats;
        }
        if filled.iter().any(|f| !f) {
            return Err(TraceError::Csv("incomplete grid".into()));
        }
        agg.facts_traced = agg.cells.iter().map(|c| c.count as usize).max().unwrap_or(0);
        Ok(agg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedFact {
    pub fact_id: String,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CategoryTrace {
    pub aggregate: CategoryAggregate,
    pub traces: Vec<FactTrace>,
    pub skipped: Vec<SkippedFact>,
}

/// Trace every correctly predicted fact of one subcategory. Facts run in
/// parallel; aggregation happens afterwards in input order, so the result
/// does not depend on scheduling.
pub fn trace_category(
    subcategory: &str,
    facts: &[FactRecord],
    model: &Gpt2,
    vocab: &Vocab,
    config: &TraceConfig,
    sigma: f64,
) -> Result<CategoryTrace, TraceError> {
    config.validate()?;
    let outcomes: Vec<Result<FactTrace, SkippedFact>> = facts
        .par_iter()
        .map(|fact| match check_prediction(fact, model, vocab) {
            PredictionCheck::Correct(input) => trace_input(model, &input, config, sigma).map_err(|e| SkippedFact {
                fact_id: input.fact_id.clone(),
                reason: SkipReason::ModelError,
                detail: e.to_string(),
            }),
            PredictionCheck::Skipped { reason, detail } => Err(SkippedFact {
                fact_id: fact_id(fact),
                reason,
                detail,
            }),
        })
        .collect();

    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => traces.push(t),
            Err(s) => {
                if s.reason == SkipReason::ModelError {
                    log::warn!("fact {} failed: {}", s.fact_id, s.detail);
                }
                skipped.push(s);
            }
        }
    }
    let mut counts = BTreeMap::new();
    for s in &skipped {
        *counts.entry(s.reason).or_insert(0) += 1;
    }
    let aggregate =
        CategoryAggregate::from_traces(subcategory, model.config().n_layer, &config.components, &traces, counts);
    Ok(CategoryTrace {
        aggregate,
        traces,
        skipped,
    })
}

/// Raw per-fact IE grids, one row per site.
pub fn write_fact_grids<W: Write>(traces: &[FactTrace], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| TraceError::Csv(e.to_string());
    w.write_record(["fact_id", "layer", "position", "bucket", "component", "ie"])
        .map_err(err)?;
    for t in traces {
        for layer in 0..t.n_layer {
            for &pos in &t.positions {
                for &c in &t.components {
                    let v = t.ie(layer, pos, c).expect("traced site");
                    w.write_record([
                        t.fact_id.clone(),
                        layer.to_string(),
                        pos.to_string(),
                        t.buckets.assignment[pos].as_str().to_string(),
                        c.as_str().to_string(),
                        v.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| TraceError::Csv(e.to_string()))
}
