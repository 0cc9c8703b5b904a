//! GPT-2 forward pass with activation capture and site-targeted interventions.
//!
//! One sequence per call, f32 throughout. Blocks are pre-layernorm with causal
//! self-attention and a tanh-approximated GELU MLP; the unembedding is tied to
//! the token embedding and only the final position's logits are produced.
//!
//! Interventions:
//! - embedding noise is added to the token+position embedding at the subject
//!   span before block 0;
//! - a restoration overwrites one component at one (layer, position) with a
//!   cached value. Attention and MLP outputs are overwritten before they are
//!   added to the residual stream; a residual restoration overwrites the
//!   post-block residual.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenSpan;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context of {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("token id {0} outside vocabulary")]
    UnknownToken(u32),
    #[error("intervention site out of range: {0}")]
    SiteOutOfRange(String),
    #[error("more than one restoration targets {0}")]
    DuplicateSite(String),
    #[error("activation cache shape does not match the input")]
    CacheMismatch,
    #[error("weights do not match config: {0}")]
    WeightShape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub n_ctx: usize,
    pub vocab_size: usize,
    pub layernorm_epsilon: f32,
}

/// Accepts both the sidecar key names and the published GPT-2 `config.json`
/// names (`n_embd`, `n_positions`, `layer_norm_epsilon`).
#[derive(Deserialize)]
struct RawConfig {
    n_layer: usize,
    n_head: usize,
    d_model: Option<usize>,
    n_embd: Option<usize>,
    n_ctx: Option<usize>,
    n_positions: Option<usize>,
    vocab_size: usize,
    layernorm_epsilon: Option<f32>,
    layer_norm_epsilon: Option<f32>,
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawConfig::deserialize(d)?;
        let missing = |k| serde::de::Error::custom(format!("missing field `{k}`"));
        Ok(ModelConfig {
            n_layer: raw.n_layer,
            n_head: raw.n_head,
            d_model: raw.d_model.or(raw.n_embd).ok_or_else(|| missing("d_model"))?,
            n_ctx: raw.n_ctx.or(raw.n_positions).ok_or_else(|| missing("n_ctx"))?,
            vocab_size: raw.vocab_size,
            layernorm_epsilon: raw.layernorm_epsilon.or(raw.layer_norm_epsilon).unwrap_or(1e-5),
        })
    }
}

impl ModelConfig {
    pub fn new(n_layer: usize, n_head: usize, d_model: usize, n_ctx: usize, vocab_size: usize) -> Self {
        Self {
            n_layer,
            n_head,
            d_model,
            n_ctx,
            vocab_size,
            layernorm_epsilon: 1e-5,
        }
    }

    pub fn gpt2_small() -> Self {
        Self::new(12, 12, 768, 1024, 50257)
    }

    pub fn gpt2_medium() -> Self {
        Self::new(24, 16, 1024, 1024, 50257)
    }

    pub fn gpt2_large() -> Self {
        Self::new(36, 20, 1280, 1024, 50257)
    }

    pub fn gpt2_xl() -> Self {
        Self::new(48, 25, 1600, 1024, 50257)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.n_ctx == 0 || self.vocab_size == 0 {
            return Err("all counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.layernorm_epsilon.is_nan() || self.layernorm_epsilon <= 0.0 {
            return Err("layernorm_epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// `[d, 3d]`, input-major.
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    pub attn_out_weight: Vec<f32>,
    pub attn_out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    /// `[d, 4d]`, input-major.
    pub mlp_up_weight: Vec<f32>,
    pub mlp_up_bias: Vec<f32>,
    /// `[4d, d]`, input-major.
    pub mlp_down_weight: Vec<f32>,
    pub mlp_down_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab, d]`; also the (transposed) unembedding.
    pub token_embedding: Vec<f32>,
    /// `[n_ctx, d]`
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
}

impl ModelWeights {
    /// Gaussian random weights for tests and benchmarks. `scale` is the
    /// standard deviation of the embedding and projection entries.
    pub fn random(config: &ModelConfig, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut gauss = |n: usize, std: f32, mean: f32| -> Vec<f32> {
            (0..n)
                .map(|_| mean + std * rng.sample::<f32, _>(StandardNormal))
                .collect()
        };
        let token_embedding = gauss(config.vocab_size * d, scale, 0.0);
        let position_embedding = gauss(config.n_ctx * d, scale * 0.5, 0.0);
        let layers = (0..config.n_layer)
            .map(|_| LayerWeights {
                ln1_gain: gauss(d, 0.1, 1.0),
                ln1_bias: gauss(d, 0.05, 0.0),
                qkv_weight: gauss(d * 3 * d, scale, 0.0),
                qkv_bias: gauss(3 * d, 0.05, 0.0),
                attn_out_weight: gauss(d * d, scale, 0.0),
                attn_out_bias: gauss(d, 0.05, 0.0),
                ln2_gain: gauss(d, 0.1, 1.0),
                ln2_bias: gauss(d, 0.05, 0.0),
                mlp_up_weight: gauss(d * 4 * d, scale, 0.0),
                mlp_up_bias: gauss(4 * d, 0.05, 0.0),
                mlp_down_weight: gauss(4 * d * d, scale, 0.0),
                mlp_down_bias: gauss(d, 0.05, 0.0),
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: gauss(d, 0.1, 1.0),
            final_ln_bias: gauss(d, 0.05, 0.0),
        }
    }

    fn check(&self, c: &ModelConfig) -> Result<(), ModelError> {
        let d = c.d_model;
        let bad = |what: &str| Err(ModelError::WeightShape(what.to_string()));
        if self.token_embedding.len() != c.vocab_size * d {
            return bad("token_embedding");
        }
        if self.position_embedding.len() != c.n_ctx * d {
            return bad("position_embedding");
        }
        if self.layers.len() != c.n_layer {
            return bad("layer count");
        }
        if self.final_ln_gain.len() != d || self.final_ln_bias.len() != d {
            return bad("final layernorm");
        }
        for (i, l) in self.layers.iter().enumerate() {
            let sizes = [
                (l.ln1_gain.len(), d),
                (l.ln1_bias.len(), d),
                (l.qkv_weight.len(), 3 * d * d),
                (l.qkv_bias.len(), 3 * d),
                (l.attn_out_weight.len(), d * d),
                (l.attn_out_bias.len(), d),
                (l.ln2_gain.len(), d),
                (l.ln2_bias.len(), d),
                (l.mlp_up_weight.len(), 4 * d * d),
                (l.mlp_up_bias.len(), 4 * d),
                (l.mlp_down_weight.len(), 4 * d * d),
                (l.mlp_down_bias.len(), d),
            ];
            if sizes.iter().any(|(a, b)| a != b) {
                return bad(&format!("layer {i}"));
            }
        }
        Ok(())
    }
}

/// Intervened model part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Residual,
    #[serde(alias = "mlp")]
    MlpOut,
    #[serde(alias = "attn")]
    AttnOut,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Residual, Component::MlpOut, Component::AttnOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Residual => "residual",
            Component::MlpOut => "mlp",
            Component::AttnOut => "attn",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "residual" | "resid" => Ok(Component::Residual),
            "mlp" | "mlp_out" | "mlpout" => Ok(Component::MlpOut),
            "attn" | "attention" | "attn_out" | "attnout" => Ok(Component::AttnOut),
            other => Err(format!("unknown component {other:?}")),
        }
    }
}

/// Per-layer, per-position activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub seq_len: usize,
    pub d_model: usize,
    /// Residual stream entering block 0 (after any embedding intervention).
    pub embedding: Vec<f32>,
    /// Post-block residual per layer, `[seq, d]` each.
    pub residual: Vec<Vec<f32>>,
    pub mlp_out: Vec<Vec<f32>>,
    pub attn_out: Vec<Vec<f32>>,
    /// Attention keys and values per layer, `[seq, d]` each.
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

impl ActivationCache {
    pub fn n_layer(&self) -> usize {
        self.residual.len()
    }

    pub fn layer(&self, layer: usize, component: Component) -> &[f32] {
        match component {
            Component::Residual => &self.residual[layer],
            Component::MlpOut => &self.mlp_out[layer],
            Component::AttnOut => &self.attn_out[layer],
        }
    }

    pub fn row(&self, layer: usize, component: Component, position: usize) -> &[f32] {
        let d = self.d_model;
        &self.layer(layer, component)[position * d..(position + 1) * d]
    }

    pub fn embedding_row(&self, position: usize) -> &[f32] {
        &self.embedding[position * self.d_model..(position + 1) * self.d_model]
    }

    /// Residual stream entering block `layer`.
    pub fn block_input(&self, layer: usize) -> &[f32] {
        if layer == 0 {
            &self.embedding
        } else {
            &self.residual[layer - 1]
        }
    }
}

/// Where a restoration writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    /// The post-embedding residual ("layer -1").
    Embedding { position: usize },
    Block {
        layer: usize,
        position: usize,
        component: Component,
    },
}

impl Site {
    pub fn block(layer: usize, position: usize, component: Component) -> Self {
        Site::Block {
            layer,
            position,
            component,
        }
    }

    /// First block whose computation the restoration can change.
    fn first_affected_layer(&self) -> Option<usize> {
        match *self {
            Site::Embedding { .. } => None,
            Site::Block { layer, .. } => Some(layer),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Embedding { position } => write!(f, "embedding@{position}"),
            Site::Block {
                layer,
                position,
                component,
            } => write!(f, "{component}[{layer}]@{position}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Restoration<'a> {
    pub site: Site,
    pub source: &'a ActivationCache,
}

/// Additive noise on the embedding rows of a span, `[span_len, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNoise {
    pub span: TokenSpan,
    pub noise: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct InterventionSet<'a> {
    pub embedding_noise: Option<&'a EmbeddingNoise>,
    pub restorations: Vec<Restoration<'a>>,
}

impl<'a> InterventionSet<'a> {
    pub fn noise(noise: &'a EmbeddingNoise) -> Self {
        Self {
            embedding_noise: Some(noise),
            restorations: Vec::new(),
        }
    }

    pub fn restore(mut self, site: Site, source: &'a ActivationCache) -> Self {
        self.restorations.push(Restoration { site, source });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.embedding_noise.is_none() && self.restorations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits of the final position, `[vocab]`.
    pub logits: Vec<f32>,
    pub cache: Option<ActivationCache>,
}

/// Restorations sorted into per-layer lookup tables.
struct Plan<'a> {
    embedding: Vec<(usize, &'a ActivationCache)>,
    per_layer: Vec<Vec<(usize, Component, &'a ActivationCache)>>,
}

/// A loaded GPT-2 model. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Gpt2 {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Gpt2 {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::WeightShape)?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Self {
        let weights = ModelWeights::random(&config, seed, scale);
        Self::new(config, weights).expect("random weights match config")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn token_embedding_row(&self, id: u32) -> &[f32] {
        let d = self.config.d_model;
        &self.weights.token_embedding[id as usize * d..(id as usize + 1) * d]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.n_ctx {
            return Err(ModelError::ContextOverflow {
                len: tokens.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::UnknownToken(bad));
        }
        Ok(())
    }

    fn plan<'a>(&self, seq_len: usize, interventions: &[Restoration<'a>]) -> Result<Plan<'a>, ModelError> {
        let mut seen = HashSet::new();
        let mut plan = Plan {
            embedding: Vec::new(),
            per_layer: vec![Vec::new(); self.config.n_layer],
        };
        for r in interventions {
            if !seen.insert(r.site) {
                return Err(ModelError::DuplicateSite(r.site.to_string()));
            }
            if r.source.seq_len != seq_len
                || r.source.d_model != self.config.d_model
                || r.source.n_layer() != self.config.n_layer
            {
                return Err(ModelError::CacheMismatch);
            }
            match r.site {
                Site::Embedding { position } => {
                    if position >= seq_len {
                        return Err(ModelError::SiteOutOfRange(r.site.to_string()));
                    }
                    plan.embedding.push((position, r.source));
                }
                Site::Block {
                    layer,
                    position,
                    component,
                } => {
                    if layer >= self.config.n_layer || position >= seq_len {
                        return Err(ModelError::SiteOutOfRange(r.site.to_string()));
                    }
                    plan.per_layer[layer].push((position, component, r.source));
                }
            }
        }
        Ok(plan)
    }

    /// Token + position embedding, `[seq, d]`.
    pub fn embed(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            let te = self.token_embedding_row(t);
            let pe = &self.weights.position_embedding[pos * d..(pos + 1) * d];
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        x
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        interventions: Option<&InterventionSet<'_>>,
        capture: bool,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_tokens(tokens)?;
        let seq = tokens.len();
        let d = self.config.d_model;
        let empty = InterventionSet::default();
        let iv = interventions.unwrap_or(&empty);
        let plan = self.plan(seq, &iv.restorations)?;

        let mut x = self.embed(tokens);
        if let Some(noise) = iv.embedding_noise {
            if noise.span.end >= seq || noise.noise.len() != noise.span.len() * d {
                return Err(ModelError::SiteOutOfRange(format!("noise span {:?}", noise.span)));
            }
            for (k, pos) in noise.span.positions().enumerate() {
                let row = &mut x[pos * d..(pos + 1) * d];
                for (v, n) in row.iter_mut().zip(&noise.noise[k * d..(k + 1) * d]) {
                    *v += n;
                }
            }
        }
        for &(pos, source) in &plan.embedding {
            x[pos * d..(pos + 1) * d].copy_from_slice(source.embedding_row(pos));
        }
        self.run_blocks(0, x, seq, 0, None, &plan, capture)
    }

    /// Continue a forward pass from the state recorded in `base` at the
    /// input of block `start_layer`. Restorations must target blocks at or
    /// after `start_layer`. Rows before the earliest restored position cannot
    /// change under causal attention, so only the remaining rows are
    /// recomputed, reusing the keys and values in `base`. The logits are
    /// exactly what [`Gpt2::forward`] would produce.
    pub fn forward_from_layer(
        &self,
        start_layer: usize,
        base: &ActivationCache,
        restorations: &[Restoration<'_>],
    ) -> Result<Vec<f32>, ModelError> {
        let d = self.config.d_model;
        let seq = base.seq_len;
        if base.d_model != d || base.n_layer() != self.config.n_layer || seq == 0 {
            return Err(ModelError::CacheMismatch);
        }
        if start_layer > self.config.n_layer {
            return Err(ModelError::SiteOutOfRange(format!("start layer {start_layer}")));
        }
        for r in restorations {
            if r.site.first_affected_layer().is_none_or(|l| l < start_layer) {
                return Err(ModelError::SiteOutOfRange(format!(
                    "{} precedes start layer {start_layer}",
                    r.site
                )));
            }
        }
        let plan = self.plan(seq, restorations)?;
        let from = restorations
            .iter()
            .filter_map(|r| match r.site {
                Site::Block { position, .. } => Some(position),
                Site::Embedding { .. } => None,
            })
            .min()
            .unwrap_or(seq - 1);
        let x = base.block_input(start_layer)[from * d..].to_vec();
        Ok(self
            .run_blocks(start_layer, x, seq, from, Some(base), &plan, false)?
            .logits)
    }

    /// Runs blocks from `start_layer` on rows `from..seq`. `x` holds those
    /// rows; keys and values of earlier rows come from `prefix`.
    #[allow(clippy::too_many_arguments)]
    fn run_blocks(
        &self,
        start_layer: usize,
        mut x: Vec<f32>,
        seq: usize,
        from: usize,
        prefix: Option<&ActivationCache>,
        plan: &Plan<'_>,
        capture: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let c = &self.config;
        let d = c.d_model;
        let rows = seq - from;
        debug_assert!(from == 0 || prefix.is_some());
        debug_assert!(!capture || from == 0);
        let mut cache = capture.then(|| ActivationCache {
            seq_len: seq,
            d_model: d,
            embedding: x.clone(),
            residual: Vec::with_capacity(c.n_layer),
            mlp_out: Vec::with_capacity(c.n_layer),
            attn_out: Vec::with_capacity(c.n_layer),
            keys: Vec::with_capacity(c.n_layer),
            values: Vec::with_capacity(c.n_layer),
        });

        let mut h = vec![0f32; rows * d];
        let mut keys = vec![0f32; seq * d];
        let mut values = vec![0f32; seq * d];
        for (li, w) in self.weights.layers.iter().enumerate().skip(start_layer) {
            layer_norm_rows(&x, &w.ln1_gain, &w.ln1_bias, c.layernorm_epsilon, d, &mut h);
            let qkv = linear(&h, &w.qkv_weight, &w.qkv_bias, rows, d, 3 * d);
            if let Some(p) = prefix {
                keys[..from * d].copy_from_slice(&p.keys[li][..from * d]);
                values[..from * d].copy_from_slice(&p.values[li][..from * d]);
            }
            for (r, packed) in qkv.chunks_exact(3 * d).enumerate() {
                let a = from + r;
                keys[a * d..(a + 1) * d].copy_from_slice(&packed[d..2 * d]);
                values[a * d..(a + 1) * d].copy_from_slice(&packed[2 * d..]);
            }
            let heads = attention(&qkv, &keys, &values, from, seq, c.n_head, d);
            let mut attn = linear(&heads, &w.attn_out_weight, &w.attn_out_bias, rows, d, d);
            for &(pos, comp, src) in &plan.per_layer[li] {
                if comp == Component::AttnOut {
                    let r = pos - from;
                    attn[r * d..(r + 1) * d].copy_from_slice(src.row(li, comp, pos));
                }
            }
            add_assign(&mut x, &attn);

            layer_norm_rows(&x, &w.ln2_gain, &w.ln2_bias, c.layernorm_epsilon, d, &mut h);
            let mut up = linear(&h, &w.mlp_up_weight, &w.mlp_up_bias, rows, d, 4 * d);
            up.iter_mut().for_each(|v| *v = gelu(*v));
            let mut mlp = linear(&up, &w.mlp_down_weight, &w.mlp_down_bias, rows, 4 * d, d);
            for &(pos, comp, src) in &plan.per_layer[li] {
                if comp == Component::MlpOut {
                    let r = pos - from;
                    mlp[r * d..(r + 1) * d].copy_from_slice(src.row(li, comp, pos));
                }
            }
            add_assign(&mut x, &mlp);

            for &(pos, comp, src) in &plan.per_layer[li] {
                if comp == Component::Residual {
                    let r = pos - from;
                    x[r * d..(r + 1) * d].copy_from_slice(src.row(li, comp, pos));
                }
            }
            if let Some(cache) = cache.as_mut() {
                cache.attn_out.push(attn);
                cache.mlp_out.push(mlp);
                cache.residual.push(x.clone());
                cache.keys.push(keys.clone());
                cache.values.push(values.clone());
            }
        }

        let last = &x[(rows - 1) * d..rows * d];
        let mut normed = vec![0f32; d];
        layer_norm_rows(
            last,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            c.layernorm_epsilon,
            d,
            &mut normed,
        );
        let logits = self
            .weights
            .token_embedding
            .chunks_exact(d)
            .map(|row| dot(row, &normed))
            .collect();
        Ok(ForwardOutput { logits, cache })
    }

    /// Softmax of the final-position logits.
    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        interventions: Option<&InterventionSet<'_>>,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.forward(tokens, interventions, false)?.logits))
    }

    pub fn object_probability(
        &self,
        tokens: &[u32],
        object_id: u32,
        interventions: Option<&InterventionSet<'_>>,
    ) -> Result<f64, ModelError> {
        if object_id as usize >= self.config.vocab_size {
            return Err(ModelError::UnknownToken(object_id));
        }
        Ok(token_probability(
            &self.forward(tokens, interventions, false)?.logits,
            object_id,
        ))
    }
}

/// Probabilities from logits, computed in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Probability of one token under the softmax of `logits`.
pub fn token_probability(logits: &[f32], id: u32) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let total: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    (logits[id as usize] as f64 - max).exp() / total
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm_rows(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, d: usize, out: &mut [f32]) {
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            dst[i] = (row[i] - mean) * inv * gain[i] + bias[i];
        }
    }
}

/// `x [rows, k] · w [k, n] + b`, with `w` input-major.
fn linear(x: &[f32], w: &[f32], b: &[f32], rows: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    // four weight rows per sweep, each streamed once for all positions
    let blocked = k / 4 * 4;
    for k0 in (0..blocked).step_by(4) {
        let w0 = &w[k0 * n..(k0 + 1) * n];
        let w1 = &w[(k0 + 1) * n..(k0 + 2) * n];
        let w2 = &w[(k0 + 2) * n..(k0 + 3) * n];
        let w3 = &w[(k0 + 3) * n..(k0 + 4) * n];
        for r in 0..rows {
            let xs = &x[r * k + k0..r * k + k0 + 4];
            let (a, b, c, d) = (xs[0], xs[1], xs[2], xs[3]);
            let o = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                o[j] += (a * w0[j] + b * w1[j]) + (c * w2[j] + d * w3[j]);
            }
        }
    }
    for ki in blocked..k {
        let wrow = &w[ki * n..(ki + 1) * n];
        for r in 0..rows {
            let xv = x[r * k + ki];
            for (o, &wv) in out[r * n..(r + 1) * n].iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for lane in 0..8 {
            acc[lane] += a[c * 8 + lane] * b[c * 8 + lane];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Causal multi-head attention for rows `from..seq`. Queries come from the
/// packed `[rows, 3d]` q|k|v block; keys and values cover all `seq` rows.
fn attention(qkv: &[f32], keys: &[f32], values: &[f32], from: usize, seq: usize, n_head: usize, d: usize) -> Vec<f32> {
    let dh = d / n_head;
    let scale = 1.0 / (dh as f32).sqrt();
    let rows = seq - from;
    let mut out = vec![0f32; rows * d];
    let mut scores = vec![0f32; seq];
    for h in 0..n_head {
        for r in 0..rows {
            let i = from + r;
            let q = &qkv[r * 3 * d + h * dh..r * 3 * d + (h + 1) * dh];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut total = 0f32;
            for s in scores[..=i].iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let dst = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for j in 0..=i {
                let p = scores[j] / total;
                let v = &values[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &vv) in dst.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Gpt2 {
        Gpt2::random(ModelConfig::new(2, 2, 8, 16, 32), 11, 0.4)
    }

    #[test]
    fn capture_records_plain_embedding() {
        let m = tiny();
        let tokens = [3, 1, 4, 1, 5];
        let out = m.forward(&tokens, None, true).unwrap();
        let cache = out.cache.unwrap();
        assert_eq!(cache.embedding, m.embed(&tokens));
        assert_eq!(cache.residual.len(), 2);
        assert_eq!(cache.mlp_out[1].len(), 5 * 8);
    }

    #[test]
    fn full_restoration_reproduces_clean_logits() {
        let m = tiny();
        let tokens = [3, 1, 4, 1, 5, 9];
        let clean = m.forward(&tokens, None, true).unwrap();
        let cache = clean.cache.as_ref().unwrap();
        let noise = EmbeddingNoise {
            span: TokenSpan::new(1, 3),
            noise: vec![0.7; 3 * 8],
        };
        let mut iv = InterventionSet::noise(&noise);
        for p in 0..tokens.len() {
            iv = iv.restore(Site::Embedding { position: p }, cache);
            for l in 0..2 {
                for c in Component::ALL {
                    iv = iv.restore(Site::block(l, p, c), cache);
                }
            }
        }
        let restored = m.forward(&tokens, Some(&iv), false).unwrap();
        let max = clean
            .logits
            .iter()
            .zip(&restored.logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max <= 1e-5, "max diff {max}");
    }

    #[test]
    fn empty_interventions_match_plain_forward() {
        let m = tiny();
        let tokens = [7, 2, 9];
        let a = m.forward(&tokens, None, false).unwrap().logits;
        let b = m
            .forward(&tokens, Some(&InterventionSet::default()), false)
            .unwrap()
            .logits;
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let m = tiny();
        let long: Vec<u32> = vec![1; 17];
        assert!(matches!(
            m.forward(&long, None, false),
            Err(ModelError::ContextOverflow { .. })
        ));
        assert_eq!(m.forward(&[], None, false).unwrap_err(), ModelError::EmptyInput);
        assert_eq!(m.forward(&[40], None, false).unwrap_err(), ModelError::UnknownToken(40));
        let cache = m.forward(&[1, 2], None, true).unwrap().cache.unwrap();
        let iv = InterventionSet::default().restore(Site::block(2, 0, Component::MlpOut), &cache);
        assert!(matches!(
            m.forward(&[1, 2], Some(&iv), false),
            Err(ModelError::SiteOutOfRange(_))
        ));
        let iv = InterventionSet::default()
            .restore(Site::block(0, 0, Component::MlpOut), &cache)
            .restore(Site::block(0, 0, Component::MlpOut), &cache);
        assert!(matches!(
            m.forward(&[1, 2], Some(&iv), false),
            Err(ModelError::DuplicateSite(_))
        ));
        let iv = InterventionSet::default().restore(Site::block(0, 0, Component::MlpOut), &cache);
        assert_eq!(
            m.forward(&[1, 2, 3], Some(&iv), false).unwrap_err(),
            ModelError::CacheMismatch
        );
    }

    #[test]
    fn distribution_is_normalized() {
        let m = tiny();
        let p = m.next_token_distribution(&[1, 2, 3], None).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() <= 1e-5);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let logits = m.forward(&[1, 2, 3], None, false).unwrap().logits;
        let top = argmax(&logits);
        let pt = m.object_probability(&[1, 2, 3], top, None).unwrap();
        assert_eq!(pt, p.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let config = ModelConfig::new(1, 1, 4, 4, 6);
        let mut w = ModelWeights::random(&config, 1, 0.3);
        // every token shares the same embedding row => identical logits
        let row = w.token_embedding[..4].to_vec();
        for r in w.token_embedding.chunks_exact_mut(4) {
            r.copy_from_slice(&row);
        }
        let m = Gpt2::new(config, w).unwrap();
        let p = m.next_token_distribution(&[0, 3], None).unwrap();
        for v in p {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resume_matches_full_forward_bitwise() {
        let m = tiny();
        let tokens = [3, 1, 4, 1, 5, 9];
        let clean = m.forward(&tokens, None, true).unwrap();
        let clean_cache = clean.cache.unwrap();
        let noise = EmbeddingNoise {
            span: TokenSpan::new(0, 1),
            noise: (0..16).map(|i| (i as f32 * 0.37).sin()).collect(),
        };
        let corrupt = m
            .forward(&tokens, Some(&InterventionSet::noise(&noise)), true)
            .unwrap()
            .cache
            .unwrap();
        let site = Site::block(1, 1, Component::MlpOut);
        let full = m
            .forward(
                &tokens,
                Some(&InterventionSet::noise(&noise).restore(site, &clean_cache)),
                false,
            )
            .unwrap()
            .logits;
        let resumed = m
            .forward_from_layer(
                1,
                &corrupt,
                &[Restoration {
                    site,
                    source: &clean_cache,
                }],
            )
            .unwrap();
        assert_eq!(full, resumed);
        let early = Restoration {
            site: Site::block(0, 1, Component::MlpOut),
            source: &clean_cache,
        };
        assert!(m.forward_from_layer(1, &corrupt, &[early]).is_err());
        // a restoration at the first position recomputes every row
        let first = Site::block(0, 0, Component::AttnOut);
        let full = m
            .forward(
                &tokens,
                Some(&InterventionSet::noise(&noise).restore(first, &clean_cache)),
                false,
            )
            .unwrap()
            .logits;
        let resumed = m
            .forward_from_layer(
                0,
                &corrupt,
                &[Restoration {
                    site: first,
                    source: &clean_cache,
                }],
            )
            .unwrap();
        assert_eq!(full, resumed);
        let untouched = m.forward_from_layer(2, &corrupt, &[]).unwrap();
        assert_eq!(
            untouched,
            m.forward(&tokens, Some(&InterventionSet::noise(&noise)), false)
                .unwrap()
                .logits
        );
    }

    #[test]
    fn config_accepts_published_names() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"n_layer": 12, "n_head": 12, "n_embd": 768, "n_ctx": 1024, "n_positions": 1024,
                "vocab_size": 50257, "layer_norm_epsilon": 1e-05, "activation_function": "gelu_new"}"#,
        )
        .unwrap();
        assert_eq!(c, ModelConfig::gpt2_small());
        assert!(ModelConfig::new(2, 3, 8, 4, 4).validate().is_err());
    }
}
