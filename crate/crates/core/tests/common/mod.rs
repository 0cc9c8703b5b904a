#![allow(dead_code)]

use std::path::PathBuf;

use catrace_core::checkpoint::{self, parse_container};
use catrace_core::model::{argmax, token_probability};
use catrace_core::tracing::{sample_noise, TraceInput};
use catrace_core::{Component, Gpt2, InterventionSet, ModelConfig, Site, TokenSpan, TraceConfig, Vocab};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn asset(rel: &str) -> PathBuf {
    repo_root().join("assets").join(rel)
}

pub fn vocab() -> Vocab {
    Vocab::from_files(&asset("gpt2-tokenizer/vocab.json"), &asset("gpt2-tokenizer/merges.txt")).unwrap()
}

pub fn tiny_model() -> Gpt2 {
    let config = checkpoint::load_config(&asset("tiny-gpt2/config.json")).unwrap();
    let weights = checkpoint::load_model(&asset("tiny-gpt2/model.safetensors"), &config).unwrap();
    Gpt2::new(config, weights).unwrap()
}

/// Two-layer model with a 64-token vocabulary.
pub fn random_model(seed: u64) -> Gpt2 {
    Gpt2::random(ModelConfig::new(2, 2, 16, 32, 64), seed, 0.3)
}

#[derive(serde::Deserialize)]
pub struct ReferencePrompt {
    pub text: String,
    pub ids: Vec<u32>,
    pub argmax: u32,
}

/// Reference prompts and their `[n, vocab]` logits from a checkpoint directory.
pub fn reference_logits(dir: &std::path::Path) -> (Vec<ReferencePrompt>, Vec<Vec<f32>>) {
    let prompts: Vec<ReferencePrompt> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reference_prompts.json")).unwrap()).unwrap();
    let bytes = std::fs::read(dir.join("reference_logits.safetensors")).unwrap();
    let container = parse_container(&bytes).unwrap();
    let record = container.get("logits").unwrap();
    let vocab = record.shape[1];
    let flat = container.to_f32(record);
    let rows = flat.chunks(vocab).map(<[f32]>::to_vec).collect();
    (prompts, rows)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Per-subcategory maxima on GPT-2-XL: (name, mlp layer, mlp aie, attn layer, attn aie).
pub const XL_BIRDS: [(&str, usize, f64, usize, f64); 8] = [
    ("Am. Crow", 5, 0.142, 27, 0.087),
    ("Corvus", 4, 0.079, 30, 0.074),
    ("Corvidae", 16, 0.052, 30, 0.058),
    ("Passeriformes", 5, 0.049, 30, 0.057),
    ("Aves", 15, 0.082, 30, 0.086),
    ("Chordata*", 15, 0.070, 30, 0.071),
    ("Anamalia", 5, 0.076, 30, 0.069),
    ("Eukaryota", 11, 0.054, 30, 0.052),
];

pub const XL_DOGS: [(&str, usize, f64, usize, f64); 8] = [
    ("Dog", 16, 0.140, 30, 0.149),
    ("Canis", 5, 0.077, 31, 0.094),
    ("Caniformia", 15, 0.125, 28, 0.124),
    ("Carnivora", 15, 0.054, 28, 0.057),
    ("Mammalia", 15, 0.111, 28, 0.093),
    ("Chordata*", 5, 0.130, 27, 0.117),
    ("Anamalia", 5, 0.076, 30, 0.069),
    ("Eukaryota", 11, 0.054, 30, 0.052),
];

pub const XL_BASELINE: (&str, usize, f64, usize, f64) = ("Baseline", 17, 0.056, 31, 0.086);

/// A 48-layer curve whose strict maximum is `value` at `layer`.
pub fn peaked_curve(layer: usize, value: f64) -> Vec<f64> {
    (0..48)
        .map(|l| {
            if l == layer {
                value
            } else {
                let d = (l as f64 - layer as f64).abs();
                value * (0.9 - 0.8 * d / 48.0)
            }
        })
        .collect()
}

/// Aggregate holding only the MLP/last-subject and attention/last-token curves.
pub fn aggregate_from_curves(name: &str, mlp: &[f64], attn: &[f64]) -> catrace_core::CategoryAggregate {
    use catrace_core::{Bucket, Component};
    let mut csv = String::from("layer,bucket,component,mean_aie,count,stddev\n");
    for layer in 0..mlp.len() {
        for bucket in Bucket::ANALYZED {
            for c in [Component::MlpOut, Component::AttnOut] {
                let v = match (bucket, c) {
                    (Bucket::LastSubject, Component::MlpOut) => Some(mlp[layer]),
                    (Bucket::LastToken, Component::AttnOut) => Some(attn[layer]),
                    _ => None,
                };
                match v {
                    Some(v) => csv.push_str(&format!("{layer},{bucket},{},{v},10,0\n", c.as_str())),
                    None => csv.push_str(&format!("{layer},{bucket},{},,0,\n", c.as_str())),
                }
            }
        }
    }
    catrace_core::CategoryAggregate::read_csv(name, csv.as_bytes()).unwrap()
}

pub fn table_aggregates(rows: &[(&str, usize, f64, usize, f64)]) -> Vec<catrace_core::CategoryAggregate> {
    rows.iter()
        .map(|&(name, ml, mv, al, av)| aggregate_from_curves(name, &peaked_curve(ml, mv), &peaked_curve(al, av)))
        .collect()
}

/// Symmetric matrix with unit diagonal from the strict upper triangle, row by row.
pub fn matrix_from_upper(labels: &[&str], upper: &[f64]) -> catrace_core::CorrelationMatrix {
    let n = labels.len();
    let mut values = vec![Some(1.0); n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            values[i * n + j] = Some(upper[k]);
            values[j * n + i] = Some(upper[k]);
            k += 1;
        }
    }
    assert_eq!(k, upper.len());
    catrace_core::CorrelationMatrix::from_entries(labels.iter().map(|s| s.to_string()).collect(), values)
}

/// Spearman correlation computed the slow way: O(n²) average ranks, then
/// Pearson on the ranks with two-pass means.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn input(model: &Gpt2, id: &str, tokens: Vec<u32>, subject: TokenSpan) -> TraceInput {
    let logits = model.forward(&tokens, None, false).unwrap().logits;
    TraceInput {
        fact_id: id.into(),
        tokens,
        subject,
        object_id: argmax(&logits),
    }
}

pub fn config(window: usize) -> TraceConfig {
    TraceConfig {
        noise_samples: 4,
        window,
        seed: 3,
        ..TraceConfig::default()
    }
}

/// Every site recomputed with full forward passes and explicit restorations.
pub fn brute_force_grid(model: &Gpt2, input: &TraceInput, cfg: &TraceConfig, sigma: f64) -> Vec<f64> {
    let n_layer = model.config().n_layer;
    let d = model.config().d_model;
    let clean = model.forward(&input.tokens, None, true).unwrap().cache.unwrap();
    let mut sums = vec![0.0; n_layer * input.tokens.len() * cfg.components.len()];
    for s in 0..cfg.noise_samples {
        let noise = sample_noise(cfg, sigma, &input.fact_id, s, input.subject, d);
        let corrupt = model
            .forward(&input.tokens, Some(&InterventionSet::noise(&noise)), false)
            .unwrap();
        let pc = token_probability(&corrupt.logits, input.object_id);
        let mut k = 0;
        for layer in 0..n_layer {
            for pos in 0..input.tokens.len() {
                for &c in &cfg.components {
                    let (lo, hi) = if c == Component::Residual {
                        (layer, layer + 1)
                    } else {
                        let lo = layer as isize - (cfg.window / 2) as isize;
                        let hi = layer + cfg.window - cfg.window / 2;
                        (lo.max(0) as usize, hi.min(n_layer))
                    };
                    let mut iv = InterventionSet::noise(&noise);
                    for l in lo..hi {
                        iv = iv.restore(Site::block(l, pos, c), &clean);
                    }
                    let out = model.forward(&input.tokens, Some(&iv), false).unwrap();
                    sums[k] += token_probability(&out.logits, input.object_id) - pc;
                    k += 1;
                }
            }
        }
    }
    sums.iter().map(|v| v / cfg.noise_samples as f64).collect()
}
