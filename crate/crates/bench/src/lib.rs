//! Shared inputs for the benchmarks.

use std::path::PathBuf;

use catrace_core::checkpoint;
use catrace_core::{Gpt2, Vocab};

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

pub fn vocab() -> Vocab {
    Vocab::from_files(&asset("gpt2-tokenizer/vocab.json"), &asset("gpt2-tokenizer/merges.txt"))
        .expect("bundled tokenizer")
}

pub fn tiny_model() -> Gpt2 {
    let config = checkpoint::load_config(&asset("tiny-gpt2/config.json")).expect("bundled config");
    let weights = checkpoint::load_model(&asset("tiny-gpt2/model.safetensors"), &config).expect("bundled weights");
    Gpt2::new(config, weights).expect("consistent checkpoint")
}

/// Texts from the tokenizer parity corpus.
pub fn corpus() -> Vec<String> {
    let text = std::fs::read_to_string(asset("tokenizer-parity/corpus.jsonl")).expect("bundled corpus");
    text.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("corpus line");
            v["text"].as_str().unwrap_or_default().to_string()
        })
        .collect()
}
