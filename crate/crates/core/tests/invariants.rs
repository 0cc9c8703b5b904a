mod common;

use std::collections::HashSet;

use catrace_core::darc::{parse_facts_str, validate_fact};
use catrace_core::factgen::dedupe;
use catrace_core::model::EmbeddingNoise;
use catrace_core::tokenizer::bucketize;
use catrace_core::{checkpoint, ActivationCache, Bucket, Component, FactRecord, InterventionSet, Site, TokenSpan};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn span_and_len() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=64)
        .prop_flat_map(|n| (Just(n), 0..n))
        .prop_flat_map(|(n, end)| (Just(n), 0..=end, Just(end)))
}

fn component() -> impl Strategy<Value = Component> {
    prop_oneof![
        Just(Component::Residual),
        Just(Component::MlpOut),
        Just(Component::AttnOut)
    ]
}

fn rows(m: &[f32], d: usize, pos: std::ops::Range<usize>) -> &[f32] {
    &m[pos.start * d..pos.end * d]
}

/// Every activation the run produced at layers below `layer`, and at
/// positions below `pos` in any layer.
fn upstream(c: &ActivationCache, layer: usize, pos: usize) -> Vec<f32> {
    let d = c.d_model;
    let mut out = c.embedding.clone();
    for l in 0..c.n_layer() {
        for m in [&c.residual[l], &c.mlp_out[l], &c.attn_out[l], &c.keys[l], &c.values[l]] {
            let visible = if l < layer { 0..c.seq_len } else { 0..pos };
            out.extend_from_slice(rows(m, d, visible));
        }
    }
    out
}

fn record() -> impl Strategy<Value = FactRecord> {
    let text = "[ -~\u{e9}\u{6771}\n\t\"\\\\]{0,24}";
    (
        proptest::option::of(text),
        (text, text, text, text, text, text),
        proptest::option::of(text),
        proptest::option::of(text),
    )
        .prop_map(
            |(known_id, (full_fact, subject, attribute, prediction, prompt, group), relation_id, template)| {
                FactRecord {
                    known_id,
                    full_fact,
                    subject,
                    attribute,
                    prediction,
                    prompt,
                    group,
                    relation_id,
                    template,
                }
            },
        )
}

proptest! {
    #[test]
    fn every_position_gets_one_bucket((n, start, end) in span_and_len()) {
        let b = bucketize(TokenSpan::new(start, end), n);
        prop_assert_eq!(b.assignment.len(), n);
        let count = |k: Bucket| b.positions_of(k).count();
        prop_assert_eq!(count(Bucket::LastSubject), 1);
        let len = end - start + 1;
        prop_assert_eq!(count(Bucket::FirstSubject) == 1, len >= 2);
        prop_assert_eq!(count(Bucket::MiddleSubject) > 0, len >= 3);
        prop_assert!(count(Bucket::LastToken) <= 1);
    }

    #[test]
    fn restoration_leaves_upstream_activations_alone(
        tokens in proptest::collection::vec(0u32..64, 2..9),
        seed in 0u64..4,
        layer in 0usize..2,
        pos_frac in 0.0f64..1.0,
        comp in component(),
    ) {
        let model = common::random_model(seed);
        let pos = ((tokens.len() as f64 * pos_frac) as usize).min(tokens.len() - 1);
        let span = TokenSpan::new(0, pos);
        let noise = EmbeddingNoise { span, noise: vec![0.7; span.len() * 16] };
        let clean = model.forward(&tokens, None, true).unwrap().cache.unwrap();
        let noisy = InterventionSet::noise(&noise);
        let corrupt = model.forward(&tokens, Some(&noisy), true).unwrap().cache.unwrap();
        let restored = model
            .forward(&tokens, Some(&noisy.clone().restore(Site::block(layer, pos, comp), &clean)), true)
            .unwrap()
            .cache
            .unwrap();
        prop_assert_eq!(upstream(&restored, layer, pos), upstream(&corrupt, layer, pos));
    }

    #[test]
    fn records_survive_serialization(r in record()) {
        let line = serde_json::to_string(&r).unwrap();
        let parsed = parse_facts_str(&line);
        prop_assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
        prop_assert_eq!(parsed.into_records(), vec![r]);
    }

    #[test]
    fn validation_is_pure(r in record()) {
        prop_assert_eq!(validate_fact(&r), validate_fact(&r));
    }

    #[test]
    fn dedupe_is_idempotent(facts in proptest::collection::vec("(the |The |a )(crow|Crow|dog)( eats| eats ){1,2}", 0..12)) {
        let once = dedupe(facts);
        prop_assert_eq!(dedupe(once.clone()), once);
    }
}

#[test]
fn empty_intervention_set_and_reruns_are_bitwise_equal() {
    let model = common::tiny_model();
    let tokens = common::vocab().encode("The capital of Norway is");
    let plain = model.forward(&tokens, None, false).unwrap().logits;
    let empty = model
        .forward(&tokens, Some(&InterventionSet::default()), false)
        .unwrap()
        .logits;
    let again = model.forward(&tokens, None, false).unwrap().logits;
    assert_eq!(plain, empty);
    assert_eq!(plain, again);
}

#[test]
fn vocabulary_maps_are_inverse_and_merges_distinct() {
    let vocab = common::vocab();
    for id in 0..vocab.len() as u32 {
        let token = vocab.token(id).unwrap();
        assert_eq!(vocab.token_id(token), Some(id));
    }
    let distinct: HashSet<_> = vocab.merges().iter().collect();
    assert_eq!(distinct.len(), vocab.merges().len());
    assert_eq!(vocab.merges().len(), 50_000);
}

#[test]
fn loading_does_not_modify_the_checkpoint() {
    let path = common::asset("tiny-gpt2/model.safetensors");
    let digest = || Sha256::digest(std::fs::read(&path).unwrap());
    let before = digest();
    let config = checkpoint::load_config(&common::asset("tiny-gpt2/config.json")).unwrap();
    checkpoint::load_model(&path, &config).unwrap();
    assert_eq!(digest(), before);
}
