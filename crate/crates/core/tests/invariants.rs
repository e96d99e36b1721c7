//! Property tests for the cross-cutting invariants: codec losslessness,
//! payload arithmetic, tokenizer mask structure, aggregation convexity, and
//! f64 merge equivalence.

use flsim_core::data::{tokenize, InstructionRecord};
use flsim_core::federation::{aggregate, AggregateInput};
use flsim_core::lora::{
    deserialize_adapters, header_bytes, init_adapters, merge, payload_bytes, serialize_adapters,
    trainable_param_count,
};
use flsim_core::model::{BaseModel, ModelConfig, BOS, EOS};
use flsim_core::tape::forward_lm;
use proptest::prelude::*;

fn small_model_f32() -> BaseModel<f32> {
    BaseModel::init(
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_serialization_round_trips_bitwise(values in proptest::collection::vec(-1e6f32..1e6, 16), seed in 0u64..1000) {
        let model = small_model_f32();
        let mut adapters = init_adapters(&model, 2, seed).unwrap();
        let names: Vec<String> = adapters.adapters().iter().map(|a| a.layer_name.clone()).collect();
        for name in &names {
            let ad = adapters.get_mut(name).unwrap();
            for (i, v) in ad.b.as_mut_slice().iter_mut().enumerate() {
                *v = values[i % values.len()];
            }
        }
        let bytes = serialize_adapters(&adapters);
        prop_assert_eq!(bytes.len(), payload_bytes(&adapters));
        prop_assert_eq!(bytes.len(), header_bytes(&adapters) + 4 * adapters.param_count());
        let back = deserialize_adapters(&bytes).unwrap();
        prop_assert!(adapters.bitwise_eq(&back));
    }

    #[test]
    fn payload_grows_linearly_in_rank(rank in 1usize..4) {
        let model = small_model_f32();
        let a1 = init_adapters(&model, rank, 1).unwrap();
        let a2 = init_adapters(&model, 2 * rank, 1).unwrap();
        // doubling the rank doubles the f32 payload exactly; headers match
        prop_assert_eq!(header_bytes(&a1), header_bytes(&a2));
        prop_assert_eq!(
            payload_bytes(&a2) - header_bytes(&a2),
            2 * (payload_bytes(&a1) - header_bytes(&a1))
        );
        let pc1 = trainable_param_count(&model.config, rank);
        let pc2 = trainable_param_count(&model.config, 2 * rank);
        prop_assert_eq!(pc2.adapter_params, 2 * pc1.adapter_params);
        prop_assert!(pc2.adapter_params > pc1.adapter_params);
    }

    #[test]
    fn tokenize_mask_structure(
        instruction in "[a-z ]{1,20}",
        input in proptest::option::of("[a-z]{0,16}"),
        response in "[a-z]{1,40}",
        max_seq in 170usize..400,
    ) {
        let record = InstructionRecord {
            instruction,
            input,
            response: response.clone(),
            category: "c".into(),
        };
        match tokenize(&record, max_seq) {
            Ok(ex) => {
                prop_assert_eq!(ex.tokens.len(), ex.loss_mask.len());
                prop_assert!(ex.tokens.len() <= max_seq);
                prop_assert_eq!(ex.tokens[0], BOS);
                prop_assert!(!ex.loss_mask[0]);
                prop_assert!(ex.loss_mask.iter().any(|&m| m));
                // mask-true span decodes back to a prefix of the response
                let masked: Vec<u8> = ex
                    .tokens
                    .iter()
                    .zip(&ex.loss_mask)
                    .filter(|(&t, &m)| m && t < 256)
                    .map(|(&t, _)| t as u8)
                    .collect();
                prop_assert!(response.as_bytes().starts_with(&masked));
                // EOS implies the full response fit; no EOS means the
                // sequence budget was exhausted first
                let has_eos = ex.tokens.contains(&EOS);
                if has_eos {
                    prop_assert_eq!(masked.len(), response.len());
                } else {
                    prop_assert_eq!(ex.tokens.len(), max_seq);
                }
            }
            Err(overflow) => {
                prop_assert!(1 + overflow.prompt_len >= overflow.max_seq_len);
            }
        }
    }

    #[test]
    fn aggregation_stays_in_convex_hull(
        weights in proptest::collection::vec(0.01f64..10.0, 3),
        seed in 0u64..500,
    ) {
        let model = small_model_f32();
        let updates: Vec<AggregateInput> = (0..3)
            .map(|i| {
                let mut adapters = init_adapters(&model, 2, seed + i).unwrap();
                let names: Vec<String> =
                    adapters.adapters().iter().map(|a| a.layer_name.clone()).collect();
                for name in &names {
                    let ad = adapters.get_mut(name).unwrap();
                    for (k, v) in ad.b.as_mut_slice().iter_mut().enumerate() {
                        *v = ((seed + i) as f32 * 0.37 + k as f32).sin();
                    }
                }
                AggregateInput {
                    client_id: i,
                    adapters,
                    weight: weights[i as usize],
                }
            })
            .collect();
        let agg = aggregate(&updates, 0).unwrap();
        for (li, layer) in agg.adapters().iter().enumerate() {
            for (idx, &v) in layer.b.as_slice().iter().enumerate() {
                let vals: Vec<f32> = updates
                    .iter()
                    .map(|u| u.adapters.adapters()[li].b.as_slice()[idx])
                    .collect();
                let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}

/// Merge equivalence in f64 tightens to 1e-10.
#[test]
fn merge_equivalence_f64() {
    let model = BaseModel::<f64>::init(
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
            ..ModelConfig::default()
        },
        9,
    )
    .unwrap();
    let mut adapters = init_adapters(&model, 4, 10).unwrap();
    let names: Vec<String> = adapters
        .adapters()
        .iter()
        .map(|a| a.layer_name.clone())
        .collect();
    let mut rng_state = 1u64;
    for name in &names {
        let ad = adapters.get_mut(name).unwrap();
        for v in ad.b.as_mut_slice() {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = ((rng_state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.2;
        }
    }
    let merged = merge(&model, &adapters).unwrap();
    for len in [1usize, 4, 11, 24] {
        let tokens: Vec<u32> = std::iter::once(BOS)
            .chain((1..len as u32).map(|i| (i * 37) % 256))
            .collect();
        let (adapted, _) = forward_lm(&model, Some(&adapters), &tokens).unwrap();
        let (plain, _) = forward_lm(&merged, None, &tokens).unwrap();
        assert!(
            adapted.max_abs_diff(&plain) <= 1e-10,
            "len {len}: {}",
            adapted.max_abs_diff(&plain)
        );
    }
}
