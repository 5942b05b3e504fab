mod common;

use std::collections::BTreeMap;

use character_adapter::diffusion::{decoupled_cross_attention, AdapterBundle, AdapterEntry, Conditioning, NoHook, NoisePredictor, RegionKey, UNet, UNetConfig};
use character_adapter::probe::Probe;
use character_adapter::text::{encode_tokens, tokenize, RegionLabel};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

use common::{rng, uniform2};

fn net() -> UNet {
    UNet::new(UNetConfig {
        width: 8,
        text_dim: 8,
        image_dim: 8,
        ..UNetConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, side in 1usize..4, words in "[a-z]{1,6}( [a-z]{1,6}){0,4}") {
        let net = net();
        let mut r = rng(seed);
        let latent = Array3::from_shape_simple_fn((3, 2 * side, 2 * side), || r.random_range(-2.0f32..2.0));
        let cond = Conditioning::text_only(encode_tokens(&tokenize(&words).unwrap(), 8, seed));
        let mut probe = Probe::recording();
        net.predict_noise(&latent, 7, &cond, &mut probe).unwrap();
        for record in probe.records().unwrap() {
            let (n, h, w) = record.maps.dim();
            for y in 0..h {
                for x in 0..w {
                    let column: Vec<f32> = (0..n).map(|i| record.maps[[i, y, x]]).collect();
                    prop_assert!(column.iter().all(|p| (0.0..=1.0).contains(p)));
                    prop_assert!((column.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn image_branch_is_linear_in_scale(seed in 0u64..10_000, l1 in 0.1f32..3.0, l2 in 0.1f32..3.0) {
        let net = net();
        let mut r = rng(seed);
        let z = uniform2(&mut r, 9, 8);
        let text = encode_tokens(&tokenize("a red fox").unwrap(), 8, 1);
        let key = RegionKey::new(1, RegionLabel::Face);
        let features = uniform2(&mut r, 4, 8);
        let weighting = Array2::from_shape_simple_fn((3, 3), || r.random_range(0.0f32..1.0));
        let maps: BTreeMap<_, _> = [(key, weighting)].into();
        let out = |scale: f32| {
            let bundle = AdapterBundle::new(vec![AdapterEntry { key, features: features.clone() }], scale).unwrap();
            decoupled_cross_attention(&z, &text, net.attention_weights(1), &bundle, net.adapter_projections(1), Some(&maps)).unwrap()
        };
        let base = out(0.0);
        let (d1, d2) = (&out(l1) - &base, &out(l2) - &base);
        for (a, b) in d1.iter().zip(d2.iter()) {
            prop_assert!((a * l2 - b * l1).abs() <= 1e-4 * (1.0 + a.abs() + b.abs()));
        }
    }

    #[test]
    fn noise_prediction_is_deterministic(seed in 0u64..10_000) {
        let net = net();
        let mut r = rng(seed);
        let latent = Array3::from_shape_simple_fn((3, 4, 4), || r.random_range(-1.0f32..1.0));
        let cond = Conditioning::text_only(encode_tokens(&tokenize("two cats").unwrap(), 8, seed));
        let a = net.predict_noise(&latent, 3, &cond, &mut NoHook).unwrap();
        let b = net.predict_noise(&latent, 3, &cond, &mut NoHook).unwrap();
        prop_assert_eq!(a, b);
    }
}
