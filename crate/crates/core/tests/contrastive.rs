mod common;

use common::plain_ntxent;
use ocdistill_core::contrastive::{augment, ow_ntxent, ow_ntxent_value, AugmentConfig};
use ocdistill_core::data::VitalsSeries;
use ocdistill_core::encoders::{self, EncoderConfig, Pooling};
use ocdistill_core::numerics::{grad_check, Graph, ParamStore, Tensor};
use ocdistill_core::rng;
use ocdistill_core::similarity::WeightMatrix;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn unit_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn order(b: usize) -> Vec<String> {
    (0..b).map(|i| format!("p{i}")).collect()
}

/// Symmetric weights in [0, 1] with a unit diagonal.
fn symmetric(b: usize, upper: &[f32]) -> WeightMatrix {
    let mut v = vec![1.0f32; b * b];
    let mut k = 0;
    for i in 0..b {
        for j in i + 1..b {
            v[i * b + j] = upper[k % upper.len()];
            v[j * b + i] = upper[k % upper.len()];
            k += 1;
        }
    }
    WeightMatrix::from_values(order(b), v)
}

/// `2B` random rows of width `p`, bounded away from the origin.
fn embeddings() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (2usize..=8, 2usize..=6).prop_flat_map(|(b, p)| {
        let row = prop::collection::vec(-1.0f64..1.0, p)
            .prop_filter("nonzero", |r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        (Just(b), prop::collection::vec(row, 2 * b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn uniform_weights_reduce_to_plain_ntxent((b, raw) in embeddings(), tau in 0.05f64..2.0) {
        let e = unit_rows(&raw);
        let loss = ow_ntxent_value(&e, &WeightMatrix::uniform(order(b)), tau).unwrap();
        prop_assert!((loss - plain_ntxent(&e, tau)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_non_negative_and_zero_without_negatives((b, raw) in embeddings(), upper in prop::collection::vec(0.0f32..=1.0, 1..40), tau in 0.05f64..2.0) {
        let e = unit_rows(&raw);
        prop_assert!(ow_ntxent_value(&e, &symmetric(b, &upper), tau).unwrap() >= 0.0);
        prop_assert_eq!(ow_ntxent_value(&e, &symmetric(b, &[0.0]), tau).unwrap(), 0.0);
    }

    #[test]
    fn raising_one_weight_never_lowers_the_loss(
        (b, raw) in embeddings(),
        upper in prop::collection::vec(0.0f32..=1.0, 1..40),
        pick in any::<usize>(),
        bump in 0.0f32..=1.0,
    ) {
        let e = unit_rows(&raw);
        let w = symmetric(b, &upper);
        let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (i + 1..b).map(move |j| (i, j))).collect();
        let (i, j) = pairs[pick % pairs.len()];
        let mut values = w.values().to_vec();
        let raised = (values[i * b + j] + bump).min(1.0);
        values[i * b + j] = raised;
        values[j * b + i] = raised;
        let w2 = WeightMatrix::from_values(order(b), values);
        let before = ow_ntxent_value(&e, &w, 0.5).unwrap();
        let after = ow_ntxent_value(&e, &w2, 0.5).unwrap();
        prop_assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn embedding_gradients_match_finite_differences(
        b in 2usize..=4,
        p in 2usize..=8,
        seed in any::<u64>(),
        upper in prop::collection::vec(0.0f32..=1.0, 1..8),
        tau in 0.2f64..2.0,
    ) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("e", Tensor::new(vec![2 * b, p], (0..2 * b * p).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
        let w = symmetric(b, &upper);
        let err = grad_check(&params, 1e-6, |g, bound| {
            let e = g.l2_normalize(bound.var("e")?, 1)?;
            ow_ntxent(g, e, &w, tau).map_err(|e| match e {
                ocdistill_core::contrastive::ContrastiveError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        ff_dim: 8,
        input_channels: 4,
        max_timesteps: 4,
        pooling: Pooling::Mean,
        positional_encoding: true,
        projection_dim: 4,
        projection_bias: true,
    }
}

fn random_series(seed: u64, t: usize, c: usize) -> VitalsSeries {
    let mut r = rng::stream(seed, &[]);
    let indicators: Vec<u8> = (0..t * c).map(|_| u8::from(r.random_bool(0.8))).collect();
    let values = indicators
        .iter()
        .map(|&m| if m == 1 { r.random_range(-2.0..2.0) } else { 0.0 })
        .collect();
    VitalsSeries::new(t, c, values, indicators).unwrap()
}

#[test]
fn encoder_and_loss_gradients_match_finite_differences() {
    let cfg = tiny_encoder();
    let mut r = rng::stream(5, &[]);
    let mut params = encoders::init_encoder(&cfg, &mut r);
    encoders::init_projection(&cfg, &mut r, &mut params);
    let aug = AugmentConfig::default();
    let base: Vec<VitalsSeries> = (0..3).map(|i| random_series(i, 4, 2)).collect();
    let mut views = Vec::new();
    for v in 0..2u64 {
        for (i, s) in base.iter().enumerate() {
            views.push(augment(s, &aug, &mut rng::stream(9, &[v, i as u64])));
        }
    }
    let refs: Vec<&VitalsSeries> = views.iter().collect();
    let input = encoders::batch_input(&refs).unwrap();
    let w = symmetric(3, &[0.2, 0.9, 0.5]);
    let err = grad_check(&params, 1e-5, |g, b| {
        let x = g.constant(input.clone());
        let h = encoders::encode(g, b, &cfg, x)?;
        let z = encoders::project(g, b, h)?;
        ow_ntxent(g, z, &w, 0.5).map_err(|e| match e {
            ocdistill_core::contrastive::ContrastiveError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn augmentation_is_reproducible_and_keeps_coherence() {
    let aug = AugmentConfig {
        jitter_sigma: 0.3,
        time_mask_ratio: 0.25,
        feature_mask_ratio: 0.5,
        seed: 0,
    };
    for seed in 0..50 {
        let x = random_series(seed, 8, 4);
        let a = augment(&x, &aug, &mut rng::stream(seed, &[1]));
        let b = augment(&x, &aug, &mut rng::stream(seed, &[1]));
        assert_eq!(a, b);
        assert!(a.is_coherent());
    }
}

#[test]
fn unnormalized_rows_are_rejected() {
    let mut g = Graph::new();
    let e = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert!(ow_ntxent(&mut g, e, &WeightMatrix::uniform(order(1)), 1.0).is_err());
}
