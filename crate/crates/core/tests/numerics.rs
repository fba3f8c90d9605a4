use ocdistill_core::numerics::{
    grad_check, Bound, Checkpoint, CheckpointMeta, Graph, ParamStore, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;

fn random_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Applies one smooth primitive, keeping the [3, 4] shape.
fn apply(g: &mut Graph, op: u8, v: Var, b: &Bound) -> Result<Var, TensorError> {
    Ok(match op {
        0 => g.tanh(v),
        1 => g.sigmoid(v),
        2 => g.softplus(v),
        3 => g.gelu(v),
        4 => g.scale(v, 0.7),
        5 => g.mul(v, v)?,
        6 => {
            let w = b.var("w")?;
            g.matmul(v, w)?
        }
        7 => g.softmax(v, 1)?,
        8 => g.log_softmax(v, 1)?,
        9 => g.l2_normalize(v, 1)?,
        10 => g.layer_norm(v, 1, 1e-5)?,
        11 => {
            let t = g.tanh(v);
            g.exp(t)
        }
        12 => {
            let s = g.sigmoid(v);
            g.log(s)?
        }
        13 => {
            let x = b.var("x")?;
            g.add(v, x)?
        }
        14 => {
            let t = g.transpose(v)?;
            let w = b.var("m")?;
            let y = g.matmul(t, w)?;
            g.transpose(y)?
        }
        _ => {
            let x = b.var("x")?;
            g.sub(v, x)?
        }
    })
}

fn store(seed: u64) -> ParamStore {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("x", random_tensor(&[3, 4], &mut rng));
    p.insert("w", random_tensor(&[4, 4], &mut rng));
    p.insert("m", random_tensor(&[3, 3], &mut rng));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_compositions_match_finite_differences(ops in prop::collection::vec(0u8..16, 1..=10), seed in any::<u64>()) {
        let params = store(seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        let c = random_tensor(&[3, 4], &mut rng);
        let err = grad_check(&params, 1e-5, |g, b| {
            let mut v = b.var("x")?;
            for &op in &ops {
                v = apply(g, op, v, b)?;
            }
            let c = g.constant(c.clone());
            let weighted = g.mul(v, c)?;
            Ok(g.sum_all(weighted))
        })
        .unwrap();
        prop_assert!(err < 1e-5, "ops {ops:?}: {err}");
    }

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let t = g.value(s);
        for r in 0..3 {
            let row = t.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(ops in prop::collection::vec(0u8..16, 1..=10), seed in any::<u64>()) {
        let params = store(seed);
        let run = || {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let mut v = b.var("x").unwrap();
            for &op in &ops {
                v = apply(&mut g, op, v, &b).unwrap();
            }
            let loss = g.sum_all(v);
            g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), b.grads(&g))
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn two_layer_mlp_gradients() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamStore::new();
    p.insert("w1", random_tensor(&[5, 7], &mut rng));
    p.insert("b1", random_tensor(&[1, 7], &mut rng));
    p.insert("w2", random_tensor(&[7, 3], &mut rng));
    let x = random_tensor(&[6, 5], &mut rng);
    let target = random_tensor(&[6, 3], &mut rng);
    let err = grad_check(&p, 1e-5, |g, b| {
        let x = g.constant(x.clone());
        let h = g.matmul(x, b.var("w1")?)?;
        let ones = g.constant(Tensor::full(&[6, 1], 1.0));
        let bias = g.matmul(ones, b.var("b1")?)?;
        let h = g.add(h, bias)?;
        let h = g.tanh(h);
        let y = g.matmul(h, b.var("w2")?)?;
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean_all(sq))
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn checkpoint_file_round_trip() {
    let params = store(5);
    let meta = CheckpointMeta {
        step: 17,
        seed: 99,
        config_hash: "abc".into(),
        entries: [("role".to_string(), "stage1".to_string())].into_iter().collect(),
    };
    let ck = Checkpoint::new(params, meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
