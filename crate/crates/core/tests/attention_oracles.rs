use coseg_core::attention::{
    linear_attention, multi_head_linear_attention, standard_attention, AttentionParams,
};
use coseg_core::rng::rng_from_seed;
use coseg_core::tensorops::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Quadratic form: build the full N x N kernel matrix, then normalize rows.
fn quadratic_linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, m, dv) = (q.rows(), k.rows(), v.cols());
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let weights: Vec<f64> = (0..m)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(&a, &b)| phi(a) * phi(b))
                    .sum()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            for c in 0..dv {
                out[i * dv + c] += w / total * v.at(j, c);
            }
        }
    }
    Tensor::new(vec![n, dv], out).unwrap()
}

fn softmax_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, m, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            for c in 0..dv {
                out[i * dv + c] += ej / z * v.at(j, c);
            }
        }
    }
    Tensor::new(vec![n, dv], out).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

#[test]
fn reassociated_linear_attention_matches_quadratic_form() {
    let mut rng = rng_from_seed(7);
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let q = random(&[n, d], &mut rng, 2.0);
        let k = random(&[n, d], &mut rng, 2.0);
        let v = random(&[n, d], &mut rng, 2.0);
        let err = linear_attention(&q, &k, &v)
            .unwrap()
            .max_abs_diff(&quadratic_linear_attention(&q, &k, &v))
            .unwrap();
        assert!(err < 1e-6, "n={n} d={d}: {err}");
    }
}

#[test]
fn softmax_attention_matches_direct_oracle() {
    let mut rng = rng_from_seed(8);
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let q = random(&[n, d], &mut rng, 1.0);
        let k = random(&[n, d], &mut rng, 1.0);
        let v = random(&[n, d], &mut rng, 1.0);
        let err = standard_attention(&q, &k, &v)
            .unwrap()
            .max_abs_diff(&softmax_oracle(&q, &k, &v))
            .unwrap();
        assert!(err < 1e-12, "n={n} d={d}: {err}");
    }
}

#[test]
fn multi_head_splits_channels() {
    // identity projections with two heads equal two independent attentions
    // on the channel halves
    let mut rng = rng_from_seed(9);
    let (n, d) = (10, 6);
    let x = random(&[n, d], &mut rng, 1.0);
    let params = AttentionParams::from_weights(
        "t",
        Tensor::eye(d),
        Tensor::eye(d),
        Tensor::eye(d),
        Tensor::eye(d),
        2,
    )
    .unwrap();
    let y = multi_head_linear_attention(&x.reshape(&[1, n, d]).unwrap(), &params).unwrap();
    assert_eq!(y.shape(), &[1, n, d]);
    for h in 0..2 {
        let cols: Vec<f64> = (0..n)
            .flat_map(|i| x.row(i)[h * 3..h * 3 + 3].to_vec())
            .collect();
        let xh = Tensor::new(vec![n, 3], cols).unwrap();
        let expected = quadratic_linear_attention(&xh, &xh, &xh);
        for i in 0..n {
            for c in 0..3 {
                assert!((y.data()[i * d + h * 3 + c] - expected.at(i, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Tensor::zeros(&[3, 4]);
    assert!(linear_attention(&a, &Tensor::zeros(&[3, 5]), &a).is_err());
    assert!(standard_attention(&a, &a, &Tensor::zeros(&[2, 4])).is_err());
}

proptest! {
    /// Outputs are convex combinations of value rows.
    #[test]
    fn outputs_stay_inside_value_range(
        n in 1usize..12,
        d in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = rng_from_seed(seed);
        let q = random(&[n, d], &mut rng, 3.0);
        let k = random(&[n, d], &mut rng, 3.0);
        let v = random(&[n, d], &mut rng, 3.0);
        for y in [linear_attention(&q, &k, &v).unwrap(), standard_attention(&q, &k, &v).unwrap()] {
            for c in 0..d {
                let lo = (0..n).map(|j| v.at(j, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..n).map(|j| v.at(j, c)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..n {
                    prop_assert!(y.at(i, c) >= lo - 1e-12 && y.at(i, c) <= hi + 1e-12);
                }
            }
        }
    }
}
