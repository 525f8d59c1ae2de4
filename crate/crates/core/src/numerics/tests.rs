use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Weighted sum with fixed random weights so every output coordinate matters.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = RngStream::new(seed, "weights");
    let w = rand_tensor(&mut rng, g.shape(out));
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn check_op<F>(name: &str, shapes: &[Vec<usize>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, format!("gc/{name}"));
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = grad_check(
            |g, v| {
                let out = f(g, v)?;
                scalarize(g, out, seed)
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let mut rng = RngStream::new(3, "cos");
    for _ in 0..10 {
        let u = Tensor::from_fn(&[1, 7], |_| rng.normal_f32(2.0));
        let mut g = Graph::<f32>::new();
        let a = g.constant(u.clone()).unwrap();
        let b = g.constant(u).unwrap();
        let c = g.cosine_rows(a, b).unwrap();
        assert!((g.scalar(c) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gradient_of_softmax_sum_vanishes() {
    let mut rng = RngStream::new(11, "softmax-sum");
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor(&mut rng, &[3, 5]), true).unwrap();
    let y = g.softmax(x).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).max_abs() < 1e-6);
}

#[test]
fn softmax_rows_are_positive_and_normalised() {
    let mut rng = RngStream::new(5, "softmax");
    let mut g = Graph::<f32>::new();
    let x = g
        .constant(Tensor::from_fn(&[6, 9], |_| rng.normal_f32(4.0)))
        .unwrap();
    let y = g.softmax(x).unwrap();
    for r in 0..6 {
        let row = g.value(y).row(r);
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn quadratic_gradient_matches() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        g.sum_all(sq)
    };
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), true).unwrap();
    let out = f(&mut g, &[xv]).unwrap();
    g.backward(out).unwrap();
    assert_eq!(g.grad(xv).data(), &[2.0, 4.0, 6.0]);
    assert!(grad_check(f, &[x], 1e-3).unwrap() < 1e-5);
}

#[test]
fn grad_check_rejects_bad_step() {
    let x = Tensor::new(&[1], vec![1.0]).unwrap();
    let r = grad_check(|g, v| g.sum_all(v[0]), &[x], 0.5);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_op("add", &[vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("add_row", &[vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1]));
    check_op("scale", &[vec![2, 5]], |g, v| g.scale(v[0], -1.7));
    check_op("gelu", &[vec![4, 3]], |g, v| g.gelu(v[0]));
    check_op("tanh", &[vec![4, 3]], |g, v| g.tanh(v[0]));
}

#[test]
fn structural_ops_pass_grad_check() {
    check_op("matmul", &[vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op("transpose", &[vec![3, 4]], |g, v| g.transpose(v[0]));
    check_op("reshape", &[vec![3, 4]], |g, v| g.reshape(v[0], &[2, 6]));
    check_op("concat0", &[vec![2, 3], vec![1, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
    check_op("concat1", &[vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check_op("slice", &[vec![4, 5]], |g, v| g.slice(v[0], 1, 1, 3));
    check_op("gather", &[vec![4, 3]], |g, v| g.gather(v[0], &[2, 0, 2, 3]));
    check_op("sum_axis", &[vec![2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
    check_op("mean_axis", &[vec![2, 3, 4]], |g, v| g.mean_axis(v[0], 0));
}

#[test]
fn normalisation_ops_pass_grad_check() {
    check_op("softmax", &[vec![3, 5]], |g, v| g.softmax(v[0]));
    check_op("layer_norm", &[vec![3, 6], vec![6], vec![6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    check_op("row_norm", &[vec![4, 3]], |g, v| g.row_norm(v[0]));
    check_op("normalize_rows", &[vec![4, 3]], |g, v| g.normalize_rows(v[0]));
    check_op("cosine_matrix", &[vec![3, 4], vec![5, 4]], |g, v| {
        g.cosine_matrix(v[0], v[1])
    });
    check_op("cosine_rows", &[vec![3, 4], vec![3, 4]], |g, v| g.cosine_rows(v[0], v[1]));
}

#[test]
fn attention_passes_grad_check() {
    let spec = AttentionSpec {
        nseq: 2,
        seq: 3,
        plen: 0,
        heads: 2,
    };
    check_op("attention", &[vec![6, 4], vec![6, 4], vec![6, 4]], |g, v| {
        g.attention(v[0], v[1], v[2], None, spec)
    });
    let pspec = AttentionSpec { plen: 2, ..spec };
    check_op(
        "attention_prompt",
        &[vec![6, 4], vec![6, 4], vec![6, 4], vec![4, 4], vec![4, 4]],
        |g, v| g.attention(v[0], v[1], v[2], Some((v[3], v[4])), pspec),
    );
}

#[test]
fn cross_entropy_passes_grad_check() {
    check_op("cross_entropy", &[vec![4, 3]], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 2])
    });
}

#[test]
fn zero_prompt_values_leave_attention_unchanged() {
    let mut rng = RngStream::new(1, "attn");
    let spec = AttentionSpec {
        nseq: 2,
        seq: 4,
        plen: 3,
        heads: 2,
    };
    let mut g = Graph::<f32>::new();
    let mk = |g: &mut Graph<f32>, rng: &mut RngStream, r: usize| {
        g.constant(Tensor::from_fn(&[r, 6], |_| rng.normal_f32(1.0)))
            .unwrap()
    };
    let q = mk(&mut g, &mut rng, 8);
    let k = mk(&mut g, &mut rng, 8);
    let v = mk(&mut g, &mut rng, 8);
    let pk = g.constant(Tensor::zeros(&[6, 6])).unwrap();
    let pv = g.constant(Tensor::zeros(&[6, 6])).unwrap();
    let plain = g
        .attention(q, k, v, None, AttentionSpec { plen: 0, ..spec })
        .unwrap();
    let prompted = g.attention(q, k, v, Some((pk, pv)), spec).unwrap();
    assert_eq!(g.value(plain), g.value(prompted));
}

#[test]
fn two_layer_net_cross_entropy_grad_check() {
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, "mlp");
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w1 = rand_tensor(&mut rng, &[4, 6]);
        let b1 = rand_tensor(&mut rng, &[6]);
        let w2 = rand_tensor(&mut rng, &[6, 3]);
        let labels: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
        let err = grad_check(
            |g, v| {
                let xc = g.constant(x.clone())?;
                let h = g.matmul(xc, v[0])?;
                let h = g.add_row(h, v[1])?;
                let h = g.gelu(h)?;
                let z = g.matmul(h, v[2])?;
                g.cross_entropy(z, &labels)
            },
            &[w1, b1, w2],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn shape_mismatch_is_config_error() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Config(_))));
    let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(g.add(a, c), Err(Error::Config(_))));
}

#[test]
fn non_finite_forward_names_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g
        .constant(Tensor::new(&[1, 2], vec![f32::MAX, f32::MAX]).unwrap())
        .unwrap();
    match g.add(a, a) {
        Err(Error::Numeric { op, .. }) => assert_eq!(op, "add"),
        other => panic!("expected numeric fault, got {other:?}"),
    }
    let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(matches!(g.normalize_rows(z), Err(Error::Numeric { .. })));
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = Parameter::new(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let before = p.value.clone();
    let mut s = AdamState::for_param(&p, 0.1);
    s.update(&mut p).unwrap();
    assert_eq!(p.value, before);
    assert!(s.first_moment.max_abs() == 0.0 && s.second_moment.max_abs() == 0.0);
    assert_eq!(s.step_count, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = Parameter::new(Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), true);
    p.grad = Tensor::new(&[2], vec![3.0, -0.01]).unwrap();
    let mut s = AdamState::for_param(&p, 0.05);
    s.update(&mut p).unwrap();
    assert!((p.value.data()[0] + 0.05).abs() < 1e-6);
    assert!((p.value.data()[1] - 0.05).abs() < 1e-5);
    // gradient untouched
    assert_eq!(p.grad.data(), &[3.0, -0.01]);
}

#[test]
fn adam_rejects_frozen_parameter() {
    let mut p = Parameter::zeros(&[2], false);
    let mut s = AdamState::for_param(&p, 0.1);
    assert!(matches!(s.update(&mut p), Err(Error::Usage(_))));
}

/// Scalar Adam written out by hand, independent of `AdamState`.
fn scalar_adam_oracle(x0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for t in 1..=steps {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    x
}

#[test]
fn adam_converges_on_scalar_quadratic() {
    let oracle = scalar_adam_oracle(0.0, 0.1, 100);
    assert!((oracle - 3.0).abs() < 0.2, "oracle ended at {oracle}");
    let mut p = Parameter::zeros(&[1], true);
    let mut s = AdamState::for_param(&p, 0.1);
    for _ in 0..100 {
        p.grad = Tensor::scalar(2.0 * (p.value.data()[0] - 3.0));
        s.update(&mut p).unwrap();
    }
    let x = p.value.data()[0] as f64;
    assert!((x - 3.0).abs() < 0.2);
    assert!((x - oracle).abs() < 1e-4);
    assert_eq!(s.step_count, 100);
}

fn batch_rows(rng: &mut RngStream, n: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, d], |i| rng.normal_f32(1.0) + (i % d) as f32 * 0.3)
}

/// Two-pass mean and sample covariance straight from the rows.
fn batch_statistics(rows: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (rows.rows(), rows.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += rows.row(r)[j] as f64 / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (rows.row(r)[a] as f64 - mean[a]) * (rows.row(r)[b] as f64 - mean[b])
                    / (n as f64 - 1.0);
            }
        }
    }
    (mean, cov)
}

#[test]
fn gaussian_single_observation() {
    let v = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let g = GaussianModel::empty(3).merge(&v).unwrap();
    assert_eq!(g.mean(), &[1.0, -2.0, 0.5]);
    assert!(g.covariance().iter().all(|&c| c == 0.0));
    assert_eq!(g.count(), 1);
}

#[test]
fn gaussian_split_merge_matches_whole_batch() {
    let mut rng = RngStream::new(4, "gauss");
    let all = batch_rows(&mut rng, 40, 5);
    let first = Tensor::new(&[25, 5], all.data()[..125].to_vec()).unwrap();
    let second = Tensor::new(&[15, 5], all.data()[125..].to_vec()).unwrap();
    let whole = GaussianModel::empty(5).merge(&all).unwrap();
    let split = GaussianModel::empty(5)
        .merge(&first)
        .unwrap()
        .merge(&second)
        .unwrap();
    assert_eq!(whole.mean(), split.mean());
    let (mean, cov) = batch_statistics(&all);
    for (a, b) in whole.mean().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
    for ((a, b), c) in whole.covariance().iter().zip(split.covariance()).zip(&cov) {
        assert!((a - b).abs() < 1e-5);
        assert!((a - c).abs() < 1e-5);
    }
    assert_eq!(split.count(), 40);
}

#[test]
fn gaussian_equal_weight_average() {
    let n = 6;
    let d = 4;
    let base = GaussianModel::from_moments(&vec![0.0; d], &vec![0.0; d * d], n).unwrap();
    let twos = Tensor::full(&[n as usize, d], 2.0f32);
    let merged = base.merge(&twos).unwrap();
    assert_eq!(merged.mean(), &[1.0; 4]);
}

#[test]
fn gaussian_dimension_mismatch() {
    let g = GaussianModel::empty(3);
    let bad = Tensor::<f32>::zeros(&[2, 4]);
    assert!(matches!(g.merge(&bad), Err(Error::Config(_))));
}

#[test]
fn gaussian_zero_covariance_samples_mean() {
    let rows = Tensor::full(&[5, 3], 1.5f32);
    let g = GaussianModel::empty(3).merge(&rows).unwrap();
    let s = g.sample(10, &mut RngStream::new(0, "s")).unwrap();
    assert!(s.data().iter().all(|&x| x == 1.5));
}

#[test]
fn gaussian_sampling_matches_moments() {
    let d = 4;
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let mean = [0.5, -1.0, 2.0, 0.0];
    let g = GaussianModel::from_moments(&mean, &eye, 100).unwrap();
    let s = g.sample(10_000, &mut RngStream::new(9, "lln")).unwrap();
    let (m, c) = batch_statistics(&s);
    let dist: f64 = m.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 0.05 * (d as f64).sqrt(), "mean off by {dist}");
    for a in 0..d {
        for b in 0..d {
            let target = if a == b { 1.0 + 1e-4 } else { 0.0 };
            assert!((c[a * d + b] - target).abs() < 0.1);
        }
    }
    let again = g.sample(10_000, &mut RngStream::new(9, "lln")).unwrap();
    assert_eq!(s, again);
}

#[test]
fn rng_streams_are_labelled() {
    let mut a = RngStream::new(7, "data");
    let mut b = RngStream::new(7, "data");
    let mut c = RngStream::new(7, "init");
    let xa: Vec<f64> = (0..5).map(|_| a.normal()).collect();
    let xb: Vec<f64> = (0..5).map(|_| b.normal()).collect();
    let xc: Vec<f64> = (0..5).map(|_| c.normal()).collect();
    assert_eq!(xa, xb);
    assert_ne!(xa, xc);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn merge_is_associative(seed in 0u64..1000, na in 1usize..8, nb in 1usize..8, nc in 1usize..8) {
            let mut rng = RngStream::new(seed, "assoc");
            let d = 3;
            let a = batch_rows(&mut rng, na, d);
            let b = batch_rows(&mut rng, nb, d);
            let c = batch_rows(&mut rng, nc, d);
            let mut bc = b.data().to_vec();
            bc.extend_from_slice(c.data());
            let bc = Tensor::new(&[nb + nc, d], bc).unwrap();
            let left = GaussianModel::empty(d).merge(&a).unwrap().merge(&b).unwrap().merge(&c).unwrap();
            let right = GaussianModel::empty(d).merge(&a).unwrap().merge(&bc).unwrap();
            prop_assert_eq!(left.mean(), right.mean());
            for (x, y) in left.covariance().iter().zip(right.covariance()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 1..12)) {
            let n = vals.len();
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::new(&[1, n], vals).unwrap()).unwrap();
            let y = g.softmax(x).unwrap();
            let s: f32 = g.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
        }
    }
}
