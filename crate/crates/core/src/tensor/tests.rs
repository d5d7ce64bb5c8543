use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_gradient_error, Builder};
use super::*;
use crate::error::NernError;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check_gradients(params: Vec<Tensor<f64>>, build: &Builder, tol: f64) {
    let err = max_gradient_error(&params, build).unwrap();
    assert!(err < tol, "relative error {err:e}");
}

#[test]
fn conv_all_ones_with_padding() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_identity_kernel_selects_channel_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let mut kernel = Tensor::zeros(&[1, 3, 1, 1]);
    kernel.data_mut()[0] = 1.0;
    let w = g.constant(kernel);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 4, 5]);
    for b in 0..2 {
        assert_eq!(g.value(y).outer(b), &input.outer(b)[..20]);
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(NernError::Shape(_))));
    let w = g.constant(Tensor::zeros(&[3, 2, 7, 7]));
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(NernError::Shape(_))));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.conv2d(x, w, Some(b), 1, 0), Err(NernError::Shape(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let params = vec![
            random(&[2, 3, 5, 5], &mut rng),
            random(&[4, 3, 3, 3], &mut rng),
            random(&[4], &mut rng),
        ];
        check_gradients(
            params,
            &move |g, ps| {
                let x = g.param(ps[0].clone());
                let w = g.param(ps[1].clone());
                let b = g.param(ps[2].clone());
                let y = g.conv2d(x, w, Some(b), stride, padding).unwrap();
                (g.sum(y), vec![x, w, b])
            },
            1e-6,
        );
    }
}

#[test]
fn dense_identity_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero_b = g.constant(Tensor::zeros(&[4]));
    let y = g.dense(x, eye, zero_b).unwrap();
    assert_eq!(g.value(y), &input);

    let z = g.constant(Tensor::zeros(&[2, 4]));
    let w = g.constant(random(&[3, 4], &mut rng));
    let bias = random(&[3], &mut rng);
    let b = g.constant(bias.clone());
    let y = g.dense(z, w, b).unwrap();
    assert_eq!(g.value(y).outer(0), bias.data());
    assert_eq!(g.value(y).outer(1), bias.data());

    let bad = g.constant(Tensor::zeros(&[3, 5]));
    assert!(g.dense(x, bad, b).is_err());
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = vec![random(&[3, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4], &mut rng)];
    check_gradients(
        params,
        &|g, ps| {
            let x = g.param(ps[0].clone());
            let w = g.param(ps[1].clone());
            let b = g.param(ps[2].clone());
            let y = g.dense(x, w, b).unwrap();
            let sq = g.mul(y, y).unwrap();
            (g.sum(sq), vec![x, w, b])
        },
        1e-6,
    );
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = vec![random(&[4, 6], &mut rng), random(&[4, 6], &mut rng)];
    check_gradients(
        params,
        &|g, ps| {
            let a = g.param(ps[0].clone());
            let b = g.param(ps[1].clone());
            let s = g.add(a, b).unwrap();
            let d = g.sub(a, b).unwrap();
            let m = g.mul(s, d).unwrap();
            let r = g.relu(m);
            let sc = g.scale(r, 0.7);
            let n = g.row_normalize(sc).unwrap();
            let rn = g.row_l2_norm(d).unwrap();
            let t1 = g.mean(n);
            let t2 = g.sum(rn);
            let l2 = g.l2_norm(s);
            let acc = g.add(t1, t2).unwrap();
            (g.add(acc, l2).unwrap(), vec![a, b])
        },
        1e-6,
    );
}

#[test]
fn take_pool_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = vec![random(&[2, 3, 2, 2], &mut rng)];
    check_gradients(
        params,
        &|g, ps| {
            let x = g.param(ps[0].clone());
            let pooled = g.global_avg_pool(x).unwrap();
            let flat = g.reshape(x, &[24]).unwrap();
            let picked = g.take(flat, vec![0, 5, 5, 23, 11, 7], &[2, 3]).unwrap();
            let prod = g.mul(picked, pooled).unwrap();
            (g.sum(prod), vec![x])
        },
        1e-6,
    );
}

#[test]
fn softmax_log_kl_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
    check_gradients(
        params,
        &|g, ps| {
            let a = g.param(ps[0].clone());
            let b = g.param(ps[1].clone());
            let p = g.softmax(a).unwrap();
            let q = g.softmax(b).unwrap();
            let kl = g.kl_div(p, q).unwrap();
            let lq = g.log(q);
            let s = g.mean(lq);
            (g.add(kl, s).unwrap(), vec![a, b])
        },
        1e-6,
    );
}

#[test]
fn row_distance_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for kind in [DistanceKind::Cosine, DistanceKind::SquaredL2] {
        let params = vec![random(&[5, 9], &mut rng), random(&[5, 9], &mut rng)];
        check_gradients(
            params,
            &move |g, ps| {
                let a = g.param(ps[0].clone());
                let b = g.param(ps[1].clone());
                let d = g.row_distance(a, b, kind).unwrap();
                (g.sum(d), vec![a, b])
            },
            1e-6,
        );
    }
}

#[test]
fn cosine_distance_degenerate_rows() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(vec![3, 2], vec![0.0, 0.0, 3.0, 4.0, 2.0, 0.0]).unwrap());
    let d = g.row_distance(a, b, DistanceKind::Cosine).unwrap();
    assert_eq!(g.value(d).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn composed_pipeline_gradient() {
    // conv -> relu -> pool -> dense -> softmax -> kl against a fixed target
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = vec![
        random(&[4, 2, 3, 3], &mut rng),
        random(&[4], &mut rng),
        random(&[3, 4], &mut rng),
        random(&[3], &mut rng),
    ];
    let input = random(&[2, 2, 6, 6], &mut rng);
    let target = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    check_gradients(
        params,
        &move |g, ps| {
            let x = g.constant(input.clone());
            let w = g.param(ps[0].clone());
            let b = g.param(ps[1].clone());
            let dw = g.param(ps[2].clone());
            let db = g.param(ps[3].clone());
            let h = g.conv2d(x, w, Some(b), 2, 1).unwrap();
            let h = g.relu(h);
            let h = g.global_avg_pool(h).unwrap();
            let logits = g.dense(h, dw, db).unwrap();
            let q = g.softmax(logits).unwrap();
            let p = g.constant(target.clone());
            (g.kl_div(p, q).unwrap(), vec![w, b, dw, db])
        },
        1e-4,
    );
}

#[test]
fn squared_sum_gradient_is_exact() {
    let w = Tensor::new(vec![4], vec![0.5f64, -1.25, 3.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let p = g.param(w.clone());
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(p), w.map(|v| 2.0 * v));
}

#[test]
fn detached_parameter_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let used = g.param(Tensor::full(&[3], 2.0));
    let unused = g.param(Tensor::full(&[2, 2], 5.0));
    let loss = g.sum(used);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_contract() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(p), Err(NernError::NonScalarLoss(_))));
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(NernError::BackwardTwice)));
    g.reset_backward();
    assert!(g.backward(loss).is_ok());
}

#[test]
fn kl_closed_form_and_validation() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(vec![1, 2], vec![2.0 / 3.0, 1.0 / 3.0]).unwrap());
    let q = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let kl = g.kl_div(p, q).unwrap();
    let expected = (2.0f64 / 3.0) * (4.0f64 / 3.0).ln() + (1.0f64 / 3.0) * (2.0f64 / 3.0).ln();
    assert!((g.value(kl).item() - expected).abs() < 1e-12);
    assert!((expected - 0.05663).abs() < 1e-5);

    let same = g.kl_div(p, p).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    let zero_q = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.kl_div(q, zero_q), Err(NernError::InvalidDistribution(_))));
    // p_k = 0 contributes nothing even when q_k = 0.
    let ok = g.kl_div(zero_q, zero_q).unwrap();
    assert_eq!(g.value(ok).item(), 0.0);
    let unnormalized = g.constant(Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap());
    assert!(g.kl_div(unnormalized, q).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 5]));
    let s = g.softmax(z).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let big = g.constant(Tensor::from_fn(&[6, 7], |_| rng.gen_range(-500.0..500.0)));
    let s = g.softmax(big).unwrap();
    for row in g.value(s).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[4, 3, 8, 8], |_| rng.gen_range(-1.0..1.0)));
        let w = g.param(Tensor::from_fn(&[5, 3, 3, 3], |_| rng.gen_range(-1.0..1.0)));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.relu(y);
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.wrt(w))
    };
    assert_eq!(run(), run());
}
