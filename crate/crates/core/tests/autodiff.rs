//! Gradient soundness for every primitive, tape determinism, and the
//! straight-through contracts.

use stegolab_core::gradcheck::gradient_check;
use stegolab_core::graph::Graph;
use stegolab_core::rng::Rng;
use stegolab_core::tensor::Tensor;

const PRIMITIVE_TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let mut rng = Rng::new(seed);
    for v in t.data_mut() {
        *v = scale * rng.normal();
    }
    t
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for (name, err) in stegolab_core::gradcheck::primitive_battery().unwrap() {
        assert!(err < PRIMITIVE_TOL, "{name}: max rel err {err}");
    }
}

#[test]
fn second_order_through_built_gradients() {
    // Build the gradient of an inner loss as graph nodes, keep computing with
    // it, and differentiate the whole thing. Finite differences see the true
    // second-order dependence, so agreement means the VJPs-of-VJPs are right.
    let point = random(&[1, 6, 6], 50, 0.6);
    let err = gradient_check(
        |g, x| {
            let k = g.constant(random(&[1, 1, 3, 3], 51, 0.7));
            let t = g.constant(random(&[1, 6, 6], 52, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            let conv = g.conv2d(x, k, None, 1)?;
            let act = g.tanh(conv);
            let inner = g.bce_with_logits(act, t)?;
            let grad = g.grad_vars(inner, &[x])?[0];
            let sq = g.mul(grad, grad)?;
            Ok(g.sum(sq))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "second-order max rel err {err}");
}

#[test]
fn backward_analytic_examples() {
    // loss = sum(x^2) at [1,-2,3] -> grad [2,-4,6].
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let mut grads = g.backward(loss).unwrap();
    assert_eq!(grads.take(x).unwrap().data(), &[2.0, -4.0, 6.0]);

    // loss = mean(clamp01_ste(x)) with x=[2.0] -> grad [1.0] (straight-through).
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(&[1], vec![2.0]).unwrap());
    let c = g.clamp01_ste(x);
    let loss = g.mean(c);
    let mut grads = g.backward(loss).unwrap();
    assert_eq!(grads.take(x).unwrap().data(), &[1.0]);
    assert_eq!(g.value(c).data(), &[1.0]);

    // loss = bce_with_logits(w * x, 1) at w=0, x=1 -> dloss/dw = -0.5.
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let x = g.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let ones = g.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let wx = g.mul(w, x).unwrap();
    let loss = g.bce_with_logits(wx, ones).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let mut grads = g.backward(loss).unwrap();
    let dw = grads.take(w).unwrap().data()[0];
    assert!((dw + 0.5).abs() < 1e-12, "dloss/dw = {dw}");
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let used = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let unused = g.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = g.sum(used);
    let mut grads = g.backward(loss).unwrap();
    assert_eq!(grads.take(used).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.take(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn nonscalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    assert!(g.backward(x).is_err());
}

#[test]
fn gaussian_sample_is_constant_under_differentiation() {
    // loss = mean(x + sigma * eps): gradient w.r.t. x is 1/n regardless of eps.
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let eps = g.gaussian_sample(&[4], 99);
    let noisy = g.add(x, eps).unwrap();
    let loss = g.mean(noisy);
    let mut grads = g.backward(loss).unwrap();
    assert_eq!(grads.take(x).unwrap().data(), &[0.25; 4]);

    // Same seed reproduces the same draw.
    let mut g2 = Graph::new();
    let eps2 = g2.gaussian_sample(&[4], 99);
    assert_eq!(g.value(eps).data(), g2.value(eps2).data());
}

#[test]
fn tape_replay_is_bit_identical() {
    let build = || {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 6, 6], 60, 0.8));
        let k = g.param(random(&[3, 2, 3, 3], 61, 0.5));
        let b = g.param(random(&[3], 62, 0.2));
        let y = g.conv2d(x, k, Some(b), 1).unwrap();
        let a = g.tanh(y);
        let noise = g.gaussian_sample(&[3, 6, 6], 63);
        let z = g.add(a, noise).unwrap();
        let sq = g.mul(z, z).unwrap();
        let loss = g.mean(sq);
        let mut grads = g.backward(loss).unwrap();
        (
            g.value(loss).item().to_bits(),
            grads.take(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            grads.take(k).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(build(), build());
}

#[test]
fn shape_mismatch_names_offender() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "diagnostic should name the op: {err}");
    assert!(err.contains("[2, 3]"), "diagnostic should show shapes: {err}");
}

#[test]
fn relu_conv_bce_forward_values() {
    // relu([-1, 0, 2]) -> [0, 0, 2]
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    // conv2d with a center-one kernel reproduces any 5x5 image.
    let img = random(&[1, 5, 5], 70, 0.5);
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let mut kt = Tensor::zeros(&[1, 1, 3, 3]);
    kt.data_mut()[4] = 1.0;
    let k = g.constant(kt);
    let y = g.conv2d(x, k, None, 1).unwrap();
    assert_eq!(g.value(y).data(), img.data());
}
