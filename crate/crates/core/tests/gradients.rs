//! Analytic gradients checked against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpgd_core::loss::{loss_ce, loss_ce_grad};
use wpgd_core::nn::softmax;
use wpgd_core::ot::{loss_w, loss_w_grad};
use wpgd_core::{Activation, CostMatrix, MlpParams, MlpSpec};

const H: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Loss {
    Ce,
    W(f64),
}

fn loss_at(params: &MlpParams, x: &[f64], label: usize, loss: Loss, cost: &CostMatrix) -> f64 {
    let pred = params.predict(x).unwrap();
    match loss {
        Loss::Ce => loss_ce(&pred, label).unwrap(),
        Loss::W(lambda) => loss_w(&pred, label, cost, lambda).unwrap(),
    }
}

fn analytic(params: &MlpParams, x: &[f64], label: usize, loss: Loss, cost: &CostMatrix) -> (Vec<f64>, Vec<f64>) {
    let (pred, trace) = params.forward_slice(x).unwrap();
    let upstream = match loss {
        Loss::Ce => loss_ce_grad(&pred, label).unwrap(),
        Loss::W(lambda) => loss_w_grad(&pred, label, cost, lambda).unwrap(),
    };
    let (grads, dx) = params.backprop(&trace, &upstream).unwrap();
    (grads.to_flat(), dx.into_data())
}

fn numeric(params: &MlpParams, x: &[f64], label: usize, loss: Loss, cost: &CostMatrix) -> (Vec<f64>, Vec<f64>) {
    let flat = params.to_flat();
    let spec = params.spec().clone();
    let dparams = (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            plus[i] += H;
            let mut minus = flat.clone();
            minus[i] -= H;
            let fp = loss_at(&MlpParams::from_flat(spec.clone(), &plus).unwrap(), x, label, loss, cost);
            let fm = loss_at(&MlpParams::from_flat(spec.clone(), &minus).unwrap(), x, label, loss, cost);
            (fp - fm) / (2.0 * H)
        })
        .collect();
    let dx = (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            plus[i] += H;
            let mut minus = x.to_vec();
            minus[i] -= H;
            (loss_at(params, &plus, label, loss, cost) - loss_at(params, &minus, label, loss, cost)) / (2.0 * H)
        })
        .collect();
    (dparams, dx)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn random_cost(rng: &mut impl Rng, k: usize, p: f64) -> CostMatrix {
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = rng.random_range(0.1..2.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    CostMatrix::new(&m, p).unwrap()
}

fn check_instances(activation: Activation, loss: Loss, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..25 {
        let k = [2, 3, 5][trial % 3];
        let d = 1 + trial % 4;
        let spec = MlpSpec::new(vec![d, 6, 5, k], activation, rng.random()).unwrap();
        // random biases keep pre-activations off the ReLU kink at zero
        let flat: Vec<f64> = (0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = MlpParams::from_flat(spec, &flat).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = rng.random_range(0..k);
        let cost = random_cost(&mut rng, k, [1.0, 2.0][trial % 2]);
        let (ap, ax) = analytic(&params, &x, label, loss, &cost);
        let (np, nx) = numeric(&params, &x, label, loss, &cost);
        let ep = relative_error(&ap, &np);
        let ex = relative_error(&ax, &nx);
        assert!(ep < 1e-4, "trial {trial}: parameter gradient error {ep}");
        assert!(ex < 1e-4, "trial {trial}: input gradient error {ex}");
    }
}

#[test]
fn cross_entropy_gradients_tanh() {
    check_instances(Activation::Tanh, Loss::Ce, 1);
}

#[test]
fn cross_entropy_gradients_relu() {
    check_instances(Activation::Relu, Loss::Ce, 2);
}

#[test]
fn wasserstein_gradients_tanh() {
    check_instances(Activation::Tanh, Loss::W(10.0), 3);
}

#[test]
fn wasserstein_gradients_relu() {
    check_instances(Activation::Relu, Loss::W(1.0), 4);
}

#[test]
fn wasserstein_gradient_without_entropy_term() {
    check_instances(Activation::Tanh, Loss::W(f64::INFINITY), 5);
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 2..12), shift in -100.0f64..100.0) {
        let p = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let q = softmax(&shifted);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_extreme_logits(big in 500.0f64..1e6) {
        let p = softmax(&[big, -big, 0.0]);
        prop_assert!(p.iter().all(|v| v.is_finite()));
        prop_assert!((p[0] - 1.0).abs() < 1e-12);
    }
}
