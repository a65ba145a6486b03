//! Feasibility, progress, determinism and the 0/1-cost equivalence of PGD.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpgd_core::attacks::{
    attack_batch, objective_with_grad, perturbation_norm, pgd_attack, pgd_attack_indexed, AttackConfig, Norm, Objective,
};
use wpgd_core::data::LabeledExample;
use wpgd_core::{Activation, CostMatrix, MlpParams, MlpSpec, Tensor};

fn model(seed: u64, dims: Vec<usize>, activation: Activation) -> MlpParams {
    let spec = MlpSpec::new(dims, activation, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let flat: Vec<f64> = (0..spec.num_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
    MlpParams::from_flat(spec, &flat).unwrap()
}

fn example(rng: &mut impl Rng, d: usize, k: usize, [lo, hi]: [f64; 2]) -> LabeledExample {
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    LabeledExample {
        input: Tensor::vector(x).unwrap(),
        label: rng.random_range(0..k),
    }
}

fn toy_cost(p: f64) -> CostMatrix {
    CostMatrix::new(
        &[
            vec![0.0, 10.0, 0.01],
            vec![10.0, 0.0, 1.0],
            vec![0.01, 1.0, 0.0],
        ],
        p,
    )
    .unwrap()
}

fn assert_feasible(adv: &[f64], clean: &[f64], cfg: &AttackConfig) {
    let [lo, hi] = cfg.clamp_range;
    assert!(perturbation_norm(adv, clean, cfg.norm) <= cfg.epsilon + 1e-9);
    assert!(adv.iter().all(|&v| v >= lo && v <= hi));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn adversarial_examples_are_feasible(
        seed in any::<u64>(),
        eps in 0.0f64..1.0,
        steps in 1usize..12,
        l2 in any::<bool>(),
        wasserstein in any::<bool>(),
        random_start in any::<bool>(),
        d in 1usize..8,
    ) {
        let params = model(seed, vec![d, 8, 3], Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let objective = if wasserstein { Objective::Wasserstein } else { Objective::Ce };
        let mut cfg = AttackConfig::new(eps, steps, norm, objective);
        cfg.random_start = random_start;
        cfg.seed = seed;
        let cost = toy_cost(2.0);
        let batch: Vec<_> = (0..8).map(|_| example(&mut rng, d, 3, cfg.clamp_range)).collect();
        let out = attack_batch(&params, &batch, &cfg, Some(&cost), 0).unwrap();
        for (adv, ex) in out.iter().zip(&batch) {
            assert_feasible(adv.x_adv.data(), ex.input.data(), &cfg);
        }
    }

    #[test]
    fn attacks_are_deterministic(seed in any::<u64>(), index in any::<u64>()) {
        let params = model(seed, vec![4, 6, 3], Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = example(&mut rng, 4, 3, [0.0, 1.0]);
        let mut cfg = AttackConfig::new(0.3, 5, Norm::L2, Objective::Ce);
        cfg.random_start = true;
        cfg.seed = seed;
        let a = pgd_attack_indexed(&params, &ex, &cfg, None, index).unwrap();
        let b = pgd_attack_indexed(&params, &ex, &cfg, None, index).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn batch_attack_matches_per_example_streams() {
    let params = model(9, vec![3, 5, 3], Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<_> = (0..40).map(|_| example(&mut rng, 3, 3, [0.0, 1.0])).collect();
    let mut cfg = AttackConfig::new(0.2, 4, Norm::Linf, Objective::Ce);
    cfg.random_start = true;
    let together = attack_batch(&params, &batch, &cfg, None, 100).unwrap();
    for (i, ex) in batch.iter().enumerate() {
        let alone = pgd_attack_indexed(&params, ex, &cfg, None, 100 + i as u64).unwrap();
        assert_eq!(alone, together[i]);
    }
}

#[test]
fn sign_ascent_makes_progress_on_most_samples() {
    for (norm, activation) in [(Norm::Linf, Activation::Tanh), (Norm::L2, Activation::Tanh), (Norm::Linf, Activation::Relu)] {
        let params = model(21, vec![5, 16, 4], activation);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 0.2;
        let steps = 10;
        let mut cfg = AttackConfig::new(eps, steps, norm, Objective::Ce);
        cfg.step_size = Some(eps / steps as f64);
        let n = 400;
        let improved = (0..n)
            .filter(|_| {
                let ex = example(&mut rng, 5, 4, [0.0, 1.0]);
                let adv = pgd_attack(&params, &ex, &cfg, None).unwrap();
                adv.objective_value >= adv.initial_objective_value
            })
            .count();
        assert!(improved * 100 >= 95 * n, "{norm:?}: {improved}/{n} improved");
    }
}

#[test]
fn zero_radius_is_the_identity() {
    let params = model(2, vec![2, 4, 3], Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for norm in [Norm::Linf, Norm::L2] {
        let mut cfg = AttackConfig::new(0.0, 20, norm, Objective::Ce);
        cfg.random_start = true;
        let ex = example(&mut rng, 2, 3, [0.0, 1.0]);
        let adv = pgd_attack(&params, &ex, &cfg, None).unwrap();
        assert_eq!(adv.x_adv, ex.input);
    }
}

#[test]
fn zero_one_cost_row_matches_probability_descent() {
    // Row κ of the cost is 0/1, so with λ = ∞ the transport objective is
    // 1 − ŷ_κ. Its input gradient must equal −∂ŷ_κ/∂x.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 4;
    for trial in 0..50 {
        let params = model(100 + trial, vec![3, 7, k], Activation::Tanh);
        let kappa = rng.random_range(0..k);
        let mut m = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let c = if i == kappa || j == kappa { 1.0 } else { rng.random_range(0.1..5.0) };
                m[i][j] = c;
                m[j][i] = c;
            }
        }
        let cost = CostMatrix::new(&m, 1.0).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let (value, grad) =
            objective_with_grad(&params, &x, kappa, Objective::Wasserstein, Some(&cost), f64::INFINITY).unwrap();
        let prob = |x: &[f64]| params.predict(x).unwrap().probs[kappa];
        assert!((value - (1.0 - prob(&x))).abs() < 1e-12);
        let h = 1e-6;
        let fd: Vec<f64> = (0..3)
            .map(|i| {
                let mut plus = x.clone();
                plus[i] += h;
                let mut minus = x.clone();
                minus[i] -= h;
                -(prob(&plus) - prob(&minus)) / (2.0 * h)
            })
            .collect();
        let dot: f64 = grad.iter().zip(&fd).map(|(a, b)| a * b).sum();
        let na = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na > 1e-9 {
            assert!(dot / (na * nb) > 1.0 - 1e-6, "trial {trial}: cosine {}", dot / (na * nb));
            let arg = |v: &[f64]| (0..3).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
            assert_eq!(arg(&grad), arg(&fd));
        }
    }
}
