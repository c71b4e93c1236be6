use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s3_core::gapsim::{
    mix, optimal_mix_ratio, residual_distribution, simulate_classifier_gap, simulate_ees_rounds, tv_distance,
    DiscreteDistribution, MixPolicy, Scenario,
};

fn dist(p: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::from_probs(p.to_vec()).unwrap()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Minimizes TV(p*add + (1-p)*s, d) over a grid of step 1e-4.
fn grid_oracle(d: &[f64], s: &[f64], add: &[f64]) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    for k in 0..=10_000 {
        let p = k as f64 / 10_000.0;
        let m: Vec<f64> = add.iter().zip(s).map(|(a, b)| p * a + (1.0 - p) * b).collect();
        let v = tv(&m, d);
        if v < best.1 {
            best = (p, v);
        }
    }
    best
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

#[test]
fn two_point_recovery() {
    let d = dist(&[0.5, 0.5]);
    let s = dist(&[0.8, 0.2]);
    let (add, mass) = residual_distribution(&d, &s).unwrap();
    assert_eq!(add.probs(), &[0.0, 1.0]);
    assert!((mass - 0.3).abs() < 1e-15);
    let (p, t) = optimal_mix_ratio(&d, &s, &add).unwrap();
    assert!((p - 0.375).abs() < 1e-6);
    assert_eq!(t, 0.0);
    let m = mix(&add, &s, p).unwrap();
    for (a, b) in m.probs().iter().zip(d.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_instances_converge_and_match_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let d = dist(&random_simplex(&mut rng, n));
        let s = dist(&random_simplex(&mut rng, n));
        let (add, _) = residual_distribution(&d, &s).unwrap();
        let (p, t) = optimal_mix_ratio(&d, &s, &add).unwrap();
        let (_, gt) = grid_oracle(d.probs(), s.probs(), add.probs());
        // The grid can only do worse than the exact optimum, and by at most
        // the TV slope (<= 1) times half a grid step.
        assert!(t <= gt + 1e-12 && gt - t <= 1e-6 + 5e-5, "p={p} t={t} grid={gt}");

        let trace = simulate_ees_rounds(&d, &s, 5, MixPolicy::OptimalP).unwrap();
        let tvs = trace.tvs();
        for w in tvs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
            if w[0] > 1e-9 {
                assert!(w[1] < w[0]);
            }
        }
    }
}

#[test]
fn grid_oracle_agrees_on_grid_aligned_instances() {
    // With D a rational mix on the grid, the optimum is on the grid too and
    // both methods must agree to 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let s = random_simplex(&mut rng, n);
        let add = random_simplex(&mut rng, n);
        let p_true = rng.random_range(1..10_000) as f64 / 10_000.0;
        let d: Vec<f64> = add.iter().zip(&s).map(|(a, b)| p_true * a + (1.0 - p_true) * b).collect();
        let (p, t) = optimal_mix_ratio(&dist(&d), &dist(&s), &dist(&add)).unwrap();
        let (gp, gt) = grid_oracle(&d, &s, &add);
        assert!((t - gt).abs() < 1e-6);
        assert!((p - gp).abs() < 1e-6, "p={p} grid={gp}");
    }
}

#[test]
fn fixed_policy_and_scenario_json() {
    let sc: Scenario = serde_json::from_str(
        r#"{"support":["a","b"],"P_D":[0.5,0.5],"P_S0":[0.8,0.2],"rounds":3,"policy":{"fixed_p":0.2}}"#,
    )
    .unwrap();
    let trace = sc.run().unwrap();
    // The residual is all on "b" while S over-weights "a", so P(a) shrinks
    // by 0.8 per round: 0.8, 0.64, 0.512, 0.4096 (the last overshoots).
    let tvs = trace.tvs();
    assert_eq!(tvs.len(), 4);
    for (v, want) in tvs.iter().zip([0.3, 0.14, 0.012, 0.0904]) {
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }
    assert!(trace.to_csv().starts_with("round,"));
}

#[test]
fn classifier_gap_matches_enumeration() {
    // S prefers y=0 everywhere; D flips x=1.
    let s = DiscreteDistribution::joint(&["0", "1"], &["pos", "neg"], &[&[0.4, 0.1], &[0.3, 0.2]]).unwrap();
    let d = DiscreteDistribution::joint(&["0", "1"], &["pos", "neg"], &[&[0.4, 0.1], &[0.1, 0.4]]).unwrap();
    let g = simulate_classifier_gap(&s, &d).unwrap();
    // Classifier says pos for both x; errors are (0,neg) and (1,neg).
    assert!((g.error_mass - 0.5).abs() < 1e-15);
    let expect = [0.0, 0.2, 0.0, 0.8];
    for (a, b) in g.error_dist.probs().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn tv_is_a_metric(a in prop::collection::vec(0.01f64..1.0, 2..8), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.len();
        let total: f64 = a.iter().sum();
        let p = dist(&a.iter().map(|v| v / total).collect::<Vec<_>>());
        let q = dist(&random_simplex(&mut rng, n));
        let r = dist(&random_simplex(&mut rng, n));
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((pq - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
        prop_assert!(pq <= tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn mixing_with_the_residual_never_hurts(seed in 0u64..5000, n in 2usize..8, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dist(&random_simplex(&mut rng, n));
        let s = dist(&random_simplex(&mut rng, n));
        let (add, mass) = residual_distribution(&d, &s).unwrap();
        prop_assert!((mass - tv_distance(&d, &s).unwrap()).abs() < 1e-12);
        let m = mix(&add, &s, p).unwrap();
        prop_assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (_, best) = optimal_mix_ratio(&d, &s, &add).unwrap();
        prop_assert!(best <= tv_distance(&m, &d).unwrap() + 1e-12);
        prop_assert!(best <= tv_distance(&d, &s).unwrap() + 1e-12);
    }
}
