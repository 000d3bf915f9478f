use gazebc::data::split;
use gazebc::eval::{
    completion_rate, evaluate, rollout, spl, wilcoxon_signed_rank, Controller, OracleController, PolicyController, RolloutResult,
    RolloutSettings, ZeroController,
};
use gazebc::oracle::OracleParams;
use gazebc::policy::{PolicyConfig, PolicyNetwork};
use gazebc::world::{sample_configurations, Configuration, SimSettings, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn test_configs(world: &WorldConfig) -> Vec<Configuration> {
    let all = sample_configurations(world, 200, 0).unwrap();
    let (_, test) = split(all.len(), 0.9, 0).unwrap();
    test.into_iter().map(|i| all[i]).collect()
}

#[test]
fn zero_policy_never_arrives() {
    let world = WorldConfig::default_world();
    let configs = test_configs(&world);
    let sim = SimSettings { timeout_steps: 100, ..Default::default() };
    let rs = evaluate(&mut ZeroController, &world, &configs, 1, &RolloutSettings::default(), &sim).unwrap();
    assert_eq!(rs.len(), 100);
    assert_eq!(completion_rate(&rs), 0.0);
    assert!(rs.iter().all(|r| r.path_length < 1e-9 && r.steps == 100));
}

#[test]
fn oracle_as_controller_is_competent_and_reproducible() {
    let world = WorldConfig::default_world();
    let configs = test_configs(&world);
    let sim = SimSettings::default();
    let settings = RolloutSettings::default();
    let mut ctrl = OracleController::new(&world, OracleParams::default(), sim);
    let a = evaluate(&mut ctrl, &world, &configs, 3, &settings, &sim).unwrap();
    let b = evaluate(&mut ctrl, &world, &configs, 3, &settings, &sim).unwrap();
    assert_eq!(a, b);
    assert!(completion_rate(&a) >= 95.0, "{}", completion_rate(&a));
    assert!(a.iter().filter(|r| r.success).all(|r| r.final_distance <= 5.0 && r.path_length > 0.0));
    let s = spl(&a).unwrap();
    assert!(s > 0.5 && s <= completion_rate(&a) / 100.0);
    // repeats start from different perturbed poses
    let c = evaluate(&mut ctrl, &world, &configs[..1], 4, &settings, &sim).unwrap();
    assert_ne!(c[0].path_length, c[1].path_length);
}

#[test]
fn untrained_policy_runs_closed_loop() {
    let world = WorldConfig::default_world();
    let configs = test_configs(&world);
    let net = PolicyNetwork::<f32>::init(PolicyConfig::default(), 0).unwrap();
    let mut ctrl = PolicyController::new(net);
    assert!(ctrl.needs_frames());
    let sim = SimSettings { timeout_steps: 20, ..Default::default() };
    let settings = RolloutSettings { repeats: 2, action_repeat: 3, ..Default::default() };
    let a = rollout(&mut ctrl, &world, &configs[0], 0, &settings, &sim).unwrap();
    let b = rollout(&mut ctrl, &world, &configs[0], 0, &settings, &sim).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|r| r.steps == 20 && r.path_length > 0.0));
}

/// Signed-rank p-value by listing every sign assignment.
fn brute_force_p(d: &[f64]) -> (usize, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return (0, 1.0);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let below = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let plus: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if plus.min(total - plus) <= observed {
            extreme += 1;
        }
    }
    (n, extreme as f64 / (1u64 << n) as f64)
}

#[test]
fn wilcoxon_matches_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.random_range(1..=12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-3..=3) as f64 }).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let (n_used, p) = brute_force_p(&d);
        assert_eq!((r.n, r.p_value), (n_used, p), "case {case}: {d:?}");
    }
    let (n, p) = brute_force_p(&[1.0, 2.0, 3.0, 4.0, -1.0]);
    assert_eq!((n, p), (5, 0.1875));
}

fn arb_result() -> impl Strategy<Value = RolloutResult> {
    (any::<bool>(), any::<bool>(), 0.5f64..100.0, 0.0f64..300.0).prop_map(|(success, collided, l, p)| RolloutResult {
        configuration: Configuration { start_index: 0, target_index: 1, initial_yaw: 0.0 },
        repeat: 0,
        success,
        collided,
        path_length: p,
        straight_line: l,
        steps: 1,
        final_distance: 0.0,
    })
}

proptest! {
    #[test]
    fn spl_is_bounded_by_completion(rs in proptest::collection::vec(arb_result(), 0..60)) {
        let s = spl(&rs).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(s <= completion_rate(&rs) / 100.0 + 1e-12);
    }

    #[test]
    fn rates_ignore_order(mut rs in proptest::collection::vec(arb_result(), 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let before = (completion_rate(&rs), gazebc::eval::collision_rate(&rs));
        rs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(before, (completion_rate(&rs), gazebc::eval::collision_rate(&rs)));
    }
}
