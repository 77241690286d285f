use proptest::prelude::*;
use trajval::linalg::Matrix;
use trajval::lqr::{Dataset, InitialState, PolicySpec, RolloutConfig, SystemSpec};
use trajval::metrics;
use trajval::policy_gradient::{char_fn, fisher_matrix, AgentVariant, CharFnConfig, VariantKind};
use trajval::shapley::*;

fn interacting(members: &[usize], fid: Fidelity) -> f64 {
    let s: f64 = members.iter().map(|&i| (i as f64 + 1.0).sqrt()).sum();
    let pair = if members.contains(&0) && members.contains(&3) {
        2.5
    } else {
        0.0
    };
    let v = s * s / 4.0 + pair;
    match fid {
        Fidelity::Proxy => 0.7 * v,
        Fidelity::Full => v,
    }
}

#[test]
fn mc_efficiency_within_three_se_across_seeds() {
    let game = FnGame {
        n: 8,
        f: interacting,
    };
    for seed in 0..6 {
        let r = shapley_mc_game(
            &game,
            &McConfig {
                n_permutations: 200,
                seed,
                fidelity: FidelityMode::Mixed {
                    proxy_fraction: 0.8,
                },
                antithetic: seed % 2 == 1,
            },
        )
        .unwrap();
        let e = &r.efficiency;
        assert!(
            e.residual.abs() <= 3.0 * e.se_total + 1e-12,
            "seed {seed}: {e:?}"
        );
        assert!((e.sum_shapley - e.target - e.residual).abs() < 1e-9);
    }
}

#[test]
fn exhaustive_permutations_are_exact() {
    let game = FnGame {
        n: 5,
        f: interacting,
    };
    let r = shapley_exact_game(&game, FidelityMode::Fixed(Fidelity::Full)).unwrap();
    assert!(r.efficiency.residual.abs() < 1e-12);
    let perms = all_permutations(5);
    let mc =
        shapley_over_permutations(&game, &perms, FidelityMode::Fixed(Fidelity::Full), 0).unwrap();
    for (a, b) in mc.players.iter().zip(&r.players) {
        assert!((a.shapley - b.shapley).abs() < 1e-12);
    }
}

#[test]
fn dummy_player_gets_zero() {
    // player 2 never changes the value
    let game = FnGame {
        n: 6,
        f: |m: &[usize], _: Fidelity| {
            let k = m.iter().filter(|&&i| i != 2).count() as f64;
            k * k + if m.contains(&0) { 1.0 } else { 0.0 }
        },
    };
    let r = shapley_mc_game(
        &game,
        &McConfig {
            n_permutations: 300,
            seed: 9,
            fidelity: FidelityMode::Fixed(Fidelity::Full),
            antithetic: false,
        },
    )
    .unwrap();
    let p = r.get(2).unwrap();
    assert!(p.shapley.abs() <= 3.0 * p.shapley_se + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn interchangeable_players_share_value(n in 3usize..8, a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64) {
        // players 0 and 1 enter only through how many of them are present
        let game = FnGame {
            n,
            f: move |m: &[usize], _: Fidelity| {
                let twins = m.iter().filter(|&&i| i < 2).count() as f64;
                let rest: f64 = m.iter().filter(|&&i| i >= 2).map(|&i| i as f64).sum();
                a * twins * twins + b * twins * rest + c * rest.sqrt()
            },
        };
        let r = shapley_exact_game(&game, FidelityMode::Fixed(Fidelity::Full)).unwrap();
        let (p0, p1) = (r.get(0).unwrap().shapley, r.get(1).unwrap().shapley);
        prop_assert!((p0 - p1).abs() <= 1e-12 * (1.0 + p0.abs()));
    }
}

#[test]
fn standard_error_shrinks_like_inverse_root_m() {
    let game = AdditiveGame {
        weights: vec![1.0, -2.0, 3.0, 0.5, 4.0],
        proxy_scale: 0.25,
    };
    let ms = [50usize, 100, 200, 400, 800, 1600, 3200];
    let pts: Vec<(f64, f64)> = ms
        .iter()
        .map(|&m| {
            let r = shapley_mc_game(
                &game,
                &McConfig {
                    n_permutations: m,
                    seed: 17,
                    fidelity: FidelityMode::Mixed {
                        proxy_fraction: 0.5,
                    },
                    antithetic: false,
                },
            )
            .unwrap();
            let mean_se =
                r.players.iter().map(|p| p.shapley_se).sum::<f64>() / r.players.len() as f64;
            ((m as f64).ln(), mean_se.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

fn small_dataset(seed: u64, n: usize) -> Dataset<f64> {
    let mut sys = SystemSpec::double_integrator();
    sys.horizon = 15;
    Dataset::generate(
        sys,
        PolicySpec::new(Matrix::zeros(1, 2), 0.5),
        RolloutConfig::new(InitialState::standard_normal(2), seed),
        n,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn char_fn_is_pure(seed in 0u64..1000, eval in any::<u64>(), mask in 1u32..255, whiten: bool) {
        let ds = small_dataset(seed, 8);
        let ids: Vec<usize> = (0..8).filter(|i| mask >> i & 1 == 1).collect();
        let mut rev = ids.clone();
        rev.reverse();
        let cfg = CharFnConfig { steps: 4, n_eval_rollouts: 5, ..CharFnConfig::paper() };
        let kind = if whiten { VariantKind::Whitened } else { VariantKind::Vanilla };
        let v = AgentVariant::for_dataset(kind, &ds).unwrap();
        let a = char_fn(&ds, &ids, &cfg, &v, eval).unwrap();
        let b = char_fn(&ds, &ids, &cfg, &v, eval).unwrap();
        let c = char_fn(&ds, &rev, &cfg, &v, eval).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn fisher_dominates_mean_information(seed in 0u64..1000, mask in 1u32..1023, sa in 0.1..2.0f64) {
        let ds = small_dataset(seed, 10);
        let ids: Vec<usize> = (0..10).filter(|i| mask >> i & 1 == 1).collect();
        let pol = PolicySpec::new(Matrix::zeros(1, 2), sa);
        let f = fisher_matrix(&ds, &ids, &pol).unwrap();
        let mut mean_info = Matrix::zeros(3, 3);
        for &i in &ids {
            mean_info.add_scaled_assign(&metrics::info_matrix(ds.get(i).unwrap()).unwrap(), 1.0 / ids.len() as f64);
        }
        let (lf, li) = (f.lambda_min(), mean_info.lambda_min());
        prop_assume!(li > 0.0);
        // interlacing gives c = 1/σ_a²
        let c = lf / li;
        prop_assert!(c >= (1.0 - 1e-9) / (sa * sa), "c = {}", c);
    }
}
