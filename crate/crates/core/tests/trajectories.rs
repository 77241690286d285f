use proptest::prelude::*;
use trajval::linalg::Matrix;
use trajval::lqr::{
    estimate_cost, rollout, Excitation, InitialState, PolicySpec, RolloutConfig, SystemSpec,
    Trajectory,
};
use trajval::metrics;

fn system(h: usize) -> SystemSpec<f64> {
    let mut s = SystemSpec::double_integrator();
    s.horizon = h;
    s
}

fn traj(h: usize, k: [f64; 2], sigma_a: f64, amp: f64, seed: u64) -> Trajectory<f64> {
    let mut cfg = RolloutConfig::new(InitialState::standard_normal(2), seed);
    if amp > 0.0 {
        cfg.excitation = Excitation::Dither {
            amplitude: amp,
            freq_lo: 0.01,
            freq_hi: 0.25,
        };
    }
    let pol = PolicySpec::new(Matrix::from_f64_rows(&[&k]), sigma_a);
    rollout(&system(h), &pol, &cfg).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollout_is_deterministic(h in 1usize..60, k0 in 0.0..1.0f64, k1 in 0.0..1.5f64, seed: u64, amp in 0.0..1.0f64) {
        let a = traj(h, [k0, k1], 0.5, amp, seed);
        let b = traj(h, [k0, k1], 0.5, amp, seed);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn stored_rewards_and_actions_are_consistent(h in 1usize..60, k0 in 0.0..1.0f64, k1 in 0.0..1.5f64, sa in 0.01..2.0f64, amp in 0.0..1.0f64, seed: u64) {
        let sys = system(h);
        let t = traj(h, [k0, k1], sa, amp, seed);
        prop_assert_eq!(t.states.len(), h + 1);
        for k in 0..h {
            let (x, u) = (&t.states[k], &t.actions[k]);
            prop_assert!(rel(-sys.stage_cost(x, u), t.rewards[k]) <= 1e-12);
            let resid = u[0] + k0 * x[0] + k1 * x[1] - t.noises[k][0];
            prop_assert!(resid.abs() <= 1e-12 * (1.0 + u[0].abs()), "residual {}", resid);
        }
    }

    #[test]
    fn spectral_chain_and_energy_bounds(h in 1usize..80, k0 in 0.0..1.0f64, k1 in 0.0..1.5f64, amp in 0.0..2.0f64, seed: u64) {
        let t = traj(h, [k0, k1], 0.5, amp, seed);
        let s = metrics::summarize(&t).unwrap();
        prop_assert!(s.pe >= 0.0);
        prop_assert!(s.energy >= 3.0 * s.pe * (1.0 - 1e-12));
        prop_assert!(s.spectral_check().holds);
    }

    #[test]
    fn info_matrix_is_sum_of_outer_products(h in 1usize..40, seed: u64) {
        let t = traj(h, [0.2, 0.5], 0.5, 0.3, seed);
        let mut brute = Matrix::zeros(3, 3);
        for (x, u) in t.states.iter().zip(&t.actions) {
            let z = [x[0], x[1], u[0]];
            brute.add_outer_assign(&z, &z, 1.0);
        }
        let info = metrics::info_matrix(&t).unwrap();
        prop_assert!(info.sub(&brute).frobenius_norm() <= 1e-10 * brute.frobenius_norm());
    }

    #[test]
    fn metrics_scale_quadratically(h in 2usize..40, c in 0.01..100.0f64, seed: u64) {
        let t = traj(h, [0.2, 0.5], 0.5, 0.5, seed);
        let mut scaled = t.clone();
        for v in scaled.states.iter_mut().chain(scaled.actions.iter_mut()) {
            v.iter_mut().for_each(|e| *e *= c);
        }
        let (pe, e) = (metrics::pe(&t).unwrap(), metrics::energy(&t).unwrap());
        let (pe2, e2) = (metrics::pe(&scaled).unwrap(), metrics::energy(&scaled).unwrap());
        prop_assert!(rel(e2, c * c * e) <= 1e-9);
        // the smallest eigenvalue carries absolute error of order eps·E
        prop_assert!((pe2 - c * c * pe).abs() <= 1e-9 * c * c * e);
    }
}

#[test]
fn process_noise_raises_cost() {
    let pol = PolicySpec::new(Matrix::from_f64_rows(&[&[0.3, 0.8]]), 0.5);
    let loud = system(30);
    let mut quiet = loud.clone();
    quiet.sigma_w = 0.0;
    let diffs: Vec<f64> = (0..40u64)
        .map(|s| {
            estimate_cost(&loud, &pol, 50, s).unwrap().mean
                - estimate_cost(&quiet, &pol, 50, s).unwrap().mean
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        mean > 0.0 && mean > 2.0 * sd / n.sqrt(),
        "mean {mean}, sd {sd}"
    );
}
