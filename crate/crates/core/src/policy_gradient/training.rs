//! Adam-driven REINFORCE training on a coalition and the coalition value `v(S)`.
//!
//! Training is on-policy: at step `t` one coalition member is drawn (stream keyed by
//! the coalition and `t`) and regenerated under the current gain from its own
//! initial state and dither, with noise keyed by the member's seed and `t`. The
//! member's gradient is clipped element-wise, fed to Adam, and the gain is clipped
//! to the box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::lqr::{estimate_cost, rollout, CostEstimate, Dataset, Trajectory};
use crate::policy_gradient::gradient::{
    coalition_grad, fisher_from_members, lookup, precondition, AgentVariant, VariantKind,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::shapley::{CoalitionGame, Fidelity};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamParams<T> {
    fn default() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Everything that defines `v(S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CharFnConfig<T: Scalar> {
    /// Training steps `T`.
    pub steps: usize,
    /// Learning rate.
    pub eta: T,
    #[serde(default)]
    pub adam: AdamParams<T>,
    /// Element-wise gradient clip.
    pub grad_clip: T,
    /// Per-entry gain box `[lo, hi]`.
    pub gain_clip: [T; 2],
    pub n_eval_rollouts: usize,
    /// Probability that a coalition evaluation uses the one-step proxy.
    pub proxy_fraction: f64,
    /// Initial gain; `None` means the zero matrix.
    #[serde(default)]
    pub k0: Option<Matrix<T>>,
    #[serde(default)]
    pub base_seed: u64,
}

impl<T: Scalar> CharFnConfig<T> {
    /// T = 50, η = 1e-4, clip ±0.01, gains in [-1, 1], 50 evaluation rollouts, 80 % proxy.
    pub fn paper() -> Self {
        Self {
            steps: 50,
            eta: T::lit(1e-4),
            adam: AdamParams::default(),
            grad_clip: T::lit(0.01),
            gain_clip: [-T::one(), T::one()],
            n_eval_rollouts: 50,
            proxy_fraction: 0.8,
            k0: None,
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= T::zero()) || !self.eta.is_finite() {
            return Err(LabError::Config(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.proxy_fraction) {
            return Err(LabError::Config("proxy_fraction must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= T::zero()) {
            return Err(LabError::Config("grad_clip must be non-negative".into()));
        }
        if !(self.gain_clip[0] <= self.gain_clip[1]) {
            return Err(LabError::Config("gain_clip interval is empty".into()));
        }
        if self.n_eval_rollouts == 0 {
            return Err(LabError::Config(
                "n_eval_rollouts must be at least 1".into(),
            ));
        }
        let b1 = self.adam.beta1;
        let b2 = self.adam.beta2;
        if !(b1 >= T::zero() && b1 < T::one() && b2 >= T::zero() && b2 < T::one()) {
            return Err(LabError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam.eps > T::zero()) {
            return Err(LabError::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_gain(&self, m: usize, n: usize) -> Result<Matrix<T>> {
        match &self.k0 {
            Some(k) if k.shape() != (m, n) => Err(LabError::Config(format!(
                "K0 is {:?}, expected {m}x{n}",
                k.shape()
            ))),
            Some(k) => Ok(k.clone()),
            None => Ok(Matrix::zeros(m, n)),
        }
    }

    fn clip_grad(&self, g: &Matrix<T>) -> Matrix<T> {
        let c = self.grad_clip;
        g.map(|v| v.max(-c).min(c))
    }

    fn clip_gain(&self, k: &mut Matrix<T>) {
        let [lo, hi] = self.gain_clip;
        for v in k.as_mut_slice() {
            *v = v.max(lo).min(hi);
        }
    }
}

struct Adam<T> {
    params: AdamParams<T>,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: AdamParams<T>, dim: usize) -> Self {
        Self {
            params,
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [T], grad: &[T], lr: T) {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = T::one() - beta1.powi(self.t);
        let c2 = T::one() - beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (T::one() - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (T::one() - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TraceRow<T: Scalar> {
    pub step: usize,
    pub j_estimate: Option<T>,
    /// Gain entries in row-major order.
    pub gain: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainOutcome<T: Scalar> {
    pub gain: Matrix<T>,
    pub trace: Vec<TraceRow<T>>,
    /// Steps whose regenerated rollout hit the overflow guard (no update applied).
    pub diverged_steps: usize,
}

/// Optional cost evaluation along the training trace.
#[derive(Clone, Copy, Debug)]
pub struct TraceEval {
    pub every: usize,
    pub n_rollouts: usize,
    pub seed: u64,
}

/// Members ordered by `(seed, id)` plus a key that depends only on their seeds, so
/// that content-identical duplicates produce identical training streams.
fn ordered_members<'a, T: Scalar>(
    dataset: &'a Dataset<T>,
    ids: &[usize],
) -> Result<(Vec<&'a Trajectory<T>>, u64)> {
    let mut members = lookup(dataset, ids)?;
    members.sort_by_key(|t| (t.seed, t.id));
    let seeds: Vec<u64> = members.iter().map(|t| t.seed).collect();
    Ok((members, seed::multiset_key(&seeds)))
}

pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
) -> Result<TrainOutcome<T>> {
    train_traced(dataset, ids, cfg, variant, None)
}

pub fn train_traced<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    trace_eval: Option<TraceEval>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    variant.validate()?;
    let sys = &dataset.system;
    let (m, n) = (sys.input_dim(), sys.state_dim());
    let (members, key) = ordered_members(dataset, ids)?;
    let fisher = match variant.kind {
        VariantKind::NaturalGradient => {
            Some(fisher_from_members(&members, dataset.policy.sigma_a)?)
        }
        _ => None,
    };

    let mut gain = cfg.initial_gain(m, n)?;
    let mut adam = Adam::new(cfg.adam, m * n);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut diverged_steps = 0;
    let record = |step: usize, gain: &Matrix<T>, trace: &mut Vec<TraceRow<T>>| -> Result<()> {
        let j_estimate = match trace_eval {
            Some(te) if te.every > 0 && (step % te.every == 0 || step == cfg.steps) => {
                let pol = dataset.policy.with_gain(gain.clone());
                Some(estimate_cost(sys, &pol, te.n_rollouts, te.seed)?.mean)
            }
            _ => None,
        };
        trace.push(TraceRow {
            step,
            j_estimate,
            gain: gain.as_slice().to_vec(),
        });
        Ok(())
    };
    record(0, &gain, &mut trace)?;

    for t in 0..cfg.steps {
        let mut pick = seed::rng(seed::derive(
            cfg.base_seed,
            &[seed::label("pick"), key, t as u64],
        ));
        let member = members[pick.random_range(0..members.len())];
        let noise_seed = seed::derive(
            cfg.base_seed,
            &[seed::label("reroll"), member.seed, t as u64],
        );
        let pol = dataset.policy.with_gain(gain.clone());
        let fresh = match rollout(sys, &pol, &dataset.replay_config(member, noise_seed)) {
            Ok(tr) => tr,
            Err(LabError::Divergence { .. }) => {
                diverged_steps += 1;
                record(t + 1, &gain, &mut trace)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut g = variant.trajectory_grad(&fresh, &pol)?;
        if let Some(f) = &fisher {
            g = precondition(&g, f, variant.fisher_damping)?;
        }
        let g = cfg.clip_grad(&g);
        adam.step(gain.as_mut_slice(), g.as_slice(), cfg.eta);
        cfg.clip_gain(&mut gain);
        record(t + 1, &gain, &mut trace)?;
    }
    Ok(TrainOutcome {
        gain,
        trace,
        diverged_steps,
    })
}

/// One coalition evaluation with the gain it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Evaluation<T: Scalar> {
    pub value: T,
    pub cost: CostEstimate<T>,
    pub gain: Matrix<T>,
    pub fidelity: Fidelity,
}

/// The trajectory-coalition game on one dataset under one agent variant.
///
/// `v(∅) = −Ĵ(K0)`; the proxy fidelity evaluates `−Ĵ(K0 − η·clip(g_S(K0)))` using the
/// stored trajectories; full fidelity evaluates `−Ĵ(K_T(S))`. All evaluations share
/// `eval_seed`, so coalitions are compared on common random numbers.
#[derive(Clone, Copy, Debug)]
pub struct LqrGame<'a, T: Scalar> {
    pub dataset: &'a Dataset<T>,
    pub cfg: &'a CharFnConfig<T>,
    pub variant: &'a AgentVariant<T>,
    pub eval_seed: u64,
}

impl<'a, T: Scalar> LqrGame<'a, T> {
    pub fn new(
        dataset: &'a Dataset<T>,
        cfg: &'a CharFnConfig<T>,
        variant: &'a AgentVariant<T>,
        eval_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        cfg.initial_gain(dataset.system.input_dim(), dataset.system.state_dim())?;
        if dataset.is_empty() {
            return Err(LabError::EmptyDataset);
        }
        Ok(Self {
            dataset,
            cfg,
            variant,
            eval_seed,
        })
    }

    fn k0(&self) -> Matrix<T> {
        self.cfg
            .initial_gain(
                self.dataset.system.input_dim(),
                self.dataset.system.state_dim(),
            )
            .expect("validated in LqrGame::new")
    }

    pub fn evaluate(&self, ids: &[usize], fidelity: Fidelity) -> Result<Evaluation<T>> {
        let k0 = self.k0();
        let gain = if ids.is_empty() {
            k0
        } else {
            match fidelity {
                Fidelity::Proxy => {
                    let pol0 = self.dataset.policy.with_gain(k0.clone());
                    let g = coalition_grad(self.dataset, ids, &pol0, self.variant)?;
                    let mut k = k0;
                    k.add_scaled_assign(&self.cfg.clip_grad(&g.grad), -self.cfg.eta);
                    self.cfg.clip_gain(&mut k);
                    k
                }
                Fidelity::Full => train(self.dataset, ids, self.cfg, self.variant)?.gain,
            }
        };
        let pol = self.dataset.policy.with_gain(gain.clone());
        let cost = estimate_cost(
            &self.dataset.system,
            &pol,
            self.cfg.n_eval_rollouts,
            self.eval_seed,
        )?;
        Ok(Evaluation {
            value: -cost.mean,
            cost,
            gain,
            fidelity,
        })
    }

    pub fn value(&self, ids: &[usize], fidelity: Fidelity) -> Result<T> {
        Ok(self.evaluate(ids, fidelity)?.value)
    }

    /// Fidelity drawn from a Bernoulli(proxy_fraction) keyed by the coalition.
    pub fn sampled_fidelity(&self, ids: &[usize]) -> Result<Fidelity> {
        let key = if ids.is_empty() {
            0
        } else {
            ordered_members(self.dataset, ids)?.1
        };
        let u: f64 = seed::rng(seed::derive(
            self.eval_seed,
            &[seed::label("fidelity"), key],
        ))
        .random();
        Ok(Fidelity::draw(u, self.cfg.proxy_fraction))
    }

    /// `v(S)` with its own seeded fidelity draw.
    pub fn char_fn(&self, ids: &[usize]) -> Result<T> {
        let fidelity = self.sampled_fidelity(ids)?;
        self.value(ids, fidelity)
    }
}

impl<T: Scalar> CoalitionGame for LqrGame<'_, T> {
    fn n_players(&self) -> usize {
        self.dataset.len()
    }

    fn player_ids(&self) -> Vec<usize> {
        self.dataset.ids()
    }

    fn value(&self, members: &[usize], fidelity: Fidelity) -> Result<f64> {
        let ids: Vec<usize> = members
            .iter()
            .map(|&p| self.dataset.trajectories[p].id)
            .collect();
        Ok(LqrGame::value(self, &ids, fidelity)?.as_f64())
    }
}

/// `v(S)` for a coalition of trajectory ids, fidelity drawn from `proxy_fraction`.
pub fn char_fn<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    eval_seed: u64,
) -> Result<T> {
    LqrGame::new(dataset, cfg, variant, eval_seed)?.char_fn(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{InitialState, PolicySpec, RolloutConfig, SystemSpec};

    fn dataset(h: usize, n: usize) -> Dataset<f64> {
        let mut sys = SystemSpec::double_integrator();
        sys.horizon = h;
        Dataset::generate(
            sys,
            PolicySpec::new(Matrix::zeros(1, 2), 0.5),
            RolloutConfig::new(InitialState::standard_normal(2), 21),
            n,
        )
        .unwrap()
    }

    fn tiny_cfg() -> CharFnConfig<f64> {
        CharFnConfig {
            steps: 5,
            n_eval_rollouts: 4,
            ..CharFnConfig::paper()
        }
    }

    #[test]
    fn zero_steps_returns_initial_gain() {
        let ds = dataset(8, 3);
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        cfg.k0 = Some(Matrix::from_f64_rows(&[&[0.2, 0.3]]));
        let out = train(&ds, &[0, 1], &cfg, &AgentVariant::vanilla()).unwrap();
        assert_eq!(out.gain, Matrix::from_f64_rows(&[&[0.2, 0.3]]));
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn zero_clip_freezes_gain() {
        let ds = dataset(8, 3);
        let mut cfg = tiny_cfg();
        cfg.grad_clip = 0.0;
        cfg.eta = 0.5;
        let out = train(&ds, &[0, 1, 2], &cfg, &AgentVariant::vanilla()).unwrap();
        assert_eq!(out.gain, Matrix::zeros(1, 2));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamParams::<f64>::default(), 2);
        let mut theta = vec![0.0, 0.0];
        adam.step(&mut theta, &[0.01, -0.01], 1e-4);
        assert!((theta[0] + 1e-4).abs() < 1e-9);
        assert!((theta[1] - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn gain_stays_in_box() {
        let ds = dataset(8, 3);
        let mut cfg = tiny_cfg();
        cfg.eta = 10.0;
        cfg.gain_clip = [-0.05, 0.05];
        cfg.steps = 10;
        let out = train(&ds, &[0, 1, 2], &cfg, &AgentVariant::vanilla()).unwrap();
        assert!(out.gain.as_slice().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn empty_coalition_value_is_initial_cost() {
        let ds = dataset(8, 3);
        let cfg = tiny_cfg();
        let v = AgentVariant::vanilla();
        let game = LqrGame::new(&ds, &cfg, &v, 5).unwrap();
        let pol = ds.policy.with_gain(Matrix::zeros(1, 2));
        let j0 = estimate_cost(&ds.system, &pol, cfg.n_eval_rollouts, 5)
            .unwrap()
            .mean;
        assert_eq!(game.value(&[], Fidelity::Full).unwrap(), -j0);
        assert_eq!(game.char_fn(&[]).unwrap(), -j0);
    }

    #[test]
    fn zero_step_proxy_is_flat() {
        let ds = dataset(8, 4);
        let mut cfg = tiny_cfg();
        cfg.proxy_fraction = 1.0;
        cfg.eta = 0.0;
        let v = AgentVariant::vanilla();
        let empty = char_fn(&ds, &[], &cfg, &v, 9).unwrap();
        for ids in [vec![0], vec![1, 3], vec![0, 1, 2, 3]] {
            assert_eq!(char_fn(&ds, &ids, &cfg, &v, 9).unwrap(), empty);
        }
    }

    #[test]
    fn char_fn_is_deterministic() {
        let ds = dataset(10, 4);
        let mut cfg = tiny_cfg();
        cfg.proxy_fraction = 0.5;
        let v = AgentVariant::vanilla();
        for ids in [vec![0, 2], vec![1, 2, 3]] {
            let a = char_fn(&ds, &ids, &cfg, &v, 4).unwrap();
            let b = char_fn(&ds, &ids, &cfg, &v, 4).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn natural_gradient_and_whitened_train() {
        let ds = dataset(10, 4);
        let cfg = tiny_cfg();
        for kind in [VariantKind::Whitened, VariantKind::NaturalGradient] {
            let v = AgentVariant::for_dataset(kind, &ds).unwrap();
            let out = train(&ds, &[0, 1, 2, 3], &cfg, &v).unwrap();
            assert!(out.gain.all_finite());
            assert_ne!(out.gain, Matrix::zeros(1, 2));
        }
    }

    #[test]
    fn trace_records_costs_when_requested() {
        let ds = dataset(8, 2);
        let cfg = tiny_cfg();
        let te = TraceEval {
            every: 2,
            n_rollouts: 3,
            seed: 1,
        };
        let out = train_traced(&ds, &[0, 1], &cfg, &AgentVariant::vanilla(), Some(te)).unwrap();
        assert_eq!(out.trace.len(), cfg.steps + 1);
        assert!(out.trace[0].j_estimate.is_some());
        assert!(out.trace[1].j_estimate.is_none());
        assert!(out.trace[cfg.steps].j_estimate.is_some());
    }
}
