//! Discrete-time stochastic LQR plant driven by a linear-Gaussian controller.
//!
//! `x_{k+1} = A x_k + B u_k + w_k`, `w_k ~ N(0, σ_w² I)`, with `u_k = -K x_k + ε_k`.
//! The stored `ε_k` is everything added on top of the feedback term, so it includes
//! any sinusoidal dither used to diversify a generated dataset.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seed;

/// Any state component beyond this magnitude aborts the rollout.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// Total cost charged for a rollout that hit the overflow guard.
pub const DIVERGENCE_COST_CAP: f64 = 1e9;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SystemSpec<T: Scalar> {
    #[serde(rename = "A")]
    pub a: Matrix<T>,
    #[serde(rename = "B")]
    pub b: Matrix<T>,
    pub sigma_w: T,
    #[serde(rename = "Q")]
    pub q: Matrix<T>,
    #[serde(rename = "R")]
    pub r: Matrix<T>,
    #[serde(rename = "H")]
    pub horizon: usize,
}

impl<T: Scalar> SystemSpec<T> {
    /// Double integrator with `H = 100`, `σ_w = 0.1`, `Q = I₂`, `R = 0.1`.
    pub fn double_integrator() -> Self {
        Self {
            a: Matrix::from_f64_rows(&[&[1.0, 1.0], &[0.0, 1.0]]),
            b: Matrix::from_f64_rows(&[&[0.0], &[1.0]]),
            sigma_w: T::lit(0.1),
            q: Matrix::identity(2),
            r: Matrix::from_f64_rows(&[&[0.1]]),
            horizon: 100,
        }
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        if n == 0 || m == 0 {
            return Err(LabError::Config("empty state or input dimension".into()));
        }
        if self.a.shape() != (n, n) {
            return Err(LabError::Config(format!(
                "A is {:?}, expected square",
                self.a.shape()
            )));
        }
        if self.b.rows() != n {
            return Err(LabError::Config(format!(
                "B has {} rows, expected {n}",
                self.b.rows()
            )));
        }
        if self.q.shape() != (n, n) {
            return Err(LabError::Config(format!(
                "Q is {:?}, expected {n}x{n}",
                self.q.shape()
            )));
        }
        if self.r.shape() != (m, m) {
            return Err(LabError::Config(format!(
                "R is {:?}, expected {m}x{m}",
                self.r.shape()
            )));
        }
        if self.horizon == 0 {
            return Err(LabError::Config("horizon H must be at least 1".into()));
        }
        if !(self.sigma_w >= T::zero()) || !self.sigma_w.is_finite() {
            return Err(LabError::Config(
                "sigma_w must be finite and non-negative".into(),
            ));
        }
        for (name, mat) in [
            ("A", &self.a),
            ("B", &self.b),
            ("Q", &self.q),
            ("R", &self.r),
        ] {
            if !mat.all_finite() {
                return Err(LabError::Config(format!("{name} has non-finite entries")));
            }
        }
        let tol = T::lit(SYMMETRY_TOL);
        if !self.q.is_symmetric(tol) || self.q.lambda_min() < -tol * T::one().max(self.q.max_abs())
        {
            return Err(LabError::Config(
                "Q must be symmetric positive semidefinite".into(),
            ));
        }
        if !self.r.is_symmetric(tol) || !(self.r.lambda_min() > T::zero()) {
            return Err(LabError::Config(
                "R must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }

    /// `ℓ = xᵀQx + uᵀRu`.
    #[inline]
    pub fn stage_cost(&self, x: &[T], u: &[T]) -> T {
        self.q.quad_form(x) + self.r.quad_form(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PolicySpec<T: Scalar> {
    #[serde(rename = "K")]
    pub k: Matrix<T>,
    pub sigma_a: T,
}

impl<T: Scalar> PolicySpec<T> {
    pub fn new(k: Matrix<T>, sigma_a: T) -> Self {
        Self { k, sigma_a }
    }

    pub fn with_gain(&self, k: Matrix<T>) -> Self {
        Self {
            k,
            sigma_a: self.sigma_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_a > T::zero()) || !self.sigma_a.is_finite() {
            return Err(LabError::Config(
                "sigma_a must be finite and positive".into(),
            ));
        }
        if !self.k.all_finite() {
            return Err(LabError::Config("K has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn check_against(&self, sys: &SystemSpec<T>) -> Result<()> {
        let expected = (sys.input_dim(), sys.state_dim());
        if self.k.shape() != expected {
            return Err(LabError::Config(format!(
                "K is {:?}, expected {:?}",
                self.k.shape(),
                expected
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum InitialState<T: Scalar> {
    Fixed {
        x0: Vec<T>,
    },
    Gaussian {
        mean: Vec<T>,
        std: T,
    },
    /// Point `index` of a regular grid over `[-extent, extent]^n` with `per_axis`
    /// points per axis, enumerated in mixed radix (first axis fastest).
    Grid {
        extent: T,
        per_axis: usize,
        index: usize,
    },
}

impl<T: Scalar> InitialState<T> {
    pub fn standard_normal(n: usize) -> Self {
        Self::Gaussian {
            mean: vec![T::zero(); n],
            std: T::one(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Fixed { x0 } if x0.len() != n => Err(LabError::Config(format!(
                "x0 has {} entries, expected {n}",
                x0.len()
            ))),
            Self::Gaussian { mean, .. } if mean.len() != n => Err(LabError::Config(format!(
                "initial mean has {} entries, expected {n}",
                mean.len()
            ))),
            Self::Gaussian { std, .. } if !(*std >= T::zero()) => Err(LabError::Config(
                "initial-state std must be non-negative".into(),
            )),
            Self::Grid { per_axis, .. } if *per_axis == 0 => Err(LabError::Config(
                "grid needs at least one point per axis".into(),
            )),
            _ => Ok(()),
        }
    }

    fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        match self {
            Self::Fixed { x0 } => x0.clone(),
            Self::Gaussian { mean, std } => mean
                .iter()
                .map(|&mu| mu + *std * T::standard_normal(rng))
                .collect(),
            Self::Grid {
                extent,
                per_axis,
                index,
            } => {
                let mut rem = *index;
                (0..n)
                    .map(|_| {
                        let i = rem % per_axis;
                        rem /= per_axis;
                        if *per_axis == 1 {
                            T::zero()
                        } else {
                            let frac = T::from_usize_lossy(i) / T::from_usize_lossy(per_axis - 1);
                            -*extent + T::lit(2.0) * *extent * frac
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Additive input excitation on top of the Gaussian exploration noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum Excitation<T: Scalar> {
    None,
    /// Sinusoid with frequency (cycles per step) drawn uniformly from
    /// `[freq_lo, freq_hi]` and a uniform phase per input channel, both drawn
    /// from a stream derived from the rollout seed.
    Dither {
        amplitude: T,
        freq_lo: T,
        freq_hi: T,
    },
    /// A fully resolved sinusoid, one phase per input channel.
    Sinusoid {
        amplitude: T,
        frequency: T,
        phase: Vec<T>,
    },
}

impl<T: Scalar> Excitation<T> {
    /// Replaces a `Dither` template by the sinusoid it produces for `seed`.
    pub fn resolve(&self, seed: u64, m: usize) -> Self {
        match self {
            Self::Dither {
                amplitude,
                freq_lo,
                freq_hi,
            } => {
                let mut rng = seed::rng(seed::derive(seed, &[seed::label("dither")]));
                let u: f64 = rng.random();
                let frequency = *freq_lo + (*freq_hi - *freq_lo) * T::lit(u);
                let phase = (0..m)
                    .map(|_| T::lit(2.0 * PI * rng.random::<f64>()))
                    .collect();
                Self::Sinusoid {
                    amplitude: *amplitude,
                    frequency,
                    phase,
                }
            }
            other => other.clone(),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Dither {
                amplitude,
                freq_lo,
                freq_hi,
            } => {
                if !(*amplitude >= T::zero()) {
                    return Err(LabError::Config(
                        "dither amplitude must be non-negative".into(),
                    ));
                }
                if !(*freq_lo <= *freq_hi) {
                    return Err(LabError::Config("dither frequency range is empty".into()));
                }
                Ok(())
            }
            Self::Sinusoid {
                amplitude, phase, ..
            } => {
                if !(*amplitude >= T::zero()) {
                    return Err(LabError::Config(
                        "dither amplitude must be non-negative".into(),
                    ));
                }
                if phase.len() != m {
                    return Err(LabError::Config(format!(
                        "sinusoid has {} phases, expected {m}",
                        phase.len()
                    )));
                }
                Ok(())
            }
        }
    }

    #[inline]
    fn value(&self, k: usize, channel: usize) -> T {
        match self {
            Self::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                let arg = T::lit(2.0 * PI) * *frequency * T::from_usize_lossy(k) + phase[channel];
                *amplitude * arg.sin()
            }
            _ => T::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RolloutConfig<T: Scalar> {
    pub initial_state: InitialState<T>,
    pub excitation: Excitation<T>,
    pub seed: u64,
}

impl<T: Scalar> RolloutConfig<T> {
    pub fn new(initial_state: InitialState<T>, seed: u64) -> Self {
        Self {
            initial_state,
            excitation: Excitation::None,
            seed,
        }
    }
}

/// Source of the stochastic terms in a rollout.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Sampled,
    /// Forces `w_k = 0` and Gaussian `ε_k = 0`; used by analytic tests only.
    Silent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Trajectory<T: Scalar> {
    pub id: usize,
    pub seed: u64,
    /// `x_0 .. x_H`
    pub states: Vec<Vec<T>>,
    /// `u_0 .. u_{H-1}`
    pub actions: Vec<Vec<T>>,
    /// `ε_0 .. ε_{H-1}`
    #[serde(default)]
    pub noises: Vec<Vec<T>>,
    /// `r_k = -ℓ_k`
    pub rewards: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    #[inline]
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn has_noises(&self) -> bool {
        !self.actions.is_empty() && self.noises.len() == self.actions.len()
    }

    pub fn total_cost(&self) -> T {
        -self.rewards.iter().copied().sum::<T>()
    }

    /// Checks sequence lengths and per-step vector sizes.
    pub fn validate_shape(&self) -> Result<()> {
        let h = self.horizon();
        let (n, m) = (self.state_dim(), self.input_dim());
        if h == 0 {
            return Err(LabError::Dimension(format!(
                "trajectory {} is empty",
                self.id
            )));
        }
        if self.states.len() != h + 1 || self.rewards.len() != h {
            return Err(LabError::Dimension(format!(
                "trajectory {}: {} states, {} actions, {} rewards",
                self.id,
                self.states.len(),
                h,
                self.rewards.len()
            )));
        }
        if self.states.iter().any(|x| x.len() != n)
            || self.actions.iter().any(|u| u.len() != m)
            || self.noises.iter().any(|e| e.len() != m)
        {
            return Err(LabError::Dimension(format!(
                "trajectory {} has inconsistent vector sizes",
                self.id
            )));
        }
        if !self.noises.is_empty() && self.noises.len() != h {
            return Err(LabError::Dimension(format!(
                "trajectory {} has {} noise records for horizon {h}",
                self.id,
                self.noises.len()
            )));
        }
        Ok(())
    }
}

/// Per-step observer for the shared simulation loop.
trait StepSink<T> {
    fn step(&mut self, x: &[T], u: &[T], eps: &[T], reward: T);
    fn finish(&mut self, x_final: &[T]);
}

struct Recorder<T> {
    states: Vec<Vec<T>>,
    actions: Vec<Vec<T>>,
    noises: Vec<Vec<T>>,
    rewards: Vec<T>,
}

impl<T: Copy> StepSink<T> for Recorder<T> {
    fn step(&mut self, x: &[T], u: &[T], eps: &[T], reward: T) {
        self.states.push(x.to_vec());
        self.actions.push(u.to_vec());
        self.noises.push(eps.to_vec());
        self.rewards.push(reward);
    }

    fn finish(&mut self, x_final: &[T]) {
        self.states.push(x_final.to_vec());
    }
}

struct CostAccumulator<T> {
    cost: T,
}

impl<T: Scalar> StepSink<T> for CostAccumulator<T> {
    #[inline]
    fn step(&mut self, _x: &[T], _u: &[T], _eps: &[T], reward: T) {
        self.cost = self.cost - reward;
    }

    fn finish(&mut self, _x_final: &[T]) {}
}

fn simulate<T: Scalar, S: StepSink<T>>(
    sys: &SystemSpec<T>,
    pol: &PolicySpec<T>,
    cfg: &RolloutConfig<T>,
    mode: NoiseMode,
    sink: &mut S,
) -> Result<()> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    pol.check_against(sys)?;
    if sys.a.shape() != (n, n) || sys.b.rows() != n {
        return Err(LabError::Config("A/B dimensions inconsistent".into()));
    }
    cfg.initial_state.validate(n)?;
    let excitation = cfg.excitation.resolve(cfg.seed, m);
    excitation.validate(m)?;

    let mut rng = seed::rng(cfg.seed);
    let guard = T::lit(OVERFLOW_GUARD);
    let mut x = cfg.initial_state.draw(n, &mut rng);
    if x.iter().any(|v| !v.is_finite() || v.abs() > guard) {
        return Err(LabError::Divergence { step: 0 });
    }
    let mut eps = vec![T::zero(); m];
    let mut u = vec![T::zero(); m];
    let mut ax = vec![T::zero(); n];
    let mut bu = vec![T::zero(); n];

    for k in 0..sys.horizon {
        for (j, e) in eps.iter_mut().enumerate() {
            let gauss = match mode {
                NoiseMode::Sampled => pol.sigma_a * T::standard_normal(&mut rng),
                NoiseMode::Silent => T::zero(),
            };
            *e = gauss + excitation.value(k, j);
        }
        pol.k.mul_vec_into(&x, &mut u);
        for (ui, &ei) in u.iter_mut().zip(&eps) {
            *ui = ei - *ui;
        }
        let reward = -sys.stage_cost(&x, &u);
        sink.step(&x, &u, &eps, reward);

        sys.a.mul_vec_into(&x, &mut ax);
        sys.b.mul_vec_into(&u, &mut bu);
        for i in 0..n {
            let w = match mode {
                NoiseMode::Sampled => sys.sigma_w * T::standard_normal(&mut rng),
                NoiseMode::Silent => T::zero(),
            };
            x[i] = ax[i] + bu[i] + w;
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > guard) {
            return Err(LabError::Divergence { step: k + 1 });
        }
    }
    sink.finish(&x);
    Ok(())
}

/// Simulates one trajectory. Deterministic in `(sys, pol, cfg)`.
pub fn rollout<T: Scalar>(
    sys: &SystemSpec<T>,
    pol: &PolicySpec<T>,
    cfg: &RolloutConfig<T>,
) -> Result<Trajectory<T>> {
    rollout_with(sys, pol, cfg, NoiseMode::Sampled)
}

#[doc(hidden)]
pub fn rollout_with<T: Scalar>(
    sys: &SystemSpec<T>,
    pol: &PolicySpec<T>,
    cfg: &RolloutConfig<T>,
    mode: NoiseMode,
) -> Result<Trajectory<T>> {
    let h = sys.horizon;
    let mut rec = Recorder {
        states: Vec::with_capacity(h + 1),
        actions: Vec::with_capacity(h),
        noises: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
    };
    simulate(sys, pol, cfg, mode, &mut rec)?;
    Ok(Trajectory {
        id: 0,
        seed: cfg.seed,
        states: rec.states,
        actions: rec.actions,
        noises: rec.noises,
        rewards: rec.rewards,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate<T> {
    /// Mean total cost `Σ_k ℓ_k` over rollouts.
    pub mean: T,
    pub std_err: T,
    /// Rollouts that hit the overflow guard and were charged `DIVERGENCE_COST_CAP`.
    pub diverged: usize,
    pub n_rollouts: usize,
}

/// Monte Carlo estimate of `J(K)` from `x_0 ~ N(0, I)`.
pub fn estimate_cost<T: Scalar>(
    sys: &SystemSpec<T>,
    pol: &PolicySpec<T>,
    n_rollouts: usize,
    seed: u64,
) -> Result<CostEstimate<T>> {
    let init = InitialState::standard_normal(sys.state_dim());
    estimate_cost_with(sys, pol, &init, n_rollouts, seed, NoiseMode::Sampled)
}

#[doc(hidden)]
pub fn estimate_cost_with<T: Scalar>(
    sys: &SystemSpec<T>,
    pol: &PolicySpec<T>,
    init: &InitialState<T>,
    n_rollouts: usize,
    seed: u64,
    mode: NoiseMode,
) -> Result<CostEstimate<T>> {
    if n_rollouts == 0 {
        return Err(LabError::Config("n_rollouts must be at least 1".into()));
    }
    let cap = T::lit(DIVERGENCE_COST_CAP);
    let mut costs = Vec::with_capacity(n_rollouts);
    let mut diverged = 0;
    for j in 0..n_rollouts {
        let cfg = RolloutConfig::new(
            init.clone(),
            seed::derive(seed, &[seed::label("eval-rollout"), j as u64]),
        );
        let mut acc = CostAccumulator { cost: T::zero() };
        match simulate(sys, pol, &cfg, mode, &mut acc) {
            Ok(()) => costs.push(acc.cost.min(cap)),
            Err(LabError::Divergence { .. }) => {
                diverged += 1;
                costs.push(cap);
            }
            Err(e) => return Err(e),
        }
    }
    let (mean, std_err) = mean_and_se(&costs);
    Ok(CostEstimate {
        mean,
        std_err,
        diverged,
        n_rollouts,
    })
}

pub(crate) fn mean_and_se<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    if xs.len() < 2 {
        return (mean, T::zero());
    }
    let var =
        xs.iter().map(|&c| (c - mean) * (c - mean)).sum::<T>() / T::from_usize_lossy(xs.len() - 1);
    (mean, (var / n).sqrt())
}

/// A generated trajectory set together with the plant and generating controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dataset<T: Scalar> {
    pub system: SystemSpec<T>,
    pub policy: PolicySpec<T>,
    /// Generation template; `seed` holds the dataset seed.
    pub generation: RolloutConfig<T>,
    pub trajectories: Vec<Trajectory<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Draws `n` trajectories; trajectory `i` uses seed `derive(seed, ["trajectory", i])`
    /// and, for grid initial states, grid point `i`.
    pub fn generate(
        system: SystemSpec<T>,
        policy: PolicySpec<T>,
        template: RolloutConfig<T>,
        n: usize,
    ) -> Result<Self> {
        system.validate()?;
        policy.validate()?;
        policy.check_against(&system)?;
        let base = template.seed;
        let trajectories = (0..n)
            .map(|i| {
                let mut cfg = template.clone();
                cfg.seed = seed::derive(base, &[seed::label("trajectory"), i as u64]);
                if let InitialState::Grid { index, .. } = &mut cfg.initial_state {
                    *index = i;
                }
                rollout(&system, &policy, &cfg).map(|mut t| {
                    t.id = i;
                    t
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            system,
            policy,
            generation: template,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.trajectories.iter().map(|t| t.id).collect()
    }

    /// Looks up a trajectory by its id.
    pub fn get(&self, id: usize) -> Option<&Trajectory<T>> {
        match self.trajectories.get(id) {
            Some(t) if t.id == id => Some(t),
            _ => self.trajectories.iter().find(|t| t.id == id),
        }
    }

    /// Rollout configuration that regenerates trajectory `traj` with fresh noise:
    /// same initial state, no dither (excitation is a generation-time device), noise
    /// stream from `noise_seed`.
    pub fn replay_config(&self, traj: &Trajectory<T>, noise_seed: u64) -> RolloutConfig<T> {
        RolloutConfig::new(
            InitialState::Fixed {
                x0: traj.states[0].clone(),
            },
            noise_seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.policy.validate()?;
        self.policy.check_against(&self.system)?;
        let (n, m) = (self.system.state_dim(), self.system.input_dim());
        for t in &self.trajectories {
            t.validate_shape()?;
            if t.state_dim() != n || t.input_dim() != m {
                return Err(LabError::Dimension(format!(
                    "trajectory {} does not match the system dimensions",
                    t.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s).map_err(|e| LabError::Config(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    /// One row per (trajectory, step): `id, step, x0.., u0.., eps0.., reward`.
    /// The terminal state row carries empty input and reward cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.system.state_dim();
        let m = self.system.input_dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "step".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend((0..m).map(|i| format!("eps{i}")));
        header.push("reward".into());
        w.write_record(&header).map_err(csv_err)?;
        for t in &self.trajectories {
            for (k, x) in t.states.iter().enumerate() {
                let mut row = vec![t.id.to_string(), k.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                if k < t.horizon() {
                    row.extend(t.actions[k].iter().map(|v| v.to_string()));
                    match t.noises.get(k) {
                        Some(e) => row.extend(e.iter().map(|v| v.to_string())),
                        None => row.extend(std::iter::repeat_n(String::new(), m)),
                    }
                    row.push(t.rewards[k].to_string());
                } else {
                    row.extend(std::iter::repeat_n(String::new(), 2 * m + 1));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> LabError {
    LabError::Config(format!("csv: {e}"))
}
