//! REINFORCE gradients, the per-trajectory variance proxy, whitening and the Fisher
//! preconditioner.
//!
//! Gains are `m x n`. Whenever a gain-shaped quantity is flattened, column-major
//! `vec(·)` is used so that `vec(ε xᵀ) = x ⊗ ε` and the covariance structure reads
//! `S ⊗ I_m`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::lqr::{Dataset, PolicySpec, Trajectory};
use crate::metrics;
use crate::scalar::Scalar;

/// Relative ridge added to the pooled state covariance before whitening.
pub const WHITENING_RIDGE: f64 = 1e-6;
/// Absolute floor on the whitening ridge, keeping the transform finite for
/// degenerate (constant-state) datasets.
pub const RIDGE_FLOOR: f64 = 1e-12;
/// Default relative Fisher damping: `damping = coef · tr(F) / dim`.
pub const FISHER_DAMPING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GradEstimate<T: Scalar> {
    pub grad: Matrix<T>,
    pub source_ids: Vec<usize>,
}

/// `G_k = Σ_{j ≥ k} r_j`.
pub fn returns_to_go<T: Scalar>(rewards: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for (k, &r) in rewards.iter().enumerate().rev() {
        acc = acc + r;
        g[k] = acc;
    }
    g
}

fn check_noises<T: Scalar>(traj: &Trajectory<T>) -> Result<()> {
    traj.validate_shape()?;
    if !traj.has_noises() {
        return Err(LabError::MissingNoise { id: traj.id });
    }
    Ok(())
}

/// `ĝ = −(1/σ_a²) Σ_k G_k ε_k x_kᵀ`, with `x_k` optionally replaced by its
/// whitened image. With `u = −Kx + ε` and `r = −ℓ` its expectation is the gradient
/// of the expected return, `−∇J`. Training still applies `K ← K − η·ĝ`; with
/// element-wise clipping far below `|ĝ|` that step follows the sign of the typical
/// (median) estimate rather than the mean.
fn score_gradient<T: Scalar>(
    traj: &Trajectory<T>,
    sigma_a: T,
    whitener: Option<&Whitener<T>>,
) -> Result<Matrix<T>> {
    check_noises(traj)?;
    let n = traj.state_dim();
    let m = traj.input_dim();
    let g = returns_to_go(&traj.rewards);
    let mut grad = Matrix::zeros(m, n);
    let mut xw = vec![T::zero(); n];
    for k in 0..traj.horizon() {
        let x = match whitener {
            Some(w) => {
                w.apply_into(&traj.states[k], &mut xw);
                &xw[..]
            }
            None => &traj.states[k][..],
        };
        grad.add_outer_assign(&traj.noises[k], x, g[k]);
    }
    Ok(grad.scale(-T::one() / (sigma_a * sigma_a)))
}

/// REINFORCE estimate for the policy that generated `traj`.
pub fn reinforce_grad<T: Scalar>(
    traj: &Trajectory<T>,
    pol: &PolicySpec<T>,
) -> Result<GradEstimate<T>> {
    Ok(GradEstimate {
        grad: score_gradient(traj, pol.sigma_a, None)?,
        source_ids: vec![traj.id],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct VarianceProxy<T: Scalar> {
    pub sigma_hat: Matrix<T>,
    pub lambda_max: T,
}

fn variance_proxy_inner<T: Scalar>(
    traj: &Trajectory<T>,
    sigma_a: T,
    whitener: Option<&Whitener<T>>,
) -> Result<VarianceProxy<T>> {
    traj.validate_shape()?;
    let n = traj.state_dim();
    let m = traj.input_dim();
    let g = returns_to_go(&traj.rewards);
    let mut weighted = Matrix::zeros(n, n);
    let mut xw = vec![T::zero(); n];
    for k in 0..traj.horizon() {
        let x = match whitener {
            Some(w) => {
                w.apply_into(&traj.states[k], &mut xw);
                &xw[..]
            }
            None => &traj.states[k][..],
        };
        weighted.add_outer_assign(x, x, g[k] * g[k]);
    }
    let weighted = weighted.scale(T::one() / (sigma_a * sigma_a));
    // λ_max(S ⊗ I_m) = λ_max(S)
    let lambda_max = weighted.lambda_max();
    Ok(VarianceProxy {
        sigma_hat: weighted.kron(&Matrix::identity(m)),
        lambda_max,
    })
}

/// `Σ̂ = (1/σ_a²) Σ_k Ĝ_k² (x_k x_kᵀ) ⊗ I_m`.
pub fn variance_proxy<T: Scalar>(
    traj: &Trajectory<T>,
    pol: &PolicySpec<T>,
) -> Result<VarianceProxy<T>> {
    variance_proxy_inner(traj, pol.sigma_a, None)
}

/// Variance proxy as seen by `variant`: whitened agents use transformed states.
pub fn variance_proxy_for<T: Scalar>(
    traj: &Trajectory<T>,
    pol: &PolicySpec<T>,
    variant: &AgentVariant<T>,
) -> Result<VarianceProxy<T>> {
    variance_proxy_inner(traj, pol.sigma_a, variant.whitening.as_ref())
}

/// Affine state whitening `x' = W (x − μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Whitener<T: Scalar> {
    pub mean: Vec<T>,
    pub transform: Matrix<T>,
}

impl<T: Scalar> Whitener<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![T::zero(); n],
            transform: Matrix::identity(n),
        }
    }

    #[inline]
    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        let n = self.mean.len();
        for i in 0..n {
            let row = self.transform.row(i);
            let mut s = T::zero();
            for j in 0..n {
                s = s + row[j] * (x[j] - self.mean[j]);
            }
            out[i] = s;
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.transform.shape() != (n, n) {
            return Err(LabError::Config(
                "whitening transform has wrong shape".into(),
            ));
        }
        if !self.transform.is_symmetric(T::lit(1e-9)) || !(self.transform.lambda_min() > T::zero())
        {
            return Err(LabError::Config(
                "whitening transform must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }
}

/// Pooled mean and (population) covariance of the states `x_0..x_{H-1}`.
pub fn pooled_state_moments<T: Scalar>(trajs: &[&Trajectory<T>]) -> Result<(Vec<T>, Matrix<T>)> {
    let first = trajs.first().ok_or(LabError::EmptyDataset)?;
    let n = first.state_dim();
    let mut mean = vec![T::zero(); n];
    let mut count = 0usize;
    for t in trajs {
        for x in &t.states[..t.horizon()] {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m = *m + v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(LabError::EmptyDataset);
    }
    let c = T::from_usize_lossy(count);
    for m in &mut mean {
        *m = *m / c;
    }
    let mut cov = Matrix::zeros(n, n);
    let mut d = vec![T::zero(); n];
    for t in trajs {
        for x in &t.states[..t.horizon()] {
            for i in 0..n {
                d[i] = x[i] - mean[i];
            }
            cov.add_outer_assign(&d, &d, T::one());
        }
    }
    Ok((mean, cov.scale(T::one() / c)))
}

/// Fits `W = (Σ̂_x + ρ I)^{-1/2}` with `ρ = max(1e-6 · tr(Σ̂_x)/n, 1e-12)`.
pub fn fit_whitener<T: Scalar>(trajs: &[Trajectory<T>]) -> Result<Whitener<T>> {
    if trajs.len() < 2 {
        return Err(LabError::Config(
            "whitening needs at least two trajectories".into(),
        ));
    }
    let refs: Vec<&Trajectory<T>> = trajs.iter().collect();
    let (mean, cov) = pooled_state_moments(&refs)?;
    let n = mean.len();
    let ridge =
        (T::lit(WHITENING_RIDGE) * cov.trace() / T::from_usize_lossy(n)).max(T::lit(RIDGE_FLOOR));
    let transform = cov
        .symmetrize()
        .add(&Matrix::identity(n).scale(ridge))
        .inv_sqrt_spd()?;
    Ok(Whitener { mean, transform })
}

/// `F_S = (1/σ_a²) mean_{τ∈S}[S_x(τ)] ⊗ I_m`.
pub fn fisher_matrix<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    pol: &PolicySpec<T>,
) -> Result<Matrix<T>> {
    let members = lookup(dataset, ids)?;
    fisher_from_members(&members, pol.sigma_a)
}

pub(crate) fn fisher_from_members<T: Scalar>(
    members: &[&Trajectory<T>],
    sigma_a: T,
) -> Result<Matrix<T>> {
    let first = members.first().ok_or(LabError::EmptyCoalition)?;
    let n = first.state_dim();
    let m = first.input_dim();
    let mut mean_sx = Matrix::zeros(n, n);
    for t in members {
        mean_sx.add_scaled_assign(&metrics::state_cov(t)?, T::one());
    }
    let scale = T::one() / (T::from_usize_lossy(members.len()) * sigma_a * sigma_a);
    Ok(mean_sx.scale(scale).kron(&Matrix::identity(m)))
}

/// Solves `(F + δ I) vec(g') = vec(g)` with `δ = coef · tr(F) / dim`.
pub fn precondition<T: Scalar>(
    grad: &Matrix<T>,
    fisher: &Matrix<T>,
    damping_coef: T,
) -> Result<Matrix<T>> {
    let (m, n) = grad.shape();
    let dim = m * n;
    if fisher.shape() != (dim, dim) {
        return Err(LabError::Dimension(format!(
            "Fisher is {:?}, gradient has {dim} entries",
            fisher.shape()
        )));
    }
    let delta = (damping_coef * fisher.trace() / T::from_usize_lossy(dim)).max(T::lit(RIDGE_FLOOR));
    let damped = fisher.add(&Matrix::identity(dim).scale(delta));
    let v = damped.solve_spd(&grad.vec_col_major())?;
    Ok(Matrix::from_vec_col_major(m, n, &v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Vanilla,
    Whitened,
    #[serde(alias = "npg")]
    NaturalGradient,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Whitened => "whitened",
            Self::NaturalGradient => "natural_gradient",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "whitened" | "whitening" => Ok(Self::Whitened),
            "npg" | "natural_gradient" | "natural-gradient" => Ok(Self::NaturalGradient),
            other => Err(LabError::Config(format!("unknown agent variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How an agent turns trajectories into update directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentVariant<T: Scalar> {
    pub kind: VariantKind,
    pub whitening: Option<Whitener<T>>,
    /// Relative damping coefficient for the natural-gradient solve.
    pub fisher_damping: T,
}

impl<T: Scalar> AgentVariant<T> {
    pub fn vanilla() -> Self {
        Self {
            kind: VariantKind::Vanilla,
            whitening: None,
            fisher_damping: T::zero(),
        }
    }

    pub fn whitened(whitener: Whitener<T>) -> Self {
        Self {
            kind: VariantKind::Whitened,
            whitening: Some(whitener),
            fisher_damping: T::zero(),
        }
    }

    pub fn natural_gradient(damping_coef: T) -> Self {
        Self {
            kind: VariantKind::NaturalGradient,
            whitening: None,
            fisher_damping: damping_coef,
        }
    }

    /// Builds the variant for `dataset`, fitting the whitener when needed.
    pub fn for_dataset(kind: VariantKind, dataset: &Dataset<T>) -> Result<Self> {
        Ok(match kind {
            VariantKind::Vanilla => Self::vanilla(),
            VariantKind::Whitened => Self::whitened(fit_whitener(&dataset.trajectories)?),
            VariantKind::NaturalGradient => Self::natural_gradient(T::lit(FISHER_DAMPING)),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.kind, &self.whitening) {
            (VariantKind::Whitened, Some(w)) => w.validate(),
            (VariantKind::Whitened, None) => Err(LabError::Config(
                "whitened variant without a whitener".into(),
            )),
            (_, Some(_)) => Err(LabError::Config(
                "whitening supplied for a non-whitened variant".into(),
            )),
            _ if !(self.fisher_damping >= T::zero()) => Err(LabError::Config(
                "fisher damping must be non-negative".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Per-trajectory update direction before any Fisher preconditioning.
    pub fn trajectory_grad(&self, traj: &Trajectory<T>, pol: &PolicySpec<T>) -> Result<Matrix<T>> {
        score_gradient(traj, pol.sigma_a, self.whitening.as_ref())
    }
}

pub(crate) fn lookup<'a, T: Scalar>(
    dataset: &'a Dataset<T>,
    ids: &[usize],
) -> Result<Vec<&'a Trajectory<T>>> {
    if ids.is_empty() {
        return Err(LabError::EmptyCoalition);
    }
    ids.iter()
        .map(|&id| {
            dataset
                .get(id)
                .ok_or_else(|| LabError::IdMismatch(format!("no trajectory with id {id}")))
        })
        .collect()
}

/// Mean of the (variant-transformed) per-trajectory gradients over the coalition,
/// preconditioned by `(F_S + δI)^{-1}` for the natural-gradient agent.
pub fn coalition_grad<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    pol: &PolicySpec<T>,
    variant: &AgentVariant<T>,
) -> Result<GradEstimate<T>> {
    let members = lookup(dataset, ids)?;
    let (m, n) = (dataset.system.input_dim(), dataset.system.state_dim());
    let mut mean = Matrix::zeros(m, n);
    let w = T::one() / T::from_usize_lossy(members.len());
    for t in &members {
        mean.add_scaled_assign(&variant.trajectory_grad(t, pol)?, w);
    }
    let grad = match variant.kind {
        VariantKind::NaturalGradient => {
            let f = fisher_from_members(&members, pol.sigma_a)?;
            precondition(&mean, &f, variant.fisher_damping)?
        }
        _ => mean,
    };
    Ok(GradEstimate {
        grad,
        source_ids: ids.to_vec(),
    })
}
