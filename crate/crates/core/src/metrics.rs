//! Per-trajectory information quantities.
//!
//! With `z_k = [x_k; u_k]`, the information matrix is `I = Σ_{k<H} z_k z_kᵀ`. Its
//! smallest eigenvalue is the persistence of excitation (PE), its trace the energy,
//! and its leading `n x n` block the state second-moment matrix `S_x`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::lqr::Trajectory;
use crate::scalar::Scalar;

/// Relative slack (times energy) allowed in the spectral chain.
pub const SPECTRAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct InfoSummary<T: Scalar> {
    pub info_matrix: Matrix<T>,
    pub pe: T,
    pub energy: T,
    pub state_cov: Matrix<T>,
    pub lambda_max_info: T,
    pub lambda_max_state: T,
}

pub fn info_matrix<T: Scalar>(traj: &Trajectory<T>) -> Result<Matrix<T>> {
    traj.validate_shape()?;
    let n = traj.state_dim();
    let d = n + traj.input_dim();
    let mut info = Matrix::zeros(d, d);
    let mut z = vec![T::zero(); d];
    for (x, u) in traj.states.iter().zip(&traj.actions) {
        z[..n].copy_from_slice(x);
        z[n..].copy_from_slice(u);
        // symmetric rank-one update, upper triangle then mirror
        for i in 0..d {
            for j in i..d {
                info[(i, j)] = info[(i, j)] + z[i] * z[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            info[(i, j)] = info[(j, i)];
        }
    }
    Ok(info)
}

/// `λ_min(I)`, floored at zero.
pub fn pe<T: Scalar>(traj: &Trajectory<T>) -> Result<T> {
    Ok(info_matrix(traj)?.lambda_min().max(T::zero()))
}

pub fn energy<T: Scalar>(traj: &Trajectory<T>) -> Result<T> {
    Ok(info_matrix(traj)?.trace())
}

/// `S_x = Σ_{k<H} x_k x_kᵀ`.
pub fn state_cov<T: Scalar>(traj: &Trajectory<T>) -> Result<Matrix<T>> {
    Ok(info_matrix(traj)?.leading_block(traj.state_dim()))
}

pub fn summarize<T: Scalar>(traj: &Trajectory<T>) -> Result<InfoSummary<T>> {
    let info = info_matrix(traj)?;
    Ok(summary_from_info(info, traj.state_dim()))
}

pub fn summary_from_info<T: Scalar>(info: Matrix<T>, n: usize) -> InfoSummary<T> {
    let eig = info.sym_eigenvalues();
    let state_cov = info.leading_block(n);
    InfoSummary {
        pe: eig[0].max(T::zero()),
        energy: info.trace(),
        lambda_max_info: *eig.last().expect("nonempty spectrum"),
        lambda_max_state: state_cov.lambda_max(),
        state_cov,
        info_matrix: info,
    }
}

/// The chain `λ_max(S_x) ≤ λ_max(I) ≤ E − (d−1)·PE`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCheck<T> {
    pub lambda_max_state: T,
    pub lambda_max_info: T,
    pub bound: T,
    pub holds: bool,
}

impl<T: Scalar> InfoSummary<T> {
    pub fn dim(&self) -> usize {
        self.info_matrix.rows()
    }

    pub fn spectral_check(&self) -> SpectralCheck<T> {
        let d = T::from_usize_lossy(self.dim());
        let bound = self.energy - (d - T::one()) * self.pe;
        let slack = T::lit(SPECTRAL_TOL) * self.energy.abs().max(T::min_positive_value());
        let holds = self.lambda_max_state <= self.lambda_max_info + slack
            && self.lambda_max_info <= bound + slack;
        SpectralCheck {
            lambda_max_state: self.lambda_max_state,
            lambda_max_info: self.lambda_max_info,
            bound,
            holds,
        }
    }
}

pub fn check_spectral_chain<T: Scalar>(traj: &Trajectory<T>) -> Result<SpectralCheck<T>> {
    Ok(summarize(traj)?.spectral_check())
}

/// Quantile bins of equal size (differing by at most one) in `(energy, id)` order.
/// Returns the bin index for each input position.
pub fn energy_bins<T: Scalar>(energies: &[T], ids: &[usize], n_bins: usize) -> Result<Vec<usize>> {
    if energies.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    if energies.len() != ids.len() {
        return Err(LabError::IdMismatch(format!(
            "{} energies for {} ids",
            energies.len(),
            ids.len()
        )));
    }
    let n = energies.len();
    let bins = n_bins.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        energies[a]
            .partial_cmp(&energies[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    let mut out = vec![0; n];
    for (rank, &pos) in order.iter().enumerate() {
        out[pos] = rank * bins / n;
    }
    Ok(out)
}

/// Energy deciles: ten bins, or one per trajectory for datasets smaller than ten.
pub fn energy_deciles<T: Scalar>(trajs: &[Trajectory<T>]) -> Result<Vec<usize>> {
    let energies = trajs.iter().map(energy).collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = trajs.iter().map(|t| t.id).collect();
    energy_bins(&energies, &ids, 10)
}
