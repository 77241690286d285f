//! One-dimensional escape from a poor basin.
//!
//! The projected learning dynamics are `s_{t+1} = s_t − η f'(s_t) + √η ζ_t` with
//! `ζ_t ~ N(0, σ²)`, run until `s` leaves `[0, L]`. In the diffusion limit the
//! probability of leaving through `L` is
//!
//! ```text
//! p(s) = ∫₀ˢ e^{2(f(t)−f(0))/σ²} dt / ∫₀ᴸ e^{2(f(t)−f(0))/σ²} dt
//! ```

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lqr::csv_err;
use crate::scalar::Scalar;
use crate::seed;
use crate::shapley::{CoalitionGame, Fidelity};

pub const STEP_CAP: u64 = 10_000_000;
/// Capped-path fraction above which an estimate carries a warning.
pub const CAP_WARN_FRACTION: f64 = 0.01;
/// Capped-path fraction above which simulation fails.
pub const CAP_ERROR_FRACTION: f64 = 0.5;
pub const QUAD_REL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// `f(s) = −(β/2)(s − s*)²`: the process is pushed away from `s*`. The exit
    /// probability from `s0 < s*` rises with `σ²` when `s* ≥ L/2`.
    SaddleQuadratic {
        beta: f64,
        s_star: f64,
    },
    /// `f(s) = h (1 − ((s − c)/w)²)²`: minima at `c ± w`, barrier `h` at `c`.
    DoubleWell {
        h: f64,
        width: f64,
        center: f64,
    },
}

impl Drift {
    pub fn f(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::SaddleQuadratic { beta, s_star } => -0.5 * beta * (s - s_star).powi(2),
            Self::DoubleWell { h, width, center } => {
                let z = (s - center) / width;
                h * (1.0 - z * z).powi(2)
            }
        }
    }

    pub fn df(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::SaddleQuadratic { beta, s_star } => -beta * (s - s_star),
            Self::DoubleWell { h, width, center } => {
                let z = (s - center) / width;
                -4.0 * h * z * (1.0 - z * z) / width
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleProblem {
    pub drift: Drift,
    #[serde(rename = "L")]
    pub l: f64,
    pub s0: f64,
    pub eta: f64,
    pub sigma2: f64,
}

impl SaddleProblem {
    /// `L = 1`, `s* = 1/2`, start at `1/4`, `η = 1e-3`, `β = 1`.
    pub fn canonical(sigma2: f64) -> Self {
        Self {
            drift: Drift::SaddleQuadratic {
                beta: 1.0,
                s_star: 0.5,
            },
            l: 1.0,
            s0: 0.25,
            eta: 1e-3,
            sigma2,
        }
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        Self {
            sigma2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(LabError::Config("L must be positive".into()));
        }
        if !(self.s0 > 0.0 && self.s0 < self.l) {
            return Err(LabError::Config(
                "s0 must lie strictly inside (0, L)".into(),
            ));
        }
        if !(self.eta > 0.0) || !(self.sigma2 > 0.0) {
            return Err(LabError::Config("eta and sigma2 must be positive".into()));
        }
        match self.drift {
            Drift::DoubleWell { width, .. } if !(width > 0.0) => Err(LabError::Config(
                "double-well width must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `η ≤ 0.01·L²/σ²` fails: the step is not small relative to the domain.
    pub fn step_warning(&self) -> Option<String> {
        let limit = 0.01 * self.l * self.l / self.sigma2;
        (self.eta > limit).then(|| format!("eta = {} exceeds 0.01·L²/σ² = {limit}", self.eta))
    }
}

/// Adaptive Simpson on `[a, b]` with absolute tolerance `tol`.
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

const PANELS: usize = 64;

/// Integral of `e^{g(t) − g_max}` over `[a, b]`, in panels, to relative tolerance.
fn scaled_integral<G: Fn(f64) -> f64>(g: &G, gmax: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = |t: f64| (g(t) - gmax).exp();
    let width = (b - a) / PANELS as f64;
    // crude magnitude for the relative target
    let coarse: f64 = (0..=4 * PANELS)
        .map(|i| h(a + (b - a) * i as f64 / (4 * PANELS) as f64))
        .sum::<f64>()
        * (b - a)
        / (4 * PANELS + 1) as f64;
    let tol = (QUAD_REL_TOL * coarse).max(f64::MIN_POSITIVE) / PANELS as f64 * 0.1;
    (0..PANELS)
        .map(|k| simpson(&h, a + k as f64 * width, a + (k + 1) as f64 * width, tol))
        .sum()
}

/// Diffusion-limit exit-right probability from `s0`.
pub fn bvp_exit_probability(prob: &SaddleProblem) -> Result<f64> {
    prob.validate()?;
    bvp_at(prob, prob.s0)
}

/// Same as [`bvp_exit_probability`] for an arbitrary start `s` in `[0, L]`.
pub fn bvp_at(prob: &SaddleProblem, s: f64) -> Result<f64> {
    if !(0.0..=prob.l).contains(&s) {
        return Err(LabError::Config("start outside [0, L]".into()));
    }
    if matches!(prob.drift, Drift::Zero) {
        return Ok(s / prob.l);
    }
    let f0 = prob.drift.f(0.0);
    let g = |t: f64| 2.0 * (prob.drift.f(t) - f0) / prob.sigma2;
    // shift by a grid maximum so the integrand never overflows
    let gmax = (0..=4096)
        .map(|i| g(prob.l * i as f64 / 4096.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let left = scaled_integral(&g, gmax, 0.0, s);
    let right = scaled_integral(&g, gmax, s, prob.l);
    let total = left + right;
    if !(total > 0.0) || !total.is_finite() {
        return Err(LabError::Numeric(
            "exit-probability normalizer vanished".into(),
        ));
    }
    Ok((left / total).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub p_hat: f64,
    pub se: f64,
    pub p_bvp: f64,
    pub n_paths: usize,
    /// Paths that hit the step cap; excluded from `p_hat`.
    pub n_capped: usize,
    pub warnings: Vec<String>,
}

enum Exit {
    Right,
    Left,
    Capped,
}

fn run_path(prob: &SaddleProblem, path_seed: u64) -> Exit {
    let mut rng = seed::rng(path_seed);
    let sd = (prob.eta * prob.sigma2).sqrt();
    let mut s = prob.s0;
    for _ in 0..STEP_CAP {
        s += -prob.eta * prob.drift.df(s) + sd * f64::standard_normal(&mut rng);
        if s > prob.l {
            return Exit::Right;
        }
        if s < 0.0 {
            return Exit::Left;
        }
    }
    Exit::Capped
}

/// Monte Carlo exit-right frequency with binomial standard error.
pub fn simulate_exit(prob: &SaddleProblem, n_paths: usize, seed: u64) -> Result<EscapeEstimate> {
    prob.validate()?;
    if n_paths < 100 {
        return Err(LabError::Config("need at least 100 paths".into()));
    }
    let exits: Vec<Exit> = (0..n_paths)
        .into_par_iter()
        .map(|i| run_path(prob, seed::derive(seed, &[seed::label("path"), i as u64])))
        .collect();
    let right = exits.iter().filter(|e| matches!(e, Exit::Right)).count();
    let capped = exits.iter().filter(|e| matches!(e, Exit::Capped)).count();
    let frac_capped = capped as f64 / n_paths as f64;
    if frac_capped > CAP_ERROR_FRACTION {
        return Err(LabError::Numeric(format!(
            "{capped} of {n_paths} paths hit the step cap; eta or sigma2 is misconfigured"
        )));
    }
    let mut warnings: Vec<String> = prob.step_warning().into_iter().collect();
    if frac_capped > CAP_WARN_FRACTION {
        warnings.push(format!("{capped} of {n_paths} paths hit the step cap"));
    }
    let done = (n_paths - capped) as f64;
    let p_hat = right as f64 / done;
    Ok(EscapeEstimate {
        p_hat,
        se: (p_hat * (1.0 - p_hat) / done).sqrt(),
        p_bvp: bvp_exit_probability(prob)?,
        n_paths,
        n_capped: capped,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma2: f64,
    pub p_hat: f64,
    pub se: f64,
    pub p_bvp: f64,
    /// Sign of `dp_bvp/dσ²` from a central difference: −1, 0 or 1.
    pub dp_sign: i8,
    pub n_capped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub bvp_strictly_increasing: bool,
    /// No consecutive MC drop larger than two combined standard errors.
    pub mc_consistent_with_increase: bool,
}

impl SweepTable {
    /// Columns `sigma2, p_hat, se, p_bvp`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma2", "p_hat", "se", "p_bvp"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.sigma2.to_string(),
                r.p_hat.to_string(),
                r.se.to_string(),
                r.p_bvp.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| LabError::Numeric(e.to_string()))
    }
}

pub fn monotonicity_sweep(
    template: &SaddleProblem,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<SweepTable> {
    if grid.len() < 3 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LabError::Config(
            "σ² grid must be strictly ascending with at least 3 points".into(),
        ));
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, &s2)| {
            let prob = template.with_sigma2(s2);
            let est = simulate_exit(
                &prob,
                n_paths,
                seed::derive(seed, &[seed::label("sigma2"), i as u64]),
            )?;
            let h = 1e-3 * s2;
            let dp = bvp_exit_probability(&prob.with_sigma2(s2 + h))?
                - bvp_exit_probability(&prob.with_sigma2(s2 - h))?;
            Ok(SweepRow {
                sigma2: s2,
                p_hat: est.p_hat,
                se: est.se,
                p_bvp: est.p_bvp,
                dp_sign: if dp > 0.0 {
                    1
                } else if dp < 0.0 {
                    -1
                } else {
                    0
                },
                n_capped: est.n_capped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bvp_strictly_increasing = rows.windows(2).all(|w| w[1].p_bvp > w[0].p_bvp);
    let mc_consistent_with_increase = rows
        .windows(2)
        .all(|w| w[1].p_hat - w[0].p_hat > -2.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt());
    Ok(SweepTable {
        rows,
        bvp_strictly_increasing,
        mc_consistent_with_increase,
    })
}

/// Two-level game: `v(S) = p(σ²_S)·v_good + (1 − p(σ²_S))·v_poor`, with `σ²_S` the
/// mean variance of the members and `p` the exit probability of `template` at that
/// noise level; `v(∅) = v_poor`.
#[derive(Clone, Debug)]
pub struct VarianceEscapeGame {
    pub variances: Vec<f64>,
    pub template: SaddleProblem,
    pub v_good: f64,
    pub v_poor: f64,
}

impl CoalitionGame for VarianceEscapeGame {
    fn n_players(&self) -> usize {
        self.variances.len()
    }

    fn value(&self, members: &[usize], _: Fidelity) -> Result<f64> {
        if members.is_empty() {
            return Ok(self.v_poor);
        }
        let s2 = members.iter().map(|&i| self.variances[i]).sum::<f64>() / members.len() as f64;
        let p = bvp_exit_probability(&self.template.with_sigma2(s2))?;
        Ok(p * self.v_good + (1.0 - p) * self.v_poor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::erf::erf;

    /// Closed form for the inverted parabola: `e^{2f/σ²}` is a Gaussian kernel.
    fn saddle_erf(beta: f64, s_star: f64, l: f64, s: f64, sigma2: f64) -> f64 {
        let k = beta.sqrt() / sigma2.sqrt();
        let lo = erf(-s_star * k);
        (erf((s - s_star) * k) - lo) / (erf((l - s_star) * k) - lo)
    }

    #[test]
    fn zero_drift_is_linear() {
        let mut p = SaddleProblem::canonical(0.3);
        p.drift = Drift::Zero;
        p.s0 = 0.3;
        assert!((bvp_exit_probability(&p).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn symmetric_drift_from_center() {
        let mut p = SaddleProblem::canonical(0.2);
        p.s0 = 0.5;
        assert!((bvp_exit_probability(&p).unwrap() - 0.5).abs() < 1e-9);
        p.drift = Drift::DoubleWell {
            h: 0.3,
            width: 0.5,
            center: 0.5,
        };
        assert!((bvp_exit_probability(&p).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn quadrature_matches_erf() {
        for (beta, s_star, s0, s2) in [
            (1.0, 0.5, 0.25, 0.1),
            (4.0, 0.4, 0.3, 0.05),
            (0.5, 0.7, 0.6, 0.8),
            (2.0, 0.5, 0.1, 0.02),
        ] {
            let p = SaddleProblem {
                drift: Drift::SaddleQuadratic { beta, s_star },
                l: 1.0,
                s0,
                eta: 1e-3,
                sigma2: s2,
            };
            let q = bvp_exit_probability(&p).unwrap();
            let e = saddle_erf(beta, s_star, 1.0, s0, s2);
            assert!((q - e).abs() < 1e-6, "{q} vs {e}");
        }
    }

    #[test]
    fn deep_barrier_does_not_overflow() {
        let p = SaddleProblem {
            drift: Drift::DoubleWell {
                h: 50.0,
                width: 0.5,
                center: 0.5,
            },
            l: 1.0,
            s0: 0.25,
            eta: 1e-4,
            sigma2: 0.01,
        };
        let v = bvp_exit_probability(&p).unwrap();
        assert!((0.0..1e-12).contains(&v));
        let wide = bvp_exit_probability(&p.with_sigma2(1e4)).unwrap();
        assert!((wide - 0.25).abs() < 1e-2);
    }

    #[test]
    fn boundary_limits() {
        let p = SaddleProblem::canonical(0.1);
        assert!(bvp_at(&p, 0.0).unwrap() == 0.0);
        assert!((bvp_at(&p, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let near0 = simulate_exit(
            &SaddleProblem {
                s0: 1e-4,
                ..p.clone()
            },
            400,
            1,
        )
        .unwrap();
        let near1 = simulate_exit(
            &SaddleProblem {
                s0: 1.0 - 1e-4,
                ..p
            },
            400,
            1,
        )
        .unwrap();
        assert!(near0.p_hat < 0.05 && near1.p_hat > 0.95);
    }

    #[test]
    fn validation() {
        let mut p = SaddleProblem::canonical(0.1);
        p.s0 = 1.0;
        assert!(bvp_exit_probability(&p).is_err());
        let p = SaddleProblem::canonical(0.1);
        assert!(simulate_exit(&p, 50, 0).is_err());
        assert!(monotonicity_sweep(&p, &[0.1, 0.05, 0.2], 100, 0).is_err());
        assert!(SaddleProblem { eta: 0.5, ..p }.step_warning().is_some());
    }

    #[test]
    fn zero_drift_mc() {
        let mut p = SaddleProblem::canonical(0.5);
        p.drift = Drift::Zero;
        p.s0 = 0.3;
        let e = simulate_exit(&p, 4000, 11).unwrap();
        assert!((e.p_hat - 0.3).abs() < 3.0 * e.se + 0.01);
    }
}
