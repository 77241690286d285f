//! Trajectory Shapley values, leave-one-out scores and an exact oracle.
//!
//! The engine works on any [`CoalitionGame`]: the LQR game from `policy_gradient`, or
//! the synthetic stubs in this module. Coalition values are memoized per
//! `(coalition, fidelity)` for the lifetime of one valuation call.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use dashmap::DashMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lqr::{csv_err, Dataset};
use crate::metrics;
use crate::policy_gradient::{variance_proxy_for, AgentVariant, CharFnConfig, LqrGame};
use crate::scalar::Scalar;
use crate::seed;

/// Largest game `shapley_exact` will enumerate.
pub const EXACT_PLAYER_LIMIT: usize = 12;

/// How a coalition value is computed: the one-step proxy or full training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    Proxy,
    Full,
}

impl Fidelity {
    /// `Proxy` iff `u < proxy_fraction`, for `u` uniform on `[0, 1)`.
    pub fn draw(u: f64, proxy_fraction: f64) -> Self {
        if u < proxy_fraction {
            Self::Proxy
        } else {
            Self::Full
        }
    }
}

/// A cooperative game over players `0..n_players()`.
pub trait CoalitionGame: Sync {
    fn n_players(&self) -> usize;

    /// External ids reported for each player index.
    fn player_ids(&self) -> Vec<usize> {
        (0..self.n_players()).collect()
    }

    /// `v(S)` for the given player indices (any order, no duplicates).
    fn value(&self, members: &[usize], fidelity: Fidelity) -> Result<f64>;
}

/// Fidelity used for each marginal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityMode {
    Fixed(Fidelity),
    /// Proxy with probability `proxy_fraction`, drawn once per (permutation, position).
    /// Exact enumeration uses the corresponding mixture of both values.
    Mixed {
        proxy_fraction: f64,
    },
}

impl FidelityMode {
    fn proxy_weight(self) -> f64 {
        match self {
            Self::Fixed(Fidelity::Proxy) => 1.0,
            Self::Fixed(Fidelity::Full) => 0.0,
            Self::Mixed { proxy_fraction } => proxy_fraction,
        }
    }

    fn validate(self) -> Result<()> {
        let p = self.proxy_weight();
        if !(0.0..=1.0).contains(&p) {
            return Err(LabError::Config("proxy_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn at(self, seed: u64, perm: usize, pos: usize) -> Fidelity {
        match self {
            Self::Fixed(f) => f,
            Self::Mixed { proxy_fraction } => {
                let s = seed::derive(seed, &[seed::label("fidelity"), perm as u64, pos as u64]);
                Fidelity::draw(seed::rng(s).random(), proxy_fraction)
            }
        }
    }
}

/// Player set as a bitset.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Coalition(Vec<u64>);

impl Coalition {
    pub fn empty(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64).max(1)])
    }

    pub fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn with(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.insert(i);
        c
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn members(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (w, &word) in self.0.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                out.push(w * 64 + bits.trailing_zeros() as usize);
                bits &= bits - 1;
            }
        }
        out
    }
}

/// Evaluation counters. Nothing is truncated; the name matches the report schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncationStats {
    pub truncated_marginals: usize,
    pub unique_evaluations: usize,
    pub cache_hits: usize,
    pub proxy_evaluations: usize,
    pub full_evaluations: usize,
}

struct Memo<'g, G: ?Sized> {
    game: &'g G,
    table: DashMap<(Coalition, Fidelity), f64>,
    lookups: AtomicUsize,
}

impl<'g, G: CoalitionGame + ?Sized> Memo<'g, G> {
    fn new(game: &'g G) -> Self {
        Self {
            game,
            table: DashMap::new(),
            lookups: AtomicUsize::new(0),
        }
    }

    fn value(&self, c: &Coalition, f: Fidelity) -> Result<f64> {
        let key = (c.clone(), f);
        self.lookups.fetch_add(1, Ordering::Relaxed);
        if let Some(v) = self.table.get(&key) {
            return Ok(*v);
        }
        let v = self.game.value(&c.members(), f)?;
        self.table.insert(key, v);
        Ok(v)
    }

    fn stats(&self) -> TruncationStats {
        let proxy = self
            .table
            .iter()
            .filter(|e| e.key().1 == Fidelity::Proxy)
            .count();
        TruncationStats {
            truncated_marginals: 0,
            unique_evaluations: self.table.len(),
            // lookups minus distinct keys, so racing misses do not change the count
            cache_hits: self.lookups.load(Ordering::Relaxed) - self.table.len(),
            proxy_evaluations: proxy,
            full_evaluations: self.table.len() - proxy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerValue {
    pub id: usize,
    pub shapley: f64,
    pub shapley_se: f64,
    pub loo: Option<f64>,
    pub n_marginals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    /// `λ_max(Σ̂)` as seen by the valuing agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_var: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub sum_shapley: f64,
    /// `v̄(D) − v(∅)` with `v̄` the fidelity mixture.
    pub target: f64,
    pub residual: f64,
    /// Standard error of the per-permutation marginal totals.
    pub se_total: f64,
    /// `sqrt(Σ_i se_i²)`.
    pub se_combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationReport {
    #[serde(default)]
    pub variant: String,
    pub players: Vec<PlayerValue>,
    pub v_grand: f64,
    #[serde(default)]
    pub v_grand_proxy: Option<f64>,
    pub v_empty: f64,
    pub n_permutations: usize,
    pub fidelity: FidelityMode,
    pub efficiency: Efficiency,
    pub truncation_stats: TruncationStats,
}

impl ValuationReport {
    pub fn ids(&self) -> Vec<usize> {
        self.players.iter().map(|p| p.id).collect()
    }

    pub fn shapley(&self) -> Vec<f64> {
        self.players.iter().map(|p| p.shapley).collect()
    }

    pub fn get(&self, id: usize) -> Option<&PlayerValue> {
        self.players.iter().find(|p| p.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.players {
            if p.n_marginals > self.n_permutations || !(p.shapley_se >= 0.0) {
                return Err(LabError::Numeric(format!(
                    "inconsistent valuation entry for id {}",
                    p.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::Numeric(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| LabError::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// Columns `id, pe, energy, grad_var, shapley, shapley_se, loo`; missing values are blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "pe",
            "energy",
            "grad_var",
            "shapley",
            "shapley_se",
            "loo",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.players {
            w.write_record([
                p.id.to_string(),
                opt(p.pe),
                opt(p.energy),
                opt(p.grad_var),
                p.shapley.to_string(),
                p.shapley_se.to_string(),
                opt(p.loo),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| LabError::Numeric(e.to_string()))
    }

    /// Fills `pe`, `energy` and `grad_var` from the dataset, matching by id.
    pub fn attach_features<T: Scalar>(
        &mut self,
        dataset: &Dataset<T>,
        variant: &AgentVariant<T>,
    ) -> Result<()> {
        for p in &mut self.players {
            let traj = dataset.get(p.id).ok_or_else(|| {
                LabError::IdMismatch(format!("valuation id {} not in dataset", p.id))
            })?;
            let s = metrics::summarize(traj)?;
            p.pe = Some(s.pe.as_f64());
            p.energy = Some(s.energy.as_f64());
            p.grad_var = Some(
                variance_proxy_for(traj, &dataset.policy, variant)?
                    .lambda_max
                    .as_f64(),
            );
        }
        Ok(())
    }

    pub fn attach_loo(&mut self, loo: &BTreeMap<usize, f64>) -> Result<()> {
        for p in &mut self.players {
            let v = loo
                .get(&p.id)
                .ok_or_else(|| LabError::IdMismatch(format!("no LOO score for id {}", p.id)))?;
            p.loo = Some(*v);
        }
        Ok(())
    }
}

/// Permutation-sampling options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_permutations: usize,
    pub seed: u64,
    pub fidelity: FidelityMode,
    /// Pair each sampled permutation with its reverse.
    #[serde(default)]
    pub antithetic: bool,
}

/// Seeded permutations of `0..n`.
pub fn sample_permutations(n: usize, count: usize, seed: u64, antithetic: bool) -> Vec<Vec<usize>> {
    let draw = |k: usize| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut seed::rng(seed::derive(
            seed,
            &[seed::label("permutation"), k as u64],
        )));
        p
    };
    (0..count)
        .map(|k| {
            if antithetic {
                let mut p = draw(k / 2);
                if k % 2 == 1 {
                    p.reverse();
                }
                p
            } else {
                draw(k)
            }
        })
        .collect()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if p.len() != n {
        return Err(LabError::Dimension(format!(
            "permutation of length {} for {n} players",
            p.len()
        )));
    }
    for &i in p {
        if i >= n || seen[i] {
            return Err(LabError::Config("not a permutation".into()));
        }
        seen[i] = true;
    }
    Ok(())
}

fn grand_values<G: CoalitionGame + ?Sized>(
    memo: &Memo<'_, G>,
    n: usize,
    mode: FidelityMode,
) -> Result<(f64, Option<f64>, f64)> {
    let mut all = Coalition::empty(n);
    (0..n).for_each(|i| all.insert(i));
    let p = mode.proxy_weight();
    let full = if p < 1.0 {
        Some(memo.value(&all, Fidelity::Full)?)
    } else {
        None
    };
    let proxy = if p > 0.0 {
        Some(memo.value(&all, Fidelity::Proxy)?)
    } else {
        None
    };
    let mixed = p * proxy.unwrap_or(0.0) + (1.0 - p) * full.unwrap_or(0.0);
    Ok((full.unwrap_or(mixed), proxy, mixed))
}

/// Shapley estimate from the given permutations. Each position draws one fidelity,
/// shared by `v(Pred)` and `v(Pred ∪ {i})`.
pub fn shapley_over_permutations<G: CoalitionGame + ?Sized>(
    game: &G,
    perms: &[Vec<usize>],
    mode: FidelityMode,
    seed: u64,
) -> Result<ValuationReport> {
    let n = game.n_players();
    if n == 0 {
        return Err(LabError::EmptyDataset);
    }
    if perms.is_empty() {
        return Err(LabError::Config("need at least one permutation".into()));
    }
    mode.validate()?;
    for p in perms {
        check_permutation(p, n)?;
    }
    let memo = Memo::new(game);
    let empty = Coalition::empty(n);
    let v_empty = memo.value(&empty, Fidelity::Full)?;

    let marginals: Vec<Vec<f64>> = perms
        .par_iter()
        .enumerate()
        .map(|(k, perm)| {
            let mut out = vec![0.0; n];
            let mut pred = empty.clone();
            for (pos, &i) in perm.iter().enumerate() {
                let f = mode.at(seed, k, pos);
                let before = memo.value(&pred, f)?;
                pred.insert(i);
                out[i] = memo.value(&pred, f)? - before;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let m = perms.len();
    let ids = game.player_ids();
    let players = (0..n)
        .map(|i| {
            let xs: Vec<f64> = marginals.iter().map(|row| row[i]).collect();
            let (mean, se) = crate::lqr::mean_and_se(&xs);
            PlayerValue {
                id: ids[i],
                shapley: mean,
                shapley_se: se,
                loo: None,
                n_marginals: m,
                pe: None,
                energy: None,
                grad_var: None,
            }
        })
        .collect::<Vec<_>>();
    let totals: Vec<f64> = marginals.iter().map(|row| row.iter().sum()).collect();
    let (_, se_total) = crate::lqr::mean_and_se(&totals);
    let (v_grand, v_grand_proxy, v_mixed) = grand_values(&memo, n, mode)?;
    let sum_shapley: f64 = players.iter().map(|p| p.shapley).sum();
    let target = v_mixed - v_empty;
    let efficiency = Efficiency {
        sum_shapley,
        target,
        residual: sum_shapley - target,
        se_total,
        se_combined: players
            .iter()
            .map(|p| p.shapley_se * p.shapley_se)
            .sum::<f64>()
            .sqrt(),
    };
    Ok(ValuationReport {
        variant: String::new(),
        players,
        v_grand,
        v_grand_proxy,
        v_empty,
        n_permutations: m,
        fidelity: mode,
        efficiency,
        truncation_stats: memo.stats(),
    })
}

/// Permutation Monte Carlo Shapley.
pub fn shapley_mc_game<G: CoalitionGame + ?Sized>(
    game: &G,
    cfg: &McConfig,
) -> Result<ValuationReport> {
    if cfg.n_permutations == 0 {
        return Err(LabError::Config("need at least one permutation".into()));
    }
    let perms = sample_permutations(
        game.n_players(),
        cfg.n_permutations,
        cfg.seed,
        cfg.antithetic,
    );
    shapley_over_permutations(game, &perms, cfg.fidelity, cfg.seed)
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

/// Exact Shapley by subset enumeration: `φ_i = Σ_{S∌i} |S|!(N−|S|−1)!/N! · [v(S∪i) − v(S)]`.
/// Under a mixed fidelity mode the game value is the mixture `p·v_proxy + (1−p)·v_full`.
pub fn shapley_exact_game<G: CoalitionGame + ?Sized>(
    game: &G,
    mode: FidelityMode,
) -> Result<ValuationReport> {
    let n = game.n_players();
    if n == 0 {
        return Err(LabError::EmptyDataset);
    }
    if n > EXACT_PLAYER_LIMIT {
        return Err(LabError::TooManyPlayers {
            n,
            limit: EXACT_PLAYER_LIMIT,
        });
    }
    mode.validate()?;
    let p = mode.proxy_weight();
    let memo = Memo::new(game);
    let coalition = |mask: usize| {
        let mut c = Coalition::empty(n);
        (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .for_each(|i| c.insert(i));
        c
    };
    let values: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let c = coalition(mask);
            if mask == 0 {
                return memo.value(&c, Fidelity::Full);
            }
            let proxy = if p > 0.0 {
                memo.value(&c, Fidelity::Proxy)?
            } else {
                0.0
            };
            let full = if p < 1.0 {
                memo.value(&c, Fidelity::Full)?
            } else {
                0.0
            };
            Ok(p * proxy + (1.0 - p) * full)
        })
        .collect::<Result<_>>()?;

    let fact = factorials(n);
    let ids = game.player_ids();
    let players = (0..n)
        .map(|i| {
            let mut phi = 0.0;
            for mask in 0..1usize << n {
                if mask >> i & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact[s] * fact[n - s - 1] / fact[n];
                phi += w * (values[mask | 1 << i] - values[mask]);
            }
            PlayerValue {
                id: ids[i],
                shapley: phi,
                shapley_se: 0.0,
                loo: None,
                n_marginals: fact[n] as usize,
                pe: None,
                energy: None,
                grad_var: None,
            }
        })
        .collect::<Vec<_>>();
    let v_empty = values[0];
    let (v_grand, v_grand_proxy, v_mixed) = grand_values(&memo, n, mode)?;
    let sum_shapley: f64 = players.iter().map(|p| p.shapley).sum();
    let target = v_mixed - v_empty;
    Ok(ValuationReport {
        variant: String::new(),
        players,
        v_grand,
        v_grand_proxy,
        v_empty,
        n_permutations: fact[n] as usize,
        fidelity: mode,
        efficiency: Efficiency {
            sum_shapley,
            target,
            residual: sum_shapley - target,
            se_total: 0.0,
            se_combined: 0.0,
        },
        truncation_stats: memo.stats(),
    })
}

/// `LOO_i = v(D) − v(D \ {i})` at full fidelity; keyed by player id.
pub fn loo_game<G: CoalitionGame + ?Sized>(game: &G) -> Result<BTreeMap<usize, f64>> {
    let n = game.n_players();
    if n < 2 {
        return Err(LabError::Config(
            "leave-one-out needs at least two players".into(),
        ));
    }
    let all: Vec<usize> = (0..n).collect();
    let v_all = game.value(&all, Fidelity::Full)?;
    let ids = game.player_ids();
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
            Ok((ids[i], v_all - game.value(&rest, Fidelity::Full)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.into_iter().collect())
}

/// Seed shared by all coalition evaluations of a valuation run.
pub fn eval_seed(seed: u64) -> u64 {
    seed::derive(seed, &[seed::label("eval")])
}

fn lqr_game<'a, T: Scalar>(
    dataset: &'a Dataset<T>,
    cfg: &'a CharFnConfig<T>,
    variant: &'a AgentVariant<T>,
    seed: u64,
) -> Result<LqrGame<'a, T>> {
    LqrGame::new(dataset, cfg, variant, eval_seed(seed))
}

/// Permutation MC Shapley of every trajectory with `m` permutations. Fidelity follows
/// `cfg.proxy_fraction`; evaluations use the common seed [`eval_seed`]`(seed)`.
pub fn shapley_mc<T: Scalar>(
    dataset: &Dataset<T>,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    m: usize,
    seed: u64,
) -> Result<ValuationReport> {
    let game = lqr_game(dataset, cfg, variant, seed)?;
    let mut r = shapley_mc_game(
        &game,
        &McConfig {
            n_permutations: m,
            seed: seed::derive(seed, &[seed::label("permutations")]),
            fidelity: FidelityMode::Mixed {
                proxy_fraction: cfg.proxy_fraction,
            },
            antithetic: false,
        },
    )?;
    r.variant = variant.kind.name().to_string();
    Ok(r)
}

pub fn shapley_exact<T: Scalar>(
    dataset: &Dataset<T>,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seed: u64,
) -> Result<ValuationReport> {
    let game = lqr_game(dataset, cfg, variant, seed)?;
    let mut r = shapley_exact_game(
        &game,
        FidelityMode::Mixed {
            proxy_fraction: cfg.proxy_fraction,
        },
    )?;
    r.variant = variant.kind.name().to_string();
    Ok(r)
}

pub fn loo<T: Scalar>(
    dataset: &Dataset<T>,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    loo_game(&lqr_game(dataset, cfg, variant, seed)?)
}

/// `v(S) = Σ_{i∈S} w_i`; the proxy fidelity scales weights by `proxy_scale`.
#[derive(Clone, Debug)]
pub struct AdditiveGame {
    pub weights: Vec<f64>,
    pub proxy_scale: f64,
}

impl AdditiveGame {
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            weights,
            proxy_scale: 1.0,
        }
    }
}

impl CoalitionGame for AdditiveGame {
    fn n_players(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, members: &[usize], fidelity: Fidelity) -> Result<f64> {
        let s: f64 = members.iter().map(|&i| self.weights[i]).sum();
        Ok(match fidelity {
            Fidelity::Proxy => s * self.proxy_scale,
            Fidelity::Full => s,
        })
    }
}

/// `v(S) = 1` iff `S ⊇ carrier`.
#[derive(Clone, Debug)]
pub struct UnanimityGame {
    pub n: usize,
    pub carrier: Vec<usize>,
}

impl CoalitionGame for UnanimityGame {
    fn n_players(&self) -> usize {
        self.n
    }

    fn value(&self, members: &[usize], _: Fidelity) -> Result<f64> {
        Ok(if self.carrier.iter().all(|c| members.contains(c)) {
            1.0
        } else {
            0.0
        })
    }
}

/// Any closure as a game.
pub struct FnGame<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[usize], Fidelity) -> f64 + Sync> CoalitionGame for FnGame<F> {
    fn n_players(&self) -> usize {
        self.n
    }

    fn value(&self, members: &[usize], fidelity: Fidelity) -> Result<f64> {
        Ok((self.f)(members, fidelity))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalition_bits() {
        let mut c = Coalition::empty(130);
        for i in [0, 63, 64, 129] {
            c.insert(i);
        }
        assert_eq!(c.members(), vec![0, 63, 64, 129]);
        assert!(c.contains(64) && !c.contains(65));
        assert_eq!(c.len(), 4);
        assert!(Coalition::empty(3).is_empty());
    }

    #[test]
    fn all_permutations_count() {
        let p = all_permutations(4);
        assert_eq!(p.len(), 24);
        assert_eq!(p[0], vec![0, 1, 2, 3]);
        assert_eq!(p[23], vec![3, 2, 1, 0]);
    }

    #[test]
    fn antithetic_pairs_reverse() {
        let p = sample_permutations(6, 4, 3, true);
        let mut r = p[0].clone();
        r.reverse();
        assert_eq!(p[1], r);
        assert_ne!(p[0], p[2]);
    }

    #[test]
    fn single_player() {
        let g = FnGame {
            n: 1,
            f: |s: &[usize], _| if s.is_empty() { -3.0 } else { 2.0 },
        };
        let r = shapley_mc_game(
            &g,
            &McConfig {
                n_permutations: 7,
                seed: 1,
                fidelity: FidelityMode::Fixed(Fidelity::Full),
                antithetic: false,
            },
        )
        .unwrap();
        assert_eq!(r.players[0].shapley, 5.0);
        assert_eq!(r.players[0].n_marginals, 7);
    }

    #[test]
    fn additive_mc_and_exact() {
        let g = AdditiveGame::new(vec![1.5, -2.0, 0.25]);
        let mc = shapley_mc_game(
            &g,
            &McConfig {
                n_permutations: 5,
                seed: 9,
                fidelity: FidelityMode::Fixed(Fidelity::Full),
                antithetic: false,
            },
        )
        .unwrap();
        let ex = shapley_exact_game(&g, FidelityMode::Fixed(Fidelity::Full)).unwrap();
        for (i, w) in g.weights.iter().enumerate() {
            assert_eq!(mc.players[i].shapley, *w);
            assert!((ex.players[i].shapley - w).abs() < 1e-15);
        }
        let loo = loo_game(&g).unwrap();
        assert_eq!(loo.values().copied().collect::<Vec<_>>(), g.weights);
    }

    #[test]
    fn unanimity_exact() {
        let g = UnanimityGame {
            n: 5,
            carrier: vec![1, 2],
        };
        let r = shapley_exact_game(&g, FidelityMode::Fixed(Fidelity::Full)).unwrap();
        let phi = r.shapley();
        assert!((phi[1] - 0.5).abs() < 1e-15 && (phi[2] - 0.5).abs() < 1e-15);
        for i in [0, 3, 4] {
            assert!(phi[i].abs() < 1e-15);
        }
        assert!(r.efficiency.residual.abs() < 1e-12);
    }

    #[test]
    fn constant_game_loo_zero() {
        let g = FnGame {
            n: 4,
            f: |_: &[usize], _| 7.0,
        };
        assert!(loo_game(&g).unwrap().values().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_refuses_large_games() {
        let g = AdditiveGame::new(vec![1.0; 13]);
        assert_eq!(
            shapley_exact_game(&g, FidelityMode::Fixed(Fidelity::Full)).unwrap_err(),
            LabError::TooManyPlayers { n: 13, limit: 12 }
        );
    }

    #[test]
    fn exhaustive_mc_matches_exact_fixed_fidelity() {
        // a non-additive game with interactions
        let g = FnGame {
            n: 4,
            f: |s: &[usize], _| {
                let k = s.len() as f64;
                let w: f64 = s.iter().map(|&i| (i as f64 + 1.0).sqrt()).sum();
                w * w - 0.3 * k * k
                    + if s.contains(&0) && s.contains(&3) {
                        2.0
                    } else {
                        0.0
                    }
            },
        };
        let mode = FidelityMode::Fixed(Fidelity::Full);
        let mc = shapley_over_permutations(&g, &all_permutations(4), mode, 0).unwrap();
        let ex = shapley_exact_game(&g, mode).unwrap();
        for (a, b) in mc.players.iter().zip(&ex.players) {
            assert!((a.shapley - b.shapley).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_fidelity_efficiency_target() {
        let mut g = AdditiveGame::new(vec![1.0, 2.0, 3.0]);
        g.proxy_scale = 0.5;
        let r = shapley_mc_game(
            &g,
            &McConfig {
                n_permutations: 2000,
                seed: 4,
                fidelity: FidelityMode::Mixed {
                    proxy_fraction: 0.8,
                },
                antithetic: false,
            },
        )
        .unwrap();
        // v̄(D) = 0.8·3 + 0.2·6
        assert!((r.efficiency.target - 3.6).abs() < 1e-12);
        assert!(r.efficiency.residual.abs() <= 3.0 * r.efficiency.se_total);
        let ex = shapley_exact_game(
            &g,
            FidelityMode::Mixed {
                proxy_fraction: 0.8,
            },
        )
        .unwrap();
        assert!(ex.efficiency.residual.abs() < 1e-12);
    }

    #[test]
    fn report_round_trips() {
        let g = AdditiveGame::new(vec![1.0, 2.0]);
        let mut r = shapley_exact_game(&g, FidelityMode::Fixed(Fidelity::Full)).unwrap();
        r.attach_loo(&loo_game(&g).unwrap()).unwrap();
        let back = ValuationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,pe,energy,grad_var,shapley,shapley_se,loo\n0,,,,"));
    }
}
