//! Score-guided pruning and subset selection, each scored by full training.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lqr::{csv_err, estimate_cost, Dataset};
use crate::metrics;
use crate::policy_gradient::{train, AgentVariant, CharFnConfig};
use crate::scalar::Scalar;
use crate::seed;

/// Return shown for unstable rows.
pub const UNSTABLE_DISPLAY_RETURN: f64 = -200_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Prune20,
    Subset30,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    ShapleyLow,
    LooLow,
    /// Control arm: prune the lowest-energy trajectories.
    EnergyLow,
    Random,
    ShapleyTop,
    ShapleyBottom,
    Full,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ShapleyLow => "shapley_low",
            Self::LooLow => "loo_low",
            Self::EnergyLow => "energy_low",
            Self::Random => "random",
            Self::ShapleyTop => "shapley_top",
            Self::ShapleyBottom => "shapley_bottom",
            Self::Full => "full",
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Prune20 => "prune20",
            Self::Subset30 => "subset30",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    ShapleyTop,
    ShapleyBottom,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `−Ĵ(K_T)` including capped rollouts.
    pub final_return: f64,
    pub diverged_rollouts: usize,
    pub diverged_steps: usize,
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRow {
    pub task: Task,
    pub method: Method,
    pub n_trajectories: usize,
    /// Mean raw return over seeds.
    pub final_return: f64,
    pub return_se: f64,
    /// `final_return`, or the fixed display value when any seed was unstable.
    pub display_return: f64,
    pub unstable: bool,
    pub n_seeds: usize,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub variant: String,
    pub prune_frac: f64,
    pub subset_frac: f64,
    pub rows: Vec<CurationRow>,
}

impl CurationReport {
    pub fn row(&self, task: Task, method: Method) -> Option<&CurationRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::Numeric(e.to_string()))
    }

    /// Columns `task, method, n_trajectories, final_return, display_return, return_se, unstable, n_seeds`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "task",
            "method",
            "n_trajectories",
            "final_return",
            "display_return",
            "return_se",
            "unstable",
            "n_seeds",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.task.name().to_string(),
                r.method.name().to_string(),
                r.n_trajectories.to_string(),
                r.final_return.to_string(),
                r.display_return.to_string(),
                r.return_se.to_string(),
                r.unstable.to_string(),
                r.n_seeds.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| LabError::Numeric(e.to_string()))
    }
}

/// Ids ordered by `(score, id)`, ascending.
fn ranked(scores: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut ids: Vec<usize> = scores.keys().copied().collect();
    ids.sort_by(|a, b| scores[a].total_cmp(&scores[b]).then(a.cmp(b)));
    ids
}

fn check_scores<T: Scalar>(dataset: &Dataset<T>, scores: &BTreeMap<usize, f64>) -> Result<()> {
    let ids = dataset.ids();
    if ids.len() != scores.len() || ids.iter().any(|i| !scores.contains_key(i)) {
        return Err(LabError::IdMismatch(
            "scores must cover exactly the dataset ids".into(),
        ));
    }
    if scores.values().any(|v| v.is_nan()) {
        return Err(LabError::Numeric("NaN score".into()));
    }
    Ok(())
}

fn count(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Trains on `ids` for one seed: `base_seed = derive(s, "train")`, evaluation with
/// `derive(s, "eval")`.
pub fn train_and_score<T: Scalar>(
    dataset: &Dataset<T>,
    ids: &[usize],
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    s: u64,
) -> Result<SeedOutcome> {
    let mut cfg = cfg.clone();
    cfg.base_seed = seed::derive(s, &[seed::label("train")]);
    let out = train(dataset, ids, &cfg, variant)?;
    let pol = dataset.policy.with_gain(out.gain);
    let cost = estimate_cost(
        &dataset.system,
        &pol,
        cfg.n_eval_rollouts,
        seed::derive(s, &[seed::label("eval")]),
    )?;
    Ok(SeedOutcome {
        seed: s,
        final_return: -cost.mean.as_f64(),
        diverged_rollouts: cost.diverged,
        diverged_steps: out.diverged_steps,
        unstable: cost.diverged > 0 || out.diverged_steps > 0,
    })
}

fn row_from<T: Scalar>(
    task: Task,
    method: Method,
    dataset: &Dataset<T>,
    ids_for_seed: impl Fn(u64) -> Result<Vec<usize>> + Sync,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seeds: &[u64],
) -> Result<CurationRow> {
    if seeds.is_empty() {
        return Err(LabError::Config("need at least one training seed".into()));
    }
    let mut n_trajectories = 0;
    let per_seed = seeds
        .par_iter()
        .map(|&s| {
            let ids = ids_for_seed(s)?;
            if ids.is_empty() {
                return Err(LabError::EmptyCoalition);
            }
            Ok((ids.len(), train_and_score(dataset, &ids, cfg, variant, s)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|(n, o)| {
            n_trajectories = n;
            o
        })
        .collect::<Vec<_>>();
    let returns: Vec<f64> = per_seed.iter().map(|o| o.final_return).collect();
    let (final_return, return_se) = crate::lqr::mean_and_se(&returns);
    let unstable = per_seed.iter().any(|o| o.unstable);
    Ok(CurationRow {
        task,
        method,
        n_trajectories,
        final_return,
        return_se,
        display_return: if unstable {
            UNSTABLE_DISPLAY_RETURN
        } else {
            final_return
        },
        unstable,
        n_seeds: seeds.len(),
        per_seed,
    })
}

/// Removes the `⌊frac·N⌋` lowest-scored trajectories (ties by id) and trains on the rest.
#[allow(clippy::too_many_arguments)]
pub fn prune_and_train<T: Scalar>(
    dataset: &Dataset<T>,
    scores: &BTreeMap<usize, f64>,
    frac: f64,
    method: Method,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seeds: &[u64],
) -> Result<CurationRow> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(LabError::Config("prune fraction must lie in (0, 1)".into()));
    }
    check_scores(dataset, scores)?;
    let order = ranked(scores);
    let keep: Vec<usize> = order[count(frac, order.len())..].to_vec();
    row_from(
        Task::Prune20,
        method,
        dataset,
        |_| Ok(keep.clone()),
        cfg,
        variant,
        seeds,
    )
}

/// Trains on a `⌊frac·N⌋` subset chosen by `selector`; random draws one subset per seed.
pub fn subset_and_train<T: Scalar>(
    dataset: &Dataset<T>,
    selector: Selector,
    shapley: &BTreeMap<usize, f64>,
    frac: f64,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seeds: &[u64],
) -> Result<CurationRow> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(LabError::Config(
            "subset fraction must lie in (0, 1]".into(),
        ));
    }
    check_scores(dataset, shapley)?;
    let order = ranked(shapley);
    let k = count(frac, order.len());
    let method = match selector {
        Selector::ShapleyTop => Method::ShapleyTop,
        Selector::ShapleyBottom => Method::ShapleyBottom,
        Selector::Random => Method::Random,
    };
    let pick = |s: u64| -> Result<Vec<usize>> {
        let mut ids = match selector {
            Selector::ShapleyBottom => order[..k].to_vec(),
            Selector::ShapleyTop => {
                // highest scores, ties broken by smaller id
                let mut top = order.clone();
                top.sort_by(|a, b| shapley[b].total_cmp(&shapley[a]).then(a.cmp(b)));
                top.truncate(k);
                top
            }
            Selector::Random => {
                let mut rng = seed::rng(seed::derive(s, &[seed::label("random-subset")]));
                order.choose_multiple(&mut rng, k).copied().collect()
            }
        };
        ids.sort_unstable();
        Ok(ids)
    };
    row_from(Task::Subset30, method, dataset, pick, cfg, variant, seeds)
}

fn full_row<T: Scalar>(
    task: Task,
    method: Method,
    dataset: &Dataset<T>,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    seeds: &[u64],
) -> Result<CurationRow> {
    let ids = dataset.ids();
    row_from(
        task,
        method,
        dataset,
        |_| Ok(ids.clone()),
        cfg,
        variant,
        seeds,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationPlan {
    pub prune_frac: f64,
    pub subset_frac: f64,
    pub seeds: Vec<u64>,
    /// Adds the energy-pruning control row.
    pub energy_control: bool,
}

impl CurationPlan {
    pub fn standard(seeds: Vec<u64>) -> Self {
        Self {
            prune_frac: 0.2,
            subset_frac: 0.3,
            seeds,
            energy_control: true,
        }
    }
}

/// Every pruning and subset row for one agent variant.
pub fn run_curation<T: Scalar>(
    dataset: &Dataset<T>,
    shapley: &BTreeMap<usize, f64>,
    loo: &BTreeMap<usize, f64>,
    cfg: &CharFnConfig<T>,
    variant: &AgentVariant<T>,
    plan: &CurationPlan,
) -> Result<CurationReport> {
    let seeds = &plan.seeds;
    let mut rows = vec![
        full_row(
            Task::Prune20,
            Method::Baseline,
            dataset,
            cfg,
            variant,
            seeds,
        )?,
        prune_and_train(
            dataset,
            shapley,
            plan.prune_frac,
            Method::ShapleyLow,
            cfg,
            variant,
            seeds,
        )?,
        prune_and_train(
            dataset,
            loo,
            plan.prune_frac,
            Method::LooLow,
            cfg,
            variant,
            seeds,
        )?,
    ];
    if plan.energy_control {
        let energy = dataset
            .trajectories
            .iter()
            .map(|t| Ok((t.id, metrics::energy(t)?.as_f64())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        rows.push(prune_and_train(
            dataset,
            &energy,
            plan.prune_frac,
            Method::EnergyLow,
            cfg,
            variant,
            seeds,
        )?);
    }
    rows.push(full_row(
        Task::Subset30,
        Method::Full,
        dataset,
        cfg,
        variant,
        seeds,
    )?);
    for sel in [
        Selector::ShapleyTop,
        Selector::Random,
        Selector::ShapleyBottom,
    ] {
        rows.push(subset_and_train(
            dataset,
            sel,
            shapley,
            plan.subset_frac,
            cfg,
            variant,
            seeds,
        )?);
    }
    Ok(CurationReport {
        variant: variant.kind.name().to_string(),
        prune_frac: plan.prune_frac,
        subset_frac: plan.subset_frac,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::lqr::{InitialState, PolicySpec, RolloutConfig, SystemSpec};

    fn setup() -> (Dataset<f64>, CharFnConfig<f64>) {
        let mut sys = SystemSpec::double_integrator();
        sys.horizon = 10;
        let ds = Dataset::generate(
            sys,
            PolicySpec::new(Matrix::zeros(1, 2), 0.5),
            RolloutConfig::new(InitialState::standard_normal(2), 8),
            10,
        )
        .unwrap();
        let cfg = CharFnConfig {
            steps: 4,
            n_eval_rollouts: 5,
            ..CharFnConfig::paper()
        };
        (ds, cfg)
    }

    fn scores(vals: &[f64]) -> BTreeMap<usize, f64> {
        vals.iter().copied().enumerate().collect()
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        assert_eq!(ranked(&scores(&[1.0, 0.0, 1.0, 0.0])), vec![1, 3, 0, 2]);
    }

    #[test]
    fn tiny_prune_equals_baseline() {
        let (ds, cfg) = setup();
        let v = AgentVariant::vanilla();
        let sc = scores(&(0..10).map(f64::from).collect::<Vec<_>>());
        let pruned =
            prune_and_train(&ds, &sc, 0.05, Method::ShapleyLow, &cfg, &v, &[1, 2]).unwrap();
        let base = full_row(Task::Prune20, Method::Baseline, &ds, &cfg, &v, &[1, 2]).unwrap();
        assert_eq!(pruned.n_trajectories, 10);
        assert_eq!(pruned.final_return.to_bits(), base.final_return.to_bits());
    }

    #[test]
    fn full_subset_equals_baseline_bitwise() {
        let (ds, cfg) = setup();
        let v = AgentVariant::vanilla();
        let sc = scores(&[0.3; 10]);
        let base = full_row(Task::Prune20, Method::Baseline, &ds, &cfg, &v, &[4, 5]).unwrap();
        for sel in [
            Selector::ShapleyTop,
            Selector::ShapleyBottom,
            Selector::Random,
        ] {
            let r = subset_and_train(&ds, sel, &sc, 1.0, &cfg, &v, &[4, 5]).unwrap();
            assert_eq!(r.final_return.to_bits(), base.final_return.to_bits());
        }
    }

    #[test]
    fn subset_sizes_and_validation() {
        let (ds, cfg) = setup();
        let v = AgentVariant::vanilla();
        let sc = scores(&(0..10).map(f64::from).collect::<Vec<_>>());
        let r = subset_and_train(&ds, Selector::ShapleyBottom, &sc, 0.3, &cfg, &v, &[1]).unwrap();
        assert_eq!(r.n_trajectories, 3);
        assert!(r.final_return <= 0.0);
        assert!(prune_and_train(&ds, &sc, 1.0, Method::ShapleyLow, &cfg, &v, &[1]).is_err());
        assert!(subset_and_train(&ds, Selector::Random, &sc, 0.05, &cfg, &v, &[1]).is_err());
        let mut partial = sc.clone();
        partial.remove(&3);
        assert!(prune_and_train(&ds, &partial, 0.2, Method::ShapleyLow, &cfg, &v, &[1]).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let (ds, cfg) = setup();
        let v = AgentVariant::vanilla();
        let sc = scores(&(0..10).map(|i| (i * 7 % 10) as f64).collect::<Vec<_>>());
        let plan = CurationPlan::standard(vec![1, 2]);
        let a = run_curation(&ds, &sc, &sc, &cfg, &v, &plan).unwrap();
        let b = run_curation(&ds, &sc, &sc, &cfg, &v, &plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 8);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
    }
}
