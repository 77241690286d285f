//! End-to-end pipeline: generate, value, analyze, curate, saddle sweep.
//!
//! Every stage draws its seed from the global seed as `derive(global, [label(stage), ..])`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::curation::{run_curation, CurationPlan, CurationReport};
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::lqr::{Dataset, Excitation, InitialState, PolicySpec, RolloutConfig, SystemSpec};
use crate::mechanism::{
    bin_count, binned_cv, features, join_rows, mechanism_report, Conditioning, MechanismConfig,
    MechanismReport, MechanismRow,
};
use crate::metrics;
use crate::policy_gradient::{AgentVariant, CharFnConfig, VariantKind};
use crate::saddle::{monotonicity_sweep, SaddleProblem, SweepTable};
use crate::seed::{derive, label};
use crate::shapley::{loo, shapley_mc, ValuationReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(rename = "N")]
    pub n: usize,
    /// Generation template; its `seed` is replaced by the stage seed.
    pub generation: RolloutConfig<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// Also compute leave-one-out values (needed by curation).
    #[serde(default = "yes")]
    pub loo: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub n_boot: usize,
    pub conditioning: Conditioning,
    pub max_bins: usize,
    pub min_bin_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub prune_frac: f64,
    pub subset_frac: f64,
    pub n_seeds: usize,
    pub variant: VariantKind,
    #[serde(default = "yes")]
    pub energy_control: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleConfig {
    pub template: SaddleProblem,
    pub sigma2_grid: Vec<f64>,
    pub n_paths: usize,
}

/// The scientific content of a run. Changing any field changes the results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemSpec<f64>,
    pub policy: PolicySpec<f64>,
    pub dataset: DatasetConfig,
    pub charfn: CharFnConfig<f64>,
    pub valuation: ValuationConfig,
    pub analysis: AnalysisConfig,
    pub curation: CurationConfig,
    pub saddle: SaddleConfig,
    pub variants: Vec<VariantKind>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: N = 20, M = 400, H = 50, T = 25.
    pub fn scaled(seed: u64) -> Self {
        let mut system = SystemSpec::double_integrator();
        system.horizon = 50;
        let mut generation = RolloutConfig::new(InitialState::standard_normal(2), 0);
        generation.excitation = Excitation::Dither {
            amplitude: 0.5,
            freq_lo: 0.01,
            freq_hi: 0.25,
        };
        Self {
            seed,
            system,
            policy: PolicySpec::new(Matrix::zeros(1, 2), 0.5),
            dataset: DatasetConfig { n: 20, generation },
            charfn: CharFnConfig {
                steps: 25,
                ..CharFnConfig::paper()
            },
            valuation: ValuationConfig {
                m: 400,
                antithetic: false,
                loo: true,
            },
            analysis: AnalysisConfig {
                n_boot: 1000,
                conditioning: Conditioning::WithinDecileMean,
                max_bins: 10,
                min_bin_size: 5,
            },
            curation: CurationConfig {
                prune_frac: 0.2,
                subset_frac: 0.3,
                n_seeds: 5,
                variant: VariantKind::Vanilla,
                energy_control: true,
            },
            saddle: SaddleConfig {
                template: SaddleProblem::canonical(0.1),
                sigma2_grid: vec![0.05, 0.1, 0.2, 0.4, 0.8],
                n_paths: 10_000,
            },
            variants: vec![VariantKind::Vanilla, VariantKind::Whitened],
        }
    }

    /// Full settings: N = 50, M = 2500, H = 100, T = 50.
    pub fn paper(seed: u64) -> Self {
        let mut c = Self::scaled(seed);
        c.system.horizon = 100;
        c.dataset.n = 50;
        c.charfn = CharFnConfig::paper();
        c.valuation.m = 2500;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.policy.validate()?;
        self.policy.check_against(&self.system)?;
        self.charfn.validate()?;
        self.saddle.template.validate()?;
        if self.dataset.n < 2 {
            return Err(LabError::Config("valuation needs N ≥ 2".into()));
        }
        if self.valuation.m == 0 {
            return Err(LabError::Config("M must be positive".into()));
        }
        if self.analysis.n_boot < 100 {
            return Err(LabError::Config("n_boot must be at least 100".into()));
        }
        if self.variants.is_empty() {
            return Err(LabError::Config("no agent variants selected".into()));
        }
        if self.curation.n_seeds == 0 {
            return Err(LabError::Config("curation needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed, &self.variants, self.curation.n_seeds)
    }

    pub fn mechanism_config(&self) -> MechanismConfig {
        MechanismConfig {
            n_boot: self.analysis.n_boot,
            seed: self.seeds().analyze,
            max_bins: self.analysis.max_bins,
            min_bin_size: self.analysis.min_bin_size,
        }
    }
}

/// All stage seeds derived from the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTree {
    pub global: u64,
    pub generate: u64,
    pub train: u64,
    pub value: BTreeMap<String, u64>,
    pub analyze: u64,
    pub curate: Vec<u64>,
    pub saddle: u64,
}

impl SeedTree {
    pub fn new(global: u64, variants: &[VariantKind], n_curation: usize) -> Self {
        let stage = |name: &str| derive(global, &[label(name)]);
        Self {
            global,
            generate: stage("generate"),
            train: stage("train"),
            value: variants
                .iter()
                .map(|k| {
                    (
                        k.name().to_string(),
                        derive(global, &[label("value"), label(k.name())]),
                    )
                })
                .collect(),
            analyze: stage("analyze"),
            curate: (0..n_curation as u64)
                .map(|i| derive(global, &[label("curate"), i]))
                .collect(),
            saddle: stage("saddle"),
        }
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let mut template = cfg.dataset.generation.clone();
    template.seed = cfg.seeds().generate;
    Dataset::generate(
        cfg.system.clone(),
        cfg.policy.clone(),
        template,
        cfg.dataset.n,
    )
}

fn charfn(cfg: &ExperimentConfig) -> CharFnConfig<f64> {
    CharFnConfig {
        base_seed: cfg.seeds().train,
        ..cfg.charfn.clone()
    }
}

/// Shapley values (plus LOO when configured) with trajectory features attached.
pub fn value(
    cfg: &ExperimentConfig,
    dataset: &Dataset<f64>,
    kind: VariantKind,
) -> Result<ValuationReport> {
    let variant = AgentVariant::for_dataset(kind, dataset)?;
    let seed = *cfg
        .seeds()
        .value
        .get(kind.name())
        .ok_or_else(|| LabError::Config(format!("variant {kind} is not part of this run")))?;
    let cf = charfn(cfg);
    let mut report = if cfg.valuation.antithetic {
        antithetic_mc(dataset, &cf, &variant, cfg.valuation.m, seed)?
    } else {
        shapley_mc(dataset, &cf, &variant, cfg.valuation.m, seed)?
    };
    report.attach_features(dataset, &variant)?;
    if cfg.valuation.loo {
        report.attach_loo(&loo(dataset, &cf, &variant, seed)?)?;
    }
    Ok(report)
}

fn antithetic_mc(
    dataset: &Dataset<f64>,
    cf: &CharFnConfig<f64>,
    variant: &AgentVariant<f64>,
    m: usize,
    seed: u64,
) -> Result<ValuationReport> {
    use crate::policy_gradient::LqrGame;
    use crate::shapley::{eval_seed, shapley_mc_game, FidelityMode, McConfig};
    let game = LqrGame::new(dataset, cf, variant, eval_seed(seed))?;
    let mut r = shapley_mc_game(
        &game,
        &McConfig {
            n_permutations: m,
            seed: derive(seed, &[label("permutations")]),
            fidelity: FidelityMode::Mixed {
                proxy_fraction: cf.proxy_fraction,
            },
            antithetic: true,
        },
    )?;
    r.variant = variant.kind.name().to_string();
    Ok(r)
}

/// Mechanism rows for one valuation, recomputing features under its variant.
pub fn rows_for(dataset: &Dataset<f64>, report: &ValuationReport) -> Result<Vec<MechanismRow>> {
    let kind: VariantKind = report.variant.parse()?;
    let variant = AgentVariant::for_dataset(kind, dataset)?;
    join_rows(report, &features(dataset, &variant)?)
}

pub fn analyze(
    cfg: &ExperimentConfig,
    dataset: &Dataset<f64>,
    reports: &[ValuationReport],
) -> Result<MechanismReport> {
    let inputs = reports
        .iter()
        .map(|r| Ok((r.variant.clone(), rows_for(dataset, r)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = mechanism_report(&inputs, &cfg.mechanism_config())?;
    if cfg.analysis.conditioning == Conditioning::Pooled {
        report.headline = Conditioning::Pooled;
    }
    Ok(report)
}

pub fn curate(
    cfg: &ExperimentConfig,
    dataset: &Dataset<f64>,
    report: &ValuationReport,
) -> Result<CurationReport> {
    let kind: VariantKind = report.variant.parse()?;
    let variant = AgentVariant::for_dataset(kind, dataset)?;
    let shapley: BTreeMap<usize, f64> = report.players.iter().map(|p| (p.id, p.shapley)).collect();
    let loo: BTreeMap<usize, f64> = report
        .players
        .iter()
        .map(|p| {
            p.loo
                .map(|l| (p.id, l))
                .ok_or_else(|| LabError::Config("curation needs leave-one-out values".into()))
        })
        .collect::<Result<_>>()?;
    let plan = CurationPlan {
        prune_frac: cfg.curation.prune_frac,
        subset_frac: cfg.curation.subset_frac,
        seeds: cfg.seeds().curate,
        energy_control: cfg.curation.energy_control,
    };
    run_curation(dataset, &shapley, &loo, &cfg.charfn, &variant, &plan)
}

pub fn saddle(cfg: &ExperimentConfig) -> Result<SweepTable> {
    monotonicity_sweep(
        &cfg.saddle.template,
        &cfg.saddle.sigma2_grid,
        cfg.saddle.n_paths,
        cfg.seeds().saddle,
    )
}

/// Per-bin coefficient of variation of `λ_max(Σ̂_τ)` under each variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityRow {
    pub bin: usize,
    pub cv_vanilla: f64,
    pub cv_whitened: f64,
}

impl UniformityRow {
    pub fn ratio(&self) -> f64 {
        self.cv_whitened / self.cv_vanilla
    }
}

/// Bins by trajectory energy and compares the spread of the gradient-variance proxy.
pub fn variance_uniformity(
    cfg: &ExperimentConfig,
    dataset: &Dataset<f64>,
) -> Result<Vec<UniformityRow>> {
    let energies = dataset
        .trajectories
        .iter()
        .map(metrics::energy)
        .collect::<Result<Vec<_>>>()?;
    let n_bins = bin_count(
        dataset.len(),
        cfg.analysis.max_bins,
        cfg.analysis.min_bin_size,
    );
    let bins = metrics::energy_bins(&energies, &dataset.ids(), n_bins)?;
    let spread = |kind| -> Result<Vec<(usize, f64)>> {
        let feats = features(dataset, &AgentVariant::for_dataset(kind, dataset)?)?;
        let vars: Vec<f64> = feats.iter().map(|f| f.grad_var).collect();
        Ok(binned_cv(&vars, &bins, 3))
    };
    let van = spread(VariantKind::Vanilla)?;
    let whi = spread(VariantKind::Whitened)?;
    Ok(van
        .into_iter()
        .zip(whi)
        .map(|((bin, cv_vanilla), (_, cv_whitened))| UniformityRow {
            bin,
            cv_vanilla,
            cv_whitened,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::scaled(3);
        c.system.horizon = 10;
        c.dataset.n = 6;
        c.charfn.steps = 3;
        c.charfn.n_eval_rollouts = 4;
        c.valuation.m = 6;
        c.analysis.n_boot = 100;
        c.curation.n_seeds = 2;
        c
    }

    #[test]
    fn seeds_are_distinct() {
        let s = tiny().seeds();
        let mut all = vec![s.generate, s.train, s.analyze, s.saddle];
        all.extend(s.value.values());
        all.extend(&s.curate);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn pipeline_runs_and_repeats() {
        let c = tiny();
        c.validate().unwrap();
        let ds = generate(&c).unwrap();
        let reports: Vec<_> = c
            .variants
            .iter()
            .map(|&k| value(&c, &ds, k).unwrap())
            .collect();
        assert!(reports
            .iter()
            .all(|r| r.players.iter().all(|p| p.loo.is_some() && p.pe.is_some())));
        let a = analyze(&c, &ds, &reports).unwrap();
        let again = value(&c, &ds, VariantKind::Vanilla).unwrap();
        assert_eq!(again.to_json().unwrap(), reports[0].to_json().unwrap());
        assert_eq!(
            a.to_json().unwrap(),
            analyze(&c, &ds, &reports).unwrap().to_json().unwrap()
        );
        let cur = curate(&c, &ds, &reports[0]).unwrap();
        assert_eq!(cur.rows.len(), 8);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.dataset.n = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.variants.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn paper_settings() {
        let c = ExperimentConfig::paper(0);
        assert_eq!(
            (c.system.horizon, c.dataset.n, c.valuation.m, c.charfn.steps),
            (100, 50, 2500, 50)
        );
        assert_eq!(c.charfn.n_eval_rollouts, 50);
        assert_eq!(c.charfn.proxy_fraction, 0.8);
    }
}
