use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use trajval::curation::CurationReport;
use trajval::experiment::{self, rows_for};
use trajval::lqr::Dataset;
use trajval::mechanism::{write_plot_data, MechanismReport};
use trajval::metrics;
use trajval::policy_gradient::{variance_proxy_for, AgentVariant};
use trajval::saddle::SweepTable;
use trajval::shapley::ValuationReport;

use crate::error::CliError;
use crate::run::Run;

pub const DATASET: &str = "dataset.json";
pub const METRICS: &str = "metrics.csv";
pub const VALUATION: &str = "valuation.json";
pub const MECHANISM: &str = "mechanism.json";
pub const CURATION: &str = "curation.csv";
pub const SADDLE: &str = "saddle.csv";

/// Valuations of one dataset under each agent variant of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationSet {
    pub reports: Vec<ValuationReport>,
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Numeric(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Integrity(format!("{name} is malformed: {e}")))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> trajval::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn load_dataset(run: &Run) -> Result<(Dataset<f64>, BTreeMap<String, String>), CliError> {
    let (text, hash) = run.read_input(DATASET)?;
    let ds: Dataset<f64> = parse(DATASET, &text)?;
    ds.validate()?;
    Ok((ds, BTreeMap::from([(DATASET.to_string(), hash)])))
}

fn load_valuation(
    run: &Run,
    inputs: &mut BTreeMap<String, String>,
) -> Result<ValuationSet, CliError> {
    let (text, hash) = run.read_input(VALUATION)?;
    inputs.insert(VALUATION.to_string(), hash);
    let set: ValuationSet = parse(VALUATION, &text)?;
    for r in &set.reports {
        r.validate()?;
    }
    Ok(set)
}

pub fn generate(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let ds = experiment::generate(&run.config.experiment)?;
    let bytes = json(&ds)?;
    run.commit(
        "generate",
        BTreeMap::new(),
        vec![(DATASET.into(), bytes)],
        t.elapsed(),
    )?;
    Ok(format!(
        "generate: {} trajectories of horizon {}",
        ds.len(),
        ds.system.horizon
    ))
}

pub fn metrics(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let (ds, inputs) = load_dataset(run)?;
    let kinds = run.config.experiment.variants.clone();
    let variants = kinds
        .iter()
        .map(|&k| AgentVariant::for_dataset(k, &ds))
        .collect::<trajval::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    {
        let mut header: Vec<String> = [
            "id",
            "seed",
            "pe",
            "energy",
            "lambda_max_info",
            "lambda_max_state",
            "chain_holds",
        ]
        .map(String::from)
        .to_vec();
        header.extend(kinds.iter().map(|k| format!("grad_var_{}", k.name())));
        let mut lines = vec![header.join(",")];
        let mut violations = 0;
        for tr in &ds.trajectories {
            let s = metrics::summarize(tr)?;
            let chk = s.spectral_check();
            violations += usize::from(!chk.holds);
            let mut row = vec![
                tr.id.to_string(),
                tr.seed.to_string(),
                s.pe.to_string(),
                s.energy.to_string(),
                s.lambda_max_info.to_string(),
                s.lambda_max_state.to_string(),
                chk.holds.to_string(),
            ];
            for v in &variants {
                row.push(
                    variance_proxy_for(tr, &ds.policy, v)?
                        .lambda_max
                        .to_string(),
                );
            }
            lines.push(row.join(","));
        }
        if violations > 0 {
            return Err(CliError::Numeric(format!(
                "spectral chain violated by {violations} trajectories"
            )));
        }
        out.extend(lines.join("\n").into_bytes());
        out.push(b'\n');
    }
    run.commit("metrics", inputs, vec![(METRICS.into(), out)], t.elapsed())?;
    Ok(format!(
        "metrics: {} trajectories, spectral chain holds for all",
        ds.len()
    ))
}

pub fn value(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let (ds, inputs) = load_dataset(run)?;
    let cfg = &run.config.experiment;
    let reports = cfg
        .variants
        .iter()
        .map(|&k| experiment::value(cfg, &ds, k))
        .collect::<trajval::Result<Vec<_>>>()?;
    let mut outputs = vec![(
        VALUATION.to_string(),
        json(&ValuationSet {
            reports: reports.clone(),
        })?,
    )];
    let mut summary = vec![];
    for r in &reports {
        outputs.push((
            format!("values_{}.csv", r.variant),
            csv_bytes(|b| r.write_csv(b))?,
        ));
        summary.push(format!(
            "{}: v(D) = {:.1}, v(∅) = {:.1}, efficiency residual {:.3e} (SE {:.3e})",
            r.variant, r.v_grand, r.v_empty, r.efficiency.residual, r.efficiency.se_total
        ));
    }
    let head = format!("value: M = {}", cfg.valuation.m);
    run.commit("value", inputs, outputs, t.elapsed())?;
    Ok(format!("{head}\n  {}", summary.join("\n  ")))
}

pub fn analyze(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let (ds, mut inputs) = load_dataset(run)?;
    let set = load_valuation(run, &mut inputs)?;
    let cfg = &run.config.experiment;
    let report = experiment::analyze(cfg, &ds, &set.reports)?;
    let mcfg = cfg.mechanism_config();
    let mut outputs = vec![
        (MECHANISM.to_string(), json(&report)?),
        (
            "mechanism_table.csv".to_string(),
            csv_bytes(|b| report.write_table_csv(b))?,
        ),
    ];
    for r in &set.reports {
        let rows = rows_for(&ds, r)?;
        outputs.push((
            format!("plot_{}.csv", r.variant),
            csv_bytes(|b| write_plot_data(&rows, &mcfg, b))?,
        ));
    }
    let uni = experiment::variance_uniformity(cfg, &ds)?;
    let mut text = String::from("bin,cv_vanilla,cv_whitened,ratio\n");
    for u in &uni {
        text.push_str(&format!(
            "{},{},{},{}\n",
            u.bin,
            u.cv_vanilla,
            u.cv_whitened,
            u.ratio()
        ));
    }
    outputs.push(("uniformity.csv".to_string(), text.into_bytes()));
    run.commit("analyze", inputs, outputs, t.elapsed())?;
    Ok(format!("analyze:\n{}", mechanism_table(&report)))
}

pub fn mechanism_table(report: &MechanismReport) -> String {
    let mut lines = vec![];
    for v in &report.variants {
        let cells: Vec<String> = v
            .headline()
            .named()
            .iter()
            .map(|(name, i)| format!("{name} {:+.3} [{:+.3}, {:+.3}]", i.point, i.ci_lo, i.ci_hi))
            .collect();
        lines.push(format!("  {:<16} {}", v.variant, cells.join("  ")));
    }
    for f in &report.flips {
        let d = &f.difference;
        lines.push(format!(
            "  r_pe_phi({}) - r_pe_phi({}) = {:+.3} [{:+.3}, {:+.3}]",
            f.to, f.from, d.point, d.ci_lo, d.ci_hi
        ));
    }
    lines.join("\n")
}

pub fn curate(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let (ds, mut inputs) = load_dataset(run)?;
    let set = load_valuation(run, &mut inputs)?;
    let cfg = &run.config.experiment;
    let want = cfg.curation.variant.name();
    let val = set
        .reports
        .iter()
        .find(|r| r.variant == want)
        .ok_or_else(|| {
            CliError::Config(format!(
                "curation uses the {want} agent, which this run did not value"
            ))
        })?;
    let report = experiment::curate(cfg, &ds, val)?;
    let outputs = vec![
        (CURATION.to_string(), csv_bytes(|b| report.write_csv(b))?),
        ("curation.json".to_string(), json(&report)?),
    ];
    run.commit("curate", inputs, outputs, t.elapsed())?;
    Ok(format!("curate ({want}):\n{}", curation_table(&report)))
}

pub fn curation_table(report: &CurationReport) -> String {
    report
        .rows
        .iter()
        .map(|r| {
            format!(
                "  {:<9} {:<15} n={:<3} return {:>12.1} ± {:<10.1}{}",
                r.task.name(),
                r.method.name(),
                r.n_trajectories,
                r.final_return,
                r.return_se,
                if r.unstable { " unstable" } else { "" }
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn saddle(run: &mut Run) -> Result<String, CliError> {
    let t = Instant::now();
    let table: SweepTable = experiment::saddle(&run.config.experiment)?;
    let outputs = vec![
        (SADDLE.to_string(), csv_bytes(|b| table.write_csv(b))?),
        ("saddle.json".to_string(), json(&table)?),
    ];
    run.commit("saddle", BTreeMap::new(), outputs, t.elapsed())?;
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "  σ² = {:<5} p_hat {:.4} ± {:.4}  p_bvp {:.4}",
                r.sigma2, r.p_hat, r.se, r.p_bvp
            )
        })
        .collect();
    Ok(format!(
        "saddle: BVP strictly increasing: {}\n{}",
        table.bvp_strictly_increasing,
        rows.join("\n")
    ))
}

type Stage = fn(&mut Run) -> Result<String, CliError>;

pub const PIPELINE: [(&str, Stage); 6] = [
    ("generate", generate),
    ("metrics", metrics),
    ("value", value),
    ("analyze", analyze),
    ("curate", curate),
    ("saddle", saddle),
];

/// Runs every stage that is missing or stale; intact stages are skipped.
pub fn reproduce(run: &mut Run) -> Result<String, CliError> {
    let mut log = vec![];
    for (name, stage) in PIPELINE {
        if run.up_to_date(name)? {
            log.push(format!("{name}: up to date, skipped"));
        } else {
            log.push(stage(run)?);
        }
    }
    Ok(log.join("\n"))
}
