//! Rank statistics linking excitation, gradient variance and trajectory value.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lqr::{csv_err, Dataset};
use crate::metrics;
use crate::policy_gradient::{variance_proxy_for, AgentVariant};
use crate::scalar::Scalar;
use crate::seed;
use crate::shapley::ValuationReport;

/// 1-based ranks with ties sharing their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LabError::Dimension(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(LabError::UndefinedCorrelation(format!(
            "{} points, need 3",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(LabError::Numeric("NaN in correlation input".into()));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
        .ok_or_else(|| LabError::UndefinedCorrelation("an input has no rank variance".into()))
}

/// Size-weighted mean of within-bin Spearman correlations. Bins with fewer than
/// three members, or with a constant input, are skipped.
pub fn conditioned_correlation(a: &[f64], b: &[f64], bins: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() != bins.len() {
        return Err(LabError::Dimension(
            "inputs and bin labels differ in length".into(),
        ));
    }
    let n_bins = bins.iter().copied().max().map_or(0, |m| m + 1);
    let mut num = 0.0;
    let mut weight = 0usize;
    for bin in 0..n_bins {
        let idx: Vec<usize> = (0..bins.len()).filter(|&i| bins[i] == bin).collect();
        if idx.len() < 3 {
            continue;
        }
        let xa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let xb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        match spearman(&xa, &xb) {
            Ok(r) => {
                num += r * idx.len() as f64;
                weight += idx.len();
            }
            Err(LabError::UndefinedCorrelation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if weight == 0 {
        return Err(LabError::UndefinedCorrelation(
            "no bin has three or more usable members".into(),
        ));
    }
    Ok(num / weight as f64)
}

/// Number of energy bins: up to `max_bins`, keeping about `min_bin_size` members each.
pub fn bin_count(n: usize, max_bins: usize, min_bin_size: usize) -> usize {
    max_bins.min((n / min_bin_size.max(1)).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_boot: usize,
    /// Resamples where the statistic was undefined.
    pub skipped: usize,
}

impl Interval {
    pub fn excludes_zero(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap: `statistic` receives resampled positions `0..n` (with
/// replacement). The interval is widened, if needed, to contain the point estimate.
pub fn bootstrap_ci<F>(n: usize, statistic: F, n_boot: usize, seed: u64) -> Result<Interval>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n_boot < 100 {
        return Err(LabError::Config(format!(
            "n_boot = {n_boot}, need at least 100"
        )));
    }
    if n == 0 {
        return Err(LabError::EmptyDataset);
    }
    let identity: Vec<usize> = (0..n).collect();
    let point = statistic(&identity)?;
    let draws: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed::derive(seed, &[seed::label("bootstrap"), b as u64]));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match statistic(&idx) {
                Ok(v) => Ok(Some(v)),
                Err(LabError::UndefinedCorrelation(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut vals: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = n_boot - vals.len();
    if vals.is_empty() {
        return Err(LabError::UndefinedCorrelation(
            "every bootstrap resample was degenerate".into(),
        ));
    }
    vals.sort_by(f64::total_cmp);
    Ok(Interval {
        point,
        ci_lo: quantile(&vals, 0.025).min(point),
        ci_hi: quantile(&vals, 0.975).max(point),
        n_boot,
        skipped,
    })
}

/// One trajectory's inputs to the mechanism statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub id: usize,
    pub pe: f64,
    pub energy: f64,
    pub grad_var: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeatures {
    pub id: usize,
    pub pe: f64,
    pub energy: f64,
    /// `λ_max(Σ̂)` under the given variant.
    pub grad_var: f64,
}

pub fn features<T: Scalar>(
    dataset: &Dataset<T>,
    variant: &AgentVariant<T>,
) -> Result<Vec<TrajectoryFeatures>> {
    dataset
        .trajectories
        .iter()
        .map(|t| {
            let s = metrics::summarize(t)?;
            Ok(TrajectoryFeatures {
                id: t.id,
                pe: s.pe.as_f64(),
                energy: s.energy.as_f64(),
                grad_var: variance_proxy_for(t, &dataset.policy, variant)?
                    .lambda_max
                    .as_f64(),
            })
        })
        .collect()
}

/// Joins a valuation with per-trajectory features; both must cover the same ids.
pub fn join_rows(
    valuation: &ValuationReport,
    feats: &[TrajectoryFeatures],
) -> Result<Vec<MechanismRow>> {
    if valuation.players.len() != feats.len() {
        return Err(LabError::IdMismatch(format!(
            "{} valued trajectories, {} with features",
            valuation.players.len(),
            feats.len()
        )));
    }
    feats
        .iter()
        .map(|f| {
            let p = valuation
                .get(f.id)
                .ok_or_else(|| LabError::IdMismatch(format!("id {} has no Shapley value", f.id)))?;
            Ok(MechanismRow {
                id: f.id,
                pe: f.pe,
                energy: f.energy,
                grad_var: f.grad_var,
                phi: p.shapley,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Pooled,
    WithinDecileMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub max_bins: usize,
    pub min_bin_size: usize,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            seed: 0,
            max_bins: 10,
            min_bin_size: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSet {
    pub r_pe_var: Interval,
    pub r_var_phi: Interval,
    pub r_pe_phi: Interval,
}

impl CorrelationSet {
    pub fn named(&self) -> [(&'static str, Interval); 3] {
        [
            ("r_pe_var", self.r_pe_var),
            ("r_var_phi", self.r_var_phi),
            ("r_pe_phi", self.r_pe_phi),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMechanism {
    pub variant: String,
    pub n: usize,
    pub n_bins: usize,
    pub within_decile_mean: CorrelationSet,
    pub pooled: CorrelationSet,
}

impl VariantMechanism {
    pub fn headline(&self) -> &CorrelationSet {
        &self.within_decile_mean
    }
}

/// `r_pe_phi(to) − r_pe_phi(from)` on paired resamples of trajectory ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub from: String,
    pub to: String,
    pub difference: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub headline: Conditioning,
    pub n_boot: usize,
    pub variants: Vec<VariantMechanism>,
    pub flips: Vec<FlipReport>,
}

impl MechanismReport {
    pub fn variant(&self, name: &str) -> Option<&VariantMechanism> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::Numeric(e.to_string()))
    }

    /// Long-form table: `correlation, variant, conditioning, point, ci_lo, ci_hi`.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "correlation",
            "variant",
            "conditioning",
            "point",
            "ci_lo",
            "ci_hi",
        ])
        .map_err(csv_err)?;
        for v in &self.variants {
            for (cond, set) in [
                ("within_decile_mean", &v.within_decile_mean),
                ("pooled", &v.pooled),
            ] {
                for (name, iv) in set.named() {
                    w.write_record([
                        name,
                        &v.variant,
                        cond,
                        &iv.point.to_string(),
                        &iv.ci_lo.to_string(),
                        &iv.ci_hi.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        for f in &self.flips {
            let d = &f.difference;
            w.write_record([
                "r_pe_phi_difference",
                &format!("{}-{}", f.to, f.from),
                "within_decile_mean",
                &d.point.to_string(),
                &d.ci_lo.to_string(),
                &d.ci_hi.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| LabError::Numeric(e.to_string()))
    }
}

fn energy_bins_of(rows: &[MechanismRow], cfg: &MechanismConfig) -> Result<Vec<usize>> {
    let energies: Vec<f64> = rows.iter().map(|r| r.energy).collect();
    let ids: Vec<usize> = rows.iter().map(|r| r.id).collect();
    metrics::energy_bins(
        &energies,
        &ids,
        bin_count(rows.len(), cfg.max_bins, cfg.min_bin_size),
    )
}

fn pick(rows: &[MechanismRow], idx: &[usize], f: impl Fn(&MechanismRow) -> f64) -> Vec<f64> {
    idx.iter().map(|&i| f(&rows[i])).collect()
}

type Field = fn(&MechanismRow) -> f64;

const PAIRS: [(Field, Field); 3] = [
    (|r| r.pe, |r| r.grad_var),
    (|r| r.grad_var, |r| r.phi),
    (|r| r.pe, |r| r.phi),
];

fn statistic(
    rows: &[MechanismRow],
    bins: Option<&[usize]>,
    idx: &[usize],
    pair: (Field, Field),
) -> Result<f64> {
    let a = pick(rows, idx, pair.0);
    let b = pick(rows, idx, pair.1);
    match bins {
        Some(bins) => {
            let bi: Vec<usize> = idx.iter().map(|&i| bins[i]).collect();
            conditioned_correlation(&a, &b, &bi)
        }
        None => spearman(&a, &b),
    }
}

fn correlation_set(
    rows: &[MechanismRow],
    bins: Option<&[usize]>,
    cfg: &MechanismConfig,
    stream: u64,
) -> Result<CorrelationSet> {
    let mut out = Vec::with_capacity(3);
    // the three statistics share one resample stream
    for pair in PAIRS {
        out.push(bootstrap_ci(
            rows.len(),
            |idx| statistic(rows, bins, idx, pair),
            cfg.n_boot,
            seed::derive(cfg.seed, &[stream]),
        )?);
    }
    Ok(CorrelationSet {
        r_pe_var: out[0],
        r_var_phi: out[1],
        r_pe_phi: out[2],
    })
}

pub fn variant_mechanism(
    variant: &str,
    rows: &[MechanismRow],
    cfg: &MechanismConfig,
) -> Result<VariantMechanism> {
    if rows.len() < 3 {
        return Err(LabError::UndefinedCorrelation(format!(
            "{} trajectories, need 3",
            rows.len()
        )));
    }
    let bins = energy_bins_of(rows, cfg)?;
    let n_bins = bins.iter().max().map_or(0, |m| m + 1);
    Ok(VariantMechanism {
        variant: variant.to_string(),
        n: rows.len(),
        n_bins,
        within_decile_mean: correlation_set(rows, Some(&bins), cfg, seed::label("conditioned"))?,
        pooled: correlation_set(rows, None, cfg, seed::label("pooled"))?,
    })
}

/// Paired bootstrap of the conditioned `r_pe_phi` difference between two variants
/// valued on the same trajectories.
pub fn flip(
    from: (&str, &[MechanismRow]),
    to: (&str, &[MechanismRow]),
    cfg: &MechanismConfig,
) -> Result<FlipReport> {
    let (a, b) = (from.1, to.1);
    if a.len() != b.len()
        || a.iter()
            .zip(b)
            .any(|(x, y)| x.id != y.id || x.energy != y.energy)
    {
        return Err(LabError::IdMismatch(
            "flip inputs must list the same trajectories in the same order".into(),
        ));
    }
    let bins = energy_bins_of(a, cfg)?;
    let pair = PAIRS[2];
    let difference = bootstrap_ci(
        a.len(),
        |idx| Ok(statistic(b, Some(&bins), idx, pair)? - statistic(a, Some(&bins), idx, pair)?),
        cfg.n_boot,
        seed::derive(cfg.seed, &[seed::label("flip")]),
    )?;
    Ok(FlipReport {
        from: from.0.to_string(),
        to: to.0.to_string(),
        difference,
    })
}

/// Per-variant correlations plus the flip of every later variant against the first.
pub fn mechanism_report(
    inputs: &[(String, Vec<MechanismRow>)],
    cfg: &MechanismConfig,
) -> Result<MechanismReport> {
    let variants = inputs
        .iter()
        .map(|(name, rows)| variant_mechanism(name, rows, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut flips = Vec::new();
    if let Some((base_name, base_rows)) = inputs.first() {
        for (name, rows) in &inputs[1..] {
            flips.push(flip((base_name, base_rows), (name, rows), cfg)?);
        }
    }
    Ok(MechanismReport {
        headline: Conditioning::WithinDecileMean,
        n_boot: cfg.n_boot,
        variants,
        flips,
    })
}

/// Scatter data: `id, bin, pe, energy, grad_var, phi`.
pub fn write_plot_data<W: Write>(
    rows: &[MechanismRow],
    cfg: &MechanismConfig,
    out: W,
) -> Result<()> {
    let bins = energy_bins_of(rows, cfg)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "bin", "pe", "energy", "grad_var", "phi"])
        .map_err(csv_err)?;
    for (r, b) in rows.iter().zip(&bins) {
        w.write_record([
            r.id.to_string(),
            b.to_string(),
            r.pe.to_string(),
            r.energy.to_string(),
            r.grad_var.to_string(),
            r.phi.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| LabError::Numeric(e.to_string()))
}

/// Coefficient of variation (sample sd over |mean|) within each bin of at least
/// `min_size` members, as `(bin, cv)`.
pub fn binned_cv(values: &[f64], bins: &[usize], min_size: usize) -> Vec<(usize, f64)> {
    let n_bins = bins.iter().max().map_or(0, |m| m + 1);
    (0..n_bins)
        .filter_map(|bin| {
            let xs: Vec<f64> = values
                .iter()
                .zip(bins)
                .filter(|(_, &b)| b == bin)
                .map(|(v, _)| *v)
                .collect();
            if xs.len() < min_size.max(2) {
                return None;
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            Some((bin, var.sqrt() / mean.abs()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook `1 − 6Σd²/(n(n²−1))`, valid without ties.
    fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (mid_ranks(x), mid_ranks(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let (x, y) = ([1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 4.0, 3.0]);
        let r = spearman(&x, &y).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        assert!((r - spearman_no_ties(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(LabError::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn conditioned_examples() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64).collect();
        let bins: Vec<usize> = (0..12).map(|i| i / 4).collect();
        assert!((conditioned_correlation(&a, &a, &bins).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((conditioned_correlation(&a, &neg, &bins).unwrap() + 1.0).abs() < 1e-12);
        assert!(conditioned_correlation(&a[..4], &a[..4], &[0, 0, 1, 1]).is_err());
    }

    #[test]
    fn simpson_confounder() {
        // energy dominates b, pe varies inside each energy bin
        let mut pe = Vec::new();
        let mut b = Vec::new();
        let mut bins = Vec::new();
        for bin in 0..5 {
            for j in 0..6 {
                let energy = 100.0 * bin as f64;
                let p = bin as f64 * 10.0 + j as f64;
                pe.push(p);
                b.push(energy - p);
                bins.push(bin);
            }
        }
        assert!(spearman(&pe, &b).unwrap() > 0.0);
        assert!((conditioned_correlation(&pe, &b, &bins).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_statistic() {
        let iv = bootstrap_ci(10, |_| Ok(0.25), 200, 1).unwrap();
        assert_eq!((iv.ci_lo, iv.point, iv.ci_hi), (0.25, 0.25, 0.25));
        assert!(bootstrap_ci(10, |_| Ok(0.0), 50, 1).is_err());
    }

    #[test]
    fn bootstrap_counts_degenerate_resamples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let iv = bootstrap_ci(
            4,
            |idx| spearman(&pick_vals(&x, idx), &pick_vals(&x, idx)),
            500,
            3,
        )
        .unwrap();
        assert!(iv.skipped > 0);
        assert!(iv.ci_lo <= iv.point && iv.point <= iv.ci_hi);
    }

    fn pick_vals(x: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| x[i]).collect()
    }

    #[test]
    fn identity_coupling_gives_unit_correlation() {
        let rows: Vec<MechanismRow> = (0..20)
            .map(|i| {
                let v = ((i * 13) % 20) as f64 + 1.0;
                MechanismRow {
                    id: i,
                    pe: (i % 7) as f64,
                    energy: i as f64,
                    grad_var: v,
                    phi: v,
                }
            })
            .collect();
        let cfg = MechanismConfig {
            n_boot: 200,
            ..MechanismConfig::default()
        };
        let m = variant_mechanism("stub", &rows, &cfg).unwrap();
        assert_eq!(m.n_bins, 4);
        assert!((m.within_decile_mean.r_var_phi.point - 1.0).abs() < 1e-12);
        assert!((m.pooled.r_var_phi.point - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bin_counts() {
        assert_eq!(bin_count(50, 10, 5), 10);
        assert_eq!(bin_count(20, 10, 5), 4);
        assert_eq!(bin_count(3, 10, 5), 1);
        assert_eq!(bin_count(500, 10, 5), 10);
    }

    #[test]
    fn cv_per_bin() {
        let cv = binned_cv(
            &[1.0, 1.0, 1.0, 2.0, 4.0, 6.0, 9.0],
            &[0, 0, 0, 1, 1, 1, 2],
            3,
        );
        assert_eq!(cv.len(), 2);
        assert_eq!(cv[0], (0, 0.0));
        assert!((cv[1].1 - 0.5).abs() < 1e-12);
    }
}
