//! Experiment harness: (m, n_mult, seed, loss-variant) grids with persistent
//! CSV records, the coupled m = coeff * n ln n schedule, and power-law fits
//! eps(D) = A * D^-alpha + C in log space.

use crate::diagnostics;
use crate::envs::{generate_dataset, Dataset, EnvSpec};
use crate::error::{Error, Result};
use crate::net::{train, KoopmanModel, Layout, TrainConfig};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Cov,
    Ctrl,
    Both,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cov => "+cov",
            Variant::Ctrl => "+ctrl",
            Variant::Both => "+both",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "+cov" => Ok(Variant::Cov),
            "+ctrl" => Ok(Variant::Ctrl),
            "+both" => Ok(Variant::Both),
            other => Err(Error::Format(format!("unknown variant `{other}`"))),
        }
    }

    /// (w_cov, w_ctrl) for this variant, taking magnitudes from the template.
    pub fn weights(&self, template: &TrainConfig) -> (f64, f64) {
        match self {
            Variant::Baseline => (0.0, 0.0),
            Variant::Cov => (template.w_cov, 0.0),
            Variant::Ctrl => (0.0, template.w_ctrl),
            Variant::Both => (template.w_cov, template.w_ctrl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub env: EnvSpec,
    pub m_values: Vec<usize>,
    pub n_mult_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            env: EnvSpec::damped_pendulum(),
            m_values: vec![1000, 4000, 16000, 64000, 140_000],
            n_mult_values: vec![1, 2, 4, 8, 16],
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec![Variant::Baseline],
            train: TrainConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.m_values.is_empty()
            || self.n_mult_values.is_empty()
            || self.seeds.is_empty()
            || self.variants.is_empty()
        {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub env: String,
    pub variant: String,
    pub m: usize,
    pub n_mult: usize,
    pub n: usize,
    pub seed: u64,
    pub eps_test: f64,
    pub kappa_g: f64,
    pub kappa_btb: f64,
    pub mean_offdiag_corr: f64,
    pub wall_s: f64,
    pub status: String,
}

impl ExperimentRecord {
    pub fn key(&self) -> String {
        format!("{}|{}|{}|{}|{}", self.env, self.variant, self.m, self.n_mult, self.seed)
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.env,
            self.variant,
            self.m,
            self.n_mult,
            self.n,
            self.seed,
            self.eps_test,
            self.kappa_g,
            self.kappa_btb,
            self.mean_offdiag_corr,
            self.wall_s,
            self.status
        )
    }
}

pub const RESULTS_HEADER: &str =
    "env,variant,m,n_mult,n,seed,eps_test,kappa_G,kappa_BtB,mean_offdiag_corr,wall_s,status";

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESULTS_HEADER {
                return Err(Error::Format(format!("unexpected results header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("results row {i} has {} fields", f.len())));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("row {i}: {e}")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("row {i}: {e}")));
        out.push(ExperimentRecord {
            env: f[0].to_string(),
            variant: f[1].to_string(),
            m: parse_u(f[2])?,
            n_mult: parse_u(f[3])?,
            n: parse_u(f[4])?,
            seed: f[5].parse().map_err(|e| Error::Format(format!("row {i}: {e}")))?,
            eps_test: parse_f(f[6])?,
            kappa_g: parse_f(f[7])?,
            kappa_btb: parse_f(f[8])?,
            mean_offdiag_corr: parse_f(f[9])?,
            wall_s: parse_f(f[10])?,
            status: f[11].to_string(),
        });
    }
    Ok(out)
}

fn append_record(path: &Path, rec: &ExperimentRecord) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{}", rec.csv_row())?;
    Ok(())
}

/// Train and diagnose one grid coordinate.
pub fn run_coordinate(
    data: &Dataset,
    variant: Variant,
    n_mult: usize,
    seed: u64,
    template: &TrainConfig,
) -> Result<(KoopmanModel, ExperimentRecord)> {
    let (w_cov, w_ctrl) = variant.weights(template);
    let cfg = TrainConfig {
        n_mult,
        seed,
        w_cov,
        w_ctrl,
        ..template.clone()
    };
    let (model, report) = train(data, &cfg)?;
    let n = Layout::new(data.env.n_x, data.env.n_u, n_mult).n;
    let (kappa_g, _) = diagnostics::gram_condition(&model, data)?;
    let kappa_btb = if data.env.n_u > 0 {
        diagnostics::control_condition(&model)?
    } else {
        f64::NAN
    };
    let (_, mean_corr, _) = diagnostics::feature_correlation(&model, data)?;
    let rec = ExperimentRecord {
        env: data.env.name().to_string(),
        variant: variant.as_str().to_string(),
        m: data.m,
        n_mult,
        n,
        seed,
        eps_test: report.eps_test,
        kappa_g,
        kappa_btb,
        mean_offdiag_corr: mean_corr,
        wall_s: report.wall_s,
        status: if report.diverged { "diverged".to_string() } else { "ok".to_string() },
    };
    Ok((model, rec))
}

/// Run every coordinate of the grid, skipping ones already recorded in
/// `out_dir/results.csv`; each finished record is appended immediately.
pub fn run_grid(cfg: &GridConfig, out_dir: &Path) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let results_path = out_dir.join("results.csv");
    let mut records = read_records(&results_path)?;
    let mut done: std::collections::BTreeSet<String> = records.iter().map(|r| r.key()).collect();

    for &m in &cfg.m_values {
        for &seed in &cfg.seeds {
            let mut dataset: Option<Dataset> = None;
            for &n_mult in &cfg.n_mult_values {
                for &variant in &cfg.variants {
                    let key = format!(
                        "{}|{}|{}|{}|{}",
                        cfg.env.name(),
                        variant.as_str(),
                        m,
                        n_mult,
                        seed
                    );
                    if done.contains(&key) {
                        continue;
                    }
                    if dataset.is_none() {
                        dataset = Some(generate_dataset(&cfg.env, m, cfg.train.t, seed)?);
                    }
                    let data = dataset.as_ref().unwrap();
                    let rec = match run_coordinate(data, variant, n_mult, seed, &cfg.train) {
                        Ok((_, rec)) => rec,
                        Err(e) => ExperimentRecord {
                            env: cfg.env.name().to_string(),
                            variant: variant.as_str().to_string(),
                            m,
                            n_mult,
                            n: Layout::new(cfg.env.n_x, cfg.env.n_u, n_mult).n,
                            seed,
                            eps_test: f64::NAN,
                            kappa_g: f64::NAN,
                            kappa_btb: f64::NAN,
                            mean_offdiag_corr: f64::NAN,
                            wall_s: 0.0,
                            status: format!("error:{e}").replace(',', ";"),
                        },
                    };
                    append_record(&results_path, &rec)?;
                    done.insert(rec.key());
                    records.push(rec);
                }
            }
        }
    }
    Ok(records)
}

/// m = round(coeff * n ln n), floored at 32.
pub fn coupled_schedule(coeff: f64, n_values: &[usize]) -> Vec<(usize, usize)> {
    assert!(coeff > 0.0);
    n_values
        .iter()
        .map(|&n| {
            assert!(n >= 2);
            let m = (coeff * n as f64 * (n as f64).ln()).round() as usize;
            (n, m.max(32))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub alpha: f64,
    pub c: f64,
    pub r2: f64,
    pub degenerate: bool,
    pub points: Vec<(f64, f64)>,
}

fn sse_log(points: &[(f64, f64)], a: f64, alpha: f64, c: f64) -> f64 {
    points
        .iter()
        .map(|&(d, e)| {
            let f = a * d.powf(-alpha) + c;
            if f <= 0.0 || !f.is_finite() {
                return f64::INFINITY;
            }
            let r = e.ln() - f.ln();
            r * r
        })
        .sum()
}

/// Closed-form log-linear regression of ln(eps - c) on ln D.
fn loglinear_at_c(points: &[(f64, f64)], c: f64) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(d, e) in points {
        let y = (e - c).max(1e-300).ln();
        let x = d.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some((intercept.exp(), -slope))
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Fit eps(D) = A * D^-alpha + C by minimizing log-space residuals:
/// C grid + closed-form regression, then damped Gauss-Newton refinement on
/// (ln A, alpha, logit-scaled C).
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Config("need >= 3 distinct D values".into()));
    }
    if points.iter().any(|&(d, e)| !(d > 0.0) || !(e > 0.0) || !e.is_finite()) {
        return Err(Error::Config("all (D, eps) must be positive and finite".into()));
    }
    let min_eps = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_eps = points.iter().map(|p| p.1).fold(0.0_f64, f64::max);
    if (max_eps - min_eps) / max_eps < 1e-14 {
        return Ok(PowerLawFit {
            a: 0.0,
            alpha: 0.0,
            c: min_eps,
            r2: 1.0,
            degenerate: true,
            points: points.to_vec(),
        });
    }

    // grid over the additive floor
    let mut candidates = vec![0.0];
    let (lo, hi) = (min_eps * 1e-3, min_eps * 0.999);
    for i in 0..40 {
        let frac = i as f64 / 39.0;
        candidates.push(lo * (hi / lo).powf(frac));
    }
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0); // (sse, a, alpha, c)
    for &c in &candidates {
        if let Some((a, alpha)) = loglinear_at_c(points, c) {
            let sse = sse_log(points, a, alpha, c);
            if sse < best.0 {
                best = (sse, a, alpha, c);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Diverged("power-law grid search found no finite fit".into()));
    }

    // Gauss-Newton refinement with Levenberg damping on (ln A, alpha, t)
    let c_max = min_eps;
    let mut theta = [
        best.1.max(1e-300).ln(),
        best.2,
        if best.3 > 0.0 { logit(best.3 / c_max) } else { logit(1e-6) },
    ];
    let mut lambda = 1e-8;
    let mut cur_sse = {
        let (a, alpha, c) = (theta[0].exp(), theta[1], c_max * sigmoid(theta[2]));
        sse_log(points, a, alpha, c)
    };
    for _ in 0..200 {
        let (a, alpha, c) = (theta[0].exp(), theta[1], c_max * sigmoid(theta[2]));
        let n_pts = points.len();
        let mut jtj = Matrix::zeros(3, 3);
        let mut jtr = [0.0; 3];
        for i in 0..n_pts {
            let (d, e) = points[i];
            let pow = a * d.powf(-alpha);
            let f = pow + c;
            if f <= 0.0 || !f.is_finite() {
                continue;
            }
            let r = e.ln() - f.ln();
            let s = sigmoid(theta[2]);
            let j = [-pow / f, pow * d.ln() / f, -c_max * s * (1.0 - s) / f];
            for p in 0..3 {
                jtr[p] += j[p] * r;
                for q in 0..3 {
                    jtj[(p, q)] += j[p] * j[q];
                }
            }
        }
        // solve (J'J + lambda I) delta = J'r, step theta -= delta
        let mut lhs = jtj.clone();
        for p in 0..3 {
            lhs[(p, p)] += lambda + 1e-300;
        }
        let rhs = Matrix::from_vec(3, 1, jtr.to_vec()).unwrap();
        let delta = match lhs.solve_spd(&rhs) {
            Ok(d) => d,
            Err(_) => {
                lambda *= 10.0;
                continue;
            }
        };
        let trial = [
            theta[0] - delta[(0, 0)],
            theta[1] - delta[(1, 0)],
            theta[2] - delta[(2, 0)],
        ];
        let trial_sse = {
            let (a, alpha, c) = (trial[0].exp(), trial[1], c_max * sigmoid(trial[2]));
            sse_log(points, a, alpha, c)
        };
        if trial_sse.is_finite() && trial_sse <= cur_sse {
            theta = trial;
            cur_sse = trial_sse;
            lambda = (lambda * 0.3).max(1e-14);
        } else {
            lambda *= 10.0;
        }
    }

    // keep whichever of {grid best, refined} scores lower
    let refined = (
        cur_sse,
        theta[0].exp(),
        theta[1],
        c_max * sigmoid(theta[2]),
    );
    let (sse, a, alpha, c) = if refined.0 < best.0 {
        refined
    } else {
        best
    };
    let mean_log: f64 = points.iter().map(|p| p.1.ln()).sum::<f64>() / points.len() as f64;
    let sst: f64 = points.iter().map(|p| (p.1.ln() - mean_log).powi(2)).sum();
    let r2 = 1.0 - sse / sst;
    Ok(PowerLawFit {
        a,
        alpha,
        c,
        r2,
        degenerate: false,
        points: points.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    M,
    N,
}

/// Table-2 caption cutoff: alpha_n fits drop the small-sample points.
pub const ALPHA_N_MIN_M: usize = 10_000;

/// Group usable records into per-curve (D, eps) point sets. Axis M: one
/// curve per (env, variant, n_mult, seed) over m. Axis N: one curve per
/// (env, variant, m, seed) over n, excluding m < 10^4.
pub fn group_points(records: &[ExperimentRecord], axis: Axis) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if r.status != "ok" || !r.eps_test.is_finite() || r.eps_test <= 0.0 {
            continue;
        }
        let (key, d) = match axis {
            Axis::M => (
                format!("{}|{}|n_mult={}|seed={}", r.env, r.variant, r.n_mult, r.seed),
                r.m as f64,
            ),
            Axis::N => {
                if r.m < ALPHA_N_MIN_M {
                    continue;
                }
                (
                    format!("{}|{}|m={}|seed={}", r.env, r.variant, r.m, r.seed),
                    r.n as f64,
                )
            }
        };
        groups.entry(key).or_default().push((d, r.eps_test));
    }
    groups
}

/// Fit each group with enough distinct D values.
pub fn fit_groups(
    records: &[ExperimentRecord],
    axis: Axis,
) -> BTreeMap<String, PowerLawFit> {
    let mut out = BTreeMap::new();
    for (key, pts) in group_points(records, axis) {
        if let Ok(fit) = fit_power_law(&pts) {
            out.insert(key, fit);
        }
    }
    out
}

/// Grouped fits as {group: {A, alpha, C, r2, n_points, degenerate}} JSON.
pub fn write_fits(fits: &BTreeMap<String, PowerLawFit>, path: &Path) -> Result<()> {
    let grouped: BTreeMap<&String, serde_json::Value> = fits
        .iter()
        .map(|(k, v)| {
            (
                k,
                serde_json::json!({
                    "A": v.a,
                    "alpha": v.alpha,
                    "C": v.c,
                    "r2": v.r2,
                    "n_points": v.points.len(),
                    "degenerate": v.degenerate,
                }),
            )
        })
        .collect();
    let mut jf = std::fs::File::create(path)?;
    jf.write_all(serde_json::to_string_pretty(&grouped)?.as_bytes())?;
    Ok(())
}

/// Flat records CSV plus grouped fits JSON.
pub fn export_results(
    records: &[ExperimentRecord],
    fits: &BTreeMap<String, PowerLawFit>,
    dir: &Path,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to export".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("results.csv"))?;
    writeln!(f, "{RESULTS_HEADER}")?;
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    write_fits(fits, &dir.join("fits.json"))
}
