//! Bootstrap inference on matrices of estimator draws: percentile, basic,
//! calibrated and studentized confidence intervals, cross-validation error
//! curves with bootstrap bands, and highest-density-region intervals.
//!
//! Everything here is a pure reduction over draw matrices; the draws
//! themselves come either from a trained generator (cheap) or from the exact
//! solvers (ground truth), via the batch runners at the bottom.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{Dataset, ModelSpec};
use crate::net::{assemble_batch, Generator};
use crate::oracle;
use crate::stats::{quantile_type7, quantile_type7_sorted, sample_sd};
use crate::weights::{SubgroupMap, WeightDraw, WeightLaw};

/// A matrix of bootstrap estimator draws, one row per draw. Second-level
/// draws additionally record which first-level draw each row resamples.
#[derive(Debug, Clone)]
pub struct DrawMatrix {
    values: Array2<f64>,
    theta_hat: Array1<f64>,
    parents: Option<Vec<usize>>,
}

impl DrawMatrix {
    pub fn single(values: Array2<f64>, theta_hat: Array1<f64>) -> Result<Self> {
        Self::build(values, theta_hat, None)
    }

    pub fn second_level(
        values: Array2<f64>,
        theta_hat: Array1<f64>,
        parents: Vec<usize>,
    ) -> Result<Self> {
        Self::build(values, theta_hat, Some(parents))
    }

    fn build(
        values: Array2<f64>,
        theta_hat: Array1<f64>,
        parents: Option<Vec<usize>>,
    ) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(invalid(format!("need at least 2 draws, got {}", values.nrows())));
        }
        if theta_hat.len() != values.ncols() {
            return Err(invalid(format!(
                "estimate has {} coordinates, draws have {}",
                theta_hat.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) || theta_hat.iter().any(|v| !v.is_finite()) {
            return Err(invalid("draws and estimate must be finite"));
        }
        if let Some(p) = &parents {
            if p.len() != values.nrows() {
                return Err(invalid(format!(
                    "{} parent indices for {} draws",
                    p.len(),
                    values.nrows()
                )));
            }
        }
        Ok(DrawMatrix { values, theta_hat, parents })
    }

    pub fn b(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn theta_hat(&self) -> ArrayView1<'_, f64> {
        self.theta_hat.view()
    }

    pub fn parents(&self) -> Option<&[usize]> {
        self.parents.as_deref()
    }

    fn require_single(&self) -> Result<()> {
        if self.parents.is_some() {
            return Err(invalid("expected single-level draws, got second-level"));
        }
        Ok(())
    }

    /// CSV with header `b[,c],coef_0,...`; second-level rows carry their
    /// parent in `b` and a running within-parent counter in `c`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = vec!["b".into()];
        if self.parents.is_some() {
            header.push("c".into());
        }
        header.extend((0..self.p()).map(|j| format!("coef_{j}")));
        w.write_record(&header)?;
        let mut per_parent = std::collections::HashMap::new();
        for r in 0..self.b() {
            let mut rec: Vec<String> = Vec::with_capacity(self.p() + 2);
            match &self.parents {
                Some(parents) => {
                    let c = per_parent.entry(parents[r]).or_insert(0usize);
                    rec.push(parents[r].to_string());
                    rec.push(c.to_string());
                    *c += 1;
                }
                None => rec.push(r.to_string()),
            }
            rec.extend(self.values.row(r).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read draws back; the full-data estimate travels separately. Lines
    /// starting with `#` (e.g. a timestamp stamped by the CLI) are skipped.
    pub fn read_csv(path: &Path, theta_hat: Array1<f64>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let headers = r.headers()?.clone();
        let second = headers.get(1) == Some("c");
        let skip = if second { 2 } else { 1 };
        let p = headers.len().checked_sub(skip).filter(|&p| p > 0).ok_or_else(|| {
            invalid(format!("{}: draw file needs coefficient columns", path.display()))
        })?;
        let mut values = Vec::new();
        let mut parents = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != p + skip {
                return Err(invalid(format!(
                    "{}: row has {} fields, expected {}",
                    path.display(),
                    rec.len(),
                    p + skip
                )));
            }
            if second {
                parents.push(
                    rec[0]
                        .parse::<usize>()
                        .map_err(|e| invalid(format!("bad parent index '{}': {e}", &rec[0])))?,
                );
            }
            for f in rec.iter().skip(skip) {
                values.push(
                    f.parse::<f64>().map_err(|e| invalid(format!("bad value '{f}': {e}")))?,
                );
            }
        }
        let b = values.len() / p;
        let values = Array2::from_shape_vec((b, p), values).expect("consistent row widths");
        if second {
            Self::second_level(values, theta_hat, parents)
        } else {
            Self::single(values, theta_hat)
        }
    }
}

/// How a confidence interval was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CIMethod {
    Percentile,
    Basic,
    Calibrated,
    Studentized,
}

impl std::fmt::Display for CIMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CIMethod::Percentile => "percentile",
            CIMethod::Basic => "basic",
            CIMethod::Calibrated => "calibrated",
            CIMethod::Studentized => "studentized",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CIMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "percentile" => Ok(CIMethod::Percentile),
            "basic" => Ok(CIMethod::Basic),
            "calibrated" => Ok(CIMethod::Calibrated),
            "studentized" => Ok(CIMethod::Studentized),
            other => Err(invalid(format!(
                "unknown CI method '{other}' (percentile, basic, calibrated, studentized)"
            ))),
        }
    }
}

/// Per-coordinate confidence bounds plus method-specific diagnostics.
#[derive(Debug, Clone)]
pub struct CIResult {
    pub method: CIMethod,
    pub level: f64,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    /// Calibrated tail levels actually used, per coordinate.
    pub alpha_lower: Option<Array1<f64>>,
    pub alpha_upper: Option<Array1<f64>>,
    /// Studentized: standard deviation of the first-level draws.
    pub s_hat: Option<Array1<f64>>,
    /// Studentized: mean of the per-parent second-level spreads that survived.
    pub s_star_mean: Option<Array1<f64>>,
    /// Studentized: per-coordinate count of parents dropped for zero spread.
    pub dropped_parents: Option<Vec<usize>>,
}

impl CIResult {
    fn new(method: CIMethod, level: f64, lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        for j in 0..lower.len() {
            if lower[j] > upper[j] {
                return Err(crate::error::numeric(format!(
                    "{method} interval inverted at coordinate {j}: ({}, {})",
                    lower[j], upper[j]
                )));
            }
        }
        Ok(CIResult {
            method,
            level,
            lower,
            upper,
            alpha_lower: None,
            alpha_upper: None,
            s_hat: None,
            s_star_mean: None,
            dropped_parents: None,
        })
    }

    /// CSV: `coordinate,lower,upper`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["coordinate", "lower", "upper"])?;
        for j in 0..self.lower.len() {
            w.write_record([
                j.to_string(),
                format!("{:.17e}", self.lower[j]),
                format!("{:.17e}", self.upper[j]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let value = serde_json::json!({
            "method": self.method.to_string(),
            "level": self.level,
            "lower": self.lower.to_vec(),
            "upper": self.upper.to_vec(),
            "alpha_lower": self.alpha_lower.as_ref().map(|a| a.to_vec()),
            "alpha_upper": self.alpha_upper.as_ref().map(|a| a.to_vec()),
            "s_hat": self.s_hat.as_ref().map(|a| a.to_vec()),
            "s_star_mean": self.s_star_mean.as_ref().map(|a| a.to_vec()),
            "dropped_parents": self.dropped_parents,
        });
        std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
        Ok(())
    }
}

fn check_level(level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level {level} must lie in (0, 1)")));
    }
    Ok(((1.0 - level) / 2.0, (1.0 + level) / 2.0))
}

/// Column quantiles of a draw matrix at the two tail probabilities.
fn column_bounds(values: ArrayView2<f64>, lo: f64, hi: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    let p = values.ncols();
    let mut qlo = Array1::zeros(p);
    let mut qhi = Array1::zeros(p);
    for j in 0..p {
        let mut col: Vec<f64> = values.column(j).to_vec();
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
        qlo[j] = quantile_type7_sorted(&col, lo)?;
        qhi[j] = quantile_type7_sorted(&col, hi)?;
    }
    Ok((qlo, qhi))
}

/// Percentile interval: the draw distribution's own central quantiles.
pub fn percentile_ci(draws: &DrawMatrix, level: f64) -> Result<CIResult> {
    draws.require_single()?;
    let (lo, hi) = check_level(level)?;
    let (qlo, qhi) = column_bounds(draws.values(), lo, hi)?;
    CIResult::new(CIMethod::Percentile, level, qlo, qhi)
}

/// Basic interval: percentile bounds reflected about twice the estimate.
pub fn basic_ci(draws: &DrawMatrix, level: f64) -> Result<CIResult> {
    draws.require_single()?;
    let (lo, hi) = check_level(level)?;
    let (qlo, qhi) = column_bounds(draws.values(), lo, hi)?;
    let lower = draws.theta_hat().mapv(|t| 2.0 * t) - &qhi;
    let upper = draws.theta_hat().mapv(|t| 2.0 * t) - &qlo;
    CIResult::new(CIMethod::Basic, level, lower, upper)
}

/// Group second-level rows by parent; every first-level draw must appear with
/// at least two children.
fn group_by_parent(first: &DrawMatrix, second: &DrawMatrix) -> Result<Vec<Vec<usize>>> {
    let parents = second
        .parents()
        .ok_or_else(|| invalid("second argument must carry second-level parent indices"))?;
    if second.p() != first.p() {
        return Err(invalid(format!(
            "second-level draws have {} coordinates, first level has {}",
            second.p(),
            first.p()
        )));
    }
    let b = first.b();
    let mut groups = vec![Vec::new(); b];
    for (row, &parent) in parents.iter().enumerate() {
        if parent >= b {
            return Err(invalid(format!("parent index {parent} out of range for {b} draws")));
        }
        groups[parent].push(row);
    }
    if let Some(missing) = groups.iter().position(|g| g.len() < 2) {
        return Err(invalid(format!(
            "first-level draw {missing} has {} second-level draws; need at least 2 per parent",
            groups[missing].len()
        )));
    }
    Ok(groups)
}

/// Clamped order statistic `u_(ceil(b * beta))` of the per-parent exceedance
/// fractions: the calibrated tail level targeting `beta`.
fn calibrated_level(sorted_u: &[f64], beta: f64) -> f64 {
    let b = sorted_u.len();
    let k = (b as f64 * beta).ceil().max(1.0) as usize;
    let raw = sorted_u[k.min(b) - 1];
    raw.clamp(1.0 / b as f64, 1.0 - 1.0 / b as f64)
}

/// Double-bootstrap calibrated interval. Each tail's quantile level is
/// re-estimated from how often second-level deviations exceed their parent's
/// first-level deviation, then plugged into the basic-interval form.
pub fn calibrated_ci(first: &DrawMatrix, second: &DrawMatrix, level: f64) -> Result<CIResult> {
    first.require_single()?;
    let (beta_lo, beta_hi) = check_level(level)?;
    let groups = group_by_parent(first, second)?;
    let (b, p) = (first.b(), first.p());
    let mut lower = Array1::zeros(p);
    let mut upper = Array1::zeros(p);
    let mut alpha_lower = Array1::zeros(p);
    let mut alpha_upper = Array1::zeros(p);
    for j in 0..p {
        let theta = first.theta_hat()[j];
        let mut u = Vec::with_capacity(b);
        for (parent, rows) in groups.iter().enumerate() {
            let t_star = first.values()[[parent, j]] - theta;
            let exceed = rows
                .iter()
                .filter(|&&r| second.values()[[r, j]] - first.values()[[parent, j]] > t_star)
                .count();
            u.push(exceed as f64 / rows.len() as f64);
        }
        u.sort_by(|a, c| a.partial_cmp(c).expect("finite fractions"));
        let a_lo = calibrated_level(&u, beta_lo);
        let a_hi = calibrated_level(&u, beta_hi);
        let mut col: Vec<f64> = first.values().column(j).to_vec();
        col.sort_by(|a, c| a.partial_cmp(c).expect("finite draws"));
        let q_lo = quantile_type7_sorted(&col, a_lo)?;
        let q_hi = quantile_type7_sorted(&col, a_hi)?;
        lower[j] = 2.0 * theta - q_hi;
        upper[j] = 2.0 * theta - q_lo;
        alpha_lower[j] = a_lo;
        alpha_upper[j] = a_hi;
    }
    let mut result = CIResult::new(CIMethod::Calibrated, level, lower, upper)?;
    result.alpha_lower = Some(alpha_lower);
    result.alpha_upper = Some(alpha_upper);
    Ok(result)
}

/// Studentized interval: first-level deviations are scaled by their own
/// second-level spread, the scaled quantiles are then re-inflated by the
/// first-level standard deviation. Parents whose spread is exactly zero are
/// dropped (with a warning) rather than producing infinities.
pub fn studentized_ci(first: &DrawMatrix, second: &DrawMatrix, level: f64) -> Result<CIResult> {
    first.require_single()?;
    let (beta_lo, beta_hi) = check_level(level)?;
    let groups = group_by_parent(first, second)?;
    let p = first.p();
    let mut lower = Array1::zeros(p);
    let mut upper = Array1::zeros(p);
    let mut s_hat = Array1::zeros(p);
    let mut s_star_mean = Array1::zeros(p);
    let mut dropped = vec![0usize; p];
    for j in 0..p {
        let theta = first.theta_hat()[j];
        let mut z = Vec::with_capacity(groups.len());
        let mut spread_sum = 0.0;
        for (parent, rows) in groups.iter().enumerate() {
            let devs: Vec<f64> = rows
                .iter()
                .map(|&r| second.values()[[r, j]] - first.values()[[parent, j]])
                .collect();
            let s_star = sample_sd(&devs);
            if s_star == 0.0 {
                dropped[j] += 1;
                continue;
            }
            spread_sum += s_star;
            z.push((first.values()[[parent, j]] - theta) / s_star);
        }
        if z.len() < 2 {
            return Err(invalid(format!(
                "coordinate {j}: only {} parents with nonzero second-level spread",
                z.len()
            )));
        }
        if dropped[j] > 0 {
            log::warn!(
                "studentized_ci: dropped {} of {} parents with zero spread at coordinate {j}",
                dropped[j],
                groups.len()
            );
        }
        z.sort_by(|a, c| a.partial_cmp(c).expect("finite statistics"));
        let t_lo = quantile_type7_sorted(&z, beta_lo)?;
        let t_hi = quantile_type7_sorted(&z, beta_hi)?;
        let col: Vec<f64> = first.values().column(j).to_vec();
        let s = sample_sd(&col);
        s_hat[j] = s;
        s_star_mean[j] = spread_sum / z.len() as f64;
        lower[j] = theta - t_hi * s;
        upper[j] = theta - t_lo * s;
    }
    let mut result = CIResult::new(CIMethod::Studentized, level, lower, upper)?;
    result.s_hat = Some(s_hat);
    result.s_star_mean = Some(s_star_mean);
    result.dropped_parents = Some(dropped);
    Ok(result)
}

/// Cross-validation curve over a penalty grid, with bootstrap bands and the
/// distribution of per-draw minimizers.
#[derive(Debug, Clone)]
pub struct CVResult {
    pub lambda_grid: Vec<f64>,
    /// `b x l` mean held-out errors, averaged over folds.
    pub mean_errors: Array2<f64>,
    /// Average of `mean_errors` over draws, per grid point.
    pub mean_curve: Array1<f64>,
    pub band_lower: Array1<f64>,
    pub band_upper: Array1<f64>,
    /// Per-draw minimizing index into the grid (smallest index on ties).
    pub minimizer_indices: Vec<usize>,
    pub minimizer_lambdas: Vec<f64>,
    /// Classical curve computed from all-ones-weight solutions, if provided.
    pub plain_curve: Option<Array1<f64>>,
}

impl CVResult {
    /// Most frequent minimizer grid index (smallest index on count ties).
    pub fn minimizer_mode(&self) -> usize {
        let l = self.lambda_grid.len();
        let mut counts = vec![0usize; l];
        for &idx in &self.minimizer_indices {
            counts[idx] += 1;
        }
        (0..l).max_by_key(|&i| (counts[i], l - i)).expect("nonempty grid")
    }

    /// CSV: `lambda,mean,lower,upper[,plain]`.
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["lambda", "mean", "lower", "upper"];
        if self.plain_curve.is_some() {
            header.push("plain");
        }
        w.write_record(&header)?;
        for l in 0..self.lambda_grid.len() {
            let mut rec = vec![
                format!("{:.17e}", self.lambda_grid[l]),
                format!("{:.17e}", self.mean_curve[l]),
                format!("{:.17e}", self.band_lower[l]),
                format!("{:.17e}", self.band_upper[l]),
            ];
            if let Some(plain) = &self.plain_curve {
                rec.push(format!("{:.17e}", plain[l]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let value = serde_json::json!({
            "lambda_grid": self.lambda_grid,
            "minimizer_lambdas": self.minimizer_lambdas,
            "minimizer_mode_index": self.minimizer_mode(),
            "minimizer_mode_lambda": self.lambda_grid[self.minimizer_mode()],
        });
        std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
        Ok(())
    }
}

/// Build the CV error curve from precomputed per-(draw, fold, lambda)
/// solutions: `solutions[b, k, l, .]` was fitted with fold `k` held out at
/// `lambda_grid[l]`, and is scored by the plain mean loss on that fold.
#[allow(clippy::too_many_arguments)]
pub fn cv_curve(
    solutions: ArrayView4<f64>,
    plain_solutions: Option<ArrayView3<f64>>,
    spec: &ModelSpec,
    data: &Dataset,
    map: &SubgroupMap,
    lambda_grid: &[f64],
    eta: Option<f64>,
) -> Result<CVResult> {
    let (b, k_folds, l, p) = solutions.dim();
    if lambda_grid.is_empty() || l != lambda_grid.len() {
        return Err(invalid(format!(
            "solutions cover {l} grid points, lambda grid has {}",
            lambda_grid.len()
        )));
    }
    if b == 0 || k_folds == 0 {
        return Err(invalid("need at least one draw and one fold"));
    }
    let x = data.x_required()?;
    if p != x.ncols() {
        return Err(invalid(format!("solutions have {p} coordinates, design has {}", x.ncols())));
    }
    let folds: Vec<Vec<usize>> = (0..k_folds)
        .map(|k| crate::weights::cv_fold_observations(map, k_folds, k))
        .collect::<Result<_>>()?;

    let held_out_error = |theta: ArrayView1<f64>, fold: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &i in fold {
            let t = x.row(i).dot(&theta);
            total += spec.loss_at(t, data.y()[i], eta)?;
        }
        Ok(total / fold.len() as f64)
    };

    let mut mean_errors = Array2::zeros((b, l));
    for bi in 0..b {
        for li in 0..l {
            let mut acc = 0.0;
            for (ki, fold) in folds.iter().enumerate() {
                acc += held_out_error(solutions.slice(ndarray::s![bi, ki, li, ..]), fold)?;
            }
            mean_errors[[bi, li]] = acc / k_folds as f64;
        }
    }
    let mut band_lower = Array1::zeros(l);
    let mut band_upper = Array1::zeros(l);
    for li in 0..l {
        let col: Vec<f64> = mean_errors.column(li).to_vec();
        band_lower[li] = quantile_type7(&col, 0.025)?;
        band_upper[li] = quantile_type7(&col, 0.975)?;
    }
    let mean_curve = mean_errors.mean_axis(Axis(0)).expect("b >= 1");
    let minimizer_indices: Vec<usize> = (0..b)
        .map(|bi| {
            let row = mean_errors.row(bi);
            let mut best = 0;
            for li in 1..l {
                if row[li] < row[best] {
                    best = li;
                }
            }
            best
        })
        .collect();
    let minimizer_lambdas = minimizer_indices.iter().map(|&i| lambda_grid[i]).collect();

    let plain_curve = match plain_solutions {
        Some(plain) => {
            let (pk, pl, pp) = plain.dim();
            if pk != k_folds || pl != l || pp != p {
                return Err(invalid(format!(
                    "plain solutions are {pk}x{pl}x{pp}, expected {k_folds}x{l}x{p}"
                )));
            }
            let mut curve = Array1::zeros(l);
            for li in 0..l {
                let mut acc = 0.0;
                for (ki, fold) in folds.iter().enumerate() {
                    acc += held_out_error(plain.slice(ndarray::s![ki, li, ..]), fold)?;
                }
                curve[li] = acc / k_folds as f64;
            }
            Some(curve)
        }
        None => None,
    };

    Ok(CVResult {
        lambda_grid: lambda_grid.to_vec(),
        mean_errors,
        mean_curve,
        band_lower,
        band_upper,
        minimizer_indices,
        minimizer_lambdas,
        plain_curve,
    })
}

/// Highest-density region of a one-dimensional sample.
#[derive(Debug, Clone)]
pub struct HdrResult {
    /// Disjoint intervals in increasing order.
    pub intervals: Vec<(f64, f64)>,
    /// Density threshold defining the region.
    pub threshold: f64,
    /// Estimated probability mass actually covered.
    pub mass: f64,
    pub total_width: f64,
}

/// Highest-density region from a Gaussian kernel density estimate
/// (Silverman bandwidth, binned evaluation); the density threshold is found
/// by bisection until the covered mass is within 0.001 of `level`.
pub fn hdr_interval(samples: &[f64], level: f64) -> Result<HdrResult> {
    const GRID: usize = 8192;
    check_level(level)?;
    if samples.len() < 100 {
        return Err(invalid(format!(
            "highest-density regions need at least 100 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("samples must be finite"));
    }
    let n = samples.len();
    let sd = sample_sd(samples);
    let iqr = quantile_type7(samples, 0.75)? - quantile_type7(samples, 0.25)?;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(invalid("sample is degenerate; no density to estimate"));
    }
    let bw = 0.9 * spread * (n as f64).powf(-0.2);
    let (smin, smax) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let lo = smin - 5.0 * bw;
    let hi = smax + 5.0 * bw;
    let step = (hi - lo) / (GRID - 1) as f64;

    // Linear binning followed by discrete Gaussian convolution.
    let mut bins = vec![0.0f64; GRID];
    for &v in samples {
        let pos = (v - lo) / step;
        let g = pos.floor() as usize;
        let frac = pos - g as f64;
        bins[g] += 1.0 - frac;
        if g + 1 < GRID {
            bins[g + 1] += frac;
        }
    }
    let half_width = (5.0 * bw / step).ceil() as usize;
    let kernel: Vec<f64> = (0..=half_width)
        .map(|d| (-0.5 * (d as f64 * step / bw).powi(2)).exp())
        .collect();
    let mut density = vec![0.0f64; GRID];
    for g in 0..GRID {
        if bins[g] == 0.0 {
            continue;
        }
        let from = g.saturating_sub(half_width);
        let to = (g + half_width).min(GRID - 1);
        for t in from..=to {
            density[t] += bins[g] * kernel[g.abs_diff(t)];
        }
    }
    let total: f64 = density.iter().sum::<f64>() * step;
    density.iter_mut().for_each(|d| *d /= total);

    // Bisection on the density threshold; mass decreases as it rises.
    let mass_at = |t: f64| -> f64 {
        density.iter().filter(|&&d| d >= t).sum::<f64>() * step
    };
    let mut t_lo = 0.0;
    let mut t_hi = density.iter().fold(0.0f64, |m, &d| m.max(d));
    let mut threshold = 0.0;
    let mut mass = 1.0;
    for _ in 0..200 {
        let t = 0.5 * (t_lo + t_hi);
        let m = mass_at(t);
        if (m - level).abs() <= 0.001 {
            threshold = t;
            mass = m;
            break;
        }
        if m > level {
            t_lo = t;
        } else {
            t_hi = t;
        }
        threshold = t;
        mass = m;
    }
    if (mass - level).abs() > 0.001 {
        return Err(crate::error::numeric(format!(
            "density level set mass {mass:.4} did not meet {level} within 0.001"
        )));
    }

    // Contiguous runs above the threshold, with interpolated edges.
    let mut intervals = Vec::new();
    let mut start: Option<f64> = None;
    let grid_x = |g: usize| lo + g as f64 * step;
    for g in 0..GRID {
        let above = density[g] >= threshold;
        match (above, start) {
            (true, None) => {
                let x = if g > 0 && density[g] > density[g - 1] {
                    let f0 = density[g - 1];
                    let f1 = density[g];
                    grid_x(g - 1) + step * (threshold - f0) / (f1 - f0)
                } else {
                    grid_x(g)
                };
                start = Some(x);
            }
            (false, Some(s)) => {
                let f0 = density[g - 1];
                let f1 = density[g];
                let x = if f0 > f1 {
                    grid_x(g - 1) + step * (f0 - threshold) / (f0 - f1)
                } else {
                    grid_x(g - 1)
                };
                intervals.push((s, x));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push((s, grid_x(GRID - 1)));
    }
    let total_width = intervals.iter().map(|(a, b)| b - a).sum();
    Ok(HdrResult { intervals, threshold, mass, total_width })
}

/// Sample a matrix of subgroup weight vectors (one row per draw), keeping the
/// full draws so two-level laws retain their parents.
pub fn draw_alphas(
    law: &WeightLaw,
    s: usize,
    b: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<WeightDraw>)> {
    if b == 0 {
        return Err(invalid("need at least one draw"));
    }
    let mut rng = crate::rng::stream(seed, DRAW_STREAM);
    let mut alphas = Array2::zeros((b, s));
    let mut draws = Vec::with_capacity(b);
    for r in 0..b {
        let draw = crate::weights::sample_weights_with(law, s, &mut rng)?;
        alphas.row_mut(r).assign(&ArrayView1::from(&draw.alpha[..]));
        draws.push(draw);
    }
    Ok((alphas, draws))
}

const DRAW_STREAM: u64 = 0xd4a3_0b17;

/// For each first-level draw, sample `c` second-level weight vectors from its
/// conditional law; returns the stacked matrix and each row's parent index.
pub fn draw_second_level(
    parents: &[WeightDraw],
    c: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if parents.is_empty() || c < 2 {
        return Err(invalid("second level needs parents and at least 2 draws per parent"));
    }
    let s = parents[0].alpha.len();
    let mut rng = crate::rng::stream(seed, DRAW_STREAM ^ 1);
    let mut alphas = Array2::zeros((parents.len() * c, s));
    let mut idx = Vec::with_capacity(parents.len() * c);
    for (bi, parent) in parents.iter().enumerate() {
        for ci in 0..c {
            let draw = crate::weights::sample_second_level_with(parent, &mut rng)?;
            alphas.row_mut(bi * c + ci).assign(&ArrayView1::from(&draw.alpha[..]));
            idx.push(bi);
        }
    }
    Ok((alphas, idx))
}

/// Solve one weighted problem per alpha row with the exact solvers.
pub fn solve_draws_oracle(
    spec: &ModelSpec,
    data: &Dataset,
    map: &SubgroupMap,
    alphas: ArrayView2<f64>,
    lambda: f64,
    eta: Option<f64>,
) -> Result<Array2<f64>> {
    if alphas.ncols() != map.s() {
        return Err(invalid(format!(
            "alpha rows have {} groups, map has {}",
            alphas.ncols(),
            map.s()
        )));
    }
    let rows: Vec<Array1<f64>> = (0..alphas.nrows())
        .into_par_iter()
        .map(|r| {
            let w = map.expand(&alphas.row(r).to_vec())?;
            Ok(oracle::solve(spec, data, &w, lambda, eta)?.theta)
        })
        .collect::<Result<_>>()?;
    let p = rows[0].len();
    let mut out = Array2::zeros((rows.len(), p));
    for (r, theta) in rows.iter().enumerate() {
        out.row_mut(r).assign(theta);
    }
    Ok(out)
}

/// Evaluate the generator on every alpha row at fixed tuning values.
pub fn solve_draws_generator(
    gen: &Generator,
    alphas: ArrayView2<f64>,
    lambda: Option<f64>,
    eta: Option<f64>,
) -> Result<Array2<f64>> {
    let b = alphas.nrows();
    let lambdas: Option<Vec<f64>> = lambda.map(|l| vec![l; b]);
    let etas: Option<Vec<f64>> = eta.map(|e| vec![e; b]);
    let inputs =
        assemble_batch(gen.arch(), alphas, lambdas.as_deref(), etas.as_deref())?;
    let (out, _) = gen.forward_batch(inputs.view())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;
    use ndarray::{array, Array4};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn single(values: Array2<f64>, theta: Array1<f64>) -> DrawMatrix {
        DrawMatrix::single(values, theta).unwrap()
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let values = Array2::from_shape_fn((100, 1), |(r, _)| (r + 1) as f64);
        let draws = single(values, array![50.0]);
        let ci = percentile_ci(&draws, 0.95).unwrap();
        assert!((ci.lower[0] - 3.475).abs() < 1e-12, "lower {}", ci.lower[0]);
        assert!((ci.upper[0] - 97.525).abs() < 1e-12, "upper {}", ci.upper[0]);
    }

    #[test]
    fn constant_draws_collapse_the_interval() {
        let values = Array2::from_elem((25, 2), 4.2);
        let draws = single(values, array![4.2, 4.2]);
        let ci = percentile_ci(&draws, 0.9).unwrap();
        assert_eq!(ci.lower, array![4.2, 4.2]);
        assert_eq!(ci.upper, array![4.2, 4.2]);
    }

    #[test]
    fn symmetric_draws_make_percentile_equal_basic() {
        let theta = 1.5;
        let deltas = [0.1, 0.4, 0.9, 1.3, 2.0];
        let mut rows = Vec::new();
        for d in deltas {
            rows.push(theta + d);
            rows.push(theta - d);
        }
        let values = Array2::from_shape_vec((10, 1), rows).unwrap();
        let draws = single(values, array![theta]);
        let pct = percentile_ci(&draws, 0.9).unwrap();
        let bas = basic_ci(&draws, 0.9).unwrap();
        assert!((pct.lower[0] - bas.lower[0]).abs() < 1e-12);
        assert!((pct.upper[0] - bas.upper[0]).abs() < 1e-12);
    }

    /// 41 sorted draws put the 2.5%/97.5% type-7 quantiles exactly on the
    /// 2nd and 40th order statistics; placing -1.9 and 2.1 there around a
    /// zero estimate must give exactly (-2.1, 1.9).
    #[test]
    fn basic_interval_reflects_the_quantiles() {
        let mut vals = vec![-3.0, -1.9];
        vals.extend((0..37).map(|k| -1.5 + 3.4 * k as f64 / 36.0));
        vals.push(2.1);
        vals.push(2.5);
        let values = Array2::from_shape_vec((41, 1), vals).unwrap();
        let draws = single(values, array![0.0]);
        let pct = percentile_ci(&draws, 0.95).unwrap();
        assert!((pct.lower[0] - (-1.9)).abs() < 1e-12);
        assert!((pct.upper[0] - 2.1).abs() < 1e-12);
        let ci = basic_ci(&draws, 0.95).unwrap();
        assert!((ci.lower[0] - (-2.1)).abs() < 1e-12);
        assert!((ci.upper[0] - 1.9).abs() < 1e-12);
    }

    fn hand_calibration_instance() -> (DrawMatrix, DrawMatrix) {
        // First level: draws 1, 3, 2, 4 around estimate 0.
        let first = single(array![[1.0], [3.0], [2.0], [4.0]], array![0.0]);
        // Second level deviations per parent: {0.5, 1.5}, {4.0, 3.5},
        // {1.9, 2.4}, {0.1, 0.2} giving exceedance fractions 1/2, 1, 1/2, 0.
        let values = array![
            [1.5],
            [2.5],
            [7.0],
            [6.5],
            [3.9],
            [4.4],
            [4.1],
            [4.2]
        ];
        let parents = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let second = DrawMatrix::second_level(values, array![0.0], parents).unwrap();
        (first, second)
    }

    /// Full hand enumeration: u = (1/2, 1, 1/2, 0) sorted (0, 1/2, 1/2, 1);
    /// tails 0.025/0.975 pick order statistics 1 and 4, clamped to 1/4 and
    /// 3/4; first-level quantiles at those levels are 1.75 and 3.25.
    #[test]
    fn calibrated_interval_matches_hand_enumeration() {
        let (first, second) = hand_calibration_instance();
        let ci = calibrated_ci(&first, &second, 0.95).unwrap();
        assert!((ci.alpha_lower.as_ref().unwrap()[0] - 0.25).abs() < 1e-12);
        assert!((ci.alpha_upper.as_ref().unwrap()[0] - 0.75).abs() < 1e-12);
        assert!((ci.lower[0] - (-3.25)).abs() < 1e-12, "lower {}", ci.lower[0]);
        assert!((ci.upper[0] - (-1.75)).abs() < 1e-12, "upper {}", ci.upper[0]);
    }

    #[test]
    fn degenerate_second_level_clamps_to_the_boundary() {
        let first = single(array![[1.0], [3.0], [2.0], [4.0]], array![0.0]);
        // Second-level draws equal their parents: all deviations zero while
        // every first-level deviation is positive, so every u_b = 0.
        let values = array![
            [1.0],
            [1.0],
            [3.0],
            [3.0],
            [2.0],
            [2.0],
            [4.0],
            [4.0]
        ];
        let parents = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let second = DrawMatrix::second_level(values, array![0.0], parents).unwrap();
        let ci = calibrated_ci(&first, &second, 0.95).unwrap();
        assert_eq!(ci.alpha_lower.as_ref().unwrap()[0], 0.25, "clamped to 1/b");
        assert_eq!(ci.alpha_upper.as_ref().unwrap()[0], 0.25);
    }

    /// Second level drawn from the first-level law itself: the exceedance
    /// fractions are uniform, so calibration returns the nominal tails.
    #[test]
    fn calibration_fixed_point_recovers_nominal_levels() {
        let mut rng = crate::rng::seeded(31);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let b = 400;
        let c = 40;
        let first_vals = Array2::from_shape_fn((b, 1), |_| normal.sample(&mut rng));
        let first = single(first_vals.clone(), array![0.0]);
        let mut second_vals = Array2::zeros((b * c, 1));
        let mut parents = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                // Same law: deviations drawn fresh from N(0, 1).
                second_vals[[bi * c + ci, 0]] = first_vals[[bi, 0]] + normal.sample(&mut rng);
                parents.push(bi);
            }
        }
        let second = DrawMatrix::second_level(second_vals, array![0.0], parents).unwrap();
        let ci = calibrated_ci(&first, &second, 0.95).unwrap();
        let tol = 2.0 / (b as f64).sqrt();
        let a_lo = ci.alpha_lower.as_ref().unwrap()[0];
        let a_hi = ci.alpha_upper.as_ref().unwrap()[0];
        assert!((a_lo - 0.025).abs() <= tol, "alpha_lower {a_lo}");
        assert!((a_hi - 0.975).abs() <= tol, "alpha_upper {a_hi}");
    }

    /// With unit second-level spreads and unit first-level deviation scale,
    /// the studentized interval coincides with the basic interval.
    #[test]
    fn unit_spread_studentized_reduces_to_basic() {
        let mut rng = crate::rng::seeded(32);
        let b = 40;
        let raw: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sd = sample_sd(&raw);
        let vals: Vec<f64> = raw.iter().map(|v| v / sd).collect();
        let first_vals = Array2::from_shape_vec((b, 1), vals).unwrap();
        let first = single(first_vals.clone(), array![0.0]);
        // Two second-level draws per parent at +-(sqrt 2)/2: spread exactly 1.
        let mut second_vals = Array2::zeros((b * 2, 1));
        let mut parents = Vec::new();
        let h = std::f64::consts::SQRT_2 / 2.0;
        for bi in 0..b {
            second_vals[[2 * bi, 0]] = first_vals[[bi, 0]] - h;
            second_vals[[2 * bi + 1, 0]] = first_vals[[bi, 0]] + h;
            parents.push(bi);
            parents.push(bi);
        }
        let second = DrawMatrix::second_level(second_vals, array![0.0], parents).unwrap();
        let stu = studentized_ci(&first, &second, 0.9).unwrap();
        let bas = basic_ci(&first, 0.9).unwrap();
        assert!((stu.lower[0] - bas.lower[0]).abs() < 1e-10, "{} vs {}", stu.lower[0], bas.lower[0]);
        assert!((stu.upper[0] - bas.upper[0]).abs() < 1e-10);
    }

    /// Three parents, two children each, worked through by hand.
    #[test]
    fn studentized_interval_matches_hand_computation() {
        let first = single(array![[2.0], [4.0], [6.0]], array![3.0]);
        // Deviations per parent: {-1, 1} (spread sqrt 2), {-2, 2} (2 sqrt 2),
        // {-0.5, 0.5} (spread sqrt 2 / 2).
        let values = array![[1.0], [3.0], [2.0], [6.0], [5.5], [6.5]];
        let parents = vec![0, 0, 1, 1, 2, 2];
        let second = DrawMatrix::second_level(values, array![3.0], parents).unwrap();
        let ci = studentized_ci(&first, &second, 0.5).unwrap();
        // z = ((2-3)/sqrt2, (4-3)/(2 sqrt2), (6-3)/(sqrt2/2))
        let z = [
            -1.0 / 2f64.sqrt(),
            1.0 / (2.0 * 2f64.sqrt()),
            3.0 / (2f64.sqrt() / 2.0),
        ];
        let mut zs = z.to_vec();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Type-7 at 0.25/0.75 with three points: h = 1.5 and 2.5.
        let t_lo = zs[0] + 0.5 * (zs[1] - zs[0]);
        let t_hi = zs[1] + 0.5 * (zs[2] - zs[1]);
        let s = sample_sd(&[2.0, 4.0, 6.0]);
        assert!((ci.lower[0] - (3.0 - t_hi * s)).abs() < 1e-12);
        assert!((ci.upper[0] - (3.0 - t_lo * s)).abs() < 1e-12);
        assert_eq!(ci.dropped_parents.as_ref().unwrap()[0], 0);
    }

    #[test]
    fn zero_spread_parents_are_dropped_not_fatal() {
        let first = single(array![[1.0], [2.0], [3.0], [4.0]], array![0.0]);
        let values = array![
            [1.1],
            [0.9],
            [2.0],
            [2.0], // parent 1 has identical children: zero spread
            [3.2],
            [2.8],
            [4.3],
            [3.7]
        ];
        let parents = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let second = DrawMatrix::second_level(values, array![0.0], parents).unwrap();
        let ci = studentized_ci(&first, &second, 0.9).unwrap();
        assert_eq!(ci.dropped_parents.as_ref().unwrap()[0], 1);
        assert!(ci.lower[0] <= ci.upper[0]);
    }

    #[test]
    fn missing_parents_are_rejected() {
        let first = single(array![[1.0], [2.0], [3.0]], array![0.0]);
        // Parent 2 never appears.
        let values = array![[1.0], [1.2], [2.1], [1.9]];
        let second =
            DrawMatrix::second_level(values, array![0.0], vec![0, 0, 1, 1]).unwrap();
        let err = calibrated_ci(&first, &second, 0.9).unwrap_err();
        assert!(err.to_string().contains("2"), "{err}");
        // Out-of-range parent.
        let values = array![[1.0], [1.2]];
        let second = DrawMatrix::second_level(values, array![0.0], vec![0, 7]).unwrap();
        assert!(calibrated_ci(&first, &second, 0.9).is_err());
    }

    #[test]
    fn draw_matrix_validation() {
        assert!(DrawMatrix::single(array![[1.0]], array![0.0]).is_err(), "b < 2");
        assert!(DrawMatrix::single(array![[1.0], [f64::NAN]], array![0.0]).is_err());
        assert!(
            DrawMatrix::second_level(array![[1.0], [2.0]], array![0.0], vec![0]).is_err(),
            "parent count mismatch"
        );
        let d = single(array![[1.0], [2.0]], array![0.0]);
        assert!(percentile_ci(&d, 1.0).is_err(), "level must be interior");
    }

    #[test]
    fn draw_matrix_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.csv");
        let d = single(array![[1.0, -2.0], [0.5, 3.25]], array![0.7, 0.1]);
        d.write_csv(&path).unwrap();
        let back = DrawMatrix::read_csv(&path, array![0.7, 0.1]).unwrap();
        assert_eq!(back.values(), d.values());
        assert!(back.parents().is_none());

        let path2 = dir.path().join("second.csv");
        let s = DrawMatrix::second_level(
            array![[1.0], [2.0], [3.0], [4.0]],
            array![0.0],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        s.write_csv(&path2).unwrap();
        let back = DrawMatrix::read_csv(&path2, array![0.0]).unwrap();
        assert_eq!(back.parents().unwrap(), &[0, 0, 1, 1]);
        assert_eq!(back.values(), s.values());
    }

    #[test]
    fn cv_curve_with_one_draw_equals_classical_cv() {
        // Small lasso instance solved two ways: through cv_curve on
        // fold-weighted solutions, and by an independent coordinate descent
        // on the row subsets with rescaled penalty.
        let mut rng = crate::rng::seeded(33);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let p = 3;
        let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            x[[i, 0]] - 0.5 * x[[i, 2]] + 0.3 * normal.sample(&mut rng)
        });
        let data = Dataset::new(y.clone(), Some(x.clone())).unwrap();
        let map = SubgroupMap::new(n, n, 1).unwrap(); // one group per observation
        let k_folds = 4;
        let grid = [0.01, 0.05, 0.1, 0.3, 0.8];
        let spec = ModelSpec::new(Family::Linear, crate::model::Penalty::L1).unwrap();

        let mut solutions = Array4::zeros((1, k_folds, grid.len(), p));
        for k in 0..k_folds {
            let held = crate::weights::cv_fold_observations(&map, k_folds, k).unwrap();
            let mut w = vec![1.0; n];
            for &i in &held {
                w[i] = 0.0;
            }
            for (li, &lambda) in grid.iter().enumerate() {
                let sol =
                    oracle::weighted_lasso(x.view(), y.view(), &w, lambda, 1e-12).unwrap();
                solutions.slice_mut(ndarray::s![0, k, li, ..]).assign(&sol.theta);
            }
        }
        let result =
            cv_curve(solutions.view(), None, &spec, &data, &map, &grid, None).unwrap();

        // Independent classical CV: subset fit with lambda scaled by n/(n-nk),
        // plain coordinate descent written from scratch.
        for (li, &lambda) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..k_folds {
                let held = crate::weights::cv_fold_observations(&map, k_folds, k).unwrap();
                let keep: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
                let m = keep.len();
                let lam = lambda * n as f64 / m as f64;
                let mut theta = vec![0.0f64; p];
                for _ in 0..20_000 {
                    let mut change = 0.0f64;
                    for j in 0..p {
                        let zj: f64 = keep.iter().map(|&i| x[[i, j]] * x[[i, j]]).sum::<f64>()
                            * 2.0
                            / m as f64;
                        let mut rho = 0.0;
                        for &i in &keep {
                            let pred: f64 = (0..p)
                                .filter(|&q| q != j)
                                .map(|q| x[[i, q]] * theta[q])
                                .sum();
                            rho += x[[i, j]] * (y[i] - pred);
                        }
                        rho *= 2.0 / m as f64;
                        let new = rho.signum() * (rho.abs() - lam).max(0.0) / zj;
                        change = change.max((new - theta[j]).abs());
                        theta[j] = new;
                    }
                    if change < 1e-13 {
                        break;
                    }
                }
                let mut err = 0.0;
                for &i in &held {
                    let pred: f64 = (0..p).map(|q| x[[i, q]] * theta[q]).sum();
                    err += (y[i] - pred).powi(2);
                }
                acc += err / held.len() as f64;
            }
            let classical = acc / k_folds as f64;
            assert!(
                (result.mean_errors[[0, li]] - classical).abs() < 1e-6,
                "grid point {li}: {} vs {}",
                result.mean_errors[[0, li]],
                classical
            );
        }
        // Single draw: the band collapses onto the curve.
        for li in 0..grid.len() {
            assert!(result.band_lower[li] <= result.mean_curve[li] + 1e-12);
            assert!(result.band_upper[li] >= result.mean_curve[li] - 1e-12);
        }
    }

    #[test]
    fn single_lambda_gives_a_point_mass_minimizer() {
        let mut rng = crate::rng::seeded(34);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 20;
        let x = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + 0.1 * normal.sample(&mut rng));
        let data = Dataset::new(y, Some(x)).unwrap();
        let map = SubgroupMap::new(n, n, 2).unwrap();
        let spec = ModelSpec::plain(Family::Linear);
        let solutions = Array4::from_elem((5, 4, 1, 2), 0.3);
        let result =
            cv_curve(solutions.view(), None, &spec, &data, &map, &[0.2], None).unwrap();
        assert!(result.minimizer_indices.iter().all(|&i| i == 0));
        assert_eq!(result.minimizer_mode(), 0);
    }

    #[test]
    fn cv_curve_rejects_mismatched_shapes() {
        let data = Dataset::new(array![1.0, 2.0, 3.0, 4.0], Some(array![[1.0], [1.0], [1.0], [1.0]])).unwrap();
        let map = SubgroupMap::new(4, 4, 3).unwrap();
        let spec = ModelSpec::plain(Family::Linear);
        let solutions = Array4::<f64>::zeros((2, 2, 3, 1));
        let err = cv_curve(solutions.view(), None, &spec, &data, &map, &[0.1], None).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
    }

    #[test]
    fn hdr_of_standard_normal_matches_known_quantiles() {
        let mut rng = crate::rng::seeded(35);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let hdr = hdr_interval(&samples, 0.95).unwrap();
        assert_eq!(hdr.intervals.len(), 1, "unimodal density, single interval");
        let (lo, hi) = hdr.intervals[0];
        assert!((lo + 1.96).abs() < 0.05, "lower {lo}");
        assert!((hi - 1.96).abs() < 0.05, "upper {hi}");
        assert!((hdr.mass - 0.95).abs() <= 0.001);
    }

    #[test]
    fn bimodal_hdr_beats_the_central_interval() {
        let mut rng = crate::rng::seeded(36);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let samples: Vec<f64> = (0..40_000)
            .map(|_| {
                let c = if rng.random_range(0.0..1.0) < 0.5 { -4.0 } else { 4.0 };
                c + normal.sample(&mut rng)
            })
            .collect();
        let hdr = hdr_interval(&samples, 0.9).unwrap();
        assert_eq!(hdr.intervals.len(), 2, "two well-separated modes");
        let central =
            quantile_type7(&samples, 0.95).unwrap() - quantile_type7(&samples, 0.05).unwrap();
        assert!(
            hdr.total_width < central,
            "hdr width {} vs central {central}",
            hdr.total_width
        );
    }

    #[test]
    fn hdr_rejects_small_or_degenerate_samples() {
        assert!(hdr_interval(&[1.0; 50], 0.9).is_err());
        assert!(hdr_interval(&vec![2.0; 200], 0.9).is_err());
    }

    #[test]
    fn oracle_draws_match_per_row_solves() {
        let mut rng = crate::rng::seeded(37);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 30;
        let x = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + 0.2 * normal.sample(&mut rng));
        let data = Dataset::new(y.clone(), Some(x.clone())).unwrap();
        let map = SubgroupMap::new(n, 10, 4).unwrap();
        let spec = ModelSpec::plain(Family::Linear);
        let (alphas, draws) = draw_alphas(&WeightLaw::Dirichlet, 10, 5, 77).unwrap();
        assert_eq!(draws.len(), 5);
        let thetas = solve_draws_oracle(&spec, &data, &map, alphas.view(), 0.0, None).unwrap();
        for r in 0..5 {
            let w = map.expand(&alphas.row(r).to_vec()).unwrap();
            let direct = oracle::weighted_ls(x.view(), y.view(), &w).unwrap();
            for j in 0..2 {
                assert_eq!(thetas[[r, j]], direct.theta[j]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Translation equivariance for percentile/basic, and joint
        /// scale equivariance for both with positive scale.
        #[test]
        fn prop_percentile_and_basic_are_equivariant(
            seed in 0u64..500,
            shift in -10.0f64..10.0,
            scale in 0.1f64..5.0,
        ) {
            let mut rng = crate::rng::seeded(seed);
            let b = 20;
            let values = Array2::from_shape_fn((b, 2), |_| rng.random_range(-3.0..3.0));
            let theta = array![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let base_p = percentile_ci(&single(values.clone(), theta.clone()), 0.9).unwrap();
            let base_b = basic_ci(&single(values.clone(), theta.clone()), 0.9).unwrap();
            let moved = single(values.mapv(|v| v * scale + shift), theta.mapv(|v| v * scale + shift));
            let moved_p = percentile_ci(&moved, 0.9).unwrap();
            let moved_b = basic_ci(&moved, 0.9).unwrap();
            for j in 0..2 {
                prop_assert!((moved_p.lower[j] - (base_p.lower[j] * scale + shift)).abs() < 1e-9);
                prop_assert!((moved_p.upper[j] - (base_p.upper[j] * scale + shift)).abs() < 1e-9);
                prop_assert!((moved_b.lower[j] - (base_b.lower[j] * scale + shift)).abs() < 1e-9);
                prop_assert!((moved_b.upper[j] - (base_b.upper[j] * scale + shift)).abs() < 1e-9);
            }
        }

        /// Calibrated intervals are translation-equivariant; studentized
        /// intervals are additionally scale-equivariant.
        #[test]
        fn prop_two_level_methods_are_equivariant(
            seed in 0u64..500,
            shift in -5.0f64..5.0,
            scale in 0.2f64..4.0,
        ) {
            let mut rng = crate::rng::seeded(seed ^ 0x99);
            let b = 12;
            let c = 3;
            let first_vals = Array2::from_shape_fn((b, 1), |_| rng.random_range(-2.0..2.0));
            let theta = array![rng.random_range(-1.0..1.0)];
            let mut second_vals = Array2::zeros((b * c, 1));
            let mut parents = Vec::new();
            for bi in 0..b {
                for ci in 0..c {
                    second_vals[[bi * c + ci, 0]] =
                        first_vals[[bi, 0]] + rng.random_range(-1.0..1.0);
                    parents.push(bi);
                }
            }
            let first = single(first_vals.clone(), theta.clone());
            let second = DrawMatrix::second_level(second_vals.clone(), theta.clone(), parents.clone()).unwrap();
            let cal = calibrated_ci(&first, &second, 0.9).unwrap();
            let stu = studentized_ci(&first, &second, 0.9).unwrap();

            let tfirst = single(first_vals.mapv(|v| v * scale + shift), theta.mapv(|v| v * scale + shift));
            let tsecond = DrawMatrix::second_level(
                second_vals.mapv(|v| v * scale + shift),
                theta.mapv(|v| v * scale + shift),
                parents,
            ).unwrap();
            let tcal = calibrated_ci(&tfirst, &tsecond, 0.9).unwrap();
            let tstu = studentized_ci(&tfirst, &tsecond, 0.9).unwrap();
            prop_assert!((tcal.lower[0] - (cal.lower[0] * scale + shift)).abs() < 1e-9);
            prop_assert!((tcal.upper[0] - (cal.upper[0] * scale + shift)).abs() < 1e-9);
            prop_assert!((tstu.lower[0] - (stu.lower[0] * scale + shift)).abs() < 1e-9);
            prop_assert!((tstu.upper[0] - (stu.upper[0] * scale + shift)).abs() < 1e-9);
        }
    }
}
