//! Exact weighted solvers: ground truth for everything the generator learns.
//!
//! Each solver minimizes the weighted objective
//! `(1/n) sum_i w_i loss_i(theta) + lambda * penalty(theta)` for one family:
//! closed-form least squares / ridge, Newton logistic, simplex quantile
//! regression, coordinate-descent lasso, and a fixed-grid EM for mixture
//! likelihoods. `solve` dispatches on a `ModelSpec`.

mod linalg;
mod quantile;

pub use quantile::weighted_quantile;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{invalid, numeric, Result};
use crate::model::{sigmoid, Dataset, Family, ModelSpec, Penalty};

/// Solution of one weighted optimization problem.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub theta: Array1<f64>,
    /// Objective value `(1/n) sum_i w_i loss_i + lambda * penalty`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(invalid(format!("{} weights for {} observations", w.len(), n)));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("weights must be finite and nonnegative"));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(invalid("all weights are zero"));
    }
    Ok(())
}

/// Row-scale a copy of `x` by `w`.
fn scale_rows(x: ArrayView2<f64>, w: &[f64]) -> Array2<f64> {
    let mut wx = x.to_owned();
    for (mut row, &wi) in wx.rows_mut().into_iter().zip(w) {
        row.mapv_inplace(|v| v * wi);
    }
    wx
}

/// Weighted least squares: `theta = (X'WX)^{-1} X'W y`.
pub fn weighted_ls(x: ArrayView2<f64>, y: ArrayView1<f64>, w: &[f64]) -> Result<OracleSolution> {
    weighted_ridge(x, y, w, 0.0)
}

/// Ridge-penalized weighted least squares: minimizes
/// `(1/n) sum w_i (y_i - x_i' theta)^2 + lambda ||theta||_2^2`.
pub fn weighted_ridge(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &[f64],
    lambda: f64,
) -> Result<OracleSolution> {
    let (n, p) = (x.nrows(), x.ncols());
    check_weights(w, n)?;
    if y.len() != n {
        return Err(invalid(format!("{} responses for {} rows", y.len(), n)));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("lambda={lambda} must be finite and >= 0")));
    }
    let nf = n as f64;
    let wx = scale_rows(x, w);
    // (X'WX / n + lambda I) theta = X'W y / n
    let mut a = x.t().dot(&wx) / nf;
    for j in 0..p {
        a[[j, j]] += lambda;
    }
    let b = wx.t().dot(&y) / nf;
    let theta = linalg::solve_spd(a.view(), b.view())?;
    let resid = &y - &x.dot(&theta);
    let sse: f64 = resid.iter().zip(w).map(|(r, wi)| wi * r * r).sum();
    let objective = sse / nf + lambda * theta.iter().map(|t| t * t).sum::<f64>();
    Ok(OracleSolution { theta, objective, iterations: 1, converged: true })
}

/// Weighted logistic regression by damped Newton; converged when the gradient
/// sup-norm of the mean-scale objective drops below `tol`.
pub fn weighted_logistic(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &[f64],
    tol: f64,
) -> Result<OracleSolution> {
    const MAX_ITER: usize = 200;
    let (n, p) = (x.nrows(), x.ncols());
    check_weights(w, n)?;
    if y.len() != n {
        return Err(invalid(format!("{} responses for {} rows", y.len(), n)));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("logistic outcomes must lie in {0, 1}"));
    }
    let nf = n as f64;
    let objective = |theta: &Array1<f64>| -> f64 {
        let t = x.dot(theta);
        t.iter()
            .zip(y.iter())
            .zip(w)
            .map(|((&ti, &yi), &wi)| wi * ((1.0 - yi) * ti + crate::model::softplus(-ti)))
            .sum::<f64>()
            / nf
    };

    let mut theta = Array1::<f64>::zeros(p);
    let mut obj = objective(&theta);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let t = x.dot(&theta);
        let mut grad_src = Array1::<f64>::zeros(n);
        let mut hess_w = vec![0.0f64; n];
        for i in 0..n {
            let mu = sigmoid(t[i]);
            grad_src[i] = w[i] * (mu - y[i]);
            hess_w[i] = w[i] * mu * (1.0 - mu);
        }
        let grad = x.t().dot(&grad_src) / nf;
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm <= tol {
            converged = true;
            break;
        }
        let hx = scale_rows(x, &hess_w);
        let hess = x.t().dot(&hx) / nf;
        let step = linalg::solve_spd(hess.view(), grad.view())?;
        // Backtrack until the objective stops increasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - &(&step * scale);
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj <= obj + 1e-14 {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break; // numerically stuck; report non-convergence below
        }
    }
    let sup = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if sup > 30.0 {
        log::warn!("weighted_logistic: |theta|_inf = {sup:.1}; possible separation");
    }
    Ok(OracleSolution { theta, objective: obj, iterations, converged })
}

/// Weighted lasso: cyclic coordinate descent with soft-thresholding on
/// `(1/n) sum w_i (y_i - x_i' theta)^2 + lambda ||theta||_1`, until the
/// largest coordinate change in a sweep is at most `tol`.
pub fn weighted_lasso(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &[f64],
    lambda: f64,
    tol: f64,
) -> Result<OracleSolution> {
    weighted_lasso_warm(x, y, w, lambda, tol, None)
}

/// `weighted_lasso` with an optional warm start (used along lambda paths).
pub fn weighted_lasso_warm(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &[f64],
    lambda: f64,
    tol: f64,
    warm: Option<ArrayView1<f64>>,
) -> Result<OracleSolution> {
    const MAX_SWEEPS: usize = 100_000;
    let (n, p) = (x.nrows(), x.ncols());
    check_weights(w, n)?;
    if y.len() != n {
        return Err(invalid(format!("{} responses for {} rows", y.len(), n)));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("lambda={lambda} must be finite and >= 0")));
    }
    let nf = n as f64;
    // Per-coordinate curvature z_j = (2/n) sum_i w_i x_ij^2.
    let mut z = vec![0.0f64; p];
    for j in 0..p {
        z[j] = 2.0 * x.column(j).iter().zip(w).map(|(v, wi)| wi * v * v).sum::<f64>() / nf;
    }
    let mut theta = match warm {
        Some(t) if t.len() == p => t.to_owned(),
        Some(t) => return Err(invalid(format!("warm start has {} entries, expected {p}", t.len()))),
        None => Array1::zeros(p),
    };
    let mut resid = &y - &x.dot(&theta);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        iterations += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            if z[j] == 0.0 {
                continue; // dead column (zero weight support): leave at current value
            }
            let old = theta[j];
            // rho = (2/n) sum_i w_i x_ij (r_i + x_ij old)
            let col = x.column(j);
            let mut rho = 0.0;
            for i in 0..n {
                rho += w[i] * col[i] * (resid[i] + col[i] * old);
            }
            rho *= 2.0 / nf;
            let new = soft_threshold(rho, lambda) / z[j];
            if new != old {
                let delta = new - old;
                for i in 0..n {
                    resid[i] -= delta * col[i];
                }
                theta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= tol {
            converged = true;
            break;
        }
    }
    let sse: f64 = resid.iter().zip(w).map(|(r, wi)| wi * r * r).sum();
    let objective = sse / nf + lambda * theta.iter().map(|t| t.abs()).sum::<f64>();
    Ok(OracleSolution { theta, objective, iterations, converged })
}

fn soft_threshold(v: f64, lambda: f64) -> f64 {
    v.signum() * (v.abs() - lambda).max(0.0)
}

/// Dispatch to the exact solver for `spec` at weights `w` and tuning
/// `(lambda, eta)`.
pub fn solve(
    spec: &ModelSpec,
    data: &Dataset,
    w: &[f64],
    lambda: f64,
    eta: Option<f64>,
) -> Result<OracleSolution> {
    data.validate_for(&spec.family)?;
    match (&spec.family, spec.penalty) {
        (Family::Linear, Penalty::None) => weighted_ls(data.x_required()?, data.y(), w),
        (Family::Linear, Penalty::L2) => weighted_ridge(data.x_required()?, data.y(), w, lambda),
        (Family::Linear, Penalty::L1) => {
            weighted_lasso(data.x_required()?, data.y(), w, lambda, 1e-10)
        }
        (Family::Logistic, _) => weighted_logistic(data.x_required()?, data.y(), w, 1e-9),
        (Family::Quantile, _) => {
            let eta = eta.ok_or_else(|| invalid("quantile family requires eta"))?;
            weighted_quantile(data.x_required()?, data.y(), w, eta)
        }
        (fam, _) => Err(invalid(format!(
            "no point-estimate oracle for mixture family {fam}; use npmle_em"
        ))),
    }
}

/// Discrete mixing measure on a fixed support grid.
#[derive(Debug, Clone)]
pub struct MixingMeasure {
    pub support: Vec<f64>,
    pub mass: Vec<f64>,
    /// Weighted log-likelihood `sum_i w_i log sum_k mass_k f(y_i | support_k)`.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MixingMeasure {
    /// Mean of the mixing measure.
    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.mass).map(|(s, m)| s * m).sum()
    }

    /// Total mass falling within `lo..=hi`.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.mass)
            .filter(|(s, _)| (lo..=hi).contains(*s))
            .map(|(_, m)| m)
            .sum()
    }
}

/// Default NPMLE support grid: data range widened by 3 standard deviations,
/// 400 points, clamped to the family's parameter domain.
pub fn default_grid(family: &Family, data: &Dataset) -> Result<Vec<f64>> {
    const POINTS: usize = 400;
    let y: Vec<f64> = data.y().to_vec();
    let sd = crate::stats::sample_sd(&y);
    let sd = if sd.is_finite() { sd } else { 1.0 };
    let (ymin, ymax) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (mut lo, mut hi) = match family {
        Family::MixtureBinomial { trials } => {
            // Work on the probability scale via phat = y / trials.
            let m = *trials as f64;
            let phats: Vec<f64> = y.iter().map(|v| v / m).collect();
            let psd = crate::stats::sample_sd(&phats);
            let psd = if psd.is_finite() { psd } else { 0.1 };
            (ymin / m - 3.0 * psd, ymax / m + 3.0 * psd)
        }
        _ => (ymin - 3.0 * sd, ymax + 3.0 * sd),
    };
    match family {
        Family::MixtureGaussian { .. } => {}
        Family::MixturePoisson | Family::MixtureGamma { .. } => {
            lo = lo.max(1e-6);
        }
        Family::MixtureBinomial { .. } => {
            lo = lo.max(1e-4);
            hi = hi.min(1.0 - 1e-4);
        }
        fam => return Err(invalid(format!("{fam} is not a mixture family"))),
    }
    if !(hi > lo) {
        return Err(invalid(format!("degenerate grid range [{lo}, {hi}]")));
    }
    let step = (hi - lo) / (POINTS - 1) as f64;
    Ok((0..POINTS).map(|k| lo + step * k as f64).collect())
}

/// Weighted EM for the nonparametric MLE of a mixing measure on a fixed grid.
/// Masses start uniform; iterate `mass_k <- sum_i w~_i post_ik` until the
/// weighted log-likelihood changes by at most `tol`.
pub fn npmle_em(
    data: &Dataset,
    family: &Family,
    w: &[f64],
    grid: &[f64],
    tol: f64,
) -> Result<MixingMeasure> {
    const MAX_ITER: usize = 5000;
    let n = data.n();
    check_weights(w, n)?;
    data.validate_for(family)?;
    if grid.is_empty() {
        return Err(invalid("NPMLE support grid is empty"));
    }
    let dens = component_density_matrix(data, family, grid)?;
    let g = grid.len();
    let wsum: f64 = w.iter().sum();
    let mut mass = vec![1.0 / g as f64; g];
    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut post = vec![0.0f64; g];
    while iterations < MAX_ITER {
        iterations += 1;
        let mut new_mass = vec![0.0f64; g];
        let mut ll = 0.0;
        for i in 0..n {
            let row = &dens[i * g..(i + 1) * g];
            let mut denom = 0.0;
            for k in 0..g {
                post[k] = mass[k] * row[k];
                denom += post[k];
            }
            if denom <= 0.0 {
                return Err(numeric(format!(
                    "observation {i} (y={}) has zero likelihood under the current grid",
                    data.y()[i]
                )));
            }
            let scale = w[i] / (denom * wsum);
            for k in 0..g {
                new_mass[k] += post[k] * scale;
            }
            ll += w[i] * denom.ln();
        }
        mass = new_mass;
        if (ll - loglik).abs() <= tol {
            loglik = ll;
            converged = true;
            break;
        }
        loglik = ll;
    }
    Ok(MixingMeasure { support: grid.to_vec(), mass, loglik, iterations, converged })
}

/// Dense `n x grid` matrix of component densities `f(y_i | grid_k)`.
/// Shared by the EM oracle and its bootstrap pipelines.
pub fn component_density_matrix(
    data: &Dataset,
    family: &Family,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let n = data.n();
    let g = grid.len();
    let x = data.x();
    let mut dens = vec![0.0f64; n * g];
    for i in 0..n {
        let xi = x.as_ref().map(|x| x[[i, 0]]);
        let yi = data.y()[i];
        for (k, &theta) in grid.iter().enumerate() {
            dens[i * g + k] = family.log_density(yi, theta, xi)?.exp();
        }
    }
    Ok(dens)
}
