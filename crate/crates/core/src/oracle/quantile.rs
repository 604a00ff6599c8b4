//! Weighted quantile regression by exterior-point simplex on the check loss.
//!
//! Minimizes `(1/n) sum_i w_i rho_eta(y_i - x_i' theta)` where
//! `rho_eta(u) = (eta - 1{u<0}) u`. A minimizer interpolates `p` observations
//! (the basis `h`), so the solver walks bases: at each vertex it computes the
//! dual multipliers of the basis residuals, finds one outside its box
//! `[(eta-1) w_i, eta w_i]`, and moves along the edge that relaxes it,
//! sweeping residual sign changes until the directional derivative of the
//! objective turns nonnegative. Zero-weight observations never enter the
//! basis and never contribute breakpoints.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::linalg::Lu;
use super::OracleSolution;
use crate::error::{invalid, numeric, Result};

/// Minimize the weighted check loss at quantile level `eta`.
pub fn weighted_quantile(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    w: &[f64],
    eta: f64,
) -> Result<OracleSolution> {
    let (n, p) = (x.nrows(), x.ncols());
    super::check_weights(w, n)?;
    if y.len() != n {
        return Err(invalid(format!("{} responses for {} rows", y.len(), n)));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(invalid(format!("eta={eta} must lie strictly inside (0, 1)")));
    }
    if p == 0 || n < p {
        return Err(invalid(format!("need at least p={p} observations, got {n}")));
    }
    // Only positively weighted rows matter for the objective.
    let active: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    if active.len() < p {
        return Err(invalid(format!(
            "only {} positively weighted observations for p={p} coefficients",
            active.len()
        )));
    }

    let mut h = initial_basis(x, w, &active, p)?;
    let max_pivots = 50 * (n + p) + 500;
    let mut iterations = 0;
    let mut converged = false;
    let mut theta = Array1::<f64>::zeros(p);
    let mut resid = Array1::<f64>::zeros(n);

    'pivots: while iterations < max_pivots {
        iterations += 1;
        let xh = basis_matrix(x, &h);
        let lu = Lu::factor(xh.view())?;
        let yh = Array1::from_iter(h.iter().map(|&i| y[i]));
        theta = lu.solve(yh.view());
        resid = &y - &x.dot(&theta);
        for &i in &h {
            resid[i] = 0.0;
        }

        // Dual multipliers: X_h' d = -g, g = sum of a_i x_i over nonbasic rows
        // with a_i = w_i (eta - 1{r_i < 0}).
        let mut g = Array1::<f64>::zeros(p);
        for &i in &active {
            if h.contains(&i) {
                continue;
            }
            let a = w[i] * (eta - f64::from(resid[i] < 0.0));
            for j in 0..p {
                g[j] += a * x[[i, j]];
            }
        }
        g.mapv_inplace(|v| -v);
        let d = lu.solve_transpose(g.view());

        // Most-violated basis multiplier, measured against its box.
        let mut order: Vec<(usize, f64, f64)> = Vec::new(); // (k, violation, s)
        for k in 0..p {
            let wk = w[h[k]];
            let tol = 1e-8 * (1.0 + wk);
            let hi = eta * wk;
            let lo = (eta - 1.0) * wk;
            if d[k] > hi + tol {
                order.push((k, d[k] - hi, -1.0));
            } else if d[k] < lo - tol {
                order.push((k, lo - d[k], 1.0));
            }
        }
        if order.is_empty() {
            converged = true;
            break;
        }
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

        for &(k, _, s) in &order {
            // Edge direction: theta(t) = theta + t * delta, delta = s X_h^{-1} e_k.
            let mut ek = Array1::<f64>::zeros(p);
            ek[k] = s;
            let delta = lu.solve(ek.view());
            // Residual slopes c_i = -x_i' delta; breakpoints where r_i crosses 0.
            let mut d0 = 0.0;
            let mut breaks: Vec<(f64, f64, usize)> = Vec::new(); // (t_i, w_i |c_i|, i)
            for &i in &active {
                let ci = -x.row(i).dot(&delta);
                if ci == 0.0 {
                    continue;
                }
                let ri = resid[i];
                // Slope of rho at r_i(t) for small t > 0.
                let sign_ahead = if ri > 0.0 || (ri == 0.0 && ci > 0.0) {
                    eta
                } else {
                    eta - 1.0
                };
                d0 += w[i] * sign_ahead * ci;
                if !h.contains(&i) && ((ri > 0.0 && ci < 0.0) || (ri < 0.0 && ci > 0.0)) {
                    breaks.push((-ri / ci, w[i] * ci.abs(), i));
                }
            }
            if d0 >= -1e-12 * (1.0 + d0.abs()) {
                // Degenerate vertex: this exchange is not a descent direction.
                continue;
            }
            breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            // Walk crossings until the edge derivative turns nonnegative; the
            // observation at that crossing enters the basis.
            let mut deriv = d0;
            for &(_, gain, i) in &breaks {
                deriv += gain;
                if deriv >= 0.0 {
                    h[k] = i;
                    continue 'pivots;
                }
            }
            return Err(numeric(format!(
                "weighted quantile objective is unbounded along a basis edge \
                 (eta={eta}); the design is rank deficient in a weighted sense"
            )));
        }
        // Every violated multiplier failed the descent test: degenerate optimum.
        converged = true;
        break;
    }

    let nf = n as f64;
    let objective = resid
        .iter()
        .zip(w)
        .map(|(&r, &wi)| wi * (eta - f64::from(r < 0.0)) * r)
        .sum::<f64>()
        / nf;
    Ok(OracleSolution { theta, objective, iterations, converged })
}

/// Greedy full-rank basis from the positively weighted rows, preferring large
/// weights for numerical stability.
fn initial_basis(
    x: ArrayView2<f64>,
    w: &[f64],
    active: &[usize],
    p: usize,
) -> Result<Vec<usize>> {
    let mut by_weight: Vec<usize> = active.to_vec();
    by_weight.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(p);
    let mut reduced: Vec<Array1<f64>> = Vec::with_capacity(p);
    for &i in &by_weight {
        let mut v = x.row(i).to_owned();
        let norm0 = v.dot(&v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for u in &reduced {
            let proj = v.dot(u);
            v = &v - &(u * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-10 * (1.0 + norm0) {
            v /= norm;
            reduced.push(v);
            basis.push(i);
            if basis.len() == p {
                return Ok(basis);
            }
        }
    }
    Err(invalid(format!(
        "positively weighted design rows span only {} of {p} dimensions",
        basis.len()
    )))
}

fn basis_matrix(x: ArrayView2<f64>, h: &[usize]) -> Array2<f64> {
    let p = h.len();
    Array2::from_shape_fn((p, p), |(a, b)| x[[h[a], b]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::quantile_type7;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn check_objective(
        x: &Array2<f64>,
        y: &Array1<f64>,
        w: &[f64],
        eta: f64,
        theta: &Array1<f64>,
    ) -> f64 {
        let r = y - &x.dot(theta);
        r.iter()
            .zip(w)
            .map(|(&u, &wi)| wi * (eta - f64::from(u < 0.0)) * u)
            .sum::<f64>()
            / y.len() as f64
    }

    /// Intercept-only median: the optimum sits at a data point and its
    /// objective is the best achievable over all data points.
    #[test]
    fn intercept_only_median_hits_a_sample_point() {
        let y = array![3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3];
        let n = y.len();
        let x = Array2::from_elem((n, 1), 1.0);
        let w = vec![1.0; n];
        let sol = weighted_quantile(x.view(), y.view(), &w, 0.5).unwrap();
        assert!(sol.converged);
        let at_points: f64 = y
            .iter()
            .map(|&c| check_objective(&x, &y, &w, 0.5, &array![c]))
            .fold(f64::INFINITY, f64::min);
        assert!(
            (sol.objective - at_points).abs() < 1e-12,
            "solver {} vs best sample point {}",
            sol.objective,
            at_points
        );
        assert!(y.iter().any(|&c| (c - sol.theta[0]).abs() < 1e-12), "optimum interpolates");
    }

    /// With distinct unit weights, the intercept-only eta-quantile solution is
    /// an order statistic bracketing the eta fraction.
    #[test]
    fn intercept_only_quarter_quantile() {
        let mut rng = crate::rng::seeded(21);
        let y = Array1::from_shape_fn(101, |_| rng.random_range(-5.0..5.0));
        let x = Array2::from_elem((101, 1), 1.0);
        let w = vec![1.0; 101];
        let sol = weighted_quantile(x.view(), y.view(), &w, 0.25).unwrap();
        let mut sorted = y.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // With n*eta = 25.25 non-integral the minimizer is the unique order
        // statistic with at most floor(n*eta) points strictly below and at
        // most n - ceil(n*eta) strictly above.
        let below = sorted.iter().filter(|&&v| v < sol.theta[0]).count();
        let above = sorted.iter().filter(|&&v| v > sol.theta[0]).count();
        assert!(below <= 25 && above <= 75, "below={below} above={above}");
        // And it agrees with the standard empirical quantile up to bracketing.
        let q = quantile_type7(&sorted, 0.25).unwrap();
        assert!((sol.theta[0] - q).abs() < sorted[30] - sorted[20]);
    }

    /// Grid refinement around the solver's answer finds nothing better.
    #[test]
    fn beats_local_grid_refinement() {
        let mut rng = crate::rng::seeded(22);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 30;
        let x = Array2::from_shape_fn((n, 2), |(_, j)| {
            if j == 0 { 1.0 } else { normal.sample(&mut rng) }
        });
        let y = Array1::from_shape_fn(n, |i| 0.5 + 1.2 * x[[i, 1]] + normal.sample(&mut rng));
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        for eta in [0.3, 0.5, 0.8] {
            let sol = weighted_quantile(x.view(), y.view(), &w, eta).unwrap();
            assert!(sol.converged, "eta={eta}");
            let span = 0.5;
            let steps = 40;
            let mut best = sol.objective;
            for a in 0..=steps {
                for b in 0..=steps {
                    let cand = array![
                        sol.theta[0] + span * (2.0 * a as f64 / steps as f64 - 1.0),
                        sol.theta[1] + span * (2.0 * b as f64 / steps as f64 - 1.0),
                    ];
                    best = best.min(check_objective(&x, &y, &w, eta, &cand));
                }
            }
            assert!(
                sol.objective <= best + 1e-4,
                "eta={eta}: grid found {best} below solver {}",
                sol.objective
            );
        }
    }

    /// Random coordinate perturbations never improve the objective.
    #[test]
    fn random_perturbations_do_not_improve() {
        let mut rng = crate::rng::seeded(23);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 60;
        let p = 3;
        let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] - 0.7 * x[[i, 2]] + normal.sample(&mut rng));
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let eta = 0.6;
        let sol = weighted_quantile(x.view(), y.view(), &w, eta).unwrap();
        for _ in 0..500 {
            let scale = 10f64.powf(rng.random_range(-6.0..0.0));
            let cand = Array1::from_shape_fn(p, |j| {
                sol.theta[j] + scale * normal.sample(&mut rng)
            });
            let obj = check_objective(&x, &y, &w, eta, &cand);
            assert!(
                obj >= sol.objective - 1e-10,
                "perturbation at scale {scale} reached {obj} below {}",
                sol.objective
            );
        }
    }

    #[test]
    fn weight_scaling_leaves_theta_unchanged() {
        let mut rng = crate::rng::seeded(24);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(_, j)| {
            if j == 0 { 1.0 } else { normal.sample(&mut rng) }
        });
        let y = Array1::from_shape_fn(n, |i| 2.0 * x[[i, 1]] + normal.sample(&mut rng));
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let w5: Vec<f64> = w.iter().map(|v| 5.0 * v).collect();
        let a = weighted_quantile(x.view(), y.view(), &w, 0.4).unwrap();
        let b = weighted_quantile(x.view(), y.view(), &w5, 0.4).unwrap();
        for j in 0..2 {
            assert!((a.theta[j] - b.theta[j]).abs() < 1e-8, "coordinate {j}");
        }
    }

    /// Zero-weight rows are ignored entirely: dropping them gives the same fit.
    #[test]
    fn zero_weight_rows_are_inert() {
        let mut rng = crate::rng::seeded(25);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 50;
        let x = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + normal.sample(&mut rng));
        let mut w = vec![1.0; n];
        for i in 0..10 {
            w[i * 3] = 0.0;
        }
        let full = weighted_quantile(x.view(), y.view(), &w, 0.5).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
        let xs = Array2::from_shape_fn((keep.len(), 2), |(a, b)| x[[keep[a], b]]);
        let ys = Array1::from_iter(keep.iter().map(|&i| y[i]));
        let ws = vec![1.0; keep.len()];
        let sub = weighted_quantile(xs.view(), ys.view(), &ws, 0.5).unwrap();
        for j in 0..2 {
            assert!((full.theta[j] - sub.theta[j]).abs() < 1e-9, "coordinate {j}");
        }
    }

    #[test]
    fn rejects_bad_eta_and_thin_designs() {
        let x = array![[1.0], [1.0], [1.0]];
        let y = array![1.0, 2.0, 3.0];
        assert!(weighted_quantile(x.view(), y.view(), &[1.0; 3], 0.0).is_err());
        assert!(weighted_quantile(x.view(), y.view(), &[1.0; 3], 1.0).is_err());
        // Too few positively weighted rows to identify the coefficient.
        assert!(weighted_quantile(x.view(), y.view(), &[0.0, 0.0, 0.0], 0.5).is_err());
    }
}
