//! Model families, per-observation losses, and penalties.
//!
//! The weighted objective everywhere in this crate is
//! `L(theta; w, lambda, eta) = (1/n) sum_i w_i * loss_i(theta; eta) + lambda * penalty(theta)`.
//! Regression families (linear, logistic, quantile) define `loss_i` through
//! the linear predictor `t_i = x_i' theta`; mixture families define a
//! log-density `log f(y_i | theta)` used by the nonparametric mixture stack.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// Observation family.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// Squared error `(y - t)^2`.
    Linear,
    /// Binary-outcome negative log-likelihood `(1 - y) t + log(1 + e^{-t})`.
    Logistic,
    /// Pinball loss `rho_eta(y - t)` with `rho_eta(u) = (eta - 1{u<0}) u`.
    Quantile,
    /// Mixture component `y | theta ~ Normal(theta, sigma)` (or
    /// `Normal(x * theta, sigma)` when the dataset carries a scalar covariate).
    MixtureGaussian { sigma: f64 },
    /// Mixture component `y | theta ~ Poisson(theta)`.
    MixturePoisson,
    /// Mixture component `y | theta ~ Binomial(trials, theta)`.
    MixtureBinomial { trials: u64 },
    /// Mixture component `y | theta ~ Gamma(shape, rate = theta)`.
    MixtureGamma { shape: f64 },
}

impl Family {
    /// Whether the family takes the quantile level `eta` as a tuning input.
    pub fn requires_eta(&self) -> bool {
        matches!(self, Family::Quantile)
    }

    /// Whether this is a mixture-component family (handled by the
    /// nonparametric mixture stack, not the regression losses).
    pub fn is_mixture(&self) -> bool {
        matches!(
            self,
            Family::MixtureGaussian { .. }
                | Family::MixturePoisson
                | Family::MixtureBinomial { .. }
                | Family::MixtureGamma { .. }
        )
    }
}

impl std::str::FromStr for Family {
    type Err = crate::error::Error;

    /// Accepts `linear`, `logistic`, `quantile`, and the mixture names
    /// `npmle_gaussian[:sigma]`, `npmle_poisson`, `npmle_binomial[:trials]`,
    /// `npmle_gamma[:shape]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let num = |p: Option<&str>, default: f64| -> Result<f64> {
            match p {
                None => Ok(default),
                Some(p) => p
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad family parameter in '{s}'"))),
            }
        };
        match name {
            "linear" => Ok(Family::Linear),
            "logistic" => Ok(Family::Logistic),
            "quantile" => Ok(Family::Quantile),
            "npmle_gaussian" => {
                let sigma = num(param, 1.0)?;
                if sigma <= 0.0 {
                    return Err(invalid(format!("sigma must be positive, got {sigma}")));
                }
                Ok(Family::MixtureGaussian { sigma })
            }
            "npmle_poisson" => Ok(Family::MixturePoisson),
            "npmle_binomial" => {
                let trials = num(param, 1.0)?;
                if trials < 1.0 || trials.fract() != 0.0 {
                    return Err(invalid(format!("trials must be a positive integer, got {trials}")));
                }
                Ok(Family::MixtureBinomial { trials: trials as u64 })
            }
            "npmle_gamma" => {
                let shape = num(param, 1.0)?;
                if shape <= 0.0 {
                    return Err(invalid(format!("shape must be positive, got {shape}")));
                }
                Ok(Family::MixtureGamma { shape })
            }
            other => Err(invalid(format!("unknown family '{other}'"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Linear => write!(f, "linear"),
            Family::Logistic => write!(f, "logistic"),
            Family::Quantile => write!(f, "quantile"),
            Family::MixtureGaussian { sigma } => write!(f, "npmle_gaussian:{sigma}"),
            Family::MixturePoisson => write!(f, "npmle_poisson"),
            Family::MixtureBinomial { trials } => write!(f, "npmle_binomial:{trials}"),
            Family::MixtureGamma { shape } => write!(f, "npmle_gamma:{shape}"),
        }
    }
}

/// Penalty on the coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    None,
    /// `lambda * ||theta||_1`
    L1,
    /// `lambda * ||theta||_2^2`
    L2,
}

impl std::str::FromStr for Penalty {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Penalty::None),
            "l1" => Ok(Penalty::L1),
            "l2" => Ok(Penalty::L2),
            other => Err(invalid(format!("unknown penalty '{other}'"))),
        }
    }
}

/// A family plus penalty; the penalty is only defined for the linear family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub penalty: Penalty,
}

impl ModelSpec {
    pub fn new(family: Family, penalty: Penalty) -> Result<Self> {
        if penalty != Penalty::None && family != Family::Linear {
            return Err(invalid(format!(
                "penalty is only supported for the linear family, got {family}"
            )));
        }
        Ok(Self { family, penalty })
    }

    /// Unpenalized spec for `family`.
    pub fn plain(family: Family) -> Self {
        Self { family, penalty: Penalty::None }
    }

    /// Whether the generator needs a lambda input channel.
    pub fn penalized(&self) -> bool {
        self.penalty != Penalty::None
    }

    /// Per-observation loss at linear predictor `t` (regression families only).
    pub fn loss_at(&self, t: f64, y: f64, eta: Option<f64>) -> Result<f64> {
        match self.family {
            Family::Linear => Ok((y - t) * (y - t)),
            Family::Logistic => Ok((1.0 - y) * t + softplus(-t)),
            Family::Quantile => {
                let eta = check_eta(eta)?;
                let u = y - t;
                Ok((eta - f64::from(u < 0.0)) * u)
            }
            ref fam => Err(invalid(format!(
                "loss_at is for regression families; {fam} is a mixture family"
            ))),
        }
    }

    /// Derivative of the per-observation loss with respect to the linear
    /// predictor `t`. The gradient in `theta` is `psi * x_i`. At a pinball
    /// kink (`u = 0`) the midpoint subgradient `-(eta - 1/2)` is used.
    pub fn psi(&self, t: f64, y: f64, eta: Option<f64>) -> Result<f64> {
        match self.family {
            Family::Linear => Ok(2.0 * (t - y)),
            Family::Logistic => Ok(sigmoid(t) - y),
            Family::Quantile => {
                let eta = check_eta(eta)?;
                let u = y - t;
                if u > 0.0 {
                    Ok(-eta)
                } else if u < 0.0 {
                    Ok(1.0 - eta)
                } else {
                    Ok(-(eta - 0.5))
                }
            }
            ref fam => Err(invalid(format!(
                "psi is for regression families; {fam} is a mixture family"
            ))),
        }
    }

    /// Penalty value `lambda * u(theta)`.
    pub fn penalty_value(&self, theta: ArrayView1<f64>, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        Ok(match self.penalty {
            Penalty::None => 0.0,
            Penalty::L1 => lambda * theta.iter().map(|t| t.abs()).sum::<f64>(),
            Penalty::L2 => lambda * theta.iter().map(|t| t * t).sum::<f64>(),
        })
    }

    /// (Sub)gradient of the penalty; the L1 subgradient is 0 at 0.
    pub fn penalty_subgrad(&self, theta: ArrayView1<f64>, lambda: f64) -> Result<Array1<f64>> {
        check_lambda(lambda)?;
        Ok(match self.penalty {
            Penalty::None => Array1::zeros(theta.len()),
            Penalty::L1 => theta.mapv(|t| lambda * t.signum() * f64::from(t != 0.0)),
            Penalty::L2 => theta.mapv(|t| 2.0 * lambda * t),
        })
    }
}

fn check_eta(eta: Option<f64>) -> Result<f64> {
    match eta {
        Some(e) if e > 0.0 && e < 1.0 => Ok(e),
        Some(e) => Err(invalid(format!("quantile level eta={e} outside (0, 1)"))),
        None => Err(invalid("quantile family requires eta")),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(invalid(format!("penalty weight lambda={lambda} must be finite and >= 0")));
    }
    Ok(())
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e^{-x})`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Family {
    /// Mixture log-density `log f(y | theta)`; `x` scales the Gaussian mean
    /// for regression mixtures.
    pub fn log_density(&self, y: f64, theta: f64, x: Option<f64>) -> Result<f64> {
        match *self {
            Family::MixtureGaussian { sigma } => {
                let mu = theta * x.unwrap_or(1.0);
                let z = (y - mu) / sigma;
                Ok(-0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            }
            Family::MixturePoisson => {
                check_count(y, "Poisson")?;
                check_positive(theta, "Poisson rate")?;
                Ok(y * theta.ln() - theta - ln_gamma(y + 1.0))
            }
            Family::MixtureBinomial { trials } => {
                check_count(y, "Binomial")?;
                let m = trials as f64;
                if y > m {
                    return Err(invalid(format!("Binomial outcome {y} exceeds trials {m}")));
                }
                if !(theta > 0.0 && theta < 1.0) {
                    return Err(invalid(format!("Binomial probability {theta} outside (0, 1)")));
                }
                let ln_choose = ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0);
                Ok(ln_choose + y * theta.ln() + (m - y) * (-theta).ln_1p())
            }
            Family::MixtureGamma { shape } => {
                check_positive(y, "Gamma outcome")?;
                check_positive(theta, "Gamma rate")?;
                Ok(shape * theta.ln() + (shape - 1.0) * y.ln() - theta * y - ln_gamma(shape))
            }
            ref fam => Err(invalid(format!("{fam} is not a mixture family"))),
        }
    }

    /// Derivative of the mixture log-density in `theta`.
    pub fn dlog_density_dtheta(&self, y: f64, theta: f64, x: Option<f64>) -> Result<f64> {
        match *self {
            Family::MixtureGaussian { sigma } => {
                let xv = x.unwrap_or(1.0);
                Ok((y - theta * xv) / (sigma * sigma) * xv)
            }
            Family::MixturePoisson => Ok(y / theta - 1.0),
            Family::MixtureBinomial { trials } => {
                Ok(y / theta - (trials as f64 - y) / (1.0 - theta))
            }
            Family::MixtureGamma { shape } => Ok(shape / theta - y),
            ref fam => Err(invalid(format!("{fam} is not a mixture family"))),
        }
    }
}

fn check_count(y: f64, what: &str) -> Result<()> {
    if y < 0.0 || y.fract() != 0.0 {
        return Err(invalid(format!("{what} outcome {y} is not a nonnegative integer")));
    }
    Ok(())
}

fn check_positive(v: f64, what: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("{what} must be positive, got {v}")));
    }
    Ok(())
}

/// Observed responses plus optional design matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Array1<f64>,
    x: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(y: Array1<f64>, x: Option<Array2<f64>>) -> Result<Self> {
        if y.is_empty() {
            return Err(invalid("dataset has no observations"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("dataset responses contain non-finite values"));
        }
        if let Some(x) = &x {
            if x.nrows() != y.len() {
                return Err(invalid(format!(
                    "design matrix has {} rows but y has {} entries",
                    x.nrows(),
                    y.len()
                )));
            }
            if x.ncols() == 0 {
                return Err(invalid("design matrix has no columns"));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(invalid("design matrix contains non-finite values"));
            }
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Coefficient dimension: design columns, or 1 for location-only data.
    pub fn p(&self) -> usize {
        self.x.as_ref().map_or(1, Array2::ncols)
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn x(&self) -> Option<ArrayView2<'_, f64>> {
        self.x.as_ref().map(Array2::view)
    }

    /// Design matrix, required (regression families).
    pub fn x_required(&self) -> Result<ArrayView2<'_, f64>> {
        self.x
            .as_ref()
            .map(Array2::view)
            .ok_or_else(|| invalid("this family requires a design matrix"))
    }

    /// Linear predictors `X theta`.
    pub fn linear_predictors(&self, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        let x = self.x_required()?;
        if theta.len() != x.ncols() {
            return Err(invalid(format!(
                "theta has {} entries but the design has {} columns",
                theta.len(),
                x.ncols()
            )));
        }
        Ok(x.dot(&theta))
    }

    /// Outcome-family sanity checks (e.g. logistic outcomes in {0, 1}).
    pub fn validate_for(&self, family: &Family) -> Result<()> {
        match family {
            Family::Linear | Family::Quantile => {
                self.x_required()?;
            }
            Family::Logistic => {
                self.x_required()?;
                if self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(invalid("logistic outcomes must lie in {0, 1}"));
                }
            }
            Family::MixturePoisson => {
                for &v in self.y.iter() {
                    check_count(v, "Poisson")?;
                }
            }
            Family::MixtureBinomial { trials } => {
                for &v in self.y.iter() {
                    check_count(v, "Binomial")?;
                    if v > *trials as f64 {
                        return Err(invalid(format!(
                            "Binomial outcome {v} exceeds trials {trials}"
                        )));
                    }
                }
            }
            Family::MixtureGamma { .. } => {
                for &v in self.y.iter() {
                    check_positive(v, "Gamma outcome")?;
                }
            }
            Family::MixtureGaussian { .. } => {}
        }
        Ok(())
    }
}
