//! Named simulation designs for the experiment suite.
//!
//! Each design is a fixed (n, p, coefficient, noise) recipe; given a seed it
//! produces a [`Dataset`] plus a [`Truth`] record of everything the generator
//! was configured with, so downstream checks can compare estimates against
//! the simulation ground truth without re-deriving it.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Dataset, Family};
use crate::rng;

/// RNG stream tag for design simulation, disjoint from the weight-sampling
/// and training streams so a shared seed never aliases draws across stages.
const DESIGN_STREAM: u64 = 0xd351_6e01;

/// All design names accepted by [`simulate`].
pub const NAMES: [&str; 13] = [
    "linear_toy",
    "linear_block",
    "lasso_corr",
    "logistic_small",
    "logistic_mid",
    "logistic_wide",
    "quantile_feng",
    "gmm_2pt",
    "gmm_4pt",
    "bmm_2pt",
    "gamm_2pt",
    "pmm_gamma",
    "mix_reg",
];

/// Ground truth behind one simulated dataset. Regression designs fill
/// `theta` and `sigma`; discrete-mixture designs fill `atoms`/`probs`;
/// `pmm_gamma` records its smooth mixing law in `mixing`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub design: String,
    /// Family string understood by the model parser (e.g. `npmle_gaussian:0.5`).
    pub family: String,
    pub n: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixing: Option<String>,
}

/// A simulated dataset together with its generating truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub family: Family,
    pub truth: Truth,
}

/// Simulate the named design with the given seed.
///
/// Unknown names list the full catalog in the error so a typo at the command
/// line is self-correcting.
pub fn simulate(name: &str, seed: u64) -> Result<Simulated> {
    let mut rng = rng::stream(seed, DESIGN_STREAM);
    match name {
        "linear_toy" => {
            let mut theta = vec![0.0; 10];
            theta[0] = 1.0;
            linear_gaussian(name, seed, 100, &theta, 1.0, &mut rng)
        }
        "linear_block" => {
            let theta = equispaced(-2.0, 2.0, 10);
            linear_gaussian(name, seed, 1000, &theta, 1.0, &mut rng)
        }
        "lasso_corr" => {
            let mut theta = vec![0.0; 50];
            theta[0] = 1.0;
            theta[1] = -2.0;
            theta[2] = 1.0;
            let n = 500;
            let x = equicorrelated_normal(n, 50, &mut rng);
            let y = gaussian_response(&x, &theta, 1.0, &mut rng);
            Ok(Simulated {
                data: Dataset::new(y, Some(x))?,
                family: Family::Linear,
                truth: Truth {
                    design: name.into(),
                    family: "linear".into(),
                    n,
                    seed,
                    theta: Some(theta),
                    sigma: Some(1.0),
                    atoms: None,
                    probs: None,
                    mixing: None,
                },
            })
        }
        "logistic_small" => logistic(name, seed, 500, &equispaced(-3.0, 3.0, 5), &mut rng),
        "logistic_mid" => logistic(name, seed, 500, &equispaced(-3.0, 3.0, 20), &mut rng),
        "logistic_wide" => logistic(name, seed, 1000, &equispaced(-0.5, 0.5, 100), &mut rng),
        "quantile_feng" => quantile_feng(seed, &mut rng),
        "gmm_2pt" => {
            gaussian_mixture(name, seed, 2000, 0.5, &[0.0, 2.0], &[0.8, 0.2], &mut rng)
        }
        "gmm_4pt" => gaussian_mixture(
            name,
            seed,
            10_000,
            0.5,
            &[2.0, 4.0, 6.0, 20.0],
            &[0.2, 0.3, 0.4, 0.1],
            &mut rng,
        ),
        "bmm_2pt" => {
            let n = 1000;
            let atoms = [0.2, 0.8];
            let probs = [0.5, 0.5];
            let y = Array1::from_shape_fn(n, |_| {
                let p = atoms[pick(&probs, &mut rng)];
                let mut successes = 0u64;
                for _ in 0..10 {
                    successes += u64::from(rng.random::<f64>() < p);
                }
                successes as f64
            });
            mixture(name, seed, "npmle_binomial:10", y, &atoms, &probs)
        }
        "gamm_2pt" => {
            let n = 1000;
            let atoms = [1.0, 10.0];
            let probs = [0.2, 0.8];
            let y = Array1::from_shape_fn(n, |_| {
                let rate = atoms[pick(&probs, &mut rng)];
                Gamma::new(1.0, 1.0 / rate).expect("valid gamma").sample(&mut rng)
            });
            mixture(name, seed, "npmle_gamma:1", y, &atoms, &probs)
        }
        "pmm_gamma" => {
            let n = 1000;
            let prior = Gamma::new(3.0, 1.0).expect("valid gamma");
            let y = Array1::from_shape_fn(n, |_| {
                let rate: f64 = prior.sample(&mut rng);
                Poisson::new(rate.max(1e-12)).expect("positive rate").sample(&mut rng)
            });
            Ok(Simulated {
                data: Dataset::new(y, None)?,
                family: "npmle_poisson".parse()?,
                truth: Truth {
                    design: name.into(),
                    family: "npmle_poisson".into(),
                    n,
                    seed,
                    theta: None,
                    sigma: None,
                    atoms: None,
                    probs: None,
                    mixing: Some("gamma(shape=3, scale=1)".into()),
                },
            })
        }
        "mix_reg" => {
            let n = 10_000;
            let atoms = [-1.0, 1.0];
            let probs = [0.5, 0.5];
            let sigma = 0.1f64.sqrt();
            let x = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
            let y = Array1::from_shape_fn(n, |i| {
                let theta = atoms[pick(&probs, &mut rng)];
                x[[i, 0]] * theta + sigma * rng.sample::<f64, _>(StandardNormal)
            });
            let family_str = format!("npmle_gaussian:{sigma}");
            Ok(Simulated {
                data: Dataset::new(y, Some(x))?,
                family: family_str.parse()?,
                truth: Truth {
                    design: name.into(),
                    family: family_str,
                    n,
                    seed,
                    theta: None,
                    sigma: Some(sigma),
                    atoms: Some(atoms.to_vec()),
                    probs: Some(probs.to_vec()),
                    mixing: None,
                },
            })
        }
        other => Err(invalid(format!(
            "unknown design '{other}' (available: {})",
            NAMES.join(", ")
        ))),
    }
}

/// `count` values equally spaced from `lo` to `hi` inclusive.
fn equispaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    Array1::linspace(lo, hi, count).to_vec()
}

fn pick(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn iid_normal(n: usize, p: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Equicorrelated Gaussian rows: unit variance, pairwise correlation 1/2,
/// realised as `(g_0 + g_j) / sqrt(2)` with a shared factor per row.
fn equicorrelated_normal(n: usize, p: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..p {
            let own: f64 = rng.sample(StandardNormal);
            x[[i, j]] = (shared + own) / 2.0f64.sqrt();
        }
    }
    x
}

fn gaussian_response(x: &Array2<f64>, theta: &[f64], sigma: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(x.nrows(), |i| {
        let mean: f64 = x.row(i).iter().zip(theta).map(|(xij, tj)| xij * tj).sum();
        mean + sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

fn linear_gaussian(
    name: &str,
    seed: u64,
    n: usize,
    theta: &[f64],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Simulated> {
    let x = iid_normal(n, theta.len(), rng);
    let y = gaussian_response(&x, theta, sigma, rng);
    Ok(Simulated {
        data: Dataset::new(y, Some(x))?,
        family: Family::Linear,
        truth: Truth {
            design: name.into(),
            family: "linear".into(),
            n,
            seed,
            theta: Some(theta.to_vec()),
            sigma: Some(sigma),
            atoms: None,
            probs: None,
            mixing: None,
        },
    })
}

fn logistic(
    name: &str,
    seed: u64,
    n: usize,
    theta: &[f64],
    rng: &mut impl Rng,
) -> Result<Simulated> {
    let x = iid_normal(n, theta.len(), rng);
    let y = Array1::from_shape_fn(n, |i| {
        let t: f64 = x.row(i).iter().zip(theta).map(|(xij, tj)| xij * tj).sum();
        let p = 1.0 / (1.0 + (-t).exp());
        f64::from(rng.random::<f64>() < p)
    });
    Ok(Simulated {
        data: Dataset::new(y, Some(x))?,
        family: Family::Logistic,
        truth: Truth {
            design: name.into(),
            family: "logistic".into(),
            n,
            seed,
            theta: Some(theta.to_vec()),
            sigma: None,
            atoms: None,
            probs: None,
            mixing: None,
        },
    })
}

/// Heteroskedastic quantile-regression design: all-ones coefficients,
/// `y = X'theta + 3^{-1/2} [2 + {1 + (x_1 - 8)^2 + x_2} / 10] eps` with
/// `eps ~ t_3`, `x_2` an indicator that is 1 for the first 400 rows, and the
/// remaining covariates standard log-normal.
fn quantile_feng(seed: u64, rng: &mut impl Rng) -> Result<Simulated> {
    let (n, p) = (500, 5);
    let theta = vec![1.0; p];
    let t3 = StudentT::new(3.0).expect("valid dof");
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = if j == 1 {
                f64::from(i < 400)
            } else {
                rng.sample::<f64, _>(StandardNormal).exp()
            };
        }
    }
    let y = Array1::from_shape_fn(n, |i| {
        let mean: f64 = x.row(i).iter().zip(&theta).map(|(xij, tj)| xij * tj).sum();
        let scale = (2.0 + (1.0 + (x[[i, 0]] - 8.0).powi(2) + x[[i, 1]]) / 10.0) / 3.0f64.sqrt();
        mean + scale * t3.sample(rng)
    });
    Ok(Simulated {
        data: Dataset::new(y, Some(x))?,
        family: Family::Quantile,
        truth: Truth {
            design: "quantile_feng".into(),
            family: "quantile".into(),
            n,
            seed,
            theta: Some(theta),
            sigma: None,
            atoms: None,
            probs: None,
            mixing: None,
        },
    })
}

fn gaussian_mixture(
    name: &str,
    seed: u64,
    n: usize,
    sigma: f64,
    atoms: &[f64],
    probs: &[f64],
    rng: &mut impl Rng,
) -> Result<Simulated> {
    let y = Array1::from_shape_fn(n, |_| {
        atoms[pick(probs, rng)] + sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let family_str = format!("npmle_gaussian:{sigma}");
    Ok(Simulated {
        data: Dataset::new(y, None)?,
        family: family_str.parse()?,
        truth: Truth {
            design: name.into(),
            family: family_str,
            n,
            seed,
            theta: None,
            sigma: Some(sigma),
            atoms: Some(atoms.to_vec()),
            probs: Some(probs.to_vec()),
            mixing: None,
        },
    })
}

fn mixture(
    name: &str,
    seed: u64,
    family_str: &str,
    y: Array1<f64>,
    atoms: &[f64],
    probs: &[f64],
) -> Result<Simulated> {
    let n = y.len();
    Ok(Simulated {
        data: Dataset::new(y, None)?,
        family: family_str.parse()?,
        truth: Truth {
            design: name.into(),
            family: family_str.into(),
            n,
            seed,
            theta: None,
            sigma: None,
            atoms: Some(atoms.to_vec()),
            probs: Some(probs.to_vec()),
            mixing: None,
        },
    })
}
