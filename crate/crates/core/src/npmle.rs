//! Generative nonparametric mixture estimation: a generator maps bootstrap
//! weights and latent draws to a panel of candidate component parameters,
//! trained in two stages. Stage I fits the generator under random row
//! slicing with uniform mixture probabilities; stage II freezes the
//! generator and fits the mixture probabilities by EM. Posterior draws,
//! predictive densities, and per-observation posterior means follow.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{invalid, numeric, Result};
use crate::model::{sigmoid, softplus, Dataset, Family};
use crate::net::{assemble_batch_raw, Architecture, Generator};
use crate::stats::log_sum_exp;
use crate::train::{Checkpoint, TrainConfig, TrainReport};
use crate::weights::{sample_weights_with, SubgroupMap, WeightLaw};

const STAGE1_STREAM: u64 = 0x6d69_7831;
const STAGE2_STREAM: u64 = 0x6d69_7832;
const POSTERIOR_STREAM: u64 = 0x6d69_7833;

/// Sizes for the mixture generator: `q` candidate parameter rows, latent
/// dimension, and the Monte Carlo draw counts per training step.
#[derive(Debug, Clone)]
pub struct MixtureGenConfig {
    /// Number of candidate component rows in the generator output.
    pub q: usize,
    /// Latent input dimension (draws are uniform on the unit cube).
    pub z_dim: usize,
    /// Latent draws per step (the inner mixture average).
    pub latent_draws: usize,
    /// Weight draws per step (the outer bootstrap average).
    pub weight_draws: usize,
    pub family: Family,
}

impl MixtureGenConfig {
    pub fn new(family: Family) -> Result<Self> {
        let config = MixtureGenConfig {
            q: 100,
            z_dim: 1,
            latent_draws: 100,
            weight_draws: 100,
            family,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.family.is_mixture() {
            return Err(invalid(format!(
                "{} is not a mixture family; the mixture generator needs one",
                self.family
            )));
        }
        if self.q == 0 || self.latent_draws == 0 || self.weight_draws == 0 {
            return Err(invalid("q, latent draws, and weight draws must all be positive"));
        }
        if self.z_dim == 0 {
            return Err(invalid("latent dimension must be at least the parameter dimension (1)"));
        }
        link_for(&self.family)?;
        Ok(())
    }

    /// Generator architecture implied by this config and a subgroup count.
    pub fn architecture(&self, s: usize, tc: &TrainConfig) -> Result<Architecture> {
        Ok(Architecture::new(s, self.z_dim, self.q, tc.variant).with_size(tc.hidden, tc.depth))
    }
}

/// How unconstrained generator outputs map into the family's parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Link {
    Identity,
    Softplus,
    Logistic,
}

fn link_for(family: &Family) -> Result<Link> {
    match family {
        Family::MixtureGaussian { .. } => Ok(Link::Identity),
        Family::MixturePoisson | Family::MixtureGamma { .. } => Ok(Link::Softplus),
        Family::MixtureBinomial { .. } => Ok(Link::Logistic),
        other => Err(invalid(format!("{other} is not a mixture family"))),
    }
}

impl Link {
    fn apply(self, raw: f64) -> f64 {
        match self {
            Link::Identity => raw,
            Link::Softplus => softplus(raw),
            Link::Logistic => sigmoid(raw),
        }
    }

    fn derivative(self, raw: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Softplus => sigmoid(raw),
            Link::Logistic => {
                let s = sigmoid(raw);
                s * (1.0 - s)
            }
        }
    }
}

fn scalar_covariate(data: &Dataset) -> Option<Array1<f64>> {
    data.x().map(|x| x.column(0).to_owned())
}

/// Stage-I loss and parameter gradient at fixed weight rows, latent rows,
/// and sliced candidate row: the negated weighted log marginal likelihood,
/// averaged over weight draws and observations.
fn stage1_loss_grad(
    gen: &Generator,
    family: &Family,
    data: &Dataset,
    map: &SubgroupMap,
    alphas: ArrayView2<f64>,
    zs: ArrayView2<f64>,
    row: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let link = link_for(family)?;
    let n = data.n();
    let y = data.y();
    let x = scalar_covariate(data);
    let (n_w, m) = (alphas.nrows(), zs.nrows());

    // One input row per (weight draw, latent draw) pair.
    let mut inputs = Array2::zeros((n_w * m, alphas.ncols() + zs.ncols()));
    for k in 0..n_w {
        for mi in 0..m {
            let r = k * m + mi;
            inputs
                .slice_mut(ndarray::s![r, ..alphas.ncols()])
                .assign(&alphas.row(k));
            inputs.slice_mut(ndarray::s![r, alphas.ncols()..]).assign(&zs.row(mi));
        }
    }
    let (out, cache) = gen.forward_batch(inputs.view())?;
    let raw: Vec<f64> = (0..n_w * m).map(|r| out[[r, row]]).collect();
    let theta: Vec<f64> = raw.iter().map(|&v| link.apply(v)).collect();
    let dtheta: Vec<f64> = raw.iter().map(|&v| link.derivative(v)).collect();

    let scale = 1.0 / (n_w as f64 * n as f64);
    let mut upstream = Array2::zeros((n_w * m, out.ncols()));
    let mut loss = 0.0;
    let mut log_lik = vec![0.0f64; m];
    for k in 0..n_w {
        let w = map.expand(&alphas.row(k).to_vec())?;
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let xi = x.as_ref().map(|x| x[i]);
            for mi in 0..m {
                log_lik[mi] = family
                    .log_density(y[i], theta[k * m + mi], xi)
                    .map_err(|e| numeric(format!("observation {i}: {e}")))?;
            }
            let lse = log_sum_exp(&log_lik);
            if !lse.is_finite() {
                return Err(numeric(format!(
                    "observation {i}: marginal likelihood vanished across all latent draws"
                )));
            }
            loss -= w[i] * (lse - (m as f64).ln()) * scale;
            for mi in 0..m {
                let r = k * m + mi;
                let responsibility = (log_lik[mi] - lse).exp();
                let dlog = family
                    .dlog_density_dtheta(y[i], theta[r], xi)
                    .map_err(|e| numeric(format!("observation {i}: {e}")))?;
                upstream[[r, row]] -= w[i] * responsibility * dlog * dtheta[r] * scale;
            }
        }
    }
    gen.backward(&cache, upstream.view(), grad)?;
    Ok(loss)
}

/// Stage I: train the generator with a uniformly sliced candidate row per
/// step. Weight rows, latent rows, and the slice are redrawn every step.
pub fn train_stage1(
    mix: &MixtureGenConfig,
    data: &Dataset,
    map: &SubgroupMap,
    tc: &TrainConfig,
) -> Result<(Generator, TrainReport)> {
    mix.validate()?;
    tc.validate()?;
    data.validate_for(&mix.family)?;
    if map.n() != data.n() {
        return Err(invalid(format!(
            "subgroup map covers {} observations, data has {}",
            map.n(),
            data.n()
        )));
    }
    let s = map.s();
    let arch = mix.architecture(s, tc)?;
    let mut gen = Generator::init(arch, tc.seed)?;
    let mut adam = crate::train::Adam::new(gen.params().len());
    let mut grad = vec![0.0f64; gen.params().len()];
    let mut rng = crate::rng::stream(tc.seed, STAGE1_STREAM);

    let clock = std::time::Instant::now();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut alphas = Array2::zeros((mix.weight_draws, s));
    let mut zs = Array2::zeros((mix.latent_draws, mix.z_dim));
    let mut final_loss = f64::NAN;

    for t in 1..=tc.t {
        for k in 0..mix.weight_draws {
            let draw = sample_weights_with(&tc.weight_law, s, &mut rng)?;
            alphas.row_mut(k).assign(&ArrayView1::from(&draw.alpha[..]));
        }
        zs.mapv_inplace(|_| rng.random_range(0.0..1.0));
        let row = rng.random_range(0..mix.q);

        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = stage1_loss_grad(
            &gen,
            &mix.family,
            data,
            map,
            alphas.view(),
            zs.view(),
            row,
            &mut grad,
        )
        .map_err(|e| numeric(format!("step {t}: {e}")))?;
        if !loss.is_finite() {
            return Err(numeric(format!("non-finite mixture training loss at step {t}")));
        }
        let lr = tc.learning_rate * (t as f64).powf(-tc.decay_exponent);
        adam.update(gen.params_mut(), &grad, lr);

        if t % tc.checkpoint_every == 0 || t == tc.t {
            checkpoints.push(Checkpoint {
                iteration: t,
                loss,
                seconds: clock.elapsed().as_secs_f64(),
            });
        }
        final_loss = loss;
    }
    Ok((gen, TrainReport { checkpoints, iterations_run: tc.t, final_loss }))
}

/// Stage-II output: fitted mixture probabilities plus the per-observation
/// component log-likelihood table they were fitted on.
#[derive(Debug, Clone)]
pub struct EmResult {
    pub tau: Array1<f64>,
    /// `n x q` log of the Monte Carlo component likelihoods.
    pub log_table: Array2<f64>,
    /// Observed-data log-likelihood at the start of each iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// EM on the mixture probabilities with a fixed component likelihood table.
pub fn em_from_table(
    log_table: ArrayView2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<EmResult> {
    let (n, q) = log_table.dim();
    if n == 0 || q == 0 {
        return Err(invalid("component likelihood table is empty"));
    }
    if !(tol >= 0.0) {
        return Err(invalid(format!("tolerance {tol} must be nonnegative")));
    }
    let mut tau = Array1::from_elem(q, 1.0 / q as f64);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut terms = vec![0.0f64; q];
    while iterations < max_iter {
        iterations += 1;
        let mut new_tau = Array1::zeros(q);
        let mut ll = 0.0;
        for i in 0..n {
            for k in 0..q {
                terms[k] = tau[k].ln() + log_table[[i, k]];
            }
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(numeric(format!(
                    "observation {i} has zero likelihood under every mixture candidate"
                )));
            }
            ll += lse;
            for k in 0..q {
                new_tau[k] += (terms[k] - lse).exp();
            }
        }
        new_tau /= n as f64;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-8 {
                return Err(numeric(format!(
                    "EM objective decreased from {prev} to {ll} at iteration {iterations}"
                )));
            }
        }
        trace.push(ll);
        let delta = tau
            .iter()
            .zip(new_tau.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        tau = new_tau;
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        tau,
        log_table: log_table.to_owned(),
        loglik_trace: trace,
        iterations,
        converged,
    })
}

/// Stage II: freeze the generator, build the Monte Carlo component
/// likelihood table from fresh (weight, latent) pairs, and fit the mixture
/// probabilities by EM until the update moves by less than `tol`.
pub fn em_stage2(
    gen: &Generator,
    mix: &MixtureGenConfig,
    data: &Dataset,
    law: &WeightLaw,
    tol: f64,
    seed: u64,
) -> Result<EmResult> {
    const MAX_ITER: usize = 10_000;
    mix.validate()?;
    data.validate_for(&mix.family)?;
    check_panel(gen, mix)?;
    let link = link_for(&mix.family)?;
    let s = gen.arch().alpha_dim;
    let m = mix.latent_draws;
    let mut rng = crate::rng::stream(seed, STAGE2_STREAM);
    let mut alphas = Array2::zeros((m, s));
    for r in 0..m {
        let draw = sample_weights_with(law, s, &mut rng)?;
        alphas.row_mut(r).assign(&ArrayView1::from(&draw.alpha[..]));
    }
    let zs = Array2::from_shape_fn((m, mix.z_dim), |_| rng.random_range(0.0..1.0));
    let inputs = assemble_batch_raw(gen.arch(), alphas.view(), Some(zs.view()))?;
    let (out, _) = gen.forward_batch(inputs.view())?;

    let n = data.n();
    let y = data.y();
    let x = scalar_covariate(data);
    let mut log_table = Array2::zeros((n, mix.q));
    let mut logs = vec![0.0f64; m];
    for i in 0..n {
        let xi = x.as_ref().map(|x| x[i]);
        for k in 0..mix.q {
            for (mi, slot) in logs.iter_mut().enumerate() {
                *slot = mix
                    .family
                    .log_density(y[i], link.apply(out[[mi, k]]), xi)
                    .map_err(|e| numeric(format!("observation {i}: {e}")))?;
            }
            log_table[[i, k]] = log_sum_exp(&logs) - (m as f64).ln();
        }
    }
    em_from_table(log_table.view(), tol, MAX_ITER)
}

/// Posterior draws from the fitted mixture: each draw samples weights and a
/// latent point, evaluates the candidate panel, and keeps the row selected
/// by the mixture probabilities.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    draws: Array1<f64>,
    rows: Vec<usize>,
    alphas: Array2<f64>,
    zs: Array2<f64>,
    tau: Array1<f64>,
    family: Family,
}

impl MixturePosterior {
    pub fn new(
        draws: Array1<f64>,
        rows: Vec<usize>,
        alphas: Array2<f64>,
        zs: Array2<f64>,
        tau: Array1<f64>,
        family: Family,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(invalid("posterior needs at least one draw"));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(invalid("posterior draws must be finite"));
        }
        if rows.len() != draws.len() || alphas.nrows() != draws.len() || zs.nrows() != draws.len()
        {
            return Err(invalid("draws, rows, and provenance blocks must have equal length"));
        }
        check_tau(tau.view())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= tau.len()) {
            return Err(invalid(format!("selected row {bad} out of range for {} rows", tau.len())));
        }
        Ok(MixturePosterior { draws, rows, alphas, zs, tau, family })
    }

    pub fn draws(&self) -> ArrayView1<'_, f64> {
        self.draws.view()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn alphas(&self) -> ArrayView2<'_, f64> {
        self.alphas.view()
    }

    pub fn zs(&self) -> ArrayView2<'_, f64> {
        self.zs.view()
    }

    pub fn tau(&self) -> ArrayView1<'_, f64> {
        self.tau.view()
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// CSV: `draw,row,theta`.
    pub fn write_draws_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["draw", "row", "theta"])?;
        for b in 0..self.draws.len() {
            w.write_record([
                b.to_string(),
                self.rows[b].to_string(),
                format!("{:.17e}", self.draws[b]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_panel(gen: &Generator, mix: &MixtureGenConfig) -> Result<()> {
    if gen.arch().out_dim != mix.q || gen.arch().aux_dim != mix.z_dim {
        return Err(invalid(format!(
            "generator emits {}x outputs with {} latent inputs; config expects q={} z_dim={}",
            gen.arch().out_dim,
            gen.arch().aux_dim,
            mix.q,
            mix.z_dim
        )));
    }
    Ok(())
}

fn check_tau(tau: ArrayView1<f64>) -> Result<()> {
    if tau.is_empty() || tau.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(invalid("mixture probabilities must be nonnegative and finite"));
    }
    let total: f64 = tau.sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(invalid(format!("mixture probabilities sum to {total}, expected 1")));
    }
    Ok(())
}

fn sample_row(tau: ArrayView1<f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut cum = 0.0;
    for (k, &t) in tau.iter().enumerate() {
        cum += t;
        if u < cum {
            return k;
        }
    }
    tau.len() - 1
}

pub fn sample_posterior(
    gen: &Generator,
    mix: &MixtureGenConfig,
    tau: ArrayView1<f64>,
    law: &WeightLaw,
    count: usize,
    seed: u64,
) -> Result<MixturePosterior> {
    mix.validate()?;
    check_tau(tau)?;
    check_panel(gen, mix)?;
    if tau.len() != mix.q {
        return Err(invalid(format!(
            "mixture probabilities have length {}, generator emits {} rows",
            tau.len(),
            mix.q
        )));
    }
    if count == 0 {
        return Err(invalid("need at least one posterior draw"));
    }
    let link = link_for(&mix.family)?;
    let s = gen.arch().alpha_dim;
    let mut rng = crate::rng::stream(seed, POSTERIOR_STREAM);
    let mut alphas = Array2::zeros((count, s));
    for b in 0..count {
        let draw = sample_weights_with(law, s, &mut rng)?;
        alphas.row_mut(b).assign(&ArrayView1::from(&draw.alpha[..]));
    }
    let zs = Array2::from_shape_fn((count, mix.z_dim), |_| rng.random_range(0.0..1.0));
    let rows: Vec<usize> = (0..count).map(|_| sample_row(tau, &mut rng)).collect();

    let inputs = assemble_batch_raw(gen.arch(), alphas.view(), Some(zs.view()))?;
    let (out, _) = gen.forward_batch(inputs.view())?;
    let draws = Array1::from_shape_fn(count, |b| link.apply(out[[b, rows[b]]]));
    MixturePosterior::new(draws, rows, alphas, zs, tau.to_owned(), mix.family.clone())
}

/// Posterior predictive density at a new response value: the Monte Carlo
/// average of the component density over posterior draws.
pub fn predictive_density(posterior: &MixturePosterior, y_new: f64) -> Result<f64> {
    let mut total = 0.0;
    for &theta in posterior.draws.iter() {
        total += posterior.family.log_density(y_new, theta, None)?.exp();
    }
    Ok(total / posterior.draws.len() as f64)
}

/// Predictive density evaluated along a response grid, for plotting.
pub fn predictive_density_curve(
    posterior: &MixturePosterior,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    grid.iter().map(|&y| Ok((y, predictive_density(posterior, y)?))).collect()
}

/// CSV: `y,density`.
pub fn write_density_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y", "density"])?;
    for (y, d) in curve {
        w.write_record([format!("{y:.17e}"), format!("{d:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-observation posterior means by self-normalized importance weighting:
/// posterior draws reweighted by each observation's own likelihood.
pub fn posterior_mean_per_observation(
    posterior: &MixturePosterior,
    data: &Dataset,
) -> Result<Array1<f64>> {
    data.validate_for(&posterior.family)?;
    let n = data.n();
    let y = data.y();
    let x = scalar_covariate(data);
    let b = posterior.draws.len();
    let mut log_w = vec![0.0f64; b];
    let mut means = Array1::zeros(n);
    for i in 0..n {
        let xi = x.as_ref().map(|x| x[i]);
        for (bi, lw) in log_w.iter_mut().enumerate() {
            *lw = posterior
                .family
                .log_density(y[i], posterior.draws[bi], xi)
                .map_err(|e| numeric(format!("observation {i}: {e}")))?;
        }
        let lse = log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(numeric(format!(
                "observation {i}: posterior weights have zero normalizer"
            )));
        }
        means[i] = log_w
            .iter()
            .zip(posterior.draws.iter())
            .map(|(&lw, &theta)| (lw - lse).exp() * theta)
            .sum();
    }
    Ok(means)
}
