//! Integrative training of generator networks.
//!
//! Each step samples a fresh batch of weight vectors and tuning values, pushes
//! them through the generator, and descends the Monte Carlo estimate of
//! `E[(1/n) sum_i w_i loss_i(G(w, lambda, eta)) + lambda u(G(...))]` with
//! adaptive-moment updates. Nothing is ever solved exactly during training;
//! the generator learns the whole solution path at once. `train_naive` is the
//! fit-to-precomputed-draws baseline used for comparisons.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::model::{Dataset, ModelSpec};
use crate::net::{assemble_batch, Architecture, Generator, Variant};
use crate::weights::{SubgroupMap, WeightLaw};

/// Everything one training run needs beyond the model and data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Monte Carlo draws per step.
    pub m: usize,
    /// Total iterations.
    pub t: usize,
    pub learning_rate: f64,
    /// Step size decays as `t^{-decay_exponent}`.
    pub decay_exponent: f64,
    /// Penalty grid; required for penalized models, forbidden otherwise.
    pub lambda_candidates: Option<Vec<f64>>,
    /// Log-scale Gaussian jitter applied around each sampled grid point.
    pub lambda_jitter_sd: f64,
    /// Quantile-level grid; required when the loss is eta-tunable.
    pub eta_candidates: Option<Vec<f64>>,
    pub eta_jitter_sd: f64,
    pub eta_clip: (f64, f64),
    pub seed: u64,
    pub weight_law: WeightLaw,
    /// Subgroup count used by callers that build the partition from this config.
    pub s: usize,
    pub hidden: usize,
    pub depth: usize,
    pub variant: Variant,
    pub checkpoint_every: usize,
    /// Stop early when the 1000-step moving-average loss improves by less
    /// than 1e-6 relative. Off by default: fixed-length runs are reproducible.
    pub early_stop: bool,
    /// Optional observation mini-batch size; full batch when absent.
    pub minibatch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 100,
            t: 30_000,
            learning_rate: 3e-4,
            decay_exponent: 0.3,
            lambda_candidates: None,
            lambda_jitter_sd: 0.2,
            eta_candidates: None,
            eta_jitter_sd: 0.03,
            eta_clip: (0.001, 0.999),
            seed: 0,
            weight_law: WeightLaw::Dirichlet,
            s: 100,
            hidden: 1000,
            depth: 3,
            variant: Variant::WmMlp,
            checkpoint_every: 250,
            early_stop: false,
            minibatch: None,
        }
    }
}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.t == 0 {
            return Err(invalid(format!("m={} and t={} must both be >= 1", self.m, self.t)));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_exponent > 0.0) {
            return Err(invalid(format!(
                "learning_rate={} and decay_exponent={} must be > 0",
                self.learning_rate, self.decay_exponent
            )));
        }
        if !(self.lambda_jitter_sd >= 0.0 && self.eta_jitter_sd >= 0.0) {
            return Err(invalid("jitter standard deviations must be >= 0"));
        }
        let (lo, hi) = self.eta_clip;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(invalid(format!("eta clip bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        if let Some(grid) = &self.lambda_candidates {
            if grid.is_empty() {
                return Err(invalid("lambda_candidates is present but empty"));
            }
            if grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return Err(invalid("lambda candidates must be finite and > 0"));
            }
        }
        if let Some(grid) = &self.eta_candidates {
            if grid.is_empty() {
                return Err(invalid("eta_candidates is present but empty"));
            }
            if grid.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(invalid("eta candidates must lie strictly inside (0, 1)"));
            }
        }
        if self.s == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(invalid("s, hidden and depth must all be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every must be >= 1"));
        }
        if self.minibatch == Some(0) {
            return Err(invalid("minibatch size must be >= 1 when set"));
        }
        Ok(())
    }

    /// Architecture implied by this config for `spec` on `data` grouped by `map`.
    pub fn architecture(&self, spec: &ModelSpec, data: &Dataset, map: &SubgroupMap) -> Result<Architecture> {
        let aux = usize::from(spec.penalty != crate::model::Penalty::None)
            + usize::from(spec.family.requires_eta());
        let p = data
            .x()
            .map(|x| x.ncols())
            .ok_or_else(|| invalid("training a regression generator requires covariates"))?;
        Ok(Architecture {
            alpha_dim: map.s(),
            aux_dim: aux,
            hidden: self.hidden,
            depth: self.depth,
            out_dim: p,
            variant: self.variant,
        })
    }
}

/// One checkpoint row of a training trace.
#[derive(Debug, Clone, Serialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Loss trace of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoints: Vec<Checkpoint>,
    pub iterations_run: usize,
    pub final_loss: f64,
}

impl TrainReport {
    /// CSV trace: `iteration,loss,seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss", "seconds"])?;
        for c in &self.checkpoints {
            w.write_record([
                c.iteration.to_string(),
                format!("{:.10e}", c.loss),
                format!("{:.3}", c.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adaptive-moment optimizer over a flat parameter buffer
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected).
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Sampled tuning values for one Monte Carlo draw: uniform over the candidate
/// grid, jittered (log-normally for lambda, Gaussian-clipped for eta).
pub fn sample_tuning(
    config: &TrainConfig,
    rng: &mut impl Rng,
    want_lambda: bool,
    want_eta: bool,
) -> Result<(Option<f64>, Option<f64>)> {
    use rand_distr::{Distribution, Normal};
    let lambda = if want_lambda {
        let grid = config
            .lambda_candidates
            .as_ref()
            .ok_or_else(|| invalid("penalized training requires lambda_candidates"))?;
        let base = grid[rng.random_range(0..grid.len())];
        let jitter = if config.lambda_jitter_sd > 0.0 {
            Normal::new(0.0, config.lambda_jitter_sd).expect("validated sd").sample(rng)
        } else {
            0.0
        };
        Some((base.ln() + jitter).exp())
    } else {
        None
    };
    let eta = if want_eta {
        let grid = config
            .eta_candidates
            .as_ref()
            .ok_or_else(|| invalid("eta-tunable training requires eta_candidates"))?;
        let base = grid[rng.random_range(0..grid.len())];
        let jitter = if config.eta_jitter_sd > 0.0 {
            Normal::new(0.0, config.eta_jitter_sd).expect("validated sd").sample(rng)
        } else {
            0.0
        };
        Some((base + jitter).clamp(config.eta_clip.0, config.eta_clip.1))
    } else {
        None
    };
    Ok((lambda, eta))
}

/// Train a generator for `spec` on `data` with weights grouped by `map`.
pub fn train(
    config: &TrainConfig,
    spec: &ModelSpec,
    data: &Dataset,
    map: &SubgroupMap,
) -> Result<(Generator, TrainReport)> {
    train_with_probe(config, spec, data, map, |_, _, _| {})
}

/// `train` with a read-only callback invoked at every checkpoint as
/// `probe(iteration, generator, loss)`; useful for external trace metrics.
pub fn train_with_probe(
    config: &TrainConfig,
    spec: &ModelSpec,
    data: &Dataset,
    map: &SubgroupMap,
    mut probe: impl FnMut(usize, &Generator, f64),
) -> Result<(Generator, TrainReport)> {
    config.validate()?;
    data.validate_for(&spec.family)?;
    if spec.family.is_mixture() {
        return Err(invalid("mixture families train through the mixture-generator pipeline"));
    }
    if map.n() != data.n() {
        return Err(invalid(format!(
            "subgroup map covers {} observations, data has {}",
            map.n(),
            data.n()
        )));
    }
    let penalized = spec.penalty != crate::model::Penalty::None;
    let tunable = spec.family.requires_eta();
    if !penalized && config.lambda_candidates.is_some() {
        return Err(invalid("lambda_candidates given for an unpenalized model"));
    }
    if !tunable && config.eta_candidates.is_some() {
        return Err(invalid("eta_candidates given for a model without a tunable loss level"));
    }
    if let WeightLaw::CvFold { k_folds, .. } = config.weight_law {
        if k_folds > map.s() {
            return Err(invalid("fold count exceeds subgroup count"));
        }
    }

    let arch = config.architecture(spec, data, map)?;
    let mut gen = Generator::init(arch, config.seed)?;
    let mut adam = Adam::new(gen.params().len());
    let mut grad = vec![0.0f64; gen.params().len()];
    let mut rng = crate::rng::stream(config.seed, TRAIN_STREAM);

    let n = data.n();
    let x = data.x_required()?;
    let y = data.y();
    let clock = Instant::now();
    let mut checkpoints = Vec::new();
    let mut last_lambda = None;
    let mut last_eta = None;
    let mut loss_window = MovingWindow::new(1000);
    let mut prev_window_mean = f64::INFINITY;
    let mut iterations_run = 0;
    let mut final_loss = f64::NAN;

    let mut alphas = Array2::<f64>::zeros((config.m, map.s()));
    let mut lambdas = vec![0.0f64; config.m];
    let mut etas = vec![0.0f64; config.m];

    for t in 1..=config.t {
        iterations_run = t;
        // Sample the Monte Carlo batch of weights and tuning values.
        for mrow in 0..config.m {
            let law = effective_law(&config.weight_law, &mut rng)?;
            let draw = crate::weights::sample_weights_with(&law, map.s(), &mut rng)?;
            alphas.row_mut(mrow).assign(&ndarray::ArrayView1::from(&draw.alpha[..]));
            let (l, e) = sample_tuning(config, &mut rng, penalized, tunable)?;
            if let Some(l) = l {
                lambdas[mrow] = l;
                last_lambda = Some(l);
            }
            if let Some(e) = e {
                etas[mrow] = e;
                last_eta = Some(e);
            }
        }
        // Optional observation mini-batch (full batch by default).
        let batch_idx: Option<Vec<usize>> = config.minibatch.map(|b| {
            let b = b.min(n);
            rand::seq::index::sample(&mut rng, n, b).into_vec()
        });

        let inputs = assemble_batch(
            &arch,
            alphas.view(),
            penalized.then_some(&lambdas[..]),
            tunable.then_some(&etas[..]),
        )?;
        let (theta, cache) = gen.forward_batch(inputs.view())?;

        let (loss, upstream) = batch_loss_and_upstream(
            spec,
            x,
            y,
            map,
            &alphas,
            &theta,
            penalized.then_some(&lambdas[..]),
            tunable.then_some(&etas[..]),
            batch_idx.as_deref(),
        )?;
        if !loss.is_finite() {
            return Err(numeric(format!(
                "non-finite training loss at step {t} (last lambda {last_lambda:?}, last eta {last_eta:?})"
            )));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        gen.backward(&cache, upstream.view(), &mut grad)?;
        let lr = config.learning_rate * (t as f64).powf(-config.decay_exponent);
        adam.update(gen.params_mut(), &grad, lr);
        final_loss = loss;

        if t % config.checkpoint_every == 0 || t == config.t {
            checkpoints.push(Checkpoint {
                iteration: t,
                loss,
                seconds: clock.elapsed().as_secs_f64(),
            });
            probe(t, &gen, loss);
        }
        if config.early_stop {
            loss_window.push(loss);
            if t % 1000 == 0 {
                let mean = loss_window.mean();
                if (prev_window_mean - mean).abs() <= 1e-6 * prev_window_mean.abs() {
                    break;
                }
                prev_window_mean = mean;
            }
        }
    }
    let report = TrainReport { checkpoints, iterations_run, final_loss };
    Ok((gen, report))
}

const TRAIN_STREAM: u64 = 0x7261_4e21;

/// Per-draw law used during training. Two laws are enriched so one generator
/// serves several downstream uses: the two-level law mixes 50/50 with its
/// single-level base (the calibration pipeline queries both levels), and
/// cross-validation laws get a uniformly random fold per draw.
fn effective_law(law: &WeightLaw, rng: &mut impl Rng) -> Result<WeightLaw> {
    Ok(match law {
        WeightLaw::DoubleDirichlet => {
            if rng.random_range(0.0..1.0) < 0.5 {
                WeightLaw::Dirichlet
            } else {
                WeightLaw::DoubleDirichlet
            }
        }
        WeightLaw::CvFold { k_folds, .. } => {
            let fold = rng.random_range(0..*k_folds);
            law.with_fold(fold)
        }
        other => other.clone(),
    })
}

/// Monte Carlo loss and its gradient with respect to the generated solutions.
///
/// `theta` is `m x p`; the returned upstream matrix has the same shape and
/// already carries the `1/(m n)` scaling, so it feeds `backward` directly.
#[allow(clippy::too_many_arguments)]
fn batch_loss_and_upstream(
    spec: &ModelSpec,
    x: ArrayView2<f64>,
    y: ndarray::ArrayView1<f64>,
    map: &SubgroupMap,
    alphas: &Array2<f64>,
    theta: &Array2<f64>,
    lambdas: Option<&[f64]>,
    etas: Option<&[f64]>,
    batch_idx: Option<&[usize]>,
) -> Result<(f64, Array2<f64>)> {
    let m = theta.nrows();
    let n = x.nrows();
    let full: Vec<usize>;
    let idx: &[usize] = match batch_idx {
        Some(ids) => ids,
        None => {
            full = (0..n).collect();
            &full
        }
    };
    let nb = idx.len() as f64;
    let mf = m as f64;
    // Predictors for the (sub)batch: t = theta X_b' is m x |batch|.
    let xb = if batch_idx.is_some() {
        ndarray::Array2::from_shape_fn((idx.len(), x.ncols()), |(a, b)| x[[idx[a], b]])
    } else {
        x.to_owned()
    };
    let t = theta.dot(&xb.t());
    let mut loss = 0.0;
    let mut r = Array2::<f64>::zeros((m, idx.len()));
    for mi in 0..m {
        let eta = etas.map(|e| e[mi]);
        for (c, &i) in idx.iter().enumerate() {
            let w = alphas[[mi, map.assign()[i] as usize]];
            if w == 0.0 {
                continue;
            }
            loss += w * spec.loss_at(t[[mi, c]], y[i], eta)?;
            r[[mi, c]] = w * spec.psi(t[[mi, c]], y[i], eta)?;
        }
    }
    loss /= mf * nb;
    r /= mf * nb;
    let mut upstream = r.dot(&xb);
    if let Some(ls) = lambdas {
        for mi in 0..m {
            let row = theta.row(mi);
            loss += spec.penalty_value(row, ls[mi])? / mf;
            let sub = spec.penalty_subgrad(row, ls[mi])?;
            let mut urow = upstream.row_mut(mi);
            urow += &(&sub / mf);
        }
    }
    Ok((loss, upstream))
}

/// `n * mean ||theta_oracle - G(input)||^2` over precomputed oracle draws:
/// the prediction-loss metric for generator quality traces.
pub fn integrative_prediction_loss(
    gen: &Generator,
    inputs: ArrayView2<f64>,
    oracle_thetas: ArrayView2<f64>,
    n: usize,
) -> Result<f64> {
    if inputs.nrows() != oracle_thetas.nrows() {
        return Err(invalid(format!(
            "{} inputs vs {} oracle solutions",
            inputs.nrows(),
            oracle_thetas.nrows()
        )));
    }
    let (out, _) = gen.forward_batch(inputs)?;
    if out.ncols() != oracle_thetas.ncols() {
        return Err(invalid(format!(
            "generator emits {} coordinates, oracle has {}",
            out.ncols(),
            oracle_thetas.ncols()
        )));
    }
    let diff = &out - &oracle_thetas;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / diff.nrows() as f64;
    Ok(n as f64 * mse)
}

/// Fit a generator to a fixed set of precomputed (input, solution) pairs by
/// mean squared error: the naive baseline.
pub fn train_naive(
    config: &TrainConfig,
    arch: Architecture,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(Generator, TrainReport)> {
    train_naive_with_probe(config, arch, inputs, targets, |_, _, _| {})
}

pub fn train_naive_with_probe(
    config: &TrainConfig,
    arch: Architecture,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    mut probe: impl FnMut(usize, &Generator, f64),
) -> Result<(Generator, TrainReport)> {
    config.validate()?;
    let b = inputs.nrows();
    if b == 0 {
        return Err(invalid("need at least one training pair"));
    }
    if targets.nrows() != b || targets.ncols() != arch.out_dim || inputs.ncols() != arch.input_dim()
    {
        return Err(invalid(format!(
            "pairs {}x{} -> {}x{} do not match architecture {}x{}",
            inputs.nrows(),
            inputs.ncols(),
            targets.nrows(),
            targets.ncols(),
            arch.input_dim(),
            arch.out_dim
        )));
    }
    let mut gen = Generator::init(arch, config.seed)?;
    let mut adam = Adam::new(gen.params().len());
    let mut grad = vec![0.0f64; gen.params().len()];
    let clock = Instant::now();
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;
    for t in 1..=config.t {
        let (out, cache) = gen.forward_batch(inputs)?;
        let diff = &out - &targets;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(numeric(format!("non-finite fitting loss at step {t}")));
        }
        let upstream = &diff * (2.0 / b as f64);
        grad.iter_mut().for_each(|g| *g = 0.0);
        gen.backward(&cache, upstream.view(), &mut grad)?;
        let lr = config.learning_rate * (t as f64).powf(-config.decay_exponent);
        adam.update(gen.params_mut(), &grad, lr);
        final_loss = loss;
        if t % config.checkpoint_every == 0 || t == config.t {
            checkpoints.push(Checkpoint {
                iteration: t,
                loss,
                seconds: clock.elapsed().as_secs_f64(),
            });
            probe(t, &gen, loss);
        }
    }
    let report = TrainReport { checkpoints, iterations_run: config.t, final_loss };
    Ok((gen, report))
}

struct MovingWindow {
    cap: usize,
    values: std::collections::VecDeque<f64>,
    sum: f64,
}

impl MovingWindow {
    fn new(cap: usize) -> Self {
        MovingWindow { cap, values: std::collections::VecDeque::with_capacity(cap), sum: 0.0 }
    }

    fn push(&mut self, v: f64) {
        if self.values.len() == self.cap {
            self.sum -= self.values.pop_front().expect("nonempty at cap");
        }
        self.values.push_back(v);
        self.sum += v;
    }

    fn mean(&self) -> f64 {
        if self.values.is_empty() {
            f64::NAN
        } else {
            self.sum / self.values.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, Penalty};
    use crate::oracle;
    use ndarray::{array, Array1};
    use rand_distr::{Distribution, Normal};

    fn toy_linear(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng));
        let mut theta = Array1::<f64>::zeros(p);
        theta[0] = 1.0;
        let y = x.dot(&theta) + Array1::from_shape_fn(n, |_| normal.sample(&mut rng));
        Dataset::new(y, Some(x)).unwrap()
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            m: 10,
            t: 60,
            hidden: 16,
            depth: 2,
            s: 5,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_deserialize_from_empty_object() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.m, 100);
        assert_eq!(cfg.t, 30_000);
        assert_eq!(cfg.learning_rate, 3e-4);
        assert_eq!(cfg.decay_exponent, 0.3);
        assert_eq!(cfg.lambda_jitter_sd, 0.2);
        assert_eq!(cfg.eta_jitter_sd, 0.03);
        assert_eq!(cfg.eta_clip, (0.001, 0.999));
        assert_eq!(cfg.hidden, 1000);
        assert_eq!(cfg.depth, 3);
        assert_eq!(cfg.variant, Variant::WmMlp);
        assert_eq!(cfg.checkpoint_every, 250);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        for patch in [
            |c: &mut TrainConfig| c.m = 0,
            |c: &mut TrainConfig| c.t = 0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.decay_exponent = -0.1,
            |c: &mut TrainConfig| c.eta_clip = (0.9, 0.1),
            |c: &mut TrainConfig| c.lambda_candidates = Some(vec![]),
            |c: &mut TrainConfig| c.lambda_candidates = Some(vec![0.0]),
            |c: &mut TrainConfig| c.eta_candidates = Some(vec![1.5]),
            |c: &mut TrainConfig| c.minibatch = Some(0),
        ] {
            let mut cfg = TrainConfig::default();
            patch(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_jitter_returns_grid_points_exactly() {
        let cfg = TrainConfig {
            lambda_candidates: Some(vec![0.25]),
            lambda_jitter_sd: 0.0,
            eta_candidates: Some(vec![0.7]),
            eta_jitter_sd: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = crate::rng::seeded(1);
        for _ in 0..100 {
            let (l, e) = sample_tuning(&cfg, &mut rng, true, true).unwrap();
            assert_eq!(l, Some(0.25));
            assert_eq!(e, Some(0.7));
        }
    }

    #[test]
    fn eta_jitter_respects_the_clip_bounds() {
        let cfg = TrainConfig {
            eta_candidates: Some(vec![0.5]),
            ..TrainConfig::default()
        };
        let mut rng = crate::rng::seeded(2);
        for _ in 0..100_000 {
            let (_, e) = sample_tuning(&cfg, &mut rng, false, true).unwrap();
            let e = e.unwrap();
            assert!((0.001..=0.999).contains(&e), "eta {e} escaped the clip");
        }
    }

    #[test]
    fn lambda_support_spans_the_grid_range() {
        // Log-spaced candidates over the documented 0.0006..0.6 span.
        let grid: Vec<f64> = (0..50)
            .map(|k| (0.0006f64.ln() + k as f64 / 49.0 * (0.6f64 / 0.0006).ln()).exp())
            .collect();
        let cfg = TrainConfig { lambda_candidates: Some(grid), ..TrainConfig::default() };
        let mut rng = crate::rng::seeded(3);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for _ in 0..20_000 {
            let (l, _) = sample_tuning(&cfg, &mut rng, true, false).unwrap();
            let l = l.unwrap();
            lo = lo.min(l);
            hi = hi.max(l);
        }
        assert!(lo < 0.0008, "smallest draw {lo} should reach the bottom of the grid");
        assert!(hi > 0.45, "largest draw {hi} should reach the top of the grid");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = toy_linear(20, 2, 1);
        let map = SubgroupMap::new(20, 5, 9).unwrap();
        let cfg = small_config(42);
        let spec = ModelSpec::plain(Family::Linear);
        let (a, ra) = train(&cfg, &spec, &data, &map).unwrap();
        let (b, rb) = train(&cfg, &spec, &data, &map).unwrap();
        assert_eq!(a.params(), b.params(), "identical seed, identical params");
        assert_eq!(ra.final_loss, rb.final_loss);
        // Checkpoints are monotone in iteration and finite in loss.
        let iters: Vec<usize> = ra.checkpoints.iter().map(|c| c.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert!(ra.checkpoints.iter().all(|c| c.loss.is_finite()));
    }

    #[test]
    fn minibatch_runs_and_stays_deterministic() {
        let data = toy_linear(30, 2, 2);
        let map = SubgroupMap::new(30, 5, 10).unwrap();
        let mut cfg = small_config(7);
        cfg.minibatch = Some(8);
        let spec = ModelSpec::plain(Family::Linear);
        let (a, _) = train(&cfg, &spec, &data, &map).unwrap();
        let (b, _) = train(&cfg, &spec, &data, &map).unwrap();
        assert_eq!(a.params(), b.params());
    }

    /// A one-group partition makes every weight vector identically 1, so the
    /// generator has a single input and must converge to the plain
    /// least-squares solution there.
    #[test]
    fn degenerate_weights_converge_to_ols() {
        let data = toy_linear(30, 3, 3);
        let map = SubgroupMap::new(30, 1, 11).unwrap();
        let cfg = TrainConfig {
            m: 8,
            t: 2500,
            hidden: 32,
            depth: 2,
            s: 1,
            seed: 5,
            weight_law: WeightLaw::Dirichlet,
            ..TrainConfig::default()
        };
        let spec = ModelSpec::plain(Family::Linear);
        let (gen, report) = train(&cfg, &spec, &data, &map).unwrap();
        let ols = oracle::weighted_ls(data.x_required().unwrap(), data.y(), &vec![1.0; 30]).unwrap();
        let g = gen.forward_one(&[1.0], None, None).unwrap();
        let max_theta = ols.theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        for j in 0..3 {
            assert!(
                (g[j] - ols.theta[j]).abs() <= 0.02 * max_theta,
                "coordinate {j}: generator {} vs ols {}",
                g[j],
                ols.theta[j]
            );
        }
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn exploding_learning_rate_aborts_with_step_context() {
        let data = toy_linear(20, 2, 4);
        let map = SubgroupMap::new(20, 5, 12).unwrap();
        let mut cfg = small_config(6);
        // Normalized updates move by about lr per step, so the loss only
        // overflows once a single step flings the predictors past 1e154.
        cfg.learning_rate = 1e200;
        cfg.t = 50;
        let spec = ModelSpec::plain(Family::Linear);
        let err = train(&cfg, &spec, &data, &map).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let data = toy_linear(20, 2, 5);
        let map = SubgroupMap::new(20, 5, 13).unwrap();
        let cfg = small_config(8);
        // Penalized model without candidates.
        let spec = ModelSpec::new(Family::Linear, Penalty::L2).unwrap();
        assert!(train(&cfg, &spec, &data, &map).is_err());
        // Unpenalized model with candidates.
        let mut cfg2 = small_config(8);
        cfg2.lambda_candidates = Some(vec![0.1]);
        let spec = ModelSpec::plain(Family::Linear);
        assert!(train(&cfg2, &spec, &data, &map).is_err());
        // Quantile without eta grid.
        let spec = ModelSpec::plain(Family::Quantile);
        assert!(train(&cfg, &spec, &data, &map).is_err());
        // Mixture family has no regression trainer.
        let y = array![1.0, 2.0, 3.0];
        let mix = Dataset::new(y, None).unwrap();
        let spec = ModelSpec::plain(Family::MixturePoisson);
        let map3 = SubgroupMap::new(3, 3, 14).unwrap();
        assert!(train(&cfg, &spec, &mix, &map3).is_err());
    }

    #[test]
    fn naive_interpolates_a_single_pair() {
        let arch = Architecture::new(4, 0, 2, Variant::WmMlp).with_size(16, 2);
        let inputs = array![[1.2, 0.8, 1.1, 0.9]];
        let targets = array![[0.7, -0.4]];
        let cfg = TrainConfig {
            t: 4000,
            learning_rate: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let (gen, report) = train_naive(&cfg, arch, inputs.view(), targets.view()).unwrap();
        let (out, _) = gen.forward_batch(inputs.view()).unwrap();
        for j in 0..2 {
            assert!(
                (out[[0, j]] - targets[[0, j]]).abs() <= 1e-3,
                "coordinate {j}: {} vs {}",
                out[[0, j]],
                targets[[0, j]]
            );
        }
        assert!(report.final_loss < 1e-6);
    }

    #[test]
    fn report_csv_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let report = TrainReport {
            checkpoints: vec![
                Checkpoint { iteration: 250, loss: 0.5, seconds: 1.0 },
                Checkpoint { iteration: 500, loss: 0.25, seconds: 2.0 },
            ],
            iterations_run: 500,
            final_loss: 0.25,
        };
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,loss,seconds"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(1);
        let mut x = [10.0f64];
        for t in 1..=8000 {
            let grad = [2.0 * (x[0] - 3.0)];
            let lr = 0.05 * (t as f64).powf(-0.3);
            adam.update(&mut x, &grad, lr);
        }
        // Normalized steps cover about sum(lr_t) ~ 38 of distance and then
        // wobble at roughly the final step size (0.05 * 8000^{-0.3} ~ 3e-3).
        assert!((x[0] - 3.0).abs() < 1e-2, "x = {}", x[0]);
    }

    /// First update moves by exactly lr in the gradient direction
    /// (bias correction makes mhat/sqrt(vhat) = sign(grad) at step one).
    #[test]
    fn adam_first_step_size_is_the_learning_rate() {
        let mut adam = Adam::new(2);
        let mut x = [0.0f64, 0.0];
        adam.update(&mut x, &[3.0, -0.5], 0.1);
        assert!((x[0] + 0.1).abs() < 1e-8, "x0 = {}", x[0]);
        assert!((x[1] - 0.1).abs() < 1e-8, "x1 = {}", x[1]);
    }

    #[test]
    fn early_stop_truncates_the_run() {
        let data = toy_linear(20, 2, 6);
        let map = SubgroupMap::new(20, 1, 15).unwrap();
        let cfg = TrainConfig {
            m: 4,
            t: 30_000,
            hidden: 8,
            depth: 1,
            s: 1,
            seed: 21,
            early_stop: true,
            ..TrainConfig::default()
        };
        let spec = ModelSpec::plain(Family::Linear);
        let (_, report) = train(&cfg, &spec, &data, &map).unwrap();
        assert!(report.iterations_run < 30_000, "stopped at {}", report.iterations_run);
    }
}
