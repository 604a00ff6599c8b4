//! Subgroup bootstrap weight laws.
//!
//! Observations are partitioned into `S` subgroups; a weight draw assigns one
//! weight per subgroup (`alpha`, length `S`) which `expand` broadcasts to the
//! `n` observations. Supported laws: multinomial counts, Bayesian-bootstrap
//! Dirichlet, the two-level Dirichlet used for calibrated intervals, iterated
//! multinomial chains, and cross-validation fold weights (plain or
//! bootstrapped).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;

use crate::error::{invalid, numeric, Result};
use crate::rng;

/// Dirichlet concentrations at or below this are clamped up to keep the
/// second-level sampler away from degenerate Gamma shapes.
pub const CLAMP_EPS: f64 = 1e-8;

/// Assignment of `n` observations to `S` near-equal subgroups.
#[derive(Debug, Clone)]
pub struct SubgroupMap {
    n: usize,
    s: usize,
    assign: Vec<u32>,
    sizes: Vec<usize>,
}

impl SubgroupMap {
    /// Uniformly random near-equal partition of `n` observations into `s`
    /// groups; the first `n % s` groups receive one extra observation.
    /// Deterministic given `seed`.
    pub fn new(n: usize, s: usize, seed: u64) -> Result<Self> {
        if s == 0 {
            return Err(invalid("subgroup count S must be positive"));
        }
        if s > n {
            return Err(invalid(format!("subgroup count S={s} exceeds n={n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, PARTITION_STREAM));
        let base = n / s;
        let rem = n % s;
        let mut assign = vec![0u32; n];
        let mut sizes = Vec::with_capacity(s);
        let mut pos = 0usize;
        for g in 0..s {
            let size = base + usize::from(g < rem);
            for &i in &order[pos..pos + size] {
                assign[i] = g as u32;
            }
            sizes.push(size);
            pos += size;
        }
        Ok(Self { n, s, assign, sizes })
    }

    /// Explicit assignment (group of each observation, 0-based). Groups must
    /// cover `0..s` with no empty group.
    pub fn from_assignment(assign: Vec<u32>, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(invalid("subgroup count S must be positive"));
        }
        let n = assign.len();
        let mut sizes = vec![0usize; s];
        for &g in &assign {
            let g = g as usize;
            if g >= s {
                return Err(invalid(format!("group index {g} out of range for S={s}")));
            }
            sizes[g] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&c| c == 0) {
            return Err(invalid(format!("group {empty} is empty")));
        }
        Ok(Self { n, s, assign, sizes })
    }

    /// The identity partition (`S = n`, observation i in group i), which turns
    /// subgroup laws into full-weight laws.
    pub fn identity(n: usize) -> Self {
        Self { n, s: n, assign: (0..n as u32).collect(), sizes: vec![1; n] }
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of subgroups.
    pub fn s(&self) -> usize {
        self.s
    }

    /// Group of each observation (0-based).
    pub fn assign(&self) -> &[u32] {
        &self.assign
    }

    /// Group sizes.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Broadcast subgroup weights to observation weights: `w[i] = alpha[h(i)]`.
    pub fn expand(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() != self.s {
            return Err(invalid(format!(
                "alpha length {} does not match subgroup count {}",
                alpha.len(),
                self.s
            )));
        }
        Ok(self.assign.iter().map(|&g| alpha[g as usize]).collect())
    }
}

// Fixed stream tag for partition shuffles so map construction never collides
// with weight sampling on the same seed.
const PARTITION_STREAM: u64 = 0x5cb9_a51d;

/// Weight law over the `S` subgroup weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightLaw {
    /// Multinomial bootstrap counts: `alpha ~ Multinomial(S, 1/S)`.
    Multinomial,
    /// Bayesian bootstrap: `alpha ~ S * Dirichlet(1_S)`.
    Dirichlet,
    /// Two-level Dirichlet: `z ~ S * Dir(1_S)`, then `alpha | z ~ S * Dir(z)`.
    DoubleDirichlet,
    /// `d`-fold composition of the multinomial resampling kernel (`d = 1` is
    /// the plain multinomial bootstrap).
    IteratedMultinomial(u32),
    /// Cross-validation weights: blocks of fold `fold` (0-based, of `k_folds`)
    /// get weight 0; the rest get 1, or a Dirichlet bootstrap when
    /// `bootstrapped`.
    CvFold { k_folds: usize, fold: usize, bootstrapped: bool },
}

impl WeightLaw {
    /// Same CV law pointed at a different fold; no-op for non-CV laws.
    pub fn with_fold(&self, fold: usize) -> Self {
        match self {
            Self::CvFold { k_folds, bootstrapped, .. } => {
                Self::CvFold { k_folds: *k_folds, fold, bootstrapped: *bootstrapped }
            }
            other => other.clone(),
        }
    }
}

impl std::str::FromStr for WeightLaw {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_suffix = |s: &str, prefix: &str| -> Result<usize> {
            s[prefix.len()..]
                .parse::<usize>()
                .map_err(|_| invalid(format!("bad count in weight law '{s}'")))
        };
        match s {
            "multinomial" => Ok(Self::Multinomial),
            "dirichlet" => Ok(Self::Dirichlet),
            "double" => Ok(Self::DoubleDirichlet),
            _ if s.starts_with("iterated:") => {
                let d = parse_suffix(s, "iterated:")?;
                if d == 0 {
                    return Err(invalid("iterated multinomial depth must be >= 1"));
                }
                Ok(Self::IteratedMultinomial(d as u32))
            }
            _ if s.starts_with("cv_boot:") => {
                let k = parse_suffix(s, "cv_boot:")?;
                Ok(Self::CvFold { k_folds: k, fold: 0, bootstrapped: true })
            }
            _ if s.starts_with("cv:") => {
                let k = parse_suffix(s, "cv:")?;
                Ok(Self::CvFold { k_folds: k, fold: 0, bootstrapped: false })
            }
            other => Err(invalid(format!("unknown weight law '{other}'"))),
        }
    }
}

impl std::fmt::Display for WeightLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Multinomial => write!(f, "multinomial"),
            Self::Dirichlet => write!(f, "dirichlet"),
            Self::DoubleDirichlet => write!(f, "double"),
            Self::IteratedMultinomial(d) => write!(f, "iterated:{d}"),
            Self::CvFold { k_folds, bootstrapped: false, .. } => write!(f, "cv:{k_folds}"),
            Self::CvFold { k_folds, bootstrapped: true, .. } => write!(f, "cv_boot:{k_folds}"),
        }
    }
}

impl TryFrom<String> for WeightLaw {
    type Error = crate::error::Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightLaw> for String {
    fn from(law: WeightLaw) -> String {
        law.to_string()
    }
}

/// One draw of subgroup weights, with its law and (for two-level laws) the
/// first-level parent draw.
#[derive(Debug, Clone)]
pub struct WeightDraw {
    pub alpha: Vec<f64>,
    pub law: WeightLaw,
    pub parent: Option<Vec<f64>>,
}

/// Draw subgroup weights from `law` using the caller's RNG.
pub fn sample_weights_with(law: &WeightLaw, s: usize, rng: &mut impl Rng) -> Result<WeightDraw> {
    if s == 0 {
        return Err(invalid("subgroup count S must be positive"));
    }
    let (alpha, parent) = match law {
        WeightLaw::Multinomial => (multinomial_uniform(s, rng), None),
        WeightLaw::Dirichlet => (scaled_dirichlet_uniform(s, rng)?, None),
        WeightLaw::DoubleDirichlet => {
            let z = scaled_dirichlet_uniform(s, rng)?;
            let alpha = scaled_dirichlet(&z, rng)?;
            (alpha, Some(z))
        }
        WeightLaw::IteratedMultinomial(d) => {
            if *d == 0 {
                return Err(invalid("iterated multinomial depth must be >= 1"));
            }
            let mut state = multinomial_uniform(s, rng);
            let mut parent = None;
            for _ in 1..*d {
                parent = Some(state.clone());
                state = multinomial_from(&state, rng)?;
            }
            (state, parent)
        }
        WeightLaw::CvFold { k_folds, fold, bootstrapped } => {
            let alpha = cv_alpha(*k_folds, *fold, s, *bootstrapped, rng)?;
            (alpha, None)
        }
    };
    Ok(WeightDraw { alpha, law: law.clone(), parent })
}

/// Draw subgroup weights from `law` with a fresh stream for `seed`.
pub fn sample_weights(law: &WeightLaw, s: usize, seed: u64) -> Result<WeightDraw> {
    sample_weights_with(law, s, &mut rng::seeded(seed))
}

/// Draw second-level weights conditional on a first-level draw: Dirichlet
/// parents condition a `S * Dir(parent)` child, multinomial parents a
/// `Multinomial(S, parent / S)` child.
pub fn sample_second_level_with(
    parent: &WeightDraw,
    rng: &mut impl Rng,
) -> Result<WeightDraw> {
    let alpha = match parent.law {
        WeightLaw::Dirichlet | WeightLaw::DoubleDirichlet => scaled_dirichlet(&parent.alpha, rng)?,
        WeightLaw::Multinomial | WeightLaw::IteratedMultinomial(_) => {
            multinomial_from(&parent.alpha, rng)?
        }
        WeightLaw::CvFold { .. } => {
            return Err(invalid("second-level sampling is not defined for CV fold weights"))
        }
    };
    Ok(WeightDraw { alpha, law: parent.law.clone(), parent: Some(parent.alpha.clone()) })
}

/// Cross-validation weights for a specific fold (Algorithm: zero out the
/// fold's blocks; remaining blocks get 1, or a Dirichlet bootstrap summing to
/// `S - S/K` when `bootstrapped`).
pub fn sample_cv_weights(
    k_folds: usize,
    map: &SubgroupMap,
    bootstrapped: bool,
    fold: usize,
    seed: u64,
) -> Result<WeightDraw> {
    let law = WeightLaw::CvFold { k_folds, fold, bootstrapped };
    sample_weights(&law, map.s(), seed)
}

/// The subgroup (block) indices belonging to CV fold `fold` out of `k_folds`:
/// the contiguous block range `[fold * S/K, (fold + 1) * S/K)`.
pub fn cv_fold_blocks(k_folds: usize, fold: usize, s: usize) -> Result<std::ops::Range<usize>> {
    if k_folds < 2 || k_folds > s {
        return Err(invalid(format!("fold count K={k_folds} must be in [2, S={s}]")));
    }
    if s % k_folds != 0 {
        return Err(invalid(format!(
            "fold count K={k_folds} must divide the subgroup count S={s}"
        )));
    }
    if fold >= k_folds {
        return Err(invalid(format!("fold index {fold} out of range for K={k_folds}")));
    }
    let per = s / k_folds;
    Ok(fold * per..(fold + 1) * per)
}

/// Observation indices held out by CV fold `fold` (members of its blocks).
pub fn cv_fold_observations(map: &SubgroupMap, k_folds: usize, fold: usize) -> Result<Vec<usize>> {
    let blocks = cv_fold_blocks(k_folds, fold, map.s())?;
    Ok(map
        .assign()
        .iter()
        .enumerate()
        .filter(|(_, &g)| blocks.contains(&(g as usize)))
        .map(|(i, _)| i)
        .collect())
}

fn cv_alpha(
    k_folds: usize,
    fold: usize,
    s: usize,
    bootstrapped: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let blocks = cv_fold_blocks(k_folds, fold, s)?;
    let mut alpha = vec![1.0; s];
    for g in blocks.clone() {
        alpha[g] = 0.0;
    }
    if bootstrapped {
        // The kept blocks get a Bayesian bootstrap summing to S - S/K.
        let m = s - blocks.len();
        let rest = scaled_dirichlet_uniform(m, rng)?;
        let mut it = rest.into_iter();
        for (g, a) in alpha.iter_mut().enumerate() {
            if !blocks.contains(&g) {
                *a = it.next().expect("dirichlet draw exhausted");
            }
        }
    }
    Ok(alpha)
}

/// Multinomial(S, 1/S) counts as weights.
fn multinomial_uniform(s: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut counts = vec![0.0f64; s];
    for _ in 0..s {
        counts[rng.random_range(0..s)] += 1.0;
    }
    counts
}

/// Multinomial(S, p/S) counts for a general (nonnegative) weight vector `p`
/// summing to ~S.
fn multinomial_from(p: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let s = p.len();
    let index = WeightedIndex::new(p.iter().copied())
        .map_err(|e| numeric(format!("degenerate multinomial kernel: {e}")))?;
    let mut counts = vec![0.0f64; s];
    for _ in 0..s {
        counts[index.sample(rng)] += 1.0;
    }
    Ok(counts)
}

/// `S * Dirichlet(1_S)` via normalized unit-rate Gamma variates.
fn scaled_dirichlet_uniform(s: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    scaled_dirichlet(&vec![1.0; s], rng)
}

/// `S * Dirichlet(conc)` with concentrations clamped to at least `CLAMP_EPS`.
fn scaled_dirichlet(conc: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let s = conc.len();
    let mut draw = Vec::with_capacity(s);
    let mut total = 0.0;
    for &c in conc {
        if !c.is_finite() || c < 0.0 {
            return Err(invalid(format!("Dirichlet concentration {c} is not a finite nonnegative value")));
        }
        let shape = c.max(CLAMP_EPS);
        let gamma = Gamma::new(shape, 1.0)
            .map_err(|e| invalid(format!("bad Gamma shape {shape}: {e}")))?;
        let g: f64 = gamma.sample(rng);
        total += g;
        draw.push(g);
    }
    if !(total.is_finite() && total > 0.0) {
        return Err(numeric("Dirichlet normalization collapsed to zero"));
    }
    let s_f = s as f64;
    for g in &mut draw {
        *g = *g * s_f / total;
    }
    Ok(draw)
}
