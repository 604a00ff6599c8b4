//! Generator networks: a plain rectifier MLP and the weight-multiplicative
//! variant that adds a second branch multiplying learned per-group signals
//! against the raw weight vector.
//!
//! The weight-multiplicative generator computes
//! `G(w, ...) = L1(B(w, ...)) + L2(g(B(w, ...)) .* w)` where `B` is a
//! `depth`-layer rectifier trunk, `g` a one-hidden-layer map back to the
//! weight dimension, and `L1`, `L2` linear heads. `L2` carries no bias so the
//! multiplicative branch vanishes exactly at `w = 0`. Parameters live in one
//! flat buffer so the optimizer and the on-disk format can treat them
//! uniformly; forward/backward build matrix views into that buffer.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which generator structure to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SimpleMlp,
    WmMlp,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Variant::SimpleMlp),
            "wm" => Ok(Variant::WmMlp),
            other => Err(invalid(format!("unknown generator variant '{other}' (simple, wm)"))),
        }
    }
}

/// Shape of a generator network. The input is `[alpha; aux]` where `alpha`
/// has the (possibly subgrouped) weight dimension and `aux` carries any extra
/// channels: log(lambda) for penalized models, eta for tunable losses, or
/// latent coordinates for mixture generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub alpha_dim: usize,
    pub aux_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub out_dim: usize,
    pub variant: Variant,
}

impl Architecture {
    pub fn new(alpha_dim: usize, aux_dim: usize, out_dim: usize, variant: Variant) -> Self {
        Architecture { alpha_dim, aux_dim, hidden: 1000, depth: 3, out_dim, variant }
    }

    pub fn with_size(mut self, hidden: usize, depth: usize) -> Self {
        self.hidden = hidden;
        self.depth = depth;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.alpha_dim + self.aux_dim
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_dim == 0 || self.hidden == 0 || self.depth == 0 || self.out_dim == 0 {
            return Err(invalid(format!(
                "architecture dimensions must be >= 1 (alpha {}, hidden {}, depth {}, out {})",
                self.alpha_dim, self.hidden, self.depth, self.out_dim
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Number of parameters the flat buffer must hold.
    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of every weight matrix and bias vector inside the flat parameter
/// buffer. Matrices are row-major `(rows, cols)` mapping `cols -> rows`.
#[derive(Debug, Clone)]
struct Layout {
    trunk_w: Vec<(usize, usize, usize)>,
    trunk_b: Vec<(usize, usize)>,
    l1_w: (usize, usize, usize),
    l1_b: (usize, usize),
    g1_w: (usize, usize, usize),
    g1_b: (usize, usize),
    g2_w: (usize, usize, usize),
    g2_b: (usize, usize),
    l2_w: (usize, usize, usize),
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let (s, h, p) = (arch.alpha_dim, arch.hidden, arch.out_dim);
        let mut off = 0;
        let mut mat = |rows: usize, cols: usize| {
            let o = off;
            off += rows * cols;
            (o, rows, cols)
        };
        let mut trunk_w = Vec::with_capacity(arch.depth);
        let mut trunk_b = Vec::with_capacity(arch.depth);
        let mut prev = arch.input_dim();
        for _ in 0..arch.depth {
            trunk_w.push(mat(h, prev));
            let b = mat(h, 1);
            trunk_b.push((b.0, h));
            prev = h;
        }
        let l1_w = mat(p, h);
        let l1_bm = mat(p, 1);
        let l1_b = (l1_bm.0, p);
        let (g1_w, g1_b, g2_w, g2_b, l2_w);
        if arch.variant == Variant::WmMlp {
            g1_w = mat(h, h);
            let gb = mat(h, 1);
            g1_b = (gb.0, h);
            g2_w = mat(s, h);
            let gb2 = mat(s, 1);
            g2_b = (gb2.0, s);
            l2_w = mat(p, s);
        } else {
            g1_w = (off, 0, 0);
            g1_b = (off, 0);
            g2_w = (off, 0, 0);
            g2_b = (off, 0);
            l2_w = (off, 0, 0);
        }
        Layout { trunk_w, trunk_b, l1_w, l1_b, g1_w, g1_b, g2_w, g2_b, l2_w, total: off }
    }
}

fn mat_view<'a>(buf: &'a [f64], seg: (usize, usize, usize)) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((seg.1, seg.2), &buf[seg.0..seg.0 + seg.1 * seg.2]).unwrap()
}

fn vec_view<'a>(buf: &'a [f64], seg: (usize, usize)) -> ArrayView1<'a, f64> {
    ArrayView1::from_shape(seg.1, &buf[seg.0..seg.0 + seg.1]).unwrap()
}

/// Assemble a batch of network inputs: each row is `[alpha; ln(lambda); eta]`
/// with the aux channels present exactly when the architecture expects them.
pub fn assemble_batch(
    arch: &Architecture,
    alphas: ArrayView2<f64>,
    lambdas: Option<&[f64]>,
    etas: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let m = alphas.nrows();
    let aux = usize::from(lambdas.is_some()) + usize::from(etas.is_some());
    if alphas.ncols() != arch.alpha_dim || aux != arch.aux_dim {
        return Err(invalid(format!(
            "batch [alpha {}; aux {aux}] does not match architecture [{}; {}]",
            alphas.ncols(),
            arch.alpha_dim,
            arch.aux_dim
        )));
    }
    for (name, chan) in [("lambda", &lambdas), ("eta", &etas)] {
        if let Some(v) = chan {
            if v.len() != m {
                return Err(invalid(format!("{name} channel has {} entries for {m} rows", v.len())));
            }
        }
    }
    if let Some(ls) = lambdas {
        if let Some(&bad) = ls.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(invalid(format!("lambda={bad} must be positive to enter on the log scale")));
        }
    }
    let mut out = Array2::zeros((m, arch.input_dim()));
    out.slice_mut(ndarray::s![.., ..arch.alpha_dim]).assign(&alphas);
    let mut j = arch.alpha_dim;
    if let Some(ls) = lambdas {
        for (r, &l) in ls.iter().enumerate() {
            out[[r, j]] = l.ln();
        }
        j += 1;
    }
    if let Some(es) = etas {
        for (r, &e) in es.iter().enumerate() {
            out[[r, j]] = e;
        }
    }
    Ok(out)
}

/// Assemble inputs from weight rows and already-transformed aux channels:
/// each row is `[alpha; aux]` with the aux columns passed through verbatim
/// (latent draws for mixture generators, for instance).
pub fn assemble_batch_raw(
    arch: &Architecture,
    alphas: ArrayView2<f64>,
    aux: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let m = alphas.nrows();
    let aux_cols = aux.map_or(0, |a| a.ncols());
    if alphas.ncols() != arch.alpha_dim || aux_cols != arch.aux_dim {
        return Err(invalid(format!(
            "batch [alpha {}; aux {aux_cols}] does not match architecture [{}; {}]",
            alphas.ncols(),
            arch.alpha_dim,
            arch.aux_dim
        )));
    }
    let mut out = Array2::zeros((m, arch.input_dim()));
    out.slice_mut(ndarray::s![.., ..arch.alpha_dim]).assign(&alphas);
    if let Some(a) = aux {
        if a.nrows() != m {
            return Err(invalid(format!("aux block has {} rows for {m} weight rows", a.nrows())));
        }
        out.slice_mut(ndarray::s![.., arch.alpha_dim..]).assign(&a);
    }
    Ok(out)
}

/// A generator network: architecture plus one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: Architecture,
    params: Vec<f64>,
    seed: Option<u64>,
    version: u64,
}

/// Cached activations from one batch forward pass, consumed by `backward`.
pub struct ForwardCache {
    inputs: Array2<f64>,
    trunk: Vec<Array2<f64>>,
    g_hidden: Option<Array2<f64>>,
    g_out: Option<Array2<f64>>,
    product: Option<Array2<f64>>,
    version: u64,
}

impl Generator {
    /// Fan-in-scaled uniform initialization: weights from
    /// `U(-sqrt(2/fan_in), sqrt(2/fan_in))`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0f64; layout.total];
        let mut rng = crate::rng::seeded(seed);
        let mut fill = |params: &mut Vec<f64>, seg: (usize, usize, usize)| {
            if seg.1 == 0 {
                return;
            }
            let scale = (2.0 / seg.2 as f64).sqrt();
            for v in &mut params[seg.0..seg.0 + seg.1 * seg.2] {
                *v = rng.random_range(-scale..scale);
            }
        };
        for &w in &layout.trunk_w {
            fill(&mut params, w);
        }
        fill(&mut params, layout.l1_w);
        if arch.variant == Variant::WmMlp {
            fill(&mut params, layout.g1_w);
            fill(&mut params, layout.g2_w);
            fill(&mut params, layout.l2_w);
        }
        Ok(Generator { arch, params, seed: Some(seed), version: 0 })
    }

    /// All-zero parameters; the forward map is identically zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Generator { arch, params: vec![0.0; n], seed: None, version: 0 })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access for the optimizer; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Assemble one network input row: `[alpha; ln(lambda); eta]`, with the
    /// aux channels present exactly when the architecture expects them.
    pub fn assemble_input(
        &self,
        alpha: &[f64],
        lambda: Option<f64>,
        eta: Option<f64>,
    ) -> Result<Array1<f64>> {
        let expected_aux = usize::from(lambda.is_some()) + usize::from(eta.is_some());
        if alpha.len() != self.arch.alpha_dim || expected_aux != self.arch.aux_dim {
            return Err(invalid(format!(
                "input [alpha {}; aux {}] does not match architecture [{}; {}]",
                alpha.len(),
                expected_aux,
                self.arch.alpha_dim,
                self.arch.aux_dim
            )));
        }
        let mut row = Array1::zeros(self.arch.input_dim());
        row.slice_mut(ndarray::s![..alpha.len()]).assign(&ArrayView1::from(alpha));
        let mut j = alpha.len();
        if let Some(l) = lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(invalid(format!("lambda={l} must be positive to enter on the log scale")));
            }
            row[j] = l.ln();
            j += 1;
        }
        if let Some(e) = eta {
            row[j] = e;
        }
        Ok(row)
    }

    /// Single-input convenience wrapper around `forward_batch`.
    pub fn forward_one(
        &self,
        alpha: &[f64],
        lambda: Option<f64>,
        eta: Option<f64>,
    ) -> Result<Array1<f64>> {
        let row = self.assemble_input(alpha, lambda, eta)?;
        let batch = row.insert_axis(Axis(0));
        let (out, _) = self.forward_batch(batch.view())?;
        Ok(out.row(0).to_owned())
    }

    /// Batch forward pass: `inputs` is `batch x input_dim`, output is
    /// `batch x out_dim`. The cache feeds `backward`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if inputs.ncols() != self.arch.input_dim() {
            return Err(invalid(format!(
                "input has {} columns, architecture expects {}",
                inputs.ncols(),
                self.arch.input_dim()
            )));
        }
        let layout = self.arch.layout();
        let buf = &self.params;
        let mut trunk = Vec::with_capacity(self.arch.depth);
        let mut act = inputs.to_owned();
        for k in 0..self.arch.depth {
            let w = mat_view(buf, layout.trunk_w[k]);
            let b = vec_view(buf, layout.trunk_b[k]);
            let mut z = act.dot(&w.t());
            z += &b;
            z.mapv_inplace(|v| v.max(0.0));
            trunk.push(z.clone());
            act = z;
        }
        let l1w = mat_view(buf, layout.l1_w);
        let l1b = vec_view(buf, layout.l1_b);
        let mut out = act.dot(&l1w.t());
        out += &l1b;
        let (mut g_hidden, mut g_out, mut product) = (None, None, None);
        if self.arch.variant == Variant::WmMlp {
            let g1w = mat_view(buf, layout.g1_w);
            let g1b = vec_view(buf, layout.g1_b);
            let mut gh = act.dot(&g1w.t());
            gh += &g1b;
            gh.mapv_inplace(|v| v.max(0.0));
            let g2w = mat_view(buf, layout.g2_w);
            let g2b = vec_view(buf, layout.g2_b);
            let mut go = gh.dot(&g2w.t());
            go += &g2b;
            let alpha = inputs.slice(ndarray::s![.., ..self.arch.alpha_dim]);
            let prod = &go * &alpha;
            let l2w = mat_view(buf, layout.l2_w);
            out += &prod.dot(&l2w.t());
            g_hidden = Some(gh);
            g_out = Some(go);
            product = Some(prod);
        }
        let cache = ForwardCache {
            inputs: inputs.to_owned(),
            trunk,
            g_hidden,
            g_out,
            product,
            version: self.version,
        };
        Ok((out, cache))
    }

    /// The two summands of the weight-multiplicative forward pass, computed
    /// independently of the fused path.
    pub fn forward_branches(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.arch.variant != Variant::WmMlp {
            return Err(invalid("branch decomposition applies to the wm variant only"));
        }
        let (_, cache) = self.forward_batch(inputs)?;
        let layout = self.arch.layout();
        let act = cache.trunk.last().expect("depth >= 1");
        let l1w = mat_view(&self.params, layout.l1_w);
        let l1b = vec_view(&self.params, layout.l1_b);
        let mut first = act.dot(&l1w.t());
        first += &l1b;
        let l2w = mat_view(&self.params, layout.l2_w);
        let second = cache.product.as_ref().expect("wm cache").dot(&l2w.t());
        Ok((first, second))
    }

    /// Reverse-mode gradients: accumulates `d loss / d params` into `grad`
    /// given `upstream[r, j] = d loss / d output[r, j]` for the cached batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(invalid(
                "forward cache is stale: parameters changed since the forward pass",
            ));
        }
        let m = cache.inputs.nrows();
        if upstream.nrows() != m || upstream.ncols() != self.arch.out_dim {
            return Err(invalid(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                m,
                self.arch.out_dim
            )));
        }
        if grad.len() != self.params.len() {
            return Err(invalid(format!(
                "gradient buffer has {} entries, expected {}",
                grad.len(),
                self.params.len()
            )));
        }
        let layout = self.arch.layout();
        let buf = &self.params;
        let act_top = cache.trunk.last().expect("depth >= 1");

        let add_mat = |grad: &mut [f64], seg: (usize, usize, usize), delta: &Array2<f64>| {
            let dst = &mut grad[seg.0..seg.0 + seg.1 * seg.2];
            for (d, v) in dst.iter_mut().zip(delta.iter()) {
                *d += v;
            }
        };
        let add_vec = |grad: &mut [f64], seg: (usize, usize), delta: &Array1<f64>| {
            let dst = &mut grad[seg.0..seg.0 + seg.1];
            for (d, v) in dst.iter_mut().zip(delta.iter()) {
                *d += v;
            }
        };

        // Output heads.
        add_mat(grad, layout.l1_w, &upstream.t().dot(act_top));
        add_vec(grad, layout.l1_b, &upstream.sum_axis(Axis(0)));
        let l1w = mat_view(buf, layout.l1_w);
        let mut d_act = upstream.dot(&l1w);
        if self.arch.variant == Variant::WmMlp {
            let prod = cache.product.as_ref().expect("wm cache");
            let g_out = cache.g_out.as_ref().expect("wm cache");
            let gh = cache.g_hidden.as_ref().expect("wm cache");
            add_mat(grad, layout.l2_w, &upstream.t().dot(prod));
            let l2w = mat_view(buf, layout.l2_w);
            let d_prod = upstream.dot(&l2w);
            let alpha = cache.inputs.slice(ndarray::s![.., ..self.arch.alpha_dim]);
            let d_gout = &d_prod * &alpha;
            let _ = g_out; // input gradients are not propagated
            add_mat(grad, layout.g2_w, &d_gout.t().dot(gh));
            add_vec(grad, layout.g2_b, &d_gout.sum_axis(Axis(0)));
            let g2w = mat_view(buf, layout.g2_w);
            let mut d_gh = d_gout.dot(&g2w);
            d_gh.zip_mut_with(gh, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            add_mat(grad, layout.g1_w, &d_gh.t().dot(act_top));
            add_vec(grad, layout.g1_b, &d_gh.sum_axis(Axis(0)));
            let g1w = mat_view(buf, layout.g1_w);
            d_act += &d_gh.dot(&g1w);
        }

        // Trunk, top to bottom.
        for k in (0..self.arch.depth).rev() {
            let post = &cache.trunk[k];
            d_act.zip_mut_with(post, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            let below: ArrayView2<f64> =
                if k == 0 { cache.inputs.view() } else { cache.trunk[k - 1].view() };
            add_mat(grad, layout.trunk_w[k], &d_act.t().dot(&below));
            add_vec(grad, layout.trunk_b[k], &d_act.sum_axis(Axis(0)));
            if k > 0 {
                let w = mat_view(buf, layout.trunk_w[k]);
                d_act = d_act.dot(&w);
            }
        }
        Ok(())
    }

    /// Write parameters to `path`: magic, JSON header, raw little-endian f64s.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FileHeader {
            format_version: 1,
            arch: self.arch,
            seed: self.seed,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for v in &self.params {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid(format!(
                "{} is not a generator parameter file (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 4];
        f.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)?;
        let header: FileHeader = serde_json::from_slice(&header_json)?;
        if header.format_version != 1 {
            return Err(invalid(format!(
                "unsupported parameter file version {}",
                header.format_version
            )));
        }
        header.arch.validate()?;
        let count = header.arch.param_count();
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(invalid(format!(
                "parameter payload is {} bytes, architecture needs {}",
                bytes.len(),
                count * 8
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameter file contains non-finite values"));
        }
        Ok(Generator { arch: header.arch, params, seed: header.seed, version: 0 })
    }
}

const MAGIC: &[u8; 4] = b"GMS1";

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format_version: u32,
    arch: Architecture,
    seed: Option<u64>,
}
