//! Disentangled sequential encoder.
//!
//! A sequential VAE over `T x d` frame features with one static latent `s` and
//! per-step dynamic latents `z_1..z_T`:
//!
//! * posterior `q(s | x_1:T) * prod_t q(z_t | z_<t, x)`, both read from a
//!   bidirectional LSTM; `z_t` additionally conditions on the sampled prefix
//!   through a small recurrence;
//! * prior `N(0, I)` for `s` and `N(mu(z_<t), sigma^2(z_<t))` for `z_t`, the
//!   latter from a causal LSTM started at `z_0 = 0`;
//! * decoder `x_t ~ N(g(s, z_t), I)` with one shared `g` for every step;
//! * contrastive mutual-information terms on time-shuffled (content) and
//!   feature-blurred (motion) views.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::encoders::FeatureSequence;
use crate::error::{DclError, Result};
use crate::params::{init_weight, ParamId, ParamStore};
use crate::tape::{Graph, Var};

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl GaussianParams {
    pub fn standard(n: usize) -> Self {
        GaussianParams {
            mean: Array1::zeros(n),
            log_var: Array1::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Array1<f64> {
        self.log_var.mapv(f64::exp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticFactor {
    pub sample: Array1<f64>,
    pub posterior: GaussianParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFactors {
    /// `T x d_z`.
    pub samples: Array2<f64>,
    pub posteriors: Vec<GaussianParams>,
}

impl DynamicFactors {
    /// The `z_0` every prefix starts from.
    pub fn z0(&self) -> Array1<f64> {
        Array1::zeros(self.samples.ncols())
    }
}

/// Named scalar loss components. `total` is the quantity that is minimised.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_s: f64,
    pub kl_z: f64,
    pub mi_z_x: f64,
    pub mi_s_x: f64,
    pub mi_z_s: f64,
    pub ce: f64,
    pub total: f64,
}

/// Weights of the DSE objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DseWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

impl DseWeights {
    pub fn from_config(m: &ModelConfig) -> Self {
        DseWeights {
            gamma: m.gamma,
            alpha: m.alpha,
            beta: m.beta,
            theta: m.theta,
        }
    }

    pub fn zero() -> Self {
        DseWeights {
            gamma: 0.0,
            alpha: 0.0,
            beta: 0.0,
            theta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta)] {
            if !(v >= 0.0) {
                return Err(DclError::Config(format!("loss weight {n} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Recomposes the DSE objective from its parts.
    pub fn combine(&self, recon: f64, kl_s: f64, kl_z: f64, mi_z_x: f64, mi_s_x: f64, mi_z_s: f64) -> f64 {
        recon + self.gamma * (kl_s + kl_z) - self.alpha * mi_z_x - self.beta * mi_s_x + self.theta * mi_z_s
    }
}

// ---------------------------------------------------------------------------
// Plain operations

/// `mean + exp(log_var / 2) * noise`.
pub fn reparameterize(p: &GaussianParams, noise: &Array1<f64>) -> Result<Array1<f64>> {
    if noise.len() != p.mean.len() || p.log_var.len() != p.mean.len() {
        return Err(DclError::Shape(format!(
            "reparameterize: mean {}, log_var {}, noise {}",
            p.mean.len(),
            p.log_var.len(),
            noise.len()
        )));
    }
    Ok(&p.mean + &(p.log_var.mapv(|lv| (0.5 * lv).exp()) * noise))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    let n = q.mean.len();
    if q.log_var.len() != n || p.mean.len() != n || p.log_var.len() != n {
        return Err(DclError::Shape(format!("kl: q has {n} dims, p has {}", p.mean.len())));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
        let d = mq - mp;
        kl += 0.5 * (lp - lq + (lq.exp() + d * d) / lp.exp() - 1.0);
    }
    Ok(kl)
}

/// Shuffles time steps with a permutation drawn from `perm_seed`.
pub fn augment_content(x: &FeatureSequence, perm_seed: u64) -> FeatureSequence {
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
    augment_content_with(x, &perm)
}

pub fn augment_content_with(x: &FeatureSequence, perm: &[usize]) -> FeatureSequence {
    FeatureSequence::new(x.frames.select(Axis(0), perm))
}

/// Truncated, renormalised Gaussian smoothing matrix over `d` features.
pub fn blur_matrix(d: usize, blur_width: f64) -> Array2<f64> {
    let radius = (3.0 * blur_width).ceil().max(1.0) as isize;
    let mut m = Array2::zeros((d, d));
    for i in 0..d as isize {
        let mut total = 0.0;
        for off in -radius..=radius {
            let j = i + off;
            if j < 0 || j >= d as isize {
                continue;
            }
            let w = (-(off * off) as f64 / (2.0 * blur_width * blur_width)).exp();
            m[[j as usize, i as usize]] = w;
            total += w;
        }
        for off in -radius..=radius {
            let j = i + off;
            if j >= 0 && j < d as isize {
                m[[j as usize, i as usize]] /= total;
            }
        }
    }
    m
}

/// Smooths every frame along the feature axis with a Gaussian of standard
/// deviation `blur_width`; time order is untouched.
pub fn augment_motion(x: &FeatureSequence, blur_width: f64) -> FeatureSequence {
    FeatureSequence::new(x.frames.dot(&blur_matrix(x.dim(), blur_width)))
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>, what: &str) -> Result<f64> {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(DclError::ZeroNorm(what.into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// `log[phi(a, pos) / (phi(a, pos) + sum_j phi(a, neg_j))]` with
/// `phi(u, v) = exp(cos(u, v) / tau)`.
pub fn contrastive_term(anchor: &Array1<f64>, positive: &Array1<f64>, negatives: &[Array1<f64>], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(DclError::InsufficientNegatives(1));
    }
    let pos = cosine(anchor, positive, "anchor/positive")? / tau;
    let mut logits = vec![pos];
    for (j, n) in negatives.iter().enumerate() {
        logits.push(cosine(anchor, n, &format!("negative {j}"))? / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(pos - lse)
}

/// Mean over anchors `i` of the contrastive term with positive `positives[i]`
/// and negatives `positives[j]`, `j != i` (at most `n_max` of them, taken in
/// cyclic order after `i`).
pub fn batch_contrastive(anchors: &Array2<f64>, positives: &Array2<f64>, tau: f64, n_max: Option<usize>) -> Result<f64> {
    let n = anchors.nrows();
    if n < 2 {
        return Err(DclError::InsufficientNegatives(n));
    }
    let take = n_max.unwrap_or(n - 1).min(n - 1);
    let mut total = 0.0;
    for i in 0..n {
        let negs: Vec<Array1<f64>> = (1..=take).map(|o| positives.row((i + o) % n).to_owned()).collect();
        total += contrastive_term(&anchors.row(i).to_owned(), &positives.row(i).to_owned(), &negs, tau)?;
    }
    Ok(total / n as f64)
}

/// Batch latents for the MI estimates. `z` rows are flattened `z_1:T`.
#[derive(Clone, Debug)]
pub struct MiInputs<'a> {
    pub z: &'a Array2<f64>,
    pub z_motion: &'a Array2<f64>,
    pub s: &'a Array2<f64>,
    pub s_content: &'a Array2<f64>,
    pub z_pooled: &'a Array2<f64>,
}

/// `(MI(z; x), MI(s; x), MI(z; s))`. The first two average the raw-anchored
/// and augmented-anchored estimates.
pub fn mutual_information(inp: &MiInputs<'_>, tau: f64, n_max: Option<usize>) -> Result<(f64, f64, f64)> {
    let c_z = batch_contrastive(inp.z, inp.z_motion, tau, n_max)?;
    let c_zm = batch_contrastive(inp.z_motion, inp.z, tau, n_max)?;
    let c_s = batch_contrastive(inp.s, inp.s_content, tau, n_max)?;
    let c_sm = batch_contrastive(inp.s_content, inp.s, tau, n_max)?;
    let mi_zs = batch_contrastive(inp.z_pooled, inp.s, tau, n_max)?;
    Ok((0.5 * (c_z + c_zm), 0.5 * (c_s + c_sm), mi_zs))
}

// ---------------------------------------------------------------------------
// Graph building blocks

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), init_weight(rng, fan_in, fan_out), true),
            b: store.add(format!("{name}.b"), Array2::zeros((1, fan_out)), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        LstmCell {
            wx: store.add(format!("{name}.wx"), init_weight(rng, input, 4 * hidden), true),
            wh: store.add(format!("{name}.wh"), init_weight(rng, hidden, 4 * hidden), true),
            b: store.add(format!("{name}.b"), b, true),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, wx);
        let hw = g.matmul(h, wh);
        let pre = g.add(xw, hw);
        let gates = g.add_row(pre, b);
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n);
        let f = g.slice_cols(gates, n, 2 * n);
        let cc = g.slice_cols(gates, 2 * n, 3 * n);
        let o = g.slice_cols(gates, 3 * n, 4 * n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cc);
        let c_new = g.add(keep, write);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}

/// Graph handles for a diagonal Gaussian over a batch (`n x dim` each).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    fn split(g: &mut Graph, out: Var, dim: usize) -> Self {
        GaussianVars {
            mean: g.slice_cols(out, 0, dim),
            log_var: g.slice_cols(out, dim, 2 * dim),
        }
    }

    pub fn to_params(&self, g: &Graph, row: usize) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).row(row).to_owned(),
            log_var: g.value(self.log_var).row(row).to_owned(),
        }
    }
}

/// `mean + exp(log_var / 2) * noise` in the graph.
pub fn reparameterize_graph(g: &mut Graph, p: GaussianVars, noise: Array2<f64>) -> Var {
    let half = g.scale(p.log_var, 0.5);
    let std = g.exp(half);
    let eps = g.input(noise);
    let scaled = g.mul(std, eps);
    g.add(p.mean, scaled)
}

/// Per-row `KL(q || p)`, summed over dimensions (`n x 1`).
pub fn kl_graph(g: &mut Graph, q: GaussianVars, p: Option<GaussianVars>) -> Var {
    let var_q = g.exp(q.log_var);
    let terms = match p {
        None => {
            // 0.5 * (exp(lq) + mq^2 - lq - 1)
            let m2 = g.square(q.mean);
            let a = g.add(var_q, m2);
            let b = g.sub(a, q.log_var);
            g.add_scalar(b, -1.0)
        }
        Some(p) => {
            let d = g.sub(q.mean, p.mean);
            let d2 = g.square(d);
            let num = g.add(var_q, d2);
            let neg_lp = g.scale(p.log_var, -1.0);
            let inv_var_p = g.exp(neg_lp);
            let ratio = g.mul(num, inv_var_p);
            let lp_minus_lq = g.sub(p.log_var, q.log_var);
            let a = g.add(ratio, lp_minus_lq);
            g.add_scalar(a, -1.0)
        }
    };
    let half = g.scale(terms, 0.5);
    g.row_sums(half)
}

/// Mean contrastive term over the batch, negatives drawn from the other
/// positives. Returns a `1 x 1` node.
pub fn contrastive_graph(g: &mut Graph, anchors: Var, positives: Var, tau: f64, n_max: Option<usize>) -> Result<Var> {
    let n = g.shape(anchors).0;
    if n < 2 {
        return Err(DclError::InsufficientNegatives(n));
    }
    for v in [anchors, positives] {
        if let Some(r) = g.value(v).outer_iter().position(|row| row.dot(&row) == 0.0) {
            return Err(DclError::ZeroNorm(format!("batch row {r}")));
        }
    }
    let cos = g.cosine_matrix(anchors, positives);
    let logits = g.scale(cos, 1.0 / tau);
    let take = n_max.unwrap_or(n - 1).min(n - 1);
    let mask = if take < n - 1 {
        Some(Array2::from_shape_fn((n, n), |(i, j)| (j + n - i) % n <= take))
    } else {
        None
    };
    let ls = g.log_softmax(logits, mask);
    let eye = g.input(Array2::eye(n));
    let diag = g.mul(ls, eye);
    let s = g.sum_all(diag);
    Ok(g.scale(s, 1.0 / n as f64))
}

// ---------------------------------------------------------------------------
// The encoder itself

#[derive(Clone, Copy, Debug)]
pub struct Dse {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub static_head: Linear,
    pub dyn_from_hidden: ParamId,
    pub dyn_from_z: ParamId,
    pub dyn_recur: ParamId,
    pub dyn_bias: ParamId,
    pub dyn_head: Linear,
    pub prior: LstmCell,
    pub prior_head: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
    pub d: usize,
    pub d_s: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub latent_hidden: usize,
}

/// Time-major batch of frame features: `frames[t]` is `batch x d`.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub frames: Vec<Array2<f64>>,
}

impl SeqBatch {
    pub fn from_sequences(seqs: &[&FeatureSequence]) -> Self {
        let t = seqs.first().map_or(0, |s| s.len());
        let d = seqs.first().map_or(0, |s| s.dim());
        let frames = (0..t)
            .map(|step| Array2::from_shape_fn((seqs.len(), d), |(i, j)| seqs[i].frames[[step, j]]))
            .collect();
        SeqBatch { frames }
    }

    pub fn batch(&self) -> usize {
        self.frames.first().map_or(0, |f| f.nrows())
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn sequence(&self, i: usize) -> FeatureSequence {
        let d = self.frames[0].ncols();
        FeatureSequence::new(Array2::from_shape_fn((self.steps(), d), |(t, j)| self.frames[t][[i, j]]))
    }

    /// Applies `f` to every sequence independently.
    pub fn map_sequences(&self, mut f: impl FnMut(usize, &FeatureSequence) -> FeatureSequence) -> Self {
        let seqs: Vec<FeatureSequence> = (0..self.batch()).map(|i| f(i, &self.sequence(i))).collect();
        let refs: Vec<&FeatureSequence> = seqs.iter().collect();
        SeqBatch::from_sequences(&refs)
    }
}

/// Random draws consumed by one DSE evaluation.
#[derive(Clone, Debug)]
pub struct DseNoise {
    pub s: Array2<f64>,
    pub z: Vec<Array2<f64>>,
    pub s_content: Array2<f64>,
    pub z_motion: Vec<Array2<f64>>,
    pub perms: Vec<Vec<usize>>,
}

impl DseNoise {
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, t: usize, d_s: usize, d_z: usize) -> Self {
        let mut normal = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
        let s = normal(batch, d_s);
        let z = (0..t).map(|_| normal(batch, d_z)).collect();
        let s_content = normal(batch, d_s);
        let z_motion = (0..t).map(|_| normal(batch, d_z)).collect();
        let perms = (0..batch)
            .map(|_| {
                let mut p: Vec<usize> = (0..t).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        DseNoise {
            s,
            z,
            s_content,
            z_motion,
            perms,
        }
    }

    /// All-zero draws: every latent equals its posterior mean. The content
    /// view still uses a fixed reversal so the augmentation is exercised.
    pub fn zeros(batch: usize, t: usize, d_s: usize, d_z: usize) -> Self {
        DseNoise {
            s: Array2::zeros((batch, d_s)),
            z: vec![Array2::zeros((batch, d_z)); t],
            s_content: Array2::zeros((batch, d_s)),
            z_motion: vec![Array2::zeros((batch, d_z)); t],
            perms: vec![(0..t).rev().collect(); batch],
        }
    }
}

/// Graph handles produced by one DSE pass over a batch.
#[derive(Clone, Debug)]
pub struct DseOutputs {
    pub q_s: GaussianVars,
    pub q_z: Vec<GaussianVars>,
    pub p_z: Vec<GaussianVars>,
    pub s: Var,
    pub z: Vec<Var>,
    /// Time-mean of `z` (`batch x d_z`).
    pub z_pooled: Var,
    pub recon_frames: Vec<Var>,
    pub recon: Var,
    pub kl_s: Var,
    pub kl_z: Var,
    pub mi_z_x: Option<Var>,
    pub mi_s_x: Option<Var>,
    pub mi_z_s: Option<Var>,
    pub total: Var,
}

impl DseOutputs {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let opt = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        LossBreakdown {
            recon: g.scalar(self.recon),
            kl_s: g.scalar(self.kl_s),
            kl_z: g.scalar(self.kl_z),
            mi_z_x: opt(self.mi_z_x),
            mi_s_x: opt(self.mi_s_x),
            mi_z_s: opt(self.mi_z_s),
            ce: 0.0,
            total: g.scalar(self.total),
        }
    }
}

impl Dse {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, m: &ModelConfig) -> Self {
        let (d, h, l) = (m.d, m.hidden, m.latent_hidden);
        Dse {
            fwd: LstmCell::init(store, rng, "dse.lstm_fwd", d, h),
            bwd: LstmCell::init(store, rng, "dse.lstm_bwd", d, h),
            static_head: Linear::init(store, rng, "dse.q_s", 2 * h, 2 * m.d_s),
            dyn_from_hidden: store.add("dse.q_z.wh", init_weight(rng, 2 * h, l), true),
            dyn_from_z: store.add("dse.q_z.wz", init_weight(rng, m.d_z, l), true),
            dyn_recur: store.add("dse.q_z.wr", init_weight(rng, l, l), true),
            dyn_bias: store.add("dse.q_z.b", Array2::zeros((1, l)), true),
            dyn_head: Linear::init(store, rng, "dse.q_z.head", l, 2 * m.d_z),
            prior: LstmCell::init(store, rng, "dse.p_z.lstm", m.d_z, l),
            prior_head: Linear::init(store, rng, "dse.p_z.head", l, 2 * m.d_z),
            dec_hidden: Linear::init(store, rng, "dse.dec.hidden", m.d_s + m.d_z, h),
            dec_out: Linear::init(store, rng, "dse.dec.out", h, d),
            d,
            d_s: m.d_s,
            d_z: m.d_z,
            hidden: h,
            latent_hidden: l,
        }
    }

    /// Bidirectional hidden states `[h_fwd_t | h_bwd_t]` for every step.
    pub fn hidden_states(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Vec<Var> {
        let n = g.shape(xs[0]).0;
        let zero = g.input(Array2::zeros((n, self.hidden)));
        let (mut h, mut c) = (zero, zero);
        let mut fwd = Vec::with_capacity(xs.len());
        for &x in xs {
            (h, c) = self.fwd.step(g, store, x, h, c);
            fwd.push(h);
        }
        let (mut h, mut c) = (zero, zero);
        let mut bwd = vec![zero; xs.len()];
        for (t, &x) in xs.iter().enumerate().rev() {
            (h, c) = self.bwd.step(g, store, x, h, c);
            bwd[t] = h;
        }
        fwd.into_iter().zip(bwd).map(|(f, b)| g.concat_cols(&[f, b])).collect()
    }

    pub fn static_posterior(&self, g: &mut Graph, store: &ParamStore, hs: &[Var]) -> GaussianVars {
        let mut acc = hs[0];
        for &h in &hs[1..] {
            acc = g.add(acc, h);
        }
        let pooled = g.scale(acc, 1.0 / hs.len() as f64);
        let out = self.static_head.forward(g, store, pooled);
        GaussianVars::split(g, out, self.d_s)
    }

    /// Autoregressive dynamic posterior. Returns per-step parameters and samples.
    pub fn dynamic_posterior(&self, g: &mut Graph, store: &ParamStore, hs: &[Var], noise: &[Array2<f64>]) -> (Vec<GaussianVars>, Vec<Var>) {
        let n = g.shape(hs[0]).0;
        let wh = g.param(store, self.dyn_from_hidden);
        let wz = g.param(store, self.dyn_from_z);
        let wr = g.param(store, self.dyn_recur);
        let b = g.param(store, self.dyn_bias);
        let mut r = g.input(Array2::zeros((n, self.latent_hidden)));
        let mut z_prev = g.input(Array2::zeros((n, self.d_z)));
        let mut params = Vec::with_capacity(hs.len());
        let mut samples = Vec::with_capacity(hs.len());
        for (t, &h) in hs.iter().enumerate() {
            let a = g.matmul(h, wh);
            let bz = g.matmul(z_prev, wz);
            let br = g.matmul(r, wr);
            let s1 = g.add(a, bz);
            let s2 = g.add(s1, br);
            let pre = g.add_row(s2, b);
            r = g.tanh(pre);
            let out = self.dyn_head.forward(g, store, r);
            let p = GaussianVars::split(g, out, self.d_z);
            let z = reparameterize_graph(g, p, noise[t].clone());
            params.push(p);
            samples.push(z);
            z_prev = z;
        }
        (params, samples)
    }

    /// Prior parameters for every step given the sampled path (`z_0 = 0`).
    pub fn prior_graph(&self, g: &mut Graph, store: &ParamStore, z: &[Var]) -> Vec<GaussianVars> {
        let n = g.shape(z[0]).0;
        let zero_h = g.input(Array2::zeros((n, self.latent_hidden)));
        let z0 = g.input(Array2::zeros((n, self.d_z)));
        let (mut h, mut c) = (zero_h, zero_h);
        let mut out = Vec::with_capacity(z.len());
        for t in 0..z.len() {
            let input = if t == 0 { z0 } else { z[t - 1] };
            (h, c) = self.prior.step(g, store, input, h, c);
            let o = self.prior_head.forward(g, store, h);
            out.push(GaussianVars::split(g, o, self.d_z));
        }
        out
    }

    /// Framewise decoder: `T` outputs of shape `batch x d`.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, s: Var, z: &[Var]) -> Vec<Var> {
        let n = g.shape(s).0;
        let rows: Vec<Var> = z.iter().map(|&zt| g.concat_cols(&[s, zt])).collect();
        let stacked = g.concat_rows(&rows);
        let h = self.dec_hidden.forward(g, store, stacked);
        let h = g.tanh(h);
        let out = self.dec_out.forward(g, store, h);
        (0..z.len()).map(|t| g.slice_rows(out, t * n, (t + 1) * n)).collect()
    }

    fn check_steps(g: &Graph, vars: &[GaussianVars]) -> Result<()> {
        for (t, p) in vars.iter().enumerate() {
            if g.value(p.mean).iter().chain(g.value(p.log_var)).any(|v| !v.is_finite()) {
                return Err(DclError::Numeric {
                    step: t,
                    what: "dynamic posterior activation".into(),
                });
            }
        }
        Ok(())
    }

    /// Full DSE pass. With `with_mi` the content and motion views are encoded
    /// and the three contrastive estimates join the objective.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SeqBatch,
        noise: &DseNoise,
        weights: DseWeights,
        blur_width: f64,
        tau_nce: f64,
        n_max: Option<usize>,
        with_mi: bool,
    ) -> Result<DseOutputs> {
        let n = batch.batch();
        let t_len = batch.steps();
        if t_len == 0 {
            return Err(DclError::Empty("sequence with zero steps".into()));
        }
        for (t, f) in batch.frames.iter().enumerate() {
            if f.ncols() != self.d {
                return Err(DclError::Shape(format!("frame width {} but encoder expects {}", f.ncols(), self.d)));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(DclError::Numeric {
                    step: t,
                    what: "input frame".into(),
                });
            }
        }
        let xs: Vec<Var> = batch.frames.iter().map(|f| g.input(f.clone())).collect();
        let hs = self.hidden_states(g, store, &xs);
        let q_s = self.static_posterior(g, store, &hs);
        let s = reparameterize_graph(g, q_s, noise.s.clone());
        let (q_z, z) = self.dynamic_posterior(g, store, &hs, &noise.z);
        Self::check_steps(g, &q_z)?;
        let p_z = self.prior_graph(g, store, &z);

        let recon_frames = self.decode_graph(g, store, s, &z);
        let mut sq_terms = Vec::with_capacity(t_len);
        for (t, &xh) in recon_frames.iter().enumerate() {
            let diff = g.sub(xh, xs[t]);
            sq_terms.push(g.square(diff));
        }
        let all = g.concat_rows(&sq_terms);
        let sse = g.sum_all(all);
        let recon = g.scale(sse, 0.5 / n as f64);

        let kl_s_rows = kl_graph(g, q_s, None);
        let kl_s_sum = g.sum_all(kl_s_rows);
        let kl_s = g.scale(kl_s_sum, 1.0 / n as f64);
        let kl_z_parts: Vec<Var> = q_z
            .iter()
            .zip(&p_z)
            .map(|(&q, &p)| kl_graph(g, q, Some(p)))
            .collect();
        let kl_z_cat = g.concat_cols(&kl_z_parts);
        let kl_z_sum = g.sum_all(kl_z_cat);
        let kl_z = g.scale(kl_z_sum, 1.0 / n as f64);

        let mut zsum = z[0];
        for &zt in &z[1..] {
            zsum = g.add(zsum, zt);
        }
        let z_pooled = g.scale(zsum, 1.0 / t_len as f64);

        let kl = g.add(kl_s, kl_z);
        let kl_w = g.scale(kl, weights.gamma);
        let mut total = g.add(recon, kl_w);
        let (mut mi_z_x, mut mi_s_x, mut mi_z_s) = (None, None, None);

        if with_mi {
            let content = batch.map_sequences(|i, x| augment_content_with(x, &noise.perms[i]));
            let blur = blur_matrix(self.d, blur_width);
            let motion = SeqBatch {
                frames: batch.frames.iter().map(|f| f.dot(&blur)).collect(),
            };
            let xc: Vec<Var> = content.frames.iter().map(|f| g.input(f.clone())).collect();
            let hc = self.hidden_states(g, store, &xc);
            let q_sc = self.static_posterior(g, store, &hc);
            let s_content = reparameterize_graph(g, q_sc, noise.s_content.clone());

            let xm: Vec<Var> = motion.frames.iter().map(|f| g.input(f.clone())).collect();
            let hm = self.hidden_states(g, store, &xm);
            let (_, z_motion) = self.dynamic_posterior(g, store, &hm, &noise.z_motion);

            let z_flat = g.concat_cols(&z);
            let zm_flat = g.concat_cols(&z_motion);
            let c_z = contrastive_graph(g, z_flat, zm_flat, tau_nce, n_max)?;
            let c_zm = contrastive_graph(g, zm_flat, z_flat, tau_nce, n_max)?;
            let c_s = contrastive_graph(g, s, s_content, tau_nce, n_max)?;
            let c_sm = contrastive_graph(g, s_content, s, tau_nce, n_max)?;
            let mzx = g.add(c_z, c_zm);
            let mzx = g.scale(mzx, 0.5);
            let msx = g.add(c_s, c_sm);
            let msx = g.scale(msx, 0.5);
            let mzs = contrastive_graph(g, z_pooled, s, tau_nce, n_max)?;

            let a = g.scale(mzx, -weights.alpha);
            let b = g.scale(msx, -weights.beta);
            let c = g.scale(mzs, weights.theta);
            total = g.add(total, a);
            total = g.add(total, b);
            total = g.add(total, c);
            mi_z_x = Some(mzx);
            mi_s_x = Some(msx);
            mi_z_s = Some(mzs);
        }

        Ok(DseOutputs {
            q_s,
            q_z,
            p_z,
            s,
            z,
            z_pooled,
            recon_frames,
            recon,
            kl_s,
            kl_z,
            mi_z_x,
            mi_s_x,
            mi_z_s,
            total,
        })
    }

    /// Posterior of one sequence given the noise used for the sampled prefix.
    pub fn posterior(&self, store: &ParamStore, x: &FeatureSequence, z_noise: &Array2<f64>) -> Result<(GaussianParams, Vec<GaussianParams>)> {
        if x.dim() != self.d {
            return Err(DclError::Shape(format!("frame width {} but encoder expects {}", x.dim(), self.d)));
        }
        for (t, row) in x.frames.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DclError::Numeric { step: t, what: "input frame".into() });
            }
        }
        let mut g = Graph::new();
        let batch = SeqBatch::from_sequences(&[x]);
        let xs: Vec<Var> = batch.frames.iter().map(|f| g.input(f.clone())).collect();
        let hs = self.hidden_states(&mut g, store, &xs);
        let q_s = self.static_posterior(&mut g, store, &hs);
        let noise: Vec<Array2<f64>> = z_noise.outer_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect();
        let (q_z, _) = self.dynamic_posterior(&mut g, store, &hs, &noise);
        Self::check_steps(&g, &q_z)?;
        Ok((q_s.to_params(&g, 0), q_z.iter().map(|p| p.to_params(&g, 0)).collect()))
    }

    /// Prior for the step after `prefix` (an empty prefix conditions on `z_0 = 0` only).
    pub fn prior_dynamic(&self, store: &ParamStore, prefix: &[Array1<f64>]) -> Result<GaussianParams> {
        if let Some(bad) = prefix.iter().find(|z| z.len() != self.d_z) {
            return Err(DclError::Shape(format!("prefix entry has {} dims, expected {}", bad.len(), self.d_z)));
        }
        let mut g = Graph::new();
        let mut z: Vec<Var> = prefix.iter().map(|p| g.input(p.clone().insert_axis(Axis(0)))).collect();
        // The prior for step len+1 reads z_len; append a placeholder never consumed.
        z.push(g.input(Array2::zeros((1, self.d_z))));
        let p = self.prior_graph(&mut g, store, &z);
        Ok(p.last().expect("non-empty").to_params(&g, 0))
    }

    pub fn decode(&self, store: &ParamStore, s: &Array1<f64>, z: &Array2<f64>) -> Result<FeatureSequence> {
        if s.len() != self.d_s || z.ncols() != self.d_z {
            return Err(DclError::Shape(format!(
                "decode: s has {} dims (want {}), z is {:?} (want T x {})",
                s.len(),
                self.d_s,
                z.dim(),
                self.d_z
            )));
        }
        let mut g = Graph::new();
        let sv = g.input(s.clone().insert_axis(Axis(0)));
        let zs: Vec<Var> = z.outer_iter().map(|r| g.input(r.to_owned().insert_axis(Axis(0)))).collect();
        let out = self.decode_graph(&mut g, store, sv, &zs);
        let frames = Array2::from_shape_fn((z.nrows(), self.d), |(t, j)| g.value(out[t])[[0, j]]);
        Ok(FeatureSequence::new(frames))
    }
}

/// Computes the DSE objective on a batch of sequences.
#[allow(clippy::too_many_arguments)]
pub fn dse_loss(
    dse: &Dse,
    store: &ParamStore,
    batch: &[&FeatureSequence],
    noise: &DseNoise,
    weights: DseWeights,
    m: &ModelConfig,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut g = Graph::new();
    let out = dse.forward(&mut g, store, &SeqBatch::from_sequences(batch), noise, weights, m.blur_width, m.tau_nce, m.n_max, true)?;
    Ok(out.breakdown(&g))
}
