//! Late-fusion QA model and the full training objective.
//!
//! Each clip becomes one feature row: `[audio | time-mean video]` for the
//! baseline, `[audio | s | mean_t z_t]` once the sequential encoder is on, and
//! the affinity-transported version of that row when the affinity module is
//! on. The two rows of a pair are fused with the question embedding and
//! classified into "clip 1" / "clip 2".

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clm::{affinity_graph, intervene_graph, transfer_graph};
use crate::config::{Config, Mode, TieLossTarget};
use crate::dse::{Dse, DseNoise, DseWeights, LossBreakdown, SeqBatch, Linear};
use crate::encoders::{Encoders, FeatureSequence};
use crate::error::{DclError, Result};
use crate::params::{ParamId, ParamStore};
use crate::synthdata::{QASample, QuestionTarget, Split};
use crate::tape::{softplus_inv, Graph, Var};

/// Two-way answer distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Array1<f64>) -> Self {
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e = logits.mapv(|v| (v - max).exp());
        let probabilities = &e / e.sum();
        Prediction { logits, probabilities }
    }

    /// Index of the larger logit; ties go to clip 1.
    pub fn answer(&self) -> u8 {
        u8::from(self.logits[1] > self.logits[0])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionHead {
    pub pair1: Linear,
    pub pair2: Linear,
    pub joint1: Linear,
    pub joint2: Linear,
    pub cls: Linear,
}

impl FusionHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, feature: usize, question: usize, hidden: usize, width: usize) -> Self {
        FusionHead {
            pair1: Linear::init(store, rng, "fusion.pair1", 2 * feature, hidden),
            pair2: Linear::init(store, rng, "fusion.pair2", hidden, hidden),
            joint1: Linear::init(store, rng, "fusion.joint1", hidden + question, hidden),
            joint2: Linear::init(store, rng, "fusion.joint2", hidden, width),
            cls: Linear::init(store, rng, "fusion.cls", width, 2),
        }
    }

    /// `MLP(Concat(MLP(Concat(f1, f2)), x_t))`, one row per sample.
    pub fn fuse_graph(&self, g: &mut Graph, store: &ParamStore, f1: Var, f2: Var, xt: Var) -> Var {
        let pair = g.concat_cols(&[f1, f2]);
        let h = self.pair1.forward(g, store, pair);
        let h = g.tanh(h);
        let h = self.pair2.forward(g, store, h);
        let h = g.tanh(h);
        let joint = g.concat_cols(&[h, xt]);
        let j = self.joint1.forward(g, store, joint);
        let j = g.tanh(j);
        let j = self.joint2.forward(g, store, j);
        g.tanh(j)
    }

    pub fn classify_graph(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Var {
        self.cls.forward(g, store, fused)
    }

    fn check(&self, store: &ParamStore, f1: &Array1<f64>, f2: &Array1<f64>, xt: &Array1<f64>) -> Result<()> {
        let feature = store.value(self.pair1.w).nrows() / 2;
        let question = store.value(self.joint1.w).nrows() - store.value(self.pair2.w).ncols();
        if f1.len() != feature || f2.len() != feature || xt.len() != question {
            return Err(DclError::Shape(format!(
                "fuse: features {}/{} and question {} but head expects {feature} and {question}",
                f1.len(),
                f2.len(),
                xt.len()
            )));
        }
        Ok(())
    }

    pub fn fuse(&self, store: &ParamStore, f1: &Array1<f64>, f2: &Array1<f64>, xt: &Array1<f64>) -> Result<Array1<f64>> {
        self.check(store, f1, f2, xt)?;
        let mut g = Graph::new();
        let row = |g: &mut Graph, v: &Array1<f64>| g.input(v.clone().insert_axis(Axis(0)));
        let (a, b, q) = (row(&mut g, f1), row(&mut g, f2), row(&mut g, xt));
        let out = self.fuse_graph(&mut g, store, a, b, q);
        Ok(g.value(out).row(0).to_owned())
    }

    pub fn classify(&self, store: &ParamStore, fused: &Array1<f64>) -> Result<Prediction> {
        let width = store.value(self.cls.w).nrows();
        if fused.len() != width {
            return Err(DclError::Shape(format!("classify: {} features, head expects {width}", fused.len())));
        }
        let logits = fused.dot(store.value(self.cls.w)) + store.value(self.cls.b).row(0);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DclError::Numeric { step: 0, what: "classifier logits".into() });
        }
        Ok(Prediction::from_logits(logits))
    }
}

/// Mean cross-entropy of `logits` (`n x 2`) against 0/1 labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let n = labels.len();
    let onehot = Array2::from_shape_fn((n, 2), |(i, j)| if labels[i] as usize == j { 1.0 } else { 0.0 });
    let ls = g.log_softmax(logits, None);
    let oh = g.input(onehot);
    let picked = g.mul(ls, oh);
    let s = g.sum_all(picked);
    g.scale(s, -1.0 / n as f64)
}

/// One QA sample with the frozen video encoding already applied.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub video: [FeatureSequence; 2],
    /// Raw audio (`d_raw`), or final audio features for precomputed data.
    pub audio: [Array1<f64>; 2],
    pub question_id: usize,
    pub text: Option<Array1<f64>>,
    pub label: u8,
    pub target: QuestionTarget,
    pub objects: [u32; 2],
}

/// How counterfactual affinities are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Intervention {
    /// Affinities rebuilt from `X* = sigma * W + mu`.
    Learned,
    /// `X* = X`: the counterfactual graph equals the factual one.
    Identity,
}

/// Random draws for one forward pass over a batch of `B` pairs.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub dse: Option<DseNoise>,
    /// One `2B x D` matrix per counterfactual sample.
    pub cf: Vec<Array2<f64>>,
}

impl StepNoise {
    pub fn sample<R: Rng>(rng: &mut R, model: &Model, pairs: usize, cf_samples: usize) -> Self {
        let n = 2 * pairs;
        let dse = model
            .dse
            .map(|d| DseNoise::sample(rng, n, model.config.data.t, d.d_s, d.d_z));
        let width = model.feature_width();
        let cf = if model.mode.uses_counterfactual() {
            (0..cf_samples)
                .map(|_| Array2::from_shape_fn((n, width), |_| rng.sample::<f64, _>(StandardNormal)))
                .collect()
        } else {
            Vec::new()
        };
        StepNoise { dse, cf }
    }

    /// Posterior means for every latent; counterfactual noise is still drawn
    /// from `rng`.
    pub fn eval<R: Rng>(rng: &mut R, model: &Model, pairs: usize, cf_samples: usize) -> Self {
        let mut n = Self::sample(rng, model, pairs, cf_samples);
        if let Some(d) = model.dse {
            n.dse = Some(DseNoise::zeros(2 * pairs, model.config.data.t, d.d_s, d.d_z));
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Build the DSE objective (and its contrastive views) into the loss.
    pub with_loss: bool,
    pub intervention: Intervention,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions { with_loss: true, intervention: Intervention::Learned }
    }

    pub fn predict() -> Self {
        ForwardOptions { with_loss: false, intervention: Intervention::Learned }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub factual: Var,
    pub tie: Option<Var>,
    /// Logits the answer is read from.
    pub decision: Var,
    pub ce: Var,
    pub loss: Var,
    /// Per-clip feature rows before transfer (`2B x D`), clip 1s first.
    pub features: Var,
    pub static_factor: Option<Var>,
    pub dynamic_pooled: Option<Var>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub mode: Mode,
    pub precomputed: bool,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub dse: Option<Dse>,
    pub head: FusionHead,
    pub x_mu: Option<ParamId>,
    pub x_sigma: Option<ParamId>,
}

impl Model {
    /// `video_dim`/`audio_dim` are the raw input widths; with `precomputed`
    /// inputs they must equal `model.d` and the encoders are bypassed.
    pub fn new(config: &Config, mode: Mode, video_dim: usize, audio_dim: usize, precomputed: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        if precomputed && (video_dim != m.d || audio_dim != m.d) {
            return Err(DclError::Shape(format!(
                "precomputed features are {video_dim}/{audio_dim} wide but model.d = {}",
                m.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = Encoders::init(&mut store, &mut rng, video_dim, m.d, config.data.n_questions);
        let dse = mode.uses_dse().then(|| Dse::init(&mut store, &mut rng, m));
        let feature = if mode.uses_dse() { m.d + m.d_s + m.d_z } else { 2 * m.d };
        let head = FusionHead::init(&mut store, &mut rng, feature, m.d, m.fusion_hidden, m.fusion_width);
        let (x_mu, x_sigma) = if mode.uses_counterfactual() {
            (
                Some(store.add("clm.x_mu", Array2::zeros((1, feature)), true)),
                Some(store.add("clm.x_sigma", Array2::from_elem((1, feature), softplus_inv(1.0)), true)),
            )
        } else {
            (None, None)
        };
        Ok(Model {
            config: config.clone(),
            mode,
            precomputed,
            store,
            encoders,
            dse,
            head,
            x_mu,
            x_sigma,
        })
    }

    pub fn feature_width(&self) -> usize {
        let m = &self.config.model;
        if self.mode.uses_dse() {
            m.d + m.d_s + m.d_z
        } else {
            2 * m.d
        }
    }

    pub fn prepare(&self, split: &Split) -> Result<Vec<PreparedSample>> {
        split.samples.iter().map(|s| self.prepare_sample(s)).collect()
    }

    pub fn prepare_sample(&self, s: &QASample) -> Result<PreparedSample> {
        let video = |c: &crate::synthdata::RawClip| -> Result<FeatureSequence> {
            if self.precomputed {
                Ok(FeatureSequence::new(c.frames.mapv(f64::from)))
            } else {
                self.encoders.encode_video(&self.store, c)
            }
        };
        if self.precomputed && s.text.is_none() {
            return Err(DclError::Shape("precomputed sample without a text feature".into()));
        }
        Ok(PreparedSample {
            video: [video(&s.clip1)?, video(&s.clip2)?],
            audio: [s.clip1.audio.mapv(f64::from), s.clip2.audio.mapv(f64::from)],
            question_id: s.question_id,
            text: s.text.as_ref().map(|t| t.mapv(f64::from)),
            label: s.label,
            target: s.question_target,
            objects: [s.clip1.object_id, s.clip2.object_id],
        })
    }

    /// Sets the intervention distribution to the per-dimension mean and
    /// standard deviation of the factual feature rows of `batch`.
    pub fn init_intervention(&mut self, batch: &[&PreparedSample]) -> Result<()> {
        let (Some(mu), Some(sigma)) = (self.x_mu, self.x_sigma) else {
            return Ok(());
        };
        let noise = StepNoise::eval(&mut ChaCha8Rng::seed_from_u64(0), self, batch.len(), 1);
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &noise, ForwardOptions::predict())?;
        let x = g.value(out.features);
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| softplus_inv(s.max(1e-3)));
        self.store.set(mu, mean.insert_axis(Axis(0)));
        self.store.set(sigma, std.insert_axis(Axis(0)));
        Ok(())
    }

    fn audio_features(&self, g: &mut Graph, batch: &[&PreparedSample]) -> Var {
        let n = batch.len();
        let w = batch[0].audio[0].len();
        let raw = Array2::from_shape_fn((2 * n, w), |(i, j)| batch[i % n].audio[i / n][j]);
        if self.precomputed {
            g.input(raw)
        } else {
            self.encoders.audio_graph(g, &self.store, raw)
        }
    }

    fn question_features(&self, g: &mut Graph, batch: &[&PreparedSample]) -> Result<Var> {
        if self.precomputed {
            let w = batch[0].text.as_ref().map_or(0, |t| t.len());
            let rows = Array2::from_shape_fn((batch.len(), w), |(i, j)| batch[i].text.as_ref().expect("checked in prepare")[j]);
            Ok(g.input(rows))
        } else {
            self.encoders.question_graph(g, &self.store, batch.iter().map(|s| s.question_id).collect())
        }
    }

    fn logits_from(&self, g: &mut Graph, f: Var, q: Var, pairs: usize) -> Var {
        let f1 = g.slice_rows(f, 0, pairs);
        let f2 = g.slice_rows(f, pairs, 2 * pairs);
        let fused = self.head.fuse_graph(g, &self.store, f1, f2, q);
        self.head.classify_graph(g, &self.store, fused)
    }

    /// Full forward pass over `B >= 2` pairs.
    pub fn forward(&self, g: &mut Graph, batch: &[&PreparedSample], noise: &StepNoise, opts: ForwardOptions) -> Result<ForwardOutputs> {
        let pairs = batch.len();
        if pairs < 2 {
            return Err(DclError::Config(format!("a batch needs at least 2 pairs, got {pairs}")));
        }
        let m = &self.config.model;
        let clips: Vec<&FeatureSequence> = (0..2 * pairs).map(|i| &batch[i % pairs].video[i / pairs]).collect();
        let audio = self.audio_features(g, batch);
        let question = self.question_features(g, batch)?;

        let mut breakdown = LossBreakdown::default();
        let mut dse_loss = None;
        let (features, blocks, static_factor, dynamic_pooled) = match self.dse {
            None => {
                let means = Array2::from_shape_fn((2 * pairs, m.d), |(i, j)| clips[i].frames.column(j).mean().expect("T >= 1"));
                let mv = g.input(means);
                (g.concat_cols(&[audio, mv]), None, None, None)
            }
            Some(dse) => {
                let dn = noise.dse.as_ref().ok_or_else(|| DclError::Config("missing DSE noise".into()))?;
                let out = dse.forward(
                    g,
                    &self.store,
                    &SeqBatch::from_sequences(&clips),
                    dn,
                    if opts.with_loss { DseWeights::from_config(m) } else { DseWeights::zero() },
                    m.blur_width,
                    m.tau_nce,
                    m.n_max,
                    opts.with_loss,
                )?;
                breakdown = out.breakdown(g);
                dse_loss = Some(out.total);
                let f = g.concat_cols(&[audio, out.s, out.z_pooled]);
                (f, Some([audio, out.s, out.z_pooled]), Some(out.s), Some(out.z_pooled))
            }
        };

        let transported = match (self.mode.uses_affinity(), blocks) {
            (true, Some(blocks)) => {
                let affs = [
                    affinity_graph(g, blocks[0], m.tau_aff, m.k)?,
                    affinity_graph(g, blocks[1], m.tau_aff, m.k)?,
                    affinity_graph(g, blocks[2], m.tau_aff, m.k)?,
                ];
                transfer_graph(g, affs, blocks)
            }
            _ => features,
        };
        let factual = self.logits_from(g, transported, question, pairs);

        let mut tie = None;
        if self.mode.uses_counterfactual() {
            let blocks = blocks.expect("counterfactual modes use the encoder");
            let samples = noise.cf.len().max(1);
            let mut cf_sum = None;
            for c in 0..samples {
                let cf_affs = match opts.intervention {
                    Intervention::Identity => {
                        let mut a = [blocks[0]; 3];
                        for (slot, &b) in a.iter_mut().zip(&blocks) {
                            *slot = affinity_graph(g, b, m.tau_aff, m.k)?;
                        }
                        a
                    }
                    Intervention::Learned => {
                        let w = noise.cf.get(c).ok_or_else(|| DclError::Config("missing counterfactual noise".into()))?;
                        let mu = g.param(&self.store, self.x_mu.expect("counterfactual params"));
                        let sr = g.param(&self.store, self.x_sigma.expect("counterfactual params"));
                        let xs = intervene_graph(g, mu, sr, w.clone());
                        let (a, b) = (m.d, m.d + m.d_s);
                        let parts = [g.slice_cols(xs, 0, a), g.slice_cols(xs, a, b), g.slice_cols(xs, b, b + m.d_z)];
                        [
                            affinity_graph(g, parts[0], m.tau_aff, m.k)?,
                            affinity_graph(g, parts[1], m.tau_aff, m.k)?,
                            affinity_graph(g, parts[2], m.tau_aff, m.k)?,
                        ]
                    }
                };
                let f_cf = transfer_graph(g, cf_affs, blocks);
                let logits = self.logits_from(g, f_cf, question, pairs);
                cf_sum = Some(match cf_sum {
                    None => logits,
                    Some(acc) => g.add(acc, logits),
                });
            }
            let mean_cf = g.scale(cf_sum.expect("at least one sample"), 1.0 / samples as f64);
            tie = Some(g.sub(factual, mean_cf));
        }

        let decision = tie.unwrap_or(factual);
        let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
        let ce_input = match (tie, m.tie_loss_target) {
            (Some(t), TieLossTarget::Tie) => t,
            _ => factual,
        };
        let ce = cross_entropy_graph(g, ce_input, &labels);
        let loss = match dse_loss {
            Some(d) if opts.with_loss => g.add(d, ce),
            _ => ce,
        };
        breakdown.ce = g.scalar(ce);
        breakdown.total = g.scalar(loss);
        if !breakdown.total.is_finite() {
            return Err(DclError::Numeric { step: 0, what: "total loss".into() });
        }
        Ok(ForwardOutputs {
            factual,
            tie,
            decision,
            ce,
            loss,
            features,
            static_factor,
            dynamic_pooled,
            breakdown,
        })
    }

    /// Predictions for a batch using posterior means.
    pub fn predict(&self, batch: &[&PreparedSample], cf_seed: u64) -> Result<Vec<Prediction>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cf_seed);
        let noise = StepNoise::eval(&mut rng, self, batch.len(), self.config.model.cf_samples_eval);
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &noise, ForwardOptions::predict())?;
        Ok(g.value(out.decision).outer_iter().map(|r| Prediction::from_logits(r.to_owned())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn setup(mode: Mode) -> (Model, Vec<PreparedSample>) {
        let cfg = Config::tiny();
        let ds = generate_dataset(&cfg, 1).unwrap();
        let model = Model::new(&cfg, mode, ds.frame_dim, ds.audio_dim, false, 7).unwrap();
        let prepared = model.prepare(&ds.train).unwrap();
        (model, prepared)
    }

    #[test]
    fn prediction_cases() {
        let p = Prediction::from_logits(ndarray::array![0.0, 0.0]);
        assert_eq!(p.probabilities, ndarray::array![0.5, 0.5]);
        let a = Prediction::from_logits(ndarray::array![1.3, -0.4]);
        let b = Prediction::from_logits(ndarray::array![101.3, 99.6]);
        assert!((a.probabilities.sum() - 1.0).abs() < 1e-12);
        assert!((&a.probabilities - &b.probabilities).iter().all(|d| d.abs() < 1e-12));
        assert_eq!(a.answer(), b.answer());
    }

    #[test]
    fn zero_classifier_gives_even_odds() {
        let (mut model, _) = setup(Mode::Baseline);
        let cls = model.head.cls;
        model.store.set(cls.w, Array2::zeros((5, 2)));
        model.store.set(cls.b, Array2::zeros((1, 2)));
        let p = model.head.classify(&model.store, &Array1::from_elem(5, 0.3)).unwrap();
        assert_eq!(p.probabilities, ndarray::array![0.5, 0.5]);
    }

    #[test]
    fn fuse_shape_and_determinism() {
        let (model, _) = setup(Mode::Dse);
        let f = Array1::from_elem(16, 0.1);
        let q = Array1::from_elem(8, -0.2);
        let a = model.head.fuse(&model.store, &f, &f, &q).unwrap();
        assert_eq!(a.len(), model.config.model.fusion_width);
        assert_eq!(a, model.head.fuse(&model.store, &f, &f, &q).unwrap());
        assert!(model.head.fuse(&model.store, &f, &f, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn fuse_gradient_matches_finite_differences() {
        let (model, _) = setup(Mode::Dse);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
        let f2 = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
        let q = Array1::from_shape_fn(8, |_| rng.sample::<f64, _>(StandardNormal));
        let w = Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal));
        let objective = |f1: &Array1<f64>| model.head.fuse(&model.store, f1, &f2, &q).unwrap().dot(&w);

        // Analytic gradient via a trainable stand-in for f1.
        let mut store = model.store.clone();
        let id = store.add("probe.f1", f1.clone().insert_axis(Axis(0)), true);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.input(f2.clone().insert_axis(Axis(0)));
        let qv = g.input(q.clone().insert_axis(Axis(0)));
        let out = model.head.fuse_graph(&mut g, &store, a, b, qv);
        let wv = g.input(w.clone().insert_axis(Axis(1)));
        let l = g.matmul(out, wv);
        let grad = g.backward(l).get(id).unwrap().row(0).to_owned();

        for i in 0..16 {
            let (mut p, mut m) = (f1.clone(), f1.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (objective(&p) - objective(&m)) / 2e-6;
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "component {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn identity_intervention_zeroes_the_indirect_effect() {
        let (model, prepared) = setup(Mode::DseAC);
        let batch: Vec<&PreparedSample> = prepared.iter().take(6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = StepNoise::sample(&mut rng, &model, 6, 2);
        let mut g = Graph::new();
        let opts = ForwardOptions { with_loss: false, intervention: Intervention::Identity };
        let out = model.forward(&mut g, &batch, &noise, opts).unwrap();
        let tie = g.value(out.tie.unwrap());
        assert!(tie.iter().all(|&v| v == 0.0));
        for (row, s) in tie.outer_iter().zip(&batch) {
            let p = Prediction::from_logits(row.to_owned());
            assert_eq!(-p.probabilities[s.label as usize].ln(), std::f64::consts::LN_2);
        }
        assert!((g.scalar(out.ce) - std::f64::consts::LN_2).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn counterfactual_mode_shares_the_factual_pass() {
        let (full, prepared) = setup(Mode::DseAC);
        let (mut partial, _) = setup(Mode::DseA);
        // Copy every shared parameter by name.
        for id in partial.store.ids().collect::<Vec<_>>() {
            let name = partial.store.name(id).to_string();
            let src = full.store.find(&name).unwrap();
            partial.store.set(id, full.store.value(src).clone());
        }
        let batch: Vec<&PreparedSample> = prepared.iter().take(6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = StepNoise::sample(&mut rng, &full, 6, 1);
        let (mut g1, mut g2) = (Graph::new(), Graph::new());
        let a = full.forward(&mut g1, &batch, &noise, ForwardOptions::train()).unwrap();
        let b = partial.forward(&mut g2, &batch, &StepNoise { cf: vec![], ..noise }, ForwardOptions::train()).unwrap();
        assert_eq!(g1.value(a.factual), g2.value(b.factual));
    }

    #[test]
    fn baseline_has_no_encoder_parameters() {
        let (model, prepared) = setup(Mode::Baseline);
        assert!(model.dse.is_none());
        assert!(model.store.find("dse.dec.out.w").is_none());
        let batch: Vec<&PreparedSample> = prepared.iter().take(4).collect();
        let p = model.predict(&batch, 0).unwrap();
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn single_pair_batches_are_rejected() {
        let (model, prepared) = setup(Mode::DseA);
        assert!(model.predict(&[&prepared[0]], 0).is_err());
    }
}
