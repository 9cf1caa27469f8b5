//! Training loop, evaluation and linear probes.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Mode};
use crate::dse::LossBreakdown;
use crate::error::{DclError, Result};
use crate::fusion::{ForwardOptions, Model, PreparedSample, StepNoise};
use crate::params::Adam;
use crate::synthdata::{derive_seed, DatasetSplit, QuestionTarget, SplitName};
use crate::tape::Graph;

const STREAM_MODEL: u64 = 0;
const STREAM_STEP: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EVAL: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
    pub val_accuracy_material: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn epoch(&self, e: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_all: f64,
    /// `None` when the split has no material questions.
    pub accuracy_material: Option<f64>,
    /// Material probe accuracy from static factors (encoder modes only).
    pub probe_static: Option<f64>,
    pub probe_dynamic: Option<f64>,
    pub n_samples: usize,
}

/// Splits `order` into chunks of `size`; a trailing single sample joins the
/// previous chunk so every chunk has at least two pairs.
pub fn chunk_indices(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = order.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let last = chunks.pop().expect("len > 1");
        chunks.last_mut().expect("len > 1").extend(last);
    }
    chunks
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.recon += p.recon / n;
        m.kl_s += p.kl_s / n;
        m.kl_z += p.kl_z / n;
        m.mi_z_x += p.mi_z_x / n;
        m.mi_s_x += p.mi_s_x / n;
        m.mi_z_s += p.mi_z_s / n;
        m.ce += p.ce / n;
        m.total += p.total / n;
    }
    m
}

/// Builds a model for `ds` with weights seeded from `config.train.seed`.
pub fn build_model(ds: &DatasetSplit, config: &Config, mode: Mode) -> Result<Model> {
    Model::new(
        config,
        mode,
        ds.frame_dim,
        ds.audio_dim,
        ds.precomputed,
        derive_seed(config.train.seed, &[STREAM_MODEL]),
    )
}

/// Trains with Adam, keeping the parameters of the best validation epoch.
/// `on_epoch` sees every record as soon as it exists.
pub fn fit(ds: &DatasetSplit, config: &Config, mode: Mode, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<(Model, History)> {
    config.validate()?;
    if ds.train.len() < 2 {
        return Err(DclError::Empty(format!("training split has {} samples", ds.train.len())));
    }
    let mut model = build_model(ds, config, mode)?;
    let train = model.prepare(&ds.train)?;
    let val = model.prepare(&ds.val)?;
    let tc = &config.train;
    let seed = tc.seed;

    let natural: Vec<usize> = (0..train.len()).collect();
    let first: Vec<&PreparedSample> = chunk_indices(&natural, tc.batch)[0].iter().map(|&i| &train[i]).collect();
    model.init_intervention(&first)?;

    let mut history = History::default();
    let step_noise = |model: &Model, epoch: usize, b: usize, pairs: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_STEP, epoch as u64, b as u64]));
        StepNoise::sample(&mut rng, model, pairs, config.model.cf_samples_train)
    };
    let divergence = |epoch: usize, batch: usize, e: DclError| match e {
        DclError::Numeric { what, .. } => DclError::Divergence { epoch, batch, what },
        other => other,
    };

    // Epoch 0: the objective at initialisation, no updates.
    let mut parts = Vec::new();
    for (b, chunk) in chunk_indices(&natural, tc.batch).iter().enumerate() {
        let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
        let noise = step_noise(&model, 0, b, batch.len());
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, &noise, ForwardOptions::train()).map_err(|e| divergence(0, b, e))?;
        parts.push(out.breakdown);
    }
    let (va, vm) = accuracy(&model, &val)?;
    let rec = EpochRecord { epoch: 0, losses: mean_breakdown(&parts), val_accuracy: va, val_accuracy_material: vm.unwrap_or(f64::NAN) };
    on_epoch(&rec);
    history.records.push(rec);

    let mut best = (va, model.store.clone());
    let mut since_best = 0;
    let mut adam = Adam::new(tc.lr);
    for epoch in 1..=tc.epochs {
        let mut order = natural.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut parts = Vec::new();
        for (b, chunk) in chunk_indices(&order, tc.batch).iter().enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let noise = step_noise(&model, epoch, b, batch.len());
            let mut g = Graph::new();
            let out = model
                .forward(&mut g, &batch, &noise, ForwardOptions::train())
                .map_err(|e| divergence(epoch, b, e))?;
            let grads = g.backward(out.loss);
            if grads.iter().any(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
                return Err(DclError::Divergence { epoch, batch: b, what: "non-finite gradient".into() });
            }
            adam.step(&mut model.store, &grads);
            parts.push(out.breakdown);
        }
        let (va, vm) = accuracy(&model, &val)?;
        let rec = EpochRecord { epoch, losses: mean_breakdown(&parts), val_accuracy: va, val_accuracy_material: vm.unwrap_or(f64::NAN) };
        on_epoch(&rec);
        history.records.push(rec);
        if va > best.0 {
            best = (va, model.store.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    model.store = best.1;
    Ok((model, history))
}

/// Predicted answers in sample order. Chunks are evaluated in parallel, each
/// with its own fixed counterfactual seed.
pub fn predict_all(model: &Model, samples: &[PreparedSample]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(DclError::Empty("evaluation split is empty".into()));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let chunks = chunk_indices(&order, model.config.train.batch);
    if chunks[0].len() < 2 {
        return Err(DclError::Empty("evaluation needs at least two samples".into()));
    }
    let per_chunk: Vec<Vec<u8>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, chunk)| {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let preds = model.predict(&batch, derive_seed(model.config.train.seed, &[STREAM_EVAL, c as u64]))?;
            Ok(preds.iter().map(|p| p.answer()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// `(overall, material-question)` accuracy.
pub fn accuracy(model: &Model, samples: &[PreparedSample]) -> Result<(f64, Option<f64>)> {
    let answers = predict_all(model, samples)?;
    let correct: Vec<bool> = answers.iter().zip(samples).map(|(&a, s)| a == s.label).collect();
    let all = correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
    let mat: Vec<bool> = correct
        .iter()
        .zip(samples)
        .filter(|(_, s)| s.target == QuestionTarget::Material)
        .map(|(&c, _)| c)
        .collect();
    let material = (!mat.is_empty()).then(|| mat.iter().filter(|&&c| c).count() as f64 / mat.len() as f64);
    Ok((all, material))
}

/// Posterior-mean static and pooled dynamic factors of every clip, in the
/// order clip 1 then clip 2 of each sample. `None` without an encoder.
pub fn latent_factors(model: &Model, samples: &[PreparedSample]) -> Result<Option<(Array2<f64>, Array2<f64>, Vec<u32>)>> {
    let Some(dse) = model.dse else {
        return Ok(None);
    };
    let order: Vec<usize> = (0..samples.len()).collect();
    let chunks = chunk_indices(&order, model.config.train.batch);
    let per_chunk: Vec<(Array2<f64>, Array2<f64>, Vec<u32>)> = chunks
        .par_iter()
        .map(|chunk| {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let n = batch.len();
            let noise = StepNoise {
                dse: Some(crate::dse::DseNoise::zeros(2 * n, model.config.data.t, dse.d_s, dse.d_z)),
                cf: Vec::new(),
            };
            let mut g = Graph::new();
            let latents = dse_only(model, &mut g, &batch, &noise)?;
            // Reorder from [all clip 1 | all clip 2] to per-sample pairs.
            let idx: Vec<usize> = (0..n).flat_map(|i| [i, i + n]).collect();
            let s = latents.0.select(Axis(0), &idx);
            let z = latents.1.select(Axis(0), &idx);
            let objects = batch.iter().flat_map(|b| b.objects).collect();
            Ok((s, z, objects))
        })
        .collect::<Result<_>>()?;
    let s_views: Vec<_> = per_chunk.iter().map(|c| c.0.view()).collect();
    let z_views: Vec<_> = per_chunk.iter().map(|c| c.1.view()).collect();
    let s = ndarray::concatenate(Axis(0), &s_views).expect("equal widths");
    let z = ndarray::concatenate(Axis(0), &z_views).expect("equal widths");
    let objects = per_chunk.into_iter().flat_map(|c| c.2).collect();
    Ok(Some((s, z, objects)))
}

fn dse_only(model: &Model, g: &mut Graph, batch: &[&PreparedSample], noise: &StepNoise) -> Result<(Array2<f64>, Array2<f64>)> {
    let dse = model.dse.expect("checked by caller");
    let m = &model.config.model;
    let n = batch.len();
    let clips: Vec<&crate::encoders::FeatureSequence> = (0..2 * n).map(|i| &batch[i % n].video[i / n]).collect();
    let out = dse.forward(
        g,
        &model.store,
        &crate::dse::SeqBatch::from_sequences(&clips),
        noise.dse.as_ref().expect("encoder noise"),
        crate::dse::DseWeights::zero(),
        m.blur_width,
        m.tau_nce,
        m.n_max,
        false,
    )?;
    Ok((g.value(out.s).clone(), g.value(out.z_pooled).clone()))
}

/// Multinomial logistic regression on standardised features, trained by
/// full-batch gradient descent. Returns test accuracy.
pub fn linear_probe(train_x: &Array2<f64>, train_y: &[usize], test_x: &Array2<f64>, test_y: &[usize], classes: usize, iters: usize, lr: f64, l2: f64) -> Result<f64> {
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(DclError::Empty("probe needs train and test rows".into()));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |x: &Array2<f64>| (x - &mean) / &std;
    let (xtr, xte) = (norm(train_x), norm(test_x));
    let n = xtr.nrows() as f64;
    let mut w = Array2::<f64>::zeros((xtr.ncols(), classes));
    let mut b = Array1::<f64>::zeros(classes);
    let onehot = Array2::from_shape_fn((xtr.nrows(), classes), |(i, c)| if train_y[i] == c { 1.0 } else { 0.0 });
    let softmax = |logits: Array2<f64>| {
        let mut p = logits;
        for mut row in p.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        p
    };
    for _ in 0..iters {
        let p = softmax(xtr.dot(&w) + &b);
        let err = (p - &onehot) / n;
        let gw = xtr.t().dot(&err) + &w * l2;
        let gb = err.sum_axis(Axis(0));
        w -= &(gw * lr);
        b -= &(gb * lr);
    }
    let pred = xte.dot(&w) + &b;
    let correct = pred
        .outer_iter()
        .zip(test_y)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// `(static, dynamic)` material probe accuracies: trained on train-split
/// clips, reported on `target` clips.
pub fn material_probes(model: &Model, ds: &DatasetSplit, train: &[PreparedSample], target: &[PreparedSample]) -> Result<Option<(f64, f64)>> {
    if ds.objects.is_empty() {
        return Ok(None);
    }
    let (Some(tr), Some(te)) = (latent_factors(model, train)?, latent_factors(model, target)?) else {
        return Ok(None);
    };
    let labels = |objs: &[u32]| -> Result<Vec<usize>> {
        objs.iter()
            .map(|&o| ds.object(o).map(|s| s.material).ok_or_else(|| DclError::Lookup(format!("object {o} not in dataset"))))
            .collect()
    };
    let (ytr, yte) = (labels(&tr.2)?, labels(&te.2)?);
    let classes = ds.objects.iter().map(|o| o.material).max().map_or(1, |m| m + 1);
    let tc = &model.config.train;
    let ps = linear_probe(&tr.0, &ytr, &te.0, &yte, classes, tc.probe_iters, tc.probe_lr, tc.probe_l2)?;
    let pd = linear_probe(&tr.1, &ytr, &te.1, &yte, classes, tc.probe_iters, tc.probe_lr, tc.probe_l2)?;
    Ok(Some((ps, pd)))
}

/// Accuracy on `split` plus probes trained on the train split.
pub fn evaluate(model: &Model, ds: &DatasetSplit, split: SplitName) -> Result<Metrics> {
    let target = model.prepare(ds.split(split))?;
    let (all, material) = accuracy(model, &target)?;
    let train = model.prepare(&ds.train)?;
    let probes = material_probes(model, ds, &train, &target)?;
    Ok(Metrics {
        accuracy_all: all,
        accuracy_material: material,
        probe_static: probes.map(|p| p.0),
        probe_dynamic: probes.map(|p| p.1),
        n_samples: target.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    #[test]
    fn chunking_never_leaves_a_single_pair() {
        let order: Vec<usize> = (0..9).collect();
        let c = chunk_indices(&order, 4);
        assert_eq!(c, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
        let c = chunk_indices(&order[..6], 4);
        assert_eq!(c.len(), 2);
        assert_eq!(c.iter().map(Vec::len).sum::<usize>(), 6);
    }

    #[test]
    fn probe_separates_separable_classes() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| if j == 0 { (i % 2) as f64 * 4.0 - 2.0 } else { (i as f64 * 0.37).sin() });
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let acc = linear_probe(&x, &y, &x, &y, 2, 200, 0.5, 1e-3).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn tiny_fit_is_deterministic() {
        let cfg = Config::tiny();
        let ds = generate_dataset(&cfg, 3).unwrap();
        let (m1, h1) = fit(&ds, &cfg, Mode::DseAC, &mut |_| {}).unwrap();
        let (m2, h2) = fit(&ds, &cfg, Mode::DseAC, &mut |_| {}).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.records[0].epoch, 0);
        let e1 = evaluate(&m1, &ds, SplitName::Test).unwrap();
        assert_eq!(e1, evaluate(&m2, &ds, SplitName::Test).unwrap());
        for p in [e1.probe_static.unwrap(), e1.probe_dynamic.unwrap(), e1.accuracy_all] {
            assert!((0.0..=1.0).contains(&p));
        }
    }
}
