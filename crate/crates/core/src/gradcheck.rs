//! Central finite-difference check of the full training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, Mode};
use crate::error::{DclError, Result};
use crate::fusion::{ForwardOptions, Model, PreparedSample, StepNoise};
use crate::params::ParamStore;
use crate::synthdata::generate_dataset;
use crate::tape::{Gradients, Graph};

pub const EPS: f64 = 1e-5;
/// Differences below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn loss(model: &Model, store: &ParamStore, batch: &[&PreparedSample], noise: &StepNoise) -> Result<f64> {
    let probe = Model { store: store.clone(), ..model.clone() };
    let mut g = Graph::new();
    let out = probe.forward(&mut g, batch, noise, ForwardOptions::train())?;
    Ok(g.scalar(out.loss))
}

/// Checks every trainable entry. `tamper` may edit the analytic gradients
/// before comparison.
pub fn gradcheck(config: &Config, mode: Mode, seed: u64, tamper: Option<&dyn Fn(&mut Gradients)>) -> Result<GradcheckReport> {
    let ds = generate_dataset(config, seed)?;
    let mut model = Model::new(config, mode, ds.frame_dim, ds.audio_dim, ds.precomputed, seed)?;
    let prepared = model.prepare(&ds.train)?;
    let take = config.train.batch.min(prepared.len());
    if take < 2 {
        return Err(DclError::Empty("gradient check needs at least two training pairs".into()));
    }
    let batch: Vec<&PreparedSample> = prepared.iter().take(take).collect();
    model.init_intervention(&batch)?;
    let noise = StepNoise::sample(&mut ChaCha8Rng::seed_from_u64(seed), &model, take, config.model.cf_samples_train);

    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, &noise, ForwardOptions::train())?;
    let base = g.scalar(out.loss);
    let mut grads = g.backward(out.loss);
    if let Some(t) = tamper {
        t(&mut grads);
    }

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
        loss: base,
    };
    let mut store = model.store.clone();
    for id in model.store.ids().filter(|&id| model.store.is_trainable(id)) {
        let (rows, cols) = model.store.value(id).dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| ndarray::Array2::zeros((rows, cols)));
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + EPS;
                let plus = loss(&model, &store, &batch, &noise)?;
                store.value_mut(id)[[r, c]] = orig - EPS;
                let minus = loss(&model, &store, &batch, &noise)?;
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * EPS);
                let err = relative_error(analytic[[r, c]], numeric);
                report.n_checked += 1;
                if err > report.max_rel_error || report.worst_param.is_empty() {
                    report.max_rel_error = err;
                    report.worst_param = model.store.name(id).to_string();
                    report.worst_index = (r, c);
                    report.analytic = analytic[[r, c]];
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
