//! Per-modality encoders mapping raw clips and question ids into `d`-wide
//! feature spaces.
//!
//! The video encoder is a time-distributed `tanh(x W + b)` applied to every
//! frame. It is kept frozen at its seeded initialisation (a fixed backbone):
//! its output is also the reconstruction target of the sequential VAE, and a
//! trainable target would let the reconstruction term collapse it. The audio
//! map and question table are trained end-to-end.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{DclError, Result};
use crate::params::{init_normal, init_weight, ParamId, ParamStore};
use crate::synthdata::RawClip;
use crate::tape::{Graph, Var};

/// `T x d` frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Self {
        FeatureSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Audio and question features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub audio: Array1<f64>,
    pub text: Array1<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoders {
    pub video_w: ParamId,
    pub video_b: ParamId,
    pub audio_w: ParamId,
    pub audio_b: ParamId,
    pub question_table: ParamId,
}

impl Encoders {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, d_raw: usize, d: usize, n_questions: usize) -> Self {
        // Unit-variance rows so tanh sees inputs of order one.
        let video_w = store.add("enc.video.w", init_normal(rng, d_raw, d, (1.0 / d_raw as f64).sqrt()), false);
        let video_b = store.add("enc.video.b", init_normal(rng, 1, d, 0.1), false);
        let audio_w = store.add("enc.audio.w", init_weight(rng, d_raw, d), true);
        let audio_b = store.add("enc.audio.b", Array2::zeros((1, d)), true);
        let question_table = store.add("enc.question", init_normal(rng, n_questions.max(1), d, 1.0), true);
        Encoders {
            video_w,
            video_b,
            audio_w,
            audio_b,
            question_table,
        }
    }

    pub fn encode_video(&self, store: &ParamStore, clip: &RawClip) -> Result<FeatureSequence> {
        encode_video(&clip.frames.mapv(f64::from), store.value(self.video_w), store.value(self.video_b))
    }

    pub fn encode_audio(&self, store: &ParamStore, audio: &Array1<f32>) -> Result<Array1<f64>> {
        encode_audio(&audio.mapv(f64::from), store.value(self.audio_w), store.value(self.audio_b))
    }

    pub fn encode_question(&self, store: &ParamStore, question_id: usize) -> Result<Array1<f64>> {
        encode_question(question_id, store.value(self.question_table))
    }

    /// Audio rows (`n x d_raw`) through the trainable map.
    pub fn audio_graph(&self, g: &mut Graph, store: &ParamStore, audio: Array2<f64>) -> Var {
        let x = g.input(audio);
        let w = g.param(store, self.audio_w);
        let b = g.param(store, self.audio_b);
        let h = g.affine(x, w, b);
        g.tanh(h)
    }

    pub fn question_graph(&self, g: &mut Graph, store: &ParamStore, ids: Vec<usize>) -> Result<Var> {
        let n = store.value(self.question_table).nrows();
        if let Some(&bad) = ids.iter().find(|&&q| q >= n) {
            return Err(DclError::Lookup(format!("question id {bad} outside table of {n}")));
        }
        let table = g.param(store, self.question_table);
        Ok(g.gather_rows(table, ids))
    }
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(DclError::Numeric {
                step: i,
                what: format!("{what} input is not finite"),
            });
        }
    }
    Ok(())
}

/// Time-distributed `tanh(frame W + b)`.
pub fn encode_video(frames: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<FeatureSequence> {
    if frames.ncols() != w.nrows() {
        return Err(DclError::Shape(format!(
            "video frames have width {}, encoder expects {}",
            frames.ncols(),
            w.nrows()
        )));
    }
    for (t, row) in frames.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DclError::Numeric {
                step: t,
                what: "video frame is not finite".into(),
            });
        }
    }
    Ok(FeatureSequence::new((frames.dot(w) + b).mapv(f64::tanh)))
}

pub fn encode_audio(audio: &Array1<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if audio.len() != w.nrows() {
        return Err(DclError::Shape(format!("audio has {} dims, encoder expects {}", audio.len(), w.nrows())));
    }
    check_finite(audio, "audio")?;
    Ok((audio.dot(w) + b.row(0)).mapv(f64::tanh))
}

pub fn encode_question(question_id: usize, table: &Array2<f64>) -> Result<Array1<f64>> {
    if question_id >= table.nrows() {
        return Err(DclError::Lookup(format!(
            "question id {question_id} outside table of {}",
            table.nrows()
        )));
    }
    Ok(table.index_axis(Axis(0), question_id).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::synthdata::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Encoders) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoders::init(&mut store, &mut rng, 32, 256, 12);
        (store, enc)
    }

    #[test]
    fn zero_frames_with_zero_bias_give_tanh_of_zero() {
        let w = Array2::from_elem((4, 3), 0.7);
        let b = Array2::zeros((1, 3));
        let out = encode_video(&Array2::zeros((5, 4)), &w, &b).unwrap();
        assert!(out.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_permutation_is_equivariant() {
        let (store, enc) = setup();
        let ds = generate_dataset(&small_config(), 2).unwrap();
        let clip = &ds.train.samples[0].clip1;
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let shuffled = RawClip {
            frames: clip.frames.select(Axis(0), &perm),
            ..clip.clone()
        };
        let a = enc.encode_video(&store, clip).unwrap();
        let b = enc.encode_video(&store, &shuffled).unwrap();
        assert_eq!(a.frames.select(Axis(0), &perm), b.frames);
        assert_eq!(a.frames.dim(), (8, 256));
    }

    #[test]
    fn non_finite_frame_reports_step() {
        let mut f = Array2::zeros((3, 2));
        f[[2, 1]] = f64::NAN;
        let err = encode_video(&f, &Array2::zeros((2, 2)), &Array2::zeros((1, 2))).unwrap_err();
        assert!(matches!(err, DclError::Numeric { step: 2, .. }));
    }

    #[test]
    fn question_lookup() {
        let (store, enc) = setup();
        let a = enc.encode_question(&store, 4).unwrap();
        let b = enc.encode_question(&store, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!(matches!(enc.encode_question(&store, 12), Err(DclError::Lookup(_))));
    }

    #[test]
    fn audio_dimension() {
        let (store, enc) = setup();
        let a = enc.encode_audio(&store, &Array1::from_elem(32, 0.3f32)).unwrap();
        assert_eq!(a.len(), 256);
        assert!(enc.encode_audio(&store, &Array1::from_elem(31, 0.3f32)).is_err());
    }

    #[test]
    fn graph_paths_agree_with_plain_functions() {
        let (store, enc) = setup();
        let audio = Array2::from_shape_fn((2, 32), |(i, j)| (i as f64 - j as f64) * 0.05);
        let mut g = Graph::new();
        let a = enc.audio_graph(&mut g, &store, audio.clone());
        let q = enc.question_graph(&mut g, &store, vec![1, 5]).unwrap();
        let plain = encode_audio(&audio.row(1).to_owned(), store.value(enc.audio_w), store.value(enc.audio_b)).unwrap();
        assert!(g.value(a).row(1).iter().zip(&plain).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(g.value(q).row(1), enc.encode_question(&store, 5).unwrap());
        assert!(enc.question_graph(&mut g, &store, vec![99]).is_err());
    }

    fn small_config() -> Config {
        let mut c = Config::default();
        c.data.train_pairs = 8;
        c.data.val_pairs = 4;
        c.data.test_pairs = 4;
        c
    }
}
