//! Synthetic paired-object audiovisual QA data.
//!
//! Each object has a material (carried by a time-constant appearance code and
//! an audio timbre) and an independently drawn motion type. A clip renders the
//! appearance plus a point travelling around a circle in a 2-D subspace; the
//! motion type only decides the *order* in which the circle's `T` evenly spaced
//! phases are visited. Any per-frame feature averaged over time is therefore
//! blind to motion, while a sequence model can read it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob;
use crate::config::{Config, DataConfig};
use crate::error::{DclError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_NAME: &str = "dcl-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionTarget {
    Material,
    Motion,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub object_id: u32,
    pub material: usize,
    pub motion_type: usize,
    pub appearance_code: Array1<f32>,
    pub timbre_code: Array1<f32>,
}

/// A question template: ranks over materials and motions. The answer is the
/// object with the larger score; mixed templates add the two ranks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: usize,
    pub target: QuestionTarget,
    pub material_rank: Vec<u32>,
    pub motion_rank: Vec<u32>,
}

impl QuestionTemplate {
    pub fn score(&self, material: usize, motion: usize) -> u32 {
        match self.target {
            QuestionTarget::Material => self.material_rank[material],
            QuestionTarget::Motion => self.motion_rank[motion],
            QuestionTarget::Mixed => self.material_rank[material] + self.motion_rank[motion],
        }
    }

    /// 0 when `a` is the answer, 1 when `b` is, `None` on a tie.
    pub fn answer(&self, a: &ObjectSpec, b: &ObjectSpec) -> Option<u8> {
        let (sa, sb) = (self.score(a.material, a.motion_type), self.score(b.material, b.motion_type));
        match sa.cmp(&sb) {
            std::cmp::Ordering::Greater => Some(0),
            std::cmp::Ordering::Less => Some(1),
            std::cmp::Ordering::Equal => None,
        }
    }
}

/// One rendered clip. For synthetic data `frames` is `T x d_raw`; for
/// ingested feature dumps it already holds `T x d` encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub frames: Array2<f32>,
    pub audio: Array1<f32>,
    pub object_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QASample {
    pub clip1: RawClip,
    pub clip2: RawClip,
    pub question_id: usize,
    pub question_target: QuestionTarget,
    /// 0 selects `clip1`, 1 selects `clip2`.
    pub label: u8,
    /// Precomputed question feature (ingested data only).
    pub text: Option<Array1<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<QASample>,
    pub object_ids: BTreeSet<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.label as f64).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = DclError;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| DclError::Config(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

/// Train/val/test splits plus the object and template tables they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Indexed by `object_id`. Empty for ingested feature dumps.
    pub objects: Vec<ObjectSpec>,
    pub templates: Vec<QuestionTemplate>,
    pub t: usize,
    /// Width of `RawClip::frames` rows.
    pub frame_dim: usize,
    pub audio_dim: usize,
    /// True when clips hold encoder features and the encoders must be skipped.
    pub precomputed: bool,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn split_mut(&mut self, name: SplitName) -> &mut Split {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn object(&self, id: u32) -> Option<&ObjectSpec> {
        self.objects.get(id as usize).filter(|o| o.object_id == id)
    }

    pub fn n_questions(&self) -> usize {
        self.templates.len()
    }

    /// SHA-256 over the serialised container.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in self.encode_files() {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }

    fn encode_files(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let manifest = Manifest::from_dataset(self);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
        files.push((MANIFEST.to_string(), json));
        if !self.objects.is_empty() {
            let n = self.objects.len();
            let w = self.objects[0].appearance_code.len();
            let mut appearance = Array2::<f32>::zeros((n, w));
            let mut timbre = Array2::<f32>::zeros((n, self.objects[0].timbre_code.len()));
            for (i, o) in self.objects.iter().enumerate() {
                appearance.row_mut(i).assign(&o.appearance_code);
                timbre.row_mut(i).assign(&o.timbre_code);
            }
            files.push(("objects_appearance.bin".into(), blob::encode(&appearance.into_dyn())));
            files.push(("objects_timbre.bin".into(), blob::encode(&timbre.into_dyn())));
        }
        for name in SplitName::ALL {
            let split = self.split(name);
            let n = split.len();
            let mut frames = Array4::<f32>::zeros((n, 2, self.t, self.frame_dim));
            let mut audio = Array3::<f32>::zeros((n, 2, self.audio_dim));
            for (i, smp) in split.samples.iter().enumerate() {
                for (c, clip) in [&smp.clip1, &smp.clip2].into_iter().enumerate() {
                    frames.slice_mut(s![i, c, .., ..]).assign(&clip.frames);
                    audio.slice_mut(s![i, c, ..]).assign(&clip.audio);
                }
            }
            files.push((format!("{}_frames.bin", name.as_str()), blob::encode(&frames.into_dyn())));
            files.push((format!("{}_audio.bin", name.as_str()), blob::encode(&audio.into_dyn())));
            if self.precomputed {
                let w = split.samples.first().and_then(|s| s.text.as_ref()).map_or(0, |t| t.len());
                let mut text = Array2::<f32>::zeros((n, w));
                for (i, smp) in split.samples.iter().enumerate() {
                    if let Some(t) = &smp.text {
                        text.row_mut(i).assign(t);
                    }
                }
                files.push((format!("{}_text.bin", name.as_str()), blob::encode(&text.into_dyn())));
            }
        }
        files
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    t: usize,
    frame_dim: usize,
    audio_dim: usize,
    precomputed: bool,
    counts: SplitCounts,
    objects: Vec<ObjectMeta>,
    templates: Vec<QuestionTemplate>,
    splits: SplitsMeta,
}

#[derive(Serialize, Deserialize)]
struct SplitCounts {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct ObjectMeta {
    object_id: u32,
    material: usize,
    motion_type: usize,
}

#[derive(Serialize, Deserialize)]
struct SplitsMeta {
    train: SplitMeta,
    val: SplitMeta,
    test: SplitMeta,
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    object_ids: Vec<u32>,
    samples: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    object1: u32,
    object2: u32,
    question_id: usize,
    question_target: QuestionTarget,
    label: u8,
}

impl Manifest {
    fn from_dataset(ds: &DatasetSplit) -> Self {
        let meta = |s: &Split| SplitMeta {
            object_ids: s.object_ids.iter().copied().collect(),
            samples: s
                .samples
                .iter()
                .map(|q| SampleMeta {
                    object1: q.clip1.object_id,
                    object2: q.clip2.object_id,
                    question_id: q.question_id,
                    question_target: q.question_target,
                    label: q.label,
                })
                .collect(),
        };
        Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            seed: ds.seed,
            t: ds.t,
            frame_dim: ds.frame_dim,
            audio_dim: ds.audio_dim,
            precomputed: ds.precomputed,
            counts: SplitCounts {
                train: ds.train.len(),
                val: ds.val.len(),
                test: ds.test.len(),
            },
            objects: ds
                .objects
                .iter()
                .map(|o| ObjectMeta {
                    object_id: o.object_id,
                    material: o.material,
                    motion_type: o.motion_type,
                })
                .collect(),
            templates: ds.templates.clone(),
            splits: SplitsMeta {
                train: meta(&ds.train),
                val: meta(&ds.val),
                test: meta(&ds.test),
            },
        }
    }
}

/// Mixes a seed with stream identifiers (splitmix64 finaliser).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Order in which motion type `motion` visits the `t` circle phases.
pub fn phase_schedule(motion: usize, t: usize) -> Vec<usize> {
    match motion {
        0 => (0..t).collect(),
        1 => (0..t).rev().collect(),
        2 => {
            let stride = (2..t.max(3))
                .find(|&s| gcd(s, t) == 1 && s != t - 1)
                .unwrap_or(1);
            (0..t).map(|i| (i * stride) % t).collect()
        }
        3 => {
            // Even phases forward, then odd phases back.
            let mut v: Vec<usize> = (0..t).step_by(2).collect();
            v.extend((1..t).step_by(2).rev());
            v
        }
        k => {
            let mut v: Vec<usize> = (0..t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x6d6f_7469_6f6e, &[k as u64, t as u64]));
            v.shuffle(&mut rng);
            v
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// World constants shared by every clip of one dataset.
struct World {
    appearance_proto: Array2<f64>,
    timbre_proto: Array2<f64>,
    /// `d_raw x 2` orthonormal basis of the motion plane.
    motion_basis: Array2<f64>,
}

impl World {
    fn new(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Self {
        let appearance_proto = gaussian_matrix(rng, cfg.n_materials, cfg.d_raw, cfg.prototype_scale);
        let timbre_proto = gaussian_matrix(rng, cfg.n_materials, cfg.d_raw, cfg.prototype_scale);
        let mut basis = gaussian_matrix(rng, cfg.d_raw, 2, 1.0);
        // Gram-Schmidt on the two columns.
        let n0 = basis.column(0).dot(&basis.column(0)).sqrt();
        basis.column_mut(0).mapv_inplace(|v| v / n0);
        let proj = basis.column(0).dot(&basis.column(1));
        let c0 = basis.column(0).to_owned();
        basis.column_mut(1).scaled_add(-proj, &c0);
        let n1 = basis.column(1).dot(&basis.column(1)).sqrt();
        basis.column_mut(1).mapv_inplace(|v| v / n1);
        World {
            appearance_proto,
            timbre_proto,
            motion_basis: basis,
        }
    }
}

fn render_clip(cfg: &DataConfig, world: &World, obj: &ObjectSpec, seed: u64) -> RawClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.t;
    let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let schedule = phase_schedule(obj.motion_type, t);
    let centre = std::f64::consts::TAU * obj.motion_type as f64 / cfg.n_motions as f64;
    let (csin, ccos) = centre.sin_cos();
    let mut frames = Array2::<f32>::zeros((t, cfg.d_raw));
    for (step, &slot) in schedule.iter().enumerate() {
        let theta = phase0 + std::f64::consts::TAU * slot as f64 / t as f64;
        let (sin, cos) = theta.sin_cos();
        for j in 0..cfg.d_raw {
            let motion = cfg.motion_amplitude * (world.motion_basis[[j, 0]] * cos + world.motion_basis[[j, 1]] * sin)
                + cfg.motion_offset * (world.motion_basis[[j, 0]] * ccos + world.motion_basis[[j, 1]] * csin);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.frame_noise;
            frames[[step, j]] = (obj.appearance_code[j] as f64 + motion + noise) as f32;
        }
    }
    let audio = Array1::from_shape_fn(cfg.d_raw, |j| {
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.audio_noise;
        (obj.timbre_code[j] as f64 + noise) as f32
    });
    RawClip {
        frames,
        audio,
        object_id: obj.object_id,
    }
}

fn make_templates(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Vec<QuestionTemplate> {
    (0..cfg.n_questions)
        .map(|id| {
            let target = match id % 3 {
                0 => QuestionTarget::Material,
                1 => QuestionTarget::Motion,
                _ => QuestionTarget::Mixed,
            };
            let mut material_rank: Vec<u32> = (0..cfg.n_materials as u32).collect();
            material_rank.shuffle(rng);
            let mut motion_rank: Vec<u32> = (0..cfg.n_motions as u32).collect();
            motion_rank.shuffle(rng);
            QuestionTemplate {
                id,
                target,
                material_rank,
                motion_rank,
            }
        })
        .collect()
}

/// Draws objects with material and motion from independent uniform distributions.
pub fn sample_objects(cfg: &DataConfig, n: usize, rng: &mut ChaCha8Rng, appearance_proto: &Array2<f64>, timbre_proto: &Array2<f64>) -> Vec<ObjectSpec> {
    (0..n)
        .map(|i| {
            let material = rng.random_range(0..cfg.n_materials);
            let motion_type = rng.random_range(0..cfg.n_motions);
            let appearance_code = Array1::from_shape_fn(cfg.d_raw, |j| {
                let jitter: f64 = rng.random_range(-cfg.appearance_jitter..=cfg.appearance_jitter);
                (appearance_proto[[material, j]] + jitter) as f32
            });
            let timbre_code = timbre_proto.row(material).mapv(|v| v as f32);
            ObjectSpec {
                object_id: i as u32,
                material,
                motion_type,
                appearance_code,
                timbre_code,
            }
        })
        .collect()
}

/// Generates the three splits. Test objects never appear in train or val.
pub fn generate_dataset(config: &Config, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    let cfg = &config.data;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(cfg, &mut rng);
    let templates = make_templates(cfg, &mut rng);
    let n_obj = cfg.train_objects + cfg.val_objects + cfg.test_objects;
    let objects = sample_objects(cfg, n_obj, &mut rng, &world.appearance_proto, &world.timbre_proto);

    let ranges = [
        (SplitName::Train, 0..cfg.train_objects, cfg.train_pairs),
        (SplitName::Val, cfg.train_objects..cfg.train_objects + cfg.val_objects, cfg.val_pairs),
        (SplitName::Test, cfg.train_objects + cfg.val_objects..n_obj, cfg.test_pairs),
    ];

    let mut ds = DatasetSplit {
        train: Split::default(),
        val: Split::default(),
        test: Split::default(),
        objects,
        templates,
        t: cfg.t,
        frame_dim: cfg.d_raw,
        audio_dim: cfg.d_raw,
        precomputed: false,
        seed,
    };

    for (tag, (name, range, n_pairs)) in ranges.into_iter().enumerate() {
        let ids: Vec<u32> = range.map(|i| i as u32).collect();
        let mut valid = Vec::new();
        for (a_pos, &a) in ids.iter().enumerate() {
            for &b in &ids[a_pos + 1..] {
                for q in &ds.templates {
                    if q.answer(&ds.objects[a as usize], &ds.objects[b as usize]).is_some() {
                        valid.push((a, b, q.id));
                    }
                }
            }
        }
        if n_pairs > valid.len() {
            return Err(DclError::Config(format!(
                "{} split requests {} pairs but only {} distinct non-tied (object pair, question) combinations exist",
                name.as_str(),
                n_pairs,
                valid.len()
            )));
        }
        let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, tag as u64]));
        let picks = index::sample(&mut split_rng, valid.len(), n_pairs).into_vec();

        // Orient each pair so labels alternate; the result is exactly balanced
        // (within one for odd counts).
        let specs: Vec<(u32, u32, usize, u8)> = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let (a, b, q) = valid[p];
                let want = (i % 2) as u8;
                let ans = ds.templates[q]
                    .answer(&ds.objects[a as usize], &ds.objects[b as usize])
                    .expect("ties filtered");
                if ans == want {
                    (a, b, q, want)
                } else {
                    (b, a, q, want)
                }
            })
            .collect();

        let samples: Vec<QASample> = specs
            .par_iter()
            .enumerate()
            .map(|(i, &(a, b, q, label))| {
                let base = derive_seed(seed, &[2, tag as u64, i as u64]);
                QASample {
                    clip1: render_clip(cfg, &world, &ds.objects[a as usize], derive_seed(base, &[0])),
                    clip2: render_clip(cfg, &world, &ds.objects[b as usize], derive_seed(base, &[1])),
                    question_id: q,
                    question_target: ds.templates[q].target,
                    label,
                    text: None,
                }
            })
            .collect();

        let split = ds.split_mut(name);
        split.object_ids = ids.into_iter().collect();
        split.samples = samples;
    }
    Ok(ds)
}

pub fn write_dataset(ds: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DclError::io(dir, e))?;
    for (name, bytes) in ds.encode_files() {
        let p = dir.join(&name);
        std::fs::write(&p, bytes).map_err(|e| DclError::io(&p, e))?;
    }
    Ok(())
}

fn blob_f32(dir: &Path, name: &str, shape: &[usize]) -> Result<ArrayD<f32>> {
    let p = dir.join(name);
    let a = blob::read(&p)?;
    if a.shape() != shape {
        return Err(DclError::Corrupt {
            path: p,
            msg: format!("shape {:?} disagrees with manifest {:?}", a.shape(), shape),
        });
    }
    Ok(a)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read(&mpath).map_err(|e| DclError::io(&mpath, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| DclError::json(&mpath, e))?;
    if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
        return Err(DclError::Format {
            path: mpath,
            msg: format!("expected {FORMAT_NAME} v{FORMAT_VERSION}, found {} v{}", m.format, m.version),
        });
    }

    let mut objects = Vec::with_capacity(m.objects.len());
    if !m.objects.is_empty() {
        let n = m.objects.len();
        let app = blob_f32(dir, "objects_appearance.bin", &[n, m.frame_dim])?;
        let tim = blob_f32(dir, "objects_timbre.bin", &[n, m.audio_dim])?;
        let app = app.into_dimensionality::<ndarray::Ix2>().expect("rank checked");
        let tim = tim.into_dimensionality::<ndarray::Ix2>().expect("rank checked");
        for (i, o) in m.objects.iter().enumerate() {
            objects.push(ObjectSpec {
                object_id: o.object_id,
                material: o.material,
                motion_type: o.motion_type,
                appearance_code: app.row(i).to_owned(),
                timbre_code: tim.row(i).to_owned(),
            });
        }
    }

    let mut ds = DatasetSplit {
        train: Split::default(),
        val: Split::default(),
        test: Split::default(),
        objects,
        templates: m.templates,
        t: m.t,
        frame_dim: m.frame_dim,
        audio_dim: m.audio_dim,
        precomputed: m.precomputed,
        seed: m.seed,
    };

    for (name, meta) in [
        (SplitName::Train, m.splits.train),
        (SplitName::Val, m.splits.val),
        (SplitName::Test, m.splits.test),
    ] {
        let n = meta.samples.len();
        let frames = blob_f32(dir, &format!("{}_frames.bin", name.as_str()), &[n, 2, ds.t, ds.frame_dim])?;
        let audio = blob_f32(dir, &format!("{}_audio.bin", name.as_str()), &[n, 2, ds.audio_dim])?;
        let frames = frames.into_dimensionality::<ndarray::Ix4>().expect("rank checked");
        let audio = audio.into_dimensionality::<ndarray::Ix3>().expect("rank checked");
        let text = if ds.precomputed {
            let p = dir.join(format!("{}_text.bin", name.as_str()));
            let a = blob::read(&p)?;
            if a.ndim() != 2 || a.shape()[0] != n {
                return Err(DclError::Corrupt { path: p, msg: format!("text blob shape {:?}", a.shape()) });
            }
            Some(a.into_dimensionality::<ndarray::Ix2>().expect("rank checked"))
        } else {
            None
        };
        let clip = |i: usize, c: usize, id: u32| RawClip {
            frames: frames.slice(s![i, c, .., ..]).to_owned(),
            audio: audio.slice(s![i, c, ..]).to_owned(),
            object_id: id,
        };
        let samples = meta
            .samples
            .iter()
            .enumerate()
            .map(|(i, sm)| QASample {
                clip1: clip(i, 0, sm.object1),
                clip2: clip(i, 1, sm.object2),
                question_id: sm.question_id,
                question_target: sm.question_target,
                label: sm.label,
                text: text.as_ref().map(|t| t.row(i).to_owned()),
            })
            .collect();
        let split = ds.split_mut(name);
        split.samples = samples;
        split.object_ids = meta.object_ids.into_iter().collect();
    }
    Ok(ds)
}

/// Schema for externally computed features. Paths are relative to the
/// manifest's directory and point at `DCLD` blobs: videos `T x d`, audio and
/// text `d`.
#[derive(Debug, Deserialize)]
pub struct FeatureManifest {
    #[serde(default)]
    pub samples: Vec<FeatureEntry>,
}

#[derive(Debug, Deserialize)]
pub struct FeatureEntry {
    pub split: SplitName,
    pub video1: PathBuf,
    pub video2: PathBuf,
    pub audio1: PathBuf,
    pub audio2: PathBuf,
    pub text: PathBuf,
    pub label: u8,
    #[serde(default)]
    pub question_id: usize,
    #[serde(default = "default_target")]
    pub question_target: QuestionTarget,
    pub object1: Option<u32>,
    pub object2: Option<u32>,
}

fn default_target() -> QuestionTarget {
    QuestionTarget::Mixed
}

/// Loads precomputed `T x d` video, `d` audio and `d` text features. The
/// returned split bypasses the encoders.
pub fn ingest_precomputed_features(manifest_path: &Path, config: &Config) -> Result<DatasetSplit> {
    let text = std::fs::read(manifest_path).map_err(|e| DclError::io(manifest_path, e))?;
    let fm: FeatureManifest = serde_json::from_slice(&text).map_err(|e| DclError::json(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (t, d) = (config.data.t, config.model.d);

    let load = |rel: &Path, shape: &[usize]| -> Result<ArrayD<f32>> {
        let p = base.join(rel);
        let a = blob::read(&p)?;
        if a.shape() != shape {
            return Err(DclError::Shape(format!(
                "{}: shape {:?}, config expects {:?}",
                p.display(),
                a.shape(),
                shape
            )));
        }
        Ok(a)
    };

    let mut ds = DatasetSplit {
        train: Split::default(),
        val: Split::default(),
        test: Split::default(),
        objects: Vec::new(),
        templates: Vec::new(),
        t,
        frame_dim: d,
        audio_dim: d,
        precomputed: true,
        seed: 0,
    };
    let mut next_id = 0u32;
    let mut fresh = |given: Option<u32>| {
        given.unwrap_or_else(|| {
            next_id += 1;
            u32::MAX - next_id
        })
    };
    let mut n_questions = 0;
    for e in &fm.samples {
        if e.label > 1 {
            return Err(DclError::Shape(format!("label {} is not 0 or 1", e.label)));
        }
        let v1 = load(&e.video1, &[t, d])?.into_dimensionality().expect("rank checked");
        let v2 = load(&e.video2, &[t, d])?.into_dimensionality().expect("rank checked");
        let a1 = load(&e.audio1, &[d])?.into_dimensionality().expect("rank checked");
        let a2 = load(&e.audio2, &[d])?.into_dimensionality().expect("rank checked");
        let tx = load(&e.text, &[d])?.into_dimensionality().expect("rank checked");
        let (o1, o2) = (fresh(e.object1), fresh(e.object2));
        n_questions = n_questions.max(e.question_id + 1);
        let split = ds.split_mut(e.split);
        split.object_ids.insert(o1);
        split.object_ids.insert(o2);
        split.samples.push(QASample {
            clip1: RawClip { frames: v1, audio: a1, object_id: o1 },
            clip2: RawClip { frames: v2, audio: a2, object_id: o2 },
            question_id: e.question_id,
            question_target: e.question_target,
            label: e.label,
            text: Some(tx),
        });
    }
    ds.templates = (0..n_questions)
        .map(|id| QuestionTemplate {
            id,
            target: QuestionTarget::Mixed,
            material_rank: Vec::new(),
            motion_rank: Vec::new(),
        })
        .collect();
    Ok(ds)
}

/// Plug-in mutual information (nats) between two categorical label sequences.
pub fn empirical_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = Array2::<f64>::zeros((na, nb));
    for (&x, &y) in a.iter().zip(b) {
        joint[[x, y]] += 1.0;
    }
    let pa = joint.sum_axis(Axis(1)) / n;
    let pb = joint.sum_axis(Axis(0)) / n;
    let mut mi = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let p = joint[[i, j]] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}
