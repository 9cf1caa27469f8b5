//! 2-D embeddings of latent factors and cluster-quality scores.
//!
//! The projection is exact t-SNE (perplexity-calibrated Gaussian affinities,
//! Student-t output kernel) started from the top two principal components, so
//! a given input always maps to the same picture.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DclError, Result};
use crate::fusion::Model;
use crate::synthdata::{DatasetSplit, SplitName};
use crate::train::latent_factors;

/// Top `k` principal-component scores of the rows of `x`.
pub fn pca(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let centered = x - &x.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = centered.t().dot(&centered) / x.nrows().max(1) as f64;
    let d = cov.nrows();
    let mut out = Array2::zeros((x.nrows(), k));
    for c in 0..k.min(d) {
        // Deterministic start that is not orthogonal to a generic eigenvector.
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 * 0.618).fract());
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = cov.dot(&v);
            let n = w.dot(&w).sqrt();
            if n < 1e-300 {
                break;
            }
            v = w / n;
            lambda = n;
        }
        out.column_mut(c).assign(&centered.dot(&v));
        let vv = v.clone().insert_axis(Axis(1));
        cov -= &(vv.dot(&vv.t()) * lambda);
    }
    out
}

fn sq_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Conditional affinities with per-row bandwidth matched to `perplexity`.
fn input_affinities(x: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = x.nrows();
    let d2 = sq_distances(x);
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let min_d = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-(d2[[i, j]] - min_d) * beta).exp();
                    sum += w;
                    weighted += w * (d2[[i, j]] - min_d);
                }
            }
            let entropy = sum.ln() + beta * weighted / sum;
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-(d2[[i, j]] - min_d) * beta).exp();
                p[[i, j]] = w;
                sum += w;
            }
        }
        p.row_mut(i).mapv_inplace(|v| v / sum);
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

/// Exact t-SNE to two dimensions.
pub fn tsne(x: &Array2<f64>, perplexity: f64, iters: usize) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 3 {
        return Err(DclError::Empty(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DclError::Numeric { step: 0, what: "t-SNE input".into() });
    }
    let perplexity = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let p = input_affinities(x, perplexity);
    let mut y = pca(x, 2);
    let scale = y.std_axis(Axis(0), 0.0).iter().cloned().fold(0.0, f64::max).max(1e-12);
    y.mapv_inplace(|v| v / scale * 1e-4);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let lr = (n as f64 / 12.0).max(50.0);
    for it in 0..iters {
        let exaggeration = if it < 250 { 12.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let num = sq_distances(&y).mapv(|d| 1.0 / (1.0 + d));
        let mut num = num;
        for i in 0..n {
            num[[i, i]] = 0.0;
        }
        let z = num.sum();
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let m = 4.0 * (exaggeration * p[[i, j]] - q) * num[[i, j]];
                for c in 0..2 {
                    grad[[i, c]] += m * (y[[i, c]] - y[[j, c]]);
                }
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
        }
        update = &update * momentum - &(&gains * &grad * lr);
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
    }
    Ok(y)
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let d = sq_distances(points).mapv(f64::sqrt);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let sizes: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d[[i, j]];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b).max(1e-300);
        }
    }
    total / n as f64
}

/// Mean silhouette over `reps` seeded label permutations.
pub fn shuffled_silhouette(points: &Array2<f64>, labels: &[usize], seed: u64, reps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut total = 0.0;
    for _ in 0..reps.max(1) {
        shuffled.shuffle(&mut rng);
        total += silhouette(points, &shuffled);
    }
    total / reps.max(1) as f64
}

/// 2-D projection of the posterior-mean pooled dynamic factors of every
/// clip in `split`.
#[derive(Clone, Debug)]
pub struct DynamicEmbedding {
    pub coords: Array2<f64>,
    pub motion: Vec<usize>,
    pub objects: Vec<u32>,
    pub silhouette: f64,
    pub shuffled_silhouette: f64,
}

pub const TSNE_PERPLEXITY: f64 = 30.0;
pub const TSNE_ITERS: usize = 1000;

pub fn embed_dynamic(model: &Model, ds: &DatasetSplit, split: SplitName) -> Result<DynamicEmbedding> {
    let samples = model.prepare(ds.split(split))?;
    let (_, z, objects) = latent_factors(model, &samples)?
        .ok_or_else(|| DclError::Config(format!("mode {} has no dynamic factors", model.mode)))?;
    let motion = objects
        .iter()
        .map(|&o| ds.object(o).map(|s| s.motion_type).ok_or_else(|| DclError::Lookup(format!("object {o} not in dataset"))))
        .collect::<Result<Vec<_>>>()?;
    let coords = tsne(&z, TSNE_PERPLEXITY, TSNE_ITERS)?;
    Ok(DynamicEmbedding {
        silhouette: silhouette(&coords, &motion),
        shuffled_silhouette: shuffled_silhouette(&coords, &motion, model.config.train.seed, 20),
        coords,
        motion,
        objects,
    })
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Scatter plot of `coords` coloured by label.
pub fn write_scatter_png(path: &Path, coords: &Array2<f64>, labels: &[usize], size: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in coords.outer_iter() {
        for c in 0..2 {
            lo[c] = lo[c].min(r[c]);
            hi[c] = hi[c].max(r[c]);
        }
    }
    let margin = 12.0;
    let span = size as f64 - 2.0 * margin;
    for (r, &l) in coords.outer_iter().zip(labels) {
        let px = |c: usize| margin + (r[c] - lo[c]) / (hi[c] - lo[c]).max(1e-12) * span;
        let (cx, cy) = (px(0) as i64, size as i64 - px(1) as i64);
        let color = Rgb(PALETTE[l % PALETTE.len()]);
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= 9 && x >= 0 && y >= 0 && x < size as i64 && y < size as i64 {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| DclError::Format { path: path.to_path_buf(), msg: e.to_string() })
}

/// `x,y,motion_type,object_id` rows.
pub fn write_coordinates_csv(path: &Path, coords: &Array2<f64>, labels: &[usize], objects: &[u32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DclError::io(path, e))?);
    let mut body = String::from("x,y,motion_type,object_id\n");
    for ((r, l), o) in coords.outer_iter().zip(labels).zip(objects) {
        body.push_str(&format!("{},{},{l},{o}\n", r[0], r[1]));
    }
    f.write_all(body.as_bytes()).map_err(|e| DclError::io(path, e))
}
