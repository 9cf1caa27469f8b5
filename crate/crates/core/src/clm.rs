//! Counterfactual learning module.
//!
//! Every modality block gets its own cross-sample affinity graph
//! `A = D^-1 topk(exp(cos / tau))`, features are passed along it
//! (`F = [A_a X_a | A_s X_s | A_z X_z]`), and the counterfactual prediction
//! rebuilds the graphs from sampled features `X* = sigma * W + mu` while the
//! transported features stay fixed. The total indirect effect is the factual
//! prediction minus the mean counterfactual one.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{DclError, Result};
use crate::tape::{Graph, Var};

/// Per-sample feature blocks (`N` rows each).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalBlocks {
    pub audio: Array2<f64>,
    pub static_factor: Array2<f64>,
    pub dynamic_factor: Array2<f64>,
}

impl ModalBlocks {
    pub fn new(audio: Array2<f64>, static_factor: Array2<f64>, dynamic_factor: Array2<f64>) -> Result<Self> {
        let b = ModalBlocks {
            audio,
            static_factor,
            dynamic_factor,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.audio.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.nrows() == 0
    }

    pub fn blocks(&self) -> [&Array2<f64>; 3] {
        [&self.audio, &self.static_factor, &self.dynamic_factor]
    }

    pub fn widths(&self) -> [usize; 3] {
        self.blocks().map(|b| b.ncols())
    }

    /// `[audio | static | dynamic]`, one row per sample.
    pub fn concat(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.audio.view(), self.static_factor.view(), self.dynamic_factor.view()]).expect("rows checked")
    }

    /// Splits a concatenated matrix back into blocks of the given widths.
    pub fn split(x: &Array2<f64>, widths: [usize; 3]) -> Result<Self> {
        if x.ncols() != widths.iter().sum::<usize>() {
            return Err(DclError::Shape(format!("{} columns cannot split into {widths:?}", x.ncols())));
        }
        let (a, b) = (widths[0], widths[0] + widths[1]);
        ModalBlocks::new(x.slice(s![.., ..a]).to_owned(), x.slice(s![.., a..b]).to_owned(), x.slice(s![.., b..]).to_owned())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.audio.nrows();
        for (name, b) in [("static", &self.static_factor), ("dynamic", &self.dynamic_factor)] {
            if b.nrows() != n {
                return Err(DclError::Shape(format!("{name} block has {} rows, audio has {n}", b.nrows())));
            }
        }
        for (name, b) in [("audio", &self.audio), ("static", &self.static_factor), ("dynamic", &self.dynamic_factor)] {
            for (i, row) in b.outer_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(DclError::Numeric { step: i, what: format!("{name} block row") });
                }
            }
        }
        Ok(())
    }
}

/// Row-stochastic affinity. `fallback_rows` lists rows that had no mass
/// and were replaced by a self loop.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
    pub k: usize,
    pub fallback_rows: Vec<usize>,
}

/// Learned sampling distribution of intervened features.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionParams {
    pub x_mu: Array1<f64>,
    pub x_sigma: Array1<f64>,
}

impl InterventionParams {
    pub fn new(x_mu: Array1<f64>, x_sigma: Array1<f64>) -> Result<Self> {
        if x_mu.len() != x_sigma.len() {
            return Err(DclError::Shape(format!("x_mu has {} dims, x_sigma {}", x_mu.len(), x_sigma.len())));
        }
        if x_sigma.iter().any(|&v| !(v >= 0.0)) {
            return Err(DclError::Config("x_sigma must be non-negative".into()));
        }
        Ok(InterventionParams { x_mu, x_sigma })
    }
}

pub fn pool_dynamic(z: &Array2<f64>) -> Result<Array1<f64>> {
    z.mean_axis(Axis(0)).ok_or_else(|| DclError::Empty("dynamic factors with zero steps".into()))
}

/// `exp(cos(x_i, x_j) / tau)`.
pub fn similarity_matrix(rows: &Array2<f64>, tau_aff: f64) -> Result<Array2<f64>> {
    if !(tau_aff > 0.0) {
        return Err(DclError::Config(format!("tau_aff = {tau_aff} must be positive")));
    }
    let mut unit = rows.clone();
    for (i, mut r) in unit.outer_iter_mut().enumerate() {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DclError::ZeroNorm(format!("affinity row {i}")));
        }
        r /= norm;
    }
    // Pairwise dots keep every entry independent of batch position.
    let n = unit.nrows();
    let mut cos = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..i {
            let c = unit.row(i).dot(&unit.row(j));
            cos[[i, j]] = c;
            cos[[j, i]] = c;
        }
    }
    Ok(cos.mapv(|c| (c / tau_aff).exp()))
}

/// Boolean mask of the `k` largest entries per row, ties to the lowest column.
pub fn topk_mask(values: &Array2<f64>, k: usize) -> Result<Array2<bool>> {
    let n = values.ncols();
    if k == 0 || k > n {
        return Err(DclError::Config(format!("k = {k} outside 1..={n}")));
    }
    let mut mask = Array2::from_elem(values.dim(), false);
    let mut order: Vec<usize> = (0..n).collect();
    for (i, row) in values.outer_iter().enumerate() {
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            mask[[i, j]] = true;
        }
    }
    Ok(mask)
}

pub fn topk_filter(values: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let mask = topk_mask(values, k)?;
    Ok(Array2::from_shape_fn(values.dim(), |ij| if mask[ij] { values[ij] } else { 0.0 }))
}

/// Sum in descending order, so the result does not depend on where the
/// terms sit in the batch.
fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.filter(|&x| x != 0.0).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.into_iter().sum()
}

/// `D^-1 S'`; empty rows fall back to a self loop.
pub fn row_normalize(values: &Array2<f64>, k: usize) -> Result<AffinityMatrix> {
    if values.iter().any(|&v| !(v >= 0.0)) {
        return Err(DclError::Numeric { step: 0, what: "affinity has negative or NaN entries".into() });
    }
    let mut out = values.clone();
    let mut fallback_rows = Vec::new();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let total = ordered_sum(row.iter().copied());
        if total == 0.0 {
            row[i] = 1.0;
            fallback_rows.push(i);
        } else {
            row /= total;
        }
    }
    Ok(AffinityMatrix { values: out, k, fallback_rows })
}

pub fn affinity(rows: &Array2<f64>, tau_aff: f64, k: usize) -> Result<AffinityMatrix> {
    let n = rows.nrows();
    if n == 0 {
        return Err(DclError::Empty("affinity over an empty batch".into()));
    }
    let k = k.min(n);
    row_normalize(&topk_filter(&similarity_matrix(rows, tau_aff)?, k)?, k)
}

/// One affinity per modality; `k` is capped at the batch size.
pub fn build_affinities(blocks: &ModalBlocks, tau_aff: f64, k: usize) -> Result<[AffinityMatrix; 3]> {
    blocks.validate()?;
    Ok([
        affinity(&blocks.audio, tau_aff, k)?,
        affinity(&blocks.static_factor, tau_aff, k)?,
        affinity(&blocks.dynamic_factor, tau_aff, k)?,
    ])
}

/// Blockwise message passing.
pub fn transfer(affinities: &[AffinityMatrix; 3], blocks: &ModalBlocks) -> Result<Array2<f64>> {
    let n = blocks.len();
    let parts: Vec<Array2<f64>> = affinities
        .iter()
        .zip(blocks.blocks())
        .map(|(a, x)| {
            if a.values.dim() != (n, n) {
                return Err(DclError::Shape(format!("affinity {:?} for a batch of {n}", a.values.dim())));
            }
            let mut out = Array2::zeros((n, x.ncols()));
            for (i, mut o) in out.outer_iter_mut().enumerate() {
                let mut terms: Vec<(f64, usize)> = (0..n).map(|j| (a.values[[i, j]], j)).filter(|t| t.0 != 0.0).collect();
                terms.sort_by(|p, q| q.0.total_cmp(&p.0));
                for (w, j) in terms {
                    o.scaled_add(w, &x.row(j));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(concatenate(Axis(1), &[parts[0].view(), parts[1].view(), parts[2].view()]).expect("rows match"))
}

/// Rows `x_sigma * W_i + x_mu`.
pub fn intervene(params: &InterventionParams, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.ncols() != params.x_mu.len() {
        return Err(DclError::Shape(format!("noise has {} columns, params {}", noise.ncols(), params.x_mu.len())));
    }
    Ok(noise * &params.x_sigma + &params.x_mu)
}

pub fn tie(factual: &Array2<f64>, counterfactual: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = counterfactual.first().ok_or_else(|| DclError::Empty("no counterfactual samples".into()))?;
    let mut mean = first.clone();
    for c in &counterfactual[1..] {
        if c.dim() != factual.dim() {
            return Err(DclError::Shape(format!("counterfactual {:?} vs factual {:?}", c.dim(), factual.dim())));
        }
        mean += c;
    }
    if first.dim() != factual.dim() {
        return Err(DclError::Shape(format!("counterfactual {:?} vs factual {:?}", first.dim(), factual.dim())));
    }
    mean /= counterfactual.len() as f64;
    Ok(factual - &mean)
}

// ---------------------------------------------------------------------------
// Graph versions

/// Affinity of the rows of `x`. The top-k pattern is read from the current
/// values and treated as constant.
pub fn affinity_graph(g: &mut Graph, x: Var, tau_aff: f64, k: usize) -> Result<Var> {
    let n = g.shape(x).0;
    if let Some(i) = g.value(x).outer_iter().position(|r| r.dot(&r) == 0.0) {
        return Err(DclError::ZeroNorm(format!("affinity row {i}")));
    }
    let cos = g.cosine_matrix(x, x);
    let scaled = g.scale(cos, 1.0 / tau_aff);
    let sim = g.exp(scaled);
    let mask = topk_mask(g.value(sim), k.min(n))?;
    let mask = g.input(mask.mapv(|m| if m { 1.0 } else { 0.0 }));
    let kept = g.mul(sim, mask);
    let sums = g.row_sums(kept);
    let inv = g.recip(sums);
    Ok(g.mul_col(kept, inv))
}

/// `[A_0 X_0 | A_1 X_1 | A_2 X_2]`.
pub fn transfer_graph(g: &mut Graph, affinities: [Var; 3], blocks: [Var; 3]) -> Var {
    let parts: Vec<Var> = affinities.iter().zip(blocks).map(|(&a, x)| g.matmul(a, x)).collect();
    g.concat_cols(&parts)
}

/// `softplus(sigma_raw) * W + mu` for every row of `noise`.
pub fn intervene_graph(g: &mut Graph, mu: Var, sigma_raw: Var, noise: Array2<f64>) -> Var {
    let sigma = g.softplus(sigma_raw);
    let w = g.input(noise);
    let scaled = g.mul_row(w, sigma);
    g.add_row(scaled, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pooling() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(pool_dynamic(&z).unwrap(), array![0.5, 0.5]);
        assert_eq!(pool_dynamic(&Array2::from_elem((3, 2), 0.5)).unwrap(), array![0.5, 0.5]);
        assert!(pool_dynamic(&Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn similarity_cases() {
        let rows = array![[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0]];
        let s = similarity_matrix(&rows, 2.0).unwrap();
        assert!((s[[0, 1]] - 1.6487).abs() < 1e-4);
        assert!((s[[0, 2]] - 1.0).abs() < 1e-12);
        assert_eq!(s[[2, 2]], 0.5f64.exp());
        let mut scaled = rows.clone();
        scaled.row_mut(2).mapv_inplace(|v| v * 7.5);
        let s2 = similarity_matrix(&scaled, 2.0).unwrap();
        assert!((&s2 - &s).iter().all(|d| d.abs() < 1e-12));
        let err = similarity_matrix(&array![[1.0, 0.0], [0.0, 0.0]], 2.0).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn topk_cases() {
        let s = array![[0.9, 0.5, 0.1], [0.2, 0.2, 0.2]];
        assert_eq!(topk_filter(&s, 2).unwrap(), array![[0.9, 0.5, 0.0], [0.2, 0.2, 0.0]]);
        assert_eq!(topk_filter(&s, 3).unwrap(), s);
        let once = topk_filter(&s, 1).unwrap();
        assert_eq!(topk_filter(&once, 1).unwrap(), once);
        assert!(topk_filter(&s, 0).is_err());
        assert!(topk_filter(&s, 4).is_err());
    }

    #[test]
    fn normalisation_cases() {
        let a = row_normalize(&array![[2.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.25, 0.25, 0.5]], 2).unwrap();
        assert_eq!(a.values.row(0), array![0.5, 0.5, 0.0]);
        assert_eq!(a.values.row(1), array![0.0, 1.0, 0.0]);
        assert_eq!(a.values.row(2), array![0.25, 0.25, 0.5]);
        assert_eq!(a.fallback_rows, vec![1]);
        assert!(row_normalize(&array![[-1.0]], 1).is_err());
    }

    #[test]
    fn two_sample_batch_keeps_both_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = ModalBlocks::new(randn(&mut rng, 2, 3), randn(&mut rng, 2, 2), randn(&mut rng, 2, 2)).unwrap();
        for a in build_affinities(&blocks, 2.0, 5).unwrap() {
            assert!(a.values.iter().all(|&v| v > 0.0));
            assert_eq!(a.k, 2);
        }
    }

    #[test]
    fn duplicated_samples_get_equal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = randn(&mut rng, 6, 4);
        let r = x.row(1).to_owned();
        x.row_mut(4).assign(&r);
        let a = affinity(&x, 2.0, 3).unwrap();
        // Both rows pick the same neighbours; ties resolve to the lower index.
        assert_eq!(a.values.row(1), a.values.row(4));
    }

    #[test]
    fn transfer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks = ModalBlocks::new(randn(&mut rng, 5, 3), randn(&mut rng, 5, 2), randn(&mut rng, 5, 2)).unwrap();
        let identity = build_affinities(&blocks, 2.0, 1).unwrap();
        assert_eq!(transfer(&identity, &blocks).unwrap(), blocks.concat());

        let uniform = AffinityMatrix { values: Array2::from_elem((5, 5), 0.2), k: 5, fallback_rows: vec![] };
        let f = transfer(&[uniform.clone(), uniform.clone(), uniform], &blocks).unwrap();
        let mean = blocks.concat().mean_axis(Axis(0)).unwrap();
        for row in f.outer_iter() {
            assert!(row.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn intervention_cases() {
        let p = InterventionParams::new(array![0.5, -1.0], array![2.0, 0.0]).unwrap();
        assert_eq!(intervene(&p, &Array2::zeros((3, 2))).unwrap().row(2), p.x_mu);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = randn(&mut rng, 100_000, 2);
        let x = intervene(&p, &w).unwrap();
        assert!(x.column(1).iter().all(|&v| v == -1.0));
        let m = x.column(0).mean().unwrap();
        assert!((m - 0.5).abs() < 3.0 * 2.0 / (100_000f64).sqrt(), "{m}");
        assert!(InterventionParams::new(array![0.0], array![-0.1]).is_err());
        assert!(intervene(&p, &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn tie_cases() {
        let y = array![[0.3, -0.2], [1.0, 2.0]];
        assert_eq!(tie(&y, &[y.clone()]).unwrap(), Array2::<f64>::zeros((2, 2)));
        let c = array![[0.1, 0.1], [0.5, -1.0]];
        assert_eq!(tie(&y, &[c.clone()]).unwrap(), &y - &c);
        assert_eq!(tie(&c, &[y.clone()]).unwrap(), -(&y - &c));
        assert!(tie(&y, &[]).is_err());
    }

    #[test]
    fn graph_affinity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 7, 4);
        let plain = affinity(&x, 2.0, 3).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let a = affinity_graph(&mut g, xv, 2.0, 3).unwrap();
        assert!((g.value(a) - &plain.values).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn intervene_graph_gradient_wrt_mu_is_identity() {
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let mu = store.add("mu", array![[0.2, -0.4, 1.0]], true);
        let sr = store.add("sigma", array![[0.1, 0.3, -0.5]], true);
        let noise = array![[0.5, -1.0, 0.2], [1.5, 0.0, -0.7]];
        let weights = array![[0.3, -1.2, 0.7], [2.0, 0.4, -0.1]];
        let loss = |store: &ParamStore| {
            let mut g = Graph::new();
            let m = g.param(store, mu);
            let s = g.param(store, sr);
            let x = intervene_graph(&mut g, m, s, noise.clone());
            let w = g.input(weights.clone());
            let p = g.mul(x, w);
            let l = g.sum_all(p);
            (g.scalar(l), g.backward(l).get(mu).cloned().unwrap())
        };
        let (_, grad) = loss(&store);
        let col_sums = weights.sum_axis(Axis(0));
        for j in 0..3 {
            let mut plus = store.clone();
            plus.value_mut(mu)[[0, j]] += 1e-6;
            let mut minus = store.clone();
            minus.value_mut(mu)[[0, j]] -= 1e-6;
            let fd = (loss(&plus).0 - loss(&minus).0) / 2e-6;
            assert!((fd - grad[[0, j]]).abs() < 1e-6);
            assert!((grad[[0, j]] - col_sums[j]).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn affinity_rows_are_stochastic_sparse_and_scale_invariant(
                seed in any::<u64>(), n in 2usize..12, k in 1usize..8, d in 1usize..6,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = randn(&mut rng, n, d);
                let a = affinity(&x, 2.0, k).unwrap();
                for row in a.values.outer_iter() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= k);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
                let scales: Vec<f64> = (0..n).map(|_| rng.random_range(0.1f64..10.0)).collect();
                let scaled = Array2::from_shape_fn((n, d), |(i, j)| x[[i, j]] * scales[i]);
                let b = affinity(&scaled, 2.0, k).unwrap();
                prop_assert!((&b.values - &a.values).iter().all(|v| v.abs() < 1e-9));
            }

            #[test]
            fn transfer_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let blocks = ModalBlocks::new(randn(&mut rng, n, 3), randn(&mut rng, n, 2), randn(&mut rng, n, 2)).unwrap();
                let mut perm: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                let permuted = ModalBlocks::new(
                    blocks.audio.select(Axis(0), &perm),
                    blocks.static_factor.select(Axis(0), &perm),
                    blocks.dynamic_factor.select(Axis(0), &perm),
                ).unwrap();
                let f = transfer(&build_affinities(&blocks, 2.0, 3).unwrap(), &blocks).unwrap();
                let fp = transfer(&build_affinities(&permuted, 2.0, 3).unwrap(), &permuted).unwrap();
                prop_assert_eq!(f.select(Axis(0), &perm), fp);
            }

            #[test]
            fn tie_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (y1, y2, c1, c2) = (randn(&mut rng, 3, 2), randn(&mut rng, 3, 2), randn(&mut rng, 3, 2), randn(&mut rng, 3, 2));
                let lhs = tie(&(&y1 * a + &y2), &[&c1 * a + &c2]).unwrap();
                let rhs = tie(&y1, &[c1]).unwrap() * a + tie(&y2, &[c2]).unwrap();
                prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-9));
            }
        }
    }
}
