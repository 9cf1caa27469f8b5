//! Affinity graphs, feature transfer and the total indirect effect on a
//! hand-built batch, without any training.

use dcl::clm::{build_affinities, intervene, tie, transfer, InterventionParams, ModalBlocks};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dcl::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut block = |w: usize| Array2::from_shape_fn((8, w), |_| rng.sample::<f64, _>(StandardNormal));
    let blocks = ModalBlocks::new(block(6), block(4), block(4))?;

    let factual = build_affinities(&blocks, 2.0, 3)?;
    println!("audio affinity rows (k = 3):");
    for row in factual[0].values.outer_iter() {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    let f = transfer(&factual, &blocks)?;
    println!("transferred features: {:?}", f.dim());

    // Stand-in classifier: a fixed linear read-out of the transferred features.
    let w = Array2::from_shape_fn((f.ncols(), 2), |(i, j)| if (i + j) % 3 == 0 { 0.3 } else { -0.1 });
    let x = blocks.concat();
    let params = InterventionParams::new(Array1::zeros(x.ncols()), Array1::ones(x.ncols()))?;
    let mut cf_logits = Vec::new();
    for _ in 0..4 {
        let noise = Array2::from_shape_fn(x.dim(), |_| rng.sample::<f64, _>(StandardNormal));
        let star = ModalBlocks::split(&intervene(&params, &noise)?, [6, 4, 4])?;
        let affs = build_affinities(&star, 2.0, 3)?;
        cf_logits.push(transfer(&affs, &blocks)?.dot(&w));
    }
    let effect = tie(&f.dot(&w), &cf_logits)?;
    println!("TIE logits for the first three samples:");
    for row in effect.outer_iter().take(3) {
        println!("  [{:+.3}, {:+.3}]", row[0], row[1]);
    }
    let same = tie(&f.dot(&w), &[f.dot(&w)])?;
    println!("TIE under identity intervention is zero: {}", same.iter().all(|&v| v == 0.0));
    Ok(())
}
