//! Trains the sequential encoder on a small dataset and compares material
//! probes on the static and dynamic factors.

use dcl::config::{Config, Mode};
use dcl::synthdata::{generate_dataset, SplitName};
use dcl::train::{evaluate, fit};

fn main() -> dcl::error::Result<()> {
    let mut config = Config::desk();
    config.data.train_pairs = 256;
    config.train.epochs = 8;
    let ds = generate_dataset(&config, 1)?;
    let (model, history) = fit(&ds, &config, Mode::Dse, &mut |r| {
        println!(
            "epoch {:>2}  recon {:>8.2}  kl_s {:>6.2}  kl_z {:>6.2}  mi_z_x {:+.3}  mi_s_x {:+.3}  mi_z_s {:+.3}",
            r.epoch, r.losses.recon, r.losses.kl_s, r.losses.kl_z, r.losses.mi_z_x, r.losses.mi_s_x, r.losses.mi_z_s
        );
    })?;
    let m = evaluate(&model, &ds, SplitName::Test)?;
    println!("best epoch {}", history.best_epoch);
    println!("material probe from s: {:.3}", m.probe_static.unwrap_or(f64::NAN));
    println!("material probe from z: {:.3}", m.probe_dynamic.unwrap_or(f64::NAN));
    Ok(())
}
