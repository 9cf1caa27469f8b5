//! Projects pooled dynamic factors of a trained model with t-SNE and writes
//! the scatter plot and coordinates to the temp directory.

use dcl::checkpoint;
use dcl::config::{Config, Mode};
use dcl::synthdata::{generate_dataset, SplitName};
use dcl::train::fit;
use dcl::viz::{embed_dynamic, write_coordinates_csv, write_scatter_png};

fn main() -> dcl::error::Result<()> {
    let mut config = Config::desk();
    config.data.train_pairs = 256;
    config.data.test_pairs = 128;
    config.train.epochs = 6;
    let ds = generate_dataset(&config, 2)?;
    let (model, _) = fit(&ds, &config, Mode::Dse, &mut |_| {})?;

    let dir = std::env::temp_dir();
    let ckpt = dir.join("dcl-example.dclc");
    checkpoint::save(&model, &ckpt)?;
    let model = checkpoint::load(&ckpt)?;

    let emb = embed_dynamic(&model, &ds, SplitName::Test)?;
    let png = dir.join("dcl-example-dynamic.png");
    write_scatter_png(&png, &emb.coords, &emb.motion, 512)?;
    write_coordinates_csv(&png.with_extension("csv"), &emb.coords, &emb.motion, &emb.objects)?;
    println!("{} clips embedded", emb.coords.nrows());
    println!("silhouette by motion type {:.3}, shuffled labels {:.3}", emb.silhouette, emb.shuffled_silhouette);
    println!("wrote {} and {}", png.display(), png.with_extension("csv").display());
    std::fs::remove_file(&ckpt).ok();
    Ok(())
}
