//! Trains all four modes for a few seeds on a reduced configuration and
//! prints the accuracy table.

use dcl::cli::{render_table, summarize, AblationRun};
use dcl::config::{Config, Mode};
use dcl::synthdata::{generate_dataset, SplitName};
use dcl::train::{evaluate, fit};

fn main() -> dcl::error::Result<()> {
    let mut config = Config::desk();
    config.data.train_pairs = 192;
    config.data.test_pairs = 128;
    config.train.epochs = 4;
    let seeds = [1, 2];
    let mut runs = Vec::new();
    for seed in seeds {
        let ds = generate_dataset(&config, seed)?;
        for mode in Mode::ALL {
            let mut c = config.clone();
            c.train.seed = seed;
            let (model, history) = fit(&ds, &c, mode, &mut |_| {})?;
            let metrics = evaluate(&model, &ds, SplitName::Test)?;
            runs.push(AblationRun { mode, seed, best_epoch: history.best_epoch, metrics });
        }
    }
    print!("{}", render_table(&summarize(&runs), seeds.len()));
    Ok(())
}
