//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code: 0 success, 1 failed check, 2 usage or
//! configuration error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{Config, Mode};
use crate::error::{DclError, Result};
use crate::gradcheck::{gradcheck, TOLERANCE};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, DatasetSplit, SplitName};
use crate::train::{evaluate, fit, Metrics};
use crate::viz::{embed_dynamic, write_coordinates_csv, write_scatter_png};

pub const THREADS_ENV: &str = "DCL_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "dcl", version, about = "Disentangled counterfactual learning on synthetic paired-object QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write it to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode and write a checkpoint, metrics log and summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint path; defaults to `<out>/model.dclc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Train every mode for every seed and print a mean ± std table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shared dataset; when absent each seed generates its own.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project pooled dynamic factors to 2-D and write a PNG plus a CSV.
    EmbedViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// PNG path; the coordinates go next to it with a `.csv` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        /// Defaults to the tiny configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dse_a_c")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; when absent the dataset is generated from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Everything needed to repeat a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub git_describe: String,
    pub seed: u64,
    pub config: Config,
    pub dataset_hash: Option<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(config: &Config, seed: u64, dataset_hash: Option<String>, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command: std::env::args().collect(),
            git_describe: git_describe(),
            seed,
            config: config.clone(),
            dataset_hash,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Per-mode result of one ablation seed.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub mode: Mode,
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub overall: (f64, f64),
    pub material: (f64, f64),
    pub probe_static: Option<(f64, f64)>,
    pub probe_dynamic: Option<(f64, f64)>,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[AblationRun]) -> Vec<AblationRow> {
    Mode::ALL
        .into_iter()
        .filter(|m| runs.iter().any(|r| r.mode == *m))
        .map(|mode| {
            let of = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<(f64, f64)> {
                let xs: Vec<f64> = runs.iter().filter(|r| r.mode == mode).filter_map(|r| f(&r.metrics)).collect();
                (!xs.is_empty()).then(|| mean_std(&xs))
            };
            AblationRow {
                mode,
                overall: of(&|m| Some(m.accuracy_all)).expect("mode has runs"),
                material: of(&|m| m.accuracy_material).unwrap_or((f64::NAN, f64::NAN)),
                probe_static: of(&|m| m.probe_static),
                probe_dynamic: of(&|m| m.probe_dynamic),
            }
        })
        .collect()
}

fn cell((mean, std): (f64, f64), seeds: usize) -> String {
    if seeds > 1 {
        format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
    } else {
        format!("{:.1}", 100.0 * mean)
    }
}

/// Accuracy table (percent) with one row per mode, followed by the
/// material-probe table for modes that have latent factors.
pub fn render_table(rows: &[AblationRow], seeds: usize) -> String {
    let mut s = format!("{:<10} {:>14} {:>14}\n", "mode", "overall", "material");
    for r in rows {
        s += &format!("{:<10} {:>14} {:>14}\n", r.mode.as_str(), cell(r.overall, seeds), cell(r.material, seeds));
    }
    let probes: Vec<_> = rows.iter().filter_map(|r| Some((r.mode, r.probe_static?, r.probe_dynamic?))).collect();
    if !probes.is_empty() {
        s += &format!("\n{:<10} {:>14} {:>14}\n", "probe", "static", "dynamic");
        for (mode, ps, pd) in probes {
            s += &format!("{:<10} {:>14} {:>14}\n", mode.as_str(), cell(ps, seeds), cell(pd, seeds));
        }
    }
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    std::fs::write(path, text + "\n").map_err(|e| DclError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DclError::io(dir, e))
}

fn load_config(path: Option<&Path>, fallback: Config) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(fallback),
    }
}

fn resolve(common: &Common) -> Result<(Config, DatasetSplit)> {
    let mut config = load_config(common.config.as_deref(), Config::default())?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    let ds = match &common.data {
        Some(dir) => read_dataset(dir)?,
        None => generate_dataset(&config, config.train.seed)?,
    };
    Ok((config, ds))
}

fn gen_data(common: &Common, out: &Path) -> Result<i32> {
    let (config, ds) = resolve(common)?;
    let hash = ds.content_hash();
    create_dir(out)?;
    RunManifest::new(&config, config.train.seed, Some(hash.clone()), vec![out.to_path_buf()]).write(out)?;
    write_dataset(&ds, out)?;
    println!("{hash}");
    Ok(0)
}

fn train(common: &Common, mode: Mode, out: &Path, checkpoint_path: Option<&Path>) -> Result<i32> {
    let (config, ds) = resolve(common)?;
    create_dir(out)?;
    let ckpt = checkpoint_path.map_or_else(|| out.join("model.dclc"), Path::to_path_buf);
    let log_path = out.join("metrics.jsonl");
    let summary_path = out.join("summary.json");
    RunManifest::new(
        &config,
        config.train.seed,
        Some(ds.content_hash()),
        vec![ckpt.clone(), log_path.clone(), summary_path.clone()],
    )
    .write(out)?;

    let file = File::create(&log_path).map_err(|e| DclError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_err = None;
    let (model, history) = fit(&ds, &config, mode, &mut |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        eprintln!("epoch {:>3}  loss {:.4}  val {:.3}", rec.epoch, rec.losses.total, rec.val_accuracy);
    })?;
    if let Some(e) = log_err {
        return Err(DclError::io(&log_path, e));
    }
    log.flush().map_err(|e| DclError::io(&log_path, e))?;

    checkpoint::save(&model, &ckpt)?;
    let test = evaluate(&model, &ds, SplitName::Test)?;
    let summary = serde_json::json!({
        "mode": mode,
        "seed": config.train.seed,
        "best_epoch": history.best_epoch,
        "epochs_run": history.records.len().saturating_sub(1),
        "test": test,
    });
    write_json(&summary_path, &summary)?;
    println!("{}", serde_json::to_string_pretty(&test).expect("metrics serialise"));
    Ok(0)
}

fn eval(checkpoint_path: &Path, data: &Path, split: SplitName) -> Result<i32> {
    let model = checkpoint::load(checkpoint_path)?;
    let ds = read_dataset(data)?;
    let metrics = evaluate(&model, &ds, split)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialise"));
    Ok(0)
}

fn ablate(config_path: Option<&Path>, data: Option<&Path>, seeds: &[u64], out: &Path) -> Result<i32> {
    if seeds.is_empty() {
        return Err(DclError::Config("--seeds needs at least one seed".into()));
    }
    let config = load_config(config_path, Config::default())?;
    let shared = data.map(read_dataset).transpose()?;
    create_dir(out)?;
    let table_path = out.join("ablation.txt");
    let runs_path = out.join("ablation.json");
    RunManifest::new(
        &config,
        seeds[0],
        shared.as_ref().map(DatasetSplit::content_hash),
        vec![table_path.clone(), runs_path.clone()],
    )
    .write(out)?;

    let datasets: Vec<DatasetSplit> = match shared {
        Some(ds) => vec![ds],
        None => seeds.iter().map(|&s| generate_dataset(&config, s)).collect::<Result<_>>()?,
    };
    let jobs: Vec<(usize, u64, Mode)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| Mode::ALL.into_iter().map(move |m| (i, s, m)))
        .collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(i, seed, mode)| {
            let ds = &datasets[i.min(datasets.len() - 1)];
            let mut c = config.clone();
            c.train.seed = seed;
            let (model, history) = fit(ds, &c, mode, &mut |_| {})?;
            let metrics = evaluate(&model, ds, SplitName::Test)?;
            eprintln!("seed {seed} {mode}: accuracy {:.3}", metrics.accuracy_all);
            Ok(AblationRun { mode, seed, best_epoch: history.best_epoch, metrics })
        })
        .collect::<Result<_>>()?;

    let rows = summarize(&runs);
    let table = render_table(&rows, seeds.len());
    std::fs::write(&table_path, &table).map_err(|e| DclError::io(&table_path, e))?;
    write_json(&runs_path, &serde_json::json!({ "seeds": seeds, "rows": rows, "runs": runs }))?;
    print!("{table}");
    Ok(0)
}

fn embed_viz(checkpoint_path: &Path, data: &Path, out: &Path, split: SplitName) -> Result<i32> {
    let model = checkpoint::load(checkpoint_path)?;
    let ds = read_dataset(data)?;
    let csv = out.with_extension("csv");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let emb = embed_dynamic(&model, &ds, split)?;
    write_scatter_png(out, &emb.coords, &emb.motion, 512)?;
    write_coordinates_csv(&csv, &emb.coords, &emb.motion, &emb.objects)?;
    println!(
        "{}",
        serde_json::json!({
            "points": emb.coords.nrows(),
            "silhouette": emb.silhouette,
            "shuffled_silhouette": emb.shuffled_silhouette,
            "image": out,
            "coordinates": csv,
        })
    );
    Ok(0)
}

fn run_gradcheck(config_path: Option<&Path>, mode: Mode, seed: u64, corrupt: bool) -> Result<i32> {
    let config = load_config(config_path, Config::tiny())?;
    let corrupt_first = |g: &mut crate::tape::Gradients| {
        let first = g.iter().map(|(id, _)| id).next();
        if let Some(id) = first {
            g.get_mut(id).expect("id from iter")[[0, 0]] += 1.0;
        }
    };
    let tamper: Option<&dyn Fn(&mut crate::tape::Gradients)> = if corrupt { Some(&corrupt_first) } else { None };
    let report = gradcheck(&config, mode, seed, tamper)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    if report.passed() {
        println!("max relative error {:.3e} < {TOLERANCE:e}", report.max_rel_error);
        Ok(0)
    } else {
        eprintln!(
            "gradient check failed: {} {:?} analytic {:.6e} numeric {:.6e} (relative error {:.3e})",
            report.worst_param, report.worst_index, report.analytic, report.numeric, report.max_rel_error
        );
        Ok(1)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DclError::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn exit_code(e: &DclError) -> i32 {
    match e {
        DclError::Config(_) | DclError::Io { .. } | DclError::Json { .. } | DclError::Format { .. } | DclError::Corrupt { .. } | DclError::Checkpoint { .. } => 2,
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Train { common, mode, out, checkpoint } => train(&common, mode, &out, checkpoint.as_deref()),
        Command::Eval { checkpoint, data, split } => eval(&checkpoint, &data, split),
        Command::Ablate { config, data, seeds, out } => ablate(config.as_deref(), data.as_deref(), &seeds, &out),
        Command::EmbedViz { checkpoint, data, out, split } => embed_viz(&checkpoint, &data, &out, split),
        Command::Gradcheck { config, mode, seed, corrupt_gradient } => run_gradcheck(config.as_deref(), mode, seed, corrupt_gradient),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
