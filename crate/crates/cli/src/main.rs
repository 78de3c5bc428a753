//! `carsa`: generate synthetic data, run the folds × trials protocol,
//! extract connectivity and verify gradients.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or data error,
//! 3 training failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use carsa::connectivity::{
    attention_fnc, block_stats, group_average, pearson_fnc, write_block_csv, write_fnc_csv,
};
use carsa::data::{
    gen_synthetic, load_dataset, load_domains, make_folds, write_synthetic, Dataset,
    SyntheticSpec, MANIFEST_FILE,
};
use carsa::model::load_checkpoint;
use carsa::training::{run_protocol, write_folds_csv, TrainConfig};
use carsa::verify::{run_checks, Fault, TOLERANCE};
use carsa::{Array, ModelConfig};

const SNAPSHOT_FILE: &str = "config.snapshot";

#[derive(Parser, Debug)]
#[command(name = "carsa", version, about = "CARSA experiment runner")]
struct Cli {
    /// Master seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (gen, train) or file (fnc).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic VAR(1) dataset.
    Gen(GenArgs),
    /// Run folds × trials training on a dataset.
    Train(TrainArgs),
    /// Write attention or Pearson connectivity, optionally with block means.
    Fnc(FncArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    subjects_per_class: usize,
    #[arg(long, default_value_t = 20)]
    components: usize,
    #[arg(long, default_value_t = 8)]
    important: usize,
    #[arg(long, default_value_t = 100)]
    timesteps: usize,
    #[arg(long, default_value_t = 0.35)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Fraction of ordered pairs of important components that are coupled.
    #[arg(long, default_value_t = 0.25)]
    edge_density: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Start from a previous run's config snapshot; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Trials to run at once.
    #[arg(long)]
    parallel_trials: Option<usize>,
}

#[derive(Args, Debug)]
struct FncArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Trained model; required unless --pearson.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Average over all subjects (or those of --label).
    #[arg(long, conflicts_with = "subject", required_unless_present = "subject")]
    group: bool,
    /// A single subject id.
    #[arg(long)]
    subject: Option<String>,
    /// Restrict --group to one class.
    #[arg(long, requires = "group")]
    label: Option<usize>,
    /// Pearson correlation instead of attention.
    #[arg(long)]
    pearson: bool,
    /// Domain map; also writes block means next to --out.
    #[arg(long)]
    blocks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Comma-separated subset of operations.
    #[arg(long, value_delimiter = ',')]
    ops: Option<Vec<String>>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Everything needed to rerun `train`.
#[derive(Serialize, Deserialize, Debug)]
struct Snapshot {
    data: PathBuf,
    parallel_trials: usize,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug)]
enum Failure {
    Verify(String),
    Usage(String),
    Training(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Training(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verify(m) | Failure::Usage(m) | Failure::Training(m) => m,
        }
    }
}

impl From<carsa::Error> for Failure {
    fn from(e: carsa::Error) -> Self {
        match e {
            carsa::Error::Diverged(_) => Failure::Training(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn required_out(out: Option<&Path>) -> std::result::Result<&Path, Failure> {
    out.ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path) -> std::result::Result<Dataset, Failure> {
    let manifest = manifest_path(data);
    if !manifest.is_file() {
        return Err(Failure::Usage(format!("manifest {} not found", manifest.display())));
    }
    Ok(load_dataset(&manifest)?)
}

fn cmd_gen(args: &GenArgs, seed: Option<u64>, out: Option<&Path>) -> CmdResult {
    let out = required_out(out)?;
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        subjects_per_class: args.subjects_per_class,
        components: args.components,
        important: args.important,
        timesteps: args.timesteps,
        beta: args.beta,
        sigma: args.sigma,
        edge_density: args.edge_density,
        seed: seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let synthetic = gen_synthetic(&spec)?;
    write_synthetic(&synthetic, out)?;
    println!(
        "wrote {} subjects ({} components × {} steps) to {}",
        synthetic.dataset.len(),
        synthetic.dataset.m,
        synthetic.dataset.t,
        out.display()
    );
    Ok(())
}

fn snapshot_for(args: &TrainArgs, seed: Option<u64>) -> std::result::Result<Snapshot, Failure> {
    let mut snap = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => Snapshot {
            data: args.data.clone(),
            parallel_trials: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        },
    };
    snap.data = args.data.clone();
    let t = &mut snap.train;
    if let Some(s) = seed {
        t.seed = s;
    }
    t.folds = args.folds.unwrap_or(t.folds);
    t.trials = args.trials.unwrap_or(t.trials);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.lr = args.lr.unwrap_or(t.lr);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    snap.parallel_trials = args.parallel_trials.unwrap_or(snap.parallel_trials).max(1);
    snap.model.validate()?;
    snap.train.validate()?;
    Ok(snap)
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>, out: Option<&Path>) -> CmdResult {
    let out = required_out(out)?;
    let snap = snapshot_for(args, seed)?;
    fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let json = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    let snap_path = out.join(SNAPSHOT_FILE);
    fs::write(&snap_path, json + "\n")
        .map_err(|e| Failure::Usage(format!("{}: {e}", snap_path.display())))?;

    let dataset = load(&snap.data)?;
    // Surface unusable subjects as a data error instead of per-trial failures.
    dataset.zscored()?;
    let t = &snap.train;
    let plan = make_folds(&dataset, t.seed, t.folds, t.trials)?;
    write_folds_csv(&dataset, &plan, &out.join("folds.csv"))?;

    let result = run_protocol(&dataset, &plan, &snap.model, t, Some(out), snap.parallel_trials)?;
    print!("{}", result.summary.to_text(&result.failures));
    if let Some(first) = result.failures.first() {
        return Err(Failure::Training(format!(
            "{} of {} trials failed; first: fold {} seed {}: {} (completed trials kept in {})",
            result.failures.len(),
            result.failures.len() + result.outcomes.len(),
            first.fold,
            first.seed,
            first.error,
            out.display()
        )));
    }
    Ok(())
}

fn blocks_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "fnc".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_blocks.csv"))
}

fn cmd_fnc(args: &FncArgs, out: Option<&Path>) -> CmdResult {
    let out = required_out(out)?;
    let dataset = load(&args.data)?;
    let checkpoint = match (&args.checkpoint, args.pearson) {
        (Some(path), false) => Some(load_checkpoint(path)?),
        (None, false) => {
            return Err(Failure::Usage("--checkpoint is required for attention FNC".into()))
        }
        (_, true) => None,
    };
    if let Some(label) = args.label {
        if label > 1 {
            return Err(Failure::Usage(format!("--label must be 0 or 1, got {label}")));
        }
    }

    let selected: Vec<usize> = match &args.subject {
        Some(id) => vec![dataset
            .position(id)
            .ok_or_else(|| Failure::Usage(format!("subject {id:?} not in dataset")))?],
        None => (0..dataset.len())
            .filter(|&i| args.label.is_none_or(|l| dataset.samples[i].label == l))
            .collect(),
    };
    if selected.is_empty() {
        return Err(Failure::Usage("no subjects selected".into()));
    }
    let mut maps = Vec::with_capacity(selected.len());
    for &i in &selected {
        let s = &dataset.samples[i];
        let m = match &checkpoint {
            Some(ckpt) => attention_fnc(ckpt, &s.x, &s.subject_id)?.matrix,
            None => pearson_fnc(&s.x)?,
        };
        maps.push(m);
    }
    let refs: Vec<&Array> = maps.iter().collect();
    let fnc = group_average(&refs)?;
    write_fnc_csv(out, &fnc)?;
    println!("wrote {}×{} matrix over {} subjects to {}", fnc.rows(), fnc.cols(), selected.len(), out.display());

    if let Some(domains_path) = &args.blocks {
        let domains = load_domains(domains_path, fnc.rows())?;
        let summary = block_stats(&fnc, &domains)?;
        let path = blocks_path(out);
        write_block_csv(&path, &summary)?;
        println!(
            "block means: important {:.4} noise {:.4} cross {:.4} ({})",
            summary.important,
            summary.noise,
            summary.cross,
            path.display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let fault = if args.inject_fault { Fault::Detach } else { Fault::None };
    let checks = run_checks(args.ops.as_deref(), fault)?;
    let mut bad = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<12} max rel err {:.3e} over {} points  {verdict}", c.name, c.max_rel_err, c.points);
        if !c.passed() {
            bad.push(c.name);
        }
    }
    if bad.is_empty() {
        println!("all {} checks within {TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "gradient check exceeded {TOLERANCE:e} for: {}",
            bad.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CARSA_LOG", "info")).init();
    let cli = Cli::parse();
    let out = cli.out.as_deref();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed, out),
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Fnc(a) => cmd_fnc(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
