//! `sysid`: dataset generation, training, evaluation and sweeps.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sysid_core::dataset::{transitions, write_atomic, Dataset};
use sysid_core::experiment::{
    csv_bytes, evaluate, initial_model, run_experiment, seeded_split, summarize, ExperimentConfig,
};
use sysid_core::model::{content_hash, LearnedModel};
use sysid_core::par::Exec;
use sysid_core::train::{train_with_callback, Checkpoint, Method, TrainedModel, TrainedParams};

use config::CliConfig;

#[derive(Parser, Debug)]
#[command(
    name = "sysid",
    version,
    about = "Contact-implicit system identification experiments"
)]
struct Cli {
    /// Directory for outputs given as relative paths.
    #[arg(long, global = true, env = "SYSID_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (default: logical core count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate tosses of the configured scenario and write a dataset file.
    GenData(GenDataArgs),
    /// Train one method on a dataset and write a checkpoint plus history.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Run a full sweep over seeds and sweep values.
    Sweep(SweepArgs),
    /// Print summaries of datasets, checkpoints or models.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "dataset.jsonl")]
    out: PathBuf,
    /// Overrides the config's data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of tosses.
    #[arg(long)]
    tosses: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value = "checkpoint.json")]
    out: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from this checkpoint instead of a sampled initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Supplies held-out sizes and volume settings; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output subdirectory for tables and the cell cache.
    #[arg(long, default_value = "sweep")]
    name: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Built-in model name (cube, asymmetric, articulated) or model file.
    #[arg(long)]
    model: Option<String>,
    /// Write a checkpoint holding the configured ground truth.
    #[arg(long, requires = "config")]
    truth_checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let pool = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn output_path(cli: &Cli, p: &Path) -> PathBuf {
    cli.out_dir.join(p)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
        Command::Inspect(a) => inspect_cmd(cli, a),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<ExitCode> {
    let cfg = CliConfig::load(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.data_seed);
    let n = a.tosses.unwrap_or_else(|| cfg.n_tosses());
    let ds = Dataset::generate(&cfg.scenario, n, seed, exec(cli))?;
    let out = output_path(cli, &a.out);
    ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    println!("scenario      {}", cfg.scenario.kind.name());
    println!("tosses        {}", ds.trajectories.len());
    println!("steps         {}", ds.n_transitions());
    println!("contact steps {}", ds.contact_steps());
    println!("config hash   {}", ds.header.config_hash);
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: Option<f64>,
    val_loss: f64,
    skipped: usize,
    wall_time_s: f64,
    config_hash: String,
}

fn history_rows(t: &TrainedModel, hash: &str) -> Vec<HistoryRow> {
    t.history
        .iter()
        .zip(&t.wall_time)
        .map(|(h, w)| HistoryRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
            skipped: h.skipped,
            wall_time_s: *w,
            config_hash: hash.into(),
        })
        .collect()
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let cfg = CliConfig::load(&a.config)?;
    let mut tc = cfg.train_config()?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let ds = load_dataset(&a.data)?;
    let expected = cfg.scenario.description().hash();
    if ds.header.model_hash != expected {
        bail!(
            "dataset model does not match the configured model (hash {} vs {expected})",
            ds.header.model_hash
        );
    }
    let split = seeded_split(&ds.trajectories, ds.header.seed, &tc)?;
    let init: LearnedModel = match &a.init {
        Some(p) => match Checkpoint::load(p)?.params()? {
            TrainedParams::Structured(m) => m,
            TrainedParams::EndToEnd(_) => bail!("--init needs a checkpoint with physical parameters"),
        },
        None => initial_model(&cfg.scenario, tc.seed, cfg.scenario.gravity_fraction)?,
    };
    let hash = content_hash(&(&cfg.scenario, &tc, a.method, ds.header.config_hash.as_str()));
    let out = output_path(cli, &a.out);
    let tr = transitions(&split.train)?;
    let va = transitions(&split.validation)?;
    let trained = train_with_callback(a.method, &tr, &va, &init, &tc, exec(cli), &mut |t| {
        Checkpoint::from_trained(t, &hash).save(&out)
    })?;
    Checkpoint::from_trained(&trained, &hash).save(&out)?;
    let hist = out.with_extension("history.csv");
    write_atomic(&hist, &csv_bytes(&history_rows(&trained, &hash))?)?;
    println!("wrote {} and {}", out.display(), hist.display());
    println!(
        "method {} best epoch {} of {} validation loss {:.6e}",
        trained.method,
        trained.best_epoch,
        trained.history.len() - 1,
        trained.best_val_loss
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalRow {
    checkpoint: String,
    method: Method,
    e_volume: Option<f64>,
    e_friction: Option<f64>,
    e_inertia: Option<f64>,
    traj_pos_error: f64,
    traj_rot_error: f64,
    n_test: usize,
    n_failed: usize,
    config_hash: String,
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<ExitCode> {
    let ck =
        Checkpoint::load(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let params = ck.params()?;
    let ds = load_dataset(&a.data)?;
    let (tc, volume) = match &a.config {
        Some(p) => {
            let c = CliConfig::load(p)?;
            (c.train_config()?, c.volume)
        }
        None => (sysid_core::train::TrainConfig::new(0), Default::default()),
    };
    if let TrainedParams::Structured(m) = &params {
        let truth = ds.header.model.true_model()?;
        if m.vertices.iter().map(Vec::len).ne(truth.vertices.iter().map(Vec::len))
            || m.joint.is_some() != truth.joint.is_some()
        {
            bail!("checkpoint structure does not match the dataset's model");
        }
    }
    let split = seeded_split(&ds.trajectories, ds.header.seed, &tc)?;
    let r = evaluate(&params, &ds.header.scenario, &split.test, &volume, exec(cli))?;
    let row = EvalRow {
        checkpoint: a.checkpoint.display().to_string(),
        method: ck.method,
        e_volume: r.e_volume,
        e_friction: r.e_friction,
        e_inertia: r.e_inertia,
        traj_pos_error: r.traj_pos_error,
        traj_rot_error: r.traj_rot_error,
        n_test: r.n_test,
        n_failed: r.n_failed,
        config_hash: ck.config_hash.clone(),
    };
    let bytes = match a.format {
        Format::Csv => csv_bytes(&[&row])?,
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(&row)?;
            v.push(b'\n');
            v
        }
    };
    match &a.out {
        Some(p) => {
            let out = output_path(cli, p);
            write_atomic(&out, &bytes)?;
            eprintln!("wrote {}", out.display());
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<ExitCode> {
    let cfg = CliConfig::load(&a.config)?;
    let exp: ExperimentConfig = cfg.experiment()?;
    let dir = output_path(cli, &a.name);
    let cache = dir.join("cache");
    fs::create_dir_all(&cache)?;
    let out = run_experiment(&exp, Some(&cache), exec(cli))?;
    write_atomic(&dir.join("results.csv"), &csv_bytes(&out.rows)?)?;
    #[derive(Serialize)]
    struct TimingRow<'a> {
        method: Method,
        sweep_value: f64,
        seed: u64,
        wall_time_s: f64,
        cached: bool,
        config_hash: &'a str,
    }
    let hash = exp.hash();
    let timings: Vec<TimingRow> = out
        .timings
        .iter()
        .map(|t| TimingRow {
            method: t.method,
            sweep_value: t.sweep_value,
            seed: t.seed,
            wall_time_s: t.wall_time_s,
            cached: t.cached,
            config_hash: &hash,
        })
        .collect();
    write_atomic(&dir.join("timings.csv"), &csv_bytes(&timings)?)?;
    for (metric, rows) in summarize(&out.rows) {
        write_atomic(&dir.join(format!("summary_{metric}.csv")), &csv_bytes(&rows)?)?;
    }
    let ok = out.rows.iter().filter(|r| r.ok()).count();
    println!(
        "{} cells, {} succeeded; tables in {}",
        out.rows.len(),
        ok,
        dir.display()
    );
    for r in out.rows.iter().filter(|r| !r.ok()) {
        eprintln!("cell {} {} seed {}: {}", r.method, r.sweep_value, r.seed, r.status);
    }
    Ok(if ok > 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn inspect_cmd(cli: &Cli, a: &InspectArgs) -> Result<ExitCode> {
    let mut any = false;
    if let Some(p) = &a.data {
        any = true;
        let ds = load_dataset(p)?;
        let h = &ds.header;
        println!("dataset {}", p.display());
        println!("  schema        {}", h.schema);
        println!("  scenario      {}", h.scenario.kind.name());
        println!("  model         {} ({} bodies)", h.model.name, h.model.bodies.len());
        println!("  seed          {}", h.seed);
        println!("  dt            {}", h.dt);
        println!("  tosses        {}", ds.trajectories.len());
        println!("  steps         {}", ds.n_transitions());
        println!("  contact steps {}", ds.contact_steps());
        println!("  config hash   {}", h.config_hash);
    }
    if let Some(p) = &a.checkpoint {
        any = true;
        let ck = Checkpoint::load(p)?;
        println!("checkpoint {}", p.display());
        println!("  method        {}", ck.method);
        println!(
            "  best epoch    {} of {}",
            ck.best_epoch,
            ck.history.len().saturating_sub(1)
        );
        println!("  val loss      {:.6e}", ck.best_val_loss);
        println!("  config hash   {}", ck.config_hash);
        match ck.params()? {
            TrainedParams::Structured(m) => print_model(&m),
            TrainedParams::EndToEnd(n) => println!("  network       {} parameters", n.mlp.n_params()),
        }
    }
    if let Some(name) = &a.model {
        any = true;
        let desc = config::load_model(name)?;
        print!("{}", desc.to_toml_string()?);
    }
    if let Some(out) = &a.truth_checkpoint {
        any = true;
        let cfg = CliConfig::load(a.config.as_ref().expect("clap enforces --config"))?;
        let truth = cfg.scenario.description().true_model()?;
        let t = TrainedModel {
            method: Method::Ccn,
            params: TrainedParams::Structured(truth),
            history: Vec::new(),
            wall_time: Vec::new(),
            best_epoch: 0,
            best_val_loss: 0.0,
        };
        let out = output_path(cli, out);
        Checkpoint::from_trained(&t, &content_hash(&cfg.scenario)).save(&out)?;
        println!("wrote {}", out.display());
    }
    if !any {
        eprintln!("inspect: nothing to show; pass --data, --checkpoint, --model or --truth-checkpoint");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_model(m: &LearnedModel) {
    println!("  friction      {:.6}", m.mu);
    println!("  gravity       {:.6}", m.gravity);
    for (i, b) in m.inertias().iter().enumerate() {
        println!("  body {i} mass  {:.6} com {:?}", b.mass, b.com.as_slice());
    }
    println!("  residual      {}", if m.residual.is_some() { "yes" } else { "no" });
}
