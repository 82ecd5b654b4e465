//! Sweeps over training-set sizes or believed gravity, repeated over seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{transitions, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::{parameter_errors, traj_errors, MetricReport, VolumeConfig};
use crate::model::{content_hash, sample_initial_parameters, LearnedModel};
use crate::par::{self, Exec};
use crate::sim::{generate_dataset, Anitescu, Scenario, Stepper, Trajectory};
use crate::train::{split_dataset, train, Checkpoint, Method, Split, TrainConfig, TrainedModel, TrainedParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    /// Training trajectories per cell.
    TrainSize { values: Vec<usize> },
    /// Learner gravity as a fraction of the true value.
    GravityFraction { values: Vec<f64> },
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::TrainSize { .. } => "train_size",
            Sweep::GravityFraction { .. } => "gravity_fraction",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::TrainSize { values } => values.iter().map(|&v| v as f64).collect(),
            Sweep::GravityFraction { values } => values.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Sweep::TrainSize { values } if values.is_empty() || values.contains(&0) => Err(Error::Invalid(
                "train sizes must be a non-empty list of positive counts".into(),
            )),
            Sweep::GravityFraction { values }
                if values.is_empty() || values.iter().any(|f| !(0.0..=2.0).contains(f)) =>
            {
                Err(Error::Invalid(
                    "gravity fractions must be a non-empty list in [0, 2]".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

fn default_seeds() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub sweep: Sweep,
    /// Per-cell training settings; `seed` is the first cell seed.
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Seed of the generated dataset and its split.
    pub data_seed: u64,
    #[serde(default)]
    pub volume: VolumeConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if self.methods.is_empty() || self.seeds == 0 {
            return Err(Error::Invalid("need at least one method and one seed".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Training trajectories needed by the largest cell.
    pub fn max_train_size(&self) -> usize {
        match &self.sweep {
            Sweep::TrainSize { values } => values.iter().copied().max().unwrap_or(0),
            Sweep::GravityFraction { .. } => self.train.train_size,
        }
    }

    pub fn n_tosses(&self) -> usize {
        self.max_train_size() + self.train.val_size + self.train.test_size
    }
}

/// One (method, sweep value, seed) result. Metrics are empty when the cell
/// failed or the method has no physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: Method,
    pub sweep: String,
    pub sweep_value: f64,
    pub seed: u64,
    pub e_volume: Option<f64>,
    pub e_friction: Option<f64>,
    pub e_inertia: Option<f64>,
    pub traj_pos_error: Option<f64>,
    pub traj_rot_error: Option<f64>,
    pub n_test: usize,
    pub n_failed: usize,
    pub best_epoch: Option<usize>,
    pub status: String,
    pub config_hash: String,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "e_volume" => self.e_volume,
            "e_friction" => self.e_friction,
            "e_inertia" => self.e_inertia,
            "traj_pos_error" => self.traj_pos_error,
            "traj_rot_error" => self.traj_rot_error,
            _ => None,
        }
    }
}

pub const METRICS: [&str; 5] = [
    "e_volume",
    "e_friction",
    "e_inertia",
    "traj_pos_error",
    "traj_rot_error",
];

/// Wall time of one cell; kept apart from [`ResultRow`] so result tables are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: Method,
    pub sweep_value: f64,
    pub seed: u64,
    pub wall_time_s: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<CellTiming>,
}

#[derive(Debug, Clone, Serialize)]
struct CellKey<'a> {
    scenario: &'a Scenario,
    data_seed: u64,
    n_tosses: usize,
    method: Method,
    sweep: &'static str,
    sweep_value: f64,
    train: &'a TrainConfig,
    volume: &'a VolumeConfig,
}

struct Cell {
    method: Method,
    value: f64,
    cfg: TrainConfig,
    hash: String,
}

/// Rolls a trained model out on the test trajectories and scores it.
pub fn evaluate(
    params: &TrainedParams,
    scenario: &Scenario,
    test: &[Trajectory],
    volume: &VolumeConfig,
    exec: Exec,
) -> Result<MetricReport> {
    let desc = scenario.description();
    let structure = desc.kinematic_model();
    let (errs, param_errs) = match params {
        TrainedParams::Structured(m) => {
            let sim = Anitescu::from_learned(m, scenario.stepper);
            (
                traj_errors(&sim, &structure, test, exec)?,
                Some(parameter_errors(m, &desc, volume)?),
            )
        }
        TrainedParams::EndToEnd(net) => (traj_errors(net as &dyn Stepper, &structure, test, exec)?, None),
    };
    Ok(MetricReport {
        e_volume: param_errs.map(|e| e[0]),
        e_friction: param_errs.map(|e| e[1]),
        e_inertia: param_errs.map(|e| e[2]),
        traj_pos_error: errs.pos,
        traj_rot_error: errs.rot_deg,
        n_test: test.len(),
        n_failed: errs.failed,
    })
}

/// Learner initialization for one cell: sampled parameters with the believed
/// gravity scaled by `gravity_fraction`.
pub fn initial_model(scenario: &Scenario, seed: u64, gravity_fraction: f64) -> Result<LearnedModel> {
    let desc = scenario.description();
    let mut init = sample_initial_parameters(&desc, &mut ChaCha8Rng::seed_from_u64(seed))?;
    init.gravity = desc.gravity * gravity_fraction;
    Ok(init)
}

/// Split seeded by the dataset seed. Held-out sets depend only on the seed,
/// the number of trajectories and the held-out sizes; training uses the
/// first `train_size` of the remaining trajectories.
pub fn seeded_split(trajectories: &[Trajectory], data_seed: u64, cfg: &TrainConfig) -> Result<Split> {
    let held_out = cfg.val_size + cfg.test_size;
    if trajectories.len() <= held_out {
        return Err(Error::InsufficientData(format!(
            "{} trajectories cannot cover {held_out} held-out trajectories plus training data",
            trajectories.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(3);
    let mut split = split_dataset(
        trajectories,
        trajectories.len() - held_out,
        cfg.val_size,
        cfg.test_size,
        &mut rng,
    )?;
    split.train.truncate(cfg.train_size);
    Ok(split)
}

/// Generates the dataset once and splits it with the data seed.
pub fn experiment_split(cfg: &ExperimentConfig, exec: Exec) -> Result<Split> {
    let trajs = generate_dataset(&cfg.scenario, cfg.n_tosses(), cfg.data_seed, exec)?;
    let mut tc = cfg.train.clone();
    tc.train_size = cfg.max_train_size();
    seeded_split(&trajs, cfg.data_seed, &tc)
}

/// Runs every cell, reusing rows cached under `cache_dir` by cell hash.
/// A failing cell produces a row with an error status.
pub fn run_experiment(cfg: &ExperimentConfig, cache_dir: Option<&Path>, exec: Exec) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let mut cells = Vec::new();
    for value in cfg.sweep.values() {
        for &method in &cfg.methods {
            for i in 0..cfg.seeds {
                let mut tc = cfg.train.clone();
                tc.seed = cfg.train.seed + i as u64;
                if let Sweep::TrainSize { .. } = cfg.sweep {
                    tc.train_size = value as usize;
                }
                let key = CellKey {
                    scenario: &cfg.scenario,
                    data_seed: cfg.data_seed,
                    n_tosses: cfg.n_tosses(),
                    method,
                    sweep: cfg.sweep.name(),
                    sweep_value: value,
                    train: &tc,
                    volume: &cfg.volume,
                };
                let hash = content_hash(&key);
                cells.push(Cell {
                    method,
                    value,
                    cfg: tc,
                    hash,
                });
            }
        }
    }
    let cached: Vec<Option<ResultRow>> = cells
        .iter()
        .map(|c| cache_dir.and_then(|d| load_cached(&cell_path(d, &c.hash))))
        .collect();
    let split = if cached.iter().all(Option::is_some) {
        None
    } else {
        Some(experiment_split(cfg, exec)?)
    };
    // cells run in parallel; each cell runs its batches on its own thread
    let inner = if cells.len() > 1 { Exec::Sequential } else { exec };
    let pending: Vec<(usize, &Cell)> = cells.iter().enumerate().filter(|(i, _)| cached[*i].is_none()).collect();
    let fresh = par::map(exec, &pending, |(_, cell)| {
        let start = Instant::now();
        let split = split.as_ref().expect("split generated for pending cells");
        let row = run_cell(cfg, cell, split, &config_hash, inner);
        (row, start.elapsed().as_secs_f64())
    });
    let mut rows = Vec::with_capacity(cells.len());
    let mut timings = Vec::with_capacity(cells.len());
    let mut fresh = fresh.into_iter();
    for (cell, c) in cells.iter().zip(cached) {
        let (row, wall, was_cached) = match c {
            Some(mut r) => {
                r.config_hash = config_hash.clone();
                (r, 0.0, true)
            }
            None => {
                let (r, w) = fresh.next().expect("one fresh result per pending cell");
                if let Some(d) = cache_dir {
                    write_atomic(&cell_path(d, &cell.hash), &serde_json::to_vec_pretty(&r)?)?;
                }
                (r, w, false)
            }
        };
        timings.push(CellTiming {
            method: cell.method,
            sweep_value: cell.value,
            seed: cell.cfg.seed,
            wall_time_s: wall,
            cached: was_cached,
        });
        rows.push(row);
    }
    Ok(ExperimentOutput { rows, timings })
}

fn cell_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.json"))
}

fn load_cached(path: &Path) -> Option<ResultRow> {
    let bytes = std::fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Trains and evaluates one cell.
pub fn train_cell(
    cfg: &ExperimentConfig,
    method: Method,
    sweep_value: f64,
    train_cfg: &TrainConfig,
    split: &Split,
    exec: Exec,
) -> Result<(TrainedModel, MetricReport)> {
    let fraction = match cfg.sweep {
        Sweep::GravityFraction { .. } => sweep_value,
        Sweep::TrainSize { .. } => cfg.scenario.gravity_fraction,
    };
    let init = initial_model(&cfg.scenario, train_cfg.seed, fraction)?;
    let n_train = train_cfg.train_size.min(split.train.len());
    let tr = transitions(&split.train[..n_train])?;
    let va = transitions(&split.validation)?;
    let trained = train(method, &tr, &va, &init, train_cfg, exec)?;
    let report = evaluate(&trained.params, &cfg.scenario, &split.test, &cfg.volume, exec)?;
    Ok((trained, report))
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, split: &Split, config_hash: &str, exec: Exec) -> ResultRow {
    let mut row = ResultRow {
        scenario: cfg.scenario.kind.name().into(),
        method: cell.method,
        sweep: cfg.sweep.name().into(),
        sweep_value: cell.value,
        seed: cell.cfg.seed,
        e_volume: None,
        e_friction: None,
        e_inertia: None,
        traj_pos_error: None,
        traj_rot_error: None,
        n_test: split.test.len(),
        n_failed: 0,
        best_epoch: None,
        status: "ok".into(),
        config_hash: config_hash.into(),
    };
    match train_cell(cfg, cell.method, cell.value, &cell.cfg, split, exec) {
        Ok((trained, report)) => {
            row.e_volume = report.e_volume;
            row.e_friction = report.e_friction;
            row.e_inertia = report.e_inertia;
            row.traj_pos_error = Some(report.traj_pos_error);
            row.traj_rot_error = Some(report.traj_rot_error);
            row.n_failed = report.n_failed;
            row.best_epoch = Some(trained.best_epoch);
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Checkpoint of a cell's trained model.
pub fn cell_checkpoint(trained: &TrainedModel, cfg: &ExperimentConfig) -> Checkpoint {
    Checkpoint::from_trained(trained, &cfg.hash())
}

/// Half-width of the two-sided 95% Student-t interval of the mean:
/// `t(0.975, n−1)·s/√n`. `None` for fewer than two samples.
pub fn t_confidence_half_width(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?.inverse_cdf(0.975);
    Some(t * var.sqrt() / (n as f64).sqrt())
}

/// Mean and confidence interval of one metric in one (method, sweep value) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub sweep_value: f64,
    pub n: usize,
    pub mean: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub config_hash: String,
}

/// Per-metric summaries over successful cells, keyed by metric name.
pub fn summarize(rows: &[ResultRow]) -> BTreeMap<&'static str, Vec<SummaryRow>> {
    let mut out = BTreeMap::new();
    for metric in METRICS {
        let mut groups: Vec<((Method, f64), Vec<f64>, String)> = Vec::new();
        for r in rows {
            let key = (r.method, r.sweep_value);
            let idx = match groups.iter().position(|g| g.0 == key) {
                Some(i) => i,
                None => {
                    groups.push((key, Vec::new(), r.config_hash.clone()));
                    groups.len() - 1
                }
            };
            if let (true, Some(v)) = (r.ok(), r.metric(metric)) {
                groups[idx].1.push(v);
            }
        }
        let summary = groups
            .into_iter()
            .map(|((method, sweep_value), vals, config_hash)| {
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                let half = t_confidence_half_width(&vals);
                SummaryRow {
                    method,
                    sweep_value,
                    n: vals.len(),
                    mean,
                    ci_half_width: half,
                    ci_low: mean.zip(half).map(|(m, h)| m - h),
                    ci_high: mean.zip(half).map(|(m, h)| m + h),
                    config_hash,
                }
            })
            .collect();
        out.insert(metric, summary);
    }
    out
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_csv(rows, &mut out)?;
    Ok(out)
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}
