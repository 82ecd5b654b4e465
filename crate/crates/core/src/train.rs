//! Optimization loops for the four training methods.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{transitions, write_atomic};
use crate::error::{Error, Result};
use crate::losses::{
    batch_prediction_loss, e2e_loss_and_gradient, e2e_predict, prediction_gradient_fd, state_error,
    violation_gradient_prepared, violation_loss_prepared, FdConfig, LossWeights, PredictionConfig, PreparedModel,
    TransitionSample,
};
use crate::model::{content_hash, LearnedModel, ModelRecord};
use crate::nn::{EndToEndNet, InputMode, LayerRecord, Mlp, ResidualNet};
use crate::par::{self, Exec};
use crate::qp::SolverConfig;
use crate::sim::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ccn")]
    Ccn,
    #[serde(rename = "ccn-r")]
    CcnR,
    #[serde(rename = "diffsim")]
    DiffSim,
    #[serde(rename = "end-to-end")]
    EndToEnd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ccn, Method::CcnR, Method::DiffSim, Method::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ccn => "ccn",
            Method::CcnR => "ccn-r",
            Method::DiffSim => "diffsim",
            Method::EndToEnd => "end-to-end",
        }
    }

    /// Whether the method learns physical parameters.
    pub fn is_structured(self) -> bool {
        self != Method::EndToEnd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown method '{s}' (expected ccn, ccn-r, diffsim or end-to-end)"
            ))
        })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::Invalid("parameter, gradient and moment lengths differ".into()));
    }
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
    }
    Ok(())
}

fn default_lr_structured() -> f64 {
    1e-3
}
fn default_lr_network() -> f64 {
    1e-4
}
fn default_lr_residual() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    50
}
fn default_train_size() -> usize {
    256
}
fn default_holdout() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_lr_structured")]
    pub lr_structured: f64,
    /// End-to-end network learning rate.
    #[serde(default = "default_lr_network")]
    pub lr_network: f64,
    /// Residual network learning rate.
    #[serde(default = "default_lr_residual")]
    pub lr_residual: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub weights: LossWeights,
    /// Training trajectories.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_holdout")]
    pub val_size: usize,
    #[serde(default = "default_holdout")]
    pub test_size: usize,
    /// Limits the minibatches per epoch; `None` visits every sample.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    /// Limits the validation transitions; `None` uses all.
    #[serde(default)]
    pub max_val_samples: Option<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub fd: FdConfig,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub input_mode: InputMode,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            lr_structured: default_lr_structured(),
            lr_network: default_lr_network(),
            lr_residual: default_lr_residual(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            patience: default_patience(),
            weights: LossWeights::default(),
            train_size: default_train_size(),
            val_size: default_holdout(),
            test_size: default_holdout(),
            max_batches_per_epoch: None,
            max_val_samples: None,
            solver: SolverConfig::default(),
            fd: FdConfig::default(),
            prediction: PredictionConfig::default(),
            input_mode: InputMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
            ("test_size", self.test_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be ≥ 1")));
            }
        }
        if self.max_batches_per_epoch == Some(0) || self.max_val_samples == Some(0) {
            return Err(Error::Invalid("caps must be ≥ 1 when set".into()));
        }
        for (name, lr) in [
            ("lr_structured", self.lr_structured),
            ("lr_network", self.lr_network),
            ("lr_residual", self.lr_residual),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        self.weights.validate()
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Whole-trajectory split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Shuffles trajectory indices, then takes validation, test and train sets in
/// that order. Held-out sets do not depend on `train_size`, and smaller
/// training sets are prefixes of larger ones.
pub fn split_dataset<R: rand::Rng>(
    trajectories: &[Trajectory],
    train_size: usize,
    val_size: usize,
    test_size: usize,
    rng: &mut R,
) -> Result<Split> {
    let need = train_size + val_size + test_size;
    if trajectories.len() < need {
        return Err(Error::InsufficientData(format!(
            "{need} trajectories needed, {} available",
            trajectories.len()
        )));
    }
    let mut idx: Vec<usize> = (0..trajectories.len()).collect();
    idx.shuffle(rng);
    let pick = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| trajectories[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        validation: pick(0..val_size),
        test: pick(val_size..val_size + test_size),
        train: pick(val_size + test_size..need),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss; `None` at epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Samples whose gradient could not be computed this epoch.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedParams {
    Structured(LearnedModel),
    EndToEnd(EndToEndNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub method: Method,
    /// Parameters with the lowest validation loss seen.
    pub params: TrainedParams,
    pub history: Vec<EpochRecord>,
    /// Cumulative wall time at the end of each history entry (s).
    pub wall_time: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainedModel {
    pub fn structured(&self) -> Option<&LearnedModel> {
        match &self.params {
            TrainedParams::Structured(m) => Some(m),
            TrainedParams::EndToEnd(_) => None,
        }
    }
}

pub const CHECKPOINT_SCHEMA: &str = "sysid-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub input_mode: InputMode,
    pub layers: Vec<LayerRecord>,
}

/// Serialized [`TrainedModel`]. Wall times are left out so that identical
/// runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub method: Method,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkRecord>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_trained(t: &TrainedModel, config_hash: &str) -> Self {
        let (model, network) = match &t.params {
            TrainedParams::Structured(m) => (Some(m.to_record()), None),
            TrainedParams::EndToEnd(n) => (
                None,
                Some(NetworkRecord {
                    input_mode: n.input_mode,
                    layers: n.mlp.to_records(),
                }),
            ),
        };
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            method: t.method,
            config_hash: config_hash.into(),
            best_epoch: t.best_epoch,
            best_val_loss: t.best_val_loss,
            model,
            network,
            history: t.history.clone(),
        }
    }

    pub fn params(&self) -> Result<TrainedParams> {
        if self.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!(
                "unsupported checkpoint schema '{}'",
                self.schema
            )));
        }
        match (&self.model, &self.network) {
            (Some(m), None) => Ok(TrainedParams::Structured(LearnedModel::from_record(m)?)),
            (None, Some(n)) => Ok(TrainedParams::EndToEnd(EndToEndNet {
                mlp: Mlp::from_records(&n.layers)?,
                input_mode: n.input_mode,
            })),
            _ => Err(Error::Format(
                "checkpoint must hold exactly one of model or network".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Per-sample mean of gradient parts, reduced in order.
fn mean_of(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut g = par::sum_vectors(parts, len);
    let k = parts.len().max(1) as f64;
    for x in &mut g {
        *x /= k;
    }
    g
}

fn check_finite(epoch: usize, what: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            epoch,
            detail: format!("{what}[{i}] = {}", values[i]),
        });
    }
    Ok(())
}

/// The learnable state of a run.
enum Learner {
    Structured(LearnedModel),
    EndToEnd(EndToEndNet),
}

struct Optimizers {
    structured: AdamState,
    network: AdamState,
}

/// Trains `method` starting from `init` and returns the best-validation
/// parameters. `on_improve` runs after every validation improvement,
/// including the initial evaluation.
pub fn train_with_callback(
    method: Method,
    train: &[TransitionSample],
    validation: &[TransitionSample],
    init: &LearnedModel,
    cfg: &TrainConfig,
    exec: Exec,
    on_improve: &mut dyn FnMut(&TrainedModel) -> Result<()>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InsufficientData(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let start = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(2);
    let mut learner = match method {
        Method::Ccn | Method::DiffSim => Learner::Structured(LearnedModel {
            residual: None,
            ..init.clone()
        }),
        Method::CcnR => {
            let mut m = init.clone();
            if m.residual.is_none() {
                m.residual = Some(ResidualNet::new(m.n_joints(), &mut init_rng));
            }
            Learner::Structured(m)
        }
        Method::EndToEnd => Learner::EndToEnd(EndToEndNet::new(init.n_joints(), cfg.input_mode, &mut init_rng)),
    };
    if let Learner::Structured(m) = &learner {
        if method == Method::DiffSim && m.structured_params().len() > cfg.fd.max_params {
            return Err(Error::ParameterCap {
                count: m.structured_params().len(),
                cap: cfg.fd.max_params,
            });
        }
    }
    let val_set = &validation[..cfg
        .max_val_samples
        .map_or(validation.len(), |c| c.min(validation.len()))];

    let mut opt = Optimizers {
        structured: AdamState::new(match &learner {
            Learner::Structured(m) => m.n_structured(),
            Learner::EndToEnd(_) => 0,
        }),
        network: AdamState::new(match &learner {
            Learner::Structured(m) => m.residual.as_ref().map_or(0, |r| r.mlp.n_params()),
            Learner::EndToEnd(n) => n.mlp.n_params(),
        }),
    };
    let structured_hyper = AdamConfig {
        lr: cfg.lr_structured,
        ..AdamConfig::default()
    };
    let network_hyper = AdamConfig {
        lr: if method == Method::EndToEnd {
            cfg.lr_network
        } else {
            cfg.lr_residual
        },
        ..AdamConfig::default()
    };

    let val0 = validation_loss(method, &learner, val_set, cfg, exec)?;
    check_finite(0, "validation loss", &[val0])?;
    let mut out = TrainedModel {
        method,
        params: snapshot(&learner),
        history: vec![EpochRecord {
            epoch: 0,
            train_loss: None,
            val_loss: val0,
            skipped: 0,
        }],
        wall_time: vec![start.elapsed().as_secs_f64()],
        best_epoch: 0,
        best_val_loss: val0,
    };
    on_improve(&out)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let n_batches = cfg
            .max_batches_per_epoch
            .unwrap_or(usize::MAX)
            .min(order.len().div_ceil(cfg.batch_size));
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(cfg.batch_size).take(n_batches) {
            let batch: Vec<&TransitionSample> = chunk.iter().map(|&i| &train[i]).collect();
            let step = batch_step(
                method,
                &mut learner,
                &batch,
                cfg,
                exec,
                &mut opt,
                &structured_hyper,
                &network_hyper,
                epoch,
            )?;
            skipped += step.skipped;
            if let Some(l) = step.loss {
                loss_sum += l;
                loss_batches += 1;
            }
        }
        let val = validation_loss(method, &learner, val_set, cfg, exec)?;
        if val.is_nan() {
            return Err(Error::Diverged {
                epoch,
                detail: "validation loss is NaN".into(),
            });
        }
        out.history.push(EpochRecord {
            epoch,
            train_loss: (loss_batches > 0).then(|| loss_sum / loss_batches as f64),
            val_loss: val,
            skipped,
        });
        out.wall_time.push(start.elapsed().as_secs_f64());
        if val < out.best_val_loss {
            out.best_val_loss = val;
            out.best_epoch = epoch;
            out.params = snapshot(&learner);
            since_best = 0;
            on_improve(&out)?;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(out)
}

pub fn train(
    method: Method,
    train: &[TransitionSample],
    validation: &[TransitionSample],
    init: &LearnedModel,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainedModel> {
    train_with_callback(method, train, validation, init, cfg, exec, &mut |_| Ok(()))
}

/// Splits trajectories and trains on their transitions.
pub fn train_on_split(
    method: Method,
    split: &Split,
    init: &LearnedModel,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainedModel> {
    let tr = transitions(&split.train)?;
    let va = transitions(&split.validation)?;
    train(method, &tr, &va, init, cfg, exec)
}

fn snapshot(l: &Learner) -> TrainedParams {
    match l {
        Learner::Structured(m) => TrainedParams::Structured(m.clone()),
        Learner::EndToEnd(n) => TrainedParams::EndToEnd(n.clone()),
    }
}

struct BatchOutcome {
    loss: Option<f64>,
    skipped: usize,
}

#[allow(clippy::too_many_arguments)]
fn batch_step(
    method: Method,
    learner: &mut Learner,
    batch: &[&TransitionSample],
    cfg: &TrainConfig,
    exec: Exec,
    opt: &mut Optimizers,
    structured_hyper: &AdamConfig,
    network_hyper: &AdamConfig,
    epoch: usize,
) -> Result<BatchOutcome> {
    match (method, learner) {
        (Method::Ccn | Method::CcnR, Learner::Structured(model)) => {
            let w = &cfg.weights;
            let results = {
                let pm = PreparedModel::new(model);
                par::map(exec, batch, |s| violation_gradient_prepared(&pm, s, w, &cfg.solver))
            };
            let mut ok = Vec::with_capacity(results.len());
            let mut skipped = 0;
            for r in results {
                match r {
                    Ok(g) => ok.push(g),
                    Err(Error::NotConverged { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if ok.is_empty() {
                return Ok(BatchOutcome { loss: None, skipped });
            }
            let k = ok.len() as f64;
            let mut loss = ok.iter().map(|g| g.loss).sum::<f64>() / k;
            let structured: Vec<Vec<f64>> = ok.iter().map(|g| g.structured.clone()).collect();
            let gs = mean_of(&structured, model.n_structured());
            check_finite(epoch, "structured gradient", &gs)?;
            let mut p = model.structured_params();
            adam_step(&mut p, &gs, &mut opt.structured, structured_hyper)?;
            if let Some(net) = model.residual.as_mut() {
                let parts: Vec<Vec<f64>> = ok.iter().filter_map(|g| g.residual.clone()).collect();
                let mut gr = mean_of(&parts, net.mlp.n_params());
                if w.w_res_w > 0.0 {
                    loss += w.w_res_w * net.mlp.weight_norm_sq();
                    for (g, d) in gr.iter_mut().zip(net.mlp.weight_norm_grad()) {
                        *g += w.w_res_w * d;
                    }
                }
                check_finite(epoch, "residual gradient", &gr)?;
                let mut r = net.mlp.params();
                adam_step(&mut r, &gr, &mut opt.network, network_hyper)?;
                check_finite(epoch, "residual parameters", &r)?;
                net.mlp.set_params(&r);
            }
            finish_structured(model, &mut p, epoch)?;
            check_finite(epoch, "training loss", &[loss])?;
            Ok(BatchOutcome {
                loss: Some(loss),
                skipped,
            })
        }
        (Method::DiffSim, Learner::Structured(model)) => {
            let owned: Vec<TransitionSample> = batch.iter().map(|s| (*s).clone()).collect();
            let loss = match batch_prediction_loss(&owned, model, &cfg.prediction, exec) {
                Ok(l) => l,
                Err(Error::ParameterCap { count, cap }) => return Err(Error::ParameterCap { count, cap }),
                Err(_) => {
                    return Ok(BatchOutcome {
                        loss: None,
                        skipped: batch.len(),
                    })
                }
            };
            let g = match prediction_gradient_fd(&owned, model, &cfg.prediction, &cfg.fd, exec) {
                Ok(g) => g,
                Err(Error::ParameterCap { count, cap }) => return Err(Error::ParameterCap { count, cap }),
                Err(_) => {
                    return Ok(BatchOutcome {
                        loss: None,
                        skipped: batch.len(),
                    })
                }
            };
            check_finite(epoch, "training loss", &[loss])?;
            check_finite(epoch, "finite-difference gradient", &g)?;
            let mut p = model.structured_params();
            adam_step(&mut p, &g, &mut opt.structured, structured_hyper)?;
            finish_structured(model, &mut p, epoch)?;
            Ok(BatchOutcome {
                loss: Some(loss),
                skipped: 0,
            })
        }
        (Method::EndToEnd, Learner::EndToEnd(net)) => {
            let parts = par::map(exec, batch, |s| e2e_loss_and_gradient(net, s, &cfg.prediction));
            let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
            check_finite(epoch, "training loss", &[loss])?;
            let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
            let g = mean_of(&grads, net.mlp.n_params());
            check_finite(epoch, "network gradient", &g)?;
            let mut r = net.mlp.params();
            adam_step(&mut r, &g, &mut opt.network, network_hyper)?;
            check_finite(epoch, "network parameters", &r)?;
            net.mlp.set_params(&r);
            Ok(BatchOutcome {
                loss: Some(loss),
                skipped: 0,
            })
        }
        _ => unreachable!("learner kind always matches its method"),
    }
}

/// Clamps friction at zero and writes the parameters back.
fn finish_structured(model: &mut LearnedModel, p: &mut [f64], epoch: usize) -> Result<()> {
    check_finite(epoch, "structured parameters", p)?;
    let mu = model.mu_index();
    p[mu] = p[mu].max(0.0);
    model.set_structured_params(p);
    Ok(())
}

/// The method's own loss, averaged over the validation transitions.
fn validation_loss(
    method: Method,
    learner: &Learner,
    val: &[TransitionSample],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<f64> {
    let n = val.len() as f64;
    match learner {
        Learner::Structured(model) => match method {
            Method::DiffSim => {
                let sim = crate::sim::Anitescu::from_learned(model, cfg.prediction.stepper);
                // failed steps are excluded; a model that cannot step at all scores +inf
                let parts = par::map(exec, val, |s| {
                    sim.step_full(&s.x_k, s.dt)
                        .ok()
                        .map(|o| state_error(&o.next, &s.x_k1, &cfg.prediction))
                });
                let ok: Vec<f64> = parts.into_iter().flatten().collect();
                Ok(if ok.is_empty() {
                    f64::INFINITY
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                })
            }
            _ => {
                let pm = PreparedModel::new(model);
                let parts = par::map(exec, val, |s| {
                    violation_loss_prepared(&pm, s, &cfg.weights, &cfg.solver)
                });
                let mut total = 0.0;
                for p in parts {
                    total += p?;
                }
                let reg = model
                    .residual
                    .as_ref()
                    .map_or(0.0, |r| cfg.weights.w_res_w * r.mlp.weight_norm_sq());
                Ok(total / n + reg)
            }
        },
        Learner::EndToEnd(net) => {
            let parts = par::map(exec, val, |s| {
                state_error(&e2e_predict(net, &s.x_k, s.dt), &s.x_k1, &cfg.prediction)
            });
            Ok(parts.iter().sum::<f64>() / n)
        }
    }
}
