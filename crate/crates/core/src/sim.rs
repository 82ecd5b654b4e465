//! Convex time stepping, rollouts and synthetic toss generation.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contact_jacobian, signed_distances, ContactImpulse};
use crate::model::{random_rotation, LearnedModel, ModelDescription};
use crate::multibody::{
    configuration_step, dynamics, AccelerationField, Configuration, KinematicModel, State, Velocity,
};
use crate::nn::ResidualNet;
use crate::par::{self, Exec};
use crate::qp::{solve_factored_cone_qp, SolverConfig};

/// Field pulling towards and swirling around a fixed line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VortexParams {
    pub axis_point: [f64; 3],
    pub axis_direction: [f64; 3],
    /// Radial gain (1/s²).
    pub k_r: f64,
    /// Swirl gain (1/s²).
    pub k_s: f64,
    /// Optional exponential decay with height above the ground (m).
    pub decay_length: Option<f64>,
}

impl Default for VortexParams {
    fn default() -> Self {
        Self {
            axis_point: [0.0; 3],
            axis_direction: [0.0, 0.0, 1.0],
            k_r: 5.0,
            k_s: 3.0,
            decay_length: None,
        }
    }
}

pub fn vortex_acceleration(p: &Vector3<f64>, params: &VortexParams) -> Vector3<f64> {
    let d = Vector3::from(params.axis_direction).normalize();
    let rel = p - Vector3::from(params.axis_point);
    let r = rel - d * rel.dot(&d);
    let mut a = -params.k_r * r + params.k_s * d.cross(&r);
    if let Some(len) = params.decay_length {
        a *= (-p.z.max(0.0) / len).exp();
    }
    a
}

impl AccelerationField for VortexParams {
    fn acceleration(&self, p: &Vector3<f64>) -> Vector3<f64> {
        vortex_acceleration(p, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepperConfig {
    /// Diagonal regularization of the contact Hessian.
    pub epsilon: f64,
    /// Penetration stabilization gain.
    pub kappa: f64,
    pub solver: SolverConfig,
    /// Largest KKT residual accepted when the solver runs out of iterations.
    pub accept_residual: f64,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-10,
            kappa: 0.1,
            solver: SolverConfig::default(),
            accept_residual: 1e-6,
        }
    }
}

/// Anything that advances a state by one step.
pub trait Stepper: Sync {
    fn step(&self, x: &State, dt: f64) -> Result<State>;
}

/// A model prepared for simulation.
pub struct Anitescu<'a> {
    pub model: KinematicModel,
    pub mu: f64,
    pub residual: Option<&'a ResidualNet>,
    pub field: Option<&'a dyn AccelerationField>,
    pub cfg: StepperConfig,
}

/// Result of one stepper call.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub next: State,
    pub impulse: ContactImpulse,
    pub iterations: usize,
}

impl<'a> Anitescu<'a> {
    pub fn from_learned(m: &'a LearnedModel, cfg: StepperConfig) -> Self {
        Self {
            model: m.kinematic_model(),
            mu: m.mu,
            residual: m.residual.as_ref(),
            field: None,
            cfg,
        }
    }

    pub fn with_field(mut self, field: &'a dyn AccelerationField) -> Self {
        self.field = Some(field);
        self
    }

    pub fn step_full(&self, x: &State, dt: f64) -> Result<StepOutput> {
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        self.model.check_state(x)?;
        let dynm = dynamics(&self.model, x, self.field)?;
        let mut accel = dynm.accel.clone();
        if let Some(net) = self.residual {
            accel += net.forward(x);
        }
        let v = x.v.to_dvector();
        let v_free = &v + &accel * dt;
        let phi = signed_distances(&self.model, &x.q);
        let jac = contact_jacobian(&self.model, &x.q);
        let p = phi.len();
        let minv_jt = dynm.chol.solve(&jac.transpose());
        // J·M⁻¹·Jᵀ = A·Aᵀ with A = J·L⁻ᵀ
        let l = dynm.chol.l();
        let a = l
            .solve_lower_triangular(&jac.transpose())
            .ok_or(Error::SingularMassMatrix)?
            .transpose();
        let w0 = l.transpose() * &v_free;
        let mut d = DVector::zeros(3 * p);
        for i in 0..p {
            d[i] = if phi[i] >= 0.0 {
                phi[i] / dt
            } else {
                self.cfg.kappa * phi[i] / dt
            };
        }
        let sol = solve_factored_cone_qp(&a, &w0, &d, self.cfg.epsilon, self.mu, &self.cfg.solver);
        if !sol.converged && !(sol.kkt_residual <= self.cfg.accept_residual) {
            return Err(Error::MaxIterations {
                iterations: sol.iterations,
                residual: sol.kkt_residual,
            });
        }
        let v_next = v_free + &minv_jt * &sol.lambda;
        if v_next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("non-finite velocity".into()));
        }
        let v_next = Velocity::from_slice(v_next.as_slice());
        let q_next = configuration_step(&x.q, &v_next, dt);
        Ok(StepOutput {
            next: State { q: q_next, v: v_next },
            impulse: ContactImpulse(sol.lambda),
            iterations: sol.iterations,
        })
    }
}

impl Stepper for Anitescu<'_> {
    fn step(&self, x: &State, dt: f64) -> Result<State> {
        Ok(self.step_full(x, dt)?.next)
    }
}

pub fn anitescu_step(sim: &Anitescu<'_>, x: &State, dt: f64) -> Result<(State, ContactImpulse)> {
    let out = sim.step_full(x, dt)?;
    Ok((out.next, out.impulse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub dt: f64,
    /// Number of steps with a nonzero contact impulse, when known.
    pub contact_steps: usize,
}

/// Iterates a stepper from `x0`.
pub fn rollout<S: Stepper + ?Sized>(stepper: &S, x0: &State, n_steps: usize, dt: f64) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Invalid("rollout needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    for k in 0..n_steps {
        let next = stepper.step(&states[k], dt).map_err(|e| Error::Rollout {
            step: k,
            source: Box::new(e),
        })?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        dt,
        contact_steps: 0,
    })
}

/// Rollout that also records contact activity.
pub fn rollout_with_contacts(sim: &Anitescu<'_>, x0: &State, n_steps: usize, dt: f64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut contact_steps = 0;
    for k in 0..n_steps {
        let out = sim.step_full(&states[k], dt).map_err(|e| Error::Rollout {
            step: k,
            source: Box::new(e),
        })?;
        if (0..out.impulse.n_contacts()).any(|i| out.impulse.normal(i) > 0.0) {
            contact_steps += 1;
        }
        states.push(out.next);
    }
    Ok(Trajectory {
        states,
        dt,
        contact_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CubeToss,
    ArticulatedToss,
    VortexAsymmetric,
    GravityScale,
}

impl ScenarioKind {
    pub fn default_model(self) -> ModelDescription {
        match self {
            ScenarioKind::CubeToss => ModelDescription::cube(),
            ScenarioKind::ArticulatedToss | ScenarioKind::GravityScale => ModelDescription::articulated(),
            ScenarioKind::VortexAsymmetric => ModelDescription::asymmetric(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CubeToss => "cube_toss",
            ScenarioKind::ArticulatedToss => "articulated_toss",
            ScenarioKind::VortexAsymmetric => "vortex_asymmetric",
            ScenarioKind::GravityScale => "gravity_scale",
        }
    }
}

/// Distribution of initial toss states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TossDistribution {
    /// Base height range (m).
    pub height: [f64; 2],
    /// Half-width of the square of initial horizontal positions (m).
    pub horizontal_extent: f64,
    pub max_angular_speed: f64,
    pub max_horizontal_speed: f64,
    pub vertical_speed: [f64; 2],
    pub max_joint_angle: f64,
    pub max_joint_rate: f64,
}

impl Default for TossDistribution {
    fn default() -> Self {
        Self {
            height: [0.2, 0.5],
            horizontal_extent: 0.3,
            max_angular_speed: 15.0,
            max_horizontal_speed: 1.0,
            vertical_speed: [-0.5, 0.5],
            max_joint_angle: std::f64::consts::FRAC_PI_2,
            max_joint_rate: 2.0,
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    Vector3::new(s * phi.cos(), s * phi.sin(), z)
}

impl TossDistribution {
    pub fn sample<R: Rng>(&self, n_joints: usize, rng: &mut R) -> State {
        let e = self.horizontal_extent;
        let position = Vector3::new(
            rng.gen_range(-e..=e),
            rng.gen_range(-e..=e),
            rng.gen_range(self.height[0]..=self.height[1]),
        );
        let orientation = random_rotation(rng);
        let angular = random_direction(rng) * rng.gen_range(0.0..=self.max_angular_speed);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.0..=self.max_horizontal_speed);
        let linear = Vector3::new(
            speed * heading.cos(),
            speed * heading.sin(),
            rng.gen_range(self.vertical_speed[0]..=self.vertical_speed[1]),
        );
        let joint_angles = (0..n_joints)
            .map(|_| rng.gen_range(-self.max_joint_angle..=self.max_joint_angle))
            .collect();
        let joint_rates = (0..n_joints)
            .map(|_| rng.gen_range(-self.max_joint_rate..=self.max_joint_rate))
            .collect();
        State {
            q: Configuration {
                position,
                orientation,
                joint_angles,
            },
            v: Velocity {
                angular,
                linear,
                joint_rates,
            },
        }
    }
}

/// A data-generation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Ground-truth object; defaults to the scenario's built-in model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelDescription>,
    /// Vortex field acting on the ground truth (vortex scenario only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vortex: Option<VortexParams>,
    /// Fraction of the true gravity believed by the learner.
    #[serde(default = "one")]
    pub gravity_fraction: f64,
    #[serde(default)]
    pub tosses: TossDistribution,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_steps")]
    pub steps_per_toss: usize,
    #[serde(default)]
    pub stepper: StepperConfig,
    /// Attempts per toss before giving up on finding a contact event.
    #[serde(default = "default_resample_cap")]
    pub resample_cap: usize,
}

fn one() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    0.01
}

fn default_steps() -> usize {
    75
}

fn default_resample_cap() -> usize {
    100
}

impl Scenario {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            model: None,
            vortex: (kind == ScenarioKind::VortexAsymmetric).then(VortexParams::default),
            gravity_fraction: 1.0,
            tosses: TossDistribution::default(),
            dt: default_dt(),
            steps_per_toss: default_steps(),
            stepper: StepperConfig::default(),
            resample_cap: default_resample_cap(),
        }
    }

    /// Field acting on the ground truth; the vortex scenario falls back to the
    /// default field when none is configured.
    pub fn field(&self) -> Option<VortexParams> {
        self.vortex
            .or_else(|| (self.kind == ScenarioKind::VortexAsymmetric).then(VortexParams::default))
    }

    pub fn description(&self) -> ModelDescription {
        self.model.clone().unwrap_or_else(|| self.kind.default_model())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Invalid("dt must be positive".into()));
        }
        if self.steps_per_toss == 0 {
            return Err(Error::Invalid("steps_per_toss must be ≥ 1".into()));
        }
        if !(0.0..=2.0).contains(&self.gravity_fraction) {
            return Err(Error::Invalid(format!(
                "gravity fraction {} outside [0, 2]",
                self.gravity_fraction
            )));
        }
        let t = &self.tosses;
        if !(t.height[0] > 0.0 && t.height[0] <= t.height[1]) {
            return Err(Error::Invalid("toss height range must be positive and ordered".into()));
        }
        if let Some(v) = &self.vortex {
            if ![v.k_r, v.k_s].iter().all(|g| g.is_finite()) {
                return Err(Error::Invalid("vortex gains must be finite".into()));
            }
        }
        self.description().validate()
    }
}

/// Simulates one toss, resampling initial conditions until the trajectory
/// contains a contact event.
pub fn generate_toss(scenario: &Scenario, truth: &LearnedModel, seed: u64, index: usize) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let field = scenario.field();
    let mut sim = Anitescu::from_learned(truth, scenario.stepper);
    if let Some(v) = &field {
        sim.field = Some(v);
    }
    for _ in 0..scenario.resample_cap {
        let x0 = scenario.tosses.sample(truth.n_joints(), &mut rng);
        let traj = rollout_with_contacts(&sim, &x0, scenario.steps_per_toss, scenario.dt)?;
        if traj.contact_steps > 0 {
            return Ok(traj);
        }
    }
    Err(Error::ResampleCap(scenario.resample_cap))
}

/// Generates `n_tosses` trajectories of the scenario's ground truth.
pub fn generate_dataset(scenario: &Scenario, n_tosses: usize, seed: u64, exec: Exec) -> Result<Vec<Trajectory>> {
    if n_tosses == 0 {
        return Err(Error::Invalid("n_tosses must be ≥ 1".into()));
    }
    scenario.validate()?;
    let truth = scenario.description().true_model()?;
    par::map_range(exec, n_tosses, |i| generate_toss(scenario, &truth, seed, i))
        .into_iter()
        .collect()
}
