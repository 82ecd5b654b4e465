//! Training losses: the contact-violation loss with its envelope gradient, the
//! simulation prediction loss with finite-difference gradients, and the
//! prediction loss of the end-to-end network.

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contact_jacobian, signed_distances, ContactImpulse};
use crate::math::{geodesic_angle, motion_cross, relative_rotation_vector, so3_left_jacobian};
use crate::model::LearnedModel;
use crate::multibody::{
    body_poses, configuration_step, dynamic_params_jacobian, dynamics, spatial_bilinear_grad, Dynamics, KinematicModel,
    State, Velocity,
};
use crate::nn::{EndToEndNet, Tape};
use crate::par::{self, Exec};
use crate::qp::{solve_factored_cone_qp, SolverConfig};
use crate::sim::{Anitescu, Stepper, StepperConfig};

/// Relative weights of the violation-loss terms and residual regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_comp: f64,
    pub w_diss: f64,
    pub w_pen: f64,
    pub w_res: f64,
    pub w_res_w: f64,
    /// Weight of the energy-unit prediction term.
    pub w_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ccn_sim()
    }
}

impl LossWeights {
    /// Tuned weights for simulated data.
    pub fn ccn_sim() -> Self {
        Self {
            w_comp: 0.001,
            w_diss: 0.1,
            w_pen: 100.0,
            w_res: 0.001,
            w_res_w: 0.0,
            w_pred: 1.0,
        }
    }

    /// Tuned weights for real data.
    pub fn ccn_real() -> Self {
        Self {
            w_res: 1.0,
            w_res_w: 0.1,
            ..Self::ccn_sim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_comp,
            self.w_diss,
            self.w_pen,
            self.w_res,
            self.w_res_w,
            self.w_pred,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        if self.w_pred <= 0.0 {
            return Err(Error::Invalid("w_pred must be positive".into()));
        }
        Ok(())
    }
}

/// One observed transition `x(k) → x(k+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    pub x_k: State,
    pub x_k1: State,
    pub dt: f64,
}

impl TransitionSample {
    pub fn new(x_k: State, x_k1: State, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        if x_k.n_joints() != x_k1.n_joints() {
            return Err(Error::Invalid("transition states differ in joint count".into()));
        }
        Ok(Self { x_k, x_k1, dt })
    }
}

pub fn h_comp(lambda_n: f64, phi_next: f64) -> f64 {
    lambda_n * phi_next
}

/// `λ_n·μ‖u‖ + λ_tᵀu` with `u = J_t·v(k+1)`.
pub fn h_diss(lambda_n: f64, lambda_t: &Vector2<f64>, u: &Vector2<f64>, mu: f64) -> f64 {
    lambda_n * mu * u.norm() + lambda_t.dot(u)
}

pub fn h_pen(phi_next: f64) -> f64 {
    phi_next.min(0.0).powi(2)
}

/// A learned model with the derived quantities shared by all samples.
pub struct PreparedModel<'a> {
    pub model: &'a LearnedModel,
    pub kin: KinematicModel,
    params_jac: DMatrix<f64>,
}

impl<'a> PreparedModel<'a> {
    pub fn new(model: &'a LearnedModel) -> Self {
        Self {
            model,
            kin: model.kinematic_model(),
            params_jac: dynamic_params_jacobian(&model.thetas, model.total_mass),
        }
    }
}

/// Minimizer of the inner problem.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub lambda_star: ContactImpulse,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Everything the inner problem and its gradient need for one sample.
struct Terms {
    dynm: Dynamics,
    delta: DVector<f64>,
    tape: Option<Tape>,
    /// `v(k) − v(k+1) + δ·dt`.
    e: DVector<f64>,
    /// `e + M⁻¹τ·dt`.
    dv: DVector<f64>,
    jac: DMatrix<f64>,
    phi_next: DVector<f64>,
    u: Vec<Vector2<f64>>,
    v_next: DVector<f64>,
    /// `J·L⁻ᵀ` with `M = L·Lᵀ`.
    a: DMatrix<f64>,
    /// `Lᵀ·Δv`.
    w0: DVector<f64>,
    /// Linear coefficients of `h` in `λ`.
    d: DVector<f64>,
}

fn terms(pm: &PreparedModel<'_>, s: &TransitionSample, w: &LossWeights, with_tape: bool) -> Result<Terms> {
    pm.kin.check_state(&s.x_k)?;
    pm.kin.check_state(&s.x_k1)?;
    let dynm = dynamics(&pm.kin, &s.x_k, None)?;
    let n = pm.kin.n_vel();
    let (delta, tape) = match &pm.model.residual {
        Some(net) if with_tape => {
            let tape = net.forward_tape(&s.x_k);
            (tape.output.clone(), Some(tape))
        }
        Some(net) => (net.forward(&s.x_k), None),
        None => (DVector::zeros(n), None),
    };
    let v = s.x_k.v.to_dvector();
    let v_next = s.x_k1.v.to_dvector();
    let e = &v - &v_next + &delta * s.dt;
    let dv = &e + &dynm.accel * s.dt;
    let jac = contact_jacobian(&pm.kin, &s.x_k.q);
    let phi_next = signed_distances(&pm.kin, &s.x_k1.q);
    let p = phi_next.len();
    let jv = &jac * &v_next;
    let u: Vec<Vector2<f64>> = (0..p).map(|i| Vector2::new(jv[p + 2 * i], jv[p + 2 * i + 1])).collect();
    let mut d = DVector::zeros(3 * p);
    for i in 0..p {
        d[i] = w.w_comp * phi_next[i] + w.w_diss * pm.model.mu * u[i].norm();
        d[p + 2 * i] = w.w_diss * u[i].x;
        d[p + 2 * i + 1] = w.w_diss * u[i].y;
    }
    let l = dynm.chol.l();
    let a = l
        .solve_lower_triangular(&jac.transpose())
        .ok_or(Error::SingularMassMatrix)?
        .transpose();
    let w0 = l.transpose() * &dv;
    Ok(Terms {
        dynm,
        delta,
        tape,
        e,
        dv,
        jac,
        phi_next,
        u,
        v_next,
        a,
        w0,
        d,
    })
}

fn check_impulse(lambda: &ContactImpulse, p: usize) -> Result<()> {
    if lambda.0.len() != 3 * p {
        return Err(Error::Invalid(format!(
            "impulse has {} entries, expected {}",
            lambda.0.len(),
            3 * p
        )));
    }
    Ok(())
}

/// `Σᵢ w_comp·h_comp + w_diss·h_diss + w_pen·h_pen` with `φ` at `q(k+1)` and
/// `J` at `q(k)`.
pub fn h_total(
    sample: &TransitionSample,
    lambda: &ContactImpulse,
    model: &LearnedModel,
    w: &LossWeights,
) -> Result<f64> {
    let kin = model.kinematic_model();
    let phi = signed_distances(&kin, &sample.x_k1.q);
    let jac = contact_jacobian(&kin, &sample.x_k.q);
    let p = phi.len();
    check_impulse(lambda, p)?;
    let jv = &jac * sample.x_k1.v.to_dvector();
    let mut total = 0.0;
    for i in 0..p {
        let u = Vector2::new(jv[p + 2 * i], jv[p + 2 * i + 1]);
        total += w.w_comp * h_comp(lambda.normal(i), phi[i])
            + w.w_diss * h_diss(lambda.normal(i), &lambda.tangent(i), &u, model.mu)
            + w.w_pen * h_pen(phi[i]);
    }
    Ok(total)
}

/// `‖M·Δv + Jᵀλ‖²` in the `M⁻¹` norm, with
/// `Δv = v(k) − v(k+1) + a_continuous·dt` (residual included).
pub fn pred_energy_term(sample: &TransitionSample, lambda: &ContactImpulse, model: &LearnedModel) -> Result<f64> {
    let pm = PreparedModel::new(model);
    let t = terms(&pm, sample, &LossWeights::default(), false)?;
    check_impulse(lambda, t.phi_next.len())?;
    let g = &t.dynm.mass_matrix * &t.dv + t.jac.transpose() * &lambda.0;
    Ok(g.dot(&t.dynm.chol.solve(&g)))
}

fn inner_from_terms(t: &Terms, mu: f64, w: &LossWeights, cfg: &SolverConfig) -> InnerSolution {
    let scale = (2.0 * w.w_pred).sqrt();
    let sol = solve_factored_cone_qp(&(&t.a * scale), &(&t.w0 * scale), &t.d, 0.0, mu, cfg);
    let pen: f64 = t.phi_next.iter().map(|&f| h_pen(f)).sum();
    InnerSolution {
        objective: sol.objective + w.w_pred * t.w0.norm_squared() + w.w_pen * pen,
        lambda_star: ContactImpulse(sol.lambda),
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        converged: sol.converged,
    }
}

/// Minimizes `w_pred·pred_energy_term + h_total` over the friction cones. A
/// solve that runs out of iterations returns its best iterate with
/// `converged = false`.
pub fn solve_inner(
    sample: &TransitionSample,
    model: &LearnedModel,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<InnerSolution> {
    solve_inner_prepared(&PreparedModel::new(model), sample, w, cfg)
}

pub fn solve_inner_prepared(
    pm: &PreparedModel<'_>,
    sample: &TransitionSample,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<InnerSolution> {
    w.validate()?;
    let t = terms(pm, sample, w, false)?;
    Ok(inner_from_terms(&t, pm.model.mu, w, cfg))
}

/// Inner objective at its minimizer plus `w_res·‖δ‖²` when a residual is present.
pub fn violation_loss(
    sample: &TransitionSample,
    model: &LearnedModel,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<f64> {
    violation_loss_prepared(&PreparedModel::new(model), sample, w, cfg)
}

pub fn violation_loss_prepared(
    pm: &PreparedModel<'_>,
    sample: &TransitionSample,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<f64> {
    w.validate()?;
    let t = terms(pm, sample, w, false)?;
    let sol = inner_from_terms(&t, pm.model.mu, w, cfg);
    Ok(sol.objective + w.w_res * t.delta.norm_squared())
}

/// Loss value and gradient for one sample.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    /// Layout of [`LearnedModel::structured_params`].
    pub structured: Vec<f64>,
    /// Residual network parameters, when the model has one.
    pub residual: Option<Vec<f64>>,
    pub lambda: ContactImpulse,
}

/// Envelope gradient of [`violation_loss`]: the objective is differentiated
/// with `(λ_n, β)` held at the inner minimizer, where `λ_t = μ·λ_n·β`.
pub fn violation_gradient(
    sample: &TransitionSample,
    model: &LearnedModel,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<LossGradient> {
    violation_gradient_prepared(&PreparedModel::new(model), sample, w, cfg)
}

pub fn violation_gradient_prepared(
    pm: &PreparedModel<'_>,
    sample: &TransitionSample,
    w: &LossWeights,
    cfg: &SolverConfig,
) -> Result<LossGradient> {
    w.validate()?;
    let model = pm.model;
    let t = terms(pm, sample, w, true)?;
    let sol = inner_from_terms(&t, model.mu, w, cfg);
    if !sol.converged {
        return Err(Error::NotConverged {
            residual: sol.kkt_residual,
        });
    }
    let lam = &sol.lambda_star.0;
    let p = t.phi_next.len();
    let n = pm.kin.n_vel();
    let dt = sample.dt;
    let wp = w.w_pred;
    let mu = model.mu;

    let g = &t.dynm.mass_matrix * &t.dv + t.jac.transpose() * lam;
    let y = t.dynm.chol.solve(&g);
    let grad_lam = (&t.jac * &y) * (2.0 * wp) + &t.d;
    let mut out = vec![0.0; model.n_structured()];

    // ∂F/∂J
    let mut gj = lam * y.transpose() * (2.0 * wp);
    for i in 0..p {
        let un = t.u[i].norm();
        let mut coef = Vector2::new(lam[p + 2 * i], lam[p + 2 * i + 1]);
        if un > 0.0 {
            coef += t.u[i] * (lam[i] * mu / un);
        }
        coef *= w.w_diss;
        for k in 0..n {
            gj[(p + 2 * i, k)] += coef.x * t.v_next[k];
            gj[(p + 2 * i + 1, k)] += coef.y * t.v_next[k];
        }
    }

    // vertices, through J at q(k) and φ at q(k+1)
    let poses_next = body_poses(&pm.kin, &sample.x_k1.q);
    let mut c = 0;
    for (b, verts) in model.vertices.iter().enumerate() {
        let f = &t.dynm.frames[b];
        let rt = f.rotation.transpose();
        let third_row = poses_next[b].0.row(2).transpose();
        for _ in verts {
            let mut gr = Vector3::zeros();
            for k in 0..n {
                let gc = Vector3::new(gj[(p + 2 * c, k)], gj[(p + 2 * c + 1, k)], gj[(c, k)]);
                let s_om = Vector3::new(f.s[(0, k)], f.s[(1, k)], f.s[(2, k)]);
                gr += (rt * gc).cross(&s_om);
            }
            let dphi = w.w_comp * lam[c] + 2.0 * w.w_pen * t.phi_next[c].min(0.0);
            gr += third_row * dphi;
            out[3 * c..3 * c + 3].copy_from_slice(gr.as_slice());
            c += 1;
        }
    }

    // friction
    let mut gmu = 0.0;
    for i in 0..p {
        gmu += w.w_diss * lam[i] * t.u[i].norm();
        let gt = Vector2::new(grad_lam[p + 2 * i], grad_lam[p + 2 * i + 1]);
        let lt = Vector2::new(lam[p + 2 * i], lam[p + 2 * i + 1]);
        if mu > 0.0 {
            gmu += gt.dot(&lt) / mu;
        } else {
            // one-sided derivative: the best β opposes the tangential gradient
            gmu -= lam[i] * gt.norm();
        }
    }
    out[model.mu_index()] = gmu;

    // inertia, through M and τ
    let nb = model.n_bodies();
    let z = &t.e * 2.0 - &y;
    let mut dpi = DVector::zeros(10 * nb);
    for (b, f) in t.dynm.frames.iter().enumerate() {
        let yb: Vector6<f64> = &f.s * &y;
        let zb: Vector6<f64> = &f.s * &z;
        let gamma = t.dynm.body_accel[b];
        let g_mass = spatial_bilinear_grad(&yb, &zb);
        let g_sigma = spatial_bilinear_grad(&yb, &f.sigma);
        let g_bias = spatial_bilinear_grad(&motion_cross(&f.velocity, &yb), &f.velocity);
        for k in 0..10 {
            dpi[10 * b + k] = wp * (g_mass[k] + 2.0 * dt * (g_bias[k] - g_sigma[k]));
        }
        let yw = Vector3::new(yb[0], yb[1], yb[2]);
        let yv = Vector3::new(yb[3], yb[4], yb[5]);
        let dh = gamma.cross(&yw);
        dpi[10 * b] += wp * 2.0 * dt * yv.dot(&gamma);
        for j in 0..3 {
            dpi[10 * b + 1 + j] += wp * 2.0 * dt * dh[j];
        }
    }
    let dtheta = pm.params_jac.transpose() * dpi;
    let base = model.theta_index(0);
    out[base..base + 10 * nb].copy_from_slice(dtheta.as_slice());

    let residual = match (&model.residual, &t.tape) {
        (Some(net), Some(tape)) => {
            let upstream = &g * (2.0 * wp * dt) + &t.delta * (2.0 * w.w_res);
            Some(net.backward(tape, &upstream).0)
        }
        _ => None,
    };

    Ok(LossGradient {
        loss: sol.objective + w.w_res * t.delta.norm_squared(),
        structured: out,
        residual,
        lambda: sol.lambda_star,
    })
}

/// Weights of the state-error metric used by prediction losses. Meters and
/// radians mix 1:1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    pub w_config: f64,
    pub w_velocity: f64,
    pub stepper: StepperConfig,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            w_config: 1.0,
            w_velocity: 1.0,
            stepper: StepperConfig::default(),
        }
    }
}

/// Squared state error: position, geodesic angle and joint angles (weighted by
/// `w_config`) plus generalized velocity (weighted by `w_velocity`).
pub fn state_error(pred: &State, obs: &State, cfg: &PredictionConfig) -> f64 {
    let dp = (pred.q.position - obs.q.position).norm_squared();
    let ang = geodesic_angle(&pred.q.orientation, &obs.q.orientation).powi(2);
    let dj: f64 = pred
        .q
        .joint_angles
        .iter()
        .zip(&obs.q.joint_angles)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let dv = (pred.v.to_dvector() - obs.v.to_dvector()).norm_squared();
    cfg.w_config * (dp + ang + dj) + cfg.w_velocity * dv
}

/// Squared error between the observed `x(k+1)` and one step of the model.
pub fn prediction_loss(sample: &TransitionSample, model: &LearnedModel, cfg: &PredictionConfig) -> Result<f64> {
    let sim = Anitescu::from_learned(model, cfg.stepper);
    let next = sim.step_full(&sample.x_k, sample.dt)?.next;
    Ok(state_error(&next, &sample.x_k1, cfg))
}

/// Mean prediction loss over a batch, reduced in input order.
pub fn batch_prediction_loss(
    batch: &[TransitionSample],
    model: &LearnedModel,
    cfg: &PredictionConfig,
    exec: Exec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let sim = Anitescu::from_learned(model, cfg.stepper);
    let parts = par::map(exec, batch, |s| -> Result<f64> {
        let next = sim.step_full(&s.x_k, s.dt)?.next;
        Ok(state_error(&next, &s.x_k1, cfg))
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / batch.len() as f64)
}

/// Finite-difference settings for prediction gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    /// Relative step: each coordinate moves by `h·(1 + |x|)`.
    pub h: f64,
    pub max_params: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            max_params: 96,
        }
    }
}

/// Central differences of `f` at `x`. Coordinates listed in `lower_bounded`
/// must stay ≥ 0 and fall back to forward differences near the bound.
pub fn central_difference<F>(f: F, x: &[f64], cfg: &FdConfig, lower_bounded: &[usize], exec: Exec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if x.len() > cfg.max_params {
        return Err(Error::ParameterCap {
            count: x.len(),
            cap: cfg.max_params,
        });
    }
    if !(cfg.h > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let needs_base = lower_bounded.iter().any(|&i| x[i] - cfg.h * (1.0 + x[i].abs()) < 0.0);
    let base = if needs_base { Some(f(x)?) } else { None };
    let parts = par::map_range(exec, x.len(), |i| -> Result<f64> {
        let step = cfg.h * (1.0 + x[i].abs());
        let mut probe = x.to_vec();
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        if lower_bounded.contains(&i) && x[i] - step < 0.0 {
            return Ok((up - base.expect("base evaluated")) / step);
        }
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        Ok((up - down) / (2.0 * step))
    });
    parts.into_iter().collect()
}

/// Central-difference gradient of the batch-mean prediction loss over the
/// structured parameters.
pub fn prediction_gradient_fd(
    batch: &[TransitionSample],
    model: &LearnedModel,
    pred: &PredictionConfig,
    fd: &FdConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    let x = model.structured_params();
    let f = |p: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.set_structured_params(p);
        batch_prediction_loss(batch, &m, pred, Exec::Sequential)
    };
    central_difference(f, &x, fd, &[model.mu_index()], exec)
}

/// Next state predicted by the end-to-end network.
pub fn e2e_predict(net: &EndToEndNet, x: &State, dt: f64) -> State {
    let v = net.forward(x);
    State {
        q: configuration_step(&x.q, &v, dt),
        v,
    }
}

impl Stepper for EndToEndNet {
    fn step(&self, x: &State, dt: f64) -> Result<State> {
        let next = e2e_predict(self, x, dt);
        if !next.v.to_dvector().iter().all(|c| c.is_finite()) {
            return Err(Error::Invalid("network produced a non-finite velocity".into()));
        }
        Ok(next)
    }
}

/// Prediction loss of the end-to-end network and its gradient with respect to
/// the network parameters.
pub fn e2e_loss_and_gradient(net: &EndToEndNet, sample: &TransitionSample, cfg: &PredictionConfig) -> (f64, Vec<f64>) {
    let tape = net.mlp.forward_tape(&net.features(&sample.x_k));
    let v = Velocity::from_slice(tape.output.as_slice());
    let dt = sample.dt;
    let pred = State {
        q: configuration_step(&sample.x_k.q, &v, dt),
        v: v.clone(),
    };
    let obs = &sample.x_k1;
    let loss = state_error(&pred, obs, cfg);
    let n = v.dim();
    let mut up = DVector::zeros(n);
    let e = relative_rotation_vector(&obs.q.orientation, &pred.q.orientation);
    let g_om = so3_left_jacobian(&(v.angular * dt)) * e * (2.0 * dt * cfg.w_config);
    let g_lin = (pred.q.position - obs.q.position) * (2.0 * dt * cfg.w_config);
    for j in 0..3 {
        up[j] = g_om[j];
        up[3 + j] = g_lin[j];
    }
    for (k, (a, b)) in pred.q.joint_angles.iter().zip(&obs.q.joint_angles).enumerate() {
        up[6 + k] = 2.0 * dt * cfg.w_config * (a - b);
    }
    up += (tape.output.clone() - obs.v.to_dvector()) * (2.0 * cfg.w_velocity);
    (loss, net.mlp.backward(&tape, &up).0)
}
