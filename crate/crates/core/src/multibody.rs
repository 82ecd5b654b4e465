//! Floating-base kinematics and dynamics with an optional revolute child link.
//!
//! Generalized velocity ordering is `[ω_base (body frame), v_base (world), θ̇]`.
//! Each body's spatial velocity `V_b = (ω_b, ν_b)` is expressed in its own
//! frame and obtained as `V_b = S_b(q)·v`; the equations of motion follow from
//! summing the body-frame Newton-Euler residuals projected through `S_bᵀ`.

use nalgebra::{
    Cholesky, DMatrix, DVector, Dyn, Matrix3, Matrix4, Matrix6, Matrix6xX, Rotation3, Unit, UnitQuaternion, Vector3,
    Vector6,
};

use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::math::{force_cross, skew, stack6, sym_from6, sym_to6};

#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub joint_angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    /// Base angular velocity in the base frame.
    pub angular: Vector3<f64>,
    /// Base origin velocity in the world frame.
    pub linear: Vector3<f64>,
    pub joint_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: Configuration,
    pub v: Velocity,
}

impl Configuration {
    pub fn identity(n_joints: usize) -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            joint_angles: vec![0.0; n_joints],
        }
    }

    /// Flat layout `[p (3), quaternion w x y z (4), joint angles]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let qq = self.orientation.quaternion();
        let mut out = vec![
            self.position.x,
            self.position.y,
            self.position.z,
            qq.w,
            qq.i,
            qq.j,
            qq.k,
        ];
        out.extend_from_slice(&self.joint_angles);
        out
    }

    /// Inverse of [`Configuration::to_flat`]. The quaternion is taken as
    /// stored (it is assumed to already be unit length).
    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() < 7 {
            return Err(Error::Format(format!(
                "configuration needs ≥ 7 entries, got {}",
                x.len()
            )));
        }
        let quat = nalgebra::Quaternion::new(x[3], x[4], x[5], x[6]);
        let norm = quat.norm();
        if !(norm - 1.0).abs().lt(&1e-6) {
            return Err(Error::Format(format!("quaternion norm {norm} is not unit")));
        }
        Ok(Self {
            position: Vector3::new(x[0], x[1], x[2]),
            orientation: UnitQuaternion::new_unchecked(quat),
            joint_angles: x[7..].to_vec(),
        })
    }
}

impl Velocity {
    pub fn zeros(n_joints: usize) -> Self {
        Self {
            angular: Vector3::zeros(),
            linear: Vector3::zeros(),
            joint_rates: vec![0.0; n_joints],
        }
    }

    pub fn dim(&self) -> usize {
        6 + self.joint_rates.len()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_flat())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        ];
        out.extend_from_slice(&self.joint_rates);
        out
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            angular: Vector3::new(x[0], x[1], x[2]),
            linear: Vector3::new(x[3], x[4], x[5]),
            joint_rates: x[6..].to_vec(),
        }
    }
}

impl State {
    pub fn rest(n_joints: usize) -> Self {
        Self {
            q: Configuration::identity(n_joints),
            v: Velocity::zeros(n_joints),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.q.joint_angles.len()
    }
}

/// Unconstrained inertia parameters of one body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaInertia(pub [f64; 10]);

/// Mass, center of mass (body frame) and rotational inertia about the body origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyInertia {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub rot_inertia: Matrix3<f64>,
}

impl BodyInertia {
    /// Builds a body from its inertia about the center of mass.
    pub fn from_com_inertia(mass: f64, com: Vector3<f64>, inertia_com: Matrix3<f64>) -> Self {
        let shift = mass * (com.norm_squared() * Matrix3::identity() - com * com.transpose());
        Self {
            mass,
            com,
            rot_inertia: inertia_com + shift,
        }
    }

    pub fn inertia_about_com(&self) -> Matrix3<f64> {
        let c = self.com;
        self.rot_inertia - self.mass * (c.norm_squared() * Matrix3::identity() - c * c.transpose())
    }

    /// Second moment of mass about the body origin.
    pub fn second_moment(&self) -> Matrix3<f64> {
        0.5 * self.rot_inertia.trace() * Matrix3::identity() - self.rot_inertia
    }

    pub fn pseudo_inertia(&self) -> Matrix4<f64> {
        let s = self.second_moment();
        let h = self.mass * self.com;
        let mut p = Matrix4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&s);
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&h);
        p.fixed_view_mut::<1, 3>(3, 0).copy_from(&h.transpose());
        p[(3, 3)] = self.mass;
        p
    }

    /// Body-frame spatial inertia about the origin for `V = (ω, ν)`.
    pub fn spatial(&self) -> Matrix6<f64> {
        spatial_inertia(&self.dynamic_params())
    }

    /// `[m, h = m·c (3), I_o (xx, yy, zz, xy, xz, yz)]`, the parameters the
    /// equations of motion are linear in.
    pub fn dynamic_params(&self) -> [f64; 10] {
        let h = self.mass * self.com;
        let i = sym_to6(&self.rot_inertia);
        [self.mass, h.x, h.y, h.z, i[0], i[1], i[2], i[3], i[4], i[5]]
    }

    /// `[m, p (3), I about the center of mass (xx, yy, zz, xy, xz, yz)]`.
    pub fn metric_vector(&self) -> [f64; 10] {
        let i = sym_to6(&self.inertia_about_com());
        [
            self.mass, self.com.x, self.com.y, self.com.z, i[0], i[1], i[2], i[3], i[4], i[5],
        ]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mass: self.mass * factor,
            com: self.com,
            rot_inertia: self.rot_inertia * factor,
        }
    }

    /// Checks mass positivity, positive-definite rotational inertia and the
    /// triangle inequalities of the principal moments about the center of mass.
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(Error::InfeasibleInertia(format!("mass {}", self.mass)));
        }
        let eig = self.rot_inertia.symmetric_eigenvalues();
        if eig.iter().any(|e| *e <= 0.0) {
            return Err(Error::InfeasibleInertia(
                "rotational inertia not positive definite".into(),
            ));
        }
        let c = self.inertia_about_com().symmetric_eigenvalues();
        let tol = 1e-12 * c.amax().max(1e-300);
        if c[0] + c[1] < c[2] - tol || c[0] + c[2] < c[1] - tol || c[1] + c[2] < c[0] - tol {
            return Err(Error::InfeasibleInertia(
                "principal moments violate triangle inequality".into(),
            ));
        }
        Ok(())
    }
}

pub fn spatial_inertia(pi: &[f64; 10]) -> Matrix6<f64> {
    let h = Vector3::new(pi[1], pi[2], pi[3]);
    let i = sym_from6(&[pi[4], pi[5], pi[6], pi[7], pi[8], pi[9]]);
    let hx = skew(&h);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&i);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hx);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-hx));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * pi[0]));
    m
}

/// Gradient of `aᵀ Ī(π) b` with respect to the dynamic parameters `π`.
pub fn spatial_bilinear_grad(a: &Vector6<f64>, b: &Vector6<f64>) -> [f64; 10] {
    let aw = Vector3::new(a[0], a[1], a[2]);
    let av = Vector3::new(a[3], a[4], a[5]);
    let bw = Vector3::new(b[0], b[1], b[2]);
    let bv = Vector3::new(b[3], b[4], b[5]);
    let dh = bv.cross(&aw) - bw.cross(&av);
    [
        av.dot(&bv),
        dh.x,
        dh.y,
        dh.z,
        aw.x * bw.x,
        aw.y * bw.y,
        aw.z * bw.z,
        aw.x * bw.y + aw.y * bw.x,
        aw.x * bw.z + aw.z * bw.x,
        aw.y * bw.z + aw.z * bw.y,
    ]
}

/// Upper-triangular factor `U` with `P ∝ U·Uᵀ` (last diagonal entry 1).
fn theta_factor(theta: &[f64; 10]) -> Matrix3<f64> {
    Matrix3::new(
        theta[0].exp(),
        theta[3],
        theta[4],
        0.0,
        theta[1].exp(),
        theta[5],
        0.0,
        0.0,
        theta[2].exp(),
    )
}

/// Unit-mass inertia `(c, I_o / m)` described by the first nine entries of θ.
fn normalized_inertia(theta: &[f64; 10]) -> (Vector3<f64>, Matrix3<f64>) {
    let a = theta_factor(theta);
    let c = Vector3::new(theta[6], theta[7], theta[8]);
    let s = a * a.transpose() + c * c.transpose();
    (c, s.trace() * Matrix3::identity() - s)
}

/// Raw (un-rescaled) mass encoded by θ: `exp(2·θ₁₀)`.
pub fn theta_raw_mass(theta: &ThetaInertia) -> f64 {
    (2.0 * theta.0[9]).exp()
}

/// Maps unconstrained parameters to a feasible body inertia whose mass is
/// rescaled to `mass`.
///
/// The pseudo-inertia is `P = e^{2θ₁₀}·U·Uᵀ` with `U` upper triangular,
/// diagonal `(e^{θ₁}, e^{θ₂}, e^{θ₃}, 1)`, strict upper 3×3 entries
/// `(θ₄, θ₅, θ₆)` and last column `(θ₇, θ₈, θ₉)`. Positive definiteness of `P`
/// holds for every θ.
pub fn inertia_from_theta(theta: &ThetaInertia, mass: f64) -> BodyInertia {
    let (c, i_unit) = normalized_inertia(&theta.0);
    BodyInertia {
        mass,
        com: c,
        rot_inertia: i_unit * mass,
    }
}

/// Inverse of [`inertia_from_theta`]; the scale entry encodes the body mass.
pub fn theta_from_inertia(b: &BodyInertia) -> Result<ThetaInertia> {
    if !(b.mass > 0.0) || !b.mass.is_finite() {
        return Err(Error::InfeasibleInertia(format!("mass {}", b.mass)));
    }
    let c = b.com;
    // second moment about the center of mass, per unit mass
    let s = b.second_moment() / b.mass - c * c.transpose();
    let a33 = s[(2, 2)];
    if !(a33 > 0.0) {
        return Err(Error::InfeasibleInertia("pseudo-inertia not positive definite".into()));
    }
    let a33 = a33.sqrt();
    let a23 = s[(1, 2)] / a33;
    let a13 = s[(0, 2)] / a33;
    let d22 = s[(1, 1)] - a23 * a23;
    if !(d22 > 0.0) {
        return Err(Error::InfeasibleInertia("pseudo-inertia not positive definite".into()));
    }
    let a22 = d22.sqrt();
    let a12 = (s[(0, 1)] - a13 * a23) / a22;
    let d11 = s[(0, 0)] - a12 * a12 - a13 * a13;
    if !(d11 > 0.0) {
        return Err(Error::InfeasibleInertia("pseudo-inertia not positive definite".into()));
    }
    let a11 = d11.sqrt();
    Ok(ThetaInertia([
        a11.ln(),
        a22.ln(),
        a33.ln(),
        a12,
        a13,
        a23,
        c.x,
        c.y,
        c.z,
        0.5 * b.mass.ln(),
    ]))
}

/// Body inertias for a set of θ vectors under a fixed total mass: the scale
/// entries set each body's share of `total_mass`.
pub fn inertias_with_total_mass(thetas: &[ThetaInertia], total_mass: f64) -> Vec<BodyInertia> {
    let raw: Vec<f64> = thetas.iter().map(theta_raw_mass).collect();
    let sum: f64 = raw.iter().sum();
    thetas
        .iter()
        .zip(&raw)
        .map(|(t, r)| inertia_from_theta(t, total_mass * r / sum))
        .collect()
}

/// Jacobian of all bodies' dynamic parameters (see
/// [`BodyInertia::dynamic_params`]) with respect to all θ entries, under the
/// fixed total mass. Row-block `b`, column-block `c` is `∂π_b/∂θ_c`.
pub fn dynamic_params_jacobian(thetas: &[ThetaInertia], total_mass: f64) -> DMatrix<f64> {
    let nb = thetas.len();
    let raw: Vec<f64> = thetas.iter().map(theta_raw_mass).collect();
    let sum: f64 = raw.iter().sum();
    let mut jac = DMatrix::zeros(10 * nb, 10 * nb);
    for (b, theta) in thetas.iter().enumerate() {
        let mass = total_mass * raw[b] / sum;
        let th = &theta.0;
        let a = theta_factor(th);
        let c = Vector3::new(th[6], th[7], th[8]);
        // entries 0..9: shape parameters at fixed mass
        for k in 0..9 {
            let (dc, ds) = if k < 6 {
                let mut da = Matrix3::zeros();
                match k {
                    0 => da[(0, 0)] = th[0].exp(),
                    1 => da[(1, 1)] = th[1].exp(),
                    2 => da[(2, 2)] = th[2].exp(),
                    3 => da[(0, 1)] = 1.0,
                    4 => da[(0, 2)] = 1.0,
                    _ => da[(1, 2)] = 1.0,
                }
                (Vector3::zeros(), da * a.transpose() + a * da.transpose())
            } else {
                let mut e = Vector3::zeros();
                e[k - 6] = 1.0;
                (e, e * c.transpose() + c * e.transpose())
            };
            let di = ds.trace() * Matrix3::identity() - ds;
            let di6 = sym_to6(&di);
            let col = 10 * b + k;
            jac[(10 * b, col)] = 0.0;
            for j in 0..3 {
                jac[(10 * b + 1 + j, col)] = mass * dc[j];
            }
            for j in 0..6 {
                jac[(10 * b + 4 + j, col)] = mass * di6[j];
            }
        }
        // scale entries redistribute mass between bodies
        let (cu, iu) = normalized_inertia(th);
        let iu6 = sym_to6(&iu);
        let pi_b = [
            mass,
            mass * cu.x,
            mass * cu.y,
            mass * cu.z,
            mass * iu6[0],
            mass * iu6[1],
            mass * iu6[2],
            mass * iu6[3],
            mass * iu6[4],
            mass * iu6[5],
        ];
        for (cidx, rc) in raw.iter().enumerate() {
            let share = rc / sum;
            let factor = 2.0 * (if cidx == b { 1.0 } else { 0.0 } - share);
            for j in 0..10 {
                jac[(10 * b + j, 10 * cidx + 9)] = pi_b[j] * factor;
            }
        }
    }
    jac
}

/// Revolute joint between the base and the child link. The child frame origin
/// sits at `parent_offset` in the base frame and rotates about `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    pub parent_offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub inertia: BodyInertia,
    pub polytope: Polytope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub bodies: Vec<Body>,
    pub joint: Option<Joint>,
    pub total_mass: f64,
    /// Magnitude of the believed gravitational acceleration (m/s²).
    pub gravity: f64,
}

impl KinematicModel {
    pub fn n_joints(&self) -> usize {
        usize::from(self.joint.is_some())
    }

    pub fn n_vel(&self) -> usize {
        6 + self.n_joints()
    }

    pub fn n_contacts(&self) -> usize {
        self.bodies.iter().map(|b| b.polytope.vertices.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = 1 + self.n_joints();
        if self.bodies.len() != expected {
            return Err(Error::Invalid(format!(
                "{} bodies for {} joints",
                self.bodies.len(),
                self.n_joints()
            )));
        }
        let sum: f64 = self.bodies.iter().map(|b| b.inertia.mass).sum();
        if (sum - self.total_mass).abs() > 1e-9 * self.total_mass.max(1.0) {
            return Err(Error::Invalid(format!(
                "body masses sum to {sum}, total mass is {}",
                self.total_mass
            )));
        }
        for b in &self.bodies {
            b.inertia.validate()?;
            b.polytope.validate()?;
        }
        Ok(())
    }

    pub fn check_state(&self, x: &State) -> Result<()> {
        let nj = self.n_joints();
        if x.q.joint_angles.len() != nj || x.v.joint_rates.len() != nj {
            return Err(Error::Invalid(format!(
                "state has {} joint angles / {} rates, model has {nj} joints",
                x.q.joint_angles.len(),
                x.v.joint_rates.len()
            )));
        }
        Ok(())
    }
}

/// World pose of every body.
pub fn body_poses(model: &KinematicModel, q: &Configuration) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let r = *q.orientation.to_rotation_matrix().matrix();
    let mut out = vec![(r, q.position)];
    if let Some(j) = &model.joint {
        let e = *Rotation3::from_axis_angle(&j.axis, q.joint_angles[0]).matrix();
        out.push((r * e, q.position + r * j.parent_offset));
    }
    out
}

/// Velocity-level kinematics of one body.
#[derive(Debug, Clone)]
pub struct BodyFrame {
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
    /// `V_b = S_b·v`.
    pub s: Matrix6xX<f64>,
    /// `Ṡ_b·v`.
    pub sigma: Vector6<f64>,
    pub velocity: Vector6<f64>,
}

/// Body frames at configuration `q`. When `v` is `None` the velocity-product
/// terms are zero.
pub fn body_frames(model: &KinematicModel, q: &Configuration, v: Option<&Velocity>) -> Vec<BodyFrame> {
    let n = model.n_vel();
    let r = *q.orientation.to_rotation_matrix().matrix();
    let rt = r.transpose();
    let (om, nu, rate) = match v {
        Some(v) => (v.angular, rt * v.linear, v.joint_rates.first().copied().unwrap_or(0.0)),
        None => (Vector3::zeros(), Vector3::zeros(), 0.0),
    };
    let mut s0 = Matrix6xX::zeros(n);
    s0.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    s0.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    let sigma0 = stack6(&Vector3::zeros(), &(-om.cross(&nu)));
    let vel0 = stack6(&om, &nu);
    let mut out = vec![BodyFrame {
        rotation: r,
        origin: q.position,
        s: s0,
        sigma: sigma0,
        velocity: vel0,
    }];
    if let Some(j) = &model.joint {
        let a = j.axis.into_inner();
        let pj = j.parent_offset;
        let e = *Rotation3::from_axis_angle(&j.axis, q.joint_angles[0]).matrix();
        let et = e.transpose();
        let mut s1 = Matrix6xX::zeros(n);
        s1.fixed_view_mut::<3, 3>(0, 0).copy_from(&et);
        s1.fixed_view_mut::<3, 1>(0, 6).copy_from(&(et * a));
        s1.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-et * skew(&pj)));
        s1.fixed_view_mut::<3, 3>(3, 3).copy_from(&(et * rt));
        let sig_w = -rate * (et * a.cross(&om));
        let sig_v = -rate * (et * a.cross(&(nu + om.cross(&pj)))) - et * om.cross(&nu);
        let vel_w = et * (om + a * rate);
        let vel_v = et * (nu + om.cross(&pj));
        out.push(BodyFrame {
            rotation: r * e,
            origin: q.position + r * pj,
            s: s1,
            sigma: stack6(&sig_w, &sig_v),
            velocity: stack6(&vel_w, &vel_v),
        });
    }
    out
}

/// A spatially varying acceleration field acting at each body's center of mass.
pub trait AccelerationField: Send + Sync {
    fn acceleration(&self, p: &Vector3<f64>) -> Vector3<f64>;
}

/// Evaluated dynamics terms at one state.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub frames: Vec<BodyFrame>,
    pub mass_matrix: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Generalized force: gravity, field and velocity-product terms.
    pub tau: DVector<f64>,
    /// Body-frame applied acceleration per body (gravity plus field).
    pub body_accel: Vec<Vector3<f64>>,
    /// Contact-free acceleration `M⁻¹·τ`.
    pub accel: DVector<f64>,
}

pub fn dynamics(model: &KinematicModel, x: &State, field: Option<&dyn AccelerationField>) -> Result<Dynamics> {
    let frames = body_frames(model, &x.q, Some(&x.v));
    let n = model.n_vel();
    let mut m = DMatrix::zeros(n, n);
    let mut tau = DVector::zeros(n);
    let g_world = Vector3::new(0.0, 0.0, -model.gravity);
    let mut body_accel = Vec::with_capacity(frames.len());
    for (f, body) in frames.iter().zip(&model.bodies) {
        let inert = body.inertia.spatial();
        let st_i = f.s.transpose() * inert;
        m += &st_i * &f.s;
        let mut acc_world = g_world;
        if let Some(field) = field {
            let com_world = f.origin + f.rotation * body.inertia.com;
            acc_world += field.acceleration(&com_world);
        }
        let gamma = f.rotation.transpose() * acc_world;
        body_accel.push(gamma);
        let h = body.inertia.mass * body.inertia.com;
        let wrench = stack6(&h.cross(&gamma), &(gamma * body.inertia.mass));
        let momentum = inert * f.velocity;
        let resid = inert * f.sigma + force_cross(&f.velocity, &momentum) - wrench;
        tau -= f.s.transpose() * resid;
    }
    // exact symmetry
    let m = (&m + m.transpose()) * 0.5;
    let chol = Cholesky::new(m.clone()).ok_or(Error::SingularMassMatrix)?;
    let accel = chol.solve(&tau);
    Ok(Dynamics {
        frames,
        mass_matrix: m,
        chol,
        tau,
        body_accel,
        accel,
    })
}

pub fn mass_matrix(model: &KinematicModel, q: &Configuration) -> DMatrix<f64> {
    let frames = body_frames(model, q, None);
    let n = model.n_vel();
    let mut m = DMatrix::zeros(n, n);
    for (f, body) in frames.iter().zip(&model.bodies) {
        m += f.s.transpose() * body.inertia.spatial() * &f.s;
    }
    (&m + m.transpose()) * 0.5
}

/// Contact-free generalized acceleration.
pub fn continuous_acceleration(
    model: &KinematicModel,
    x: &State,
    field: Option<&dyn AccelerationField>,
) -> Result<DVector<f64>> {
    Ok(dynamics(model, x, field)?.accel)
}

/// Semi-implicit configuration update with the next velocity; orientation
/// uses the exponential map of the body angular velocity.
pub fn configuration_step(q: &Configuration, v_next: &Velocity, dt: f64) -> Configuration {
    let dq = UnitQuaternion::from_scaled_axis(v_next.angular * dt);
    let mut orientation = q.orientation * dq;
    orientation.renormalize();
    Configuration {
        position: q.position + v_next.linear * dt,
        orientation,
        joint_angles: q
            .joint_angles
            .iter()
            .zip(&v_next.joint_rates)
            .map(|(a, r)| a + r * dt)
            .collect(),
    }
}

/// Total kinetic energy `½ vᵀ M v`.
pub fn kinetic_energy(model: &KinematicModel, x: &State) -> f64 {
    let m = mass_matrix(model, &x.q);
    let v = x.v.to_dvector();
    0.5 * v.dot(&(m * &v))
}

/// Gravitational potential energy relative to `z = 0`.
pub fn potential_energy(model: &KinematicModel, q: &Configuration) -> f64 {
    body_poses(model, q)
        .iter()
        .zip(&model.bodies)
        .map(|((r, p), b)| b.inertia.mass * model.gravity * (p + r * b.inertia.com).z)
        .sum()
}

/// World positions of each body's center of mass.
pub fn com_positions(model: &KinematicModel, q: &Configuration) -> Vec<Vector3<f64>> {
    body_poses(model, q)
        .iter()
        .zip(&model.bodies)
        .map(|((r, p), b)| p + r * b.inertia.com)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polytope;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(rng: &mut ChaCha8Rng) -> ThetaInertia {
        let mut t = [0.0; 10];
        for v in t.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        ThetaInertia(t)
    }

    fn cube_body(mass: f64) -> Body {
        let w = 0.1;
        let i = mass * (w * w + w * w) / 12.0;
        Body {
            inertia: BodyInertia::from_com_inertia(mass, Vector3::zeros(), Matrix3::identity() * i),
            polytope: Polytope::cuboid(Vector3::zeros(), Vector3::new(w, w, w)),
        }
    }

    fn two_link() -> KinematicModel {
        let mut b0 = cube_body(0.3);
        b0.inertia = BodyInertia::from_com_inertia(
            0.3,
            Vector3::new(0.01, -0.005, 0.002),
            Matrix3::from_diagonal(&Vector3::new(1e-4, 3e-4, 3.5e-4)),
        );
        let b1 = Body {
            inertia: BodyInertia::from_com_inertia(
                0.2,
                Vector3::new(0.05, 0.003, 0.0),
                Matrix3::from_diagonal(&Vector3::new(0.8e-4, 2e-4, 2.2e-4)),
            ),
            polytope: Polytope::cuboid(Vector3::new(0.05, 0.0, 0.0), Vector3::new(0.1, 0.05, 0.05)),
        };
        KinematicModel {
            bodies: vec![b0, b1],
            joint: Some(Joint {
                axis: Vector3::y_axis(),
                parent_offset: Vector3::new(0.05, 0.0, 0.0),
            }),
            total_mass: 0.5,
            gravity: 9.81,
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, nj: usize) -> State {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        State {
            q: Configuration {
                position: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                ),
                orientation: UnitQuaternion::from_scaled_axis(axis * 2.0),
                joint_angles: (0..nj).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            },
            v: Velocity {
                angular: Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ),
                linear: Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
                joint_rates: (0..nj).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            },
        }
    }

    #[test]
    fn zero_theta_is_identity_inertia() {
        let b = inertia_from_theta(&ThetaInertia([0.0; 10]), 1.0);
        assert_eq!(b.mass, 1.0);
        assert_eq!(b.com, Vector3::zeros());
        assert!((b.rot_inertia - Matrix3::identity() * 2.0).norm() < 1e-15);
        let t = theta_from_inertia(&b).unwrap();
        assert!(t.0.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn asymmetric_object_inertia_roundtrip() {
        let truth = BodyInertia::from_com_inertia(0.25, Vector3::zeros(), Matrix3::identity() * 0.00081);
        let t = theta_from_inertia(&truth).unwrap();
        let b = inertia_from_theta(&t, 0.25);
        let v = b.metric_vector();
        let expected = [0.25, 0.0, 0.0, 0.0, 0.00081, 0.00081, 0.00081, 0.0, 0.0, 0.0];
        for (a, e) in v.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn random_theta_gives_positive_definite_pseudo_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let b = inertia_from_theta(&random_theta(&mut rng), rng.gen_range(0.1..3.0));
            let eig = b.pseudo_inertia().symmetric_eigenvalues();
            assert!(eig.min() > 0.0, "{eig}");
            b.validate().unwrap();
        }
    }

    #[test]
    fn theta_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = random_theta(&mut rng);
            let mass = theta_raw_mass(&t);
            let b = inertia_from_theta(&t, mass);
            let t2 = theta_from_inertia(&b).unwrap();
            let err: f64 = t.0.iter().zip(&t2.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn degenerate_inertia_rejected() {
        let b = BodyInertia {
            mass: 1.0,
            com: Vector3::zeros(),
            rot_inertia: Matrix3::zeros(),
        };
        assert!(theta_from_inertia(&b).is_err());
    }

    #[test]
    fn dynamic_params_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let thetas = vec![random_theta(&mut rng), random_theta(&mut rng)];
            let total = 0.7;
            let jac = dynamic_params_jacobian(&thetas, total);
            let eval = |th: &[ThetaInertia]| -> Vec<f64> {
                inertias_with_total_mass(th, total)
                    .iter()
                    .flat_map(|b| b.dynamic_params())
                    .collect()
            };
            for col in 0..20 {
                let h = 1e-6;
                let mut tp = thetas.clone();
                let mut tm = thetas.clone();
                tp[col / 10].0[col % 10] += h;
                tm[col / 10].0[col % 10] -= h;
                let (fp, fm) = (eval(&tp), eval(&tm));
                for row in 0..20 {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    let an = jac[(row, col)];
                    let scale = an.abs().max(fd.abs()).max(1e-3);
                    assert!((fd - an).abs() / scale < 1e-5, "row {row} col {col}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn total_mass_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let thetas = vec![random_theta(&mut rng), random_theta(&mut rng)];
            let sum: f64 = inertias_with_total_mass(&thetas, 0.5).iter().map(|b| b.mass).sum();
            assert!((sum - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_mass_matrix_is_block_diagonal() {
        let inertia = Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.3));
        let model = KinematicModel {
            bodies: vec![Body {
                inertia: BodyInertia {
                    mass: 1.0,
                    com: Vector3::zeros(),
                    rot_inertia: inertia,
                },
                polytope: Polytope::cuboid(Vector3::zeros(), Vector3::new(0.1, 0.1, 0.1)),
            }],
            joint: None,
            total_mass: 1.0,
            gravity: 9.81,
        };
        let q = Configuration {
            position: Vector3::new(0.1, 0.2, 0.3),
            orientation: UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1),
            joint_angles: vec![],
        };
        let m = mass_matrix(&model, &q);
        let mut expected = DMatrix::zeros(6, 6);
        expected.view_mut((0, 0), (3, 3)).copy_from(&inertia);
        expected.view_mut((3, 3), (3, 3)).copy_from(&Matrix3::identity());
        assert!((m - expected).norm() < 1e-14);
    }

    #[test]
    fn two_link_mass_matrix_spd_and_configuration_dependent() {
        let model = two_link();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_state(&mut rng, 1);
            let m = mass_matrix(&model, &x.q);
            assert!((&m - m.transpose()).amax() < 1e-12);
            assert!(m.symmetric_eigenvalues().min() > 0.0);
        }
        let mut q1 = Configuration::identity(1);
        let m1 = mass_matrix(&model, &q1);
        q1.joint_angles[0] = 1.0;
        let m2 = mass_matrix(&model, &q1);
        assert!((m1 - m2).norm() > 1e-6);
    }

    #[test]
    fn free_fall() {
        let model = KinematicModel {
            bodies: vec![cube_body(1.0)],
            joint: None,
            total_mass: 1.0,
            gravity: 9.81,
        };
        let a = continuous_acceleration(&model, &State::rest(0), None).unwrap();
        let expected = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, -9.81]);
        assert!((a - expected).norm() < 1e-12);
        let zero_g = KinematicModel { gravity: 0.0, ..model };
        let a = continuous_acceleration(&zero_g, &State::rest(0), None).unwrap();
        assert!(a.norm() == 0.0);
    }

    #[test]
    fn sigma_matches_time_derivative_of_s() {
        // σ = d/dt[S(q(t))]·v at fixed v
        let model = two_link();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = random_state(&mut rng, 1);
            let frames = body_frames(&model, &x.q, Some(&x.v));
            let h = 1e-6;
            let qp = configuration_step(&x.q, &x.v, h);
            let qm = configuration_step(&x.q, &x.v, -h);
            let fp = body_frames(&model, &qp, None);
            let fm = body_frames(&model, &qm, None);
            let v = x.v.to_dvector();
            for b in 0..2 {
                let fd = (&fp[b].s * &v - &fm[b].s * &v) / (2.0 * h);
                let err = (fd - frames[b].sigma).norm();
                assert!(err < 1e-6 * (1.0 + frames[b].sigma.norm()), "body {b}: {err}");
            }
        }
    }

    #[test]
    fn configuration_step_properties() {
        let q = Configuration::identity(0);
        assert_eq!(configuration_step(&q, &Velocity::zeros(0), 0.01), q);
        let dt = 0.01;
        let v = Velocity {
            angular: Vector3::new(0.0, 0.0, std::f64::consts::PI / dt),
            linear: Vector3::zeros(),
            joint_rates: vec![],
        };
        let q2 = configuration_step(&q, &v, dt);
        let target = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
        assert!(crate::math::geodesic_angle(&q2.orientation, &target) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = random_state(&mut rng, 1);
            let q3 = configuration_step(&x.q, &x.v, rng.gen_range(1e-4..0.1));
            assert!((q3.orientation.quaternion().norm() - 1.0).abs() < 1e-12);
        }
    }
    #[test]
    fn velocity_product_terms_do_no_work() {
        // without gravity dE/dt = vᵀ(M·a) + ½vᵀṀv must vanish
        let model = KinematicModel {
            gravity: 0.0,
            ..two_link()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = random_state(&mut rng, 1);
            let a = continuous_acceleration(&model, &x, None).unwrap();
            let h = 1e-6;
            let shifted = |s: f64| {
                let v = Velocity::from_slice((x.v.to_dvector() + &a * s).as_slice());
                State {
                    q: configuration_step(&x.q, &x.v, s),
                    v,
                }
            };
            let rate = (kinetic_energy(&model, &shifted(h)) - kinetic_energy(&model, &shifted(-h))) / (2.0 * h);
            let scale = kinetic_energy(&model, &x);
            assert!(rate.abs() < 1e-5 * (1.0 + scale), "dE/dt = {rate}, E = {scale}");
        }
    }

    #[test]
    fn free_rotation_conserves_energy() {
        let model = KinematicModel {
            gravity: 0.0,
            ..two_link()
        };
        let mut x = State::rest(1);
        x.v.angular = Vector3::new(1.0, 2.0, -0.5);
        x.v.joint_rates[0] = 1.5;
        let e0 = kinetic_energy(&model, &x);
        let dt = 1e-3;
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a = continuous_acceleration(&model, &x, None).unwrap();
            let v = Velocity::from_slice((x.v.to_dvector() + a * dt).as_slice());
            x = State {
                q: configuration_step(&x.q, &v, dt),
                v,
            };
            worst = worst.max((kinetic_energy(&model, &x) - e0).abs() / e0);
        }
        assert!(worst < 1e-2, "relative drift {worst}");
    }
}
