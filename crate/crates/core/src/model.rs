//! Model descriptions, the learnable model and its initialization.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::math::sym_from6;
use crate::multibody::{
    inertias_with_total_mass, theta_from_inertia, Body, BodyInertia, Joint, KinematicModel, ThetaInertia,
};
use crate::nn::{LayerRecord, Mlp, ResidualNet};

pub const STANDARD_GRAVITY: f64 = 9.81;

fn default_gravity() -> f64 {
    STANDARD_GRAVITY
}

/// One rigid link of a model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyDescription {
    pub mass: f64,
    /// Center of mass in the body frame.
    pub com: [f64; 3],
    /// Inertia about the center of mass: `[xx, yy, zz, xy, xz, yz]`.
    pub inertia: [f64; 6],
    /// Nominal box dimensions used for initialization.
    #[serde(rename = "box")]
    pub box_dims: [f64; 3],
    /// Nominal box center in the body frame.
    #[serde(default)]
    pub center: [f64; 3],
    /// Contact vertices; defaults to the box corners.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDescription {
    pub axis: [f64; 3],
    pub parent_offset: [f64; 3],
}

/// Ground-truth description of an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub name: String,
    pub total_mass: f64,
    pub friction: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub bodies: Vec<BodyDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointDescription>,
}

fn box_inertia(mass: f64, dims: [f64; 3]) -> [f64; 6] {
    let [x, y, z] = dims;
    [
        mass * (y * y + z * z) / 12.0,
        mass * (x * x + z * z) / 12.0,
        mass * (x * x + y * y) / 12.0,
        0.0,
        0.0,
        0.0,
    ]
}

impl BodyDescription {
    pub fn polytope(&self) -> Polytope {
        match &self.vertices {
            Some(v) => Polytope::new(v.iter().map(|p| Vector3::from(*p)).collect()),
            None => Polytope::cuboid(Vector3::from(self.center), Vector3::from(self.box_dims)),
        }
    }

    pub fn body_inertia(&self) -> BodyInertia {
        BodyInertia::from_com_inertia(self.mass, Vector3::from(self.com), sym_from6(&self.inertia))
    }
}

impl ModelDescription {
    /// 10 cm cube.
    pub fn cube() -> Self {
        let mass = 0.37;
        let dims = [0.1, 0.1, 0.1];
        Self {
            name: "cube".into(),
            total_mass: mass,
            friction: 0.3,
            gravity: STANDARD_GRAVITY,
            bodies: vec![BodyDescription {
                mass,
                com: [0.0; 3],
                inertia: box_inertia(mass, dims),
                box_dims: dims,
                center: [0.0; 3],
                vertices: None,
            }],
            joint: None,
        }
    }

    /// Six-vertex asymmetric object with isotropic inertia.
    pub fn asymmetric() -> Self {
        let vertices = vec![
            [0.08, 0.0, 0.0],
            [-0.05, 0.0, 0.0],
            [0.0, 0.06, 0.0],
            [0.0, -0.07, 0.0],
            [0.0, 0.0, 0.06],
            [0.0, 0.0, -0.05],
        ];
        Self {
            name: "asymmetric".into(),
            total_mass: 0.25,
            friction: 0.3,
            gravity: STANDARD_GRAVITY,
            bodies: vec![BodyDescription {
                mass: 0.25,
                com: [0.0; 3],
                inertia: [0.00081, 0.00081, 0.00081, 0.0, 0.0, 0.0],
                box_dims: [0.13, 0.13, 0.11],
                center: [0.015, -0.005, 0.005],
                vertices: Some(vertices),
            }],
            joint: None,
        }
    }

    /// Two 5×5×10 cm links joined end to end by a hinge about y.
    pub fn articulated() -> Self {
        let mass = 0.25;
        let dims = [0.1, 0.05, 0.05];
        let link = |center: [f64; 3]| BodyDescription {
            mass,
            com: center,
            inertia: box_inertia(mass, dims),
            box_dims: dims,
            center,
            vertices: None,
        };
        Self {
            name: "articulated".into(),
            total_mass: 2.0 * mass,
            friction: 0.3,
            gravity: STANDARD_GRAVITY,
            bodies: vec![link([0.0; 3]), link([0.05, 0.0, 0.0])],
            joint: Some(JointDescription {
                axis: [0.0, 1.0, 0.0],
                parent_offset: [0.05, 0.0, 0.0],
            }),
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cube" => Ok(Self::cube()),
            "asymmetric" => Ok(Self::asymmetric()),
            "articulated" => Ok(Self::articulated()),
            other => Err(Error::Invalid(format!("unknown built-in model '{other}'"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let d: Self = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn n_joints(&self) -> usize {
        usize::from(self.joint.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.bodies.len() != 1 + self.n_joints() {
            return Err(Error::Invalid(format!(
                "{} bodies need {} joints",
                self.bodies.len(),
                self.bodies.len().saturating_sub(1)
            )));
        }
        if !(self.friction >= 0.0) || !self.friction.is_finite() {
            return Err(Error::Invalid(format!("friction {} must be ≥ 0", self.friction)));
        }
        if !(self.gravity >= 0.0) || !self.gravity.is_finite() {
            return Err(Error::Invalid(format!("gravity {} must be ≥ 0", self.gravity)));
        }
        if let Some(j) = &self.joint {
            if Vector3::from(j.axis).norm() < 1e-12 {
                return Err(Error::Invalid("joint axis must be nonzero".into()));
            }
        }
        for b in &self.bodies {
            if b.box_dims.iter().any(|d| !(*d > 0.0)) {
                return Err(Error::Invalid("box dimensions must be positive".into()));
            }
        }
        self.kinematic_model().validate()
    }

    pub fn joint(&self) -> Option<Joint> {
        self.joint.as_ref().map(|j| Joint {
            axis: Unit::new_normalize(Vector3::from(j.axis)),
            parent_offset: Vector3::from(j.parent_offset),
        })
    }

    pub fn kinematic_model(&self) -> KinematicModel {
        KinematicModel {
            bodies: self
                .bodies
                .iter()
                .map(|b| Body {
                    inertia: b.body_inertia(),
                    polytope: b.polytope(),
                })
                .collect(),
            joint: self.joint(),
            total_mass: self.total_mass,
            gravity: self.gravity,
        }
    }

    /// The learnable model holding the true parameters.
    pub fn true_model(&self) -> Result<LearnedModel> {
        let thetas = self
            .bodies
            .iter()
            .map(|b| theta_from_inertia(&b.body_inertia()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LearnedModel {
            name: self.name.clone(),
            total_mass: self.total_mass,
            gravity: self.gravity,
            joint: self.joint(),
            vertices: self.bodies.iter().map(|b| b.polytope().vertices).collect(),
            thetas,
            mu: self.friction,
            residual: None,
        })
    }
}

/// All learnable parameters plus the fixed structure they attach to.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel {
    pub name: String,
    pub total_mass: f64,
    /// Believed gravitational acceleration magnitude.
    pub gravity: f64,
    pub joint: Option<Joint>,
    pub vertices: Vec<Vec<Vector3<f64>>>,
    pub thetas: Vec<ThetaInertia>,
    pub mu: f64,
    pub residual: Option<ResidualNet>,
}

impl LearnedModel {
    pub fn n_bodies(&self) -> usize {
        self.thetas.len()
    }

    pub fn n_joints(&self) -> usize {
        usize::from(self.joint.is_some())
    }

    pub fn n_contacts(&self) -> usize {
        self.vertices.iter().map(Vec::len).sum()
    }

    pub fn inertias(&self) -> Vec<BodyInertia> {
        inertias_with_total_mass(&self.thetas, self.total_mass)
    }

    pub fn kinematic_model(&self) -> KinematicModel {
        KinematicModel {
            bodies: self
                .inertias()
                .into_iter()
                .zip(&self.vertices)
                .map(|(inertia, v)| Body {
                    inertia,
                    polytope: Polytope::new(v.clone()),
                })
                .collect(),
            joint: self.joint.clone(),
            total_mass: self.total_mass,
            gravity: self.gravity,
        }
    }

    /// Number of structured (non-network) parameters.
    pub fn n_structured(&self) -> usize {
        3 * self.n_contacts() + 1 + 10 * self.n_bodies()
    }

    /// Offset of μ in the structured layout.
    pub fn mu_index(&self) -> usize {
        3 * self.n_contacts()
    }

    pub fn theta_index(&self, body: usize) -> usize {
        self.mu_index() + 1 + 10 * body
    }

    /// Structured parameters `[vertices (body-major, xyz), μ, θ per body]`.
    pub fn structured_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_structured());
        for body in &self.vertices {
            for v in body {
                out.extend(v.iter());
            }
        }
        out.push(self.mu);
        for t in &self.thetas {
            out.extend(t.0);
        }
        out
    }

    pub fn set_structured_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for body in &mut self.vertices {
            for v in body.iter_mut() {
                *v = Vector3::new(p[k], p[k + 1], p[k + 2]);
                k += 3;
            }
        }
        self.mu = p[k];
        k += 1;
        for t in &mut self.thetas {
            t.0.copy_from_slice(&p[k..k + 10]);
            k += 10;
        }
    }

    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            schema: MODEL_SCHEMA.into(),
            name: self.name.clone(),
            total_mass: self.total_mass,
            gravity: self.gravity,
            joint: self.joint.as_ref().map(|j| JointDescription {
                axis: j.axis.into_inner().into(),
                parent_offset: j.parent_offset.into(),
            }),
            vertices: self
                .vertices
                .iter()
                .map(|b| b.iter().map(|v| (*v).into()).collect())
                .collect(),
            thetas: self.thetas.iter().map(|t| t.0).collect(),
            mu: self.mu,
            residual: self.residual.as_ref().map(|r| r.mlp.to_records()),
        }
    }

    pub fn from_record(r: &ModelRecord) -> Result<Self> {
        if r.schema != MODEL_SCHEMA {
            return Err(Error::Format(format!("unsupported model schema '{}'", r.schema)));
        }
        if r.vertices.len() != r.thetas.len() {
            return Err(Error::Format("vertex sets and inertia vectors differ in count".into()));
        }
        let residual = match &r.residual {
            Some(layers) => Some(ResidualNet {
                mlp: Mlp::from_records(layers)?,
            }),
            None => None,
        };
        Ok(Self {
            name: r.name.clone(),
            total_mass: r.total_mass,
            gravity: r.gravity,
            joint: r.joint.as_ref().map(|j| Joint {
                axis: Unit::new_normalize(Vector3::from(j.axis)),
                parent_offset: Vector3::from(j.parent_offset),
            }),
            vertices: r
                .vertices
                .iter()
                .map(|b| b.iter().map(|v| Vector3::from(*v)).collect())
                .collect(),
            thetas: r.thetas.iter().map(|t| ThetaInertia(*t)).collect(),
            mu: r.mu,
            residual,
        })
    }
}

/// Hex SHA-256 of the JSON encoding of `v`.
pub fn content_hash<T: Serialize + ?Sized>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("value serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub const MODEL_SCHEMA: &str = "sysid-model/1";

/// Serialized form of a [`LearnedModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub schema: String,
    pub name: String,
    pub total_mass: f64,
    pub gravity: f64,
    pub joint: Option<JointDescription>,
    pub vertices: Vec<Vec<[f64; 3]>>,
    pub thetas: Vec<[f64; 10]>,
    pub mu: f64,
    pub residual: Option<Vec<LayerRecord>>,
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng>(rng: &mut R) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}

/// Inertia of a random virtual box link: dimensions and mass scaled by
/// `U(0.5, 1.5)`, center of mass uniform in the inner half of the box,
/// principal moments from the uniform-density formula, randomly rotated.
pub fn sample_link_inertia<R: Rng>(body: &BodyDescription, rng: &mut R) -> BodyInertia {
    let dims: [f64; 3] = std::array::from_fn(|k| body.box_dims[k] * rng.gen_range(0.5..1.5));
    let com = Vector3::from_fn(|k, _| body.center[k] + rng.gen_range(-0.25..0.25) * dims[k]);
    let mass = body.mass * rng.gen_range(0.5..1.5);
    let principal = box_inertia(mass, dims);
    let rot = random_rotation(rng).to_rotation_matrix();
    let diag = Matrix3::from_diagonal(&Vector3::new(principal[0], principal[1], principal[2]));
    BodyInertia::from_com_inertia(mass, com, rot.matrix() * diag * rot.matrix().transpose())
}

/// Random learner initialization around a ground-truth description.
pub fn sample_initial_parameters<R: Rng>(desc: &ModelDescription, rng: &mut R) -> Result<LearnedModel> {
    let mut model = desc.true_model()?;
    for verts in model.vertices.iter_mut() {
        let scale = Vector3::from_fn(|_, _| rng.gen_range(0.5..1.5));
        for v in verts.iter_mut() {
            *v = v.component_mul(&scale);
        }
    }
    model.mu = desc.friction * rng.gen_range(0.5..1.5);
    model.thetas = desc
        .bodies
        .iter()
        .map(|b| theta_from_inertia(&sample_link_inertia(b, rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtins_validate() {
        for name in ["cube", "asymmetric", "articulated"] {
            let d = ModelDescription::builtin(name).unwrap();
            d.validate().unwrap();
            let m = d.true_model().unwrap();
            let k = m.kinematic_model();
            k.validate().unwrap();
            for (a, b) in k.bodies.iter().zip(d.kinematic_model().bodies.iter()) {
                for (x, y) in a.inertia.metric_vector().iter().zip(b.inertia.metric_vector()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        assert!(ModelDescription::builtin("sphere").is_err());
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let d = ModelDescription::articulated();
        let s = d.to_toml_string().unwrap();
        assert_eq!(ModelDescription::from_toml_str(&s).unwrap(), d);
        let bad = format!("{s}\ncolor = \"red\"\n");
        assert!(ModelDescription::from_toml_str(&bad).is_err());
    }

    #[test]
    fn unit_cube_box_formula() {
        let i = box_inertia(1.0, [0.1, 0.1, 0.1]);
        assert!((i[0] - 1.0 * (0.01 + 0.01) / 12.0).abs() < 1e-15);
        assert!((i[0] - 1.667e-3).abs() < 1e-6);
    }

    #[test]
    fn initializations_are_feasible_and_deterministic() {
        let d = ModelDescription::articulated();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let m = sample_initial_parameters(&d, &mut rng).unwrap();
            for b in m.inertias() {
                b.validate().unwrap();
            }
            let sum: f64 = m.inertias().iter().map(|b| b.mass).sum();
            assert!((sum - d.total_mass).abs() < 1e-9);
            assert!(m.mu >= 0.5 * d.friction && m.mu <= 1.5 * d.friction);
        }
        let a = sample_initial_parameters(&d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_initial_parameters(&d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn structured_layout_roundtrip() {
        let d = ModelDescription::articulated();
        let mut m = sample_initial_parameters(&d, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let p = m.structured_params();
        assert_eq!(p.len(), m.n_structured());
        assert_eq!(p.len(), 48 + 1 + 20);
        assert_eq!(p[m.mu_index()], m.mu);
        let before = m.clone();
        m.set_structured_params(&p);
        assert_eq!(m, before);
    }

    #[test]
    fn record_roundtrip() {
        let d = ModelDescription::cube();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = sample_initial_parameters(&d, &mut rng).unwrap();
        m.residual = Some(ResidualNet::new(0, &mut rng));
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back = LearnedModel::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn random_rotation_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            assert!((random_rotation(&mut rng).quaternion().norm() - 1.0).abs() < 1e-12);
        }
    }
}
