//! Vertex polytopes against the ground plane `z = 0`, contact Jacobians and
//! friction cone operations.
//!
//! Contacts are enumerated body-major, one per vertex. Impulse vectors use the
//! layout `[λ_n (p entries); λ_t (2p entries)]`, matching `J = [J_n; J_t]`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::math::skew;
use crate::multibody::{body_frames, body_poses, Configuration, KinematicModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub vertices: Vec<Vector3<f64>>,
}

impl Polytope {
    pub fn new(vertices: Vec<Vector3<f64>>) -> Self {
        Self { vertices }
    }

    /// The 8 corners of an axis-aligned box.
    pub fn cuboid(center: Vector3<f64>, dims: Vector3<f64>) -> Self {
        let h = dims * 0.5;
        let mut vertices = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    vertices.push(center + Vector3::new(sx * h.x, sy * h.y, sz * h.z));
                }
            }
        }
        Self { vertices }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 4 {
            return Err(Error::Invalid(format!(
                "polytope needs at least 4 vertices, got {}",
                self.vertices.len()
            )));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Invalid("non-finite polytope vertex".into()));
        }
        Ok(())
    }
}

/// Owning body and body-frame position of every contact candidate.
pub fn contact_points(model: &KinematicModel) -> Vec<(usize, Vector3<f64>)> {
    model
        .bodies
        .iter()
        .enumerate()
        .flat_map(|(b, body)| body.polytope.vertices.iter().map(move |v| (b, *v)))
        .collect()
}

/// Height of every vertex above the ground plane.
pub fn signed_distances(model: &KinematicModel, q: &Configuration) -> DVector<f64> {
    let poses = body_poses(model, q);
    let pts = contact_points(model);
    DVector::from_iterator(
        pts.len(),
        pts.iter().map(|(b, r)| {
            let (rot, p) = &poses[*b];
            (p + rot * r).z
        }),
    )
}

/// `J = [J_n; J_t]` with tangent directions world x and y.
pub fn contact_jacobian(model: &KinematicModel, q: &Configuration) -> DMatrix<f64> {
    let frames = body_frames(model, q, None);
    let pts = contact_points(model);
    let p = pts.len();
    let n = model.n_vel();
    let mut jac = DMatrix::zeros(3 * p, n);
    for (i, (b, r)) in pts.iter().enumerate() {
        let f = &frames[*b];
        // world velocity of the point: R_b (ν_b + ω_b × r)
        let mut map = nalgebra::Matrix3x6::zeros();
        map.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(r)));
        map.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let pv = f.rotation * map * &f.s;
        jac.row_mut(i).copy_from(&pv.row(2));
        jac.row_mut(p + 2 * i).copy_from(&pv.row(0));
        jac.row_mut(p + 2 * i + 1).copy_from(&pv.row(1));
    }
    jac
}

/// Stacked per-contact impulses in `[λ_n; λ_t]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactImpulse(pub DVector<f64>);

impl ContactImpulse {
    pub fn zeros(n_contacts: usize) -> Self {
        Self(DVector::zeros(3 * n_contacts))
    }

    pub fn n_contacts(&self) -> usize {
        self.0.len() / 3
    }

    pub fn normal(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn tangent(&self, i: usize) -> Vector2<f64> {
        let p = self.n_contacts();
        Vector2::new(self.0[p + 2 * i], self.0[p + 2 * i + 1])
    }
}

/// Euclidean projection of a single `(n, t)` pair onto `‖t‖ ≤ μ·n`.
pub fn project_single(n: f64, t: Vector2<f64>, mu: f64) -> (f64, Vector2<f64>) {
    let tn = t.norm();
    if tn <= mu * n {
        (n, t)
    } else if mu * tn <= -n {
        (0.0, Vector2::zeros())
    } else {
        let alpha = (n + mu * tn) / (1.0 + mu * mu);
        (alpha, t * (mu * alpha / tn))
    }
}

/// Projection onto the product of friction cones, in place.
pub fn project_in_place(lambda: &mut DVector<f64>, mu: f64) {
    let p = lambda.len() / 3;
    for i in 0..p {
        let t = Vector2::new(lambda[p + 2 * i], lambda[p + 2 * i + 1]);
        let (n, t) = project_single(lambda[i], t, mu);
        lambda[i] = n;
        lambda[p + 2 * i] = t.x;
        lambda[p + 2 * i + 1] = t.y;
    }
}

pub fn project_to_cone(lambda: &ContactImpulse, mu: f64) -> ContactImpulse {
    let mut out = lambda.0.clone();
    project_in_place(&mut out, mu);
    ContactImpulse(out)
}

pub fn cone_membership(lambda: &ContactImpulse, mu: f64, tol: f64) -> bool {
    (0..lambda.n_contacts()).all(|i| {
        let n = lambda.normal(i);
        n >= -tol && lambda.tangent(i).norm() <= mu * n + tol
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multibody::{configuration_step, Body, BodyInertia, Joint, Velocity};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(vertices: Vec<Vector3<f64>>) -> KinematicModel {
        KinematicModel {
            bodies: vec![Body {
                inertia: BodyInertia::from_com_inertia(1.0, Vector3::zeros(), Matrix3::identity() * 1e-3),
                polytope: Polytope::new(vertices),
            }],
            joint: None,
            total_mass: 1.0,
            gravity: 9.81,
        }
    }

    fn articulated() -> KinematicModel {
        let b0 = Body {
            inertia: BodyInertia::from_com_inertia(0.25, Vector3::zeros(), Matrix3::identity() * 2e-4),
            polytope: Polytope::cuboid(Vector3::zeros(), Vector3::new(0.1, 0.05, 0.05)),
        };
        let b1 = Body {
            inertia: BodyInertia::from_com_inertia(0.25, Vector3::new(0.05, 0.0, 0.0), Matrix3::identity() * 2e-4),
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

    fn random_q(rng: &mut ChaCha8Rng, nj: usize) -> Configuration {
        Configuration {
            position: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..1.0),
            ),
            orientation: UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            )),
            joint_angles: (0..nj).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        }
    }

    fn random_v(rng: &mut ChaCha8Rng, nj: usize) -> Velocity {
        let x: Vec<f64> = (0..6 + nj).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Velocity::from_slice(&x)
    }

    #[test]
    fn height_of_offset_vertex() {
        let model = single(vec![Vector3::new(0.0, 0.0, 0.05); 4]);
        let mut q = Configuration::identity(0);
        q.position.z = 0.1;
        let phi = signed_distances(&model, &q);
        assert!((phi[0] - 0.15).abs() < 1e-15);
        q.position.z = -0.2;
        assert!(signed_distances(&model, &q)[0] < 0.0);
    }

    #[test]
    fn flip_about_x_negates_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let verts: Vec<_> = (0..6)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                )
            })
            .collect();
        let model = single(verts.clone());
        let mut q = Configuration::identity(0);
        q.position.z = 0.5;
        let up = signed_distances(&model, &q);
        q.orientation = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        let down = signed_distances(&model, &q);
        for i in 0..6 {
            assert!(((up[i] - 0.5) + (down[i] - 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_at_com_has_no_lever_arm() {
        let model = single(vec![Vector3::zeros(); 4]);
        let jac = contact_jacobian(&model, &Configuration::identity(0));
        let row: Vec<f64> = jac.row(0).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn jacobian_matches_point_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for model in [
            single(Polytope::cuboid(Vector3::new(0.01, 0.0, 0.02), Vector3::new(0.1, 0.1, 0.1)).vertices),
            articulated(),
        ] {
            let nj = model.n_joints();
            for _ in 0..20 {
                let q = random_q(&mut rng, nj);
                let v = random_v(&mut rng, nj);
                let jac = contact_jacobian(&model, &q);
                let jv = &jac * v.to_dvector();
                let h = 1e-6;
                let world = |q: &Configuration| -> Vec<Vector3<f64>> {
                    let poses = body_poses(&model, q);
                    contact_points(&model)
                        .iter()
                        .map(|(b, r)| poses[*b].1 + poses[*b].0 * r)
                        .collect()
                };
                let wp = world(&configuration_step(&q, &v, h));
                let wm = world(&configuration_step(&q, &v, -h));
                let p = model.n_contacts();
                for i in 0..p {
                    let fd = (wp[i] - wm[i]) / (2.0 * h);
                    assert!((fd.z - jv[i]).abs() < 1e-6);
                    assert!((fd.x - jv[p + 2 * i]).abs() < 1e-6);
                    assert!((fd.y - jv[p + 2 * i + 1]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn joint_column_only_on_child_contacts() {
        let model = articulated();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = random_q(&mut rng, 1);
        let jac = contact_jacobian(&model, &q);
        let p = model.n_contacts();
        for (i, (b, _)) in contact_points(&model).iter().enumerate() {
            let col = [jac[(i, 6)], jac[(p + 2 * i, 6)], jac[(p + 2 * i + 1, 6)]];
            if *b == 0 {
                assert!(col.iter().all(|c| *c == 0.0));
            } else {
                assert!(col.iter().any(|c| c.abs() > 1e-6));
            }
        }
    }

    #[test]
    fn phi_vertex_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut model = single(Polytope::cuboid(Vector3::zeros(), Vector3::new(0.1, 0.1, 0.1)).vertices);
        let q = random_q(&mut rng, 0);
        let rot = *q.orientation.to_rotation_matrix().matrix();
        for k in 0..3 {
            let h = 1e-6;
            model.bodies[0].polytope.vertices[2][k] += h;
            let fp = signed_distances(&model, &q)[2];
            model.bodies[0].polytope.vertices[2][k] -= 2.0 * h;
            let fm = signed_distances(&model, &q)[2];
            model.bodies[0].polytope.vertices[2][k] += h;
            assert!(((fp - fm) / (2.0 * h) - rot[(2, k)]).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_examples() {
        let mu = 1.0;
        let feasible = ContactImpulse(DVector::from_vec(vec![1.0, 0.3, -0.2]));
        assert_eq!(project_to_cone(&feasible, mu), feasible);
        let polar = project_to_cone(&ContactImpulse(DVector::from_vec(vec![-1.0, 0.0, 0.0])), mu);
        assert_eq!(polar.0.as_slice(), &[0.0, 0.0, 0.0]);
        let side = project_to_cone(&ContactImpulse(DVector::from_vec(vec![0.0, 1.0, 0.0])), mu);
        assert!((side.0 - DVector::from_vec(vec![0.5, 0.5, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn projection_matches_dense_search() {
        // brute-force nearest point over a discretized cone surface and interior
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let mu = rng.gen_range(0.1..1.5);
            let x = (
                rng.gen_range(-1.0..1.0),
                Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            );
            let (pn, pt) = project_single(x.0, x.1, mu);
            let dist = ((pn - x.0).powi(2) + (pt - x.1).norm_squared()).sqrt();
            let mut best = (x.0.powi(2) + x.1.norm_squared()).sqrt();
            let steps = 400;
            for a in 0..steps {
                let ang = 2.0 * std::f64::consts::PI * a as f64 / steps as f64;
                let dir = Vector2::new(ang.cos(), ang.sin());
                // nearest point on the ray (n, μ n dir), n ≥ 0
                let denom = 1.0 + mu * mu;
                let n = ((x.0 + mu * dir.dot(&x.1)) / denom).max(0.0);
                let d = ((n - x.0).powi(2) + (dir * (mu * n) - x.1).norm_squared()).sqrt();
                best = best.min(d);
            }
            if x.1.norm() <= mu * x.0 {
                best = 0.0;
            }
            assert!(dist <= best + 1e-12, "{dist} vs {best}");
            assert!(dist >= best - 1e-4, "{dist} vs {best}");
        }
    }

    #[test]
    fn membership_examples() {
        assert!(cone_membership(&ContactImpulse::zeros(3), 0.3, 0.0));
        let l = ContactImpulse(DVector::from_vec(vec![1.0, 0.5, 0.0]));
        assert!(!cone_membership(&l, 0.4, 0.0));
    }

    fn impulse_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (1usize..5).prop_flat_map(|p| (prop::collection::vec(-10.0..10.0f64, 3 * p), 0.0..2.0f64))
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent((x, mu) in impulse_strategy()) {
            let l = ContactImpulse(DVector::from_vec(x));
            let p1 = project_to_cone(&l, mu);
            prop_assert!(cone_membership(&p1, mu, 1e-10));
            let p2 = project_to_cone(&p1, mu);
            prop_assert!((p2.0 - &p1.0).amax() <= 1e-12);
        }

        #[test]
        fn projection_is_non_expansive((x, mu) in impulse_strategy(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
            let a = ContactImpulse(DVector::from_vec(x));
            let b = ContactImpulse(DVector::from_vec(y));
            let d = (project_to_cone(&a, mu).0 - project_to_cone(&b, mu).0).norm();
            prop_assert!(d <= (a.0 - b.0).norm() + 1e-12);
        }
    }
}
