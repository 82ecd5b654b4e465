//! Parameter-error and trajectory-error metrics.

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::geodesic_angle;
use crate::model::{LearnedModel, ModelDescription};
use crate::multibody::{body_poses, BodyInertia, KinematicModel};
use crate::par::{self, Exec};
use crate::sim::{rollout, Stepper, Trajectory};

/// Convex hull as an intersection of half-spaces `n·x ≤ d`.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    planes: Vec<(Vector3<f64>, f64)>,
    volume: f64,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

fn polygon_area(points: &[Vector2<f64>]) -> f64 {
    // monotone chain hull, then the shoelace formula
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a - o).perp(&(b - o));
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    let n = hull.len();
    (0..n).map(|i| hull[i].perp(&hull[(i + 1) % n])).sum::<f64>().abs() * 0.5
}

impl ConvexHull {
    /// Brute-force hull: every point triple whose plane supports the set is a
    /// facet plane.
    pub fn new(points: &[Vector3<f64>]) -> Result<Self> {
        if points.len() < 4 || points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Degenerate("a hull needs at least four finite points".into()));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let scale = (hi - lo).amax().max(f64::MIN_POSITIVE);
        let tol = 1e-10 * scale;
        let mut planes: Vec<(Vector3<f64>, f64)> = Vec::new();
        let np = points.len();
        for i in 0..np {
            for j in i + 1..np {
                for k in j + 1..np {
                    let n = (points[j] - points[i]).cross(&(points[k] - points[i]));
                    let norm = n.norm();
                    if norm <= 1e-12 * scale * scale {
                        continue;
                    }
                    let mut n = n / norm;
                    let mut d = n.dot(&points[i]);
                    let above = points.iter().any(|p| n.dot(p) - d > tol);
                    let below = points.iter().any(|p| n.dot(p) - d < -tol);
                    if above && below {
                        continue;
                    }
                    if above {
                        n = -n;
                        d = -d;
                    }
                    if !planes
                        .iter()
                        .any(|(m, e)| m.dot(&n) > 1.0 - 1e-9 && (e - d).abs() <= tol)
                    {
                        planes.push((n, d));
                    }
                }
            }
        }
        let center = points.iter().sum::<Vector3<f64>>() / np as f64;
        let mut volume = 0.0;
        for (n, d) in &planes {
            let u = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let u = (u - n * n.dot(&u)).normalize();
            let w = n.cross(&u);
            let on: Vec<Vector2<f64>> = points
                .iter()
                .filter(|p| (n.dot(p) - d).abs() <= tol)
                .map(|p| Vector2::new(u.dot(p), w.dot(p)))
                .collect();
            volume += polygon_area(&on) * (d - n.dot(&center)) / 3.0;
        }
        if planes.len() < 4 || !(volume > 0.0) {
            return Err(Error::Degenerate("points are coplanar".into()));
        }
        Ok(Self { planes, volume, lo, hi })
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        self.planes.iter().all(|(n, d)| n.dot(x) <= *d)
    }
}

/// Monte Carlo settings for intersection volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolumeConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            samples: 2_000_000,
            seed: 0x5eed,
        }
    }
}

/// `(Vol(A) + Vol(B) − 2·Vol(A∩B)) / Vol(A)` for learned `B` and actual `A`.
///
/// Samples are uniform in the union's bounding box; `Vol(A∩B)` is estimated
/// as `Vol(A)` times the fraction of samples inside `A` that are also in `B`,
/// which is exact when the hulls coincide.
pub fn volume_error(learned: &ConvexHull, actual: &ConvexHull, cfg: &VolumeConfig) -> f64 {
    let lo = learned.lo.inf(&actual.lo);
    let hi = learned.hi.sup(&actual.hi);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut in_a, mut in_both) = (0u64, 0u64);
    for _ in 0..cfg.samples {
        let x = Vector3::from_fn(|k, _| {
            if hi[k] > lo[k] {
                rng.gen_range(lo[k]..hi[k])
            } else {
                lo[k]
            }
        });
        if actual.contains(&x) {
            in_a += 1;
            if learned.contains(&x) {
                in_both += 1;
            }
        }
    }
    let va = actual.volume();
    let vb = learned.volume();
    let inter = if in_a == 0 {
        0.0
    } else {
        va * in_both as f64 / in_a as f64
    };
    ((va + vb - 2.0 * inter) / va).max(0.0)
}

/// Mean volume error over bodies.
pub fn e_volume(learned: &[Vec<Vector3<f64>>], actual: &[Vec<Vector3<f64>>], cfg: &VolumeConfig) -> Result<f64> {
    if learned.len() != actual.len() || actual.is_empty() {
        return Err(Error::Invalid("body counts differ".into()));
    }
    let mut total = 0.0;
    for (l, a) in learned.iter().zip(actual) {
        let ha = ConvexHull::new(a)?;
        let hl = ConvexHull::new(l)?;
        total += volume_error(&hl, &ha, cfg);
    }
    Ok(total / actual.len() as f64)
}

pub fn e_friction(learned: &[f64], actual: &[f64]) -> Result<f64> {
    if learned.len() != actual.len() {
        return Err(Error::Invalid("friction vectors differ in length".into()));
    }
    Ok(learned
        .iter()
        .zip(actual)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Characteristic length for center-of-mass errors (m).
pub const COM_SCALE: f64 = 0.035;

/// Per-body reciprocal scales for `[m, com, I_xx, I_yy, I_zz, I_xy, I_xz, I_yz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InertiaNormalizer {
    pub s: Vec<[f64; 10]>,
}

impl InertiaNormalizer {
    /// Built from the actual inertias: `1/m`, `1/0.035` for the com, `1/I_ii`
    /// for moments, and for products `1/|I_ij|`, or the body's mean moment
    /// scale when the product is exactly zero.
    pub fn from_actual(actual: &[BodyInertia]) -> Result<Self> {
        let mut s = Vec::with_capacity(actual.len());
        for b in actual {
            let v = b.metric_vector();
            if !(v[0] > 0.0) || v[4..7].iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Invalid("actual mass and moments must be positive".into()));
            }
            let moment = (v[4] + v[5] + v[6]) / 3.0;
            let mut row = [0.0; 10];
            row[0] = 1.0 / v[0];
            row[1..4].fill(1.0 / COM_SCALE);
            for k in 4..7 {
                row[k] = 1.0 / v[k];
            }
            for k in 7..10 {
                row[k] = if v[k] == 0.0 { 1.0 / moment } else { 1.0 / v[k].abs() };
            }
            s.push(row);
        }
        Ok(Self { s })
    }
}

pub fn e_inertia(learned: &[BodyInertia], actual: &[BodyInertia], s: &InertiaNormalizer) -> Result<f64> {
    if learned.len() != actual.len() || actual.len() != s.s.len() {
        return Err(Error::Invalid("body counts differ".into()));
    }
    let mut sq = 0.0;
    for ((l, a), sb) in learned.iter().zip(actual).zip(&s.s) {
        let (lv, av) = (l.metric_vector(), a.metric_vector());
        for k in 0..10 {
            sq += (sb[k] * (lv[k] - av[k])).powi(2);
        }
    }
    Ok(sq.sqrt())
}

/// The three parameter errors of a learned model against its ground truth.
pub fn parameter_errors(learned: &LearnedModel, actual: &ModelDescription, vol: &VolumeConfig) -> Result<[f64; 3]> {
    let truth = actual.true_model()?;
    let ev = e_volume(&learned.vertices, &truth.vertices, vol)?;
    let ef = e_friction(&[learned.mu], &[actual.friction])?;
    let actual_inertia = truth.inertias();
    let norm = InertiaNormalizer::from_actual(&actual_inertia)?;
    let ei = e_inertia(&learned.inertias(), &actual_inertia, &norm)?;
    Ok([ev, ef, ei])
}

/// Trajectory errors of rolled-out predictions against recorded tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajErrors {
    /// Mean body-origin position error (m).
    pub pos: f64,
    /// Mean geodesic body orientation error (degrees).
    pub rot_deg: f64,
    /// Per-trajectory `(pos, rot_deg)`; `None` when the rollout failed.
    pub per_trajectory: Vec<Option<(f64, f64)>>,
    pub failed: usize,
}

fn body_quaternion(r: &nalgebra::Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Errors between two state sequences of equal length, skipping the shared
/// initial state.
pub fn sequence_errors(
    structure: &KinematicModel,
    pred: &[crate::multibody::State],
    obs: &[crate::multibody::State],
) -> (f64, f64) {
    let mut pos = 0.0;
    let mut rot = 0.0;
    let mut count = 0.0;
    for (a, b) in pred.iter().zip(obs).skip(1) {
        for ((ra, pa), (rb, pb)) in body_poses(structure, &a.q)
            .iter()
            .zip(body_poses(structure, &b.q).iter())
        {
            pos += (pa - pb).norm();
            rot += geodesic_angle(&body_quaternion(ra), &body_quaternion(rb)).to_degrees();
            count += 1.0;
        }
    }
    if count == 0.0 {
        (0.0, 0.0)
    } else {
        (pos / count, rot / count)
    }
}

/// Rolls `stepper` out from each trajectory's initial state over its full
/// horizon. Failed rollouts are excluded and counted.
pub fn traj_errors<S: Stepper + ?Sized>(
    stepper: &S,
    structure: &KinematicModel,
    trajectories: &[Trajectory],
    exec: Exec,
) -> Result<TrajErrors> {
    let per: Vec<Option<(f64, f64)>> = par::map(exec, trajectories, |t| {
        let n = t.states.len().checked_sub(1)?;
        if n == 0 {
            return None;
        }
        let pred = rollout(stepper, &t.states[0], n, t.dt).ok()?;
        let e = sequence_errors(structure, &pred.states, &t.states);
        (e.0.is_finite() && e.1.is_finite()).then_some(e)
    });
    let ok: Vec<(f64, f64)> = per.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::InsufficientData("no trajectory could be rolled out".into()));
    }
    let k = ok.len() as f64;
    Ok(TrajErrors {
        pos: ok.iter().map(|e| e.0).sum::<f64>() / k,
        rot_deg: ok.iter().map(|e| e.1).sum::<f64>() / k,
        failed: per.len() - ok.len(),
        per_trajectory: per,
    })
}

/// All metrics of one trained model. Parameter errors are absent for
/// unstructured models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub e_volume: Option<f64>,
    pub e_friction: Option<f64>,
    pub e_inertia: Option<f64>,
    pub traj_pos_error: f64,
    pub traj_rot_error: f64,
    pub n_test: usize,
    pub n_failed: usize,
}
