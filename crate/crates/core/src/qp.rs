//! Accelerated projected gradient for convex quadratics over friction cones.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::project_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub lambda: DVector<f64>,
    /// `½λᵀHλ + gᵀλ`.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn largest_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    x /= x.norm();
    let mut est = 0.0;
    for _ in 0..100 {
        let y = h * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        let next = x.dot(&y);
        x = y / ny;
        if (next - est).abs() <= 1e-10 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    est
}

/// Proximal-gradient residual `‖λ − P(λ − ∇f/L)‖`.
fn kkt_residual(h: &DMatrix<f64>, g: &DVector<f64>, lambda: &DVector<f64>, mu: f64, step: f64) -> f64 {
    let grad = h * lambda + g;
    let mut trial = lambda - grad * step;
    project_in_place(&mut trial, mu);
    (lambda - trial).norm()
}

fn objective(h: &DMatrix<f64>, g: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    0.5 * lambda.dot(&(h * lambda)) + g.dot(lambda)
}

/// Minimizes `½λᵀHλ + gᵀλ` over the product of friction cones with
/// coefficient `mu` (FISTA with gradient restart). `H` must be symmetric
/// positive semidefinite.
pub fn solve_cone_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    mu: f64,
    cfg: &SolverConfig,
    warm_start: Option<&DVector<f64>>,
) -> QpSolution {
    let n = g.len();
    if n == 0 {
        return QpSolution {
            lambda: DVector::zeros(0),
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let lip = largest_eigenvalue(h) * 1.05;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };

    let zero = DVector::zeros(n);
    let r0 = kkt_residual(h, g, &zero, mu, step);
    if r0 <= cfg.tol {
        return QpSolution {
            lambda: zero,
            objective: 0.0,
            kkt_residual: r0,
            iterations: 0,
            converged: true,
        };
    }

    let mut x = match warm_start {
        Some(w) if w.len() == n => {
            let mut w = w.clone();
            project_in_place(&mut w, mu);
            w
        }
        _ => zero,
    };
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut best = x.clone();
    let mut best_res = kkt_residual(h, g, &x, mu, step);
    let mut iterations = 0;
    while iterations < cfg.max_iter && best_res > cfg.tol {
        iterations += 1;
        let grad = h * &y + g;
        let mut next = &y - grad * step;
        project_in_place(&mut next, mu);
        // gradient-based restart
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
        let res = kkt_residual(h, g, &x, mu, step);
        if res < best_res {
            best_res = res;
            best.copy_from(&x);
        }
        if iterations % POLISH_EVERY == 0 && best_res > cfg.tol {
            if let Some(polished) = polish(h, g, mu, &x) {
                let r = kkt_residual(h, g, &polished, mu, step);
                if r < best_res {
                    best_res = r;
                    best.copy_from(&polished);
                    x = polished;
                    y = x.clone();
                    t = 1.0;
                }
            }
        }
    }
    QpSolution {
        objective: objective(h, g, &best),
        lambda: best,
        kkt_residual: best_res,
        iterations,
        converged: best_res <= cfg.tol,
    }
}

const POLISH_EVERY: usize = 20;

/// Solves the equality-constrained problem on the contact pattern of
/// `lambda`: separated contacts stay at zero, sticking contacts are free and
/// sliding contacts keep their tangential direction on the cone boundary.
fn polish(h: &DMatrix<f64>, g: &DVector<f64>, mu: f64, lambda: &DVector<f64>) -> Option<DVector<f64>> {
    let n = lambda.len();
    let p = n / 3;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut coords: Vec<f64> = Vec::new();
    for i in 0..p {
        let ln = lambda[i];
        if ln <= 0.0 {
            continue;
        }
        let (tx, ty) = (lambda[p + 2 * i], lambda[p + 2 * i + 1]);
        let tn = tx.hypot(ty);
        if tn < mu * ln * (1.0 - 1e-9) {
            for (k, val) in [(i, ln), (p + 2 * i, tx), (p + 2 * i + 1, ty)] {
                let mut c = DVector::zeros(n);
                c[k] = 1.0;
                cols.push(c);
                coords.push(val);
            }
        } else {
            let mut c = DVector::zeros(n);
            c[i] = 1.0;
            if tn > 0.0 {
                c[p + 2 * i] = mu * tx / tn;
                c[p + 2 * i + 1] = mu * ty / tn;
            }
            cols.push(c);
            coords.push(ln);
        }
    }
    if cols.is_empty() {
        return None;
    }
    let b = DMatrix::from_columns(&cols);
    let z0 = DVector::from_vec(coords);
    let hr = b.transpose() * h * &b;
    let rhs = -(b.transpose() * g + &hr * &z0);
    // minimum-norm correction, the reduced Hessian may be singular
    let svd = hr.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    let dz = svd.solve(&rhs, tol).ok()?;
    let z = z0 + dz;
    let out = b * z;
    // the pattern must remain valid
    for i in 0..p {
        let tn = out[p + 2 * i].hypot(out[p + 2 * i + 1]);
        if out[i] < 0.0 || tn > mu * out[i] * (1.0 + 1e-12) + 1e-300 {
            return None;
        }
    }
    let mut out = out;
    project_in_place(&mut out, mu);
    Some(out)
}

/// First-order budget before [`solve_factored_cone_qp`] switches to the
/// barrier method.
const APG_BUDGET: usize = 200;

/// Minimizes `½λᵀ(AAᵀ + εI)λ + (Aw₀ + d)ᵀλ` over the friction cones.
///
/// Short accelerated run first. Degenerate instances fall back to a log-barrier
/// method on the dual problem `min ½‖z − w₀‖²  s.t.  Az + d ∈ K*`, which has a
/// unique solution even when `AAᵀ` is singular, and the barrier multipliers are
/// then refined by the accelerated solver.
pub fn solve_factored_cone_qp(
    a: &DMatrix<f64>,
    w0: &DVector<f64>,
    d: &DVector<f64>,
    eps: f64,
    mu: f64,
    cfg: &SolverConfig,
) -> QpSolution {
    let mut h = a * a.transpose();
    for i in 0..h.nrows() {
        h[(i, i)] += eps;
    }
    let g = a * w0 + d;
    let quick = SolverConfig {
        tol: cfg.tol,
        max_iter: cfg.max_iter.min(APG_BUDGET),
    };
    let first = solve_cone_qp(&h, &g, mu, &quick, None);
    if first.converged || cfg.max_iter <= APG_BUDGET {
        return first;
    }
    let Some((start, newton)) = barrier_multipliers(a, w0, d, mu) else {
        let rest = SolverConfig {
            tol: cfg.tol,
            max_iter: cfg.max_iter - APG_BUDGET,
        };
        let mut sol = solve_cone_qp(&h, &g, mu, &rest, Some(&first.lambda));
        sol.iterations += first.iterations;
        return sol;
    };
    let rest = SolverConfig {
        tol: cfg.tol,
        max_iter: cfg.max_iter - APG_BUDGET,
    };
    let mut sol = solve_cone_qp(&h, &g, mu, &rest, Some(&start));
    sol.iterations += first.iterations + newton;
    if !sol.converged && first.kkt_residual < sol.kkt_residual {
        return first;
    }
    sol
}

/// Barrier `−log(a² − μ²‖c‖²)` of the dual cone, its gradient and Hessian.
fn dual_barrier(s: [f64; 3], mu: f64) -> Option<(f64, [f64; 3], [[f64; 3]; 3])> {
    let m2 = mu * mu;
    let det = s[0] * s[0] - m2 * (s[1] * s[1] + s[2] * s[2]);
    if s[0] <= 0.0 || det <= 0.0 || !det.is_finite() {
        return None;
    }
    let gd = [2.0 * s[0], -2.0 * m2 * s[1], -2.0 * m2 * s[2]];
    let grad = [-gd[0] / det, -gd[1] / det, -gd[2] / det];
    let diag = [2.0, -2.0 * m2, -2.0 * m2];
    let mut hess = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            hess[r][c] = gd[r] * gd[c] / (det * det);
        }
        hess[r][r] -= diag[r] / det;
    }
    Some((-det.ln(), grad, hess))
}

/// Finds `λ ∈ K` with `Aᵀλ = z − w₀` that is complementary to `s = Az + d`:
/// zero where `s` is interior, on the ray opposite the sliding velocity where
/// `s` is on the boundary, and unconstrained where `s` vanishes.
fn recover_multipliers(
    a: &DMatrix<f64>,
    w0: &DVector<f64>,
    d: &DVector<f64>,
    mu: f64,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    let s = a * z + d;
    let m = s.len();
    let p = m / 3;
    let scale = 1.0 + s.amax();
    let tol = 1e-7 * scale;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for i in 0..p {
        let [sn, sx, sy] = contact_slack(&s, i, p);
        let c = sx.hypot(sy);
        if sn.abs() + c <= tol {
            for k in [i, p + 2 * i, p + 2 * i + 1] {
                cols.push(DVector::from_fn(m, |r, _| if r == k { 1.0 } else { 0.0 }));
            }
        } else if sn - mu * c <= tol {
            let mut col = DVector::zeros(m);
            col[i] = 1.0;
            if c > 0.0 {
                col[p + 2 * i] = -mu * sx / c;
                col[p + 2 * i + 1] = -mu * sy / c;
            }
            cols.push(col);
        }
    }
    let mut lambda = DVector::zeros(m);
    if !cols.is_empty() {
        let b = DMatrix::from_columns(&cols);
        let ab = a.transpose() * &b;
        let svd = ab.svd(true, true);
        let cut = svd.singular_values.max() * 1e-12;
        let beta = svd.solve(&(z - w0), cut).ok()?;
        lambda = b * beta;
    }
    project_in_place(&mut lambda, mu);
    Some(lambda)
}

fn contact_slack(s: &DVector<f64>, i: usize, p: usize) -> [f64; 3] {
    [s[i], s[p + 2 * i], s[p + 2 * i + 1]]
}

fn barrier_value(
    z: &DVector<f64>,
    a: &DMatrix<f64>,
    w0: &DVector<f64>,
    d: &DVector<f64>,
    mu: f64,
    tau: f64,
) -> Option<f64> {
    let s = a * z + d;
    let p = s.len() / 3;
    let mut f = 0.5 * (z - w0).norm_squared();
    for i in 0..p {
        f += tau * dual_barrier(contact_slack(&s, i, p), mu)?.0;
    }
    Some(f)
}

/// Follows the central path of the dual problem towards its optimum `z` and
/// returns multipliers consistent with it plus the number of Newton steps.
fn barrier_multipliers(
    a: &DMatrix<f64>,
    w0: &DVector<f64>,
    d: &DVector<f64>,
    mu: f64,
) -> Option<(DVector<f64>, usize)> {
    let m = a.nrows();
    let n = a.ncols();
    let p = m / 3;
    // direction lifting every contact straight off the plane
    let mut target = DVector::zeros(m);
    for i in 0..p {
        target[i] = 1.0;
    }
    let up = a.clone().svd(true, true).solve(&target, 1e-12).ok()?;
    let mut z = w0.clone();
    let mut lift = 1e-3;
    while barrier_value(&z, a, w0, d, mu, 1.0).is_none() {
        z = w0 + &up * lift;
        lift *= 2.0;
        if lift > 1e12 {
            return None;
        }
    }
    let mut tau = (0.5 * (&z - w0).norm_squared()).max(1e-8) / p as f64;
    let tau_end = 1e-15;
    let mut steps = 0;
    loop {
        for _ in 0..60 {
            let s = a * &z + d;
            let mut gs = DVector::zeros(m);
            let mut hess = DMatrix::identity(n, n);
            for i in 0..p {
                let (_, gi, hi) = dual_barrier(contact_slack(&s, i, p), mu)?;
                let rows = [i, p + 2 * i, p + 2 * i + 1];
                for (k, &r) in rows.iter().enumerate() {
                    gs[r] = gi[k];
                }
                let ai = DMatrix::from_fn(3, n, |r, c| a[(rows[r], c)]);
                let hm = DMatrix::from_fn(3, 3, |r, c| hi[r][c]);
                hess += ai.transpose() * hm * &ai * tau;
            }
            let grad = (&z - w0) + a.transpose() * &gs * tau;
            let dir = -hess.cholesky()?.solve(&grad);
            let decrement = -grad.dot(&dir);
            let f0 = barrier_value(&z, a, w0, d, mu, tau)?;
            // below this the Armijo test is decided by rounding
            if decrement <= 1e-13 * (1.0 + f0.abs()) {
                break;
            }
            steps += 1;
            let mut t = 1.0;
            loop {
                let trial = &z + &dir * t;
                if let Some(f) = barrier_value(&trial, a, w0, d, mu, tau) {
                    if f <= f0 - 0.25 * t * decrement {
                        z = trial;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    break;
                }
            }
            if t < 1e-12 {
                break;
            }
        }
        if tau <= tau_end {
            break;
        }
        tau = (tau * 0.1).max(tau_end);
    }
    Some((recover_multipliers(a, w0, d, mu, &z)?, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cone_membership, ContactImpulse};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, p: usize, rank: usize) -> (DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_fn(3 * p, rank, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose();
        let g = DVector::from_fn(3 * p, |_, _| rng.gen_range(-1.0..1.0));
        (h, g)
    }

    /// Plain projected gradient with a small fixed step.
    fn reference_pg(h: &DMatrix<f64>, g: &DVector<f64>, mu: f64, start: DVector<f64>) -> DVector<f64> {
        let step = 0.5 / largest_eigenvalue(h);
        let mut x = start;
        project_in_place(&mut x, mu);
        for _ in 0..200_000 {
            let mut next = &x - (h * &x + g) * step;
            project_in_place(&mut next, mu);
            if (&next - &x).norm() < 1e-15 {
                break;
            }
            x = next;
        }
        x
    }

    #[test]
    fn zero_is_detected_immediately() {
        let h = DMatrix::identity(3, 3);
        let g = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sol = solve_cone_qp(&h, &g, 0.5, &SolverConfig::default(), None);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.lambda.norm(), 0.0);
    }

    #[test]
    fn single_normal_contact_matches_grid() {
        // ½hλ² + gλ, λ ≥ 0, tangential directions free of cost but bounded by the cone
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 1.0]));
        let g = DVector::from_vec(vec![-0.7, 0.0, 0.0]);
        let sol = solve_cone_qp(&h, &g, 0.3, &SolverConfig::default(), None);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=200_000 {
            let l = k as f64 * 1e-5;
            let f = l * l - 0.7 * l;
            if f < best.0 {
                best = (f, l);
            }
        }
        assert!((sol.lambda[0] - best.1).abs() < 1e-4);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn multistart_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for p in [1usize, 2] {
            for _ in 0..10 {
                let (h, g) = random_problem(&mut rng, p, 3 * p);
                let mu = rng.gen_range(0.1..1.0);
                let sol = solve_cone_qp(&h, &g, mu, &SolverConfig::default(), None);
                assert!(sol.converged, "residual {}", sol.kkt_residual);
                assert!(cone_membership(&ContactImpulse(sol.lambda.clone()), mu, 1e-9));
                for _ in 0..10 {
                    let start = DVector::from_fn(3 * p, |_, _| rng.gen_range(-2.0..2.0));
                    let r = reference_pg(&h, &g, mu, start);
                    assert!((objective(&h, &g, &r) - sol.objective).abs() < 1e-6);
                    assert!((r - &sol.lambda).norm() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rank_deficient_problems_converge() {
        // H = A·Aᵀ of rank 6 with g = A·y + s, s_n ≥ 0, s_t = 0: bounded below on the cone
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut max_iter = 0;
        for _ in 0..50 {
            let p = 8;
            let a = DMatrix::from_fn(3 * p, 6, |_, _| rng.gen_range(-1.0..1.0));
            let h = &a * a.transpose();
            let y = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let mut g = &a * y;
            for i in 0..p {
                g[i] += rng.gen_range(0.0..0.5);
            }
            let mu = rng.gen_range(0.1..1.0);
            let sol = solve_cone_qp(&h, &g, mu, &SolverConfig::default(), None);
            assert!(cone_membership(&ContactImpulse(sol.lambda.clone()), mu, 1e-9));
            max_iter = max_iter.max(sol.iterations);
            assert!(sol.converged, "residual {} after {}", sol.kkt_residual, sol.iterations);
        }
        assert!(max_iter <= 5000);
    }

    #[test]
    fn factored_solver_matches_dense_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let p = 8;
            let a = DMatrix::from_fn(3 * p, 6, |_, _| rng.gen_range(-1.0..1.0));
            let w0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let mut d = DVector::zeros(3 * p);
            for i in 0..p {
                d[i] = rng.gen_range(0.0..0.5);
            }
            let mu = rng.gen_range(0.1..1.0);
            let cfg = SolverConfig {
                tol: 1e-10,
                max_iter: 5000,
            };
            let sol = solve_factored_cone_qp(&a, &w0, &d, 1e-10, mu, &cfg);
            assert!(sol.converged, "residual {}", sol.kkt_residual);
            let mut h = &a * a.transpose();
            for i in 0..3 * p {
                h[(i, i)] += 1e-10;
            }
            let g = &a * &w0 + &d;
            let dense = solve_cone_qp(&h, &g, mu, &SolverConfig::default(), None);
            assert!((dense.objective - sol.objective).abs() < 1e-7);
        }
    }

    #[test]
    fn barrier_multipliers_are_near_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = 4;
        let a = DMatrix::from_fn(3 * p, 6, |_, _| rng.gen_range(-1.0..1.0));
        let w0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let d = DVector::from_fn(3 * p, |i, _| if i < p { 0.2 } else { 0.0 });
        let (lambda, _) = barrier_multipliers(&a, &w0, &d, 0.5).unwrap();
        assert!(cone_membership(&ContactImpulse(lambda.clone()), 0.5, 1e-12));
        let h = &a * a.transpose();
        let g = &a * &w0 + &d;
        let step = 1.0 / largest_eigenvalue(&h);
        let r = kkt_residual(&h, &g, &lambda, 0.5, step);
        assert!(r < 1e-6, "{r} {lambda}");
    }
}
