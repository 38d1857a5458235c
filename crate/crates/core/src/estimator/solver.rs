//! Projected Levenberg–Marquardt for box/simplex-constrained nonlinear
//! least squares, with a finite-difference Jacobian.
//!
//! Coordinates whose descent direction is blocked by the feasible set are
//! frozen for the step (an active-set rule), groups whose capped sum stays
//! saturated keep that sum fixed, the damped Gauss–Newton step is taken in
//! the remaining coordinates, and the trial point is projected.

use nalgebra::{DMatrix, DVector};

/// Residual map; `None` marks points where the model cannot be evaluated.
pub type ResidualFn<'a> = dyn Fn(&[f64]) -> Option<DVector<f64>> + Sync + 'a;
/// In-place projection onto the feasible set.
pub type ProjectFn<'a> = dyn Fn(&mut [f64]) + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop once the projected gradient of `½‖r‖²` has sup-norm below this.
    pub gradient_tol: f64,
    /// Disjoint coordinate groups whose sum the projection caps, with the
    /// cap. The projection must map each group to its Euclidean nearest
    /// point for the active-set rule to be exact.
    pub sum_groups: Vec<(Vec<usize>, f64)>,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tol: 1e-9,
            sum_groups: Vec::new(),
        }
    }
}

const GROUP_TOL: f64 = 1e-10;
/// Relative cost reduction and relative step size treated as convergence.
const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    /// `‖r(x)‖₂`; infinite when the model could not be evaluated at all.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

fn cost(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

fn step_size(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central differences, one-sided where one neighbour cannot be evaluated.
fn jacobian(f: &ResidualFn, x: &[f64], r: &DVector<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(r.len(), x.len());
    let mut y = x.to_vec();
    for k in 0..x.len() {
        let h = step_size(x[k]);
        y[k] = x[k] + h;
        let up = f(&y);
        y[k] = x[k] - h;
        let down = f(&y);
        y[k] = x[k];
        let col = match (up, down) {
            (Some(u), Some(d)) => (u - d) / (2.0 * h),
            (Some(u), None) => (u - r) / h,
            (None, Some(d)) => (r - d) / h,
            (None, None) => continue,
        };
        jac.set_column(k, &col);
    }
    jac
}

/// `x - P(x - g)`.
fn projected_gradient(project: &ProjectFn, x: &[f64], g: &DVector<f64>) -> Vec<f64> {
    let mut y: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
    project(&mut y);
    x.iter().zip(&y).map(|(a, b)| a - b).collect()
}

/// Groups whose sum is at its cap at `x`, as positions into `free`. Groups
/// with no free member are dropped.
fn saturated_groups(x: &[f64], free: &[usize], groups: &[(Vec<usize>, f64)]) -> Vec<Vec<usize>> {
    groups
        .iter()
        .filter(|(idx, cap)| idx.iter().map(|&k| x[k]).sum::<f64>() >= cap - GROUP_TOL)
        .map(|(idx, _)| {
            free.iter()
                .enumerate()
                .filter(|(_, k)| idx.contains(k))
                .map(|(pos, _)| pos)
                .collect::<Vec<_>>()
        })
        .filter(|pos| !pos.is_empty())
        .collect()
}

/// Directions in which each free coordinate is stopped by the projection.
struct Blocked {
    up: Vec<bool>,
    down: Vec<bool>,
}

fn blocked(project: &ProjectFn, x: &[f64], free: &[usize]) -> Blocked {
    let mut y = x.to_vec();
    let mut probe = |k: usize, sign: f64| {
        let eps = step_size(x[k]) * 10.0;
        y.copy_from_slice(x);
        y[k] += sign * eps;
        project(&mut y);
        y[k] == x[k]
    };
    Blocked {
        up: free.iter().map(|&k| probe(k, 1.0)).collect(),
        down: free.iter().map(|&k| probe(k, -1.0)).collect(),
    }
}

/// Damped step over the free coordinates. Coordinates the step would push
/// through a bound are frozen, and saturated groups whose sum it would
/// raise are held at their sum; the system is re-solved until neither
/// happens.
fn damped_step(
    damped: &DMatrix<f64>,
    b: &DVector<f64>,
    saturated: &[Vec<usize>],
    blocked: &Blocked,
) -> Option<DVector<f64>> {
    let f = b.len();
    let mut frozen = vec![false; f];
    let mut held: Vec<usize> = Vec::new();
    loop {
        let active: Vec<usize> = (0..f).filter(|&k| !frozen[k]).collect();
        let mut position = vec![usize::MAX; f];
        for (p, &k) in active.iter().enumerate() {
            position[k] = p;
        }
        let groups: Vec<Vec<usize>> = held
            .iter()
            .map(|&gi| saturated[gi].iter().filter(|&&k| !frozen[k]).map(|&k| position[k]).collect::<Vec<_>>())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        let sub = damped.select_rows(active.iter()).select_columns(active.iter());
        let sub_b = b.select_rows(active.iter());
        let step = constrained_step(sub, &sub_b, &groups)?;
        let mut delta = DVector::zeros(f);
        for (p, &k) in active.iter().enumerate() {
            delta[k] = step[p];
        }
        let mut changed = false;
        for &k in &active {
            if (delta[k] > 0.0 && blocked.up[k]) || (delta[k] < 0.0 && blocked.down[k]) {
                frozen[k] = true;
                changed = true;
            }
        }
        for (gi, group) in saturated.iter().enumerate() {
            if !held.contains(&gi) && group.iter().map(|&k| delta[k]).sum::<f64>() > 0.0 {
                held.push(gi);
                changed = true;
            }
        }
        if !changed {
            return Some(delta);
        }
    }
}

/// Solves `(A + D) δ = b` subject to `sum δ[group] = 0` for each group.
fn constrained_step(damped: DMatrix<f64>, b: &DVector<f64>, held: &[Vec<usize>]) -> Option<DVector<f64>> {
    if held.is_empty() {
        return damped.cholesky().map(|c| c.solve(b));
    }
    let f = b.len();
    let dim = f + held.len();
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (f, f)).copy_from(&damped);
    for (c, pos) in held.iter().enumerate() {
        for &k in pos {
            kkt[(f + c, k)] = 1.0;
            kkt[(k, f + c)] = 1.0;
        }
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, f).copy_from(b);
    let sol = kkt.lu().solve(&rhs)?;
    let delta = sol.rows(0, f).into_owned();
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

/// Coordinates that can still move against their gradient component.
fn free_coordinates(project: &ProjectFn, x: &[f64], g: &DVector<f64>) -> Vec<usize> {
    let mut y = x.to_vec();
    (0..x.len())
        .filter(|&k| {
            if g[k] == 0.0 {
                return true;
            }
            let eps = step_size(x[k]) * 10.0;
            y.copy_from_slice(x);
            y[k] -= eps * g[k].signum();
            project(&mut y);
            y[k] != x[k]
        })
        .collect()
}

pub fn minimize(f: &ResidualFn, project: &ProjectFn, x0: &[f64], opts: &LmOptions) -> LmOutcome {
    let mut x = x0.to_vec();
    project(&mut x);
    let Some(mut r) = f(&x) else {
        return LmOutcome {
            x,
            residual_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
            projected_gradient: f64::INFINITY,
        };
    };
    let dim = x.len();
    let mut c = cost(&r);
    let mut mu = 1e-3;
    let mut pg_norm = f64::INFINITY;
    let mut stalled = false;
    let mut small_step = false;
    let mut iterations = 0;
    // Secant estimate of the second-order term sum r_i ∇²r_i, which plain
    // Gauss–Newton drops and which governs convergence when the minimum
    // keeps a nonzero residual.
    let mut second = DMatrix::zeros(dim, dim);
    let mut previous: Option<(DVector<f64>, DMatrix<f64>, DVector<f64>)> = None;
    while iterations < opts.max_iterations {
        let jac = jacobian(f, &x, &r);
        let g = jac.tr_mul(&r);
        let xv = DVector::from_column_slice(&x);
        if let Some((x_old, jac_old, g_old)) = previous.take() {
            let y_sharp = (&jac - jac_old).tr_mul(&r);
            secant_update(&mut second, &(&xv - x_old), &(&g - g_old), &y_sharp);
        }
        pg_norm = projected_gradient(project, &x, &g)
            .iter()
            .fold(0.0, |a: f64, v| a.max(v.abs()));
        if pg_norm <= opts.gradient_tol {
            break;
        }
        iterations += 1;
        let free = free_coordinates(project, &x, &g);
        let saturated = saturated_groups(&x, &free, &opts.sum_groups);
        let stops = blocked(project, &x, &free);
        let jf = jac.select_columns(free.iter());
        let gauss_newton = jf.tr_mul(&jf);
        let augmented = &gauss_newton + second.select_rows(free.iter()).select_columns(free.iter());
        let b = -jf.tr_mul(&r);
        let scale = gauss_newton.diagonal().max().max(1e-300);
        // The undamped model step: when even it promises no relative gain
        // or barely moves, the iterate is stationary at working precision.
        let mut undamped = gauss_newton.clone();
        for k in 0..free.len() {
            undamped[(k, k)] += 1e-12 * scale;
        }
        if let Some(step) = damped_step(&undamped, &b, &saturated, &stops) {
            let gain = b.dot(&step) - 0.5 * step.dot(&(&gauss_newton * &step));
            let xmax = x.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
            if gain <= REL_TOL * c || step.amax() <= REL_TOL * (xmax + REL_TOL) {
                small_step = true;
                break;
            }
        }
        let mut accepted = false;
        'damping: while mu < 1e16 {
            for model in [&augmented, &gauss_newton] {
                let mut damped = model.clone();
                for k in 0..free.len() {
                    damped[(k, k)] += mu * (gauss_newton[(k, k)] + 1e-12 * scale);
                }
                let Some(delta) = damped_step(&damped, &b, &saturated, &stops) else {
                    continue;
                };
                let mut trial = x.clone();
                for (k, &idx) in free.iter().enumerate() {
                    trial[idx] += delta[k];
                }
                project(&mut trial);
                if let Some(rt) = f(&trial) {
                    let ct = cost(&rt);
                    if ct < c {
                        x = trial;
                        r = rt;
                        c = ct;
                        mu = (mu / 3.0).max(1e-12);
                        accepted = true;
                        break 'damping;
                    }
                }
            }
            mu *= 4.0;
        }
        if !accepted {
            if !gradient_step(f, project, &mut x, &mut r, &mut c, &g) {
                stalled = true;
                break;
            }
            mu = 1e-3;
        }
        previous = Some((xv, jac, g));
    }
    // A relative reduction or step below REL_TOL means the model has nothing
    // left to offer at working precision. A stall means no feasible
    // direction lowers the cost; it counts as stationary only when the
    // gradient is small relative to the residual.
    let converged = pg_norm <= opts.gradient_tol
        || small_step
        || (stalled && pg_norm <= 1e-6 * (1.0 + r.norm()));
    LmOutcome {
        x,
        residual_norm: r.norm(),
        iterations,
        converged,
        projected_gradient: pg_norm,
    }
}

/// Dennis–Gay–Welsch update of the second-order term from a step `s`, the
/// gradient change `y` and `y_sharp = (J_new - J_old)ᵀ r_new`, with the
/// usual sizing factor.
fn secant_update(m: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, y_sharp: &DVector<f64>) {
    let ys = y.dot(s);
    if !(ys > f64::EPSILON * s.norm() * y.norm()) {
        return;
    }
    let ms = &*m * s;
    let sms = s.dot(&ms);
    if sms != 0.0 {
        let tau = (s.dot(y_sharp) / sms).abs().min(1.0);
        *m *= tau;
    }
    let v = y_sharp - &*m * s;
    let vs = v.dot(s);
    *m += (&v * y.transpose() + y * v.transpose()) / ys - (y * y.transpose()) * (vs / (ys * ys));
}

/// Projected steepest descent with backtracking; `false` if no decrease.
fn gradient_step(
    f: &ResidualFn,
    project: &ProjectFn,
    x: &mut Vec<f64>,
    r: &mut DVector<f64>,
    c: &mut f64,
    g: &DVector<f64>,
) -> bool {
    let gmax = g.amax();
    if gmax == 0.0 {
        return false;
    }
    let mut t = 1.0 / gmax;
    for _ in 0..60 {
        let mut trial: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a - t * b).collect();
        project(&mut trial);
        if let Some(rt) = f(&trial) {
            let ct = cost(&rt);
            if ct < *c {
                *x = trial;
                *r = rt;
                *c = ct;
                return true;
            }
        }
        t *= 0.5;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonneg(x: &mut [f64]) {
        for v in x {
            *v = v.max(0.0);
        }
    }

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64]| Some(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]));
        let out = minimize(&f, &|_: &mut [f64]| {}, &[-1.2, 1.0], &LmOptions::default());
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn solution_on_the_boundary() {
        // Unconstrained minimiser (-1, 2); with x >= 0 it is (0, 2).
        let f = |x: &[f64]| Some(DVector::from_vec(vec![x[0] + 1.0, x[1] - 2.0, 0.1 * x[0] * x[1]]));
        let out = minimize(&f, &nonneg, &[3.0, 3.0], &LmOptions::default());
        assert!(out.converged, "{out:?}");
        assert!(out.x[0].abs() < 1e-12 && (out.x[1] - 2.0).abs() < 1e-8, "{:?}", out.x);
    }

    #[test]
    fn minimum_on_a_capped_sum_face() {
        // Nearest point to (0.8, 0.6) with x >= 0 and x1 + x2 <= 1.
        let project = |x: &mut [f64]| {
            for v in x.iter_mut() {
                *v = v.max(0.0);
            }
            let sum = x[0] + x[1];
            if sum > 1.0 {
                let tau = (sum - 1.0) / 2.0;
                x[0] -= tau;
                x[1] -= tau;
            }
        };
        let f = |x: &[f64]| Some(DVector::from_vec(vec![x[0] - 0.8, x[1] - 0.6, 0.05 * (x[0] - x[1])]));
        let opts = LmOptions {
            sum_groups: vec![(vec![0, 1], 1.0)],
            ..Default::default()
        };
        let out = minimize(&f, &project, &[0.1, 0.1], &opts);
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] + out.x[1] - 1.0).abs() < 1e-10, "{:?}", out.x);
        assert!((out.x[0] - out.x[1] - 0.2 / 1.005).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn large_residual_minimum() {
        // Gauss–Newton alone converges only linearly here; the minimum keeps
        // a residual of order one.
        let f = |x: &[f64]| Some(DVector::from_vec(vec![x[0] + 1.0, 0.4 * x[0] * x[0] + x[0] - 1.0]));
        let out = minimize(&f, &|_: &mut [f64]| {}, &[1.0], &LmOptions::default());
        assert!(out.converged, "{out:?}");
        let x = out.x[0];
        // Stationarity: (x + 1) + (0.4x² + x - 1)(0.8x + 1) = 0.
        let grad = (x + 1.0) + (0.4 * x * x + x - 1.0) * (0.8 * x + 1.0);
        assert!(grad.abs() < 1e-7, "x = {x}, gradient {grad}");
        assert!(out.iterations < 100);
    }

    #[test]
    fn unevaluable_start() {
        let f = |_: &[f64]| None;
        let out = minimize(&f, &nonneg, &[1.0], &LmOptions::default());
        assert!(!out.converged && out.residual_norm.is_infinite());
    }

    #[test]
    fn iteration_cap() {
        let f = |x: &[f64]| Some(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]));
        let opts = LmOptions {
            max_iterations: 2,
            ..Default::default()
        };
        let out = minimize(&f, &|_: &mut [f64]| {}, &[-1.2, 1.0], &opts);
        assert_eq!(out.iterations, 2);
        assert!(!out.converged);
    }
}
