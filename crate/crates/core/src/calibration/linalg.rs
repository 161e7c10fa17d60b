//! Least-squares solvers used by the linear learners and the stacking step.

use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solution of `a·x ≈ b`. The flag is set when
/// `a` is numerically rank deficient.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64 * 16.0;
    let singular = a.nrows() < a.ncols() || svd.singular_values.iter().any(|&s| s <= tol);
    let x = svd.solve(b, tol).expect("both factors were computed");
    (x, singular)
}

fn residual_sq(z: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (y - z * w).norm_squared()
}

/// Least squares restricted to the columns in `set`, other weights zero.
fn solve_on(z: &DMatrix<f64>, y: &DVector<f64>, set: &[usize]) -> DVector<f64> {
    let sub = z.select_columns(set);
    let (x, _) = lstsq_min_norm(&sub, y);
    let mut w = DVector::zeros(z.ncols());
    for (k, &j) in set.iter().enumerate() {
        w[j] = x[k];
    }
    w
}

/// Non-negative least squares `min ‖y − Zw‖²` subject to `w ≥ 0`
/// (Lawson–Hanson active set).
pub fn nnls(z: &DMatrix<f64>, y: &DVector<f64>, tol: f64) -> DVector<f64> {
    let p = z.ncols();
    let mut w = DVector::zeros(p);
    let mut passive: Vec<usize> = Vec::new();
    let scale = z.amax().max(1.0) * y.amax().max(1.0);
    let max_outer = 3 * p + 10;

    for _ in 0..max_outer {
        let grad = z.transpose() * (y - z * &w);
        let candidate = (0..p)
            .filter(|j| !passive.contains(j))
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]).then(b.cmp(&a)));
        let Some(j) = candidate else { break };
        if grad[j] <= tol * scale {
            break;
        }
        passive.push(j);
        passive.sort_unstable();

        loop {
            let s = solve_on(z, y, &passive);
            if passive.iter().all(|&i| s[i] > 0.0) {
                w = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &passive {
                if s[i] <= 0.0 {
                    alpha = alpha.min(w[i] / (w[i] - s[i]));
                }
            }
            w += (s - &w) * alpha;
            passive.retain(|&i| w[i] > tol);
            for i in 0..p {
                if !passive.contains(&i) {
                    w[i] = 0.0;
                }
            }
            if passive.is_empty() {
                break;
            }
        }
    }
    w
}

/// Equality-constrained least squares on `set`: minimize ‖y − Z_S w‖² with
/// `Σ w = 1`, via the bordered normal equations.
fn solve_on_simplex(z: &DMatrix<f64>, y: &DVector<f64>, set: &[usize]) -> DVector<f64> {
    let m = set.len();
    let sub = z.select_columns(set);
    let q = sub.transpose() * &sub;
    let c = sub.transpose() * y;
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    kkt.view_mut((0, 0), (m, m)).copy_from(&q);
    let mut rhs = DVector::zeros(m + 1);
    for k in 0..m {
        kkt[(k, m)] = 1.0;
        kkt[(m, k)] = 1.0;
        rhs[k] = c[k];
    }
    rhs[m] = 1.0;
    let (x, _) = lstsq_min_norm(&kkt, &rhs);
    let mut w = DVector::zeros(z.ncols());
    for (k, &j) in set.iter().enumerate() {
        w[j] = x[k];
    }
    w
}

/// Least squares over the probability simplex: `min ‖y − Zw‖²` subject to
/// `w ≥ 0`, `Σ w = 1`. Active-set iteration started from the best single
/// column, so the result is never worse than any vertex.
pub fn simplex_lstsq(z: &DMatrix<f64>, y: &DVector<f64>, tol: f64) -> DVector<f64> {
    let p = z.ncols();
    assert!(p > 0, "need at least one column");
    let vertex = |j: usize| {
        let mut w = DVector::zeros(p);
        w[j] = 1.0;
        w
    };
    let best_vertex = (0..p)
        .min_by(|&a, &b| residual_sq(z, y, &vertex(a)).total_cmp(&residual_sq(z, y, &vertex(b))))
        .unwrap();
    let mut w = vertex(best_vertex);
    let mut passive = vec![best_vertex];
    let q = z.transpose() * z;
    let c = z.transpose() * y;
    let scale = q.amax().max(c.amax()).max(1.0);

    for _ in 0..(3 * p + 10) {
        // At a stationary point every passive gradient entry equals −μ.
        let g = &q * &w - &c;
        let level = passive.iter().map(|&j| g[j]).sum::<f64>() / passive.len() as f64;
        let entering = (0..p)
            .filter(|j| !passive.contains(j))
            .min_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
        let Some(j) = entering else { break };
        if g[j] >= level - tol * scale {
            break;
        }
        passive.push(j);
        passive.sort_unstable();

        loop {
            let s = solve_on_simplex(z, y, &passive);
            if passive.iter().all(|&i| s[i] > 0.0) {
                w = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &passive {
                if s[i] <= 0.0 {
                    alpha = alpha.min(w[i] / (w[i] - s[i]));
                }
            }
            w += (s - &w) * alpha;
            passive.retain(|&i| w[i] > tol);
            for i in 0..p {
                if !passive.contains(&i) {
                    w[i] = 0.0;
                }
            }
            let total: f64 = w.sum();
            w /= total;
            if passive.len() <= 1 {
                break;
            }
        }
    }

    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total = w.sum();
    w /= total;
    // Round-off guard: the vertex we started from is always feasible.
    if residual_sq(z, y, &w) > residual_sq(z, y, &vertex(best_vertex)) {
        w = vertex(best_vertex);
    }
    w
}
