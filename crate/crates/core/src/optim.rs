//! Small dense optimisation helpers: a bounded BFGS maximiser with a
//! monotone backtracking line search, and finite-difference Hessians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Objective returning `(value, gradient)`; `None` marks an evaluation
/// failure, which the line search treats as a rejected step.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when the max-norm of the (projected) gradient drops below this.
    pub grad_tol: f64,
    /// Converged when a full step moves every coordinate less than this.
    pub step_tol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Largest allowed move of any coordinate in one iteration.
    pub max_step: f64,
    /// Initial inverse of the negative Hessian.
    pub init_inverse_hessian: Option<DMatrix<f64>>,
}

impl BfgsOptions {
    pub fn unbounded(dim: usize) -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            step_tol: 1e-8,
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            max_step: 5.0,
            init_inverse_hessian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], opts: &BfgsOptions) -> Vec<bool> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| (xi <= opts.lower[i] && gi < 0.0) || (xi >= opts.upper[i] && gi > 0.0))
        .collect()
}

fn projected_grad_norm(g: &[f64], active: &[bool]) -> f64 {
    g.iter().zip(active).filter(|(_, &a)| !a).map(|(v, _)| v.abs()).fold(0.0, f64::max)
}

/// Maximises `f` from `x0`. The returned `trace` is non-decreasing.
pub fn maximize_bfgs<O: Objective>(f: &mut O, x0: &[f64], opts: &BfgsOptions) -> Option<OptimResult> {
    let dim = x0.len();
    let mut x: Vec<f64> = x0.iter().enumerate().map(|(i, &v)| clamp(v, opts.lower[i], opts.upper[i])).collect();
    let (mut fx, mut g) = f.eval(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let mut trace = vec![fx];
    if dim == 0 {
        return Some(OptimResult { x, value: fx, grad: g, iterations: 0, converged: true, trace });
    }
    let initial_h = opts.init_inverse_hessian.clone();
    let mut h = initial_h.clone().unwrap_or_else(|| DMatrix::identity(dim, dim));
    let mut scaled = initial_h.is_some();
    let mut converged = false;
    let mut iterations = 0;
    let mut resets = 0;

    while iterations < opts.max_iter {
        let active = active_set(&x, &g, opts);
        if projected_grad_norm(&g, &active) < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_iterator(dim, g.iter().zip(&active).map(|(&v, &a)| if a { 0.0 } else { v }));
        let mut d = &h * &gv;
        for i in 0..dim {
            if active[i] {
                d[i] = 0.0;
            }
        }
        let mut slope = d.dot(&gv);
        if !(slope > 0.0) {
            h = DMatrix::identity(dim, dim);
            d = gv.clone();
            slope = d.dot(&gv);
            scaled = false;
        }
        let biggest = d.amax();
        let mut t = if biggest > opts.max_step { opts.max_step / biggest } else { 1.0 };
        if !scaled && initial_h.is_none() {
            // first step without curvature information: keep it modest
            let gn = gv.amax();
            if gn > 0.0 {
                t = t.min(1.0 / gn);
            }
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> =
                (0..dim).map(|i| clamp(x[i] + t * d[i], opts.lower[i], opts.upper[i])).collect();
            if let Some((ft, gt)) = f.eval(&trial) {
                if ft.is_finite() && ft >= fx + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt, t));
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-14 {
                break;
            }
        }
        let Some((xn, fn_, gn, t_used)) = accepted else {
            if resets < 2 && scaled {
                h = DMatrix::identity(dim, dim);
                scaled = false;
                resets += 1;
                continue;
            }
            // no ascent possible at working precision
            converged = projected_grad_norm(&g, &active) < opts.grad_tol.max(1e-4);
            break;
        };
        let s = DVector::from_iterator(dim, (0..dim).map(|i| xn[i] - x[i]));
        let y = DVector::from_iterator(dim, (0..dim).map(|i| g[i] - gn[i]));
        let step_max = s.amax();
        x = xn;
        let improvement = fn_ - fx;
        fx = fn_;
        g = gn;
        trace.push(fx);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                let gamma = sy / y.dot(&y);
                h = DMatrix::identity(dim, dim) * gamma;
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h = &h - (&s * hy.transpose() + &hy * s.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        if t_used == 1.0 && step_max < opts.step_tol {
            converged = true;
            break;
        }
        if improvement == 0.0 && step_max < opts.step_tol {
            converged = true;
            break;
        }
    }
    let active = active_set(&x, &g, opts);
    if !converged && projected_grad_norm(&g, &active) < opts.grad_tol {
        converged = true;
    }
    Some(OptimResult { x, value: fx, grad: g, iterations, converged, trace })
}

/// Central-difference Hessian of a gradient function, symmetrised.
pub fn fd_hessian<G>(mut grad: G, x: &[f64], step: f64) -> Option<DMatrix<f64>>
where
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let dim = x.len();
    let mut hess = DMatrix::zeros(dim, dim);
    let mut xp = x.to_vec();
    for j in 0..dim {
        let hj = step * x[j].abs().max(1.0);
        xp[j] = x[j] + hj;
        let gp = grad(&xp)?;
        xp[j] = x[j] - hj;
        let gm = grad(&xp)?;
        xp[j] = x[j];
        for i in 0..dim {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * hj);
        }
    }
    Some((&hess + hess.transpose()) * 0.5)
}

/// Inverse of `-hess`, with eigenvalues of `-hess` floored so the result is
/// positive definite.
pub fn inverse_negative_definite(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let neg = -hess;
    let eig = SymmetricEigen::new(neg);
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max).max(1e-8);
    let floor = top * 1e-10;
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let hj = step * x[j].abs().max(1.0);
            xp[j] = x[j] + hj;
            let fp = f(&xp);
            xp[j] = x[j] - hj;
            let fm = f(&xp);
            xp[j] = x[j];
            (fp - fm) / (2.0 * hj)
        })
        .collect()
}
