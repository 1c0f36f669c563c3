//! Logistic nested random-intercept model fitted by maximising the Laplace
//! approximation to the marginal likelihood.
//!
//! Effects are standardised (`α_z = τ a_z`, `γ_zs = κ g_zs`) so the inner
//! problem for each hospital is a strictly concave function of
//! `(a_z, g_z1, …)` whose negative Hessian has arrow shape: a dense first
//! row and column plus a diagonal. The outer gradient is exact, including
//! the dependence of the modes and of the Hessian on the parameters.

use super::{
    fit_logistic_regression, log1pexp, logistic, Estimation, FreeVariances, Link, OutcomeFitMeta,
    OutcomeFitOptions, OutcomeParams, RandomStructure, BOUNDARY_LOG_VARIANCE, LOG_VARIANCE_CEIL,
    LOG_VARIANCE_FLOOR,
};
use crate::data::{DataSet, Hierarchy, OutcomeKind};
use crate::error::{Error, Result};
use crate::optim::{fd_hessian, inverse_negative_definite, maximize_bfgs, BfgsOptions};

const MAX_INNER_ITER: usize = 100;
const SEPARATION_BOUND: f64 = 30.0;

/// Laplace log-likelihood of the logistic nested model over
/// `(α₀, β, log τ², log κ²)`, with fixed (non-identifiable) variances left
/// out of the parameter vector.
#[derive(Debug, Clone)]
pub struct LaplaceObjective {
    hierarchy: Hierarchy,
    /// Columns per record including the leading intercept.
    k: usize,
    /// Row-major design, records grouped by cell.
    x: Vec<f64>,
    y: Vec<f64>,
    cell_start: Vec<usize>,
    free: FreeVariances,
    inner_tol: f64,
}

/// Inner-problem modes in standardised units, reused as warm starts.
#[derive(Debug, Clone)]
pub struct Modes {
    pub a: Vec<f64>,
    pub g: Vec<f64>,
}

impl Modes {
    pub fn zeros(h: &Hierarchy) -> Self {
        Self { a: vec![0.0; h.hospitals()], g: vec![0.0; h.cells()] }
    }
}

/// Solves the arrow system `[h_aa h_asᵀ; h_as diag(h_ss)] δ = (r_a, r_s)`.
fn arrow_solve(h_aa: f64, h_ss: &[f64], h_as: &[f64], r_a: f64, r_s: &[f64], out_s: &mut [f64]) -> f64 {
    let mut schur = h_aa;
    let mut rhs = r_a;
    for ((&hs, &ha), &rs) in h_ss.iter().zip(h_as).zip(r_s) {
        schur -= ha * ha / hs;
        rhs -= ha * rs / hs;
    }
    let da = rhs / schur;
    for (i, o) in out_s.iter_mut().enumerate() {
        *o = (r_s[i] - h_as[i] * da) / h_ss[i];
    }
    da
}

/// Per-cell sums at the current linear predictor.
#[derive(Default, Clone)]
struct CellSums {
    loglik: f64,
    r: f64,
    w: f64,
}

impl LaplaceObjective {
    pub fn new(d: &DataSet, structure: RandomStructure, inner_tol: f64) -> Result<Self> {
        let h = d.hierarchy().clone();
        let p = d.covariate_dim();
        let k = p + 1;
        let members = d.cell_members();
        let mut x = Vec::with_capacity(d.len() * k);
        let mut y = Vec::with_capacity(d.len());
        let mut cell_start = Vec::with_capacity(h.cells() + 1);
        cell_start.push(0);
        for cell in &members {
            for &i in cell {
                let r = &d.records()[i];
                x.push(1.0);
                x.extend_from_slice(&r.x);
                y.push(r.y);
            }
            cell_start.push(y.len());
        }
        let mut warnings = Vec::new();
        let free = FreeVariances::resolve(structure, &h, &mut warnings);
        Ok(Self { hierarchy: h, k, x, y, cell_start, free, inner_tol })
    }

    pub fn dim(&self) -> usize {
        self.k + usize::from(self.free.tau) + usize::from(self.free.kappa)
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    /// `(τ, κ)` standard deviations from the parameter vector.
    pub fn scales(&self, params: &[f64]) -> (f64, f64) {
        let mut it = params[self.k..].iter();
        let tau = if self.free.tau { (0.5 * it.next().unwrap()).exp() } else { 0.0 };
        let kappa = if self.free.kappa { (0.5 * it.next().unwrap()).exp() } else { 0.0 };
        (tau, kappa)
    }

    fn linear_base(&self, beta: &[f64]) -> Vec<f64> {
        self.x.chunks_exact(self.k).map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
    }

    fn cell_sums(&self, c: usize, base: &[f64], shift: f64) -> CellSums {
        let mut s = CellSums::default();
        for i in self.cell_start[c]..self.cell_start[c + 1] {
            let eta = base[i] + shift;
            let pi = logistic(eta);
            s.loglik += self.y[i] * eta - log1pexp(eta);
            s.r += self.y[i] - pi;
            s.w += pi * (1.0 - pi);
        }
        s
    }

    /// Newton iterations on hospital `z`'s inner problem; returns the
    /// penalised log-likelihood at the mode.
    fn inner_mode(&self, z: usize, base: &[f64], tau: f64, kappa: f64, modes: &mut Modes) -> Option<f64> {
        let cells = self.hierarchy.hospital_cells(z);
        let nc = cells.len();
        let mut sums: Vec<CellSums> = vec![CellSums::default(); nc];
        let mut h_ss = vec![0.0; nc];
        let mut h_as = vec![0.0; nc];
        let mut r_s = vec![0.0; nc];
        let mut delta = vec![0.0; nc];
        let eval = |a: f64, g: &[f64], sums: &mut [CellSums]| -> f64 {
            let mut f = -0.5 * a * a;
            for (j, c) in cells.clone().enumerate() {
                sums[j] = self.cell_sums(c, base, tau * a + kappa * g[j]);
                f += sums[j].loglik - 0.5 * g[j] * g[j];
            }
            f
        };
        let g0 = cells.start;
        let mut a = modes.a[z];
        let mut g: Vec<f64> = modes.g[cells.clone()].to_vec();
        let mut f = eval(a, &g, &mut sums);
        let mut converged = false;
        for _ in 0..MAX_INNER_ITER {
            let mut r_a = tau * sums.iter().map(|s| s.r).sum::<f64>() - a;
            let mut gmax = r_a.abs();
            let mut h_aa = 1.0;
            for j in 0..nc {
                r_s[j] = kappa * sums[j].r - g[j];
                gmax = gmax.max(r_s[j].abs());
                h_aa += tau * tau * sums[j].w;
                h_ss[j] = kappa * kappa * sums[j].w + 1.0;
                h_as[j] = tau * kappa * sums[j].w;
            }
            if !(gmax.is_finite()) {
                return None;
            }
            if gmax < self.inner_tol {
                converged = true;
                break;
            }
            let da = arrow_solve(h_aa, &h_ss, &h_as, r_a, &r_s, &mut delta);
            let mut t = 1.0;
            let mut new_sums = sums.clone();
            let mut accepted = false;
            for _ in 0..50 {
                let an = a + t * da;
                let gn: Vec<f64> = g.iter().zip(&delta).map(|(v, d)| v + t * d).collect();
                let fnew = eval(an, &gn, &mut new_sums);
                if fnew >= f - 1e-12 * f.abs().max(1.0) && fnew.is_finite() {
                    a = an;
                    g = gn;
                    f = fnew;
                    std::mem::swap(&mut sums, &mut new_sums);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // no further progress in floating point
                r_a = tau * sums.iter().map(|s| s.r).sum::<f64>() - a;
                converged = r_a.abs() < 1e-6;
                break;
            }
        }
        if !converged {
            return None;
        }
        modes.a[z] = a;
        modes.g[g0..g0 + nc].copy_from_slice(&g);
        Some(f)
    }

    /// Laplace log-likelihood and its exact gradient, updating the warm-start modes.
    pub fn evaluate(&self, params: &[f64], modes: &mut Modes) -> Option<(f64, Vec<f64>)> {
        let k = self.k;
        let (tau, kappa) = self.scales(params);
        let base = self.linear_base(&params[..k]);
        let dim = self.dim();
        let rho_idx = self.free.tau.then_some(k);
        let lambda_idx = self.free.kappa.then(|| k + usize::from(self.free.tau));
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];

        for z in 0..self.hierarchy.hospitals() {
            let f = self.inner_mode(z, &base, tau, kappa, modes)?;
            let cells = self.hierarchy.hospital_cells(z);
            let nc = cells.len();
            let a = modes.a[z];
            let g = &modes.g[cells.clone()];
            // per-cell sums at the mode
            let mut w = vec![0.0; nc];
            let mut r = vec![0.0; nc];
            let mut wp = vec![0.0; nc];
            let mut rx = vec![0.0; nc * k];
            let mut wx = vec![0.0; nc * k];
            let mut wpx = vec![0.0; nc * k];
            for (j, c) in cells.clone().enumerate() {
                let shift = tau * a + kappa * g[j];
                for i in self.cell_start[c]..self.cell_start[c + 1] {
                    let pi = logistic(base[i] + shift);
                    let wi = pi * (1.0 - pi);
                    let ri = self.y[i] - pi;
                    let wpi = wi * (1.0 - 2.0 * pi);
                    w[j] += wi;
                    r[j] += ri;
                    wp[j] += wpi;
                    let row = &self.x[i * k..(i + 1) * k];
                    for l in 0..k {
                        rx[j * k + l] += ri * row[l];
                        wx[j * k + l] += wi * row[l];
                        wpx[j * k + l] += wpi * row[l];
                    }
                }
            }
            let h_aa = 1.0 + tau * tau * w.iter().sum::<f64>();
            let h_ss: Vec<f64> = w.iter().map(|v| kappa * kappa * v + 1.0).collect();
            let h_as: Vec<f64> = w.iter().map(|v| tau * kappa * v).collect();
            let mut schur = h_aa;
            let mut logdet = 0.0;
            for j in 0..nc {
                schur -= h_as[j] * h_as[j] / h_ss[j];
                logdet += h_ss[j].ln();
            }
            logdet += schur.ln();
            value += f - 0.5 * logdet;
            let hinv_aa = 1.0 / schur;
            let hinv_as: Vec<f64> = (0..nc).map(|j| -h_as[j] / (h_ss[j] * schur)).collect();
            let hinv_ss: Vec<f64> =
                (0..nc).map(|j| 1.0 / h_ss[j] + h_as[j] * h_as[j] / (h_ss[j] * h_ss[j] * schur)).collect();

            let sum_r: f64 = r.iter().sum();
            let sum_w: f64 = w.iter().sum();
            let mut b_s = vec![0.0; nc];
            let mut du_s = vec![0.0; nc];
            let mut e_s = vec![0.0; nc];
            for idx in 0..dim {
                // direct derivative of f, rhs B = ∂(∇_u f)/∂θ, direct η part of E
                let (direct, b_a, var_a, var_s) = if idx < k {
                    let mut b_a = 0.0;
                    let mut direct = 0.0;
                    for j in 0..nc {
                        direct += rx[j * k + idx];
                        b_a -= tau * wx[j * k + idx];
                        b_s[j] = -kappa * wx[j * k + idx];
                        e_s[j] = wpx[j * k + idx];
                    }
                    (direct, b_a, 0.0, 0.0)
                } else if Some(idx) == rho_idx {
                    for j in 0..nc {
                        b_s[j] = -0.5 * kappa * tau * a * w[j];
                        e_s[j] = 0.5 * tau * a * wp[j];
                    }
                    (0.5 * tau * a * sum_r, 0.5 * tau * sum_r - 0.5 * tau * tau * a * sum_w, 1.0, 0.5)
                } else {
                    debug_assert_eq!(Some(idx), lambda_idx);
                    let mut b_a = 0.0;
                    let mut direct = 0.0;
                    for j in 0..nc {
                        direct += 0.5 * kappa * g[j] * r[j];
                        b_a -= 0.5 * tau * kappa * w[j] * g[j];
                        b_s[j] = 0.5 * kappa * r[j] - 0.5 * kappa * kappa * w[j] * g[j];
                        e_s[j] = 0.5 * kappa * g[j] * wp[j];
                    }
                    (direct, b_a, 0.0, 0.5)
                };
                let var_ss = if Some(idx) == lambda_idx { 1.0 } else { 0.0 };
                let du_a = arrow_solve(h_aa, &h_ss, &h_as, b_a, &b_s, &mut du_s);
                let mut d_aa = var_a * tau * tau * sum_w;
                let mut tr = 0.0;
                for j in 0..nc {
                    e_s[j] += (tau * du_a + kappa * du_s[j]) * wp[j];
                    d_aa += tau * tau * e_s[j];
                    let d_ss = var_ss * kappa * kappa * w[j] + kappa * kappa * e_s[j];
                    let d_as = var_s * tau * kappa * w[j] + tau * kappa * e_s[j];
                    tr += hinv_ss[j] * d_ss + 2.0 * hinv_as[j] * d_as;
                }
                tr += hinv_aa * d_aa;
                grad[idx] += direct - 0.5 * tr;
            }
        }
        value.is_finite().then_some((value, grad))
    }

    /// [`evaluate`](Self::evaluate) from zero modes.
    pub fn value_and_gradient(&self, params: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut modes = Modes::zeros(&self.hierarchy);
        self.evaluate(params, &mut modes)
    }
}

pub fn fit_logistic_mixed(d: &DataSet, opts: &OutcomeFitOptions) -> Result<OutcomeParams> {
    if d.outcome_kind() != OutcomeKind::Binary {
        return Err(Error::Unsupported("logistic mixed model needs a binary outcome".into()));
    }
    let mut warnings = Vec::new();
    let h = d.hierarchy().clone();
    let free = FreeVariances::resolve(opts.structure, &h, &mut warnings);
    let obj = LaplaceObjective::new(d, opts.structure, opts.inner_tol)?;
    let k = obj.k;
    let mut modes = Modes::zeros(&h);

    let warm = opts.start.as_ref().filter(|s| s.link == Link::Logit && s.beta.len() + 1 == k && s.hierarchy == h);
    let mut x0 = match warm {
        Some(s) => std::iter::once(s.alpha0).chain(s.beta.iter().cloned()).collect(),
        None => fit_logistic_regression(&obj.x, k, &obj.y)?.coef,
    };
    let start_log = |v: Option<f64>| v.map(|v| v.max(1e-3).ln()).unwrap_or(0.0);
    if free.tau {
        x0.push(start_log(warm.map(|s| s.tau2)));
    }
    if free.kappa {
        x0.push(start_log(warm.map(|s| s.kappa2)));
    }
    if let Some(s) = warm {
        let (tau, kappa) = obj.scales(&x0);
        for z in 0..h.hospitals() {
            modes.a[z] = if tau > 0.0 { s.alpha[z] / tau } else { 0.0 };
        }
        for c in 0..h.cells() {
            modes.g[c] = if kappa > 0.0 { s.gamma[c] / kappa } else { 0.0 };
        }
    }

    let dim = obj.dim();
    let mut bfgs = BfgsOptions::unbounded(dim);
    for i in k..dim {
        bfgs.lower[i] = LOG_VARIANCE_FLOOR;
        bfgs.upper[i] = LOG_VARIANCE_CEIL;
    }
    bfgs.max_iter = opts.max_iter;
    bfgs.step_tol = opts.tol;
    bfgs.grad_tol = 1e-6;
    let mut hess_modes = modes.clone();
    bfgs.init_inverse_hessian = fd_hessian(|x| obj.evaluate(x, &mut hess_modes).map(|r| r.1), &x0, 1e-5)
        .map(|hess| inverse_negative_definite(&hess));
    let mut f = |x: &[f64]| obj.evaluate(x, &mut modes);
    let res = maximize_bfgs(&mut f, &x0, &bfgs)
        .ok_or_else(|| Error::NonConvergence { model: "logistic mixed model".into(), iterations: 0 })?;
    if !res.converged {
        return Err(Error::NonConvergence { model: "logistic mixed model".into(), iterations: res.iterations });
    }
    let mut theta = res.x.clone();
    let names = ["intercept".to_string()]
        .into_iter()
        .chain(d.covariate_names().iter().cloned())
        .collect::<Vec<_>>();
    for (j, name) in names.iter().enumerate() {
        if theta[j].abs() > SEPARATION_BOUND {
            return Err(Error::Separation { model: "logistic mixed model".into(), parameter: name.clone() });
        }
    }
    let mut idx = k;
    for (flag, name) in [(free.tau, "hospital variance"), (free.kappa, "surgeon variance")] {
        if flag {
            if theta[idx] < BOUNDARY_LOG_VARIANCE {
                theta[idx] = f64::NEG_INFINITY;
                warnings.push(format!("{name} estimate at boundary 0"));
            }
            idx += 1;
        }
    }
    let (tau, kappa) = obj.scales(&theta);
    let mut final_modes = modes.clone();
    let log_likelihood = obj
        .evaluate(&theta, &mut final_modes)
        .ok_or_else(|| Error::NonConvergence { model: "logistic mixed model".into(), iterations: res.iterations })?
        .0;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(OutcomeParams {
        link: Link::Logit,
        structure: opts.structure,
        hierarchy: h,
        covariate_names: d.covariate_names().to_vec(),
        alpha0: theta[0],
        beta: theta[1..k].to_vec(),
        tau2: tau * tau,
        kappa2: kappa * kappa,
        sigma2: None,
        alpha: final_modes.a.iter().map(|a| tau * a).collect(),
        gamma: final_modes.g.iter().map(|g| kappa * g).collect(),
        fit_meta: OutcomeFitMeta {
            estimation: Estimation::Laplace,
            log_likelihood,
            iterations: res.iterations,
            converged: true,
            warnings,
            trace: res.trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::fd_gradient;
    use crate::outcome::testdata::nested;

    #[test]
    fn laplace_gradient_matches_differences() {
        let d = nested(7, 600, 4, 12, 1.0, OutcomeKind::Binary);
        let obj = LaplaceObjective::new(&d, RandomStructure::Nested, 1e-12).unwrap();
        let x = [-0.8, 0.9, 1.7, -0.2, 0.3];
        let g = obj.value_and_gradient(&x).unwrap().1;
        let fd = fd_gradient(|x| obj.value_and_gradient(x).unwrap().0, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-6, "{g:?} {fd:?}");
        }
    }

    #[test]
    fn no_random_effects_reduces_to_logistic_regression() {
        let d = nested(8, 500, 3, 6, 0.5, OutcomeKind::Binary);
        let fit = fit_logistic_mixed(&d, &OutcomeFitOptions { structure: RandomStructure::None, ..Default::default() })
            .unwrap();
        let obj = LaplaceObjective::new(&d, RandomStructure::None, 1e-10).unwrap();
        let glm = fit_logistic_regression(&obj.x, obj.k, &obj.y).unwrap();
        assert!((fit.alpha0 - glm.coef[0]).abs() < 1e-6);
        assert!((fit.beta[1] - glm.coef[2]).abs() < 1e-6);
        assert!((fit.fit_meta.log_likelihood - glm.log_likelihood).abs() < 1e-8);
    }

    #[test]
    fn fit_nested_model() {
        let d = nested(9, 3000, 5, 25, 1.0, OutcomeKind::Binary);
        let fit = fit_logistic_mixed(&d, &OutcomeFitOptions::default()).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 0.3, "{:?}", fit.beta);
        assert!(fit.kappa2 > 0.2 && fit.kappa2 < 3.0, "{}", fit.kappa2);
        let trace = &fit.fit_meta.trace;
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    }
}
