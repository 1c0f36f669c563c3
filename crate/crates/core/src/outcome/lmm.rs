//! Gaussian nested random-intercept model.
//!
//! Within hospital `z` the marginal covariance is
//! `V_z = σ² I + κ² blockdiag(J_s) + τ² J`. Its inverse follows from the
//! within-cell Sherman–Morrison form `(σ² I + κ² J)⁻¹ = σ⁻²(I − κ²/a_s J)`,
//! `a_s = σ² + n_s κ²`, plus one more rank-one update for the hospital
//! intercept, so every likelihood quantity reduces to per-cell sums of the
//! stacked columns `d = (1, x, y)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{
    Estimation, FreeVariances, Link, OutcomeFitMeta, OutcomeFitOptions, OutcomeParams, BOUNDARY_LOG_VARIANCE,
    LOG_VARIANCE_CEIL, LOG_VARIANCE_FLOOR,
};
use crate::data::{DataSet, Hierarchy, OutcomeKind};
use crate::error::{Error, Result};
use crate::optim::{fd_hessian, inverse_negative_definite, maximize_bfgs, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Marginal Gaussian log-likelihood (ML or REML) of the nested model,
/// parameterised by the log-variances of the free variance components.
#[derive(Debug, Clone)]
pub struct GaussianObjective {
    k: usize,
    n: usize,
    hierarchy: Hierarchy,
    counts: Vec<f64>,
    sums: Vec<DVector<f64>>,
    cross: Vec<DMatrix<f64>>,
    free: FreeVariances,
    reml: bool,
}

struct Pieces {
    logdet: f64,
    m: DMatrix<f64>,
    /// Traces `tr(V⁻¹ ∂V)` for τ², κ², σ².
    traces: [f64; 3],
    /// `Dᵀ V⁻¹ ∂V V⁻¹ D` for τ², κ², σ².
    quads: [DMatrix<f64>; 3],
    t_hospital: Vec<DVector<f64>>,
    t_cell: Vec<DVector<f64>>,
}

impl GaussianObjective {
    pub fn new(d: &DataSet, structure: super::RandomStructure, reml: bool) -> Result<Self> {
        let p = d.covariate_dim();
        let k = p + 2;
        let h = d.hierarchy().clone();
        let q = h.cells();
        let mut counts = vec![0.0; q];
        let mut sums = vec![DVector::zeros(k); q];
        let mut cross = vec![DMatrix::zeros(k, k); q];
        let mut row = DVector::zeros(k);
        for r in d.records() {
            let c = h.cell_index(r.hospital, r.surgeon);
            row[0] = 1.0;
            row.rows_mut(1, p).copy_from_slice(&r.x);
            row[k - 1] = r.y;
            counts[c] += 1.0;
            sums[c] += &row;
            cross[c].ger(1.0, &row, &row, 1.0);
        }
        let mut warnings = Vec::new();
        let free = FreeVariances::resolve(structure, &h, &mut warnings);
        Ok(Self { k, n: d.len(), hierarchy: h, counts, sums, cross, free, reml })
    }

    /// Number of optimisation parameters (free log-variances).
    pub fn dim(&self) -> usize {
        usize::from(self.free.tau) + usize::from(self.free.kappa) + 1
    }

    pub fn fixed_effect_dim(&self) -> usize {
        self.k - 1
    }

    /// Maps free log-variances to `(τ², κ², σ²)`.
    pub fn variances(&self, logvars: &[f64]) -> (f64, f64, f64) {
        let mut it = logvars.iter();
        let tau2 = if self.free.tau { it.next().unwrap().exp() } else { 0.0 };
        let kappa2 = if self.free.kappa { it.next().unwrap().exp() } else { 0.0 };
        let sigma2 = it.next().unwrap().exp();
        (tau2, kappa2, sigma2)
    }

    fn pieces(&self, tau2: f64, kappa2: f64, sigma2: f64) -> Pieces {
        let k = self.k;
        let h = &self.hierarchy;
        let mut logdet = 0.0;
        let mut m = DMatrix::zeros(k, k);
        let mut traces = [0.0; 3];
        let mut quads = [DMatrix::zeros(k, k), DMatrix::zeros(k, k), DMatrix::zeros(k, k)];
        let mut t_hospital = Vec::with_capacity(h.hospitals());
        let mut t_cell = vec![DVector::zeros(k); h.cells()];
        for z in 0..h.hospitals() {
            let cells = h.hospital_cells(z);
            let mut omega = 0.0;
            let mut u = DVector::zeros(k);
            let mut sum_n_a2 = 0.0;
            for c in cells.clone() {
                let n_s = self.counts[c];
                let a = sigma2 + n_s * kappa2;
                omega += n_s / a;
                sum_n_a2 += n_s / (a * a);
                u.axpy(1.0 / a, &self.sums[c], 1.0);
                logdet += (n_s - 1.0) * sigma2.ln() + a.ln();
                // D'WD for the cell
                m += &self.cross[c] / sigma2;
                m.ger(-kappa2 / (a * sigma2), &self.sums[c], &self.sums[c], 1.0);
                traces[2] += n_s / sigma2 * (1.0 - kappa2 / a);
            }
            let denom = 1.0 + tau2 * omega;
            let kz = tau2 / denom;
            logdet += denom.ln();
            m.ger(-kz, &u, &u, 1.0);
            let tz = &u / denom;
            traces[0] += omega / denom;
            quads[0].ger(1.0, &tz, &tz, 1.0);
            traces[2] -= kz * sum_n_a2;
            for c in cells {
                let n_s = self.counts[c];
                let a = sigma2 + n_s * kappa2;
                let ratio = n_s / a;
                let tzs = &self.sums[c] / a - &u * (kz * ratio);
                traces[1] += ratio - kz * ratio * ratio;
                quads[1].ger(1.0, &tzs, &tzs, 1.0);
                // rows of V⁻¹D in this cell are d_i/σ² − b
                let b = &self.sums[c] * (kappa2 / (sigma2 * a)) + &u * (kz / a);
                quads[2] += &self.cross[c] / (sigma2 * sigma2);
                quads[2].ger(-1.0 / sigma2, &self.sums[c], &b, 1.0);
                quads[2].ger(-1.0 / sigma2, &b, &self.sums[c], 1.0);
                quads[2].ger(n_s, &b, &b, 1.0);
                t_cell[c] = tzs;
            }
            t_hospital.push(tz);
        }
        Pieces { logdet, m, traces, quads, t_hospital, t_cell }
    }

    fn free_index(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        if self.free.tau {
            idx.push(0);
        }
        if self.free.kappa {
            idx.push(1);
        }
        idx.push(2);
        idx
    }

    fn gls(&self, pieces: &Pieces) -> Option<(DVector<f64>, Cholesky<f64, nalgebra::Dyn>)> {
        let kx = self.k - 1;
        let mxx = pieces.m.view((0, 0), (kx, kx)).into_owned();
        let mxy = pieces.m.view((0, kx), (kx, 1)).column(0).into_owned();
        let chol = Cholesky::new(mxx)?;
        let beta = chol.solve(&mxy);
        Some((beta, chol))
    }

    /// Log-likelihood profiled over the fixed effects (ML) or the REML
    /// criterion, with its gradient in the free log-variances.
    pub fn profile(&self, logvars: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (tau2, kappa2, sigma2) = self.variances(logvars);
        let pieces = self.pieces(tau2, kappa2, sigma2);
        let kx = self.k - 1;
        let (beta, chol) = self.gls(&pieces)?;
        let mut u = DVector::from_element(self.k, 1.0);
        u.rows_mut(0, kx).copy_from(&(-&beta));
        let quad = u.dot(&(&pieces.m * &u));
        let vars = [tau2, kappa2, sigma2];
        let mut value = -0.5 * (self.n as f64 * LN_2PI + pieces.logdet + quad);
        if self.reml {
            let logdet_x: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            value = -0.5 * ((self.n - kx) as f64 * LN_2PI + pieces.logdet + logdet_x + quad);
        }
        let grad = self
            .free_index()
            .into_iter()
            .map(|v| {
                let q = &pieces.quads[v];
                let mut g = -0.5 * pieces.traces[v] + 0.5 * u.dot(&(q * &u));
                if self.reml {
                    let qxx = q.view((0, 0), (kx, kx)).into_owned();
                    g += 0.5 * (chol.solve(&qxx)).trace();
                }
                g * vars[v]
            })
            .collect();
        Some((value, grad))
    }

    /// Unprofiled ML log-likelihood in `(α₀, β, log-variances)` with its
    /// gradient; used for derivative checks.
    pub fn full_ml(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let kx = self.k - 1;
        let (fixed, logvars) = params.split_at(kx);
        let (tau2, kappa2, sigma2) = self.variances(logvars);
        let pieces = self.pieces(tau2, kappa2, sigma2);
        let mut u = DVector::from_element(self.k, 1.0);
        for j in 0..kx {
            u[j] = -fixed[j];
        }
        let mu = &pieces.m * &u;
        let value = -0.5 * (self.n as f64 * LN_2PI + pieces.logdet + u.dot(&mu));
        let vars = [tau2, kappa2, sigma2];
        let mut grad: Vec<f64> = (0..kx).map(|j| mu[j]).collect();
        for v in self.free_index() {
            let q = &pieces.quads[v];
            grad.push((-0.5 * pieces.traces[v] + 0.5 * u.dot(&(q * &u))) * vars[v]);
        }
        (value, grad)
    }
}

/// Newton steps on the analytic gradient from an interior BFGS optimum, so
/// the estimate does not depend on where the line search happened to stop.
fn polish_newton(obj: &GaussianObjective, x: &mut Vec<f64>, value: &mut f64) {
    for _ in 0..3 {
        let Some(grad) = obj.profile(x).map(|r| r.1) else { return };
        let Some(hess) = fd_hessian(|p| obj.profile(p).map(|r| r.1), x, 1e-6) else { return };
        let neg = -hess;
        let Some(chol) = neg.clone().cholesky() else { return };
        let step = chol.solve(&DVector::from_vec(grad));
        if step.amax() > 1.0 {
            return;
        }
        let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        match obj.profile(&cand) {
            Some((v, _)) if v >= *value - 1e-10 * value.abs().max(1.0) => {
                *x = cand;
                *value = v.max(*value);
                if step.amax() < 1e-12 {
                    return;
                }
            }
            _ => return,
        }
    }
}

pub fn fit_linear_mixed(d: &DataSet, opts: &OutcomeFitOptions) -> Result<OutcomeParams> {
    if d.outcome_kind() != OutcomeKind::Continuous {
        return Err(Error::Unsupported("linear mixed model needs a continuous outcome".into()));
    }
    let p = d.covariate_dim();
    if d.len() <= p + 2 {
        return Err(Error::Data(format!("need more than {} records for {} covariates", p + 2, p)));
    }
    let mut warnings = Vec::new();
    let h = d.hierarchy().clone();
    let free = FreeVariances::resolve(opts.structure, &h, &mut warnings);
    let obj = GaussianObjective::new(d, opts.structure, opts.reml)?;

    let design: Vec<f64> = d.records().iter().flat_map(|r| std::iter::once(1.0).chain(r.x.iter().cloned())).collect();
    let (_, rss) = super::fit_ols(&design, p + 1, &d.outcomes())?;
    let s2 = (rss / (d.len() - p - 1) as f64).max(1e-12);
    let floor_start = (s2 * 1e-4).ln();
    let start_log = |v: Option<f64>, default: f64| v.map(|v| v.ln().max(floor_start)).unwrap_or(default);
    let warm = opts.start.as_ref().filter(|s| s.link == Link::Identity);
    let mut x0 = Vec::new();
    if free.tau {
        x0.push(start_log(warm.map(|s| s.tau2), (s2 / 3.0).ln()));
    }
    if free.kappa {
        x0.push(start_log(warm.map(|s| s.kappa2), (s2 / 3.0).ln()));
    }
    x0.push(start_log(warm.and_then(|s| s.sigma2), (s2 / 3.0).ln()));

    let dim = x0.len();
    let mut bfgs = BfgsOptions::unbounded(dim);
    bfgs.lower = vec![LOG_VARIANCE_FLOOR; dim];
    bfgs.upper = vec![LOG_VARIANCE_CEIL + s2.ln().max(0.0); dim];
    bfgs.max_iter = opts.max_iter;
    bfgs.step_tol = opts.tol;
    bfgs.grad_tol = 1e-9 * (d.len() as f64).max(1.0).sqrt();
    bfgs.init_inverse_hessian =
        fd_hessian(|x| obj.profile(x).map(|r| r.1), &x0, 1e-5).map(|hess| inverse_negative_definite(&hess));
    let mut f = |x: &[f64]| obj.profile(x);
    let res = maximize_bfgs(&mut f, &x0, &bfgs)
        .ok_or_else(|| Error::NonConvergence { model: "linear mixed model".into(), iterations: 0 })?;
    if !res.converged {
        return Err(Error::NonConvergence { model: "linear mixed model".into(), iterations: res.iterations });
    }

    let mut logvars = res.x.clone();
    let mut value = res.value;
    if logvars.iter().all(|v| *v > BOUNDARY_LOG_VARIANCE) {
        polish_newton(&obj, &mut logvars, &mut value);
    }
    let mut names = Vec::new();
    if free.tau {
        names.push("hospital variance");
    }
    if free.kappa {
        names.push("surgeon variance");
    }
    names.push("residual variance");
    for (v, name) in logvars.iter_mut().zip(&names) {
        if *v < BOUNDARY_LOG_VARIANCE {
            *v = f64::NEG_INFINITY;
            warnings.push(format!("{name} estimate at boundary 0"));
        }
    }
    let (tau2, kappa2, sigma2) = obj.variances(&logvars);
    let sigma2 = sigma2.max(f64::MIN_POSITIVE);
    let pieces = obj.pieces(tau2, kappa2, sigma2);
    let (beta, _) = obj
        .gls(&pieces)
        .ok_or_else(|| Error::Data("singular fixed-effect design".into()))?;
    let mut u = DVector::from_element(p + 2, 1.0);
    u.rows_mut(0, p + 1).copy_from(&(-&beta));
    let alpha: Vec<f64> = pieces.t_hospital.iter().map(|t| tau2 * t.dot(&u)).collect();
    let gamma: Vec<f64> = pieces.t_cell.iter().map(|t| kappa2 * t.dot(&u)).collect();

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(OutcomeParams {
        link: Link::Identity,
        structure: opts.structure,
        hierarchy: h,
        covariate_names: d.covariate_names().to_vec(),
        alpha0: beta[0],
        beta: beta.iter().skip(1).cloned().collect(),
        tau2,
        kappa2,
        sigma2: Some(sigma2),
        alpha,
        gamma,
        fit_meta: OutcomeFitMeta {
            estimation: if opts.reml { Estimation::Reml } else { Estimation::Ml },
            log_likelihood: value,
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
    use crate::data::PatientRecord;
    use crate::optim::fd_gradient;
    use crate::outcome::testdata::nested;
    use crate::outcome::RandomStructure;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
    }

    #[test]
    fn profile_gradient_matches_differences() {
        let d = nested(3, 400, 4, 12, 1.0, OutcomeKind::Continuous);
        for reml in [false, true] {
            let obj = GaussianObjective::new(&d, RandomStructure::Nested, reml).unwrap();
            let x = [0.3, -0.4, 1.1];
            let g = obj.profile(&x).unwrap().1;
            let fd = fd_gradient(|x| obj.profile(x).unwrap().0, &x, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-6, "{g:?} {fd:?}");
        }
    }

    #[test]
    fn full_gradient_matches_differences() {
        let d = nested(4, 300, 3, 9, 1.0, OutcomeKind::Continuous);
        let obj = GaussianObjective::new(&d, RandomStructure::Nested, false).unwrap();
        let x = [0.2, 0.9, 1.8, 0.1, -0.3, 1.0];
        let g = obj.full_ml(&x).1;
        let fd = fd_gradient(|x| obj.full_ml(x).0, &x, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-6, "{g:?} {fd:?}");
    }

    #[test]
    fn fit_recovers_fixed_effects() {
        let d = nested(5, 3000, 5, 25, 1.0, OutcomeKind::Continuous);
        let fit = fit_linear_mixed(&d, &OutcomeFitOptions { reml: true, ..Default::default() }).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 0.15, "{:?}", fit.beta);
        assert!((fit.beta[1] - 2.0).abs() < 0.25);
        assert!((fit.sigma2.unwrap() - std::f64::consts::PI.powi(2) / 3.0).abs() < 0.4);
        assert_eq!(fit.alpha.len(), 5);
        assert_eq!(fit.gamma.len(), 25);
    }

    /// Balanced one-way layout: REML equals the ANOVA moment estimator when
    /// the latter is interior.
    #[test]
    fn balanced_reml_matches_anova() {
        let h = Hierarchy::new(vec![1; 6]).unwrap();
        let ys = [
            [1.2, 0.4, 2.2, 1.9],
            [3.1, 2.0, 2.7, 3.3],
            [-0.5, 0.3, 0.9, 0.1],
            [1.0, 1.6, 0.7, 2.4],
            [4.0, 3.2, 3.7, 2.9],
            [0.2, -1.1, 0.8, 0.0],
        ];
        let mut records = Vec::new();
        for (z, row) in ys.iter().enumerate() {
            for (i, &y) in row.iter().enumerate() {
                records.push(PatientRecord { id: format!("{z}-{i}"), y, hospital: z, surgeon: 0, x: vec![] });
            }
        }
        let d = DataSet::new(records, h, vec![], OutcomeKind::Continuous).unwrap();
        let fit = fit_linear_mixed(&d, &OutcomeFitOptions { reml: true, ..Default::default() }).unwrap();
        let (a, r) = (6.0, 4.0);
        let grand: f64 = ys.iter().flatten().sum::<f64>() / (a * r);
        let means: Vec<f64> = ys.iter().map(|row| row.iter().sum::<f64>() / r).collect();
        let msb = r * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (a - 1.0);
        let msw = ys
            .iter()
            .zip(&means)
            .map(|(row, m)| row.iter().map(|y| (y - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (a * (r - 1.0));
        assert!((fit.sigma2.unwrap() - msw).abs() < 1e-6);
        assert!((fit.tau2 - (msb - msw) / r).abs() < 1e-6, "{} {}", fit.tau2, (msb - msw) / r);
        assert_eq!(fit.kappa2, 0.0);
    }
}
