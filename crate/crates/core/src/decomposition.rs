//! Variance decompositions: model-based four-way, semi-parametric four-way,
//! three-way, and four-way under a hypothetical assignment mechanism.
//!
//! All of them share one per-point kernel: at a covariate value `x`, given
//! cell means `μ(z,s|x)`, conditional variances `V(z,s|x)`, hospital
//! probabilities `e(z;x)` and within-hospital surgeon probabilities
//! `g(s;z,x)`, it returns the four inner sums. Aggregation over `x` then
//! uses either the records of a dataset or a weighted finite support.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentParams;
use crate::data::{empirical_variance, DataSet, Hierarchy};
use crate::error::{Error, Result};
use crate::outcome::{Link, MarginalModels, OutcomeParams};
use crate::scalar::{pairwise_sum, sample_variance, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ModelBased,
    SemiParametric,
    ThreeWay,
    Hypothetical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    BySubtraction,
    ModelBased,
}

/// `V[Y] = ω₁ + ω₂ + ω₃ + ω₄`: case-mix, between-hospital,
/// within-hospital between-surgeon, residual.
///
/// With `residual_mode = BySubtraction` the residual is
/// `total − (ω₁ + ω₂ + ω₃)` and can be slightly negative. Three-way results
/// store their residual in `omega4` with `omega3 = 0` and `omega3_absent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents<T> {
    pub omega1: T,
    pub omega2: T,
    pub omega3: T,
    pub omega4: T,
    pub total: T,
    pub method: Method,
    pub residual_mode: ResidualMode,
    pub omega3_absent: bool,
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn as_array(&self) -> [T; 4] {
        [self.omega1, self.omega2, self.omega3, self.omega4]
    }

    pub fn sum(&self) -> T {
        self.omega1 + self.omega2 + self.omega3 + self.omega4
    }

    pub fn to_f64(&self) -> VarianceComponents<f64> {
        VarianceComponents {
            omega1: self.omega1.to_f64_lossy(),
            omega2: self.omega2.to_f64_lossy(),
            omega3: self.omega3.to_f64_lossy(),
            omega4: self.omega4.to_f64_lossy(),
            total: self.total.to_f64_lossy(),
            method: self.method,
            residual_mode: self.residual_mode,
            omega3_absent: self.omega3_absent,
        }
    }

    /// `ωⱼ / total`; zero when the total is zero.
    pub fn shares(&self) -> [T; 4] {
        let t = self.total;
        self.as_array().map(|w| if t == T::zero() { T::zero() } else { w / t })
    }
}

/// Serialised form of a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentsReport {
    pub method: Method,
    pub residual_mode: ResidualMode,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: Option<f64>,
    pub omega4: f64,
    pub total: f64,
    pub shares: Shares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: Option<f64>,
    pub omega4: f64,
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn report(&self) -> ComponentsReport {
        let c = self.to_f64();
        let s = c.shares();
        let absent = |v: f64| (!c.omega3_absent).then_some(v);
        ComponentsReport {
            method: c.method,
            residual_mode: c.residual_mode,
            omega1: c.omega1,
            omega2: c.omega2,
            omega3: absent(c.omega3),
            omega4: c.omega4,
            total: c.total,
            shares: Shares { omega1: s[0], omega2: s[1], omega3: absent(s[2]), omega4: s[3] },
        }
    }
}

/// Inner sums of the decomposition at one covariate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTerms<T> {
    /// `Σ_z Σ_s μ g e`
    pub mean: T,
    /// `Σ_z [Σ_s μ g − mean]² e`
    pub between: T,
    /// `Σ_z [Σ_s (μ − Σ_s' μ g)² g] e`
    pub within: T,
    /// `Σ_z Σ_s V g e`
    pub residual: T,
    /// `Σ_z [Σ_s (V + μ²) g − (Σ_s μ g)²] e`: the hospital-level conditional
    /// variance of `Y(z)` computed from raw second moments.
    pub hospital_residual: T,
}

/// Evaluates the inner sums. Deviations are taken from the first cell of
/// each hospital and from the first hospital, so that equal means give
/// exact zeros in floating point.
pub fn point_terms<T: Scalar>(h: &Hierarchy, mu: &[T], var: &[T], e: &[T], g: &[T]) -> PointTerms<T> {
    let zero = T::zero();
    let mut within = zero;
    let mut residual = zero;
    let mut hospital_residual = zero;
    let mut ref_mean = zero;
    let mut shifted_mean = zero;
    let m = h.hospitals();
    let mut base = Vec::with_capacity(m);
    let mut dz = Vec::with_capacity(m);
    for z in 0..m {
        let cells = h.hospital_cells(z);
        let first = mu[cells.start];
        let mut d = zero;
        let mut w = zero;
        let mut second = zero;
        for c in cells.clone() {
            d = d + g[c] * (mu[c] - first);
            w = w + g[c] * var[c];
            second = second + g[c] * (var[c] + mu[c] * mu[c]);
        }
        let mut spread = zero;
        for c in cells {
            let dev = mu[c] - first - d;
            spread = spread + g[c] * dev * dev;
        }
        let hz = first + d;
        within = within + e[z] * spread;
        residual = residual + e[z] * w;
        hospital_residual = hospital_residual + e[z] * (second - hz * hz);
        base.push(first);
        dz.push(d);
    }
    if m > 0 {
        ref_mean = base[0] + dz[0];
    }
    let shifts: Vec<T> = (0..m).map(|z| (base[z] - base[0]) + (dz[z] - dz[0])).collect();
    for z in 0..m {
        shifted_mean = shifted_mean + e[z] * shifts[z];
    }
    let mut between = zero;
    for z in 0..m {
        let dev = shifts[z] - shifted_mean;
        between = between + e[z] * dev * dev;
    }
    PointTerms { mean: ref_mean + shifted_mean, between, within, residual, hospital_residual }
}

/// Options for aggregating point terms over `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Omega1Divisor {
    /// Weighted population variance (exact support distributions).
    Population,
    /// Sample variance with divisor `n − 1` (equally weighted records).
    Sample,
}

/// Aggregates per-point terms with weights summing to one.
///
/// This is the weighted-support entry point: with `Population` and the
/// probabilities of a finite support it evaluates the decomposition exactly.
#[doc(hidden)]
pub fn aggregate<T: Scalar>(
    terms: &[PointTerms<T>],
    weights: Option<&[T]>,
    divisor: Omega1Divisor,
    residual_mode: ResidualMode,
    observed_total: Option<T>,
    method: Method,
) -> Result<VarianceComponents<T>> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::Data("no covariate points to average over".into()));
    }
    let weighted = |f: &dyn Fn(&PointTerms<T>) -> T| -> T {
        match weights {
            Some(w) => pairwise_sum(&terms.iter().zip(w).map(|(t, &w)| w * f(t)).collect::<Vec<_>>()),
            None => pairwise_sum(&terms.iter().map(f).collect::<Vec<_>>()) / T::from_count(n),
        }
    };
    let omega1 = match (divisor, weights) {
        (Omega1Divisor::Sample, None) => {
            let means: Vec<T> = terms.iter().map(|t| t.mean).collect();
            if n < 2 {
                T::zero()
            } else {
                // shift by the first mean so equal means give an exact zero
                let shifted: Vec<T> = means.iter().map(|&v| v - means[0]).collect();
                sample_variance(&shifted).unwrap_or_else(T::zero)
            }
        }
        _ => {
            let first = terms[0].mean;
            let grand = weighted(&|t| t.mean - first);
            let var = weighted(&|t| {
                let d = t.mean - first - grand;
                d * d
            });
            match divisor {
                Omega1Divisor::Population => var,
                Omega1Divisor::Sample => {
                    if n < 2 {
                        T::zero()
                    } else {
                        var * T::from_count(n) / T::from_count(n - 1)
                    }
                }
            }
        }
    };
    let omega2 = weighted(&|t| t.between);
    let three_way = method == Method::ThreeWay;
    let omega3 = if three_way { T::zero() } else { weighted(&|t| t.within) };
    let model_residual = if three_way { weighted(&|t| t.hospital_residual) } else { weighted(&|t| t.residual) };
    let (omega4, total) = match residual_mode {
        ResidualMode::ModelBased => {
            let w4 = model_residual.max_zero();
            (w4, omega1 + omega2 + omega3 + w4)
        }
        ResidualMode::BySubtraction => {
            let total = observed_total
                .ok_or_else(|| Error::Unsupported("residual by subtraction needs an observed variance".into()))?;
            (total - omega1 - omega2 - omega3, total)
        }
    };
    Ok(VarianceComponents { omega1, omega2, omega3, omega4, total, method, residual_mode, omega3_absent: three_way })
}

fn check_compatible(d: &DataSet, theta: &OutcomeParams, eta: Option<&AssignmentParams>) -> Result<()> {
    if theta.hierarchy != *d.hierarchy() {
        return Err(Error::HierarchyMismatch("outcome model and dataset differ".into()));
    }
    if theta.beta.len() != d.covariate_dim() {
        return Err(Error::Dimension { expected: d.covariate_dim(), got: theta.beta.len() });
    }
    if let Some(eta) = eta {
        if eta.hierarchy() != d.hierarchy() {
            return Err(Error::HierarchyMismatch("assignment model and dataset differ".into()));
        }
        if eta.covariate_dim() != d.covariate_dim() {
            return Err(Error::Dimension { expected: d.covariate_dim(), got: eta.covariate_dim() });
        }
    }
    Ok(())
}

/// Per-record terms, evaluated in parallel and collected in record order.
fn record_terms<F>(d: &DataSet, theta: &OutcomeParams, probs: F) -> Vec<PointTerms<f64>>
where
    F: Fn(&[f64], &mut [f64], &mut [f64]) + Sync,
{
    let h = d.hierarchy();
    let (m, q) = (h.hospitals(), h.cells());
    d.records()
        .par_iter()
        .map_init(
            || (vec![0.0; q], vec![0.0; q], vec![0.0; m], vec![0.0; q]),
            |(mu, var, e, g), r| {
                theta.cell_moments_into(&r.x, mu, var);
                probs(&r.x, e, g);
                point_terms(h, mu, var, e, g)
            },
        )
        .collect()
}

/// Four-way decomposition from fitted outcome and assignment models,
/// averaging over the records of `d`.
pub fn decompose_model_based(
    d: &DataSet,
    theta: &OutcomeParams,
    eta: &AssignmentParams,
    residual_mode: ResidualMode,
) -> Result<VarianceComponents<f64>> {
    check_compatible(d, theta, Some(eta))?;
    let terms = record_terms(d, theta, |x, e, g| eta.probs_into(x, e, g));
    let observed = observed_total(d, residual_mode)?;
    aggregate(&terms, None, Omega1Divisor::Sample, residual_mode, observed, Method::ModelBased)
}

/// Three-way decomposition (case-mix, between-hospital, residual). With
/// `ModelBased` the residual is the averaged hospital-level conditional
/// variance of `Y(z)`.
pub fn decompose_three_way(
    d: &DataSet,
    theta: &OutcomeParams,
    eta: &AssignmentParams,
    residual_mode: ResidualMode,
) -> Result<VarianceComponents<f64>> {
    check_compatible(d, theta, Some(eta))?;
    let terms = record_terms(d, theta, |x, e, g| eta.probs_into(x, e, g));
    let observed = observed_total(d, residual_mode)?;
    aggregate(&terms, None, Omega1Divisor::Sample, residual_mode, observed, Method::ThreeWay)
}

fn observed_total(d: &DataSet, mode: ResidualMode) -> Result<Option<f64>> {
    match mode {
        ResidualMode::BySubtraction => empirical_variance(d).map(Some),
        ResidualMode::ModelBased => Ok(None),
    }
}

/// Four-way decomposition from per-record predictions of `E[Y|X]`,
/// `E[Y|Z,X]` and `E[Y|S,Z,X]` at each record's own `(z, s, x)`.
/// The residual is `observed_variance − (ω₁ + ω₂ + ω₃)`.
pub fn decompose_semiparametric_predictions<T: Scalar>(
    model_x: &[T],
    model_zx: &[T],
    model_szx: &[T],
    observed_variance: T,
) -> Result<VarianceComponents<T>> {
    let n = model_x.len();
    if model_zx.len() != n || model_szx.len() != n {
        return Err(Error::Dimension { expected: n, got: model_zx.len().min(model_szx.len()) });
    }
    if n < 2 {
        return Err(Error::Data("semi-parametric decomposition needs at least two records".into()));
    }
    let shifted: Vec<T> = model_x.iter().map(|&v| v - model_x[0]).collect();
    let omega1 = sample_variance(&shifted).unwrap_or_else(T::zero);
    let sq = |a: &[T], b: &[T]| {
        let v: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).collect();
        pairwise_sum(&v) / T::from_count(n)
    };
    let omega2 = sq(model_zx, model_x);
    let omega3 = sq(model_szx, model_zx);
    Ok(VarianceComponents {
        omega1,
        omega2,
        omega3,
        omega4: observed_variance - omega1 - omega2 - omega3,
        total: observed_variance,
        method: Method::SemiParametric,
        residual_mode: ResidualMode::BySubtraction,
        omega3_absent: false,
    })
}

/// Predictions of a fitted model at every record's own cell and covariates.
pub fn record_predictions(d: &DataSet, model: &OutcomeParams) -> Result<Vec<f64>> {
    check_compatible(d, model, None)?;
    let h = d.hierarchy();
    Ok(d
        .records()
        .iter()
        .map(|r| model.link.inverse(model.eta_cell(r.hospital, h.cell_index(r.hospital, r.surgeon), &r.x)))
        .collect())
}

/// Semi-parametric four-way decomposition of the empirical variance.
pub fn decompose_semiparametric(d: &DataSet, mm: &MarginalModels) -> Result<VarianceComponents<f64>> {
    let px = record_predictions(d, &mm.model_x)?;
    let pzx = record_predictions(d, &mm.model_zx)?;
    let pszx = record_predictions(d, &mm.model_szx)?;
    decompose_semiparametric_predictions(&px, &pzx, &pszx, empirical_variance(d)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// The fitted assignment mechanism itself.
    Observed,
    /// `ẽ(a) = P(Z = a)`, `g̃(b; a) = P(S = b | Z = a)`: same volumes, no
    /// dependence on case-mix.
    VolumePreserving,
    /// `ẽ = 1/m`, `g̃ = 1/h_a`.
    Uniform,
    Custom,
}

type TargetFn = dyn Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum TargetSource {
    Model(AssignmentParams),
    Table { e: Vec<f64>, g: Vec<f64> },
    Function(Arc<TargetFn>),
}

/// Hypothetical assignment mechanism `(ẽ, g̃)`, independent of the actual
/// hospital/surgeon given `x`.
#[derive(Clone)]
pub struct TargetAssignment {
    kind: TargetKind,
    hierarchy: Hierarchy,
    source: TargetSource,
}

impl std::fmt::Debug for TargetAssignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetAssignment").field("kind", &self.kind).field("hierarchy", &self.hierarchy).finish()
    }
}

const TARGET_SUM_TOL: f64 = 1e-12;

fn check_tables(h: &Hierarchy, e: &[f64], g: &[f64]) -> Result<()> {
    if e.len() != h.hospitals() || g.len() != h.cells() {
        return Err(Error::Dimension { expected: h.cells(), got: g.len() });
    }
    let bad = |what: &str| Error::Config(format!("target assignment: {what}"));
    if e.iter().chain(g).any(|&p| !(p > 0.0) || !p.is_finite()) {
        let c = g.iter().position(|&p| !(p > 0.0)).unwrap_or(0);
        let (z, s) = h.cell_of(c);
        return Err(Error::Config(format!(
            "target assignment gives zero probability to observed cell (hospital {}, surgeon {})",
            z + 1,
            s + 1
        )));
    }
    if (e.iter().sum::<f64>() - 1.0).abs() > TARGET_SUM_TOL {
        return Err(bad("hospital probabilities do not sum to 1"));
    }
    for z in 0..h.hospitals() {
        if (g[h.hospital_cells(z)].iter().sum::<f64>() - 1.0).abs() > TARGET_SUM_TOL {
            return Err(bad(&format!("surgeon probabilities of hospital {} do not sum to 1", z + 1)));
        }
    }
    Ok(())
}

impl TargetAssignment {
    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn observed(eta: &AssignmentParams) -> Self {
        Self { kind: TargetKind::Observed, hierarchy: eta.hierarchy().clone(), source: TargetSource::Model(eta.clone()) }
    }

    pub fn uniform(h: &Hierarchy) -> Self {
        let m = h.hospitals();
        let e = vec![1.0 / m as f64; m];
        let g = (0..h.cells()).map(|c| 1.0 / h.surgeons(h.cell_of(c).0) as f64).collect();
        Self { kind: TargetKind::Uniform, hierarchy: h.clone(), source: TargetSource::Table { e, g } }
    }

    /// Empirical hospital and within-hospital surgeon volumes of `d`.
    pub fn volume_preserving(d: &DataSet) -> Result<Self> {
        let h = d.hierarchy();
        let counts = d.cell_counts();
        let n = d.len() as f64;
        let mut e = vec![0.0; h.hospitals()];
        let mut g = vec![0.0; h.cells()];
        for z in 0..h.hospitals() {
            let nz: usize = counts[h.hospital_cells(z)].iter().sum();
            e[z] = nz as f64 / n;
            for c in h.hospital_cells(z) {
                g[c] = counts[c] as f64 / nz.max(1) as f64;
            }
        }
        check_tables(h, &e, &g)?;
        Ok(Self { kind: TargetKind::VolumePreserving, hierarchy: h.clone(), source: TargetSource::Table { e, g } })
    }

    /// Covariate-free tables: `e` per hospital, `g` per cell in flat order.
    pub fn from_tables(h: &Hierarchy, e: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        check_tables(h, &e, &g)?;
        Ok(Self { kind: TargetKind::Custom, hierarchy: h.clone(), source: TargetSource::Table { e, g } })
    }

    /// Covariate-dependent target; `f(x, e, g)` fills `ẽ(·; x)` and
    /// `g̃(·; ·, x)`. Validity is checked at every evaluation point.
    pub fn from_fn<F>(h: &Hierarchy, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { kind: TargetKind::Custom, hierarchy: h.clone(), source: TargetSource::Function(Arc::new(f)) }
    }

    pub fn probs_into(&self, x: &[f64], e: &mut [f64], g: &mut [f64]) {
        match &self.source {
            TargetSource::Model(eta) => eta.probs_into(x, e, g),
            TargetSource::Table { e: te, g: tg } => {
                e.copy_from_slice(te);
                g.copy_from_slice(tg);
            }
            TargetSource::Function(f) => f(x, e, g),
        }
    }
}

/// Four-way decomposition of the outcome variance under the target
/// assignment, averaging over the covariates of `d`. The residual is
/// always model-based.
pub fn decompose_hypothetical(
    d: &DataSet,
    theta: &OutcomeParams,
    target: &TargetAssignment,
) -> Result<VarianceComponents<f64>> {
    check_compatible(d, theta, None)?;
    if target.hierarchy != *d.hierarchy() {
        return Err(Error::HierarchyMismatch("target assignment and dataset differ".into()));
    }
    if let TargetSource::Function(f) = &target.source {
        let h = d.hierarchy();
        let mut e = vec![0.0; h.hospitals()];
        let mut g = vec![0.0; h.cells()];
        for r in d.records() {
            f(&r.x, &mut e, &mut g);
            check_tables(h, &e, &g)?;
        }
    }
    let terms = record_terms(d, theta, |x, e, g| target.probs_into(x, e, g));
    aggregate(&terms, None, Omega1Divisor::Sample, ResidualMode::ModelBased, None, Method::Hypothetical)
}

/// `(τ² + κ²) / (τ² + κ² + σ²)` for the identity-link model.
pub fn icc_summary(theta: &OutcomeParams) -> Result<f64> {
    match (theta.link, theta.sigma2) {
        (Link::Identity, Some(s2)) => {
            let num = theta.tau2 + theta.kappa2;
            let den = num + s2;
            Ok(if den > 0.0 { num / den } else { 0.0 })
        }
        _ => Err(Error::Unsupported(
            "intra-class correlation needs the identity link; the logit model has no residual variance \
             on the outcome scale and no latent-scale convention is assumed"
                .into(),
        )),
    }
}

/// A covariate value of a finite distribution with the exact model
/// ingredients at that value.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint<T> {
    pub weight: T,
    pub mu: Vec<T>,
    pub var: Vec<T>,
    pub e: Vec<T>,
    pub g: Vec<T>,
}

/// Model-based (or three-way) decomposition over a weighted finite support
/// instead of dataset records; `ω₁` is the weighted population variance.
#[doc(hidden)]
pub fn decompose_support<T: Scalar>(
    h: &Hierarchy,
    points: &[SupportPoint<T>],
    method: Method,
) -> Result<VarianceComponents<T>> {
    for p in points {
        if p.mu.len() != h.cells() || p.var.len() != h.cells() || p.g.len() != h.cells() {
            return Err(Error::Dimension { expected: h.cells(), got: p.mu.len() });
        }
        if p.e.len() != h.hospitals() {
            return Err(Error::Dimension { expected: h.hospitals(), got: p.e.len() });
        }
    }
    let terms: Vec<_> = points.iter().map(|p| point_terms(h, &p.mu, &p.var, &p.e, &p.g)).collect();
    let weights: Vec<T> = points.iter().map(|p| p.weight).collect();
    aggregate(&terms, Some(&weights), Omega1Divisor::Population, ResidualMode::ModelBased, None, method)
}
