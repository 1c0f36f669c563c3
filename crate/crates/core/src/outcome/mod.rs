//! Nested random-intercept outcome models
//! `g(E[Y | z, s, x]) = α₀ + α_z + γ_zs + βᵀx` with `α_z ~ N(0, τ²)` and
//! `γ_zs ~ N(0, κ²)`, for the identity and logit links.

mod glm;
mod glmm;
mod lmm;

use serde::{Deserialize, Serialize};

use crate::data::{DataSet, Hierarchy, OutcomeKind};
use crate::error::{Error, Result};

pub use glm::{fit_logistic_regression, fit_ols};
pub use glmm::{fit_logistic_mixed, LaplaceObjective};
pub use lmm::{fit_linear_mixed, GaussianObjective};

/// Log-variances below this are reported as exact zeros.
pub const BOUNDARY_LOG_VARIANCE: f64 = -20.0;
pub(crate) const LOG_VARIANCE_FLOOR: f64 = -40.0;
pub(crate) const LOG_VARIANCE_CEIL: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => logistic(eta),
        }
    }

    pub fn for_outcome(kind: OutcomeKind) -> Self {
        match kind {
            OutcomeKind::Continuous => Link::Identity,
            OutcomeKind::Binary => Link::Logit,
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^eta)` without overflow.
pub(crate) fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Which random intercepts the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomStructure {
    /// Hospital and surgeon-within-hospital intercepts.
    Nested,
    /// Hospital intercepts only.
    HospitalOnly,
    /// No cluster terms.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    Ml,
    Reml,
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFitMeta {
    pub estimation: Estimation,
    /// Marginal log-likelihood at the estimate (Laplace approximation for the logit link).
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OutcomeFitOptions {
    /// REML instead of ML (identity link only).
    pub reml: bool,
    pub structure: RandomStructure,
    pub max_iter: usize,
    /// Outer convergence on the change of the optimisation parameters.
    pub tol: f64,
    /// Inner mode-finding tolerance on the gradient max-norm.
    pub inner_tol: f64,
    /// Warm start.
    pub start: Option<OutcomeParams>,
}

impl Default for OutcomeFitOptions {
    fn default() -> Self {
        Self {
            reml: false,
            structure: RandomStructure::Nested,
            max_iter: 500,
            tol: 1e-8,
            inner_tol: 1e-10,
            start: None,
        }
    }
}

/// Fitted outcome model `θ`. Effect predictions are empirical Bayes:
/// conditional means for the identity link, Laplace posterior modes for logit.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeParams {
    pub link: Link,
    pub structure: RandomStructure,
    pub hierarchy: Hierarchy,
    pub covariate_names: Vec<String>,
    pub alpha0: f64,
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub kappa2: f64,
    /// Residual variance; `None` for the logit link.
    pub sigma2: Option<f64>,
    /// Hospital effect predictions, length m.
    pub alpha: Vec<f64>,
    /// Surgeon effect predictions, flat cell order.
    pub gamma: Vec<f64>,
    pub fit_meta: OutcomeFitMeta,
}

impl OutcomeParams {
    /// Linear predictor for flat cell `cell`; no bounds checks.
    #[inline]
    pub(crate) fn eta_cell(&self, hospital: usize, cell: usize, x: &[f64]) -> f64 {
        self.alpha0
            + self.alpha[hospital]
            + self.gamma[cell]
            + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    fn check(&self, hospital: usize, surgeon: usize, x: &[f64]) -> Result<usize> {
        if !self.hierarchy.contains(hospital, surgeon) {
            return Err(Error::InvalidCell { hospital: hospital + 1, surgeon: surgeon + 1 });
        }
        if x.len() != self.beta.len() {
            return Err(Error::Dimension { expected: self.beta.len(), got: x.len() });
        }
        Ok(self.hierarchy.cell_index(hospital, surgeon))
    }

    /// `μ(z, s; x) = g⁻¹(α₀ + α_z + γ_zs + βᵀx)` with 0-based ids.
    pub fn predict_mu(&self, hospital: usize, surgeon: usize, x: &[f64]) -> Result<f64> {
        let c = self.check(hospital, surgeon, x)?;
        Ok(self.link.inverse(self.eta_cell(hospital, c, x)))
    }

    /// `V(Y | z, s, x)`: `μ(1 − μ)` for logit, `σ²` for identity.
    pub fn conditional_variance(&self, hospital: usize, surgeon: usize, x: &[f64]) -> Result<f64> {
        let c = self.check(hospital, surgeon, x)?;
        Ok(self.variance_at(self.eta_cell(hospital, c, x)))
    }

    #[inline]
    pub(crate) fn variance_at(&self, eta: f64) -> f64 {
        match self.link {
            Link::Logit => {
                let mu = logistic(eta);
                mu * (1.0 - mu)
            }
            Link::Identity => self.sigma2.unwrap_or(0.0),
        }
    }

    /// Fills `mu` and `var` (flat cell order) at covariate vector `x`.
    pub fn cell_moments_into(&self, x: &[f64], mu: &mut [f64], var: &mut [f64]) {
        let base = self.alpha0 + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        for z in 0..self.hierarchy.hospitals() {
            for c in self.hierarchy.hospital_cells(z) {
                let eta = base + self.alpha[z] + self.gamma[c];
                match self.link {
                    Link::Logit => {
                        let m = logistic(eta);
                        mu[c] = m;
                        var[c] = m * (1.0 - m);
                    }
                    Link::Identity => {
                        mu[c] = eta;
                        var[c] = self.sigma2.unwrap_or(0.0);
                    }
                }
            }
        }
    }

    pub fn to_document(&self) -> OutcomeDocument {
        let h = &self.hierarchy;
        OutcomeDocument {
            link: self.link,
            structure: self.structure,
            surgeons_per_hospital: h.surgeons_per_hospital().to_vec(),
            covariate_names: self.covariate_names.clone(),
            alpha0: self.alpha0,
            beta: self.beta.clone(),
            tau2: self.tau2,
            kappa2: self.kappa2,
            sigma2: self.sigma2,
            hospital_effects: self
                .alpha
                .iter()
                .enumerate()
                .map(|(z, &effect)| HospitalEffect { hospital: z + 1, effect })
                .collect(),
            surgeon_effects: h
                .iter_cells()
                .map(|(z, s)| SurgeonEffect {
                    hospital: z + 1,
                    surgeon: s + 1,
                    effect: self.gamma[h.cell_index(z, s)],
                })
                .collect(),
            fit_meta: self.fit_meta.clone(),
        }
    }

    pub fn from_document(doc: &OutcomeDocument) -> Result<Self> {
        let hierarchy = Hierarchy::new(doc.surgeons_per_hospital.clone())?;
        let mut alpha = vec![0.0; hierarchy.hospitals()];
        for e in &doc.hospital_effects {
            *alpha
                .get_mut(e.hospital.wrapping_sub(1))
                .ok_or(Error::InvalidCell { hospital: e.hospital, surgeon: 0 })? = e.effect;
        }
        let mut gamma = vec![0.0; hierarchy.cells()];
        for e in &doc.surgeon_effects {
            if !hierarchy.contains(e.hospital.wrapping_sub(1), e.surgeon.wrapping_sub(1)) {
                return Err(Error::InvalidCell { hospital: e.hospital, surgeon: e.surgeon });
            }
            gamma[hierarchy.cell_index(e.hospital - 1, e.surgeon - 1)] = e.effect;
        }
        if doc.beta.len() != doc.covariate_names.len() {
            return Err(Error::Dimension { expected: doc.covariate_names.len(), got: doc.beta.len() });
        }
        Ok(Self {
            link: doc.link,
            structure: doc.structure,
            hierarchy,
            covariate_names: doc.covariate_names.clone(),
            alpha0: doc.alpha0,
            beta: doc.beta.clone(),
            tau2: doc.tau2,
            kappa2: doc.kappa2,
            sigma2: doc.sigma2,
            alpha,
            gamma,
            fit_meta: doc.fit_meta.clone(),
        })
    }

    /// Copy with every surgeon effect prediction set to zero.
    pub fn without_surgeon_effects(&self) -> Self {
        Self { gamma: vec![0.0; self.gamma.len()], ..self.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HospitalEffect {
    pub hospital: usize,
    pub effect: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeonEffect {
    pub hospital: usize,
    pub surgeon: usize,
    pub effect: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeDocument {
    pub link: Link,
    pub structure: RandomStructure,
    pub surgeons_per_hospital: Vec<usize>,
    pub covariate_names: Vec<String>,
    pub alpha0: f64,
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub kappa2: f64,
    pub sigma2: Option<f64>,
    pub hospital_effects: Vec<HospitalEffect>,
    pub surgeon_effects: Vec<SurgeonEffect>,
    pub fit_meta: OutcomeFitMeta,
}

/// Which variance parameters are estimated, after dropping those the
/// hierarchy cannot identify (a single hospital carries no hospital
/// variance; one surgeon per hospital carries no separate surgeon variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FreeVariances {
    pub tau: bool,
    pub kappa: bool,
}

impl FreeVariances {
    pub fn resolve(structure: RandomStructure, hierarchy: &Hierarchy, warnings: &mut Vec<String>) -> Self {
        let mut tau = matches!(structure, RandomStructure::Nested | RandomStructure::HospitalOnly);
        let mut kappa = structure == RandomStructure::Nested;
        if tau && hierarchy.hospitals() == 1 {
            tau = false;
            warnings.push("single hospital: hospital variance fixed at 0".into());
        }
        if kappa && hierarchy.cells() == hierarchy.hospitals() {
            kappa = false;
            warnings.push("one surgeon per hospital: surgeon variance fixed at 0".into());
        }
        Self { tau, kappa }
    }
}

/// Fits the nested model matching the dataset's outcome kind.
pub fn fit_outcome_model(d: &DataSet, opts: &OutcomeFitOptions) -> Result<OutcomeParams> {
    match d.outcome_kind() {
        OutcomeKind::Continuous => fit_linear_mixed(d, opts),
        OutcomeKind::Binary => fit_logistic_mixed(d, opts),
    }
}

/// Conditional-mean models at increasing conditioning depth, for the
/// semi-parametric decomposition.
#[derive(Debug, Clone)]
pub struct MarginalModels {
    /// `E[Y | X]`, no cluster terms.
    pub model_x: OutcomeParams,
    /// `E[Y | Z, X]`, hospital random intercepts.
    pub model_zx: OutcomeParams,
    /// `E[Y | S, Z, X]`, nested intercepts; the same model as the primary fit.
    pub model_szx: OutcomeParams,
}

impl MarginalModels {
    pub fn link(&self) -> Link {
        self.model_szx.link
    }
}

pub fn fit_marginal_models(d: &DataSet, opts: &OutcomeFitOptions) -> Result<MarginalModels> {
    let nested = fit_outcome_model(d, &OutcomeFitOptions { structure: RandomStructure::Nested, ..opts.clone() })?;
    marginal_models_from(d, nested, opts)
}

/// Completes the marginal set around an already fitted nested model.
pub fn marginal_models_from(d: &DataSet, nested: OutcomeParams, opts: &OutcomeFitOptions) -> Result<MarginalModels> {
    let base = OutcomeFitOptions { start: None, ..opts.clone() };
    let model_zx = fit_outcome_model(d, &OutcomeFitOptions { structure: RandomStructure::HospitalOnly, ..base.clone() })?;
    let model_x = fit_outcome_model(d, &OutcomeFitOptions { structure: RandomStructure::None, ..base })?;
    Ok(MarginalModels { model_x, model_zx, model_szx: nested })
}
