//! Synthetic populations with nested hospital/surgeon effects, Monte Carlo
//! ground truth for the four components, and the replication harness.
//!
//! Generating model: `X₁ ~ N(0, 1)`, `X₂ ~ Bernoulli(1/2)`; `(Z, S)` from a
//! joint softmax over cells with intercepts `ψ ~ N(0, sd²)` and slopes
//! `φ ~ N(0, sd²)` (reference cell fixed at 0); latent outcome
//! `Y* = α₀ + α_z + γ_zs + β₁X₁ + β₂X₂ + ε` with `ε ~ Logistic(0, 1)`;
//! binary outcome `1{Y* ≥ 0}`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    fit_joint_multinomial, fit_nested_multinomial, AssignmentFitMeta, AssignmentFitOptions, AssignmentParams,
    AssignmentStructure,
};
use crate::data::{DataSet, Hierarchy, OutcomeKind, PatientRecord};
use crate::decomposition::{
    decompose_model_based, decompose_semiparametric, decompose_three_way, point_terms, ResidualMode,
};
use crate::error::{Error, Result};
use crate::outcome::{fit_outcome_model, logistic, marginal_models_from, OutcomeFitOptions, OutcomeParams};
use crate::rng::{stream_rng, Stream};
use crate::uncertainty::{mean_sd, quantile_sorted};

/// Variance of the standard logistic distribution.
pub const LOGISTIC_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

/// Replicate-failure fraction above which a replication run aborts.
pub const MAX_REPLICATE_FAILURES: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub seed: u64,
    pub effect_sd_hospital: f64,
    pub effect_sd_surgeon: f64,
    pub assign_intercept_sd: f64,
    pub assign_coef_sd: f64,
    pub intercept: f64,
    pub beta: [f64; 2],
    pub outcome_kind: OutcomeKind,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            m: 5,
            q: 25,
            seed: 1,
            effect_sd_hospital: 2f64.sqrt(),
            effect_sd_surgeon: 2f64.sqrt(),
            assign_intercept_sd: 0.5,
            assign_coef_sd: 0.5f64.sqrt(),
            intercept: 0.0,
            beta: [1.0, 2.0],
            outcome_kind: OutcomeKind::Binary,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < self.m {
            return Err(Error::Config("q must be ≥ m".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        let sds = [self.effect_sd_hospital, self.effect_sd_surgeon, self.assign_intercept_sd, self.assign_coef_sd];
        if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("standard deviations must be finite and ≥ 0".into()));
        }
        if !self.intercept.is_finite() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        self.validate()?;
        Hierarchy::even_split(self.m, self.q)
    }
}

pub fn covariate_names() -> Vec<String> {
    vec!["x1".into(), "x2".into()]
}

/// The drawn effects and assignment coefficients behind a population.
#[derive(Debug, Clone)]
pub struct GeneratingParams {
    pub hierarchy: Hierarchy,
    pub outcome_kind: OutcomeKind,
    pub intercept: f64,
    pub beta: [f64; 2],
    pub alpha: Vec<f64>,
    /// Flat cell order.
    pub gamma: Vec<f64>,
    pub assignment: AssignmentParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratingDocument {
    pub surgeons_per_hospital: Vec<usize>,
    pub outcome_kind: OutcomeKind,
    pub intercept: f64,
    pub beta: [f64; 2],
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub assignment_coefficients: Vec<f64>,
}

impl GeneratingParams {
    /// `E[Y(z, s) | x]` and `V(Y(z, s) | x)` for every cell.
    pub fn cell_moments_into(&self, x: &[f64], mu: &mut [f64], var: &mut [f64]) {
        let base = self.intercept + self.beta[0] * x[0] + self.beta[1] * x[1];
        for z in 0..self.hierarchy.hospitals() {
            for c in self.hierarchy.hospital_cells(z) {
                let eta = base + self.alpha[z] + self.gamma[c];
                match self.outcome_kind {
                    OutcomeKind::Binary => {
                        let p = logistic(eta);
                        mu[c] = p;
                        var[c] = p * (1.0 - p);
                    }
                    OutcomeKind::Continuous => {
                        mu[c] = eta;
                        var[c] = LOGISTIC_VARIANCE;
                    }
                }
            }
        }
    }

    pub fn to_document(&self) -> GeneratingDocument {
        GeneratingDocument {
            surgeons_per_hospital: self.hierarchy.surgeons_per_hospital().to_vec(),
            outcome_kind: self.outcome_kind,
            intercept: self.intercept,
            beta: self.beta,
            alpha: self.alpha.clone(),
            gamma: self.gamma.clone(),
            assignment_coefficients: self.assignment.coefficients().to_vec(),
        }
    }

    /// The generating outcome model as fitted-parameter values (identity
    /// link carries the logistic noise variance).
    pub fn as_outcome_params(&self) -> OutcomeParams {
        use crate::outcome::{Estimation, Link, OutcomeFitMeta, RandomStructure};
        let link = Link::for_outcome(self.outcome_kind);
        OutcomeParams {
            link,
            structure: RandomStructure::Nested,
            hierarchy: self.hierarchy.clone(),
            covariate_names: covariate_names(),
            alpha0: self.intercept,
            beta: self.beta.to_vec(),
            tau2: 0.0,
            kappa2: 0.0,
            sigma2: (link == Link::Identity).then_some(LOGISTIC_VARIANCE),
            alpha: self.alpha.clone(),
            gamma: self.gamma.clone(),
            fit_meta: OutcomeFitMeta {
                estimation: Estimation::Ml,
                log_likelihood: f64::NAN,
                iterations: 0,
                converged: true,
                warnings: vec!["generating values, not a fit".into()],
                trace: vec![],
            },
        }
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("validated standard deviation")
}

/// Draws effects and assignment coefficients from stream `(seed, Mechanism, index)`.
pub fn draw_mechanism(cfg: &SimConfig, index: u64) -> Result<GeneratingParams> {
    let h = cfg.hierarchy()?;
    let mut rng = stream_rng(cfg.seed, Stream::Mechanism, index);
    let a = normal(cfg.effect_sd_hospital);
    let g = normal(cfg.effect_sd_surgeon);
    let alpha: Vec<f64> = (0..h.hospitals()).map(|_| a.sample(&mut rng)).collect();
    let gamma: Vec<f64> = (0..h.cells()).map(|_| g.sample(&mut rng)).collect();
    let psi = normal(cfg.assign_intercept_sd);
    let phi = normal(cfg.assign_coef_sd);
    let mut coef = Vec::with_capacity((h.cells() - 1) * 3);
    for _ in 1..h.cells() {
        coef.push(psi.sample(&mut rng));
        coef.push(phi.sample(&mut rng));
        coef.push(phi.sample(&mut rng));
    }
    let dim = coef.len();
    let assignment = AssignmentParams::new(
        h.clone(),
        covariate_names(),
        AssignmentStructure::Joint,
        coef,
        DMatrix::zeros(dim, dim),
        AssignmentFitMeta::default(),
    )?;
    Ok(GeneratingParams {
        hierarchy: h,
        outcome_kind: cfg.outcome_kind,
        intercept: cfg.intercept,
        beta: cfg.beta,
        alpha,
        gamma,
        assignment,
    })
}

fn draw_covariates<R: Rng>(rng: &mut R) -> [f64; 2] {
    let x1: f64 = rng.sample(StandardNormal);
    let x2 = f64::from(u8::from(rng.random_bool(0.5)));
    [x1, x2]
}

/// Draws `cfg.n` patients from stream `(seed, Population, index)`.
pub fn draw_population(cfg: &SimConfig, gen: &GeneratingParams, index: u64) -> Result<DataSet> {
    let h = &gen.hierarchy;
    let mut rng = stream_rng(cfg.seed, Stream::Population, index);
    let mut e = vec![0.0; h.hospitals()];
    let mut g = vec![0.0; h.cells()];
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let x = draw_covariates(&mut rng);
        gen.assignment.probs_into(&x, &mut e, &mut g);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = h.cells() - 1;
        'pick: for z in 0..h.hospitals() {
            for c in h.hospital_cells(z) {
                acc += e[z] * g[c];
                if u < acc {
                    cell = c;
                    break 'pick;
                }
            }
        }
        let (z, s) = h.cell_of(cell);
        let v: f64 = loop {
            let v: f64 = rng.random();
            if v > 0.0 {
                break v;
            }
        };
        let eps = (v / (1.0 - v)).ln();
        let latent = gen.intercept + gen.alpha[z] + gen.gamma[cell] + gen.beta[0] * x[0] + gen.beta[1] * x[1] + eps;
        let y = match gen.outcome_kind {
            OutcomeKind::Binary => f64::from(u8::from(latent >= 0.0)),
            OutcomeKind::Continuous => latent,
        };
        records.push(PatientRecord { id: (i + 1).to_string(), y, hospital: z, surgeon: s, x: x.to_vec() });
    }
    DataSet::new(records, h.clone(), covariate_names(), gen.outcome_kind)
}

/// Draws a mechanism and a population from `cfg.seed`.
pub fn generate_population(cfg: &SimConfig) -> Result<(DataSet, GeneratingParams)> {
    let gen = draw_mechanism(cfg, 0)?;
    let d = draw_population(cfg, &gen, 0)?;
    Ok((d, gen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthComponents {
    pub omega: [f64; 4],
    /// Monte Carlo standard errors.
    pub se: [f64; 4],
    pub n_mc: usize,
}

impl TruthComponents {
    pub fn total(&self) -> f64 {
        self.omega.iter().sum()
    }
}

const TRUTH_CHUNK: usize = 4096;

/// Evaluates the four components under the generating parameters by Monte
/// Carlo over `X` with exact sums over cells.
pub fn true_components(gen: &GeneratingParams, n_mc: usize, seed: u64) -> Result<TruthComponents> {
    if n_mc < 2 {
        return Err(Error::Config("Monte Carlo sample size must be at least 2".into()));
    }
    let h = &gen.hierarchy;
    let (m, q) = (h.hospitals(), h.cells());
    let chunks = n_mc.div_ceil(TRUTH_CHUNK);
    let terms: Vec<[f64; 4]> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut rng = stream_rng(seed, Stream::Truth, k as u64);
            let len = TRUTH_CHUNK.min(n_mc - k * TRUTH_CHUNK);
            let (mut mu, mut var, mut e, mut g) = (vec![0.0; q], vec![0.0; q], vec![0.0; m], vec![0.0; q]);
            (0..len)
                .map(|_| {
                    let x = draw_covariates(&mut rng);
                    gen.cell_moments_into(&x, &mut mu, &mut var);
                    gen.assignment.probs_into(&x, &mut e, &mut g);
                    let t = point_terms(h, &mu, &var, &e, &g);
                    [t.mean, t.between, t.within, t.residual]
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let n = terms.len() as f64;
    let col = |j: usize| -> Vec<f64> { terms.iter().map(|t| t[j]).collect() };
    let means = col(0);
    let (mbar, _) = mean_sd(&means);
    let sq: Vec<f64> = means.iter().map(|v| (v - mbar).powi(2)).collect();
    let (w1_pop, sd1) = mean_sd(&sq);
    let mut omega = [w1_pop * n / (n - 1.0), 0.0, 0.0, 0.0];
    let mut se = [sd1 / n.sqrt(), 0.0, 0.0, 0.0];
    for j in 1..4 {
        let (mean, sd) = mean_sd(&col(j));
        omega[j] = mean;
        se[j] = sd / n.sqrt();
    }
    Ok(TruthComponents { omega, se, n_mc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    FourWay,
    ThreeWay,
    SemiParametric,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::FourWay => "four_way",
            Estimator::ThreeWay => "three_way",
            Estimator::SemiParametric => "semi_parametric",
        }
    }

    pub fn component_labels(self) -> [&'static str; 4] {
        match self {
            Estimator::ThreeWay => ["omega1", "omega2", "", "residual"],
            _ => ["omega1", "omega2", "omega3", "omega4"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismMode {
    /// One set of effects and assignment coefficients for all replicates.
    Fixed,
    /// Fresh effects and coefficients per replicate.
    Redraw,
}

#[derive(Debug, Clone)]
pub struct ReplicationConfig {
    pub sim: SimConfig,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub mechanism: MechanismMode,
    pub n_mc: usize,
    pub assignment_structure: AssignmentStructure,
    pub assignment_fit: AssignmentFitOptions,
    pub outcome_fit: OutcomeFitOptions,
}

impl ReplicationConfig {
    pub fn new(sim: SimConfig, replications: usize) -> Self {
        Self {
            sim,
            replications,
            estimators: vec![Estimator::FourWay, Estimator::ThreeWay, Estimator::SemiParametric],
            mechanism: MechanismMode::Fixed,
            n_mc: 200_000,
            assignment_structure: AssignmentStructure::Joint,
            assignment_fit: AssignmentFitOptions::default(),
            outcome_fit: OutcomeFitOptions::default(),
        }
    }
}

/// Estimates of one replicate, indexed like [`ReplicationConfig::estimators`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimates {
    pub replicate: usize,
    pub components: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub method: Estimator,
    pub component: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// 95% Monte Carlo interval for the sampling mean.
    pub mean_ci: [f64; 2],
    pub truth: f64,
    pub truth_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub replications: usize,
    pub failures: usize,
    pub mechanism: MechanismMode,
    pub truth: TruthComponents,
    pub components: Vec<ComponentSummary>,
}

#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub estimators: Vec<Estimator>,
    pub replicates: Vec<ReplicateEstimates>,
    pub failures: usize,
    pub summary: ReplicationSummary,
}

impl ReplicationResult {
    /// Long table `replicate,method,component,estimate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,method,component,estimate\n");
        for r in &self.replicates {
            for (est, w) in self.estimators.iter().zip(&r.components) {
                for (label, v) in est.component_labels().iter().zip(w) {
                    if !label.is_empty() {
                        out.push_str(&format!("{},{},{},{:e}\n", r.replicate + 1, est.label(), label, v));
                    }
                }
            }
        }
        out
    }

    /// Estimates of one component across replicates.
    pub fn series(&self, est: Estimator, j: usize) -> Vec<f64> {
        let Some(k) = self.estimators.iter().position(|&e| e == est) else { return vec![] };
        self.replicates.iter().map(|r| r.components[k][j]).collect()
    }
}

/// Fits both models to `d` and runs the requested decompositions.
pub fn estimate_replicate(
    d: &DataSet,
    estimators: &[Estimator],
    structure: AssignmentStructure,
    assignment_fit: &AssignmentFitOptions,
    outcome_fit: &OutcomeFitOptions,
) -> Result<Vec<[f64; 4]>> {
    let needs_eta = estimators.iter().any(|e| *e != Estimator::SemiParametric);
    let theta = fit_outcome_model(d, outcome_fit)?;
    let eta = if needs_eta {
        Some(match structure {
            AssignmentStructure::Joint => fit_joint_multinomial(d, assignment_fit)?,
            AssignmentStructure::Nested => fit_nested_multinomial(d, assignment_fit)?,
        })
    } else {
        None
    };
    let mut marginal = None;
    let mut out = Vec::with_capacity(estimators.len());
    for est in estimators {
        let c = match est {
            Estimator::FourWay => {
                decompose_model_based(d, &theta, eta.as_ref().unwrap(), ResidualMode::ModelBased)?
            }
            Estimator::ThreeWay => decompose_three_way(d, &theta, eta.as_ref().unwrap(), ResidualMode::ModelBased)?,
            Estimator::SemiParametric => {
                if marginal.is_none() {
                    marginal = Some(marginal_models_from(d, theta.clone(), outcome_fit)?);
                }
                decompose_semiparametric(d, marginal.as_ref().unwrap())?
            }
        };
        out.push(c.as_array());
    }
    Ok(out)
}

/// Runs the replication grid for one scenario. Replicate `r` draws its
/// population from stream `(seed, Population, r)`; results do not depend on
/// the number of worker threads.
pub fn run_replications(cfg: &ReplicationConfig) -> Result<ReplicationResult> {
    cfg.sim.validate()?;
    let fixed = match cfg.mechanism {
        MechanismMode::Fixed => Some(draw_mechanism(&cfg.sim, 0)?),
        MechanismMode::Redraw => None,
    };
    let rows: Vec<(usize, Result<(Vec<[f64; 4]>, Option<TruthComponents>)>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<(Vec<[f64; 4]>, Option<TruthComponents>)> {
                let own;
                let gen = match &fixed {
                    Some(g) => g,
                    None => {
                        own = draw_mechanism(&cfg.sim, r as u64)?;
                        &own
                    }
                };
                let d = draw_population(&cfg.sim, gen, r as u64)?;
                let est = estimate_replicate(
                    &d,
                    &cfg.estimators,
                    cfg.assignment_structure,
                    &cfg.assignment_fit,
                    &cfg.outcome_fit,
                )?;
                let truth = match &fixed {
                    Some(_) => None,
                    None => Some(true_components(gen, cfg.n_mc, crate::rng::derive_seed(cfg.sim.seed, Stream::Truth, r as u64))?),
                };
                Ok((est, truth))
            };
            (r, run())
        })
        .collect();
    let mut replicates = Vec::new();
    let mut truths = Vec::new();
    let mut failures = 0;
    for (r, res) in rows {
        match res {
            Ok((components, truth)) => {
                replicates.push(ReplicateEstimates { replicate: r, components });
                truths.extend(truth);
            }
            Err(e) => {
                log::warn!("replicate {} failed: {e}", r + 1);
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_REPLICATE_FAILURES * cfg.replications as f64 {
        return Err(Error::TooManyFailures { failed: failures, total: cfg.replications });
    }
    let truth = match &fixed {
        Some(gen) => true_components(gen, cfg.n_mc, cfg.sim.seed)?,
        None => {
            let k = truths.len().max(1) as f64;
            let mut omega = [0.0; 4];
            let mut se = [0.0; 4];
            for t in &truths {
                for j in 0..4 {
                    omega[j] += t.omega[j] / k;
                    se[j] += t.se[j] * t.se[j] / (k * k);
                }
            }
            TruthComponents { omega, se: se.map(f64::sqrt), n_mc: cfg.n_mc }
        }
    };
    let mut result = ReplicationResult {
        estimators: cfg.estimators.clone(),
        replicates,
        failures,
        summary: ReplicationSummary {
            n: cfg.sim.n,
            m: cfg.sim.m,
            q: cfg.sim.q,
            replications: cfg.replications,
            failures,
            mechanism: cfg.mechanism,
            truth: truth.clone(),
            components: Vec::new(),
        },
    };
    for &est in &cfg.estimators {
        for (j, label) in est.component_labels().iter().enumerate() {
            if label.is_empty() {
                continue;
            }
            let v = result.series(est, j);
            if v.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&v);
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let half = 1.96 * sd / (v.len() as f64).sqrt();
            let (t, tse) = if est == Estimator::ThreeWay && j == 3 {
                (truth.omega[2] + truth.omega[3], (truth.se[2].powi(2) + truth.se[3].powi(2)).sqrt())
            } else {
                (truth.omega[j], truth.se[j])
            };
            result.summary.components.push(ComponentSummary {
                method: est,
                component: label.to_string(),
                mean,
                sd,
                q025: quantile_sorted(&sorted, 0.025),
                q975: quantile_sorted(&sorted, 0.975),
                mean_ci: [mean - half, mean + half],
                truth: t,
                truth_se: tse,
            });
        }
    }
    Ok(result)
}
