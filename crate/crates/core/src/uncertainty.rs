//! Posterior draws of the variance components. The outcome-model posterior
//! is approximated by a parametric bootstrap and the assignment-model
//! posterior by a normal distribution at the fitted coefficients; the two
//! are sampled independently and paired draw by draw.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentParams;
use crate::data::{DataSet, OutcomeKind};
use crate::decomposition::{decompose_model_based, ResidualMode};
use crate::error::{Error, Result};
use crate::outcome::{fit_outcome_model, OutcomeFitOptions, OutcomeParams};
use crate::rng::{stream_rng, Stream};

/// Bootstrap replicates may fail at most this fraction before aborting.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// Symmetric square root of a covariance matrix; negative eigenvalues are
/// floored at zero with a warning.
pub fn covariance_sqrt(vcov: &DMatrix<f64>) -> DMatrix<f64> {
    if vcov.is_empty() {
        return vcov.clone();
    }
    let eig = SymmetricEigen::new(vcov.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * top.max(1e-300)) {
        log::warn!("covariance matrix is not positive semidefinite; negative eigenvalues set to 0");
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `r` draws from `N(η̂, V(η̂))`. Draw `i` uses its own seeded stream.
pub fn sample_eta(eta: &AssignmentParams, r: usize, seed: u64) -> Result<Vec<AssignmentParams>> {
    let dim = eta.dim();
    let vcov = eta.vcov();
    if vcov.nrows() != dim || vcov.ncols() != dim {
        return Err(Error::Dimension { expected: dim, got: vcov.nrows() });
    }
    let root = covariance_sqrt(vcov);
    let centre = DVector::from_column_slice(eta.coefficients());
    (0..r)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Eta, i as u64);
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &centre + &root * z;
            eta.with_coefficients(draw.iter().cloned().collect())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    /// Draw fresh hospital/surgeon effects for every replicate (default);
    /// otherwise outcomes are simulated around the fitted predictions.
    pub redraw_effects: bool,
    pub fit: OutcomeFitOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { redraw_effects: true, fit: OutcomeFitOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    /// One entry per replicate; `None` where the refit failed.
    pub fits: Vec<Option<OutcomeParams>>,
    pub failures: usize,
}

/// Outcomes simulated from `theta` at the records of `d`.
pub fn simulate_outcomes<R: Rng>(d: &DataSet, theta: &OutcomeParams, redraw_effects: bool, rng: &mut R) -> Vec<f64> {
    let h = d.hierarchy();
    let (alpha, gamma) = if redraw_effects {
        let a = Normal::new(0.0, theta.tau2.sqrt()).expect("finite variance");
        let g = Normal::new(0.0, theta.kappa2.sqrt()).expect("finite variance");
        let alpha: Vec<f64> = (0..h.hospitals()).map(|_| a.sample(rng)).collect();
        let gamma: Vec<f64> = (0..h.cells()).map(|_| g.sample(rng)).collect();
        (alpha, gamma)
    } else {
        (theta.alpha.clone(), theta.gamma.clone())
    };
    let noise_sd = theta.sigma2.unwrap_or(0.0).sqrt();
    d.records()
        .iter()
        .map(|r| {
            let c = h.cell_index(r.hospital, r.surgeon);
            let eta = theta.alpha0
                + alpha[r.hospital]
                + gamma[c]
                + theta.beta.iter().zip(&r.x).map(|(b, x)| b * x).sum::<f64>();
            match d.outcome_kind() {
                OutcomeKind::Binary => f64::from(u8::from(rng.random::<f64>() < crate::outcome::logistic(eta))),
                OutcomeKind::Continuous => eta + noise_sd * rng.sample::<f64, _>(StandardNormal),
            }
        })
        .collect()
}

/// Parametric bootstrap of the outcome model: simulate, refit, collect.
pub fn bootstrap_theta(
    d: &DataSet,
    theta: &OutcomeParams,
    r: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapDraws> {
    let fit_opts = OutcomeFitOptions { start: Some(theta.clone()), structure: theta.structure, ..opts.fit.clone() };
    let fits: Vec<Option<OutcomeParams>> = (0..r)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, Stream::Bootstrap, b as u64);
            let y = simulate_outcomes(d, theta, opts.redraw_effects, &mut rng);
            let sim = d.with_outcomes(&y).ok()?;
            match fit_outcome_model(&sim, &fit_opts) {
                Ok(fit) => Some(fit),
                Err(e) => {
                    log::debug!("bootstrap replicate {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = fits.iter().filter(|f| f.is_none()).count();
    if r > 0 && failures as f64 > MAX_FAILURE_FRACTION * r as f64 {
        return Err(Error::TooManyFailures { failed: failures, total: r });
    }
    if failures > 0 {
        log::warn!("{failures} of {r} bootstrap refits failed and were skipped");
    }
    Ok(BootstrapDraws { fits, failures })
}

/// Component draws, one row per successful replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDraws {
    /// `(replicate index, [ω₁, ω₂, ω₃, ω₄])`.
    pub draws: Vec<(usize, [f64; 4])>,
    pub requested: usize,
    pub seed: u64,
}

impl ComponentDraws {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,omega1,omega2,omega3,omega4\n");
        for (i, w) in &self.draws {
            out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", i + 1, w[0], w[1], w[2], w[3]));
        }
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|(_, w)| w[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentIntervals {
    pub level: f64,
    pub draws: usize,
    pub failures: usize,
    pub omega1: Interval,
    pub omega2: Interval,
    pub omega3: Interval,
    pub omega4: Interval,
}

impl ComponentIntervals {
    pub fn get(&self, j: usize) -> &Interval {
        [&self.omega1, &self.omega2, &self.omega3, &self.omega4][j]
    }
}

/// Linear-interpolation quantile of sorted data (`p` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn interval(estimate: f64, values: &[f64], level: f64) -> Interval {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let (mean, sd) = mean_sd(values);
    Interval {
        estimate,
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
        mean,
        sd,
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorOptions {
    pub draws: usize,
    pub level: f64,
    pub bootstrap: BootstrapOptions,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        Self { draws: 1000, level: 0.95, bootstrap: BootstrapOptions::default() }
    }
}

/// Pairs bootstrap draw `r` of the outcome model with normal draw `r` of
/// the assignment model and recomputes the model-based decomposition.
pub fn component_posterior(
    d: &DataSet,
    theta: &OutcomeParams,
    eta: &AssignmentParams,
    seed: u64,
    opts: &PosteriorOptions,
) -> Result<(ComponentDraws, ComponentIntervals)> {
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Config(format!("interval level must lie in (0, 1), got {}", opts.level)));
    }
    let point = decompose_model_based(d, theta, eta, ResidualMode::ModelBased)?;
    let thetas = bootstrap_theta(d, theta, opts.draws, seed, &opts.bootstrap)?;
    let etas = sample_eta(eta, opts.draws, seed)?;
    let rows: Vec<Option<(usize, [f64; 4])>> = thetas
        .fits
        .par_iter()
        .zip(etas.par_iter())
        .enumerate()
        .map(|(i, (t, e))| {
            let t = t.as_ref()?;
            let c = decompose_model_based(d, t, e, ResidualMode::ModelBased).ok()?;
            Some((i, c.as_array()))
        })
        .collect();
    let draws = ComponentDraws { draws: rows.into_iter().flatten().collect(), requested: opts.draws, seed };
    let est = point.as_array();
    let iv = |j: usize| interval(est[j], &draws.column(j), opts.level);
    let intervals = ComponentIntervals {
        level: opts.level,
        draws: draws.draws.len(),
        failures: opts.draws - draws.draws.len(),
        omega1: iv(0),
        omega2: iv(1),
        omega3: iv(2),
        omega4: iv(3),
    };
    Ok((draws, intervals))
}
