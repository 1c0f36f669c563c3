//! Exact evaluation of the decompositions on small, fully discrete
//! instances: covariates on a finite support, and cell means, assignment
//! probabilities and conditional variances given as tables. Nothing is
//! sampled or fitted; the sums are written out term by term so they can
//! check the estimator code, which computes the same quantities another way.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Hierarchy;
use crate::decomposition::{Method, ResidualMode, SupportPoint, VarianceComponents};
use crate::error::{Error, Result};
use crate::scalar::{parse_ratio, Scalar};

/// On-disk form; every number is a string so fixtures can be exact
/// (`"1/3"`, `"0.125"`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub surgeons_per_hospital: Vec<usize>,
    /// Conditional variances default to `μ(1 − μ)`.
    #[serde(default)]
    pub binary: bool,
    pub points: Vec<PointFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointFile {
    #[serde(default)]
    pub x: Vec<f64>,
    pub prob: String,
    /// `μ(z, s | x)` in flat cell order.
    pub mu: Vec<String>,
    /// Joint `P(Z = z, S = s | x)` in flat cell order.
    pub assign: Vec<String>,
    #[serde(default)]
    pub condvar: Option<Vec<String>>,
}

/// Finite instance over scalar type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteInstance<T> {
    pub name: String,
    pub hierarchy: Hierarchy,
    pub x_support: Vec<Vec<f64>>,
    pub x_probs: Vec<T>,
    pub cell_mu: Vec<Vec<T>>,
    pub cell_assign: Vec<Vec<T>>,
    pub cell_condvar: Vec<Vec<T>>,
}

fn parse<T: Scalar>(s: &str) -> Result<T> {
    let (num, den) = parse_ratio(s).ok_or_else(|| Error::Config(format!("cannot parse number `{s}`")))?;
    Ok(T::from_ratio(num, den))
}

fn parse_all<T: Scalar>(v: &[String]) -> Result<Vec<T>> {
    v.iter().map(|s| parse(s)).collect()
}

fn close<T: Scalar>(a: T, b: T) -> bool {
    (a - b).abs_val().to_f64_lossy() <= 1e-12
}

impl<T: Scalar> DiscreteInstance<T> {
    pub fn from_file(f: &InstanceFile) -> Result<Self> {
        let hierarchy = Hierarchy::new(f.surgeons_per_hospital.clone())?;
        let mut inst = Self {
            name: f.name.clone(),
            hierarchy,
            x_support: Vec::new(),
            x_probs: Vec::new(),
            cell_mu: Vec::new(),
            cell_assign: Vec::new(),
            cell_condvar: Vec::new(),
        };
        for p in &f.points {
            let mu: Vec<T> = parse_all(&p.mu)?;
            let var = match (&p.condvar, f.binary) {
                (Some(v), _) => parse_all(v)?,
                (None, true) => mu.iter().map(|&m| m * (T::one() - m)).collect(),
                (None, false) => {
                    return Err(Error::Config(format!("instance `{}`: condvar required for non-binary", f.name)))
                }
            };
            inst.x_support.push(p.x.clone());
            inst.x_probs.push(parse(&p.prob)?);
            inst.cell_mu.push(mu);
            inst.cell_assign.push(parse_all(&p.assign)?);
            inst.cell_condvar.push(var);
        }
        inst.validate(f.binary)?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: InstanceFile = serde_json::from_str(&text)?;
        Self::from_file(&f)
    }

    fn validate(&self, binary: bool) -> Result<()> {
        let q = self.hierarchy.cells();
        let bad = |msg: String| Error::Config(format!("instance `{}`: {msg}", self.name));
        if self.x_probs.is_empty() {
            return Err(bad("no support points".into()));
        }
        let total = self.x_probs.iter().fold(T::zero(), |a, &b| a + b);
        if !close(total, T::one()) || self.x_probs.iter().any(|&p| p < T::zero()) {
            return Err(bad("covariate probabilities must be non-negative and sum to 1".into()));
        }
        for (i, ((mu, assign), var)) in self.cell_mu.iter().zip(&self.cell_assign).zip(&self.cell_condvar).enumerate() {
            if mu.len() != q || assign.len() != q || var.len() != q {
                return Err(bad(format!("point {i}: expected {q} cells")));
            }
            let s = assign.iter().fold(T::zero(), |a, &b| a + b);
            if !close(s, T::one()) || assign.iter().any(|&p| p < T::zero()) {
                return Err(bad(format!("point {i}: assignment probabilities must sum to 1")));
            }
            if var.iter().any(|&v| v < T::zero()) {
                return Err(bad(format!("point {i}: negative conditional variance")));
            }
            if binary && mu.iter().zip(var).any(|(&m, &v)| !close(v, m * (T::one() - m))) {
                return Err(bad(format!("point {i}: binary variance must equal μ(1 − μ)")));
            }
            for z in 0..self.hierarchy.hospitals() {
                let ez = self.hospital_prob(i, z);
                if ez == T::zero() {
                    return Err(bad(format!("point {i}: hospital {} has zero probability", z + 1)));
                }
            }
        }
        Ok(())
    }

    fn hospital_prob(&self, point: usize, z: usize) -> T {
        self.hierarchy.hospital_cells(z).fold(T::zero(), |a, c| a + self.cell_assign[point][c])
    }

    /// Exact ingredients per support point, for the estimator's weighted-support path.
    pub fn to_support(&self) -> Vec<SupportPoint<T>> {
        let h = &self.hierarchy;
        (0..self.x_probs.len())
            .map(|i| {
                let e: Vec<T> = (0..h.hospitals()).map(|z| self.hospital_prob(i, z)).collect();
                let g = (0..h.cells()).map(|c| self.cell_assign[i][c] / e[h.cell_of(c).0]).collect();
                SupportPoint {
                    weight: self.x_probs[i],
                    mu: self.cell_mu[i].clone(),
                    var: self.cell_condvar[i].clone(),
                    e,
                    g,
                }
            })
            .collect()
    }

    /// `V[Y] = E[Y²] − E[Y]²` from the tables.
    pub fn marginal_variance(&self) -> T {
        let mut first = T::zero();
        let mut second = T::zero();
        for i in 0..self.x_probs.len() {
            for c in 0..self.hierarchy.cells() {
                let w = self.x_probs[i] * self.cell_assign[i][c];
                let mu = self.cell_mu[i][c];
                first = first + w * mu;
                second = second + w * (self.cell_condvar[i][c] + mu * mu);
            }
        }
        second - first * first
    }
}

/// Hospital and within-hospital surgeon probabilities per support point.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTables<T> {
    /// `ẽ(a; x)`, one row per support point.
    pub e: Vec<Vec<T>>,
    /// `g̃(b; a, x)` in flat cell order, one row per support point.
    pub g: Vec<Vec<T>>,
}

impl<T: Scalar> TargetTables<T> {
    /// `ẽ = 1/m`, `g̃ = 1/h_a` at every point.
    pub fn uniform(h: &Hierarchy, points: usize) -> Self {
        let e = vec![T::one() / T::from_count(h.hospitals()); h.hospitals()];
        let g: Vec<T> = (0..h.cells()).map(|c| T::one() / T::from_count(h.surgeons(h.cell_of(c).0))).collect();
        Self { e: vec![e; points], g: vec![g; points] }
    }

    /// The instance's own assignment mechanism.
    pub fn observed(inst: &DiscreteInstance<T>) -> Self {
        let support = inst.to_support();
        Self { e: support.iter().map(|p| p.e.clone()).collect(), g: support.iter().map(|p| p.g.clone()).collect() }
    }
}

fn enumerate<T: Scalar>(inst: &DiscreteInstance<T>, e: &[Vec<T>], g: &[Vec<T>], method: Method) -> VarianceComponents<T> {
    let h = &inst.hierarchy;
    let zero = T::zero();
    let npts = inst.x_probs.len();
    // E(Y | x) under the mechanism
    let means: Vec<T> = (0..npts)
        .map(|i| {
            let mut acc = zero;
            for z in 0..h.hospitals() {
                for c in h.hospital_cells(z) {
                    acc = acc + inst.cell_mu[i][c] * g[i][c] * e[i][z];
                }
            }
            acc
        })
        .collect();
    let grand = (0..npts).fold(zero, |a, i| a + inst.x_probs[i] * means[i]);
    let mut w1 = zero;
    let mut w2 = zero;
    let mut w3 = zero;
    let mut w4 = zero;
    for i in 0..npts {
        let p = inst.x_probs[i];
        w1 = w1 + p * (means[i] - grand) * (means[i] - grand);
        for z in 0..h.hospitals() {
            let cells = h.hospital_cells(z);
            let hz = cells.clone().fold(zero, |a, c| a + inst.cell_mu[i][c] * g[i][c]);
            w2 = w2 + p * e[i][z] * (hz - means[i]) * (hz - means[i]);
            for c in cells {
                let d = inst.cell_mu[i][c] - hz;
                w3 = w3 + p * e[i][z] * g[i][c] * d * d;
                w4 = w4 + p * e[i][z] * g[i][c] * inst.cell_condvar[i][c];
            }
        }
    }
    let three_way = method == Method::ThreeWay;
    let (omega3, omega4) = if three_way { (zero, w3 + w4) } else { (w3, w4) };
    VarianceComponents {
        omega1: w1,
        omega2: w2,
        omega3,
        omega4,
        total: w1 + w2 + w3 + w4,
        method,
        residual_mode: ResidualMode::ModelBased,
        omega3_absent: three_way,
    }
}

/// Four-way decomposition of `V[Y]` by exact summation.
pub fn enumerate_decomposition<T: Scalar>(inst: &DiscreteInstance<T>) -> VarianceComponents<T> {
    let t = TargetTables::observed(inst);
    enumerate(inst, &t.e, &t.g, Method::ModelBased)
}

/// Four-way decomposition under a target assignment mechanism.
pub fn enumerate_hypothetical<T: Scalar>(
    inst: &DiscreteInstance<T>,
    target: &TargetTables<T>,
) -> Result<VarianceComponents<T>> {
    let h = &inst.hierarchy;
    let npts = inst.x_probs.len();
    if target.e.len() != npts || target.g.len() != npts {
        return Err(Error::Dimension { expected: npts, got: target.e.len() });
    }
    for (e, g) in target.e.iter().zip(&target.g) {
        if e.len() != h.hospitals() || g.len() != h.cells() {
            return Err(Error::Dimension { expected: h.cells(), got: g.len() });
        }
        if let Some(c) = g.iter().position(|&p| p <= T::zero()) {
            let (z, s) = h.cell_of(c);
            return Err(Error::Config(format!(
                "target assignment gives zero probability to cell (hospital {}, surgeon {})",
                z + 1,
                s + 1
            )));
        }
        if e.iter().any(|&p| p <= T::zero()) {
            return Err(Error::Config("target assignment gives zero probability to a hospital".into()));
        }
    }
    Ok(enumerate(inst, &target.e, &target.g, Method::Hypothetical))
}

/// Three-way decomposition by exact summation; the residual is `ω₃ + ω₄`.
pub fn enumerate_three_way<T: Scalar>(inst: &DiscreteInstance<T>) -> VarianceComponents<T> {
    let t = TargetTables::observed(inst);
    enumerate(inst, &t.e, &t.g, Method::ThreeWay)
}

/// Between-surgeon component for two hospitals with two surgeons each,
/// written with the surgeon-choice variances `g(1)(1 − g(1))`.
pub fn two_by_two_surgeon_component<T: Scalar>(inst: &DiscreteInstance<T>) -> Result<T> {
    if inst.hierarchy.surgeons_per_hospital() != [2, 2] {
        return Err(Error::Unsupported("two-by-two expression needs two hospitals with two surgeons".into()));
    }
    let mut acc = T::zero();
    for (i, support) in inst.to_support().iter().enumerate() {
        let (e1, e2) = (support.e[0], support.e[1]);
        let (g1, g2) = (support.g[0], support.g[2]);
        let d1 = inst.cell_mu[i][0] - inst.cell_mu[i][1];
        let d2 = inst.cell_mu[i][2] - inst.cell_mu[i][3];
        acc = acc
            + support.weight * (e1 * g1 * (T::one() - g1) * d1 * d1 + e2 * g2 * (T::one() - g2) * d2 * d2);
    }
    Ok(acc)
}

/// Fixture instances shipped with the crate, as `(file name, JSON text)`.
pub fn builtin_fixtures() -> Vec<(&'static str, &'static str)> {
    macro_rules! fixture {
        ($name:literal) => {
            ($name, include_str!(concat!("../fixtures/", $name)))
        };
    }
    vec![
        fixture!("single_cell.json"),
        fixture!("two_by_two.json"),
        fixture!("two_by_two_covariate.json"),
        fixture!("scenario1_covariate_free_outcome.json"),
        fixture!("scenario2_randomized.json"),
        fixture!("scenario3_equal_surgeons.json"),
        fixture!("unbalanced_three_hospitals.json"),
    ]
}

/// Result of checking the estimator's weighted-support path against
/// exact enumeration on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureCheck {
    pub name: String,
    pub enumerated: [f64; 4],
    pub estimator: [f64; 4],
    /// Largest absolute difference, double-precision estimator vs exact enumeration.
    pub max_abs_diff: f64,
    /// `|Σωⱼ − V[Y]|` in double precision.
    pub additivity_error: f64,
    /// Exact arithmetic agreement of both routes and of additivity.
    pub exact_match: bool,
}

/// Runs the estimator-vs-enumeration comparison on one fixture.
pub fn check_fixture(file: &InstanceFile) -> Result<FixtureCheck> {
    use crate::decomposition::decompose_support;
    let exact: DiscreteInstance<num_rational::Ratio<i128>> = DiscreteInstance::from_file(file)?;
    let float: DiscreteInstance<f64> = DiscreteInstance::from_file(file)?;
    let enum_exact = enumerate_decomposition(&exact);
    let est_exact = decompose_support(&exact.hierarchy, &exact.to_support(), Method::ModelBased)?;
    let exact_match = enum_exact.as_array() == est_exact.as_array() && enum_exact.sum() == exact.marginal_variance();
    let est = decompose_support(&float.hierarchy, &float.to_support(), Method::ModelBased)?.as_array();
    let enumerated = enum_exact.to_f64().as_array();
    let max_abs_diff = est.iter().zip(&enumerated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let en = enumerate_decomposition(&float);
    Ok(FixtureCheck {
        name: file.name.clone(),
        enumerated,
        estimator: est,
        max_abs_diff,
        additivity_error: (en.sum() - float.marginal_variance()).abs(),
        exact_match,
    })
}
