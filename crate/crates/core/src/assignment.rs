//! Hospital/surgeon assignment mechanism: multinomial logistic models for
//! `P(Z = z, S = s | x)`, fitted either jointly over all cells or as a
//! hospital-level model followed by per-hospital surgeon models.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DataSet, Hierarchy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStructure {
    /// One softmax over every cell, reference cell (1,1).
    Joint,
    /// Softmax over hospitals (reference hospital 1), then a softmax over
    /// surgeons within each hospital (reference surgeon 1). The parameter
    /// block of cell `(a,1)` holds the hospital-level coefficients of `a`.
    Nested,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentFitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Ridge penalty on all coefficients; 0 disables it.
    pub ridge: f64,
    /// Coefficients beyond this magnitude are treated as separation.
    pub separation_bound: f64,
}

impl Default for AssignmentFitOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-8, ridge: 0.0, separation_bound: 30.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentFitMeta {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after each Newton iteration (per sub-model, concatenated).
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AssignmentParams {
    hierarchy: Hierarchy,
    covariate_names: Vec<String>,
    structure: AssignmentStructure,
    coef: Vec<f64>,
    vcov: DMatrix<f64>,
    fit_meta: AssignmentFitMeta,
}

impl AssignmentParams {
    pub fn new(
        hierarchy: Hierarchy,
        covariate_names: Vec<String>,
        structure: AssignmentStructure,
        coef: Vec<f64>,
        vcov: DMatrix<f64>,
        fit_meta: AssignmentFitMeta,
    ) -> Result<Self> {
        let dim = (hierarchy.cells() - 1) * (covariate_names.len() + 1);
        if coef.len() != dim {
            return Err(Error::Dimension { expected: dim, got: coef.len() });
        }
        if vcov.nrows() != dim || vcov.ncols() != dim {
            return Err(Error::Dimension { expected: dim, got: vcov.nrows() });
        }
        Ok(Self { hierarchy, covariate_names, structure, coef, vcov, fit_meta })
    }

    /// All coefficients zero, zero covariance.
    pub fn uniform(hierarchy: Hierarchy, covariate_names: Vec<String>, structure: AssignmentStructure) -> Self {
        let dim = (hierarchy.cells() - 1) * (covariate_names.len() + 1);
        Self {
            hierarchy,
            covariate_names,
            structure,
            coef: vec![0.0; dim],
            vcov: DMatrix::zeros(dim, dim),
            fit_meta: AssignmentFitMeta::default(),
        }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn structure(&self) -> AssignmentStructure {
        self.structure
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn vcov(&self) -> &DMatrix<f64> {
        &self.vcov
    }

    pub fn fit_meta(&self) -> &AssignmentFitMeta {
        &self.fit_meta
    }

    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    /// Same structure with replaced coefficients (e.g. a posterior draw).
    pub fn with_coefficients(&self, coef: Vec<f64>) -> Result<Self> {
        if coef.len() != self.coef.len() {
            return Err(Error::Dimension { expected: self.coef.len(), got: coef.len() });
        }
        Ok(Self { coef, fit_meta: AssignmentFitMeta::default(), ..self.clone() })
    }

    fn block(&self, cell: usize) -> &[f64] {
        let k = self.covariate_dim() + 1;
        &self.coef[(cell - 1) * k..cell * k]
    }

    /// Intercept `ψ` of a cell; zero for the reference cell.
    pub fn psi(&self, hospital: usize, surgeon: usize) -> f64 {
        let c = self.hierarchy.cell_index(hospital, surgeon);
        if c == 0 {
            0.0
        } else {
            self.block(c)[0]
        }
    }

    /// Slopes `φ` of a cell; zeros for the reference cell.
    pub fn phi(&self, hospital: usize, surgeon: usize) -> Vec<f64> {
        let c = self.hierarchy.cell_index(hospital, surgeon);
        if c == 0 {
            vec![0.0; self.covariate_dim()]
        } else {
            self.block(c)[1..].to_vec()
        }
    }

    fn linear(&self, cell: usize, x: &[f64]) -> f64 {
        if cell == 0 {
            return 0.0;
        }
        let b = self.block(cell);
        b[0] + b[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.covariate_dim() {
            return Err(Error::Dimension { expected: self.covariate_dim(), got: x.len() });
        }
        Ok(())
    }

    /// Fills `e` (length m) with `e(z; x)` and `g` (length q, cell-indexed)
    /// with `g(s; z, x)`. `x` must have length p.
    pub fn probs_into(&self, x: &[f64], e: &mut [f64], g: &mut [f64]) {
        let h = &self.hierarchy;
        match self.structure {
            AssignmentStructure::Joint => {
                let mut top = f64::NEG_INFINITY;
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc = self.linear(c, x);
                    top = top.max(*gc);
                }
                let mut total = 0.0;
                for (z, ez) in e.iter_mut().enumerate() {
                    let cells = h.hospital_cells(z);
                    let mut hz = 0.0;
                    for c in cells.clone() {
                        g[c] = (g[c] - top).exp();
                        hz += g[c];
                    }
                    for c in cells {
                        g[c] /= hz;
                    }
                    *ez = hz;
                    total += hz;
                }
                e.iter_mut().for_each(|v| *v /= total);
            }
            AssignmentStructure::Nested => {
                let mut top = f64::NEG_INFINITY;
                for (z, ez) in e.iter_mut().enumerate() {
                    *ez = self.linear(h.cell_index(z, 0), x);
                    top = top.max(*ez);
                }
                let mut total = 0.0;
                for ez in e.iter_mut() {
                    *ez = (*ez - top).exp();
                    total += *ez;
                }
                e.iter_mut().for_each(|v| *v /= total);
                for z in 0..h.hospitals() {
                    let cells = h.hospital_cells(z);
                    let first = cells.start;
                    let mut top = f64::NEG_INFINITY;
                    for c in cells.clone() {
                        g[c] = if c == first { 0.0 } else { self.linear(c, x) };
                        top = top.max(g[c]);
                    }
                    let mut hz = 0.0;
                    for c in cells.clone() {
                        g[c] = (g[c] - top).exp();
                        hz += g[c];
                    }
                    for c in cells {
                        g[c] /= hz;
                    }
                }
            }
        }
    }

    /// `P(Z = z, S = s | x)` for every cell, in flat cell order.
    pub fn cell_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let h = &self.hierarchy;
        let mut e = vec![0.0; h.hospitals()];
        let mut g = vec![0.0; h.cells()];
        self.probs_into(x, &mut e, &mut g);
        Ok((0..h.cells()).map(|c| g[c] * e[h.cell_of(c).0]).collect())
    }

    /// `e(z; x)` for every hospital.
    pub fn hospital_prob(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut e = vec![0.0; self.hierarchy.hospitals()];
        let mut g = vec![0.0; self.hierarchy.cells()];
        self.probs_into(x, &mut e, &mut g);
        Ok(e)
    }

    /// `g(s; z, x)` for every surgeon of hospital `z` (0-based).
    pub fn surgeon_prob(&self, hospital: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        if hospital >= self.hierarchy.hospitals() {
            return Err(Error::InvalidCell { hospital: hospital + 1, surgeon: 0 });
        }
        let mut e = vec![0.0; self.hierarchy.hospitals()];
        let mut g = vec![0.0; self.hierarchy.cells()];
        self.probs_into(x, &mut e, &mut g);
        Ok(g[self.hierarchy.hospital_cells(hospital)].to_vec())
    }

    /// Names of the free parameters in vcov order: cell major, intercept
    /// then covariates minor.
    pub fn parameter_names(&self) -> Vec<String> {
        let h = &self.hierarchy;
        let mut names = Vec::with_capacity(self.dim());
        for c in 1..h.cells() {
            let (z, s) = h.cell_of(c);
            names.push(format!("cell({},{}):intercept", z + 1, s + 1));
            for n in &self.covariate_names {
                names.push(format!("cell({},{}):{}", z + 1, s + 1, n));
            }
        }
        names
    }

    pub fn to_document(&self) -> AssignmentDocument {
        let h = &self.hierarchy;
        AssignmentDocument {
            structure: self.structure,
            surgeons_per_hospital: h.surgeons_per_hospital().to_vec(),
            covariate_names: self.covariate_names.clone(),
            cells: h
                .iter_cells()
                .map(|(z, s)| CellCoefficients {
                    hospital: z + 1,
                    surgeon: s + 1,
                    psi: self.psi(z, s),
                    phi: self.phi(z, s),
                })
                .collect(),
            parameter_order: self.parameter_names(),
            vcov: self.vcov.transpose().iter().cloned().collect(),
            fit_meta: self.fit_meta.clone(),
        }
    }

    pub fn from_document(doc: &AssignmentDocument) -> Result<Self> {
        let hierarchy = Hierarchy::new(doc.surgeons_per_hospital.clone())?;
        let k = doc.covariate_names.len() + 1;
        let dim = (hierarchy.cells() - 1) * k;
        let mut coef = vec![0.0; dim];
        for cell in &doc.cells {
            if !hierarchy.contains(cell.hospital.wrapping_sub(1), cell.surgeon.wrapping_sub(1)) {
                return Err(Error::InvalidCell { hospital: cell.hospital, surgeon: cell.surgeon });
            }
            let c = hierarchy.cell_index(cell.hospital - 1, cell.surgeon - 1);
            if c == 0 {
                continue;
            }
            if cell.phi.len() + 1 != k {
                return Err(Error::Dimension { expected: k - 1, got: cell.phi.len() });
            }
            coef[(c - 1) * k] = cell.psi;
            coef[(c - 1) * k + 1..c * k].copy_from_slice(&cell.phi);
        }
        if doc.vcov.len() != dim * dim {
            return Err(Error::Dimension { expected: dim * dim, got: doc.vcov.len() });
        }
        let vcov = DMatrix::from_row_slice(dim, dim, &doc.vcov);
        Self::new(hierarchy, doc.covariate_names.clone(), doc.structure, coef, vcov, doc.fit_meta.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellCoefficients {
    pub hospital: usize,
    pub surgeon: usize,
    pub psi: f64,
    pub phi: Vec<f64>,
}

/// JSON layout of fitted assignment parameters. `vcov` is flattened row
/// major in `parameter_order`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentDocument {
    pub structure: AssignmentStructure,
    pub surgeons_per_hospital: Vec<usize>,
    pub covariate_names: Vec<String>,
    pub cells: Vec<CellCoefficients>,
    pub parameter_order: Vec<String>,
    pub vcov: Vec<f64>,
    pub fit_meta: AssignmentFitMeta,
}

/// Result of a multinomial logistic fit with `classes` outcome levels and
/// class 0 as reference.
#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// `(classes - 1) × k` coefficients, class major.
    pub coef: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn softmax_row(coef: &[f64], k: usize, classes: usize, x: &[f64], out: &mut [f64]) -> f64 {
    out[0] = 0.0;
    let mut top = 0.0_f64;
    for c in 1..classes {
        let b = &coef[(c - 1) * k..c * k];
        out[c] = b.iter().zip(x).map(|(u, v)| u * v).sum();
        top = top.max(out[c]);
    }
    let mut total = 0.0;
    for v in out.iter_mut().take(classes) {
        *v = (*v - top).exp();
        total += *v;
    }
    for v in out.iter_mut().take(classes) {
        *v /= total;
    }
    top + total.ln()
}

/// Newton–Raphson maximum likelihood for a multinomial logit.
///
/// `design` is row-major `n × k` and already contains the intercept column.
/// Steps are halved until the penalised log-likelihood does not decrease.
pub fn fit_multinomial(
    design: &[f64],
    k: usize,
    labels: &[usize],
    classes: usize,
    opts: &AssignmentFitOptions,
    model: &str,
    param_name: &dyn Fn(usize, usize) -> String,
) -> Result<MultinomialFit> {
    let n = labels.len();
    let dim = (classes - 1) * k;
    if classes < 2 {
        return Ok(MultinomialFit {
            coef: vec![],
            vcov: DMatrix::zeros(0, 0),
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            trace: vec![],
        });
    }
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&c| counts[c] += 1);
    if let Some(c) = counts.iter().position(|&v| v == 0) {
        return Err(Error::Data(format!("{model}: class {} has no observations", c + 1)));
    }

    let mut probs = vec![0.0; classes];
    let evaluate = |coef: &[f64], probs: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let x = &design[i * k..(i + 1) * k];
            let lse = softmax_row(coef, k, classes, x, probs);
            let c = labels[i];
            let lin = if c == 0 {
                0.0
            } else {
                coef[(c - 1) * k..c * k].iter().zip(x).map(|(u, v)| u * v).sum::<f64>()
            };
            ll += lin - lse;
        }
        ll - 0.5 * opts.ridge * coef.iter().map(|v| v * v).sum::<f64>()
    };

    let mut coef = vec![0.0; dim];
    let mut ll = evaluate(&coef, &mut probs);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut xx = vec![0.0; k * k];
    loop {
        // gradient and negative Hessian
        let mut grad = DVector::<f64>::zeros(dim);
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let x = &design[i * k..(i + 1) * k];
            softmax_row(&coef, k, classes, x, &mut probs);
            for a in 0..k {
                for b in 0..k {
                    xx[a * k + b] = x[a] * x[b];
                }
            }
            for c in 1..classes {
                let resid = f64::from(u8::from(labels[i] == c)) - probs[c];
                for j in 0..k {
                    grad[(c - 1) * k + j] += resid * x[j];
                }
                for d in c..classes {
                    let w = if c == d { probs[c] * (1.0 - probs[c]) } else { -probs[c] * probs[d] };
                    let (r0, c0) = ((c - 1) * k, (d - 1) * k);
                    for a in 0..k {
                        for b in 0..k {
                            info[(r0 + a, c0 + b)] += w * xx[a * k + b];
                        }
                    }
                }
            }
        }
        for c in 1..classes {
            for d in c + 1..classes {
                let (r0, c0) = ((c - 1) * k, (d - 1) * k);
                for a in 0..k {
                    for b in 0..k {
                        info[(c0 + b, r0 + a)] = info[(r0 + a, c0 + b)];
                    }
                }
            }
        }
        if opts.ridge > 0.0 {
            for j in 0..dim {
                grad[j] -= opts.ridge * coef[j];
                info[(j, j)] += opts.ridge;
            }
        }
        let converged = grad.amax() < opts.grad_tol;
        let chol = Cholesky::new(info.clone());
        if converged {
            let vcov = match chol {
                Some(ch) => ch.inverse(),
                None => {
                    return Err(Error::Data(format!("{model}: information matrix is singular at the optimum")))
                }
            };
            return Ok(MultinomialFit { coef, vcov, log_likelihood: ll, iterations, converged: true, trace });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { model: model.to_string(), iterations });
        }
        iterations += 1;
        let step = match chol {
            Some(ch) => ch.solve(&grad),
            None => {
                // singular information: steepest ascent
                let mut shifted = info.clone();
                let bump = 1e-6 * info.diagonal().amax().max(1.0);
                for j in 0..dim {
                    shifted[(j, j)] += bump;
                }
                Cholesky::new(shifted).map(|ch| ch.solve(&grad)).unwrap_or_else(|| grad.clone())
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let trial: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + t * s).collect();
            let ll_trial = evaluate(&trial, &mut probs);
            if ll_trial.is_finite() && ll_trial >= ll - 1e-12 * ll.abs() {
                coef = trial;
                ll = ll_trial.max(ll);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(ll);
        if let Some(j) = coef.iter().position(|v| v.abs() > opts.separation_bound) {
            return Err(Error::Separation { model: model.to_string(), parameter: param_name(j / k + 1, j % k) });
        }
        if !accepted {
            return Err(Error::NonConvergence { model: model.to_string(), iterations });
        }
    }
}

fn design_rows<'a>(d: &DataSet, rows: impl Iterator<Item = &'a crate::data::PatientRecord>) -> Vec<f64> {
    let k = d.covariate_dim() + 1;
    let mut out = Vec::with_capacity(d.len() * k);
    for r in rows {
        out.push(1.0);
        out.extend_from_slice(&r.x);
    }
    out
}

fn check_cells(d: &DataSet) -> Result<()> {
    let h = d.hierarchy();
    for (c, &count) in d.cell_counts().iter().enumerate() {
        if count == 0 {
            let (z, s) = h.cell_of(c);
            return Err(Error::EmptyCell { hospital: z + 1, surgeon: s + 1 });
        }
    }
    Ok(())
}

fn covariate_label(names: &[String], j: usize) -> String {
    if j == 0 {
        "intercept".to_string()
    } else {
        names[j - 1].clone()
    }
}

/// Single multinomial over all cells with reference cell (1,1).
pub fn fit_joint_multinomial(d: &DataSet, opts: &AssignmentFitOptions) -> Result<AssignmentParams> {
    check_cells(d)?;
    let h = d.hierarchy().clone();
    let k = d.covariate_dim() + 1;
    let design = design_rows(d, d.records().iter());
    let labels = d.cell_indices();
    let names = d.covariate_names().to_vec();
    let name = |class: usize, j: usize| {
        let (z, s) = h.cell_of(class);
        format!("cell({},{}):{}", z + 1, s + 1, covariate_label(&names, j))
    };
    let fit = fit_multinomial(&design, k, &labels, h.cells(), opts, "joint assignment model", &name)?;
    let meta = AssignmentFitMeta {
        log_likelihood: fit.log_likelihood,
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
    };
    AssignmentParams::new(h, names, AssignmentStructure::Joint, fit.coef, fit.vcov, meta)
}

/// Hospital-level multinomial for `e(z; x)` followed by one surgeon-level
/// multinomial per hospital for `g(s; z, x)`. The covariance is block
/// diagonal across the sub-models.
pub fn fit_nested_multinomial(d: &DataSet, opts: &AssignmentFitOptions) -> Result<AssignmentParams> {
    check_cells(d)?;
    let h = d.hierarchy().clone();
    let k = d.covariate_dim() + 1;
    let names = d.covariate_names().to_vec();
    let dim = (h.cells() - 1) * k;
    let mut coef = vec![0.0; dim];
    let mut vcov = DMatrix::zeros(dim, dim);
    let mut meta = AssignmentFitMeta { converged: true, ..Default::default() };

    let mut place = |cells: &[usize], fit: &MultinomialFit, coef: &mut [f64], vcov: &mut DMatrix<f64>| {
        // cells[class] is the flat cell holding that class's parameters
        for (ci, &cell) in cells.iter().enumerate().skip(1) {
            let dst = (cell - 1) * k;
            let src = (ci - 1) * k;
            coef[dst..dst + k].copy_from_slice(&fit.coef[src..src + k]);
            for (cj, &cell2) in cells.iter().enumerate().skip(1) {
                let dst2 = (cell2 - 1) * k;
                let src2 = (cj - 1) * k;
                for a in 0..k {
                    for b in 0..k {
                        vcov[(dst + a, dst2 + b)] = fit.vcov[(src + a, src2 + b)];
                    }
                }
            }
        }
        meta.log_likelihood += fit.log_likelihood;
        meta.iterations += fit.iterations;
        meta.converged &= fit.converged;
        meta.trace.extend_from_slice(&fit.trace);
    };

    let hospital_cells: Vec<usize> = (0..h.hospitals()).map(|z| h.cell_index(z, 0)).collect();
    let design = design_rows(d, d.records().iter());
    let labels: Vec<usize> = d.records().iter().map(|r| r.hospital).collect();
    let name = |class: usize, j: usize| format!("hospital({}):{}", class + 1, covariate_label(&names, j));
    let fit = fit_multinomial(&design, k, &labels, h.hospitals(), opts, "hospital assignment model", &name)?;
    place(&hospital_cells, &fit, &mut coef, &mut vcov);

    for z in 0..h.hospitals() {
        if h.surgeons(z) < 2 {
            continue;
        }
        let rows: Vec<_> = d.records().iter().filter(|r| r.hospital == z).collect();
        let design = design_rows(d, rows.iter().copied());
        let labels: Vec<usize> = rows.iter().map(|r| r.surgeon).collect();
        let model = format!("surgeon assignment model (hospital {})", z + 1);
        let name = |class: usize, j: usize| {
            format!("cell({},{}):{}", z + 1, class + 1, covariate_label(&names, j))
        };
        let fit = fit_multinomial(&design, k, &labels, h.surgeons(z), opts, &model, &name)?;
        let cells: Vec<usize> = h.hospital_cells(z).collect();
        place(&cells, &fit, &mut coef, &mut vcov);
    }
    AssignmentParams::new(h, names, AssignmentStructure::Nested, coef, vcov, meta)
}
