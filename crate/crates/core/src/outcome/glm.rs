use nalgebra::{Cholesky, DMatrix, DVector};

use super::{log1pexp, logistic};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Binary logistic regression by iteratively reweighted least squares.
/// `design` is row-major `n × k` including the intercept column.
pub fn fit_logistic_regression(design: &[f64], k: usize, y: &[f64]) -> Result<GlmFit> {
    let n = y.len();
    let loglik = |b: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let eta: f64 = (0..k).map(|j| design[i * k + j] * b[j]).sum();
                y[i] * eta - log1pexp(eta)
            })
            .sum()
    };
    let mut beta = DVector::<f64>::zeros(k);
    let mut ll = loglik(&beta);
    for iter in 0..100 {
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut score = DVector::<f64>::zeros(k);
        for i in 0..n {
            let x = &design[i * k..(i + 1) * k];
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let p = logistic(eta);
            let w = p * (1.0 - p);
            for a in 0..k {
                score[a] += (y[i] - p) * x[a];
                for b in 0..k {
                    xtwx[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        if score.amax() < 1e-10 {
            return Ok(GlmFit { coef: beta.iter().cloned().collect(), log_likelihood: ll, iterations: iter });
        }
        let step = Cholesky::new(xtwx)
            .ok_or_else(|| Error::Data("logistic regression: singular information matrix".into()))?
            .solve(&score);
        let mut t = 1.0;
        loop {
            let trial = &beta + &step * t;
            let lt = loglik(&trial);
            if lt >= ll - 1e-12 * ll.abs() {
                beta = trial;
                ll = lt.max(ll);
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::NonConvergence { model: "logistic regression".into(), iterations: iter });
            }
        }
        if beta.amax() > 30.0 {
            return Err(Error::Separation { model: "logistic regression".into(), parameter: "coefficient".into() });
        }
    }
    Err(Error::NonConvergence { model: "logistic regression".into(), iterations: 100 })
}

/// Ordinary least squares; returns coefficients and the residual sum of squares.
pub fn fit_ols(design: &[f64], k: usize, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let x = DMatrix::from_row_slice(n, k, design);
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let beta = Cholesky::new(xtx).ok_or_else(|| Error::Data("least squares: singular design".into()))?.solve(&xty);
    let resid = &yv - &x * &beta;
    Ok((beta.iter().cloned().collect(), resid.norm_squared()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let design: Vec<f64> = (0..5).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 + 0.5 * i as f64).collect();
        let (b, rss) = fit_ols(&design, 2, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12 && rss < 1e-20);
    }

    #[test]
    fn logistic_intercept_only_is_logit_of_mean() {
        let y = [1.0, 1.0, 1.0, 0.0];
        let design = [1.0; 4];
        let fit = fit_logistic_regression(&design, 1, &y).unwrap();
        assert!((fit.coef[0] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn separated_data_is_reported() {
        let design: Vec<f64> = (0..6).flat_map(|i| [1.0, i as f64]).collect();
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert!(matches!(
            fit_logistic_regression(&design, 2, &y),
            Err(Error::Separation { .. }) | Err(Error::NonConvergence { .. })
        ));
    }
}
