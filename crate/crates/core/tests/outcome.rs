use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vardecomp::outcome::{
    fit_linear_mixed, fit_logistic_mixed, fit_logistic_regression, fit_marginal_models, fit_outcome_model,
    GaussianObjective, LaplaceObjective, RandomStructure,
};
use vardecomp::{DataSet, Hierarchy, OutcomeFitOptions, OutcomeKind, PatientRecord};

struct Design {
    m: usize,
    q: usize,
    alpha0: f64,
    beta: [f64; 2],
    tau: f64,
    kappa: f64,
}

fn simulate(design: &Design, n: usize, seed: u64, kind: OutcomeKind) -> DataSet {
    let h = Hierarchy::even_split(design.m, design.q).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let alpha: Vec<f64> = (0..design.m).map(|_| design.tau * normal(&mut rng)).collect();
    let gamma: Vec<f64> = (0..design.q).map(|_| design.kappa * normal(&mut rng)).collect();
    let records = (0..n)
        .map(|i| {
            let c = rng.random_range(0..design.q);
            let (z, s) = h.cell_of(c);
            let x = vec![normal(&mut rng), f64::from(u8::from(rng.random_bool(0.5)))];
            let eta = design.alpha0 + alpha[z] + gamma[c] + design.beta[0] * x[0] + design.beta[1] * x[1];
            let y = match kind {
                OutcomeKind::Continuous => eta + normal(&mut rng),
                OutcomeKind::Binary => f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))),
            };
            PatientRecord { id: i.to_string(), y, hospital: z, surgeon: s, x }
        })
        .collect();
    DataSet::new(records, h, vec!["x1".into(), "x2".into()], kind).unwrap()
}

const NULL: Design = Design { m: 5, q: 25, alpha0: 0.0, beta: [0.0, 0.0], tau: 0.0, kappa: 0.0 };

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn linear_null_model_has_small_variances() {
    let d = simulate(&NULL, 20_000, 1, OutcomeKind::Continuous);
    let fit = fit_linear_mixed(&d, &OutcomeFitOptions::default()).unwrap();
    assert!(fit.tau2 < 0.05 && fit.kappa2 < 0.05, "{} {}", fit.tau2, fit.kappa2);
    assert!((fit.sigma2.unwrap() - 1.0).abs() < 0.05);
}

#[test]
fn linear_fit_is_location_equivariant() {
    let design = Design { m: 4, q: 12, alpha0: 0.5, beta: [1.0, -0.5], tau: 0.7, kappa: 0.5 };
    let d = simulate(&design, 1500, 2, OutcomeKind::Continuous);
    let shifted = d.with_outcomes(&d.outcomes().iter().map(|y| y + 10.0).collect::<Vec<_>>()).unwrap();
    for reml in [false, true] {
        let opts = OutcomeFitOptions { reml, ..Default::default() };
        let a = fit_linear_mixed(&d, &opts).unwrap();
        let b = fit_linear_mixed(&shifted, &opts).unwrap();
        assert!((b.alpha0 - a.alpha0 - 10.0).abs() < 1e-8);
        for (u, v) in a.beta.iter().zip(&b.beta).chain(a.alpha.iter().zip(&b.alpha)).chain(a.gamma.iter().zip(&b.gamma)) {
            assert!((u - v).abs() < 1e-8, "{u} {v} {}", u - v);
        }
        assert!((a.tau2 - b.tau2).abs() < 1e-8 && (a.kappa2 - b.kappa2).abs() < 1e-8);
    }
}

#[test]
fn hospital_predictions_shrink_cluster_means() {
    // One-level model without covariates: the conditional mean of α_z is
    // τ² / (τ² + σ²/n_z) times the cluster mean residual.
    let h = Hierarchy::new(vec![1; 8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut records = Vec::new();
    for z in 0..8 {
        let a: f64 = rng.sample::<f64, _>(StandardNormal);
        for i in 0..(10 + 7 * z) {
            let y = a + rng.sample::<f64, _>(StandardNormal);
            records.push(PatientRecord { id: format!("{z}-{i}"), y, hospital: z, surgeon: 0, x: vec![] });
        }
    }
    let d = DataSet::new(records, h, vec![], OutcomeKind::Continuous).unwrap();
    let fit = fit_linear_mixed(&d, &OutcomeFitOptions::default()).unwrap();
    assert!(fit.tau2 > 0.0);
    let sigma2 = fit.sigma2.unwrap();
    for z in 0..8 {
        let ys: Vec<f64> = d.records().iter().filter(|r| r.hospital == z).map(|r| r.y).collect();
        let nz = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / nz;
        let b = fit.tau2 / (fit.tau2 + sigma2 / nz);
        assert!((fit.alpha[z] - b * (mean - fit.alpha0)).abs() < 1e-8);
        assert!(b < 1.0);
    }
}

#[test]
fn logistic_null_model_has_centred_intercept() {
    let d = simulate(&NULL, 20_000, 4, OutcomeKind::Binary);
    let fit = fit_logistic_mixed(&d, &OutcomeFitOptions::default()).unwrap();
    assert!(fit.alpha0.abs() < 0.05, "{}", fit.alpha0);
    assert!(fit.tau2 < 0.05 && fit.kappa2 < 0.05);
}

#[test]
fn flipping_binary_outcome_negates_linear_predictor() {
    let design = Design { m: 4, q: 12, alpha0: -0.3, beta: [0.8, 0.5], tau: 0.6, kappa: 0.6 };
    let d = simulate(&design, 3000, 5, OutcomeKind::Binary);
    let flipped = d.with_outcomes(&d.outcomes().iter().map(|y| 1.0 - y).collect::<Vec<_>>()).unwrap();
    let a = fit_logistic_mixed(&d, &OutcomeFitOptions::default()).unwrap();
    let b = fit_logistic_mixed(&flipped, &OutcomeFitOptions::default()).unwrap();
    assert!((a.alpha0 + b.alpha0).abs() < 1e-6);
    for (u, v) in a.beta.iter().zip(&b.beta).chain(a.alpha.iter().zip(&b.alpha)).chain(a.gamma.iter().zip(&b.gamma)) {
        assert!((u + v).abs() < 1e-6, "{u} {v}");
    }
    assert!((a.tau2 - b.tau2).abs() < 1e-6 && (a.kappa2 - b.kappa2).abs() < 1e-6);
}

#[test]
fn single_cluster_logistic_fit_is_ordinary_regression() {
    let design = Design { m: 1, q: 1, alpha0: 0.2, beta: [0.7, -0.4], tau: 0.0, kappa: 0.0 };
    let d = simulate(&design, 2000, 6, OutcomeKind::Binary);
    let fit = fit_logistic_mixed(&d, &OutcomeFitOptions::default()).unwrap();
    assert_eq!((fit.tau2, fit.kappa2), (0.0, 0.0));
    let design: Vec<f64> = d.records().iter().flat_map(|r| [1.0, r.x[0], r.x[1]]).collect();
    let glm = fit_logistic_regression(&design, 3, &d.outcomes()).unwrap();
    let ours = [fit.alpha0, fit.beta[0], fit.beta[1]];
    for (a, b) in ours.iter().zip(&glm.coef) {
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }
}

#[test]
fn laplace_gradient_matches_central_differences() {
    let design = Design { m: 4, q: 12, alpha0: -0.2, beta: [1.0, 0.5], tau: 0.8, kappa: 0.8 };
    let d = simulate(&design, 800, 7, OutcomeKind::Binary);
    let obj = LaplaceObjective::new(&d, RandomStructure::Nested, 1e-12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (_, g) = obj.value_and_gradient(&x).unwrap();
        let fd = central_difference(|p| obj.value_and_gradient(p).unwrap().0, &x);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-4, "{g:?} {fd:?}");
        }
    }
}

#[test]
fn gaussian_gradients_match_central_differences() {
    let design = Design { m: 4, q: 12, alpha0: 0.0, beta: [1.0, 0.5], tau: 0.8, kappa: 0.8 };
    let d = simulate(&design, 500, 9, OutcomeKind::Continuous);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for reml in [false, true] {
        let obj = GaussianObjective::new(&d, RandomStructure::Nested, reml).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-2.0..1.5)).collect();
            let (_, g) = obj.profile(&x).unwrap();
            let fd = central_difference(|p| obj.profile(p).unwrap().0, &x);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-4, "{g:?} {fd:?}");
            }
        }
    }
    let obj = GaussianObjective::new(&d, RandomStructure::Nested, false).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = (0..obj.fixed_effect_dim() + obj.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (_, g) = obj.full_ml(&x);
        let fd = central_difference(|p| obj.full_ml(p).0, &x);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-4, "{g:?} {fd:?}");
        }
    }
}

#[test]
fn marginal_models_drop_cluster_terms_in_order() {
    for kind in [OutcomeKind::Binary, OutcomeKind::Continuous] {
        let design = Design { m: 4, q: 12, alpha0: 0.0, beta: [1.0, 0.5], tau: 0.7, kappa: 0.7 };
        let d = simulate(&design, 2000, 11, kind);
        let opts = OutcomeFitOptions::default();
        let mm = fit_marginal_models(&d, &opts).unwrap();
        assert!(mm.model_x.alpha.iter().chain(&mm.model_x.gamma).all(|v| *v == 0.0));
        assert_eq!((mm.model_x.tau2, mm.model_x.kappa2), (0.0, 0.0));
        assert!(mm.model_zx.gamma.iter().all(|v| *v == 0.0));
        assert_eq!(mm.model_zx.kappa2, 0.0);
        assert!(mm.model_zx.tau2 > 0.0);
        let nested = fit_outcome_model(&d, &opts).unwrap();
        for r in d.records().iter().take(50) {
            let a = mm.model_szx.predict_mu(r.hospital, r.surgeon, &r.x).unwrap();
            let b = nested.predict_mu(r.hospital, r.surgeon, &r.x).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn marginal_models_are_null_without_effects() {
    let d = simulate(&NULL, 20_000, 12, OutcomeKind::Continuous);
    let mm = fit_marginal_models(&d, &OutcomeFitOptions::default()).unwrap();
    assert!(mm.model_x.beta.iter().all(|b| b.abs() < 0.05));
    assert!(mm.model_zx.tau2 < 0.05);
}

#[test]
fn binary_fit_rejects_continuous_outcome_and_vice_versa() {
    let d = simulate(&NULL, 100, 13, OutcomeKind::Continuous);
    assert!(fit_logistic_mixed(&d, &OutcomeFitOptions::default()).is_err());
    let b = simulate(&NULL, 100, 13, OutcomeKind::Binary);
    assert!(fit_linear_mixed(&b, &OutcomeFitOptions::default()).is_err());
}
