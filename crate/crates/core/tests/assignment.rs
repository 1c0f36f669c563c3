use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vardecomp::assignment::{fit_joint_multinomial, fit_nested_multinomial, AssignmentFitMeta, AssignmentFitOptions};
use vardecomp::outcome::fit_logistic_regression;
use vardecomp::{AssignmentParams, AssignmentStructure, DataSet, Error, Hierarchy, OutcomeKind, PatientRecord};

fn params(sizes: Vec<usize>, p: usize, coef: Vec<f64>) -> AssignmentParams {
    let h = Hierarchy::new(sizes).unwrap();
    let dim = coef.len();
    AssignmentParams::new(
        h,
        (1..=p).map(|j| format!("x{j}")).collect(),
        AssignmentStructure::Joint,
        coef,
        DMatrix::zeros(dim, dim),
        AssignmentFitMeta::default(),
    )
    .unwrap()
}

/// Draws cells from explicit probabilities `cell_probs(x)`.
fn draw(sizes: Vec<usize>, n: usize, seed: u64, cell_probs: impl Fn(&[f64]) -> Vec<f64>) -> DataSet {
    let h = Hierarchy::new(sizes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let x = vec![rng.sample::<f64, _>(StandardNormal), f64::from(rng.random_bool(0.5))];
            let probs = cell_probs(&x);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut cell = probs.len() - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    cell = c;
                    break;
                }
            }
            let (z, s) = h.cell_of(cell);
            PatientRecord { id: (i + 1).to_string(), y: f64::from(u8::from(i % 3 == 0)), hospital: z, surgeon: s, x }
        })
        .collect();
    DataSet::new(records, h, vec!["x1".into(), "x2".into()], OutcomeKind::Binary).unwrap()
}

fn random_xs(k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| vec![rng.sample::<f64, _>(StandardNormal) * 1.5, f64::from(rng.random_bool(0.5))]).collect()
}

#[test]
fn hospital_prob_examples() {
    let a = params(vec![1, 1], 1, vec![0.0, 0.0]);
    assert_eq!(a.hospital_prob(&[0.3]).unwrap(), vec![0.5, 0.5]);
    let b = params(vec![2, 1], 1, vec![0.0; 4]);
    let e = b.hospital_prob(&[1.0]).unwrap();
    assert!((e[0] - 2.0 / 3.0).abs() < 1e-15 && (e[1] - 1.0 / 3.0).abs() < 1e-15);
    let c = params(vec![1, 1], 1, vec![3f64.ln(), 0.0]);
    let e = c.hospital_prob(&[0.0]).unwrap();
    assert!((e[0] - 0.25).abs() < 1e-15 && (e[1] - 0.75).abs() < 1e-15);
    assert!(matches!(c.hospital_prob(&[0.0, 1.0]), Err(Error::Dimension { .. })));
}

#[test]
fn surgeon_prob_examples() {
    let a = params(vec![1, 2], 1, vec![0.0; 4]);
    assert_eq!(a.surgeon_prob(0, &[0.7]).unwrap(), vec![1.0]);
    assert_eq!(a.surgeon_prob(1, &[0.7]).unwrap(), vec![0.5, 0.5]);
    assert!(a.surgeon_prob(2, &[0.7]).is_err());
}

proptest! {
    #[test]
    fn probabilities_factor_the_cell_softmax(
        sizes in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        let q: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef: Vec<f64> = (0..(q - 1) * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = params(sizes.clone(), 2, coef.clone());
        let h = a.hierarchy().clone();
        for x in random_xs(100, seed ^ 1) {
            let scores: Vec<f64> = (0..q)
                .map(|c| if c == 0 { 0.0 } else { coef[(c - 1) * 3] + coef[(c - 1) * 3 + 1] * x[0] + coef[(c - 1) * 3 + 2] * x[1] })
                .collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            let e = a.hospital_prob(&x).unwrap();
            prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for z in 0..h.hospitals() {
                let g = a.surgeon_prob(z, &x).unwrap();
                prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (s, gs) in g.iter().enumerate() {
                    let direct = scores[h.cell_index(z, s)].exp() / total;
                    prop_assert!((gs * e[z] - direct).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn two_cells_reduce_to_logistic_regression() {
    for sizes in [vec![1, 1], vec![2]] {
        let d = draw(sizes, 3000, 11, |x| {
            let p = 1.0 / (1.0 + (-(0.3 + 0.8 * x[0] - 0.5 * x[1])).exp());
            vec![1.0 - p, p]
        });
        let fit = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
        let design: Vec<f64> = d.records().iter().flat_map(|r| [1.0, r.x[0], r.x[1]]).collect();
        let labels: Vec<f64> = d.records().iter().map(|r| f64::from(u8::from(d.hierarchy().cell_index(r.hospital, r.surgeon) == 1))).collect();
        let glm = fit_logistic_regression(&design, 3, &labels).unwrap();
        for (a, b) in fit.coefficients().iter().zip(&glm.coef) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn uniform_assignment_estimates_are_null() {
    let d = draw(vec![2, 1], 50_000, 5, |_| vec![1.0 / 3.0; 3]);
    let fit = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    assert!(fit.fit_meta().converged);
    for (i, c) in fit.coefficients().iter().enumerate() {
        let se = fit.vcov()[(i, i)].sqrt();
        assert!(c.abs() < 3.0 * se, "coefficient {i}: {c} (se {se})");
    }
}

#[test]
fn empty_cell_is_an_error() {
    let d = draw(vec![1, 2], 200, 3, |_| vec![0.5, 0.5, 0.0]);
    assert!(fit_joint_multinomial(&d, &AssignmentFitOptions::default()).is_err());
    assert!(fit_nested_multinomial(&d, &AssignmentFitOptions::default()).is_err());
}

#[test]
fn log_likelihood_trace_is_non_decreasing() {
    let d = draw(vec![2, 2], 2000, 9, |x| {
        let s = [0.0, 0.5 * x[0], -0.3 + x[1], 0.2 - 0.4 * x[0]];
        let t: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v.exp() / t).collect()
    });
    for fit in [
        fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap(),
        fit_nested_multinomial(&d, &AssignmentFitOptions::default()).unwrap(),
    ] {
        let tr = &fit.fit_meta().trace;
        assert!(!tr.is_empty());
        // Nested traces concatenate sub-models; check within runs of increase.
        if fit.structure() == AssignmentStructure::Joint {
            assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{tr:?}");
        }
        assert!(fit.fit_meta().converged);
    }
}

#[test]
fn reference_cell_choice_does_not_matter() {
    let d = draw(vec![2, 3], 4000, 21, |x| {
        let s = [0.0, 0.4 * x[0], -0.3 + 0.5 * x[1], 0.2 - 0.4 * x[0], -0.2 + 0.3 * x[0]];
        let t: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v.exp() / t).collect()
    });
    let fit = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    // Reverse hospitals and surgeons, which moves the reference cell.
    let h = d.hierarchy();
    let sizes: Vec<usize> = h.surgeons_per_hospital().iter().rev().cloned().collect();
    let nh = Hierarchy::new(sizes).unwrap();
    let m = h.hospitals();
    let map = |z: usize, s: usize| (m - 1 - z, h.surgeons(z) - 1 - s);
    let records: Vec<PatientRecord> = d
        .records()
        .iter()
        .map(|r| {
            let (z, s) = map(r.hospital, r.surgeon);
            PatientRecord { hospital: z, surgeon: s, ..r.clone() }
        })
        .collect();
    let d2 = DataSet::new(records, nh.clone(), d.covariate_names().to_vec(), OutcomeKind::Binary).unwrap();
    let fit2 = fit_joint_multinomial(&d2, &AssignmentFitOptions::default()).unwrap();
    for x in random_xs(50, 4) {
        let a = fit.cell_probs(&x).unwrap();
        let b = fit2.cell_probs(&x).unwrap();
        for (c, (z, s)) in h.iter_cells().enumerate() {
            let (nz, ns) = map(z, s);
            assert!((a[c] - b[nh.cell_index(nz, ns)]).abs() < 1e-6);
        }
    }
}

#[test]
fn single_hospital_nested_equals_joint() {
    let d = draw(vec![3], 3000, 8, |x| {
        let s = [0.0, 0.5 * x[0], -0.4 + x[1]];
        let t: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v.exp() / t).collect()
    });
    let joint = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    let nested = fit_nested_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    for x in random_xs(20, 2) {
        assert_eq!(nested.hospital_prob(&x).unwrap(), vec![1.0]);
        let a = joint.cell_probs(&x).unwrap();
        let b = nested.cell_probs(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-8);
        }
    }
}

#[test]
fn single_surgeon_hospital_has_degenerate_surgeon_model() {
    let d = draw(vec![1, 2], 1000, 12, |x| {
        let s = [0.0, 0.3 * x[0], 0.2];
        let t: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v.exp() / t).collect()
    });
    let nested = fit_nested_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    for x in random_xs(10, 3) {
        assert_eq!(nested.surgeon_prob(0, &x).unwrap(), vec![1.0]);
    }
}

#[test]
fn joint_and_nested_agree_on_large_sample() {
    // Surgeon choice within hospital does not depend on x, so both model
    // families contain the truth.
    let g = [[0.3, 0.7], [0.5, 0.5]];
    let d = draw(vec![2, 2], 60_000, 17, |x| {
        let s = [0.0, -0.2 + 0.6 * x[0] - 0.5 * x[1]];
        let t: f64 = s.iter().map(|v| v.exp()).sum();
        let e = [s[0].exp() / t, s[1].exp() / t];
        vec![e[0] * g[0][0], e[0] * g[0][1], e[1] * g[1][0], e[1] * g[1][1]]
    });
    let joint = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    let nested = fit_nested_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    for x in random_xs(100, 6) {
        let a = joint.cell_probs(&x).unwrap();
        let b = nested.cell_probs(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 0.01, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn document_keeps_parameter_order() {
    let d = draw(vec![1, 2], 500, 1, |_| vec![0.3, 0.3, 0.4]);
    let fit = fit_joint_multinomial(&d, &AssignmentFitOptions::default()).unwrap();
    let doc = fit.to_document();
    assert_eq!(doc.parameter_order.len(), fit.dim());
    assert_eq!(doc.vcov.len(), fit.dim() * fit.dim());
    assert!(doc.parameter_order[0].contains("intercept"));
    let back = AssignmentParams::from_document(&doc).unwrap();
    assert_eq!(back.coefficients(), fit.coefficients());
}
