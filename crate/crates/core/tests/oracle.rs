use num_rational::Ratio;
use num_traits::{One, Zero};
use vardecomp::oracle::{
    builtin_fixtures, check_fixture, enumerate_decomposition, enumerate_hypothetical, enumerate_three_way,
    two_by_two_surgeon_component, DiscreteInstance, InstanceFile, TargetTables,
};
use vardecomp::Exact;

fn file(name: &str) -> InstanceFile {
    let (_, text) = builtin_fixtures().into_iter().find(|(n, _)| n.starts_with(name)).unwrap();
    serde_json::from_str(text).unwrap()
}

fn exact(name: &str) -> DiscreteInstance<Exact> {
    DiscreteInstance::from_file(&file(name)).unwrap()
}

fn q(n: i128, d: i128) -> Exact {
    Ratio::new(n, d)
}

#[test]
fn every_fixture_matches_enumeration() {
    let fixtures = builtin_fixtures();
    assert!(fixtures.len() >= 5);
    for (name, text) in fixtures {
        let f: InstanceFile = serde_json::from_str(text).unwrap();
        let check = check_fixture(&f).unwrap();
        assert!(check.exact_match, "{name}");
        assert!(check.max_abs_diff <= 1e-10, "{name}: {}", check.max_abs_diff);
        assert!(check.additivity_error <= 1e-13, "{name}: {}", check.additivity_error);
    }
}

#[test]
fn enumeration_adds_up_to_marginal_variance_exactly() {
    for (name, text) in builtin_fixtures() {
        let f: InstanceFile = serde_json::from_str(text).unwrap();
        let inst: DiscreteInstance<Exact> = DiscreteInstance::from_file(&f).unwrap();
        let c = enumerate_decomposition(&inst);
        assert_eq!(c.sum(), inst.marginal_variance(), "{name}");
        let three = enumerate_three_way(&inst);
        assert_eq!(three.omega1, c.omega1);
        assert_eq!(three.omega2, c.omega2);
        assert_eq!(three.omega4, c.omega3 + c.omega4);
    }
}

#[test]
fn single_cell_is_all_residual() {
    let inst = exact("single_cell");
    let c = enumerate_decomposition(&inst);
    assert!(c.omega1.is_zero() && c.omega2.is_zero() && c.omega3.is_zero());
    assert_eq!(c.omega4, inst.marginal_variance());
}

#[test]
fn two_by_two_surgeon_component_has_choice_variance_form() {
    for name in ["two_by_two", "two_by_two_covariate"] {
        let inst = exact(name);
        let c = enumerate_decomposition(&inst);
        assert_eq!(c.omega3, two_by_two_surgeon_component(&inst).unwrap(), "{name}");
        let approx: DiscreteInstance<f64> = DiscreteInstance::from_file(&file(name)).unwrap();
        let a = enumerate_decomposition(&approx).omega3;
        let b = two_by_two_surgeon_component(&approx).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn outcome_free_of_covariates_factorises_surgeon_term() {
    let inst = exact("scenario1");
    let c = enumerate_decomposition(&inst);
    let one = Exact::one();
    let mut w = [Exact::zero(); 2];
    for p in inst.to_support() {
        for (z, wz) in w.iter_mut().enumerate() {
            let g1 = p.g[2 * z];
            *wz += p.weight * p.e[z] * g1 * (one - g1);
        }
    }
    let mu = &inst.cell_mu[0];
    let expected = (mu[0] - mu[1]).pow(2) * w[0] + (mu[2] - mu[3]).pow(2) * w[1];
    assert_eq!(c.omega3, expected);
    // E[Y | X] still moves with X through the assignment.
    assert!(c.omega1 > Exact::zero());
}

#[test]
fn no_case_mix_term_when_neither_outcome_nor_assignment_depends_on_x() {
    let mut f = file("scenario1");
    let first = f.points[0].assign.clone();
    for p in &mut f.points {
        p.assign = first.clone();
    }
    let inst: DiscreteInstance<Exact> = DiscreteInstance::from_file(&f).unwrap();
    assert!(enumerate_decomposition(&inst).omega1.is_zero());
}

#[test]
fn randomized_scenario_surgeon_term_is_choice_variance_weighted() {
    let inst = exact("scenario2");
    let c = enumerate_decomposition(&inst);
    // Constant assignment: e and the within-hospital surgeon variances do
    // not depend on x.
    let s = inst.to_support();
    let (e1, e2) = (s[0].e[0], s[0].e[1]);
    let (g1, g2) = (s[0].g[0], s[0].g[2]);
    let mut d1 = Exact::zero();
    let mut d2 = Exact::zero();
    for (i, p) in inst.x_probs.iter().enumerate() {
        d1 += *p * (inst.cell_mu[i][0] - inst.cell_mu[i][1]).pow(2);
        d2 += *p * (inst.cell_mu[i][2] - inst.cell_mu[i][3]).pow(2);
    }
    let one = Exact::one();
    let expected = e1 * g1 * (one - g1) * d1 + e2 * g2 * (one - g2) * d2;
    assert_eq!(c.omega3, expected);
}

#[test]
fn equal_surgeons_scenario_has_no_surgeon_term() {
    let c = enumerate_decomposition(&exact("scenario3"));
    assert!(c.omega3.is_zero());
}

#[test]
fn hypothetical_with_instance_mechanism_is_the_decomposition() {
    for (name, text) in builtin_fixtures() {
        let f: InstanceFile = serde_json::from_str(text).unwrap();
        let inst: DiscreteInstance<Exact> = DiscreteInstance::from_file(&f).unwrap();
        let a = enumerate_decomposition(&inst);
        let b = enumerate_hypothetical(&inst, &TargetTables::observed(&inst)).unwrap();
        assert_eq!(a.as_array(), b.as_array(), "{name}");
    }
}

fn identity_instance(sizes: Vec<usize>, mu: Vec<&str>) -> DiscreteInstance<Exact> {
    let cells: usize = sizes.iter().sum();
    let share = format!("1/{cells}");
    let text = serde_json::json!({
        "name": "hand",
        "surgeons_per_hospital": sizes,
        "binary": false,
        "points": [{
            "x": [],
            "prob": "1",
            "mu": mu,
            "assign": vec![share; cells],
            "condvar": vec!["1"; cells],
        }],
    });
    let f: InstanceFile = serde_json::from_value(text).unwrap();
    DiscreteInstance::from_file(&f).unwrap()
}

#[test]
fn uniform_target_hospital_spread() {
    let inst = identity_instance(vec![1, 1], vec!["1", "-1"]);
    let h = inst.hierarchy.clone();
    let c = enumerate_hypothetical(&inst, &TargetTables::uniform(&h, 1)).unwrap();
    assert_eq!(c.omega2, Exact::one());
    assert!(c.omega3.is_zero());
}

#[test]
fn uniform_target_surgeon_spread() {
    let inst = identity_instance(vec![2, 2], vec!["1/2", "-1/2", "1/2", "-1/2"]);
    let h = inst.hierarchy.clone();
    let c = enumerate_hypothetical(&inst, &TargetTables::uniform(&h, 1)).unwrap();
    assert_eq!(c.omega3, q(1, 4));
    assert!(c.omega2.is_zero());
}

#[test]
fn invalid_instances_are_rejected() {
    let mut f = file("two_by_two");
    f.points[0].assign[0] = "0.9".into();
    assert!(DiscreteInstance::<Exact>::from_file(&f).is_err());
    let mut f = file("two_by_two");
    f.points[0].prob = "0.3".into();
    assert!(DiscreteInstance::<Exact>::from_file(&f).is_err());
}

#[test]
fn zero_target_probability_is_rejected() {
    let inst = identity_instance(vec![2], vec!["0", "1"]);
    let target = TargetTables { e: vec![vec![Exact::one()]], g: vec![vec![Exact::one(), Exact::zero()]] };
    assert!(enumerate_hypothetical(&inst, &target).is_err());
}
