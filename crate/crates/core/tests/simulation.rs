use vardecomp::data::{load_dataset, write_dataset, ColumnSchema};
use vardecomp::simulation::{
    draw_mechanism, generate_population, run_replications, true_components, Estimator, ReplicationConfig, SimConfig,
};
use vardecomp::uncertainty::mean_sd;
use vardecomp::OutcomeKind;

fn zero_effects(kind: OutcomeKind) -> SimConfig {
    SimConfig { effect_sd_hospital: 0.0, effect_sd_surgeon: 0.0, outcome_kind: kind, ..Default::default() }
}

#[test]
fn population_moments_match_the_design() {
    let cfg = SimConfig { n: 100_000, ..zero_effects(OutcomeKind::Continuous) };
    let (d, _) = generate_population(&cfg).unwrap();
    let x1: Vec<f64> = d.records().iter().map(|r| r.x[0]).collect();
    let x2: Vec<f64> = d.records().iter().map(|r| r.x[1]).collect();
    let (m1, s1) = mean_sd(&x1);
    let (m2, _) = mean_sd(&x2);
    assert!(m1.abs() < 0.02 && (s1 - 1.0).abs() < 0.02);
    assert!((m2 - 0.5).abs() < 0.01);
    // Latent variance: 1 + 4/4 + π²/3.
    let (my, sy) = mean_sd(&d.outcomes());
    assert!((my - 1.0).abs() < 0.03, "{my}");
    assert!((sy * sy - 5.29).abs() < 0.1, "{}", sy * sy);
}

#[test]
fn same_seed_same_population() {
    let cfg = SimConfig { n: 500, ..Default::default() };
    let (a, ga) = generate_population(&cfg).unwrap();
    let (b, gb) = generate_population(&cfg).unwrap();
    assert_eq!(a.records(), b.records());
    assert_eq!(ga.alpha, gb.alpha);
    let (c, _) = generate_population(&SimConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.records(), c.records());
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(generate_population(&SimConfig { q: 3, m: 5, ..Default::default() }).is_err());
    assert!(generate_population(&SimConfig { effect_sd_hospital: -1.0, ..Default::default() }).is_err());
}

#[test]
fn flat_binary_design_is_pure_residual() {
    let cfg = SimConfig { beta: [0.0, 0.0], ..zero_effects(OutcomeKind::Binary) };
    let gen = draw_mechanism(&cfg, 0).unwrap();
    let t = true_components(&gen, 20_000, 1).unwrap();
    assert_eq!(t.omega[..3], [0.0, 0.0, 0.0]);
    assert!((t.omega[3] - 0.25).abs() < 1e-15);
}

#[test]
fn zero_effects_leave_no_cluster_terms() {
    for kind in [OutcomeKind::Binary, OutcomeKind::Continuous] {
        let gen = draw_mechanism(&zero_effects(kind), 0).unwrap();
        let t = true_components(&gen, 20_000, 1).unwrap();
        assert!(t.omega[1].abs() < 1e-12 && t.omega[2].abs() < 1e-12, "{:?}", t.omega);
        assert!(t.omega[0] > 0.0);
    }
}

#[test]
fn truth_total_matches_large_population_variance() {
    let cfg = SimConfig { n: 200_000, outcome_kind: OutcomeKind::Continuous, ..Default::default() };
    let (d, gen) = generate_population(&cfg).unwrap();
    let t = true_components(&gen, 200_000, 3).unwrap();
    let (_, sd) = mean_sd(&d.outcomes());
    assert!((t.total() - sd * sd).abs() / t.total() < 0.02, "{} vs {}", t.total(), sd * sd);
}

#[test]
fn monte_carlo_error_halves_with_four_times_the_draws() {
    let gen = draw_mechanism(&SimConfig::default(), 0).unwrap();
    let a = true_components(&gen, 20_000, 5).unwrap();
    let b = true_components(&gen, 80_000, 5).unwrap();
    for j in 0..4 {
        if a.se[j] > 0.0 {
            let ratio = a.se[j] / b.se[j];
            assert!(ratio > 1.7 && ratio < 2.3, "component {j}: {ratio}");
        }
    }
}

fn small_run(replications: usize) -> ReplicationConfig {
    let mut cfg = ReplicationConfig::new(SimConfig { n: 600, m: 3, q: 9, ..Default::default() }, replications);
    cfg.n_mc = 5000;
    cfg
}

#[test]
fn three_way_residual_is_four_way_surgeon_plus_residual() {
    let res = run_replications(&small_run(4)).unwrap();
    let four = res.estimators.iter().position(|e| *e == Estimator::FourWay).unwrap();
    let three = res.estimators.iter().position(|e| *e == Estimator::ThreeWay).unwrap();
    for r in &res.replicates {
        let (f, t) = (r.components[four], r.components[three]);
        assert!((f[0] - t[0]).abs() < 1e-8 && (f[1] - t[1]).abs() < 1e-8);
        assert!((f[2] + f[3] - t[3]).abs() < 1e-8);
    }
}

#[test]
fn replications_do_not_depend_on_thread_count() {
    let cfg = small_run(5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_replications(&cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.replicates, b.replicates);
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn summary_reports_every_component() {
    let res = run_replications(&small_run(3)).unwrap();
    // Three-way has no separate surgeon component.
    assert_eq!(res.summary.components.len(), 4 + 3 + 4);
    assert_eq!(res.replicates.len() + res.failures, 3);
    assert!(res.to_csv().lines().count() > 1);
}

#[test]
fn dataset_survives_a_csv_round_trip() {
    let (d, _) = generate_population(&SimConfig { n: 300, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_dataset(&d, &path).unwrap();
    let back = load_dataset(&path, &ColumnSchema::default()).unwrap();
    assert_eq!(back.records(), d.records());
    assert_eq!(back.hierarchy(), d.hierarchy());
    assert_eq!(back.outcome_kind(), OutcomeKind::Binary);
}

#[test]
fn plug_in_estimator_with_true_parameters_is_unbiased() {
    // No fitting: the decomposition evaluated at the generating parameters,
    // averaged over populations, should recover the Monte Carlo truth.
    use vardecomp::decomposition::decompose_model_based;
    use vardecomp::simulation::draw_population;
    use vardecomp::ResidualMode;
    let cfg = SimConfig { n: 5000, ..Default::default() };
    let gen = draw_mechanism(&cfg, 0).unwrap();
    let theta = gen.as_outcome_params();
    let truth = true_components(&gen, 200_000, cfg.seed).unwrap();
    let reps = 200;
    let draws: Vec<[f64; 4]> = (0..reps)
        .map(|r| {
            let d = draw_population(&cfg, &gen, r).unwrap();
            decompose_model_based(&d, &theta, &gen.assignment, ResidualMode::ModelBased).unwrap().as_array()
        })
        .collect();
    for j in 0..4 {
        let (mean, sd) = mean_sd(&draws.iter().map(|w| w[j]).collect::<Vec<_>>());
        let half = 1.96 * (sd * sd / reps as f64 + truth.se[j] * truth.se[j]).sqrt();
        assert!((mean - truth.omega[j]).abs() <= half, "component {j}: {mean} vs {} ± {half}", truth.omega[j]);
    }
}
