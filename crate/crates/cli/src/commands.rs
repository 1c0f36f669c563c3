use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vardecomp::assignment::{fit_joint_multinomial, fit_nested_multinomial, AssignmentFitOptions, AssignmentParams};
use vardecomp::data::{empirical_variance, load_dataset, positivity_report, write_dataset};
use vardecomp::decomposition::{
    decompose_hypothetical, decompose_model_based, decompose_semiparametric, decompose_three_way, icc_summary,
    ComponentsReport,
};
use vardecomp::oracle::{builtin_fixtures, check_fixture, FixtureCheck, InstanceFile};
use vardecomp::outcome::{fit_outcome_model, marginal_models_from, OutcomeFitOptions};
use vardecomp::simulation::{
    generate_population, run_replications, true_components, Estimator, ReplicationConfig, ReplicationResult,
};
use vardecomp::uncertainty::{
    component_posterior, mean_sd, quantile_sorted, BootstrapOptions, ComponentIntervals, PosteriorOptions,
};
use vardecomp::{json, AssignmentStructure, Error, ResidualMode, TargetAssignment};

use crate::config::{DecomposeConfig, MethodChoice, OracleConfig, ReplicateConfig, ResidualChoice, SimulateConfig, TargetChoice};
use crate::svg::{bar_chart, density_chart, Bar, BarGroup};

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write(dir, name, &json::to_string(value)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

#[derive(Serialize)]
struct TruthFile {
    omega1: f64,
    omega2: f64,
    omega3: f64,
    omega4: f64,
    total: f64,
    se: [f64; 4],
    n_mc: usize,
}

pub fn simulate(cfg: &SimulateConfig, out: &Path) -> Result<()> {
    let sim = cfg.sim();
    sim.validate()?;
    create_dir(out)?;
    let (d, gen) = generate_population(&sim)?;
    let path = out.join("dataset.csv");
    write_dataset(&d, &path)?;
    log::info!("wrote {}", path.display());
    write_json(out, "generating.json", &gen.to_document())?;
    if cfg.n_mc > 0 {
        let t = true_components(&gen, cfg.n_mc, sim.seed)?;
        let [omega1, omega2, omega3, omega4] = t.omega;
        let file = TruthFile { omega1, omega2, omega3, omega4, total: t.total(), se: t.se, n_mc: t.n_mc };
        write_json(out, "truth.json", &file)?;
    }
    write_json(out, "config.json", cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct Block {
    name: MethodChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<TargetChoice>,
    #[serde(flatten)]
    report: ComponentsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    intervals: Option<ComponentIntervals>,
}

#[derive(Serialize)]
struct DecomposeOutput {
    n: usize,
    hospitals: usize,
    surgeons: usize,
    outcome_kind: vardecomp::OutcomeKind,
    empirical_variance: f64,
    blocks: Vec<Block>,
    /// Identity link only.
    #[serde(skip_serializing_if = "Option::is_none")]
    icc: Option<f64>,
    outcome_warnings: Vec<String>,
    positivity_flagged_cells: usize,
}

fn fit_assignment(d: &vardecomp::DataSet, cfg: &DecomposeConfig) -> Result<AssignmentParams> {
    let opts = AssignmentFitOptions { ridge: cfg.ridge, ..Default::default() };
    Ok(match cfg.assignment {
        AssignmentStructure::Joint => fit_joint_multinomial(d, &opts)?,
        AssignmentStructure::Nested => fit_nested_multinomial(d, &opts)?,
    })
}

pub fn decompose(cfg: &DecomposeConfig, out: &Path) -> Result<()> {
    if cfg.data.is_empty() {
        return Err(Error::Config("no dataset given (--data or `data` in the config file)".into()).into());
    }
    if cfg.methods.is_empty() {
        return Err(Error::Config("no decomposition method selected".into()).into());
    }
    let d = load_dataset(&cfg.data, &cfg.columns)?;
    create_dir(out)?;
    let positivity = positivity_report(&d);
    let flagged = positivity.flagged().count();
    if flagged > 0 {
        log::warn!("{flagged} cells flagged in the positivity report");
    }
    write(out, "positivity.csv", &positivity.to_csv())?;

    let ofit = OutcomeFitOptions { reml: cfg.reml, ..Default::default() };
    let theta = fit_outcome_model(&d, &ofit)?;
    for w in &theta.fit_meta.warnings {
        log::warn!("outcome model: {w}");
    }
    let needs_eta = cfg.bootstrap > 0
        || cfg.methods.iter().any(|m| match m {
            MethodChoice::Model | MethodChoice::Threeway => true,
            MethodChoice::Hypothetical => cfg.target == TargetChoice::Observed,
            MethodChoice::Semi => false,
        });
    let eta = if needs_eta { Some(fit_assignment(&d, cfg)?) } else { None };
    let residual = match cfg.residual {
        ResidualChoice::ModelBased => ResidualMode::ModelBased,
        ResidualChoice::BySubtraction => ResidualMode::BySubtraction,
    };

    let mut methods = cfg.methods.clone();
    let mut seen = Vec::new();
    methods.retain(|m| if seen.contains(m) { false } else { seen.push(*m); true });
    let mut blocks = Vec::new();
    for method in methods {
        let (components, target) = match method {
            MethodChoice::Model => (decompose_model_based(&d, &theta, eta.as_ref().unwrap(), residual)?, None),
            MethodChoice::Threeway => (decompose_three_way(&d, &theta, eta.as_ref().unwrap(), residual)?, None),
            MethodChoice::Semi => {
                let mm = marginal_models_from(&d, theta.clone(), &ofit)?;
                (decompose_semiparametric(&d, &mm)?, None)
            }
            MethodChoice::Hypothetical => {
                let target = match cfg.target {
                    TargetChoice::Uniform => TargetAssignment::uniform(d.hierarchy()),
                    TargetChoice::VolumePreserving => TargetAssignment::volume_preserving(&d)?,
                    TargetChoice::Observed => TargetAssignment::observed(eta.as_ref().unwrap()),
                };
                (decompose_hypothetical(&d, &theta, &target)?, Some(cfg.target))
            }
        };
        blocks.push(Block { name: method, target, report: components.report(), intervals: None });
    }

    if cfg.bootstrap > 0 {
        let opts = PosteriorOptions {
            draws: cfg.bootstrap,
            level: cfg.level,
            bootstrap: BootstrapOptions { redraw_effects: cfg.redraw_effects, fit: ofit.clone() },
        };
        let (draws, intervals) = component_posterior(&d, &theta, eta.as_ref().unwrap(), cfg.seed, &opts)?;
        write(out, "draws.csv", &draws.to_csv())?;
        write_json(out, "intervals.json", &intervals)?;
        if let Some(b) = blocks.iter_mut().find(|b| b.name == MethodChoice::Model && residual == ResidualMode::ModelBased) {
            b.intervals = Some(intervals);
        }
    }

    let output = DecomposeOutput {
        n: d.len(),
        hospitals: d.hierarchy().hospitals(),
        surgeons: d.hierarchy().cells(),
        outcome_kind: d.outcome_kind(),
        empirical_variance: empirical_variance(&d)?,
        blocks,
        icc: icc_summary(&theta).ok(),
        outcome_warnings: theta.fit_meta.warnings.clone(),
        positivity_flagged_cells: flagged,
    };
    write_json(out, "components.json", &output)?;
    let table = components_table(&output.blocks);
    write(out, "components.txt", &table)?;
    print!("{table}");
    write_json(out, "outcome_model.json", &theta.to_document())?;
    if let Some(eta) = &eta {
        write_json(out, "assignment_model.json", &eta.to_document())?;
    }
    write_json(out, "config.json", cfg)?;
    Ok(())
}

fn method_name(m: MethodChoice) -> &'static str {
    match m {
        MethodChoice::Model => "model",
        MethodChoice::Semi => "semi",
        MethodChoice::Threeway => "threeway",
        MethodChoice::Hypothetical => "hypothetical",
    }
}

/// Fixed-width text table: one row per decomposition, then one row of shares.
fn components_table(blocks: &[Block]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14}{:<16}{:>14}{:>14}{:>14}{:>14}{:>14}",
        "method", "quantity", "omega1", "omega2", "omega3", "omega4", "total"
    );
    let cell = |v: Option<f64>| match v {
        Some(v) => format!("{v:>14.6e}"),
        None => format!("{:>14}", "-"),
    };
    for b in blocks {
        let r = &b.report;
        let _ = writeln!(
            out,
            "{:<14}{:<16}{}{}{}{}{}",
            method_name(b.name),
            "variance",
            cell(Some(r.omega1)),
            cell(Some(r.omega2)),
            cell(r.omega3),
            cell(Some(r.omega4)),
            cell(Some(r.total))
        );
        let s = &r.shares;
        let _ = writeln!(
            out,
            "{:<14}{:<16}{}{}{}{}{}",
            "",
            "share",
            cell(Some(s.omega1)),
            cell(Some(s.omega2)),
            cell(s.omega3),
            cell(Some(s.omega4)),
            cell(Some(1.0))
        );
        if let Some(iv) = &b.intervals {
            let _ = writeln!(
                out,
                "{:<14}{:<16}{}{}{}{}{:>14}",
                "",
                format!("lower {:.0}%", iv.level * 100.0),
                cell(Some(iv.omega1.lower)),
                cell(Some(iv.omega2.lower)),
                cell(Some(iv.omega3.lower)),
                cell(Some(iv.omega4.lower)),
                "-"
            );
            let _ = writeln!(
                out,
                "{:<14}{:<16}{}{}{}{}{:>14}",
                "",
                format!("upper {:.0}%", iv.level * 100.0),
                cell(Some(iv.omega1.upper)),
                cell(Some(iv.omega2.upper)),
                cell(Some(iv.omega3.upper)),
                cell(Some(iv.omega4.upper)),
                "-"
            );
        }
    }
    out
}

const GREEK: [&str; 4] = ["ω₁ case-mix", "ω₂ hospital", "ω₃ surgeon", "ω₄ residual"];

fn series_bar(est: Estimator, values: &[f64]) -> Bar {
    let (mean, sd) = mean_sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = 1.96 * sd / (values.len() as f64).sqrt();
    Bar {
        series: est.label().to_string(),
        mean,
        quantiles: [quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975)],
        mean_ci: [mean - half, mean + half],
    }
}

/// Groups ω₁ to ω₄ plus a combined ω₃+ω₄ group where the three-way
/// residual sits next to the four-way sum.
pub fn bar_groups(res: &ReplicationResult) -> Vec<BarGroup> {
    let truth = &res.summary.truth.omega;
    let mut groups: Vec<BarGroup> = (0..4)
        .map(|j| BarGroup { label: GREEK[j].to_string(), bars: Vec::new(), truth: Some(truth[j]) })
        .collect();
    let mut combined = BarGroup { label: "ω₃+ω₄ / residual".into(), bars: Vec::new(), truth: Some(truth[2] + truth[3]) };
    for &est in &res.estimators {
        for j in 0..4 {
            if est == Estimator::ThreeWay && (j == 2 || j == 3) {
                continue;
            }
            groups[j].bars.push(series_bar(est, &res.series(est, j)));
        }
        let sum: Vec<f64> = if est == Estimator::ThreeWay {
            res.series(est, 3)
        } else {
            res.series(est, 2).iter().zip(res.series(est, 3)).map(|(a, b)| a + b).collect()
        };
        combined.bars.push(series_bar(est, &sum));
    }
    groups.push(combined);
    groups
}

pub fn replicate(cfg: &ReplicateConfig, out: &Path) -> Result<()> {
    if cfg.scenarios.is_empty() || cfg.estimators.is_empty() {
        return Err(Error::Config("need at least one scenario and one estimator".into()).into());
    }
    if cfg.replications < 2 {
        return Err(Error::Config("need at least 2 replications".into()).into());
    }
    for sc in &cfg.scenarios {
        cfg.sim(sc).validate()?;
    }
    create_dir(out)?;
    for sc in &cfg.scenarios {
        let label = sc.label();
        log::info!("scenario {label}: {} replications", cfg.replications);
        let rc = ReplicationConfig {
            estimators: cfg.estimators.clone(),
            mechanism: cfg.mechanism,
            n_mc: cfg.n_mc,
            assignment_structure: cfg.assignment,
            ..ReplicationConfig::new(cfg.sim(sc), cfg.replications)
        };
        let res = run_replications(&rc).with_context(|| format!("scenario {label}"))?;
        write(out, &format!("replicates_{label}.csv"), &res.to_csv())?;
        write_json(out, &format!("summary_{label}.json"), &res.summary)?;
        let title = format!("n = {}, m = {}, q = {} ({} replications)", sc.n, sc.m, sc.q, res.replicates.len());
        write(out, &format!("bars_{label}.svg"), &bar_chart(&title, &bar_groups(&res)))?;
        let shown = if res.estimators.contains(&Estimator::FourWay) { Estimator::FourWay } else { res.estimators[0] };
        let series: Vec<(String, Vec<f64>, Option<f64>)> = (0..3)
            .filter(|&j| !(shown == Estimator::ThreeWay && j == 2))
            .map(|j| (format!("{} ({})", GREEK[j], shown.label()), res.series(shown, j), Some(res.summary.truth.omega[j])))
            .collect();
        write(out, &format!("density_{label}.svg"), &density_chart(&title, &series))?;
    }
    write_json(out, "config.json", cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    tolerance: f64,
    passed: bool,
    fixtures: Vec<OracleRow>,
}

#[derive(Serialize)]
struct OracleRow {
    #[serde(flatten)]
    check: FixtureCheck,
    passed: bool,
}

fn load_instances(dir: &str) -> Result<Vec<InstanceFile>> {
    if dir.is_empty() {
        return builtin_fixtures()
            .into_iter()
            .map(|(name, text)| serde_json::from_str(text).map_err(Error::from).with_context(|| format!("fixture {name}")))
            .collect();
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::from)
        .with_context(|| format!("reading fixture directory {dir}"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("fixture {}", p.display()))
        })
        .collect()
}

/// Returns whether every fixture matched within the tolerance.
pub fn oracle_check(cfg: &OracleConfig, out: &Path) -> Result<bool> {
    let instances = load_instances(&cfg.fixtures)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for inst in &instances {
        let check = check_fixture(inst)?;
        let passed = check.exact_match && check.max_abs_diff <= cfg.tolerance;
        println!(
            "{:<32} {}  max|diff| = {:.3e}  additivity = {:.3e}",
            check.name,
            if passed { "ok  " } else { "FAIL" },
            check.max_abs_diff,
            check.additivity_error
        );
        rows.push(OracleRow { check, passed });
    }
    let passed = rows.iter().all(|r| r.passed);
    write_json(out, "oracle.json", &OracleReport { tolerance: cfg.tolerance, passed, fixtures: rows })?;
    write_json(out, "config.json", cfg)?;
    Ok(passed)
}
