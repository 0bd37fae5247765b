//! Reproducible scenario runs with JSON summaries and CSV tables.

pub mod config;
pub mod oracles;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::banach::{BanachValue, DualFunctional, SpaceDescriptor, TimeGrid};
use crate::bins::BinEdges;
use crate::conditioning::{martingale_test, MartingaleReport};
use crate::error::{Error, Result};
use crate::girsanov::{
    check_distribution_preservation, density_estimate, density_ratio_estimate, girsanov_verify,
    observation_times, prop41_verify, scalar_example, simulate_bm, ConditionalExample,
    GirsanovReport, GirsanovSetup, PreservationReport, Prop41Config,
};
use crate::ito::{
    bi1star_convergence, change_drift, check_weak_characterization, DriftChangeConfig,
    DriftedProcess, ProbeMartingale, StochasticIntegrand,
};
use crate::report::{all_pass, Expectation, StageOutcome};
use crate::rng::derive_seed;

pub use config::{ConfigLayer, RSpec, Scenario, ScenarioConfig};

/// Observation intervals of the binned natural filtrations.
pub const OBSERVATIONS: usize = 8;
/// Quantile bins of the density tables.
pub const DENSITY_BINS: usize = 64;
pub const MIN_COUNT: usize = 50;
/// Tolerance of the exact oracle comparisons.
pub const ORACLE_TOL: f64 = 1e-12;
/// Finest-grid RMS bound of the Bi₁* convergence study.
pub const CONVERGENCE_TOL: f64 = 1e-2;
/// Tolerance of the weak characterization gap.
pub const WEAK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct Header {
    pub generated_at: String,
    pub tool: &'static str,
    pub version: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub header: Header,
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(rename = "M")]
    pub paths: usize,
    #[serde(rename = "K")]
    pub grid: usize,
    pub config: ScenarioConfig,
    pub stages: Vec<StageOutcome>,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.summary.pass {
            0
        } else {
            1
        }
    }
}

/// 2 for configuration and precondition errors, 1 otherwise.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Precondition(_) => 2,
        _ => 1,
    }
}

struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Sink {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(f))
    }

    fn martingale(&mut self, stage: &str, r: &MartingaleReport) -> Result<()> {
        r.write_csv(self.file(&format!("martingale_{stage}.csv"))?)
    }

    fn probes(&mut self, stage: &str, reports: &[ProbeMartingale]) -> Result<()> {
        for p in reports {
            self.martingale(&format!("{stage}_f{}", p.probe), &p.report)?;
        }
        Ok(())
    }

    fn rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.file(name)?);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn time_label(t: f64) -> String {
    format!("{t}")
}

/// Runs one scenario and writes `summary.json` plus its tables into
/// `config.out`.
pub fn run(config: &ScenarioConfig) -> Result<RunOutcome> {
    config.validate()?;
    let mut sink = Sink::new(&config.out)?;
    let stages = match config.scenario {
        Scenario::UnitOracles => unit_oracles(config, &mut sink)?,
        Scenario::ScalarGirsanov => scalar_girsanov(config, &mut sink)?,
        Scenario::ConditionalMeasure => conditional_measure(config, &mut sink)?,
        Scenario::Prop41 => prop41(config, &mut sink)?,
        Scenario::DriftChange => drift_change(config, &mut sink)?,
        Scenario::Bi1starConvergence => convergence(config, &mut sink)?,
    };
    let summary = Summary {
        header: Header {
            generated_at: chrono::Utc::now().to_rfc3339(),
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
        },
        scenario: config.scenario,
        seed: config.seed,
        paths: config.paths,
        grid: config.grid,
        config: config.clone(),
        pass: all_pass(&stages),
        stages,
    };
    serde_json::to_writer_pretty(sink.file("summary.json")?, &summary)?;
    Ok(RunOutcome {
        summary,
        files: sink.files,
    })
}

fn unit_oracles(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    let rows = oracles::run_oracles(cfg.seed, cfg.paths)?;
    sink.rows("oracles.csv", &rows)?;
    let mut families: Vec<&str> = Vec::new();
    for r in &rows {
        if !families.contains(&r.family) {
            families.push(r.family);
        }
    }
    Ok(families
        .into_iter()
        .map(|fam| {
            let gap = rows
                .iter()
                .filter(|r| r.family == fam)
                .fold(0.0_f64, |m, r| m.max(r.gap));
            StageOutcome::from_gap(fam, gap, ORACLE_TOL)
        })
        .collect())
}

fn girsanov_stages(rep: &GirsanovReport, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    sink.martingale("y_martingale", &rep.y_martingale)?;
    sink.martingale("product_martingale", &rep.product_martingale)?;
    sink.martingale("girsanov", &rep.main)?;
    let mut stages = vec![
        StageOutcome::from_martingale("y_martingale", Expectation::Pass, &rep.y_martingale),
        StageOutcome::from_martingale(
            "product_martingale",
            Expectation::Pass,
            &rep.product_martingale,
        ),
    ];
    if let Some(t) = rep.worst_tower() {
        sink.martingale("tower", t)?;
        let mut s = StageOutcome::from_martingale("tower", Expectation::Pass, t);
        s.test_passed = rep.tower_pass();
        s.pass = s.test_passed;
        stages.push(s);
    }
    stages.push(StageOutcome::from_martingale(
        "girsanov",
        Expectation::Pass,
        &rep.main,
    ));
    Ok(stages)
}

fn preservation_stage(r: &PreservationReport, t: f64) -> StageOutcome {
    let worst = r
        .bins
        .iter()
        .max_by(|a, b| (a.gap / a.tolerance).total_cmp(&(b.gap / b.tolerance)))
        .expect("at least one bin");
    StageOutcome::new(
        &format!("preservation_t{}", time_label(t)),
        Expectation::Pass,
        r.pass,
        r.distance,
        worst.tolerance,
        format!(
            "{} of {} bins over tolerance",
            r.bins.iter().filter(|b| !b.pass).count(),
            r.bins.len()
        ),
    )
}

fn negative_control(
    setup: &GirsanovSetup<'_>,
    filtration: &impl crate::conditioning::FiltrationSource,
    cfg: &ScenarioConfig,
    sink: &mut Sink,
) -> Result<StageOutcome> {
    let neg = martingale_test(
        |k, a| setup.z_tilde(k, a),
        setup.n(),
        filtration,
        cfg.confidence,
    )?;
    sink.martingale("negative_control", &neg)?;
    Ok(StageOutcome::from_martingale(
        "negative_control",
        Expectation::Fail,
        &neg,
    ))
}

fn scalar_girsanov(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    let grid = TimeGrid::uniform(cfg.grid, cfg.horizon)?;
    let ensemble = simulate_bm(
        cfg.paths,
        &grid,
        derive_seed(cfg.seed, "scalar-girsanov/paths"),
    )?;
    let setup = scalar_example(&ensemble, cfg.q)?;
    let last = grid.steps();
    let filtration = setup.natural_filtration(observation_times(last, OBSERVATIONS), cfg.bins)?;
    let rep = girsanov_verify(&setup, &filtration, cfg.confidence)?;
    let mut stages = girsanov_stages(&rep, sink)?;
    stages.push(negative_control(&setup, &filtration, cfg, sink)?);
    for k in [last / 2, last] {
        let pres = check_distribution_preservation(&setup, k, cfg.bins, cfg.confidence)?;
        stages.push(preservation_stage(&pres, grid.time(k)));
    }
    let w = setup.z_column(last);
    let edges = BinEdges::quantiles(&w, DENSITY_BINS)?;
    let probe = DualFunctional::default_for(setup.n().target());
    let est = density_ratio_estimate(setup.n(), &w, setup.theta(last), &edges, MIN_COUNT, &probe)?;
    est.write_csv(sink.file(&format!("density_{}.csv", time_label(grid.horizon())))?)?;
    Ok(stages)
}

fn conditional_measure(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    let grid = TimeGrid::uniform(cfg.grid, cfg.horizon)?;
    let ex = ConditionalExample::simulate(
        cfg.paths,
        cfg.slots,
        &grid,
        cfg.q,
        derive_seed(cfg.seed, "conditional-measure"),
    )?;
    let setup = ex.setup()?;
    let last = grid.steps();
    let filtration = setup.natural_filtration(observation_times(last, OBSERVATIONS), cfg.bins)?;
    let rep = girsanov_verify(&setup, &filtration, cfg.confidence)?;
    let mut stages = girsanov_stages(&rep, sink)?;
    stages.push(negative_control(&setup, &filtration, cfg, sink)?);
    let z = setup.z_column(last);
    let edges = BinEdges::quantiles(&z, cfg.bins)?;
    let est = density_estimate(setup.n(), &z, &edges)?;
    est.write_csv(sink.file(&format!("density_{}.csv", time_label(grid.horizon())))?)?;
    Ok(stages)
}

fn prop41(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    if !cfg.grid.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "prop41 compares at T/4, T/2 and T; {} steps is not a multiple of 4",
            cfg.grid
        )));
    }
    let grid = TimeGrid::uniform(cfg.grid, cfg.horizon)?;
    let ensemble = simulate_bm(cfg.paths, &grid, derive_seed(cfg.seed, "prop41/paths"))?;
    let t = cfg.horizon;
    let pc = Prop41Config {
        confidence: cfg.confidence,
        filtration_bins: cfg.bins,
        observations: OBSERVATIONS,
        compare_times: vec![t / 4.0, t / 2.0, t],
        ..Prop41Config::default()
    };
    let rep = prop41_verify(&ensemble, &pc)?;
    for (k, est) in rep.compare_indices.iter().zip(&rep.ratios) {
        est.write_csv(sink.file(&format!("density_{}.csv", time_label(grid.time(*k))))?)?;
    }
    sink.rows(
        "g_comparison.csv",
        &rep.comparisons
            .iter()
            .zip(&rep.compare_indices)
            .flat_map(|(c, &k)| {
                let t = grid.time(k);
                c.rows.iter().map(move |r| GRow {
                    t,
                    left: r.left,
                    right: r.right,
                    centroid: r.centroid,
                    estimate: r.estimate,
                    closed_form: r.closed_form,
                    rel_err: r.rel_err,
                })
            })
            .collect::<Vec<_>>(),
    )?;
    sink.martingale("y_martingale", &rep.girsanov.y_martingale)?;
    sink.martingale("product_martingale", &rep.girsanov.product_martingale)?;
    sink.martingale("girsanov", &rep.girsanov.main)?;
    sink.martingale("negative_control", &rep.negative_control)?;
    Ok(rep.stages)
}

#[derive(Serialize)]
struct GRow {
    t: f64,
    left: f64,
    right: f64,
    centroid: f64,
    estimate: f64,
    closed_form: f64,
    rel_err: f64,
}

/// `Φ(t) = (1 + t) x₀` in `ℝ²` with `x₀ = (1, −1/2)`, drift `Ψ = rΦ`.
pub fn drift_example(r: RSpec) -> Result<DriftedProcess> {
    let x0 = BanachValue::vector(vec![1.0, -0.5])?;
    let c = x0.coords().to_vec();
    let phi = StochasticIntegrand::scaled(x0, |t| 1.0 + t, |_| 1.0);
    let psi: crate::ito::PathFn = Box::new(move |t| {
        let s = r.eval(t).unwrap_or(1.0) * (1.0 + t);
        c.iter().map(|x| s * x).collect()
    });
    let r: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>> = match r {
        RSpec::None => None,
        spec => Some(Box::new(move |t| {
            spec.eval(t).expect("factorization declared")
        })),
    };
    Ok(DriftedProcess { psi, phi, r })
}

fn drift_change(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    let process = drift_example(cfg.r_spec)?;
    let grid = TimeGrid::uniform(cfg.grid, cfg.horizon)?;
    // the factorization is a precondition; check it before simulating
    process.factorization_residual(&grid)?;
    let ensemble = simulate_bm(
        cfg.paths,
        &grid,
        derive_seed(cfg.seed, "drift-change/paths"),
    )?;
    let dc = DriftChangeConfig {
        confidence: cfg.confidence,
        observations: OBSERVATIONS,
        bins: cfg.bins,
        probes: None,
    };
    let rep = change_drift(&process, &ensemble, &dc)?;
    sink.martingale("y_martingale", &rep.y_martingale)?;
    sink.probes("c_under_q", &rep.c_under_q)?;
    if let Some(neg) = &rep.c_under_p {
        sink.probes("negative_control", neg)?;
    }
    Ok(rep.stages)
}

fn convergence(cfg: &ScenarioConfig, sink: &mut Sink) -> Result<Vec<StageOutcome>> {
    if !cfg.grid.is_multiple_of(16) {
        return Err(Error::InvalidArgument(format!(
            "the convergence study uses K/16, K/4 and K; {} steps is not a multiple of 16",
            cfg.grid
        )));
    }
    let spec = cfg.r_spec;
    if spec == RSpec::None {
        return Err(Error::InvalidArgument(
            "the convergence study needs an integrand r".into(),
        ));
    }
    let grid = TimeGrid::uniform(cfg.grid, cfg.horizon)?;
    let ensemble = simulate_bm(
        cfg.paths,
        &grid,
        derive_seed(cfg.seed, "bi1star-convergence/paths"),
    )?;
    let steps = [cfg.grid / 16, cfg.grid / 4, cfg.grid];
    let rows = bi1star_convergence(
        &ensemble,
        &steps,
        move |t| spec.eval(t).expect("r declared"),
        move |t| spec.derivative(t).expect("r declared"),
    )?;
    sink.rows("convergence.csv", &rows)?;
    let finite = rows.iter().all(|r| r.rms.is_finite());
    let decreasing = rows.windows(2).all(|w| w[1].rms < w[0].rms);
    let finest = rows.last().expect("three grids").rms;

    let x0 = BanachValue::vector(vec![1.0, -0.5])?;
    let probes = DualFunctional::norming_family(&SpaceDescriptor::finite_dim(2)?);
    let vector = StochasticIntegrand::scaled(
        x0,
        move |t| spec.eval(t).expect("r declared"),
        move |t| spec.derivative(t).expect("r declared"),
    )
    .sample(&grid)?;
    let weak = check_weak_characterization(&vector, &ensemble, &probes)?;

    Ok(vec![
        StageOutcome::new(
            "rms_decreasing",
            Expectation::Pass,
            finite && decreasing,
            rows[0].rms,
            0.0,
            rows.iter()
                .map(|r| format!("K={}: {:.3e}", r.steps, r.rms))
                .collect::<Vec<_>>()
                .join(", "),
        ),
        StageOutcome::from_gap("rms_finest", finest, CONVERGENCE_TOL),
        StageOutcome::from_gap("weak_characterization", weak, WEAK_TOL),
    ])
}
