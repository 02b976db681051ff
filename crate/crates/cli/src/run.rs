//! Experiment drivers: each kind produces named output files and a status.

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use hystereact_core::field::{init_field, Grid};
use hystereact_core::pde::{heat_kernel_bound_check, solve, sup_difference, RunStatus, Trajectory};
use hystereact_core::relay::{verify_branch_condition, Branch, BranchPair, Config, CutoffSide};
use hystereact_core::slowfast::{
    compare_to_hysteresis, solve_slowfast, verify_lemma_a1, write_branch_csv, NullclineModel,
    SlowFastTrajectory,
};
use hystereact_core::transverse::{
    check_lemma_b_estimate, solve_tracked, TrackGeometry, LEMMA_B_SLACK,
};

use crate::config::{
    BranchChoice, BranchSpec, ConfigError, ExperimentConfig, Kind, SourceSpec, SweepAxis,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] hystereact_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

/// Result of one experiment before it is written to disk.
#[derive(Debug)]
pub struct Outcome {
    pub status: RunStatus,
    /// Output files in manifest order.
    pub files: Vec<(String, Vec<u8>)>,
    /// Extra `key value` manifest lines.
    pub summary: Vec<(String, String)>,
}

impl Outcome {
    fn new(status: RunStatus) -> Self {
        Self {
            status,
            files: Vec::new(),
            summary: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }
}

/// Process exit code for a run status.
pub fn exit_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Completed => 0,
        RunStatus::TransversalityLost => 2,
        RunStatus::DomainViolation => 3,
    }
}

/// Shortest round-trip decimal; empty for missing values.
fn num(x: Option<f64>) -> String {
    x.map(|x| format!("{x}")).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| io_err("csv")(e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err("csv")(e.into()))?;
    }
    w.into_inner().map_err(|e| io_err("csv")(e.into_error()))
}

fn render(
    f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    name: &str,
) -> Result<Vec<u8>, RunError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(io_err(name))?;
    Ok(buf)
}

/// Branches used by the hysteresis solver: the configured `H` composed with the source.
fn solver_branches(cfg: &ExperimentConfig, branches: &BranchPair) -> BranchPair {
    match cfg.problem.source.clone() {
        SourceSpec::V => branches.clone(),
        src => branches.reduce_general_rhs(move |u, v| src.eval(u, v)),
    }
}

/// Hysteresis run on `grid`. Tracks the free boundary when `problem.abar` is set and
/// the unperturbed data form a prototype.
fn hysteresis_run(
    cfg: &ExperimentConfig,
    grid: Grid,
    branches: &BranchPair,
    perturbation: f64,
) -> Result<Trajectory, RunError> {
    let params = cfg.params_on(grid);
    let xi = cfg.xi0(&grid);
    let phi = cfg.phi_with(&grid, branches, perturbation)?;
    let geometry = match cfg.problem.abar {
        Some(a) => {
            TrackGeometry::from_prototype(&cfg.phi_base(&grid, branches)?, &xi, a, &grid, branches)
                .ok()
        }
        None => None,
    };
    Ok(match geometry {
        Some(g) => solve_tracked(&phi, &xi, branches, &params, g)?,
        None => solve(&phi, &xi, branches, &params, &mut [])?,
    })
}

fn slowfast_run(
    cfg: &ExperimentConfig,
    model: &NullclineModel,
    branches: &BranchPair,
    epsilon: f64,
) -> Result<SlowFastTrajectory, RunError> {
    let grid = cfg.grid();
    let params = cfg.params_on(grid);
    let xi = cfg.xi0(&grid);
    let phi = cfg.phi_with(&grid, branches, cfg.problem.perturbation)?;
    let v0 = init_field(&phi, &xi, branches)?.v;
    let src = cfg.problem.source.clone();
    Ok(solve_slowfast(
        &phi,
        &v0,
        model,
        move |u, v| src.eval(u, v),
        epsilon,
        &params,
    )?)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, RunError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))
}

/// Run the experiment `kind` described by `cfg` with `jobs` worker threads.
pub fn execute(kind: Kind, cfg: &ExperimentConfig, jobs: usize) -> Result<Outcome, RunError> {
    cfg.validate(kind)?;
    match kind {
        Kind::Simulate => simulate(cfg),
        Kind::Slowfast => slowfast(cfg),
        Kind::VerifyBranch => verify_branch(cfg),
        Kind::Sweep => pool(jobs)?.install(|| sweep(cfg)),
        Kind::Compare => pool(jobs)?.install(|| compare(cfg)),
        Kind::KernelCheck => kernel_check(cfg),
    }
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let branches = solver_branches(cfg, &cfg.branches()?);
    let traj = hysteresis_run(cfg, cfg.grid(), &branches, cfg.problem.perturbation)?;
    let mut out = Outcome::new(traj.status);
    out.note("switch_count", traj.switch_count);
    out.note("tracking", traj.track.is_some());
    out.files.push((
        "traj.csv".into(),
        render(|w| traj.write_csv(w), "traj.csv")?,
    ));
    if let Some(track) = &traj.track {
        out.note("abar", track.geometry.abar);
        out.note("phibar", track.geometry.phibar);
        out.note("delta", track.geometry.delta);
        if let Some(b) = track.b_values.last() {
            out.note("b_end", b);
        }
        if let Some(r) = &track.lost_reason {
            out.note("lost_reason", r.replace(char::is_whitespace, "_"));
        }
        out.files.push((
            "track.csv".into(),
            render(|w| track.write_csv(w), "track.csv")?,
        ));
    }
    Ok(out)
}

fn fold_notes(out: &mut Outcome, model: &NullclineModel) {
    if let Some(f) = model.folds() {
        out.note("fold_alpha", f.alpha);
        out.note("fold_beta", f.beta);
        out.note("fold_order", f.order);
    }
}

fn branch_tables(out: &mut Outcome, branches: &BranchPair) -> Result<(), RunError> {
    for (name, b) in [
        ("h1.csv", branches.branch(Config::One)),
        ("h2.csv", branches.branch(Config::Two)),
    ] {
        if matches!(b, Branch::Table(_)) {
            out.files
                .push((name.into(), render(|w| write_branch_csv(b, w), name)?));
        }
    }
    Ok(())
}

fn slowfast(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let model = cfg.model()?;
    let branches = cfg.branches()?;
    let eps = cfg.problem.epsilon.expect("validated");
    let traj = slowfast_run(cfg, &model, &branches, eps)?;
    let mut out = Outcome::new(traj.status);
    out.note("epsilon", eps);
    fold_notes(&mut out, &model);
    out.files.push((
        "traj.csv".into(),
        render(|w| traj.write_csv(w), "traj.csv")?,
    ));
    branch_tables(&mut out, &branches)?;
    Ok(out)
}

fn verify_branch(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let branches = cfg.branches()?;
    let spec = cfg.verify.clone().unwrap_or_default();
    let sigma = spec.sigma.unwrap_or(branches.sigma());
    let mut out = Outcome::new(RunStatus::Completed);
    let mut levels = Vec::new();
    let mut summary = Vec::new();
    let chosen: &[(&str, CutoffSide)] = match spec.branch {
        BranchChoice::H1 => &[("h1", CutoffSide::UpperCutoffBeta)],
        BranchChoice::H2 => &[("h2", CutoffSide::LowerCutoffAlpha)],
        BranchChoice::Both => &[
            ("h1", CutoffSide::UpperCutoffBeta),
            ("h2", CutoffSide::LowerCutoffAlpha),
        ],
    };
    for &(name, side) in chosen {
        let report = match side {
            CutoffSide::UpperCutoffBeta => verify_branch_condition(
                |u| branches.h1(u),
                branches.beta(),
                side,
                sigma,
                spec.u_bound,
                spec.samples,
            )?,
            CutoffSide::LowerCutoffAlpha => verify_branch_condition(
                |u| branches.h2(u),
                branches.alpha(),
                side,
                sigma,
                spec.u_bound,
                spec.samples,
            )?,
        };
        for (k, m) in report.history.iter().enumerate() {
            levels.push(vec![name.to_string(), k.to_string(), num(Some(*m))]);
        }
        out.note(&format!("{name}_m_estimate"), report.m_estimate);
        out.note(&format!("{name}_violated"), report.violated);
        summary.push(vec![
            name.to_string(),
            num(Some(sigma)),
            num(Some(report.m_estimate)),
            report.violated.to_string(),
            num(Some(report.max_ratio_location.0)),
            num(Some(report.max_ratio_location.1)),
        ]);
    }
    out.files.push((
        "verify.csv".into(),
        csv_bytes(
            &["branch", "sigma", "m_estimate", "violated", "u", "w"],
            &summary,
        )?,
    ));
    out.files.push((
        "verify_levels.csv".into(),
        csv_bytes(&["branch", "level", "m_estimate"], &levels)?,
    ));
    if matches!(cfg.problem.branches, BranchSpec::Nullcline { .. }) {
        let model = cfg.model()?;
        let lemma = verify_lemma_a1(&branches, &model, None, spec.samples)?;
        fold_notes(&mut out, &model);
        out.note("fold_estimate_m", lemma.m_estimate);
        out.note("fold_estimate_holds", lemma.holds);
        branch_tables(&mut out, &branches)?;
    }
    Ok(out)
}

/// One row of `sweep.csv`.
#[derive(Debug, Default)]
struct SweepRow {
    value: f64,
    status: String,
    b_end: Option<f64>,
    sup_dev_u: Option<f64>,
    sup_dev_v: Option<f64>,
    max_switch_offset: Option<f64>,
    lemma_lhs: Option<f64>,
    lemma_rhs: Option<f64>,
    lemma_holds: Option<bool>,
    sup_diff_prev: Option<f64>,
    b_diff_prev: Option<f64>,
}

const SWEEP_HEADER: [&str; 12] = [
    "axis",
    "value",
    "status",
    "b_end",
    "sup_dev_u",
    "sup_dev_v",
    "max_switch_offset",
    "lemma_lhs",
    "lemma_rhs",
    "lemma_holds",
    "sup_diff_prev",
    "b_diff_prev",
];

fn end_b(traj: &Trajectory) -> Option<f64> {
    traj.track.as_ref().and_then(|t| t.b_values.last().copied())
}

/// Worst status in row order: the first row that did not complete.
fn aggregate(statuses: impl IntoIterator<Item = RunStatus>) -> RunStatus {
    statuses
        .into_iter()
        .find(|s| *s != RunStatus::Completed)
        .unwrap_or(RunStatus::Completed)
}

fn sweep(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let spec = cfg.sweep.as_ref().expect("validated");
    let branches = solver_branches(cfg, &cfg.branches()?);
    let mut statuses = Vec::new();
    let rows: Vec<SweepRow> = match spec.axis {
        SweepAxis::Perturbation => {
            let grid = cfg.grid();
            let (reference, runs) = rayon::join(
                || hysteresis_run(cfg, grid, &branches, 0.0),
                || {
                    spec.values
                        .par_iter()
                        .map(|&p| hysteresis_run(cfg, grid, &branches, p))
                        .collect::<Result<Vec<_>, _>>()
                },
            );
            let (reference, runs) = (reference?, runs?);
            statuses.push(reference.status);
            let mut rows = Vec::new();
            for (&p, traj) in spec.values.iter().zip(&runs) {
                statuses.push(traj.status);
                let lemma = check_lemma_b_estimate(&reference, traj, LEMMA_B_SLACK).ok();
                rows.push(SweepRow {
                    value: p,
                    status: traj.status.as_str().into(),
                    b_end: end_b(traj),
                    lemma_lhs: lemma.as_ref().map(|l| l.lhs),
                    lemma_rhs: lemma.as_ref().map(|l| l.rhs),
                    lemma_holds: lemma.as_ref().map(|l| l.holds),
                    ..Default::default()
                });
            }
            rows
        }
        SweepAxis::Grid => {
            let runs = spec
                .values
                .par_iter()
                .map(|&n| {
                    let grid = Grid::new(n as usize)?;
                    hysteresis_run(cfg, grid, &branches, cfg.problem.perturbation)
                })
                .collect::<Result<Vec<_>, RunError>>()?;
            let mut rows = Vec::new();
            for (k, traj) in runs.iter().enumerate() {
                statuses.push(traj.status);
                let prev = k.checked_sub(1).map(|j| &runs[j]);
                rows.push(SweepRow {
                    value: spec.values[k],
                    status: traj.status.as_str().into(),
                    b_end: end_b(traj),
                    sup_diff_prev: prev.and_then(|p| sup_difference(p, traj).ok()),
                    b_diff_prev: prev.and_then(|p| Some((end_b(traj)? - end_b(p)?).abs())),
                    ..Default::default()
                });
            }
            rows
        }
        SweepAxis::Epsilon => {
            let model = cfg.model()?;
            let h_branches = cfg.branches()?;
            let (hyst, slow) = rayon::join(
                || hysteresis_run(cfg, cfg.grid(), &branches, cfg.problem.perturbation),
                || {
                    spec.values
                        .par_iter()
                        .map(|&e| slowfast_run(cfg, &model, &h_branches, e))
                        .collect::<Result<Vec<_>, _>>()
                },
            );
            let (hyst, slow) = (hyst?, slow?);
            statuses.push(hyst.status);
            let tube = cfg.compare.tube_cells * hyst.params.grid.h();
            let mut rows = Vec::new();
            for (&e, s) in spec.values.iter().zip(&slow) {
                statuses.push(s.status);
                let c =
                    compare_to_hysteresis(s, &hyst, &branches, cfg.compare.burn_in, Some(tube))?;
                rows.push(SweepRow {
                    value: e,
                    status: s.status.as_str().into(),
                    sup_dev_u: Some(c.sup_dev_u),
                    sup_dev_v: Some(c.sup_dev_v),
                    max_switch_offset: Some(c.max_switch_offset),
                    ..Default::default()
                });
            }
            rows
        }
    };
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                spec.axis.as_str().to_string(),
                num(Some(r.value)),
                r.status.clone(),
                num(r.b_end),
                num(r.sup_dev_u),
                num(r.sup_dev_v),
                num(r.max_switch_offset),
                num(r.lemma_lhs),
                num(r.lemma_rhs),
                r.lemma_holds.map(|b| b.to_string()).unwrap_or_default(),
                num(r.sup_diff_prev),
                num(r.b_diff_prev),
            ]
        })
        .collect();
    let mut out = Outcome::new(aggregate(statuses));
    out.note("axis", spec.axis.as_str());
    out.note("rows", rows.len());
    out.files
        .push(("sweep.csv".into(), csv_bytes(&SWEEP_HEADER, &table)?));
    Ok(out)
}

fn compare(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let model = cfg.model()?;
    let h_branches = cfg.branches()?;
    let branches = solver_branches(cfg, &h_branches);
    let eps = cfg.problem.epsilon.expect("validated");
    let (hyst, slow) = rayon::join(
        || hysteresis_run(cfg, cfg.grid(), &branches, cfg.problem.perturbation),
        || slowfast_run(cfg, &model, &h_branches, eps),
    );
    let (hyst, slow) = (hyst?, slow?);
    let tube = cfg.compare.tube_cells * hyst.params.grid.h();
    let c = compare_to_hysteresis(&slow, &hyst, &branches, cfg.compare.burn_in, Some(tube))?;
    let mut out = Outcome::new(aggregate([hyst.status, slow.status]));
    out.note("epsilon", eps);
    fold_notes(&mut out, &model);
    out.note("sup_dev_u", c.sup_dev_u);
    out.note("sup_dev_v", c.sup_dev_v);
    out.note("max_switch_offset", c.max_switch_offset);
    out.note("compared_times", c.compared_times);
    out.files.push((
        "compare.csv".into(),
        csv_bytes(
            &[
                "epsilon",
                "sup_dev_u",
                "sup_dev_v",
                "max_switch_offset",
                "compared_times",
            ],
            &[vec![
                num(Some(eps)),
                num(Some(c.sup_dev_u)),
                num(Some(c.sup_dev_v)),
                num(Some(c.max_switch_offset)),
                c.compared_times.to_string(),
            ]],
        )?,
    ));
    let grid = hyst.params.grid;
    let offsets: Vec<Vec<String>> = c
        .switch_time_offsets
        .iter()
        .enumerate()
        .map(|(i, o)| vec![num(Some(grid.x(i))), num(*o)])
        .collect();
    out.files.push((
        "switch_offsets.csv".into(),
        csv_bytes(&["x", "offset"], &offsets)?,
    ));
    out.files.push((
        "traj.csv".into(),
        render(|w| hyst.write_csv(w), "traj.csv")?,
    ));
    out.files.push((
        "traj_slowfast.csv".into(),
        render(|w| slow.write_csv(w), "traj_slowfast.csv")?,
    ));
    Ok(out)
}

/// Default sampling times: ten log-spaced points in `[1e-3, 1e-2]`, clipped to `t_end`.
fn default_kernel_times(t_end: f64) -> Vec<f64> {
    let hi = t_end.min(1e-2);
    let lo = 1e-3_f64.min(hi);
    if lo == hi {
        return vec![hi];
    }
    (0..10)
        .map(|k| lo * (hi / lo).powf(k as f64 / 9.0))
        .collect()
}

fn kernel_check(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let grid = cfg.grid();
    let params = cfg.params_on(grid);
    let spec = cfg.kernel.clone();
    let times = spec
        .as_ref()
        .and_then(|k| k.times.clone())
        .unwrap_or_else(|| default_kernel_times(params.t_end));
    let sources: Vec<usize> = spec
        .as_ref()
        .and_then(|k| k.sources.clone())
        .unwrap_or_else(|| vec![0.5])
        .iter()
        .map(|&x| grid.nearest(x))
        .collect();
    let report = heat_kernel_bound_check(&params, &sources, &times)?;
    let mut out = Outcome::new(RunStatus::Completed);
    out.note("bound_constant", report.bound_constant);
    out.note("bounded", report.bounded);
    let rows: Vec<Vec<String>> = report
        .times
        .iter()
        .zip(&report.sup_values)
        .zip(&report.scaled)
        .map(|((t, s), c)| vec![num(Some(*t)), num(Some(*s)), num(Some(*c))])
        .collect();
    out.files.push((
        "kernel.csv".into(),
        csv_bytes(&["t", "sup_u", "scaled"], &rows)?,
    ));
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Manifest text: config hash, library version, status, summary and file hashes.
pub fn manifest(
    kind: Kind,
    cfg: &ExperimentConfig,
    config_bytes: &[u8],
    outcome: &Outcome,
) -> String {
    let mut m = String::new();
    let mut line = |k: &str, v: &str| {
        m.push_str(k);
        m.push(' ');
        m.push_str(v);
        m.push('\n');
    };
    line("config_sha256", &sha256_hex(config_bytes));
    line("library_version", hystereact_core::VERSION);
    line("kind", kind.as_str());
    line("seed", &cfg.seed.to_string());
    line("status", outcome.status.as_str());
    for (k, v) in &outcome.summary {
        line(k, v);
    }
    for (name, bytes) in &outcome.files {
        line("file", &format!("{name} {}", sha256_hex(bytes)));
    }
    m
}

/// Write the outputs and `manifest.txt` into `dir`.
pub fn write_outputs(
    dir: &Path,
    kind: Kind,
    cfg: &ExperimentConfig,
    config_bytes: &[u8],
    outcome: &Outcome,
) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    for (name, bytes) in &outcome.files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(p.display().to_string()))?;
    }
    let p = dir.join("manifest.txt");
    std::fs::write(&p, manifest(kind, cfg, config_bytes, outcome))
        .map_err(io_err(p.display().to_string()))
}
