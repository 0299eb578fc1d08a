//! Thin dispatcher: load one JSON config, run the named command, write CSV
//! artifacts plus a manifest, and translate errors into exit codes.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure,
//! 4 property violation (verify/check commands).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use mcbsde::abse::{
    apriori_estimate_check, random_lipschitz_problem, solve_anticipated, AbseOptions,
    AnticipatedProblem, EstimateOptions,
};
use mcbsde::bsde::solve_classical;
use mcbsde::chain::{path_rng, simulate_path_with_rng, RateMatrix};
use mcbsde::compare::{run_comparison, run_sweep, ComparisonInstance, SweepOutcome};
use mcbsde::config::{self, CommandKind, RunConfig};
use mcbsde::error::Error;
use mcbsde::export::{
    write_comparison_csv, write_duality_csv, write_estimate_csv, write_iterations_csv,
    write_paths_csv, write_sdde_path_csv, write_surface_csv, DualityRow, EstimateRow,
};
use mcbsde::grid::TimeGrid;
use mcbsde::sdde::{duality_estimate, simulate_sdde, DualitySetup};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_VIOLATION: u8 = 4;

pub fn run_from_path(path: &Path) -> u8 {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", path.display());
            return EXIT_VALIDATION;
        }
    };
    let text = match String::from_utf8(bytes.clone()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: config {} is not UTF-8: {e}", path.display());
            return EXIT_VALIDATION;
        }
    };
    let cfg = match config::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    match execute(&cfg, &bytes) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::NoConvergence { .. } | Error::NegativeSeminorm { .. } => {
            EXIT_NUMERICAL
        }
        Error::Io(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var("MCBSDE_OUTPUT_DIR") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output.dir),
    }
}

fn write_manifest(dir: &Path, cfg: &RunConfig, raw: &[u8]) -> std::io::Result<()> {
    let digest = Sha256::digest(raw);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    let text = format!(
        "command: {}\nconfig_sha256: {hex}\nseed: {}\nlibrary_version: {}\n",
        cfg.command.name(),
        cfg.mc.seed,
        mcbsde::VERSION
    );
    fs::write(dir.join("manifest.txt"), text)
}

/// Extend a `[0, T]` grid by `extra` so the same step covers `[0, T + extra]`.
fn extended_grid(grid: &TimeGrid, extra: f64) -> Result<TimeGrid, Error> {
    if extra == 0.0 {
        return Ok(grid.clone());
    }
    let steps = (extra / grid.step()).round();
    if steps < 1.0 || (steps * grid.step() - extra).abs() > 1e-9 * extra.max(1.0) {
        return Err(Error::Config(format!(
            "grid step {:.6e} must divide the extension {extra}",
            grid.step()
        )));
    }
    Ok(grid.extended(steps as usize))
}

fn execute(cfg: &RunConfig, raw: &[u8]) -> Result<u8, Error> {
    let a = cfg.chain.build()?;
    a.check_state(cfg.chain.initial_state)?;
    let grid = cfg.grid.build()?;
    let pi0 = cfg.chain.distribution()?;

    let dir = output_dir(cfg);
    fs::create_dir_all(&dir)?;
    // written before dispatch so failure exits still leave a manifest
    write_manifest(&dir, cfg, raw)?;

    match cfg.command {
        CommandKind::SimulateChain => simulate_chain(cfg, &a, &grid, &dir),
        CommandKind::SolveBsde => solve_bsde(cfg, &a, &grid, &dir),
        CommandKind::SolveAbse => solve_abse(cfg, &a, &grid, pi0, &dir),
        CommandKind::VerifyDuality => verify_duality(cfg, &a, &grid, pi0, &dir),
        CommandKind::CheckComparison => check_comparison(cfg, &a, &grid, &dir),
        CommandKind::CheckEstimate => check_estimate(cfg, &a, &grid, pi0, &dir),
    }
}

fn simulate_chain(
    cfg: &RunConfig,
    a: &RateMatrix,
    grid: &TimeGrid,
    dir: &Path,
) -> Result<u8, Error> {
    let mut paths = Vec::with_capacity(cfg.mc.n_paths);
    for p in 0..cfg.mc.n_paths {
        let mut rng = path_rng(cfg.mc.seed, p as u64);
        paths.push(simulate_path_with_rng(
            a,
            cfg.chain.initial_state,
            grid.t_end(),
            &mut rng,
        )?);
    }
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, &paths)?;
    fs::write(dir.join("paths.csv"), buf)?;
    Ok(EXIT_OK)
}

fn terminal_vector(cfg: &RunConfig, a: &RateMatrix, horizon: f64) -> Result<DVector<f64>, Error> {
    let terminal = cfg
        .terminal
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'terminal' block".into()))?
        .build(horizon, a.n_states())?;
    Ok(DVector::from_fn(a.n_states(), |i, _| {
        (terminal.xi)(horizon, i)
    }))
}

fn solve_bsde(cfg: &RunConfig, a: &RateMatrix, grid: &TimeGrid, dir: &Path) -> Result<u8, Error> {
    let driver_cfg = cfg
        .driver
        .as_ref()
        .ok_or_else(|| Error::Config("solve-bsde needs a 'driver' block".into()))?;
    let driver = config::build_classic_driver(driver_cfg, a)?;
    let terminal = terminal_vector(cfg, a, grid.t_end())?;
    let surface = solve_classical(&terminal, &driver, a, grid)?;
    let mut buf = Vec::new();
    write_surface_csv(&mut buf, &surface)?;
    fs::write(dir.join("surface.csv"), buf)?;
    Ok(EXIT_OK)
}

fn anticipated_problem(
    cfg: &RunConfig,
    a: &RateMatrix,
    horizon: f64,
) -> Result<AnticipatedProblem<'static>, Error> {
    let driver_cfg = cfg
        .driver
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'driver' block".into()))?;
    let delays_cfg = cfg
        .delays
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'delays' block".into()))?;
    let terminal_cfg = cfg
        .terminal
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a 'terminal' block".into()))?;
    Ok(AnticipatedProblem {
        driver: config::build_anticipated_driver(driver_cfg, a)?,
        delays: delays_cfg.build(horizon)?,
        terminal: terminal_cfg.build(horizon, a.n_states())?,
        horizon,
    })
}

fn solve_abse(
    cfg: &RunConfig,
    a: &RateMatrix,
    grid: &TimeGrid,
    pi0: Option<DVector<f64>>,
    dir: &Path,
) -> Result<u8, Error> {
    let problem = anticipated_problem(cfg, a, grid.t_end())?;
    let full = extended_grid(grid, problem.delays.k_extend)?;
    let opts = AbseOptions {
        pi0,
        ..Default::default()
    };
    let (surface, report) = solve_anticipated(&problem, a, &full, &opts)?;
    let mut buf = Vec::new();
    write_surface_csv(&mut buf, &surface)?;
    fs::write(dir.join("surface.csv"), buf)?;
    let mut buf = Vec::new();
    write_iterations_csv(&mut buf, &report)?;
    fs::write(dir.join("iterations.csv"), buf)?;
    Ok(EXIT_OK)
}

fn verify_duality(
    cfg: &RunConfig,
    a: &RateMatrix,
    grid: &TimeGrid,
    pi0: Option<DVector<f64>>,
    dir: &Path,
) -> Result<u8, Error> {
    let delays_cfg = cfg
        .delays
        .as_ref()
        .ok_or_else(|| Error::Config("verify-duality needs a 'delays' block".into()))?;
    let theta = delays_cfg
        .constant_theta()
        .ok_or_else(|| Error::Config("verify-duality needs a constant delay".into()))?;
    if (delays_cfg.k - theta).abs() > 1e-12 {
        return Err(Error::Config("verify-duality needs K = θ".into()));
    }
    let driver_cfg = cfg
        .driver
        .as_ref()
        .ok_or_else(|| Error::Config("verify-duality needs a 'driver' block".into()))?;
    let coeffs = config::build_sdde_coefficients(driver_cfg, a, theta)?;
    let steps_per_delay = (theta / grid.step()).round() as usize;
    if steps_per_delay == 0
        || (steps_per_delay as f64 * grid.step() - theta).abs() > 1e-9 * theta.max(1.0)
    {
        return Err(Error::Config(
            "grid step must divide the delay θ for verify-duality".into(),
        ));
    }

    let problem = anticipated_problem(cfg, a, grid.t_end())?;
    let full = extended_grid(grid, theta)?;
    let opts = AbseOptions {
        pi0,
        ..Default::default()
    };
    let (surface, _) = solve_anticipated(&problem, a, &full, &opts)?;

    let terminal = cfg
        .terminal
        .as_ref()
        .unwrap()
        .build(grid.t_end(), a.n_states())?;
    let mut rows = Vec::new();
    for state in 0..a.n_states() {
        let setup = DualitySetup {
            t0: 0.0,
            horizon: grid.t_end(),
            initial_state: state,
            steps_per_delay,
        };
        let est = duality_estimate(
            &coeffs,
            terminal.xi.as_ref(),
            terminal.eta.as_ref(),
            a,
            &setup,
            cfg.mc.n_paths,
            cfg.mc.seed,
        )?;
        rows.push(DualityRow {
            setting: cfg.driver.as_ref().map(|d| d.name.clone()).unwrap_or_default(),
            initial_state: state,
            solver_y: surface.u_at(0, state),
            mc_estimate: est.mean,
            std_error: est.std_error,
        });
    }
    let mut buf = Vec::new();
    write_duality_csv(&mut buf, &rows)?;
    fs::write(dir.join("duality.csv"), buf)?;

    // optional debug traces of the forward delay equation
    if cfg.mc.trace_paths > 0 {
        let h = grid.step();
        let trace_grid = TimeGrid::from_step(
            -theta,
            h,
            ((grid.t_end() + 2.0 * theta) / h).round() as usize,
        )?;
        for p in 0..cfg.mc.trace_paths.min(cfg.mc.n_paths) {
            let mut rng = path_rng(cfg.mc.seed, p as u64);
            let path = simulate_path_with_rng(
                a,
                cfg.chain.initial_state,
                grid.t_end() + theta,
                &mut rng,
            )?;
            let xhat = simulate_sdde(&path, &coeffs, a, 0.0, &trace_grid)?;
            let mut buf = Vec::new();
            write_sdde_path_csv(&mut buf, &xhat)?;
            fs::write(dir.join(format!("sdde_path_{p}.csv")), buf)?;
        }
    }

    if rows.iter().all(DualityRow::within_three_se) {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_VIOLATION)
    }
}

fn check_comparison(
    cfg: &RunConfig,
    a: &RateMatrix,
    grid: &TimeGrid,
    dir: &Path,
) -> Result<u8, Error> {
    let delays_cfg = cfg
        .delays
        .as_ref()
        .ok_or_else(|| Error::Config("check-comparison needs a 'delays' block".into()))?;
    let full = extended_grid(grid, delays_cfg.k)?;

    let rows: Vec<SweepOutcome> = if let Some(sweep) = &cfg.sweep {
        let theta = delays_cfg
            .constant_theta()
            .ok_or_else(|| Error::Config("sweep mode needs a constant delay".into()))?;
        run_sweep(
            a,
            &full,
            theta,
            grid.t_end(),
            sweep.n_instances,
            sweep.seed,
            sweep.tol,
        )?
    } else {
        let tol = 1e-8;
        let instance = ComparisonInstance {
            driver_1: config::build_anticipated_driver(
                cfg.driver
                    .as_ref()
                    .ok_or_else(|| Error::Config("needs 'driver'".into()))?,
                a,
            )?,
            driver_2: config::build_anticipated_driver(
                cfg.driver_2
                    .as_ref()
                    .ok_or_else(|| Error::Config("needs 'driver_2'".into()))?,
                a,
            )?,
            xi_1: cfg
                .terminal
                .as_ref()
                .ok_or_else(|| Error::Config("needs 'terminal'".into()))?
                .build(grid.t_end(), a.n_states())?,
            xi_2: cfg
                .terminal_2
                .as_ref()
                .ok_or_else(|| Error::Config("needs 'terminal_2'".into()))?
                .build(grid.t_end(), a.n_states())?,
            delay: delays_cfg.build(grid.t_end())?,
            horizon: grid.t_end(),
        };
        // single-instance mode: a gate rejection is a validation error
        let report = run_comparison(&instance, a, &full, tol)?;
        vec![SweepOutcome {
            instance_id: 0,
            accepted: true,
            reason: if report.ordered {
                "ordered".into()
            } else {
                "ordering violated".into()
            },
            max_violation: report.max_violation,
            location: Some(report.location),
            expected_accept: true,
        }]
    };

    let mut buf = Vec::new();
    write_comparison_csv(&mut buf, &rows)?;
    fs::write(dir.join("comparison.csv"), buf)?;
    let tol = cfg.sweep.as_ref().map(|s| s.tol).unwrap_or(1e-8);
    let violated = rows.iter().any(|r| r.accepted && r.max_violation > tol);
    Ok(if violated { EXIT_VIOLATION } else { EXIT_OK })
}

fn check_estimate(
    cfg: &RunConfig,
    a: &RateMatrix,
    grid: &TimeGrid,
    pi0: Option<DVector<f64>>,
    dir: &Path,
) -> Result<u8, Error> {
    let mut rows = Vec::new();
    let opts = EstimateOptions {
        n_paths: cfg.mc.n_paths,
        seed: cfg.mc.seed,
        pi0: pi0.clone(),
    };
    let solve_opts = AbseOptions {
        pi0,
        ..Default::default()
    };
    if let Some(sweep) = &cfg.sweep {
        let delays_cfg = cfg
            .delays
            .as_ref()
            .ok_or_else(|| Error::Config("check-estimate needs a 'delays' block".into()))?;
        let theta = delays_cfg
            .constant_theta()
            .ok_or_else(|| Error::Config("sweep mode needs a constant delay".into()))?;
        let full = extended_grid(grid, theta)?;
        for idx in 0..sweep.n_instances {
            let problem = random_lipschitz_problem(a, theta, grid.t_end(), sweep.seed + idx)?;
            let (surface, _) = solve_anticipated(&problem, a, &full, &solve_opts)?;
            let report = apriori_estimate_check(&problem, &surface, a, &opts)?;
            rows.push(EstimateRow {
                instance: idx,
                lhs: report.lhs,
                rhs: report.rhs,
                c: report.c,
                holds: report.holds,
            });
        }
    } else {
        let problem = anticipated_problem(cfg, a, grid.t_end())?;
        let full = extended_grid(grid, problem.delays.k_extend)?;
        let (surface, _) = solve_anticipated(&problem, a, &full, &solve_opts)?;
        let report = apriori_estimate_check(&problem, &surface, a, &opts)?;
        rows.push(EstimateRow {
            instance: 0,
            lhs: report.lhs,
            rhs: report.rhs,
            c: report.c,
            holds: report.holds,
        });
    }
    let mut buf = Vec::new();
    write_estimate_csv(&mut buf, &rows)?;
    fs::write(dir.join("estimate.csv"), buf)?;
    let ok = rows.iter().all(|r| r.holds);
    Ok(if ok { EXIT_OK } else { EXIT_VIOLATION })
}
