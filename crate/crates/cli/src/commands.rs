//! The three subcommands.

use std::path::Path;

use fbp_core::convex_integration::{default_schedule, PipelineError};
use fbp_core::denoise::{denoise, DenoiseError, DenoiseParams};
use fbp_core::pde::{evolve, gradient_max_profile};
use fbp_core::verification::verify;
use fbp_core::{run_pipeline, PipelineConfig, StageReport, VerificationReport, WindowParams};

use crate::config::{build_flux, ExperimentConfig};
use crate::io::{num, read_pgm, snapshot_levels, write_pgm, write_snapshots, CsvOut};
use crate::CliError;

fn ensure_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}

pub fn solve(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let flux = build_flux(cfg)?;
    let grid = cfg.grid()?;
    let u0 = cfg.datum(&grid)?;
    let ev = evolve(flux.sigma(), &u0, &grid)?;
    ensure_dir(out)?;
    let u = &ev.u;
    write_snapshots(&out.join("u.csv"), u, &snapshot_levels(grid.nt, cfg.snapshots))?;

    let gm = gradient_max_profile(u);
    let mut w = CsvOut::create(&out.join("gradient_max.csv"), &["level", "t", "grad_max"])?;
    for (k, g) in gm.iter().enumerate() {
        w.row([k.to_string(), num(grid.time(k)), num(*g)])?;
    }
    w.finish()?;

    let m0 = grid.mass(&u0);
    let mut w = CsvOut::create(&out.join("mass.csv"), &["level", "t", "mass", "drift"])?;
    let mut drift: f64 = 0.0;
    for (k, s) in u.slices.iter().enumerate() {
        let m = grid.mass(s);
        drift = drift.max((m - m0).abs());
        w.row([k.to_string(), num(grid.time(k)), num(m), num(m - m0)])?;
    }
    w.finish()?;
    println!(
        "solve: {} cells, {} steps, {} Picard iterations, mass drift {drift:.3e}",
        grid.cells(),
        grid.nt,
        ev.picard_iterations
    );
    Ok(())
}

const STAGE_HEADER: [&str; 23] = [
    "stage",
    "eps",
    "rho",
    "tau",
    "boxes",
    "patched_fraction",
    "residual",
    "dist_c",
    "s_measure",
    "l_measure",
    "omega2_measure",
    "sup_delta_u",
    "l1_delta_du",
    "max_ut",
    "m",
    "mass_drift",
    "minmax_violation",
    "omega1_exact",
    "div_defect",
    "membership_fraction",
    "oscillation_exceeded",
    "skipped_rho",
    "rejected",
];

fn stage_row(s: &StageReport) -> Vec<String> {
    vec![
        s.stage.to_string(),
        num(s.eps),
        num(s.rho),
        num(s.tau),
        s.boxes.to_string(),
        num(s.patched_fraction),
        num(s.residual),
        num(s.dist_c),
        num(s.s_measure),
        num(s.l_measure),
        num(s.omega2_measure),
        num(s.sup_delta_u),
        num(s.l1_delta_du),
        num(s.max_ut),
        num(s.m),
        num(s.mass_drift),
        num(s.minmax_violation),
        s.omega1_exact.to_string(),
        num(s.div_defect),
        num(s.membership_fraction),
        s.oscillation_exceeded.to_string(),
        s.skipped_rho.to_string(),
        s.rejected.to_string(),
    ]
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Precondition(m) => CliError::Config(m),
        other => CliError::Numeric(other.to_string()),
    }
}

pub fn pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let prof = cfg
        .build_profile()?
        .ok_or_else(|| CliError::Config("[profile] the pipeline needs a non-monotone profile".into()))?;
    let mp = cfg.build_modified(&prof)?;
    let (r1, r2) = (mp.r1, mp.r2);
    let w = WindowParams::new(&prof, r1, r2).map_err(|e| CliError::Config(format!("[window] {e}")))?;
    let grid = cfg.grid()?;
    let u0 = cfg.datum(&grid)?;
    let schedule = default_schedule(cfg.eps0, cfg.rho0, cfg.stages);
    let pc = PipelineConfig {
        seed: cfg.seed,
        ..PipelineConfig::default()
    };
    let run = run_pipeline(&mp, &u0, &grid, &w, cfg.rbar, cfg.rbar3, &schedule, &pc).map_err(pipeline_error)?;
    ensure_dir(out)?;

    let mut csv = CsvOut::create(&out.join("stages.csv"), &STAGE_HEADER)?;
    for s in &run.stages {
        csv.row(stage_row(s))?;
    }
    csv.finish()?;

    let u = run.state.u_full();
    write_snapshots(&out.join("u.csv"), &u, &snapshot_levels(grid.nt, cfg.snapshots))?;

    let report = verify(&u, &u0, &prof, Some((&run.state.u_star, &run.state.thresholds)));
    let mut csv = CsvOut::create(&out.join("verification.csv"), &VerificationReport::CSV_HEADER.split(',').collect::<Vec<_>>())?;
    csv.row(report.csv_row().split(','))?;
    csv.finish()?;

    for s in &run.stages {
        println!(
            "stage {}: residual {:.4e}, |S| {:.4e}, |L| {:.4e}, boxes {}",
            s.stage, s.residual, s.s_measure, s.l_measure, s.boxes
        );
    }
    for n in run.notes.iter().chain(&report.notes) {
        eprintln!("note: {n}");
    }
    match run.failure {
        Some(e) => Err(CliError::Numeric(format!("stopped early: {e}"))),
        None => Ok(()),
    }
}

pub fn denoise_image(input: &Path, output: &Path, params: &DenoiseParams) -> Result<(), CliError> {
    let (pixels, width, height) = read_pgm(input)?;
    let out = denoise(&pixels, width, height, params).map_err(|e| match e {
        DenoiseError::Pde(p) => CliError::Numeric(p.to_string()),
        DenoiseError::Shape { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    write_pgm(output, &out, width, height)
}
