//! Command-line front end. Every subcommand writes into
//! `<out>/<subcommand>/<config hash>/` and echoes its effective configuration.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{
    count_vortices, initial_coefficients, lod_basis_cached, rate_study, run_single, run_table, write_field_csv,
    write_table_csv, ExperimentConfig, Initial,
};
use crate::mesh::Hierarchy;
use crate::minimize::{csg_minimize, restart_with_perturbation, MinimizeRun};
use crate::space::{Space, SpaceKind};
use crate::spectrum::{coercivity_proxy, hessian_spectrum, Classification, SpectrumReport};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for configuration errors and bad usage.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gllod", version, about = "Ground states of the Ginzburg-Landau energy in LOD spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or load from cache) the LOD basis of the configuration.
    BuildLod(Common),
    /// Run one minimization; writes the iteration log and the final field.
    Minimize(Common),
    /// Energy table over initial values and kappa values.
    Table {
        #[command(flatten)]
        common: Common,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated kappa values (overrides `kappas`).
        #[arg(long, value_delimiter = ',')]
        kappas: Option<Vec<f64>>,
        /// Comma-separated initial value indices (overrides `initials`).
        #[arg(long, value_delimiter = ',')]
        initials: Option<Vec<usize>>,
    },
    /// Convergence study of LOD and P1 spaces against a fine P1 reference.
    RateStudy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated coarse resolutions (overrides `coarse_levels`).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// Energy distance from the reference beyond which an LOD level is excluded.
        #[arg(long, default_value_t = 0.1 * (crate::experiments::KAPPA10_LEVELS[1] - crate::experiments::KAPPA10_LEVELS[0]))]
        basin_tol: f64,
        /// Skip the P1 ladder.
        #[arg(long)]
        no_p1: bool,
    },
    /// Minimize, then inspect the smallest Hessian eigenvalues at the result.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Number of eigenpairs.
        #[arg(long, default_value_t = 4)]
        eigs: usize,
        /// Perturb-and-restart attempts when the result is a saddle.
        #[arg(long, default_value_t = 3)]
        restarts: usize,
    },
    /// Minimize and export the initial and final fields as CSV.
    Export(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    kappa: Option<f64>,
    /// Coarse subdivisions per side.
    #[arg(long)]
    coarse: Option<usize>,
    /// Fine subdivisions per side.
    #[arg(long)]
    fine: Option<usize>,
    /// Patch layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Initial value index 1..=10, or a field CSV path.
    #[arg(long)]
    initial: Option<Initial>,
    /// `lod` or `standard_p1`.
    #[arg(long)]
    space: Option<SpaceKind>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl Common {
    fn effective(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        if let Some(v) = self.coarse {
            c.coarse_n = v;
        }
        if let Some(v) = self.fine {
            c.fine_n = v;
        }
        if let Some(v) = self.layers {
            c.layers = v;
        }
        if let Some(v) = &self.initial {
            c.initial = v.clone();
        }
        if let Some(v) = self.space {
            c.space = v;
        }
        if let Some(v) = self.tol {
            c.tol = v;
        }
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        Ok(c)
    }

    fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }
}

/// Parses `argv` (including the program name), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Dimension(_) | Error::Json(_) | Error::Io { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_NUMERICAL,
    }
}

/// Validates the configuration, creates the run directory and echoes the configuration.
fn prepare(name: &str, common: &Common, config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = common.out.join(name).join(config.hash());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json = config.to_json();
    write_text(&dir.join("config.json"), &json)?;
    println!("effective config:\n{json}");
    println!("output: {}", dir.display());
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildLod(common) => build_lod(&common),
        Command::Minimize(common) => {
            let config = common.effective()?;
            let dir = prepare("minimize", &common, &config)?;
            let (space, run) = minimize_logged(&common, &config, &dir)?;
            write_field_csv(&dir.join("field.csv"), space.mesh(), &run.field)?;
            Ok(())
        }
        Command::Table {
            common,
            jobs,
            kappas,
            initials,
        } => {
            let mut config = common.effective()?;
            if kappas.is_some() {
                config.kappas = kappas;
            }
            if initials.is_some() {
                config.initials = initials;
            }
            let dir = prepare("table", &common, &config)?;
            let rows = run_table(&config, Some(&common.cache_dir()), jobs)?;
            write_table_csv(&dir.join("table.csv"), &rows)?;
            println!("initial\tkappa\tenergy\titerations\ttermination");
            for r in &rows {
                println!("phi{}\t{}\t{:.9}\t{}\t{}", r.initial, r.kappa, r.energy, r.iterations, r.termination);
            }
            Ok(())
        }
        Command::RateStudy {
            common,
            levels,
            basin_tol,
            no_p1,
        } => {
            let mut config = common.effective()?;
            if levels.is_some() {
                config.coarse_levels = levels;
            }
            let dir = prepare("rate-study", &common, &config)?;
            let study = rate_study(&config, Some(&common.cache_dir()), basin_tol, !no_p1)?;
            write_text(&dir.join("rate_study.json"), &serde_json::to_string_pretty(&study)?)?;
            println!("reference energy {:.12} ({} iterations)", study.reference_energy, study.reference_iterations);
            println!("space\tcoarse_n\tlayers\tenergy\tH1k_error\tL2_error\tenergy_gap\texcluded");
            for (name, levels) in [("lod", &study.lod), ("p1", &study.p1)] {
                for l in levels.iter() {
                    println!(
                        "{name}\t{}\t{}\t{:.12}\t{:.3e}\t{:.3e}\t{:.3e}\t{}",
                        l.coarse_n,
                        l.layers.map_or("-".to_string(), |v| v.to_string()),
                        l.energy,
                        l.h1k_error,
                        l.l2_error,
                        l.energy_gap,
                        l.excluded
                    );
                }
            }
            let s = &study.slopes;
            println!(
                "slopes: lod H1k {:.3}, lod L2 {:.3}, lod energy gap {:.3}, p1 H1k {:.3}",
                s.lod_h1k, s.lod_l2, s.lod_energy_gap, s.p1_h1k
            );
            if !study.negative_gaps.is_empty() {
                println!("warning: negative energy gaps at coarse levels {:?}; the reference is not converged", study.negative_gaps);
            }
            Ok(())
        }
        Command::Spectrum {
            common,
            eigs,
            restarts,
        } => spectrum(&common, eigs, restarts),
        Command::Export(common) => {
            let config = common.effective()?;
            let dir = prepare("export", &common, &config)?;
            let (space, run) = run_single(&config, Some(&common.cache_dir()), None)?;
            let u0 = initial_coefficients(&space, &config.initial)?;
            write_field_csv(&dir.join("initial.csv"), space.mesh(), &space.prolong(&u0))?;
            write_field_csv(&dir.join("field.csv"), space.mesh(), &run.field)?;
            println!("final energy {:.12} ({}, {} iterations)", run.final_energy, run.termination, run.iterations);
            Ok(())
        }
    }
}

fn build_lod(common: &Common) -> Result<()> {
    let config = common.effective()?;
    if config.space != SpaceKind::Lod {
        return Err(Error::Config("build-lod needs `space` = lod".into()));
    }
    let dir = prepare("build-lod", common, &config)?;
    let start = Instant::now();
    let hierarchy = std::sync::Arc::new(Hierarchy::from_sizes(config.coarse_n, config.fine_n)?);
    let basis = lod_basis_cached(hierarchy, &config.params(config.kappa)?, config.layers, Some(&common.cache_dir()))?;
    basis.write_cache(&dir.join("basis.gllod"))?;
    let summary = serde_json::json!({
        "columns": basis.num_columns(),
        "fine_vertices": basis.num_fine(),
        "nnz": basis.nnz(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "basis: {} columns, {} nonzeros, {:.1} s",
        basis.num_columns(),
        basis.nnz(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Runs the configured minimization with its log in `dir/run.log` and a summary in `dir/summary.json`.
fn minimize_logged(common: &Common, config: &ExperimentConfig, dir: &Path) -> Result<(Space, MinimizeRun)> {
    let log_path = dir.join("run.log");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "iteration\tenergy\tstep\tbeta\tgradient_norm").map_err(|e| Error::io(&log_path, e))?;
    let (space, run) = run_single(config, Some(&common.cache_dir()), Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&run)?)?;
    println!("final energy {:.12} ({}, {} iterations)", run.final_energy, run.termination, run.iterations);
    Ok((space, run))
}

fn spectrum(common: &Common, eigs: usize, restarts: usize) -> Result<()> {
    let config = common.effective()?;
    let dir = prepare("spectrum", common, &config)?;
    let (space, mut run) = minimize_logged(common, &config, &dir)?;
    let mut report = hessian_spectrum(&space, &run.coefficients, eigs)?;
    let mut attempts = 0;
    while report.classification == Classification::SaddleOrNegative && attempts < restarts {
        attempts += 1;
        let u = restart_with_perturbation(&space, &run.coefficients, &report)?;
        run = csg_minimize(&space, &u, &config.options(), None)?;
        println!(
            "restart {attempts}: energy {:.12} ({}, {} iterations)",
            run.final_energy, run.termination, run.iterations
        );
        report = hessian_spectrum(&space, &run.coefficients, eigs)?;
    }
    write_field_csv(&dir.join("field.csv"), space.mesh(), &run.field)?;
    write_text(&dir.join("spectrum.json"), &report.to_json())?;
    print_report(&report);
    if let Ok(proxy) = coercivity_proxy(&report) {
        println!("coercivity proxy {proxy:.6e}");
    }
    println!(
        "vortices (|u| < 0.2, interior): {}",
        count_vortices(space.mesh(), &run.field, 0.2)
    );
    Ok(())
}

fn print_report(r: &SpectrumReport) {
    println!("classification {:?}", r.classification);
    for (k, lambda) in r.eigenvalues.iter().enumerate() {
        println!(
            "lambda_{} = {lambda:+.6e}  alignment {:.6}  residual {:.2e}",
            k + 1,
            r.alignments[k],
            r.residuals[k]
        );
    }
    println!("gap {:.6e}, tol_zero {:.3e}", r.gap, r.tol_zero);
}
