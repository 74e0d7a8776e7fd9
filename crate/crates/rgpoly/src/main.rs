//! Command-line driver: decomposition export, flow runs, critical-point
//! search, and the self-check harnesses.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rgpoly::covariance::{hierarchical_frd, validate_frd};
use rgpoly::error::{Result, RgError};
use rgpoly::fieldalg::{FieldConfig, Poly, Sector, Term};
use rgpoly::flow::{find_critical_nu, run_flow, thread_cap, FlowConfig, FlowTrajectory};
use rgpoly::geometry::{Polymer, TorusLattice};
use rgpoly::localisation::{anchored_coords, build_family, loc};
use rgpoly::potential::{series_from, LocalPotential};
use rgpoly::rgmap::{
    grand_identity_profile, random_config, random_symmetric_activity, rg_step, RGState, RgContext,
};
#[derive(Parser)]
#[command(name = "rgpoly", version, about = "Hierarchical RG flow driver")]
struct Cli {
    /// TOML flow configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for emitted files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the mode: "perturbative" or "full-graded".
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Print a machine-readable summary to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the hierarchical covariance decomposition and validate it.
    Frd {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long = "L")]
        l: Option<u32>,
        #[arg(long = "N")]
        n_scales: Option<u32>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        mass: Option<f64>,
    },
    /// Run the coupling flow; writes trajectory.csv and events.jsonl.
    Flow,
    /// Bisect for the critical quadratic coupling; independent quartic
    /// values run in parallel up to RGPOLY_THREADS.
    Critical {
        /// Comma-separated quartic couplings; defaults to g0 from the config.
        #[arg(long, value_delimiter = ',')]
        g_list: Option<Vec<f64>>,
    },
    /// One full step on the reference torus, checked against the exact
    /// integration identity grade by grade.
    VerifyStep,
    /// Property checks for the localisation operator on random inputs.
    LocTest {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Flow run plus a summary with the terminal integral when available.
    Report,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    check: String,
    location: String,
    residual: f64,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| RgError::Serde(e.to_string()))
}

/// Write the failure manifest and report whether the run is clean.
fn finish_checks(dir: &Path, failures: &[ManifestEntry]) -> Result<bool> {
    if failures.is_empty() {
        return Ok(true);
    }
    write_file(dir, "manifest.json", &to_pretty(&failures)?)?;
    for f in failures {
        eprintln!(
            "check failed: {} at {} (residual {:.3e})",
            f.check, f.location, f.residual
        );
    }
    Ok(false)
}

fn load_config(cli: &Cli) -> Result<FlowConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| RgError::Config("--config is required for this subcommand".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| RgError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = FlowConfig::from_toml_str(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse()?;
    }
    Ok(cfg)
}

fn optional_config(cli: &Cli) -> Result<Option<FlowConfig>> {
    if cli.config.is_some() {
        load_config(cli).map(Some)
    } else {
        Ok(None)
    }
}

fn write_trajectory(dir: &Path, t: &FlowTrajectory) -> Result<()> {
    write_file(dir, "trajectory.csv", &t.to_csv())?;
    let mut events = t.events.join("\n");
    if !events.is_empty() {
        events.push('\n');
    }
    write_file(dir, "events.jsonl", &events)?;
    Ok(())
}

fn cmd_frd(
    cli: &Cli,
    d: Option<usize>,
    l: Option<u32>,
    n_scales: Option<u32>,
    eta: Option<f64>,
    mass: Option<f64>,
) -> Result<bool> {
    let base = optional_config(cli)?;
    let d = d.or(base.as_ref().map(|c| c.d)).unwrap_or(3);
    let l = l.or(base.as_ref().map(|c| c.l)).unwrap_or(2);
    let n = n_scales.or(base.as_ref().map(|c| c.n_scales)).unwrap_or(3);
    let eta = eta.or(base.as_ref().map(|c| c.eta)).unwrap_or(0.0);
    let mass = mass.or(base.as_ref().map(|c| c.mass)).unwrap_or(0.0);
    let torus = TorusLattice::new(d, l, n)?;
    let decomp = hierarchical_frd(&torus, eta, mass);
    let total = decomp.total()?;
    let report = validate_frd(&decomp, &total)?;
    write_file(&cli.out, "frd.json", &to_pretty(&decomp.to_json())?)?;
    write_file(&cli.out, "frd_validation.json", &to_pretty(&report)?)?;
    if cli.json {
        println!("{}", to_pretty(&report)?);
    }
    let mut failures = Vec::new();
    if report.reconstruction_residual > 1e-10 {
        failures.push(ManifestEntry {
            check: "frd-reconstruction".into(),
            location: format!("d={d} L={l} N={n}"),
            residual: report.reconstruction_residual,
        });
    }
    if report.range_violations > 0 {
        failures.push(ManifestEntry {
            check: "frd-range".into(),
            location: format!("d={d} L={l} N={n}"),
            residual: report.range_violations as f64,
        });
    }
    finish_checks(&cli.out, &failures)
}

#[derive(Debug, Serialize)]
struct FlowSummary {
    warnings: Vec<String>,
    scales: usize,
    final_nu: f64,
    final_g: f64,
    final_u: f64,
    terminal_integral: Option<f64>,
}

fn flow_summary(cfg: &FlowConfig, t: &FlowTrajectory, with_integral: bool) -> Result<FlowSummary> {
    let last = t.rows.last();
    let mut terminal_integral = None;
    if with_integral {
        if let Some(term) = &t.terminal {
            let torus = TorusLattice::new(cfg.d, cfg.l, cfg.n_scales)?;
            let ctx = RgContext::new(&torus, cfg.n, cfg.eta, cfg.m, None);
            let u_density = last.map(|r| r.u).unwrap_or(0.0);
            terminal_integral = Some(rgpoly::flow::final_integral(
                &ctx,
                cfg,
                &term.i_blocks,
                &term.state.k,
                u_density,
            )?);
        }
    }
    Ok(FlowSummary {
        warnings: t.warnings.clone(),
        scales: t.rows.len().saturating_sub(1),
        final_nu: last.map(|r| r.nu).unwrap_or(0.0),
        final_g: last.map(|r| r.g).unwrap_or(0.0),
        final_u: last.map(|r| r.u).unwrap_or(0.0),
        terminal_integral,
    })
}

fn cmd_flow(cli: &Cli, with_summary: bool) -> Result<bool> {
    let cfg = load_config(cli)?;
    let t = run_flow(&cfg)?;
    write_trajectory(&cli.out, &t)?;
    let summary = flow_summary(&cfg, &t, with_summary)?;
    if with_summary {
        write_file(&cli.out, "summary.json", &to_pretty(&summary)?)?;
    }
    if cli.json {
        println!("{}", to_pretty(&summary)?);
    }
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

#[derive(Debug, Serialize)]
struct CriticalRun {
    g: f64,
    nu_c: f64,
    bracket: (f64, f64),
    iterations: u32,
}

fn cmd_critical(cli: &Cli, g_list: Option<Vec<f64>>) -> Result<bool> {
    let cfg = load_config(cli)?;
    let gs = g_list.unwrap_or_else(|| vec![cfg.g0]);
    let cap = thread_cap().max(1);
    let mut runs: Vec<CriticalRun> = Vec::with_capacity(gs.len());
    for chunk in gs.chunks(cap) {
        let results: Vec<Result<CriticalRun>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&g| {
                    let mut c = cfg.clone();
                    c.g0 = g;
                    s.spawn(move || {
                        let r = find_critical_nu(&c)?;
                        Ok(CriticalRun {
                            g,
                            nu_c: r.nu_c,
                            bracket: r.bracket,
                            iterations: r.iterations,
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    write_file(&cli.out, "critical.json", &to_pretty(&runs)?)?;
    if cli.json {
        println!("{}", to_pretty(&runs)?);
    }
    Ok(true)
}

#[derive(Debug, Serialize)]
struct GradeResidual {
    sector: String,
    grade: u8,
    residual: f64,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    dropped_mass: f64,
    worst_residual: f64,
    residuals: Vec<GradeResidual>,
}

fn cmd_verify_step(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(11);
    let torus = TorusLattice::new(3, 2, 1)?;
    let obs = rgpoly::localisation::ObsPoints { o: 0, x: 7 };
    let mut ctx = RgContext::new(&torus, 1, 0.0, 3, Some(obs));
    ctx.x_max = 8;
    let decomp = hierarchical_frd(&torus, 0.0, 0.25);
    let mut v = LocalPotential::bulk(&ctx.basis, 3, 0.125, 0.25);
    v.lam_o[0] = series_from(3, 1, 0.125);
    v.lam_x[0] = series_from(3, 1, 0.125);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supports = vec![
        Polymer::single(0, 0),
        Polymer::from_blocks(0, [5, 7]),
        Polymer::from_blocks(0, [1, 2, 3]),
    ];
    let k = random_symmetric_activity(&mut rng, &ctx, 0, &supports, 1);
    let mut state = RGState::initial(&ctx, v);
    state.k = k;
    let out = rg_step(&ctx, &decomp, &state)?;
    let phis: Vec<FieldConfig> = (0..20).map(|_| random_config(&mut rng, &torus, 1)).collect();
    let profile = grand_identity_profile(&ctx, &decomp, &state, &out, &phis)?;
    let residuals: Vec<GradeResidual> = profile
        .iter()
        .map(|(&(sector, grade), &residual)| GradeResidual {
            sector: format!("{sector:?}"),
            grade,
            residual,
        })
        .collect();
    let worst = residuals.iter().fold(0.0f64, |a, r| a.max(r.residual));
    let report = VerifyReport {
        dropped_mass: out.diagnostics.dropped_mass,
        worst_residual: worst,
        residuals,
    };
    write_file(&cli.out, "verify_step.json", &to_pretty(&report)?)?;
    if cli.json {
        println!("{}", to_pretty(&report)?);
    }
    let mut failures = Vec::new();
    for r in &report.residuals {
        if r.residual > 1e-8 {
            failures.push(ManifestEntry {
                check: "step-identity".into(),
                location: format!("sector {} grade {}", r.sector, r.grade),
                residual: r.residual,
            });
        }
    }
    if report.dropped_mass != 0.0 {
        failures.push(ManifestEntry {
            check: "step-support-cap".into(),
            location: "scale 0".into(),
            residual: report.dropped_mass,
        });
    }
    finish_checks(&cli.out, &failures)
}

#[derive(Debug, Serialize)]
struct LocReport {
    trials: usize,
    max_idempotence_defect: f64,
    max_complement_leak: f64,
    quartic_annihilated: f64,
}

fn cmd_loc_test(cli: &Cli, trials: usize) -> Result<bool> {
    let seed = cli.seed.unwrap_or(5);
    let torus = TorusLattice::new(3, 2, 2)?;
    let coords = anchored_coords(&torus, 0);
    let caps = rgpoly::fieldalg::Caps::standard(3);
    let block: Vec<usize> = torus.block_sites(1, 0);
    let family = build_family(&torus, &coords, caps, 1, 0.5, 2.0, &block)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idem = 0.0f64;
    let mut leak = 0.0f64;
    for _ in 0..trials {
        let f = rgpoly::fieldalg::random_poly(&mut rng, &torus, caps, 1, 6, 3);
        let lf = loc(&torus, &coords, &family, &f, &block)?;
        let llf = loc(&torus, &coords, &family, &lf, &block)?;
        idem = idem.max(llf.max_coef_diff(&lf));
        let lr = loc(&torus, &coords, &family, &f.sub(&lf), &block)?;
        leak = leak.max(lr.max_abs_coef());
    }
    // phi^4 sits above the bulk dimension cutoff, so Loc must kill it
    let mut quartic = Poly::zero(caps);
    quartic.add_term(
        Term {
            factors: vec![rgpoly::fieldalg::Factor::phi(0, 0); 4],
            sector: Sector::Bulk,
            grade: 0,
        },
        1.0,
    );
    let lq = loc(&torus, &coords, &family, &quartic, &block)?;
    let report = LocReport {
        trials,
        max_idempotence_defect: idem,
        max_complement_leak: leak,
        quartic_annihilated: lq.max_abs_coef(),
    };
    write_file(&cli.out, "loc_test.json", &to_pretty(&report)?)?;
    if cli.json {
        println!("{}", to_pretty(&report)?);
    }
    let mut failures = Vec::new();
    let mut check = |name: &str, residual: f64| {
        if residual > 1e-9 {
            failures.push(ManifestEntry {
                check: name.into(),
                location: "d=3 reference block".into(),
                residual,
            });
        }
    };
    check("loc-idempotence", report.max_idempotence_defect);
    check("loc-complement", report.max_complement_leak);
    check("loc-quartic", report.quartic_annihilated);
    finish_checks(&cli.out, &failures)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Frd {
            d,
            l,
            n_scales,
            eta,
            mass,
        } => cmd_frd(cli, *d, *l, *n_scales, *eta, *mass),
        Cmd::Flow => cmd_flow(cli, false),
        Cmd::Report => cmd_flow(cli, true),
        Cmd::Critical { g_list } => cmd_critical(cli, g_list.clone()),
        Cmd::VerifyStep => cmd_verify_step(cli),
        Cmd::LocTest { trials } => cmd_loc_test(cli, *trials),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RgError::Config(_) | RgError::InvalidLattice(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
