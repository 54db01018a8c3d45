//! `ccdfse`: command-line driver for the finite-size error laboratory.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or input error,
//! 3 solver failure, 4 memory budget rejection.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use ccdfse::amplitudes::{ccd_solve, energy, CcdContext};
use ccdfse::lattice::{MonkhorstPackMesh, MeshScheme};
use ccdfse::meanfield::ModelSystem;
use ccdfse::quadrature::{measure_rate, synthetic_integrand, IntegralClass, ReferenceRule};
use ccdfse::study::{self, FracCoord, StudyConfig, ARTIFACT_VERSION};
use ccdfse::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ccdfse", version, about = "Finite-size error laboratory for periodic MP2/MP3/CCD(n)")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON study configuration (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = all cores (overrides CCDFSE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Memory budget in GiB (overrides CCDFSE_BUDGET_GIB).
    #[arg(long, global = true)]
    budget_gib: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Fig2,
}

#[derive(Subcommand)]
enum Command {
    /// Band energies at chosen k-points and the direct gap on a probe mesh.
    Meanfield {
        /// k-point in fractional coordinates, e.g. "0,0,1/2"; repeatable.
        #[arg(long = "k")]
        kpoints: Vec<String>,
        /// Probe mesh size m for the direct gap.
        #[arg(long, default_value_t = 8)]
        probe: usize,
    },
    /// Evaluate every configured quantity on every mesh, then fit and report.
    Sweep {
        /// Print the cost plan without computing.
        #[arg(long)]
        dry_run: bool,
        /// Keep records already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Quadrature error rate of a synthetic singular integrand.
    Quadlab {
        /// Integral class 1..5.
        #[arg(long)]
        class: u8,
        /// Dimension of each block (1..3).
        #[arg(long, default_value_t = 3)]
        d: usize,
        /// Singularity orders, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gamma: Vec<f64>,
        /// Mesh sizes m, comma separated (at least 4).
        #[arg(long, value_delimiter = ',')]
        meshes: Option<Vec<usize>>,
        /// Reference meshes for extrapolation, comma separated (3 values).
        #[arg(long, value_delimiter = ',')]
        reference: Option<Vec<usize>>,
        /// Sign in the shifted factor f3(x1, x2 ± x1) for class 5.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        sign: i64,
    },
    /// Refit and report from records already in the output directory.
    Fit,
    /// CCD(n) iteration history and energy on a small mesh.
    Ccd {
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json(_) | Error::Invalid(_) | Error::Dimension { .. } | Error::Momentum(_)) => 2,
        Some(Error::NotConverged { .. } | Error::NonFinite(_)) => 3,
        Some(Error::Budget { .. }) => 4,
        Some(Error::Io(_) | Error::Csv(_)) => 1,
        None if e.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>, Error> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{name}={v} is not a valid value"))),
        Err(_) => Ok(None),
    }
}

/// File (or preset) < environment < flags.
fn load_config(c: &Common) -> Result<StudyConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => StudyConfig::load(p)?,
        None => match c.preset {
            Preset::Default => StudyConfig::default(),
            Preset::Fig2 => study::fig2_config(),
        },
    };
    if let Some(t) = env_override("CCDFSE_THREADS")? {
        cfg.threads = t;
    }
    if let Some(b) = env_override("CCDFSE_BUDGET_GIB")? {
        cfg.budget_gib = b;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(b) = c.budget_gib {
        cfg.budget_gib = b;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_k(s: &str) -> Result<ccdfse::lattice::KPoint, Error> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("k-point '{s}' needs three coordinates")));
    }
    let mut c = Vec::new();
    for p in parts {
        let text = if p.parse::<f64>().is_ok() && p.contains('.') { p.to_string() } else { format!("\"{p}\"") };
        let f: FracCoord = serde_json::from_str(&text).map_err(|e| Error::Config(format!("k-point '{s}': {e}")))?;
        c.push(f.0);
    }
    Ok(ccdfse::lattice::KPoint::new([c[0], c[1], c[2]]))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    let meta = json!({ "version": ARTIFACT_VERSION, "config_hash": cfg.hash() });
    match cli.command {
        Command::Meanfield { kpoints, probe } => {
            let ks = kpoints.iter().map(|s| parse_k(s)).collect::<Result<Vec<_>, _>>()?;
            let sys = ModelSystem::new(cfg.system.clone())?;
            let mut bands = Vec::new();
            pool(cfg.threads)?.install(|| -> anyhow::Result<()> {
                for k in &ks {
                    let b = sys.solve_at_k(k)?;
                    println!("k = {k}: {:?}", b.energies);
                    bands.push(json!({ "k": k.to_string(), "energies": b.energies }));
                }
                Ok(())
            })?;
            let mesh = MonkhorstPackMesh::new(sys.cell(), probe, MeshScheme::GammaCentered)?;
            let gap = pool(cfg.threads)?.install(|| sys.solve_mesh(&mesh).and_then(|_| sys.direct_gap(&mesh)))?;
            println!("direct gap on {probe}^3 probe mesh: {gap:.6}");
            let path = write_json(&cfg.out, "meanfield.json", &json!({ "meta": meta, "bands": bands, "probe": probe, "direct_gap": gap }))?;
            eprintln!("wrote {}", path.display());
        }
        Command::Sweep { dry_run, resume } => {
            let plan = study::plan(&cfg)?;
            if dry_run {
                println!("{:<26} {:>4} {:>8} {:>14} {:>12}", "quantity", "m", "N_k", "cost", "memory");
                for p in &plan {
                    println!("{:<26} {:>4} {:>8} {:>14.3e} {:>12}", p.selector.to_string(), p.m, p.n_k, p.cost, p.memory_bytes);
                }
                println!("{} points, total cost {:.3e}", plan.len(), plan.iter().map(|p| p.cost).sum::<f64>());
                return Ok(());
            }
            let records = study::run_sweep(&cfg, resume)?;
            report(&cfg, &records)?;
        }
        Command::Fit => {
            let records = study::read_records(&cfg.out.join(study::RECORDS_FILE))?;
            report(&cfg, &records)?;
        }
        Command::Quadlab { class, d, gamma, meshes, reference, sign } => {
            let class = IntegralClass::from_index(class)?;
            let f = synthetic_integrand(class, d, &gamma, None, sign)?;
            let meshes = meshes.unwrap_or_else(|| default_meshes(class, d));
            let reference = match reference {
                None => None,
                Some(r) if r.len() == 3 => Some(ReferenceRule::Extrapolated { meshes: [r[0], r[1], r[2]] }),
                Some(_) => return Err(Error::Config("--reference takes exactly three meshes".into()).into()),
            };
            let r = pool(cfg.threads)?.install(|| measure_rate(&f, &meshes, reference))?;
            println!("class {} d={} gamma={:?}", class.index(), d, gamma);
            for (m, e) in r.meshes.iter().zip(&r.errors) {
                println!("  m={m:>4} error={e:.6e}");
            }
            match r.predicted {
                Some(p) => println!("predicted exponent {p}"),
                None => println!("predicted: super-algebraic"),
            }
            match &r.fit {
                Some(fit) => println!("measured exponent {:.4}{}", fit.s, if fit.reliable() { "" } else { " (flagged)" }),
                None => println!("measured: errors below the reference noise floor"),
            }
            if class == IntegralClass::Smooth {
                let verdict = r.super_algebraic || r.fit.is_none();
                println!("super-algebraic: {verdict}");
            }
            let path = write_json(&cfg.out, "quadlab.json", &json!({ "meta": meta, "measurement": r }))?;
            eprintln!("wrote {}", path.display());
        }
        Command::Ccd { m, n } => {
            let sys = ModelSystem::new(cfg.system.clone())?;
            let mesh = MonkhorstPackMesh::new(sys.cell(), m, cfg.scheme)?;
            let (history, e) = pool(cfg.threads)?.install(|| -> ccdfse::Result<_> {
                sys.solve_mesh(&mesh)?;
                let ctx = CcdContext::new(&sys, &mesh, cfg.budget_bytes())?;
                let sol = ccd_solve(&ctx, n)?;
                Ok((sol.history, energy(&ctx, &sol.amplitudes)?))
            })?;
            for (i, h) in history.iter().enumerate() {
                println!("iteration {:>3}: |T_n - T_(n-1)|_inf = {h:.6e}", i + 1);
            }
            println!("CCD({n}) energy on {m}^3 mesh: {e}");
            let path = write_json(
                &cfg.out,
                "ccd.json",
                &json!({ "meta": meta, "m": m, "n": n, "history": history, "energy": [e.re, e.im] }),
            )?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn default_meshes(class: IntegralClass, d: usize) -> Vec<usize> {
    match (class, d) {
        (IntegralClass::Product | IntegralClass::ShiftedProduct, 3) => vec![4, 6, 8, 12],
        (IntegralClass::Product | IntegralClass::ShiftedProduct, 2) => vec![8, 12, 16, 24],
        (_, 3) => vec![8, 16, 32, 64],
        (_, 2) => vec![16, 32, 64, 128],
        _ => vec![16, 32, 64, 128],
    }
}

fn report(cfg: &StudyConfig, records: &[study::SweepRecord]) -> anyhow::Result<()> {
    let reports = study::analyze(cfg, records)?;
    let files = study::emit_report(cfg, records, &reports, &cfg.out)?;
    for r in &reports {
        println!("{:<26} s = {:.4}  verdict: {:?}", r.selector.to_string(), r.free.fit.s, r.free.verdict);
        for c in &r.candidates {
            println!("{:<26} s = {:.4}  verdict: {:?}", "", c.fit.s, c.verdict);
        }
    }
    eprintln!("wrote {} and {}", files.csv.display(), files.summary.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
