use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wigprop::io::{parse_pairs, RunConfig};
use wigprop::Error;

mod commands;

/// Wigner-function propagators for one-dimensional systems.
///
/// Settings come from a key=value config file (--config) and are overridden by flags.
/// Keys and defaults: mass=0.5 hbar=1 potential=morse D0=1 alpha=1.25 qe=0 omega=2.5;
/// output grid pmin=-10 pmax=10 qmin=-4 qmax=16 np=128 nq=128; position box box_qmin=-4
/// box_qmax=16 n=512; origin_p=0 origin_q=0.1; t=quarter-period; route=exact; ecut=auto;
/// scan_np=512 scan_nq=512 scan_extent_p/scan_extent_q (from the exact slice when unset)
/// eps_det=1e-10 newton_tol=1e-8 newton_max_iter=50 multistart=16 dt (T/2000 when unset);
/// masses=0.25,1,2,10 L=1 observable=q sigma suite=all out workers text=false.
///
/// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "wigprop", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Exact quantum propagator slice
    Exact,
    /// Semiclassical propagator by trajectory-pair scan
    Semiclassical,
    /// Classical (Liouville) propagator
    Classical,
    /// Evolve a Gaussian Wigner function with the exact propagator
    Evolve,
    /// Expectation value of an observable along the evolution
    Expectation,
    /// Modular-momentum equation-of-motion check
    Modular,
    /// Run the verification battery
    Verify,
    /// Exact propagator and structure metric for several masses
    SweepMass,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file of key=value lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (or file prefix for sweep-mass)
    #[arg(long, global = true)]
    out: Option<String>,
    /// Worker threads [env: WIGPROP_WORKERS]
    #[arg(long, global = true)]
    workers: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    mass: Option<String>,
    /// Time, or "quarter-period"
    #[arg(long, global = true, allow_hyphen_values = true)]
    t: Option<String>,
    /// Origin as p,q
    #[arg(long, global = true, allow_hyphen_values = true)]
    origin: Option<String>,
    /// Masses as a,b,c
    #[arg(long, global = true)]
    masses: Option<String>,
    /// Displacement length for the modular check
    #[arg(long = "L", global = true, allow_hyphen_values = true)]
    l: Option<String>,
    /// Check suite: all, identity, composition, reality, orthogonality, time-reversal
    #[arg(long, global = true)]
    suite: Option<String>,
    /// auto, none, or a filter energy
    #[arg(long, global = true, allow_hyphen_values = true)]
    ecut: Option<String>,
    /// Also write a plain-text matrix next to each output file
    #[arg(long, global = true)]
    text: bool,
    /// Any config key, as KEY=VALUE (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load(common: &Common) -> wigprop::Result<RunConfig> {
    let mut pairs = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_pairs(&text)?
        }
        None => BTreeMap::new(),
    };
    let mut put = |k: &str, v: &str| {
        pairs.insert(k.to_string(), v.to_string());
    };
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")));
        };
        put(k.trim(), v.trim());
    }
    let flags = [
        ("out", &common.out),
        ("workers", &common.workers),
        ("mass", &common.mass),
        ("t", &common.t),
        ("masses", &common.masses),
        ("L", &common.l),
        ("suite", &common.suite),
        ("ecut", &common.ecut),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            put(k, v);
        }
    }
    if let Some(o) = &common.origin {
        let Some((p, q)) = o.split_once(',') else {
            return Err(Error::Config(format!("origin: expected p,q, got '{o}'")));
        };
        put("origin_p", p.trim());
        put("origin_q", q.trim());
    }
    if common.text {
        put("text", "true");
    }
    if !pairs.contains_key("workers") {
        if let Some(w) = std::env::var("WIGPROP_WORKERS").ok().filter(|w| !w.is_empty()) {
            pairs.insert("workers".into(), w);
        }
    }
    RunConfig::from_pairs(&pairs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("wigprop: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cfg.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("wigprop: cannot start {n} workers: {e}");
            return ExitCode::from(3);
        }
    }
    match commands::run(cli.command, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("wigprop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
