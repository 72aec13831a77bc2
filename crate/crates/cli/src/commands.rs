use std::path::{Path, PathBuf};

use wigprop::classical::{classical_propagator, default_step, flow_endpoint, integrate_trajectory};
use wigprop::io::{write_field, write_text, FieldKind, GridFileHeader, RunConfig};
use wigprop::phase::wigner_of_state;
use wigprop::quantum::{coherent_state, expectation, modular_default_steps, modular_eom_check, state_expectation, Observable};
use wigprop::semiclassical::semiclassical_propagator;
use wigprop::verify::{self, CheckReport};
use wigprop::{Error, ExactPropagator, PhaseGrid, PropagatorSlice, Result, Route, ScalarField, SymbolNorm};

use crate::Command;

/// Runs one subcommand. `Ok(false)` means a check did not pass.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<bool> {
    match cmd {
        Command::Exact => slice_cmd(cfg, Route::Exact),
        Command::Semiclassical => slice_cmd(cfg, Route::Semiclassical),
        Command::Classical => slice_cmd(cfg, Route::Classical),
        Command::Evolve => evolve(cfg),
        Command::Expectation => expectation_cmd(cfg),
        Command::Modular => modular(cfg),
        Command::Verify => verify_cmd(cfg),
        Command::SweepMass => sweep(cfg),
    }
}

fn engine(cfg: &RunConfig) -> Result<ExactPropagator> {
    ExactPropagator::new(cfg.system, cfg.qgrid, cfg.filter)
}

fn emit(cfg: &RunConfig, path: &Path, header: &GridFileHeader, field: &ScalarField) -> Result<()> {
    write_field(path, header, field)?;
    if cfg.text {
        write_text(&path.with_extension("txt"), field)?;
    }
    println!("wrote={}", path.display());
    Ok(())
}

fn sigma(cfg: &RunConfig) -> f64 {
    let p = &cfg.system;
    cfg.sigma.unwrap_or_else(|| match p.natural_frequency() {
        Ok(w) => (p.hbar() / (2.0 * p.mass * w)).sqrt(),
        Err(_) => 10.0 * cfg.qgrid.dq(),
    })
}

pub fn compute_slice(cfg: &RunConfig, route: Route, t: f64) -> Result<PropagatorSlice> {
    match route {
        Route::Exact => engine(cfg)?.slice(cfg.origin, t, &cfg.grid),
        Route::Classical => classical_propagator(&cfg.system, cfg.origin, t, &cfg.grid),
        Route::Semiclassical => {
            let scan = match cfg.scan_extent {
                Some(_) => cfg.scan,
                None => {
                    let exact = engine(cfg)?.slice(cfg.origin, t, &cfg.grid)?;
                    cfg.scan.with_extent_from(&exact)?
                }
            };
            println!("scan_extent={},{}", scan.extent.p, scan.extent.q);
            semiclassical_propagator(&cfg.system, cfg.origin, t, &cfg.grid, &scan)
        }
    }
}

fn slice_cmd(cfg: &RunConfig, route: Route) -> Result<bool> {
    let t = cfg.time.resolve(&cfg.system)?;
    let s = compute_slice(cfg, route, t)?;
    println!("route={route}");
    println!("model={}", cfg.system.descriptor());
    println!("t={t}");
    println!("origin={},{}", s.origin.p, s.origin.q);
    println!("mass={:.9}", s.mass());
    println!("leak={:.3e}", s.leak);
    if let Some(ec) = s.filter_energy {
        println!("ecut={ec}");
    }
    println!("imag_residue={:.3e}", s.imag_residue);
    println!("negativity={:.6}", verify::structure_metric(&s));
    println!("ridge_sign_changes={}", verify::ridge_sign_changes(&s.field));
    if let Some(out) = &cfg.out {
        emit(cfg, out, &GridFileHeader::for_slice(&s, cfg.system.descriptor()), &s.field)?;
        if route == Route::Classical {
            write_trajectory(cfg, &out.with_extension("traj"), t)?;
        }
    }
    Ok(true)
}

/// Plain-text `t p q` samples of the classical orbit from the origin.
fn write_trajectory(cfg: &RunConfig, path: &Path, t: f64) -> Result<()> {
    let (traj, _) = integrate_trajectory(&cfg.system, cfg.origin, t, default_step(&cfg.system, t))?;
    let mut text = String::from("# t p q\n");
    for (s, r) in &traj.samples {
        text.push_str(&format!("{s:.12e} {:.12e} {:.12e}\n", r.p, r.q));
    }
    std::fs::write(path, text)?;
    println!("wrote={}", path.display());
    Ok(())
}

fn initial_wigner(cfg: &RunConfig, ex: &ExactPropagator) -> Result<(Vec<wigprop::Complex64>, ScalarField)> {
    let hbar = cfg.system.hbar();
    let psi = coherent_state(ex.qgrid(), cfg.origin, sigma(cfg), hbar)?;
    let natural = PhaseGrid::natural(ex.qgrid(), hbar)?;
    let rho = wigner_of_state(&psi, ex.qgrid(), &natural, &cfg.system.conv.with_norm(SymbolNorm::Wigner))?;
    Ok((psi, rho))
}

fn evolve(cfg: &RunConfig) -> Result<bool> {
    let t = cfg.time.resolve(&cfg.system)?;
    let ex = engine(cfg)?;
    let (_, rho) = initial_wigner(cfg, &ex)?;
    let out = ex.evolve_wigner_onto(&rho, t, &cfg.grid)?;
    println!("t={t}");
    println!("sigma={}", sigma(cfg));
    println!("mass={:.9}", out.integral());
    println!("negativity={:.6}", verify::negativity(&out));
    if let Some(path) = &cfg.out {
        let header = GridFileHeader {
            kind: FieldKind::Wigner,
            route: Some(Route::Exact),
            grid: cfg.grid,
            t,
            origin: cfg.origin,
            model: cfg.system.descriptor(),
        };
        emit(cfg, path, &header, &out)?;
    }
    Ok(true)
}

fn expectation_cmd(cfg: &RunConfig) -> Result<bool> {
    let t = cfg.time.resolve(&cfg.system)?;
    let ex = engine(cfg)?;
    let (psi, rho) = initial_wigner(cfg, &ex)?;
    let obs = Observable::parse(&cfg.observable, cfg.modular_l)?;
    let lattice = obs.symbol(&cfg.system, ex.qgrid(), &rho.grid)?;
    let analytic = obs.analytic_symbol(&cfg.system, &rho.grid)?;
    let matrix = obs.matrix(&cfg.system, ex.qgrid());
    let hbar = cfg.system.hbar();
    let mut table = String::from("# t re_lattice im_lattice re_analytic im_analytic re_state im_state\n");
    for k in 0..=10 {
        let tk = t * k as f64 / 10.0;
        let r = ex.evolve_wigner(&rho, tk)?;
        let a = expectation(&lattice, &r)?;
        let b = expectation(&analytic, &r)?;
        let c = state_expectation(&matrix, &ex.eig.evolve_state(&psi, tk, hbar), ex.qgrid().dq());
        table.push_str(&format!(
            "{tk:.6} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}\n",
            a.re, a.im, b.re, b.im, c.re, c.im
        ));
    }
    print!("{table}");
    if let Some(path) = &cfg.out {
        std::fs::write(path, &table)?;
        println!("wrote={}", path.display());
    }
    Ok(true)
}

fn modular(cfg: &RunConfig) -> Result<bool> {
    let t = cfg.time.resolve(&cfg.system)?;
    let psi = coherent_state(&cfg.qgrid, cfg.origin, sigma(cfg), cfg.system.hbar())?;
    let dts = modular_default_steps(&cfg.system, &cfg.qgrid, cfg.modular_l, &psi, t)?;
    let r = modular_eom_check(&cfg.system, &cfg.qgrid, cfg.modular_l, &psi, t, &dts)?;
    println!("L={}", cfg.modular_l);
    println!("t={t}");
    println!("D={:.12e},{:.12e}", r.d.re, r.d.im);
    println!("quantum_rhs={:.12e},{:.12e}", r.quantum_rhs.re, r.quantum_rhs.im);
    println!("classical_rhs={:.12e},{:.12e}", r.classical_rhs.re, r.classical_rhs.im);
    println!("relative_gap={:.6}", r.relative_gap());
    for (dt, res) in &r.residuals {
        println!("residual dt={dt:e} value={res:.6e}");
    }
    let negligible = r.residuals.iter().all(|(_, v)| *v < 1e-10);
    let order = r.min_order();
    println!("order={order:.4}");
    let pass = negligible || order >= 1.9;
    println!("pass={pass}");
    Ok(pass)
}

const SUITES: [&str; 6] = ["all", "identity", "composition", "reality", "orthogonality", "time-reversal"];

fn verify_cmd(cfg: &RunConfig) -> Result<bool> {
    let suite = cfg.suite.as_str();
    if !SUITES.contains(&suite) {
        return Err(Error::Config(format!("suite: expected one of {}, got '{suite}'", SUITES.join(", "))));
    }
    let t = cfg.time.resolve(&cfg.system)?;
    let ex = engine(cfg)?;
    let want = |name: &str| suite == "all" || suite == name;
    let mut checks: Vec<Box<dyn Fn() -> Result<CheckReport> + Send + Sync + '_>> = Vec::new();
    let (ex, origin, grid) = (&ex, cfg.origin, &cfg.grid);
    if want("identity") {
        for route in [Route::Exact, Route::Classical, Route::Semiclassical] {
            checks.push(Box::new(move || verify::check_identity_t0(route, ex, origin, grid)));
        }
    }
    if want("composition") {
        checks.push(Box::new(move || verify::check_chapman_kolmogorov(ex, origin, t)));
    }
    if want("reality") {
        checks.push(Box::new(move || Ok(verify::check_reality(&ex.slice(origin, t, grid)?))));
    }
    if want("orthogonality") {
        checks.push(Box::new(move || verify::check_orthogonality(ex, origin, t)));
    }
    if want("time-reversal") {
        checks.push(Box::new(move || {
            let params = &ex.params;
            let (end, _) = flow_endpoint(params, origin, t, default_step(params, t))?;
            verify::check_time_reversal(ex, origin, end, t)
        }));
    }
    let reports = verify::run_checks(checks).into_iter().collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!("{r}");
    }
    println!();
    for r in &reports {
        println!("{}", r.to_kv());
    }
    Ok(reports.iter().all(|r| r.pass))
}

/// `prefix_m<mass>.wpg` for a sweep output prefix.
fn sweep_path(prefix: &Path, mass: f64) -> PathBuf {
    let stem = prefix.with_extension("");
    PathBuf::from(format!("{}_m{mass}.wpg", stem.display()))
}

fn sweep(cfg: &RunConfig) -> Result<bool> {
    let report = verify::classical_limit_sweep(&cfg.system, &cfg.masses, &cfg.qgrid, cfg.filter, cfg.origin, &cfg.grid)?;
    let mut table = String::from("# mass t ecut negativity peak_p peak_q classical_p classical_q peak_offset_cells\n");
    for e in &report.entries {
        table.push_str(&format!(
            "{} {:.6} {} {:.6} {:.4} {:.4} {:.4} {:.4} {}\n",
            e.mass,
            e.t,
            e.filter_energy.map_or("none".to_string(), |v| format!("{v:.4}")),
            e.metric,
            e.peak.p,
            e.peak.q,
            e.classical_endpoint.p,
            e.classical_endpoint.q,
            e.peak_offset_cells
        ));
    }
    print!("{table}");
    if let Some(d) = report.strictly_decreasing() {
        println!("strictly_decreasing={d}");
    }
    if let Some(prefix) = &cfg.out {
        for e in &report.entries {
            let model = cfg.system.with_mass(e.mass)?.descriptor();
            emit(cfg, &sweep_path(prefix, e.mass), &GridFileHeader::for_slice(&e.slice, model), &e.slice.field)?;
        }
        let summary = PathBuf::from(format!("{}_summary.txt", prefix.with_extension("").display()));
        std::fs::write(&summary, &table)?;
        println!("wrote={}", summary.display());
    }
    Ok(true)
}
