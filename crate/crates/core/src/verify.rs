//! Structural checks on propagators: identity, composition, reality, reversibility,
//! and the loss of interference structure with growing mass.

use std::fmt;

use rayon::prelude::*;

use crate::classical::{classical_propagator, default_step, flow_endpoint};
use crate::error::{config, Result};
use crate::models::SystemParams;
use crate::phase::{wigner_of_state, PhaseGrid, PhasePoint, QGrid, ScalarField, SymbolNorm};
use crate::quantum::{coherent_state, lattice_window, ExactPropagator, PropagatorSlice, Route, SpectralFilter};
use crate::semiclassical::{semiclassical_propagator, ScanConfig};

pub const IDENTITY_TOLERANCE: f64 = 1e-6;
pub const SHORT_TIME_TOLERANCE: f64 = 1e-2;
pub const COMPOSITION_TOLERANCE: f64 = 1e-4;
pub const REALITY_TOLERANCE: f64 = 1e-9;
pub const REVERSAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, metric: f64, tolerance: f64, details: impl Into<String>) -> Self {
        Self { name: name.into(), metric, tolerance, pass: metric <= tolerance, details: details.into() }
    }

    /// `key=value` lines, one block per report.
    pub fn to_kv(&self) -> String {
        format!(
            "check={}\nmetric={:e}\ntolerance={:e}\npass={}\ndetails={}\n",
            self.name, self.metric, self.tolerance, self.pass, self.details
        )
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<26} {:<4} metric={:<12.4e} tol={:<9.1e} {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.metric,
            self.tolerance,
            self.details
        )
    }
}

/// Runs independent checks concurrently and returns them in the order given.
pub fn run_checks(checks: Vec<Box<dyn Fn() -> Result<CheckReport> + Send + Sync + '_>>) -> Vec<Result<CheckReport>> {
    checks.par_iter().map(|c| c()).collect()
}

/// Absolute mass outside the cell holding `origin`, relative to the total absolute mass.
fn mass_outside(field: &ScalarField, origin: PhasePoint) -> f64 {
    let total = field.abs_integral();
    if total == 0.0 {
        return 0.0;
    }
    let inside = match field.grid.cell_of(origin) {
        Some((j, i)) => field.at(j, i).abs() * field.grid.cell_area(),
        None => 0.0,
    };
    ((total - inside) / total).max(0.0)
}

/// `G(r'', 0; r', 0)` is a single-cell delta at `r'`.
///
/// The exact route uses the bare propagator on the [`lattice_window`] with the
/// dimensions of `grid`. The semiclassical route runs at a thousandth of the natural
/// period, with offsets spanning four cells of `grid`, and is scored around the
/// classical endpoint at that time.
pub fn check_identity_t0(route: Route, exact: &ExactPropagator, origin: PhasePoint, grid: &PhaseGrid) -> Result<CheckReport> {
    let params = &exact.params;
    match route {
        Route::Exact => {
            let win = lattice_window(exact.qgrid(), origin, grid.np, grid.nq, params.hbar())?;
            let raw = exact.with_filter(SpectralFilter::Off)?.with_leak_tolerance(f64::INFINITY);
            let s = raw.slice(origin, 0.0, &win)?;
            let m = mass_outside(&s.field, s.origin);
            Ok(CheckReport::new("identity_t0[exact]", m, IDENTITY_TOLERANCE, format!("mass={:.12}", s.mass())))
        }
        Route::Classical => {
            let s = classical_propagator(params, origin, 0.0, grid)?;
            let m = mass_outside(&s.field, origin);
            Ok(CheckReport::new("identity_t0[classical]", m, IDENTITY_TOLERANCE, format!("mass={:.12}", s.mass())))
        }
        Route::Semiclassical => {
            let t = params.quarter_period().map(|q| 4.0 * q / 1000.0).unwrap_or(1e-3);
            let cfg = ScanConfig {
                extent: PhasePoint::new(4.0 * grid.dp(), 4.0 * grid.dq()),
                np: 64,
                nq: 64,
                ..ScanConfig::default()
            };
            let s = semiclassical_propagator(params, origin, t, grid, &cfg)?;
            let (end, _) = flow_endpoint(params, origin, t, default_step(params, t))?;
            let m = mass_outside(&s.field, end);
            Ok(CheckReport::new("identity_t0[semiclassical]", m, SHORT_TIME_TOLERANCE, format!("t={t:.3e}")))
        }
    }
}

/// Gaussian test Wigner function at `origin` on the natural lattice of the position grid.
pub fn test_state(exact: &ExactPropagator, origin: PhasePoint) -> Result<ScalarField> {
    let params = &exact.params;
    let qg = exact.qgrid();
    let hbar = params.hbar();
    let sigma = match params.natural_frequency() {
        Ok(w) => (hbar / (2.0 * params.mass * w)).sqrt(),
        Err(_) => 10.0 * qg.dq(),
    };
    let psi = coherent_state(qg, origin, sigma, hbar)?;
    let grid = PhaseGrid::natural(qg, hbar)?;
    wigner_of_state(&psi, qg, &grid, &params.conv.with_norm(SymbolNorm::Wigner))
}

/// Propagating over `t` equals propagating twice over `t/2`.
pub fn check_chapman_kolmogorov(exact: &ExactPropagator, origin: PhasePoint, t: f64) -> Result<CheckReport> {
    let rho = test_state(exact, origin)?;
    let full = exact.evolve_wigner(&rho, t)?;
    let half = exact.evolve_wigner(&exact.evolve_wigner(&rho, t / 2.0)?, t / 2.0)?;
    let m = full.rms_diff(&half)?;
    Ok(CheckReport::new("chapman_kolmogorov", m, COMPOSITION_TOLERANCE, format!("t={t}")))
}

/// Imaginary residue of the complex symbol before projection to real values.
pub fn check_reality(slice: &PropagatorSlice) -> CheckReport {
    CheckReport::new("reality", slice.imag_residue, REALITY_TOLERANCE, format!("route={}", slice.route))
}

/// Forward over `t` then backward over `t` recovers the test state.
pub fn check_orthogonality(exact: &ExactPropagator, origin: PhasePoint, t: f64) -> Result<CheckReport> {
    let rho = test_state(exact, origin)?;
    let back = exact.evolve_wigner(&exact.evolve_wigner(&rho, t)?, -t)?;
    let m = rho.rms_diff(&back)?;
    Ok(CheckReport::new("orthogonality", m, COMPOSITION_TOLERANCE, format!("t={t}")))
}

/// Grid whose cell centres include both points; `q` values must sit on position nodes.
fn two_point_grid(a: PhasePoint, b: PhasePoint, qg: &QGrid) -> Result<(PhaseGrid, (usize, usize), (usize, usize))> {
    let dq = qg.dq() / 2.0;
    let (lo, hi) = (a.q.min(b.q), a.q.max(b.q));
    let nq = (((hi - lo) / dq).round() as usize + 1).max(2);
    let wp = if a.p != b.p { (a.p - b.p).abs() } else { 1.0 };
    let np = 2;
    let plo = a.p.min(b.p);
    let grid = PhaseGrid::new(plo - wp / 2.0, plo - wp / 2.0 + np as f64 * wp, lo - dq / 2.0, lo - dq / 2.0 + nq as f64 * dq, np, nq)?;
    let ca = grid.cell_of(a).expect("first point lies in its grid");
    let cb = grid.cell_of(b).expect("second point lies in its grid");
    Ok((grid, ca, cb))
}

/// `G(r'', t; r', 0) = G(r', -t; r'', 0)` for the bare exact propagator, both points snapped
/// to position nodes.
pub fn check_time_reversal(exact: &ExactPropagator, origin: PhasePoint, target: PhasePoint, t: f64) -> Result<CheckReport> {
    let raw = exact.with_filter(SpectralFilter::Off)?.with_leak_tolerance(f64::INFINITY);
    let a = raw.snap_origin(origin)?;
    let b = raw.snap_origin(target)?;
    let (grid, ca, cb) = two_point_grid(a, b, raw.qgrid())?;
    let fwd = raw.slice(a, t, &grid)?.field.at(cb.0, cb.1);
    let bwd = raw.slice(b, -t, &grid)?.field.at(ca.0, ca.1);
    Ok(CheckReport::new(
        "time_reversal",
        (fwd - bwd).abs(),
        REVERSAL_TOLERANCE,
        format!("G={fwd:.6e} reversed={bwd:.6e}"),
    ))
}

/// Negativity fraction `int max(-G, 0) / int |G|`.
pub fn structure_metric(slice: &PropagatorSlice) -> f64 {
    negativity(&slice.field)
}

pub fn negativity(field: &ScalarField) -> f64 {
    let total: f64 = field.values.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    field.values.iter().map(|v| (-v).max(0.0)).sum::<f64>() / total
}

/// Sign changes along the ridge: the line through the `|G|` maximum along the principal
/// axis of the `|G|`-weighted covariance, in cell units, sampled every half cell. Samples
/// below `1e-3` of the maximum are skipped.
pub fn ridge_sign_changes(field: &ScalarField) -> usize {
    let g = field.grid;
    let (j0, i0) = field.argmax_abs();
    let (mut w, mut mj, mut mi) = (0.0, 0.0, 0.0);
    for j in 0..g.np {
        for i in 0..g.nq {
            let a = field.at(j, i).abs();
            w += a;
            mj += a * j as f64;
            mi += a * i as f64;
        }
    }
    if w == 0.0 {
        return 0;
    }
    let (mj, mi) = (mj / w, mi / w);
    let (mut cjj, mut cii, mut cji) = (0.0, 0.0, 0.0);
    for j in 0..g.np {
        for i in 0..g.nq {
            let a = field.at(j, i).abs() / w;
            let (dj, di) = (j as f64 - mj, i as f64 - mi);
            cjj += a * dj * dj;
            cii += a * di * di;
            cji += a * dj * di;
        }
    }
    let theta = 0.5 * (2.0 * cji).atan2(cjj - cii);
    let (uj, ui) = (theta.cos(), theta.sin());
    let floor = 1e-3 * field.max_abs();
    let reach = (g.np + g.nq) as i64 * 2;
    let mut changes = 0;
    let mut last = 0.0f64;
    let mut prev_cell = None;
    for k in -reach..=reach {
        let s = 0.5 * k as f64;
        let (j, i) = ((j0 as f64 + s * uj).round(), (i0 as f64 + s * ui).round());
        if j < 0.0 || i < 0.0 || j >= g.np as f64 || i >= g.nq as f64 {
            continue;
        }
        let cell = (j as usize, i as usize);
        if prev_cell == Some(cell) {
            continue;
        }
        prev_cell = Some(cell);
        let v = field.at(cell.0, cell.1);
        if v.abs() < floor {
            continue;
        }
        if last != 0.0 && v.signum() != last.signum() {
            changes += 1;
        }
        last = v;
    }
    changes
}

/// Normalized cross-correlation `<a, b> / (|a| |b|)`.
pub fn cross_correlation(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    if a.grid != b.grid {
        return config("fields are on different grids");
    }
    let ab: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { ab / (na * nb) })
}

/// A connected same-sign region of a reference field.
#[derive(Clone, Debug, PartialEq)]
pub struct Lobe {
    pub sign: f64,
    pub cells: Vec<(usize, usize)>,
    /// Integral of the reference field over the lobe.
    pub mass: f64,
    pub centroid: PhasePoint,
}

impl Lobe {
    /// Integral of `other` over this lobe's cells.
    pub fn integral_of(&self, other: &ScalarField) -> f64 {
        self.cells.iter().map(|&(j, i)| other.at(j, i)).sum::<f64>() * other.grid.cell_area()
    }
}

/// Edge-connected regions where `sign * G > threshold * max|G|`, largest `|mass|` first.
pub fn lobes(field: &ScalarField, threshold: f64) -> Vec<Lobe> {
    let g = field.grid;
    let floor = threshold * field.max_abs();
    let mut seen = vec![false; g.len()];
    let mut out = Vec::new();
    for start in 0..g.len() {
        let v = field.values[start];
        if seen[start] || v.abs() <= floor {
            continue;
        }
        let sign = v.signum();
        let mut stack = vec![(start / g.nq, start % g.nq)];
        seen[start] = true;
        let mut cells = Vec::new();
        while let Some((j, i)) = stack.pop() {
            cells.push((j, i));
            let near = [(j.wrapping_sub(1), i), (j + 1, i), (j, i.wrapping_sub(1)), (j, i + 1)];
            for (a, b) in near {
                if a >= g.np || b >= g.nq {
                    continue;
                }
                let k = g.index(a, b);
                if !seen[k] && sign * field.values[k] > floor {
                    seen[k] = true;
                    stack.push((a, b));
                }
            }
        }
        cells.sort_unstable();
        let area = g.cell_area();
        let mass = cells.iter().map(|&(j, i)| field.at(j, i)).sum::<f64>() * area;
        let (mut cp, mut cq) = (0.0, 0.0);
        for &(j, i) in &cells {
            let r = g.point(j, i);
            let w = field.at(j, i) * area / mass;
            cp += w * r.p;
            cq += w * r.q;
        }
        out.push(Lobe { sign, cells, mass, centroid: PhasePoint::new(cp, cq) });
    }
    out.sort_by(|a, b| b.mass.abs().total_cmp(&a.mass.abs()));
    out
}

/// Largest `count` lobes of `reference` (at 10% of its maximum) and whether `test` has the
/// same sign on each.
pub fn lobe_sign_agreement(reference: &ScalarField, test: &ScalarField, count: usize) -> Result<Vec<(Lobe, f64, bool)>> {
    if reference.grid != test.grid {
        return config("fields are on different grids");
    }
    Ok(lobes(reference, 0.1)
        .into_iter()
        .take(count)
        .map(|l| {
            let m = l.integral_of(test);
            let ok = m.signum() == l.sign && m != 0.0;
            (l, m, ok)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub mass: f64,
    pub t: f64,
    pub metric: f64,
    pub filter_energy: Option<f64>,
    /// Cell centre of the largest positive value.
    pub peak: PhasePoint,
    pub classical_endpoint: PhasePoint,
    /// Chebyshev distance in cells between the peak and the classical endpoint.
    pub peak_offset_cells: usize,
    pub slice: PropagatorSlice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// Metric strictly decreasing with mass order as given; `None` for fewer than two masses.
    pub fn strictly_decreasing(&self) -> Option<bool> {
        (self.entries.len() >= 2).then(|| self.entries.windows(2).all(|w| w[1].metric < w[0].metric))
    }
}

/// Exact propagator per mass at that mass's quarter period, with its negativity fraction.
pub fn classical_limit_sweep(
    template: &SystemParams,
    masses: &[f64],
    qgrid: &QGrid,
    filter: SpectralFilter,
    origin: PhasePoint,
    grid: &PhaseGrid,
) -> Result<SweepReport> {
    if masses.is_empty() {
        return config("mass list is empty");
    }
    let mut entries = Vec::with_capacity(masses.len());
    for &m in masses {
        let params = template.with_mass(m)?;
        let t = params.quarter_period()?;
        let slice = ExactPropagator::new(params, *qgrid, filter)?.slice(origin, t, grid)?;
        let field = slice.field.clone();
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for j in 0..grid.np {
            for i in 0..grid.nq {
                if field.at(j, i) > best {
                    best = field.at(j, i);
                    at = (j, i);
                }
            }
        }
        let (end, _) = flow_endpoint(&params, slice.origin, t, default_step(&params, t))?;
        let offset = match grid.cell_of(end) {
            Some((j, i)) => j.abs_diff(at.0).max(i.abs_diff(at.1)),
            None => usize::MAX,
        };
        entries.push(SweepEntry {
            mass: m,
            t,
            metric: structure_metric(&slice),
            filter_energy: slice.filter_energy,
            peak: grid.point(at.0, at.1),
            classical_endpoint: end,
            peak_offset_cells: offset,
            slice,
        });
    }
    Ok(SweepReport { entries })
}
