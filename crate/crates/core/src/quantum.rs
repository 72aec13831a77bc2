//! Exact quantum route: Fourier-grid Hamiltonian, spectral propagator, and the
//! Wigner propagator built from it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{config, numeric, Error, Result};
use crate::models::{PotentialModel, SystemParams};
use crate::phase::{
    operator_of_symbol, row_symbol, CMatrix, ComplexField, OperatorMatrix, PhaseGrid, PhasePoint, QGrid,
    ScalarField, SymbolNorm, WeylConventions,
};

/// Boundary-leak tolerance for propagator slices.
pub const LEAK_TOLERANCE: f64 = 1e-6;

/// Halvings of the automatic filter energy tried before a slice is rejected.
const MAX_HALVINGS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    Exact,
    Semiclassical,
    Classical,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Exact => "exact",
            Route::Semiclassical => "semiclassical",
            Route::Classical => "classical",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Route {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Route::Exact),
            "semiclassical" => Ok(Route::Semiclassical),
            "classical" => Ok(Route::Classical),
            _ => config(format!("unknown route '{s}'")),
        }
    }
}

/// `G_W(r'', t; r', 0)` sampled over a grid of `r''`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatorSlice {
    pub field: ScalarField,
    pub origin: PhasePoint,
    pub t: f64,
    pub route: Route,
    /// Max imaginary part of the complex field before projection, relative to the max real part.
    pub imag_residue: f64,
    /// Fraction of position-marginal mass outside the central 90% of the position box.
    pub leak: f64,
    /// Spectral filter energy used, if any.
    pub filter_energy: Option<f64>,
}

impl PropagatorSlice {
    pub fn mass(&self) -> f64 {
        self.field.integral()
    }
}

/// Real symmetric Fourier-grid Hamiltonian.
pub(crate) fn hamiltonian_real(params: &SystemParams, qgrid: &QGrid) -> DMatrix<f64> {
    let n = qgrid.n;
    let dq = qgrid.dq();
    let hbar = params.hbar();
    // kinetic row T(x - y) = (1/n) sum_k (hbar k)^2/2m cos(k (x - y) dq), k on the FFT frequency set
    let ks: Vec<f64> = (0..n)
        .map(|j| {
            let f = if j < (n + 1) / 2 { j as f64 } else { j as f64 - n as f64 };
            2.0 * PI * f / (n as f64 * dq)
        })
        .collect();
    let trow: Vec<f64> = (0..n)
        .map(|delta| {
            ks.iter()
                .map(|&k| (hbar * k).powi(2) / (2.0 * params.mass) * (k * delta as f64 * dq).cos())
                .sum::<f64>()
                / n as f64
        })
        .collect();
    DMatrix::from_fn(n, n, |x, y| {
        let t = trow[x.abs_diff(y)];
        if x == y {
            t + params.potential(qgrid.q(x))
        } else {
            t
        }
    })
}

pub fn build_hamiltonian(params: &SystemParams, qgrid: &QGrid) -> OperatorMatrix {
    let h = hamiltonian_real(params, qgrid);
    OperatorMatrix { qgrid: *qgrid, entries: h.map(|v| C64::new(v, 0.0)) }
}

/// Spectral decomposition of the grid Hamiltonian. Columns of `states` are
/// orthonormal in the plain vector inner product.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub qgrid: QGrid,
    pub energies: Vec<f64>,
    pub states: DMatrix<f64>,
}

impl EigenSystem {
    pub fn solve(params: &SystemParams, qgrid: &QGrid) -> Result<Self> {
        let h = hamiltonian_real(params, qgrid);
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..qgrid.n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let energies: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        if energies.iter().any(|e| !e.is_finite()) {
            return numeric("eigensolver returned non-finite energies");
        }
        let states = DMatrix::from_fn(qgrid.n, qgrid.n, |x, k| eig.eigenvectors[(x, order[k])]);
        Ok(Self { qgrid: *qgrid, energies, states })
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_residual(&self) -> f64 {
        let g = self.states.transpose() * &self.states;
        let mut r: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                r = r.max((g[(i, j)] - target).abs());
            }
        }
        r
    }

    /// `V diag(g) V^T` for complex `g`.
    pub(crate) fn spectral(&self, g: &[C64]) -> CMatrix {
        let n = self.len();
        let mut vr = self.states.clone();
        let mut vi = self.states.clone();
        for k in 0..n {
            vr.column_mut(k).scale_mut(g[k].re);
            vi.column_mut(k).scale_mut(g[k].im);
        }
        let vt = self.states.transpose();
        let re = vr * &vt;
        let im = vi * &vt;
        CMatrix::from_fn(n, n, |a, b| C64::new(re[(a, b)], im[(a, b)]))
    }

    /// Wavefunction of level `k`, normalized under `dq` quadrature.
    pub fn wavefunction(&self, k: usize) -> Vec<C64> {
        let s = 1.0 / self.qgrid.dq().sqrt();
        self.states.column(k).iter().map(|&v| C64::new(v * s, 0.0)).collect()
    }

    /// `exp(-i H t / hbar) psi`.
    pub fn evolve_state(&self, psi: &[C64], t: f64, hbar: f64) -> Vec<C64> {
        let n = self.len();
        let coeffs: Vec<C64> = (0..n)
            .map(|k| {
                let c: C64 = (0..n).map(|x| psi[x] * self.states[(x, k)]).sum();
                c * C64::from_polar(1.0, -self.energies[k] * t / hbar)
            })
            .collect();
        (0..n)
            .map(|x| (0..n).map(|k| coeffs[k] * self.states[(x, k)]).sum())
            .collect()
    }
}

/// `U(t) = sum_k exp(-i E_k t / hbar) |k><k|`.
pub fn propagator_matrix(eig: &EigenSystem, t: f64, hbar: f64) -> OperatorMatrix {
    let g: Vec<C64> = eig.energies.iter().map(|&e| C64::from_polar(1.0, -e * t / hbar)).collect();
    OperatorMatrix { qgrid: eig.qgrid, entries: eig.spectral(&g) }
}

/// `U_W(r, t)`, the plain Weyl symbol of the propagator.
pub fn weyl_propagator_symbol(u: &OperatorMatrix, grid: &PhaseGrid, conv: &WeylConventions) -> Result<ComplexField> {
    crate::phase::weyl_symbol(u, grid, &conv.with_norm(SymbolNorm::Weyl))
}

/// Energy window applied to both sides of the origin operator.
///
/// The lattice origin operator contains every momentum the grid can hold,
/// including the band edge and the wall region of the box. A Gaussian weight
/// `exp(-(E - E0) / 2Ec)` on each side restricts it to the physical part of the
/// spectrum. `Off` keeps the bare lattice operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpectralFilter {
    Off,
    Auto,
    Cutoff(f64),
}

impl SpectralFilter {
    /// Filter energy `Ec` to start from. For `Auto` this is a sixteenth of the
    /// smaller of the band-edge kinetic energy and the highest wall of the box;
    /// slices then halve it until the boundary-leak monitor passes.
    pub fn energy(&self, params: &SystemParams, qgrid: &QGrid) -> Result<Option<f64>> {
        match *self {
            SpectralFilter::Off => Ok(None),
            SpectralFilter::Cutoff(ec) if ec.is_finite() && ec > 0.0 => Ok(Some(ec)),
            SpectralFilter::Cutoff(ec) => config(format!("ecut must be positive, got {ec}")),
            SpectralFilter::Auto => {
                let band = (PI * params.hbar() / (2.0 * qgrid.dq())).powi(2) / (2.0 * params.mass);
                let wall = match params.potential {
                    PotentialModel::Free => f64::INFINITY,
                    _ => params.potential(qgrid.qmin).max(params.potential(qgrid.qmax)),
                };
                Ok(Some(band.min(wall) / 16.0))
            }
        }
    }
}

impl FromStr for SpectralFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "off" => Ok(SpectralFilter::Off),
            "auto" => Ok(SpectralFilter::Auto),
            v => match v.parse::<f64>() {
                Ok(ec) if ec.is_finite() && ec > 0.0 => Ok(SpectralFilter::Cutoff(ec)),
                _ => config(format!("ecut must be 'auto', 'none' or a positive number, got '{v}'")),
            },
        }
    }
}

impl fmt::Display for SpectralFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralFilter::Off => f.write_str("none"),
            SpectralFilter::Auto => f.write_str("auto"),
            SpectralFilter::Cutoff(ec) => write!(f, "{ec}"),
        }
    }
}

/// Grid of `np x nq` cells on which the bare t = 0 propagator is a single-cell delta.
///
/// q cells have the position spacing and are centered on the grid point nearest
/// `origin.q`; p cells have the width of one zero of the origin row's Dirichlet
/// kernel and are centered on `origin.p`.
pub fn lattice_window(qgrid: &QGrid, origin: PhasePoint, np: usize, nq: usize, hbar: f64) -> Result<PhaseGrid> {
    let x = qgrid
        .nearest(origin.q)
        .ok_or_else(|| Error::Config(format!("origin q = {} lies outside the position box", origin.q)))?;
    let reach = qgrid.row_reach(2 * x);
    let dp = PI * hbar / ((reach + 1) as f64 * qgrid.dq());
    PhaseGrid::centered(PhasePoint::new(origin.p, qgrid.q(x)), dp, qgrid.dq(), np, nq)
}

/// Exact-route engine: one diagonalization serves every slice and evolution.
#[derive(Clone, Debug)]
pub struct ExactPropagator {
    pub params: SystemParams,
    pub eig: EigenSystem,
    pub filter: SpectralFilter,
    filter_energy: Option<f64>,
    leak_tolerance: f64,
}

impl ExactPropagator {
    pub fn new(params: SystemParams, qgrid: QGrid, filter: SpectralFilter) -> Result<Self> {
        let eig = EigenSystem::solve(&params, &qgrid)?;
        let filter_energy = filter.energy(&params, &qgrid)?;
        Ok(Self { params, eig, filter, filter_energy, leak_tolerance: LEAK_TOLERANCE })
    }

    /// Replace the boundary-leak tolerance; `f64::INFINITY` disables the monitor.
    pub fn with_leak_tolerance(mut self, tol: f64) -> Self {
        self.leak_tolerance = tol;
        self
    }

    /// Same eigensystem under a different filter.
    pub fn with_filter(&self, filter: SpectralFilter) -> Result<Self> {
        let filter_energy = filter.energy(&self.params, self.qgrid())?;
        Ok(Self { filter, filter_energy, ..self.clone() })
    }

    pub fn qgrid(&self) -> &QGrid {
        &self.eig.qgrid
    }

    pub fn filter_energy(&self) -> Option<f64> {
        self.filter_energy
    }

    fn weights(&self, ec: Option<f64>) -> Vec<f64> {
        let e0 = self.eig.energies[0];
        match ec {
            Some(ec) => self.eig.energies.iter().map(|&e| (-(e - e0) / (2.0 * ec)).exp()).collect(),
            None => vec![1.0; self.eig.len()],
        }
    }

    /// Rows of `B = U f` and `C = B P(r')`, the trace `Tr(f^2 P)`, and the boundary leak.
    fn kernel(&self, origin: PhasePoint, s0: usize, t: f64, ec: Option<f64>) -> Result<Kernel> {
        let qg = self.qgrid();
        let n = qg.n;
        let dq = qg.dq();
        let hbar = self.params.hbar();
        let f = self.weights(ec);
        let g: Vec<C64> = self
            .eig
            .energies
            .iter()
            .zip(&f)
            .map(|(&e, &w)| C64::from_polar(w, -e * t / hbar))
            .collect();
        // P[a, b] = exp(i p' (a - b) dq / hbar) on a + b = s0
        let b = self.eig.spectral(&g);
        let brows: Vec<Vec<C64>> = (0..n).map(|a| b.row(a).iter().copied().collect()).collect();
        let crows: Vec<Vec<C64>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|y| {
                        if y > s0 || s0 - y >= n {
                            return C64::new(0.0, 0.0);
                        }
                        let x = s0 - y;
                        let ph = origin.p * (x as f64 - y as f64) * dq / hbar;
                        brows[a][x] * C64::from_polar(1.0, ph)
                    })
                    .collect()
            })
            .collect();

        let mut z = C64::new(0.0, 0.0);
        for x in 0..n {
            if x > s0 || s0 - x >= n {
                continue;
            }
            let y = s0 - x;
            let f2xy: f64 = (0..n).map(|k| self.eig.states[(x, k)] * f[k] * f[k] * self.eig.states[(y, k)]).sum();
            z += C64::from_polar(f2xy, origin.p * (y as f64 - x as f64) * dq / hbar);
        }
        if z.norm() < 1e-300 || !z.re.is_finite() {
            return numeric("origin operator has vanishing trace");
        }
        let kern = Kernel { brows, crows, z: z.re, leak: 0.0 };

        let lo = qg.qmin + 0.05 * (qg.qmax - qg.qmin);
        let hi = qg.qmax - 0.05 * (qg.qmax - qg.qmin);
        let diag: Vec<f64> = (0..n).into_par_iter().map(|x| kern.entry(x, x).re).collect();
        let total: f64 = diag.iter().map(|v| v.abs()).sum();
        let outside: f64 = (0..n)
            .filter(|&x| {
                let q = qg.q(x);
                q < lo || q > hi
            })
            .map(|x| diag[x].abs())
            .sum();
        let leak = if total > 0.0 { outside / total } else { 0.0 };
        Ok(Kernel { leak, ..kern })
    }

    /// Grid point used as the origin: `q'` snaps to the nearest position node.
    pub fn snap_origin(&self, origin: PhasePoint) -> Result<PhasePoint> {
        let qg = self.qgrid();
        let x = qg
            .nearest(origin.q)
            .ok_or_else(|| Error::Config(format!("origin q = {} lies outside the position box", origin.q)))?;
        Ok(PhasePoint::new(origin.p, qg.q(x)))
    }

    /// `G_W(r'', t; r', 0)` on `grid`.
    pub fn slice(&self, origin: PhasePoint, t: f64, grid: &PhaseGrid) -> Result<PropagatorSlice> {
        if !origin.is_finite() || !t.is_finite() {
            return config("origin and time must be finite");
        }
        if !grid.contains(origin) {
            return config(format!("origin ({}, {}) lies outside the output grid", origin.p, origin.q));
        }
        if let PotentialModel::Morse { d0, .. } = self.params.potential {
            let e = self.params.hamiltonian(origin);
            if e >= d0 {
                return Err(Error::Precondition(format!("origin energy {e} is not below the dissociation energy {d0}")));
            }
        }
        let qg = *self.qgrid();
        let n = qg.n;
        let dq = qg.dq();
        let hbar = self.params.hbar();
        if grid.np > n {
            return config(format!("np = {} exceeds the offset transform size {n}", grid.np));
        }
        let rows: Vec<usize> = (0..grid.nq).map(|i| qg.half_row(grid.q(i))).collect::<Result<_>>()?;
        let snapped = self.snap_origin(origin)?;
        let s0 = 2 * qg.nearest(snapped.q).expect("snapped origin is on the grid");

        let (kern, ec) = match self.filter {
            SpectralFilter::Auto => {
                let top = self.filter_energy.expect("auto filter has an energy");
                let mut k = 0;
                loop {
                    let ec = top / 2f64.powi(k as i32);
                    let kern = self.kernel(snapped, s0, t, Some(ec))?;
                    if kern.leak <= self.leak_tolerance || k == MAX_HALVINGS {
                        break (kern, Some(ec));
                    }
                    k += 1;
                }
            }
            _ => (self.kernel(snapped, s0, t, self.filter_energy)?, self.filter_energy),
        };
        let leak = kern.leak;

        let ps = grid.ps();
        let pref = 1.0 / (PI * hbar);
        let cols: Vec<Vec<C64>> = rows
            .par_iter()
            .map(|&s| {
                let k = qg.row_reach(s) as i64;
                let si = s as i64;
                let c: Vec<C64> = (0..=k)
                    .map(|m| {
                        let d = -k + 2 * m;
                        kern.entry(((si + d) / 2) as usize, ((si - d) / 2) as usize)
                    })
                    .collect();
                row_symbol(&c, dq, hbar, &ps)
            })
            .collect();
        let mut values = vec![0.0; grid.len()];
        let mut max_re: f64 = 0.0;
        let mut max_im: f64 = 0.0;
        for (i, col) in cols.iter().enumerate() {
            for (j, v) in col.iter().enumerate() {
                let v = v * pref;
                values[grid.index(j, i)] = v.re;
                max_re = max_re.max(v.re.abs());
                max_im = max_im.max(v.im.abs());
            }
        }
        let field = ScalarField::new(*grid, values)?;
        if leak > self.leak_tolerance {
            return numeric(format!(
                "propagator leaks to the box edge: {leak:.3e} of the position marginal lies outside the central 90%"
            ));
        }
        Ok(PropagatorSlice {
            field,
            origin: snapped,
            t,
            route: Route::Exact,
            imag_residue: if max_re > 0.0 { max_im / max_re } else { max_im },
            leak,
            filter_energy: ec,
        })
    }

    /// `U(t)`.
    pub fn unitary(&self, t: f64) -> OperatorMatrix {
        propagator_matrix(&self.eig, t, self.params.hbar())
    }

    /// Evolve a Wigner function by the exact propagator.
    ///
    /// Integrating the bare lattice kernel `G(r'', t; r', 0)` against `rho_W(r')`
    /// with the cell rule of `rho`'s grid is the same linear map as transforming
    /// `rho_W` to its operator, conjugating with `U(t)`, and transforming back;
    /// the second form is what is computed.
    pub fn evolve_wigner(&self, rho: &ScalarField, t: f64) -> Result<ScalarField> {
        self.evolve_wigner_onto(rho, t, &rho.grid)
    }

    /// [`Self::evolve_wigner`] with the result sampled on `grid`.
    pub fn evolve_wigner_onto(&self, rho: &ScalarField, t: f64, grid: &PhaseGrid) -> Result<ScalarField> {
        let conv = self.params.conv.with_norm(SymbolNorm::Wigner);
        let op = operator_of_symbol(&rho.to_complex(), self.qgrid(), &conv)?;
        let u = self.unitary(t).entries;
        let evolved = &u * &op.entries * u.adjoint();
        let out = crate::phase::weyl_symbol(&OperatorMatrix::new(*self.qgrid(), evolved)?, grid, &conv)?;
        Ok(out.re())
    }
}

struct Kernel {
    brows: Vec<Vec<C64>>,
    crows: Vec<Vec<C64>>,
    z: f64,
    leak: f64,
}

impl Kernel {
    /// `(U f P f U^dagger)[a, b] / Tr(f^2 P)`.
    fn entry(&self, a: usize, b: usize) -> C64 {
        self.crows[a].iter().zip(&self.brows[b]).map(|(c, v)| c * v.conj()).sum::<C64>() / self.z
    }
}

/// Exact propagator slice in one call.
pub fn wigner_propagator_exact(
    params: &SystemParams,
    qgrid: &QGrid,
    filter: SpectralFilter,
    origin: PhasePoint,
    t: f64,
    grid: &PhaseGrid,
) -> Result<PropagatorSlice> {
    ExactPropagator::new(*params, *qgrid, filter)?.slice(origin, t, grid)
}

/// `<O> = ∫ O_W rho_W dr` by cell quadrature.
pub fn expectation(o: &ComplexField, rho: &ScalarField) -> Result<C64> {
    if o.grid != rho.grid {
        return config("expectation needs both fields on the same grid");
    }
    let s: C64 = o.values.iter().zip(&rho.values).map(|(a, b)| a * *b).sum();
    Ok(s * rho.grid.cell_area())
}

/// Gaussian wavepacket centered at `r0` with position width `sigma`, normalized on the grid.
pub fn coherent_state(qgrid: &QGrid, r0: PhasePoint, sigma: f64, hbar: f64) -> Result<Vec<C64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return config(format!("wavepacket width must be positive, got {sigma}"));
    }
    let mut psi: Vec<C64> = (0..qgrid.n)
        .map(|x| {
            let q = qgrid.q(x);
            C64::from_polar((-(q - r0.q).powi(2) / (4.0 * sigma * sigma)).exp(), r0.p * q / hbar)
        })
        .collect();
    let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>() * qgrid.dq();
    if !(norm > 0.0) {
        return numeric("wavepacket vanishes on the grid");
    }
    let s = 1.0 / norm.sqrt();
    psi.iter_mut().for_each(|v| *v *= s);
    Ok(psi)
}

/// Spectral translation `exp(i p L / hbar)`, acting as `psi(q) -> psi(q + L)`.
pub fn displacement_matrix(qgrid: &QGrid, l: f64) -> CMatrix {
    let n = qgrid.n;
    let dq = qgrid.dq();
    let ks: Vec<f64> = (0..n)
        .map(|j| {
            let f = if j < (n + 1) / 2 { j as f64 } else { j as f64 - n as f64 };
            2.0 * PI * f / (n as f64 * dq)
        })
        .collect();
    // E[x, y] = (1/n) sum_k exp(i k (q_x - q_y + L)), indexed by x - y + n - 1
    let row: Vec<C64> = (0..2 * n - 1)
        .map(|k| {
            let delta = k as f64 - (n as f64 - 1.0);
            ks.iter().map(|&kk| C64::from_polar(1.0, kk * (l + delta * dq))).sum::<C64>() / n as f64
        })
        .collect();
    CMatrix::from_fn(n, n, |x, y| row[x + n - 1 - y])
}

/// Result of the modular-momentum consistency check.
#[derive(Clone, Debug, PartialEq)]
pub struct ModularReport {
    /// `<psi(t)| exp(i p L / hbar) |psi(t)>`.
    pub d: C64,
    /// `(i/hbar) <[H, exp(i p L / hbar)]>` from the matrix commutator.
    pub quantum_rhs: C64,
    /// `-(i/hbar) L <V'(q) exp(i p L / hbar)>`.
    pub classical_rhs: C64,
    /// `(dt, |FD - quantum_rhs|)` per step size.
    pub residuals: Vec<(f64, f64)>,
    /// `log2` of successive residual ratios.
    pub orders: Vec<f64>,
}

impl ModularReport {
    /// `|quantum - classical| / |quantum|`.
    pub fn relative_gap(&self) -> f64 {
        let q = self.quantum_rhs.norm();
        if q == 0.0 {
            return 0.0;
        }
        (self.quantum_rhs - self.classical_rhs).norm() / q
    }

    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Energy-basis data shared by the modular check and its step heuristic.
struct ModularBasis {
    /// Level coefficients of `psi(t)`.
    c: Vec<C64>,
    /// `exp(i p L / hbar)` in the energy basis.
    e: CMatrix,
    energies: Vec<f64>,
}

impl ModularBasis {
    fn new(eig: &EigenSystem, e: &CMatrix, psi_t: &[C64]) -> Self {
        let n = eig.len();
        let s = eig.states.map(|v| C64::new(v, 0.0));
        let c = (0..n).map(|k| (0..n).map(|x| psi_t[x] * s[(x, k)]).sum()).collect();
        Self { c, e: s.transpose() * e * &s, energies: eig.energies.clone() }
    }

    /// Sum of `conj(c_j) c_k E_jk f(w_jk)` with `w_jk = (E_j - E_k) / hbar`.
    fn sum(&self, hbar: f64, f: impl Fn(f64) -> C64) -> C64 {
        let n = self.c.len();
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..n {
            for k in 0..n {
                let w = (self.energies[j] - self.energies[k]) / hbar;
                acc += self.c[j].conj() * self.c[k] * self.e[(j, k)] * f(w);
            }
        }
        acc
    }
}

/// Compare the centered time derivative of `<exp(i p L / hbar)>` with its Heisenberg right-hand side.
///
/// The centered difference is summed in the energy basis as `i sin(w dt) / dt` per
/// matrix element, which is the same quantity without the cancellation of `D(t+dt) - D(t-dt)`.
pub fn modular_eom_check(
    params: &SystemParams,
    qgrid: &QGrid,
    l: f64,
    psi0: &[C64],
    t: f64,
    dts: &[f64],
) -> Result<ModularReport> {
    if psi0.len() != qgrid.n {
        return config("wavefunction length does not match the position grid");
    }
    if dts.is_empty() || dts.iter().any(|&d| !(d > 0.0)) {
        return config("dt values must be positive");
    }
    let hbar = params.hbar();
    let dq = qgrid.dq();
    let eig = EigenSystem::solve(params, qgrid)?;
    let e = displacement_matrix(qgrid, l);
    let h = build_hamiltonian(params, qgrid).entries;
    let expect = |m: &CMatrix, psi: &[C64]| -> C64 {
        let v = nalgebra::DVector::from_column_slice(psi);
        (v.adjoint() * m * &v)[(0, 0)] * dq
    };
    let psi_t = eig.evolve_state(psi0, t, hbar);
    let d = expect(&e, &psi_t);
    let comm = &h * &e - &e * &h;
    let i_over_hbar = C64::new(0.0, 1.0 / hbar);
    let quantum_rhs = i_over_hbar * expect(&comm, &psi_t);
    let vprime = CMatrix::from_fn(qgrid.n, qgrid.n, |x, y| {
        if x == y {
            C64::new(-params.force(qgrid.q(x)), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let classical_rhs = -i_over_hbar * l * expect(&(vprime * &e), &psi_t);
    let basis = ModularBasis::new(&eig, &e, &psi_t);
    let residuals: Vec<(f64, f64)> = dts
        .iter()
        .map(|&dt| {
            let fd = basis.sum(hbar, |w| C64::new(0.0, (w * dt).sin() / dt)) * dq;
            (dt, (fd - quantum_rhs).norm())
        })
        .collect();
    let orders = residuals
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect();
    Ok(ModularReport { d, quantum_rhs, classical_rhs, residuals, orders })
}

/// Three halving steps small enough for the centered difference to sit in its `dt^2` regime.
///
/// The leading error term weighs each frequency by `w^3`, the next by `w^5`; the steps keep
/// their ratio near `1e-3` and are capped at `1e-3`.
pub fn modular_default_steps(params: &SystemParams, qgrid: &QGrid, l: f64, psi0: &[C64], t: f64) -> Result<[f64; 3]> {
    if psi0.len() != qgrid.n {
        return config("wavefunction length does not match the position grid");
    }
    let hbar = params.hbar();
    let eig = EigenSystem::solve(params, qgrid)?;
    let psi_t = eig.evolve_state(psi0, t, hbar);
    let basis = ModularBasis::new(&eig, &displacement_matrix(qgrid, l), &psi_t);
    let m3 = basis.sum(hbar, |w| C64::new(w.abs().powi(3), 0.0)).norm();
    let m5 = basis.sum(hbar, |w| C64::new(w.abs().powi(5), 0.0)).norm();
    let omega = if m3 > 0.0 { (m5 / m3).sqrt() } else { 0.0 };
    let dt = if omega > 0.0 { (0.1 / omega).min(1e-3) } else { 1e-3 };
    Ok([dt, dt / 2.0, dt / 4.0])
}

/// Observables with closed-form Weyl symbols.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observable {
    Position,
    Momentum,
    Energy,
    /// `exp(i p L / hbar)`.
    Modular(f64),
}

impl Observable {
    pub fn parse(name: &str, l: f64) -> Result<Self> {
        match name {
            "q" => Ok(Observable::Position),
            "p" => Ok(Observable::Momentum),
            "H" => Ok(Observable::Energy),
            "modular" => Ok(Observable::Modular(l)),
            _ => config(format!("unknown observable '{name}'")),
        }
    }

    /// Twice the lattice Weyl symbol of [`Self::matrix`]. Its cell-quadrature pairing with a
    /// lattice Wigner function on the natural grid is exactly `Tr(rho O)`: even and odd half
    /// rows each carry half of the Wigner mass, and the lattice symbol vanishes on odd rows
    /// for diagonal operators.
    pub fn symbol(&self, params: &SystemParams, qgrid: &QGrid, grid: &PhaseGrid) -> Result<ComplexField> {
        let m = OperatorMatrix::new(*qgrid, self.matrix(params, qgrid))?;
        let mut s = crate::phase::weyl_symbol(&m, grid, &params.conv.with_norm(SymbolNorm::Weyl))?;
        s.values.iter_mut().for_each(|v| *v *= 2.0);
        Ok(s)
    }

    /// Continuum symbol. On odd half rows it differs from the lattice symbol, which carries
    /// no diagonal entries there.
    pub fn analytic_symbol(&self, params: &SystemParams, grid: &PhaseGrid) -> Result<ComplexField> {
        let hbar = params.hbar();
        ComplexField::from_fn(*grid, |r| match *self {
            Observable::Position => C64::new(r.q, 0.0),
            Observable::Momentum => C64::new(r.p, 0.0),
            Observable::Energy => C64::new(params.hamiltonian(r), 0.0),
            Observable::Modular(l) => C64::from_polar(1.0, r.p * l / hbar),
        })
    }

    /// Position-grid matrix with spectral momentum.
    pub fn matrix(&self, params: &SystemParams, qgrid: &QGrid) -> CMatrix {
        let n = qgrid.n;
        match *self {
            Observable::Position => CMatrix::from_fn(n, n, |x, y| C64::new(if x == y { qgrid.q(x) } else { 0.0 }, 0.0)),
            Observable::Energy => build_hamiltonian(params, qgrid).entries,
            Observable::Modular(l) => displacement_matrix(qgrid, l),
            Observable::Momentum => {
                let dq = qgrid.dq();
                let hbar = params.hbar();
                // Nyquist frequency dropped for even n so the matrix is odd in x - y
                let ks: Vec<f64> = (0..n)
                    .filter(|&j| 2 * j != n)
                    .map(|j| {
                        let f = if j < (n + 1) / 2 { j as f64 } else { j as f64 - n as f64 };
                        2.0 * PI * f / (n as f64 * dq)
                    })
                    .collect();
                let row: Vec<C64> = (0..2 * n - 1)
                    .map(|k| {
                        let delta = (k as f64 - (n as f64 - 1.0)) * dq;
                        ks.iter().map(|&kk| hbar * kk * C64::from_polar(1.0, kk * delta)).sum::<C64>() / n as f64
                    })
                    .collect();
                CMatrix::from_fn(n, n, |x, y| row[x + n - 1 - y])
            }
        }
    }
}

/// `<psi| M |psi>` with the grid inner product.
pub fn state_expectation(m: &CMatrix, psi: &[C64], dq: f64) -> C64 {
    let v = nalgebra::DVector::from_column_slice(psi);
    (v.adjoint() * m * &v)[(0, 0)] * dq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{weyl_symbol, wigner_of_state};

    fn harmonic() -> SystemParams {
        SystemParams::new(0.5, PotentialModel::Harmonic { omega: 2.5, qe: 0.0 }, WeylConventions::default()).unwrap()
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let qg = QGrid::new(-6.0, 6.0, 64).unwrap();
        assert!(build_hamiltonian(&harmonic(), &qg).hermiticity_residual() < 1e-12);
    }

    #[test]
    fn harmonic_spectrum() {
        let qg = QGrid::new(-8.0, 8.0, 128).unwrap();
        let eig = EigenSystem::solve(&harmonic(), &qg).unwrap();
        for k in 0..5 {
            assert!((eig.energies[k] - 2.5 * (k as f64 + 0.5)).abs() < 1e-6, "E{k} = {}", eig.energies[k]);
        }
        assert!(eig.orthonormality_residual() < 1e-10);
        assert!(eig.energies.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn morse_single_bound_state() {
        let sys = SystemParams::morse_reference();
        let qg = QGrid::new(-4.0, 16.0, 512).unwrap();
        let eig = EigenSystem::solve(&sys, &qg).unwrap();
        let below = eig.energies.iter().filter(|&&e| e < 1.0).count();
        assert_eq!(below, 1);
        assert!((eig.energies[0] - 0.859375).abs() < 1e-4, "E0 = {}", eig.energies[0]);
    }

    #[test]
    fn propagator_group_law_and_unitarity() {
        let qg = QGrid::new(-6.0, 10.0, 96).unwrap();
        let sys = SystemParams::morse_reference();
        let eig = EigenSystem::solve(&sys, &qg).unwrap();
        let id = propagator_matrix(&eig, 0.0, 1.0).entries;
        assert!((id - CMatrix::identity(96, 96)).camax() < 1e-12);
        let u1 = propagator_matrix(&eig, 0.2, 1.0).entries;
        let u2 = propagator_matrix(&eig, 0.3, 1.0).entries;
        let u12 = propagator_matrix(&eig, 0.5, 1.0).entries;
        assert!((&u1 * &u2 - &u12).camax() < 1e-9);
        assert!((&u1 * u1.adjoint() - CMatrix::identity(96, 96)).camax() < 1e-10);
    }

    #[test]
    fn propagator_symbol_time_reversal() {
        let qg = QGrid::new(-6.0, 10.0, 64).unwrap();
        let sys = SystemParams::morse_reference();
        let eig = EigenSystem::solve(&sys, &qg).unwrap();
        let grid = PhaseGrid::new(-4.0, 4.0, -6.0, 10.0, 32, 32).unwrap();
        let conv = WeylConventions::default();
        let a = weyl_propagator_symbol(&propagator_matrix(&eig, 0.4, 1.0), &grid, &conv).unwrap();
        let b = weyl_propagator_symbol(&propagator_matrix(&eig, -0.4, 1.0), &grid, &conv).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x.conj() - y).norm() < 1e-9);
        }
        let one = weyl_propagator_symbol(&propagator_matrix(&eig, 0.0, 1.0), &grid, &conv).unwrap();
        assert!(one.values.iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn short_time_symbol_is_second_order() {
        let qg = QGrid::new(-1.5, 10.5, 64).unwrap();
        let sys = SystemParams::morse_reference();
        let eig = EigenSystem::solve(&sys, &qg).unwrap();
        let grid = PhaseGrid::new(-4.0, 4.0, -1.5, 10.5, 32, 32).unwrap();
        let conv = WeylConventions::default();
        let hw = weyl_symbol(&build_hamiltonian(&sys, &qg), &grid, &conv).unwrap();
        let err = |dt: f64| {
            let u = weyl_propagator_symbol(&propagator_matrix(&eig, dt, 1.0), &grid, &conv).unwrap();
            u.values
                .iter()
                .zip(&hw.values)
                .map(|(u, h)| (u - (C64::new(0.0, -dt) * h).exp()).norm())
                .fold(0.0, f64::max)
        };
        let e1 = err(1e-3);
        let e2 = err(5e-4);
        assert!((e1 / e2).log2() >= 1.9, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn bare_t0_slice_is_single_cell_delta() {
        let qg = QGrid::new(-4.0, 16.0, 128).unwrap();
        let prop = ExactPropagator::new(SystemParams::morse_reference(), qg, SpectralFilter::Off).unwrap();
        let origin = PhasePoint::new(0.0, 0.1);
        let grid = lattice_window(&qg, origin, 32, 32, 1.0).unwrap();
        let s = prop.slice(origin, 0.0, &grid).unwrap();
        let (j, i) = grid.cell_of(s.origin).unwrap();
        let inside = s.field.at(j, i).abs() * grid.cell_area();
        assert!((inside - 1.0).abs() < 1e-12);
        assert!((s.field.abs_integral() - inside).abs() < 1e-12);
    }

    #[test]
    fn kernel_quadrature_matches_operator_evolution() {
        let qg = QGrid::new(-5.0, 5.0, 16).unwrap();
        let sys = harmonic().with_mass(0.8).unwrap();
        let prop = ExactPropagator::new(sys, qg, SpectralFilter::Off).unwrap();
        let grid = PhaseGrid::natural(&qg, 1.0).unwrap();
        let psi = coherent_state(&qg, PhasePoint::new(0.3, 0.4), 0.7, 1.0).unwrap();
        let rho = wigner_of_state(&psi, &qg, &grid, &sys.conv).unwrap();
        let t = 0.37;
        let fast = prop.evolve_wigner(&rho, t).unwrap();
        // explicit sum over origins of the bare lattice kernel
        let conv = sys.conv.with_norm(SymbolNorm::Wigner);
        let u = prop.unitary(t).entries;
        let mut slow = vec![0.0; grid.len()];
        for jp in 0..grid.np {
            for ip in 0..grid.nq {
                let s0 = qg.half_row(grid.q(ip)).unwrap();
                let pp = grid.p(jp);
                let mut pm = CMatrix::zeros(16, 16);
                let k = qg.row_reach(s0) as i64;
                for m in 0..=k {
                    let d = -k + 2 * m;
                    let a = ((s0 as i64 + d) / 2) as usize;
                    let b = ((s0 as i64 - d) / 2) as usize;
                    pm[(a, b)] = C64::from_polar(1.0, pp * d as f64 * qg.dq());
                }
                let a = OperatorMatrix::new(qg, &u * pm * u.adjoint()).unwrap();
                let g = weyl_symbol(&a, &grid, &conv).unwrap();
                let w = 2.0 * rho.at(jp, ip) * grid.cell_area();
                for (o, v) in slow.iter_mut().zip(&g.values) {
                    *o += w * v.re;
                }
            }
        }
        let slow = ScalarField::new(grid, slow).unwrap();
        assert!(fast.rms_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn free_particle_displacement_commutes() {
        let qg = QGrid::new(-10.0, 10.0, 64).unwrap();
        let sys = SystemParams::new(1.0, PotentialModel::Free, WeylConventions::default()).unwrap();
        let psi = coherent_state(&qg, PhasePoint::new(0.5, 0.0), 1.0, 1.0).unwrap();
        let r = modular_eom_check(&sys, &qg, 1.0, &psi, 0.3, &[0.02, 0.01]).unwrap();
        assert!(r.quantum_rhs.norm() < 1e-10);
        assert!(r.classical_rhs.norm() < 1e-10);
    }

    #[test]
    fn displacement_shifts_on_grid_multiples() {
        let qg = QGrid::new(-4.0, 4.0, 16).unwrap();
        let e = displacement_matrix(&qg, 2.0 * qg.dq());
        let psi: Vec<C64> = (0..16).map(|x| C64::new(x as f64, 0.0)).collect();
        let v = &e * nalgebra::DVector::from_column_slice(&psi);
        for x in 0..14 {
            assert!((v[x] - psi[x + 2]).norm() < 1e-12);
        }
    }

    #[test]
    fn filter_parsing() {
        assert_eq!("auto".parse::<SpectralFilter>().unwrap(), SpectralFilter::Auto);
        assert_eq!("none".parse::<SpectralFilter>().unwrap(), SpectralFilter::Off);
        assert_eq!("2.5".parse::<SpectralFilter>().unwrap(), SpectralFilter::Cutoff(2.5));
        assert!("-1".parse::<SpectralFilter>().is_err());
    }

    #[test]
    fn expectation_routes_agree() {
        let sys = SystemParams::morse_reference();
        let qg = QGrid::new(-3.0, 9.0, 96).unwrap();
        let ex = ExactPropagator::new(sys, qg, SpectralFilter::Auto).unwrap();
        let grid = PhaseGrid::natural(&qg, 1.0).unwrap();
        let conv = WeylConventions::default().with_norm(SymbolNorm::Wigner);
        let psi = coherent_state(&qg, PhasePoint::new(0.3, 0.1), 0.6, 1.0).unwrap();
        let rho = wigner_of_state(&psi, &qg, &grid, &conv).unwrap();
        let t = 0.4;
        let rho_t = ex.evolve_wigner(&rho, t).unwrap();
        let psi_t = ex.eig.evolve_state(&psi, t, 1.0);
        for (obs, tol) in [
            (Observable::Position, 1e-10),
            (Observable::Momentum, 1e-10),
            (Observable::Energy, 1e-10),
            (Observable::Modular(2.0 * qg.dq()), 1e-10),
        ] {
            let a = expectation(&obs.symbol(&sys, &qg, &grid).unwrap(), &rho_t).unwrap();
            let b = state_expectation(&obs.matrix(&sys, &qg), &psi_t, qg.dq());
            assert!((a - b).norm() < tol, "{obs:?}: {a} vs {b}");
            let c = expectation(&obs.analytic_symbol(&sys, &grid).unwrap(), &rho_t).unwrap();
            assert!((c - b).norm() < 3e-2 * b.norm().max(1.0), "{obs:?}: {c} vs {b}");
        }
    }

}
