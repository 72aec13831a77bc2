//! Shared fixtures for the kernel benchmarks.

use wigprop::io::RunConfig;
use wigprop::quantum::coherent_state;
use wigprop::{ComplexField, ExactPropagator, PhaseGrid, PhasePoint, QGrid, SpectralFilter, SystemParams};

/// Morse system of the reference figure on a reduced position box.
pub fn small_morse(n: usize) -> ExactPropagator {
    let cfg = RunConfig::default();
    let qgrid = QGrid::new(cfg.qgrid.qmin, cfg.qgrid.qmax, n).expect("valid box");
    ExactPropagator::new(cfg.system, qgrid, SpectralFilter::Auto).expect("eigensolve")
}

/// Display grid of `n x n` cells over the reference window.
pub fn display(n: usize) -> PhaseGrid {
    let g = RunConfig::default().grid;
    PhaseGrid::new(g.pmin, g.pmax, g.qmin, g.qmax, n, n).expect("valid grid")
}

/// Two smooth symbols on an `n x n` grid with `dp dq = pi hbar / n`.
pub fn moyal_pair(n: usize) -> (ComplexField, ComplexField) {
    let l = (std::f64::consts::PI * n as f64 / 4.0).sqrt();
    let grid = PhaseGrid::new(-l, l, -l, l, n, n).expect("valid grid");
    let a = ComplexField::from_fn(grid, |r| (-(r.p * r.p + r.q * r.q) / 2.0).exp().into()).expect("finite");
    let b = ComplexField::from_fn(grid, |r| (-(r.p - 0.3).powi(2) - r.q * r.q).exp().into()).expect("finite");
    (a, b)
}

/// Ground-width wavepacket at the reference origin.
pub fn packet(qgrid: &QGrid) -> Vec<num_complex::Complex64> {
    let p = SystemParams::morse_reference();
    let sigma = (p.hbar() / (2.0 * p.mass * p.natural_frequency().expect("morse"))).sqrt();
    coherent_state(qgrid, PhasePoint::new(0.0, 0.1), sigma, p.hbar()).expect("normalizable")
}
