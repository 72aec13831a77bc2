//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use wigprop::phase::{CMatrix, PhaseGrid, QGrid};

/// Sum of Gaussians `c exp(-((p-p0)^2 + (q-q0)^2) / 2s^2)`.
#[derive(Clone)]
pub struct Blobs(Vec<(C64, f64, f64, f64)>);

impl Blobs {
    pub fn random(seed: &mut u64, count: usize) -> Self {
        let mut rnd = || {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        Blobs(
            (0..count)
                .map(|_| (C64::new(rnd(), rnd()), 2.0 * rnd(), 2.0 * rnd(), 0.7 + 0.2 * rnd()))
                .collect(),
        )
    }

    pub fn symbol(&self, p: f64, q: f64) -> C64 {
        self.0
            .iter()
            .map(|&(c, p0, q0, s)| c * (-((p - p0).powi(2) + (q - q0).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    }

    /// `dq <x|A|y>` from the closed-form p integral of the symbol.
    pub fn matrix(&self, qg: &QGrid, hbar: f64) -> CMatrix {
        let dq = qg.dq();
        CMatrix::from_fn(qg.n, qg.n, |x, y| {
            let (qx, qy) = (qg.q(x), qg.q(y));
            let (qm, d) = ((qx + qy) / 2.0, qx - qy);
            self.0
                .iter()
                .map(|&(c, p0, q0, s)| {
                    let env = (-(qm - q0).powi(2) / (2.0 * s * s) - s * s * d * d / (2.0 * hbar * hbar)).exp();
                    c * C64::from_polar(env * s / (2.0 * PI).sqrt() / hbar, p0 * d / hbar)
                })
                .sum::<C64>()
                * dq
        })
    }
}

/// Square grid of `n` cells per side with `dp dq = pi hbar / n`, the spacing at which
/// the composition kernel sums to a discrete delta.
pub fn torus(n: usize, hbar: f64) -> PhaseGrid {
    let l = (PI * hbar * n as f64 / 4.0).sqrt();
    PhaseGrid::new(-l, l, -l, l, n, n).unwrap()
}


/// RMS gap between `moyal_compose` and the symbol of the matrix product, for one random pair on a 32x32 torus.
pub fn moyal_oracle_rms(seed: &mut u64) -> f64 {
    use wigprop::phase::{moyal_compose, weyl_symbol, ComplexField, OperatorMatrix, WeylConventions};
    let hbar = 1.0;
    let conv = WeylConventions::default();
    let grid = torus(32, hbar);
    let qg = QGrid::new(grid.qmin, grid.qmax, 256).unwrap();
    let a = Blobs::random(seed, 3);
    let b = Blobs::random(seed, 3);
    let aw = ComplexField::from_fn(grid, |r| a.symbol(r.p, r.q)).unwrap();
    let bw = ComplexField::from_fn(grid, |r| b.symbol(r.p, r.q)).unwrap();
    let fast = moyal_compose(&aw, &bw, &conv).unwrap();
    let prod = OperatorMatrix::new(qg, a.matrix(&qg, hbar) * b.matrix(&qg, hbar)).unwrap();
    // smooth kernels split evenly between the two half-row parities, so the continuum symbol is twice the lattice one
    let lattice = weyl_symbol(&prod, &grid, &conv).unwrap();
    let oracle = ComplexField::new(grid, lattice.values.iter().map(|v| v * 2.0).collect()).unwrap();
    fast.rms_diff(&oracle).unwrap()
}
