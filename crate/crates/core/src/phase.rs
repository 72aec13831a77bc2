//! Phase-space geometry, sampled fields, and the lattice Weyl transform.
//!
//! Operators live on a periodic position grid `q_x = qmin + x*dq`. Their Weyl
//! symbols are sampled on half-integer rows: row `s` sits at `qmin + s*dq/2`
//! and collects the matrix entries `A[(s+d)/2, (s-d)/2]` whose index sum is `s`.
//! Along a row the offset `q~ = d*dq` steps by `2*dq`, so the momentum period
//! of a row is `pi*hbar/dq`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{config, Error, Result};

pub type CMatrix = DMatrix<C64>;

/// Normalization applied by the Weyl transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolNorm {
    /// Plain symbol, `Tr[A d(r)]` with `Tr d = 1`. The identity maps to 1.
    Weyl,
    /// Wigner function normalization, integrates to `Tr A`.
    Wigner,
}

/// Units and normalization shared by every transform in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeylConventions {
    hbar: f64,
    norm: SymbolNorm,
}

impl WeylConventions {
    pub fn new(hbar: f64, norm: SymbolNorm) -> Result<Self> {
        if !(hbar.is_finite() && hbar > 0.0) {
            return config(format!("hbar must be positive, got {hbar}"));
        }
        Ok(Self { hbar, norm })
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn norm(&self) -> SymbolNorm {
        self.norm
    }

    /// Sign of the exponent in position-to-momentum synthesis, `e^{+i p q~ / hbar}`.
    pub fn fourier_sign(&self) -> f64 {
        1.0
    }

    pub fn with_norm(&self, norm: SymbolNorm) -> Self {
        Self { hbar: self.hbar, norm }
    }

    /// Prefactor multiplying the raw antidiagonal sum.
    fn prefactor(&self) -> f64 {
        match self.norm {
            SymbolNorm::Weyl => 1.0,
            SymbolNorm::Wigner => 1.0 / (PI * self.hbar),
        }
    }
}

impl Default for WeylConventions {
    fn default() -> Self {
        Self { hbar: 1.0, norm: SymbolNorm::Weyl }
    }
}

/// A point `r = (p, q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub p: f64,
    pub q: f64,
}

impl PhasePoint {
    pub const ORIGIN: PhasePoint = PhasePoint { p: 0.0, q: 0.0 };

    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q }
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.q.is_finite()
    }
}

impl std::ops::Add for PhasePoint {
    type Output = PhasePoint;
    fn add(self, o: PhasePoint) -> PhasePoint {
        PhasePoint::new(self.p + o.p, self.q + o.q)
    }
}

impl std::ops::Sub for PhasePoint {
    type Output = PhasePoint;
    fn sub(self, o: PhasePoint) -> PhasePoint {
        PhasePoint::new(self.p - o.p, self.q - o.q)
    }
}

impl std::ops::Mul<f64> for PhasePoint {
    type Output = PhasePoint;
    fn mul(self, s: f64) -> PhasePoint {
        PhasePoint::new(self.p * s, self.q * s)
    }
}

/// `a ∧ b = a.p*b.q - a.q*b.p`.
pub fn symplectic_product(a: PhasePoint, b: PhasePoint) -> f64 {
    a.p * b.q - a.q * b.p
}

/// Twice the oriented area of the triangle `(a, b, c)`.
///
/// The three terms are summed in sorted order, so cyclic permutations agree bit for bit.
pub fn triangle_area(a: PhasePoint, b: PhasePoint, c: PhasePoint) -> f64 {
    let mut t = [symplectic_product(a, b), symplectic_product(b, c), symplectic_product(c, a)];
    t.sort_by(f64::total_cmp);
    2.0 * (t[0] + t[1] + t[2])
}

/// Periodic position grid on `[qmin, qmax)` with `n` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QGrid {
    pub qmin: f64,
    pub qmax: f64,
    pub n: usize,
}

impl QGrid {
    pub fn new(qmin: f64, qmax: f64, n: usize) -> Result<Self> {
        if !(qmin.is_finite() && qmax.is_finite() && qmax > qmin) {
            return config(format!("position grid needs qmax > qmin, got [{qmin}, {qmax}]"));
        }
        if n < 4 {
            return config(format!("position grid needs at least 4 points, got {n}"));
        }
        Ok(Self { qmin, qmax, n })
    }

    pub fn dq(&self) -> f64 {
        (self.qmax - self.qmin) / self.n as f64
    }

    pub fn q(&self, x: usize) -> f64 {
        self.qmin + x as f64 * self.dq()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|x| self.q(x)).collect()
    }

    /// Index of the grid point nearest to `q`, if inside the box.
    pub fn nearest(&self, q: f64) -> Option<usize> {
        let x = ((q - self.qmin) / self.dq()).round();
        if x < 0.0 || x >= self.n as f64 {
            None
        } else {
            Some(x as usize)
        }
    }

    /// Half-integer row index of `q`, which must sit on the half lattice.
    pub fn half_row(&self, q: f64) -> Result<usize> {
        let s = 2.0 * (q - self.qmin) / self.dq();
        let r = s.round();
        if (s - r).abs() > 1e-6 {
            return config(format!(
                "q = {q} is not on the position half-lattice (spacing {})",
                self.dq() / 2.0
            ));
        }
        if r < 0.0 || r > (2 * self.n - 2) as f64 {
            return config(format!("q = {q} lies outside the position box"));
        }
        Ok(r as usize)
    }

    /// Number of steps `K` on half row `s`; offsets run over `d = -K, -K+2, ..., K`.
    pub fn row_reach(&self, s: usize) -> usize {
        s.min(2 * self.n - 2 - s)
    }
}

/// Rectangular phase-space grid of `np x nq` cells. Values are sampled at cell centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseGrid {
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub np: usize,
    pub nq: usize,
}

impl PhaseGrid {
    pub fn new(pmin: f64, pmax: f64, qmin: f64, qmax: f64, np: usize, nq: usize) -> Result<Self> {
        let finite = [pmin, pmax, qmin, qmax].iter().all(|v| v.is_finite());
        if !finite || pmax <= pmin || qmax <= qmin {
            return config(format!(
                "phase grid bounds must satisfy pmax > pmin and qmax > qmin, got p [{pmin}, {pmax}] q [{qmin}, {qmax}]"
            ));
        }
        if np < 2 || nq < 2 {
            return config(format!("phase grid needs np, nq >= 2, got {np} x {nq}"));
        }
        Ok(Self { pmin, pmax, qmin, qmax, np, nq })
    }

    pub fn dp(&self) -> f64 {
        (self.pmax - self.pmin) / self.np as f64
    }

    pub fn dq(&self) -> f64 {
        (self.qmax - self.qmin) / self.nq as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dp() * self.dq()
    }

    pub fn len(&self) -> usize {
        self.np * self.nq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p(&self, j: usize) -> f64 {
        self.pmin + (j as f64 + 0.5) * self.dp()
    }

    pub fn q(&self, i: usize) -> f64 {
        self.qmin + (i as f64 + 0.5) * self.dq()
    }

    pub fn point(&self, j: usize, i: usize) -> PhasePoint {
        PhasePoint::new(self.p(j), self.q(i))
    }

    /// Flat index, p slow and q fast.
    pub fn index(&self, j: usize, i: usize) -> usize {
        j * self.nq + i
    }

    pub fn ps(&self) -> Vec<f64> {
        (0..self.np).map(|j| self.p(j)).collect()
    }

    pub fn qs(&self) -> Vec<f64> {
        (0..self.nq).map(|i| self.q(i)).collect()
    }

    /// Cell `(j, i)` containing `r`, if any.
    pub fn cell_of(&self, r: PhasePoint) -> Option<(usize, usize)> {
        let fj = ((r.p - self.pmin) / self.dp()).floor();
        let fi = ((r.q - self.qmin) / self.dq()).floor();
        if fj < 0.0 || fi < 0.0 || fj >= self.np as f64 || fi >= self.nq as f64 {
            return None;
        }
        Some((fj as usize, fi as usize))
    }

    pub fn contains(&self, r: PhasePoint) -> bool {
        self.cell_of(r).is_some()
    }

    /// Grid of `np x nq` cells whose centers include `center` exactly.
    pub fn centered(center: PhasePoint, dp: f64, dq: f64, np: usize, nq: usize) -> Result<Self> {
        let jc = (np / 2) as f64 + 0.5;
        let ic = (nq / 2) as f64 + 0.5;
        let pmin = center.p - jc * dp;
        let qmin = center.q - ic * dq;
        Self::new(pmin, pmin + np as f64 * dp, qmin, qmin + nq as f64 * dq, np, nq)
    }

    /// The full lattice of a position grid: every half row, `n` momenta over one period.
    pub fn natural(qgrid: &QGrid, hbar: f64) -> Result<Self> {
        let dq = qgrid.dq();
        let period = PI * hbar / dq;
        let nq = 2 * qgrid.n - 1;
        let half = dq / 2.0;
        Self::new(
            -period / 2.0,
            period / 2.0,
            qgrid.qmin - half / 2.0,
            qgrid.qmin - half / 2.0 + nq as f64 * half,
            qgrid.n,
            nq,
        )
    }

    /// Same grid with a different number of p cells over the same p range.
    pub fn with_np(&self, np: usize) -> Result<Self> {
        Self::new(self.pmin, self.pmax, self.qmin, self.qmax, np, self.nq)
    }
}

fn check_values<T>(grid: &PhaseGrid, values: &[T], finite: impl Fn(&T) -> bool) -> Result<()> {
    if values.len() != grid.len() {
        return config(format!(
            "field has {} values, grid needs {}",
            values.len(),
            grid.len()
        ));
    }
    if let Some(k) = values.iter().position(|v| !finite(v)) {
        return Err(Error::Numeric(format!("non-finite field value at flat index {k}")));
    }
    Ok(())
}

/// Real values on a phase grid, row-major with p slow.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values, |v| v.is_finite())?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: PhaseGrid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(PhasePoint) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.np {
            for i in 0..grid.nq {
                values.push(f(grid.point(j, i)));
            }
        }
        Self::new(grid, values)
    }

    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.values[self.grid.index(j, i)]
    }

    /// Midpoint-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn abs_integral(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Cell `(j, i)` of the largest absolute value. Ties resolve to the first.
    pub fn argmax_abs(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if v.abs() > self.values[best].abs() {
                best = k;
            }
        }
        (best / self.grid.nq, best % self.grid.nq)
    }

    pub fn rms_diff(&self, other: &ScalarField) -> Result<f64> {
        if self.grid != other.grid {
            return config("fields live on different grids");
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).powi(2)).sum();
        Ok((s / self.values.len() as f64).sqrt())
    }

    pub fn to_complex(&self) -> ComplexField {
        ComplexField {
            grid: self.grid,
            values: self.values.iter().map(|&v| C64::new(v, 0.0)).collect(),
        }
    }
}

/// Complex values on a phase grid, row-major with p slow.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub grid: PhaseGrid,
    pub values: Vec<C64>,
}

impl ComplexField {
    pub fn new(grid: PhaseGrid, values: Vec<C64>) -> Result<Self> {
        check_values(&grid, &values, |v| v.re.is_finite() && v.im.is_finite())?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(PhasePoint) -> C64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.np {
            for i in 0..grid.nq {
                values.push(f(grid.point(j, i)));
            }
        }
        Self::new(grid, values)
    }

    pub fn at(&self, j: usize, i: usize) -> C64 {
        self.values[self.grid.index(j, i)]
    }

    pub fn re(&self) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values.iter().map(|v| v.re).collect() }
    }

    pub fn im(&self) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values.iter().map(|v| v.im).collect() }
    }

    pub fn max_abs_re(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.re.abs()))
    }

    pub fn max_abs_im(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.im.abs()))
    }

    pub fn rms_diff(&self, other: &ComplexField) -> Result<f64> {
        if self.grid != other.grid {
            return config("fields live on different grids");
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        Ok((s / self.values.len() as f64).sqrt())
    }
}

/// Matrix `<q_x|A|q_y>` on a position grid. Entries are the grid-normalized
/// elements, so the identity operator is the identity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    pub qgrid: QGrid,
    pub entries: CMatrix,
}

impl OperatorMatrix {
    pub fn new(qgrid: QGrid, entries: CMatrix) -> Result<Self> {
        if entries.nrows() != qgrid.n || entries.ncols() != qgrid.n {
            return config(format!(
                "operator is {}x{}, position grid has {} points",
                entries.nrows(),
                entries.ncols(),
                qgrid.n
            ));
        }
        Ok(Self { qgrid, entries })
    }

    pub fn identity(qgrid: QGrid) -> Self {
        Self { qgrid, entries: CMatrix::identity(qgrid.n, qgrid.n) }
    }

    /// Diagonal operator `f(q)`.
    pub fn diagonal(qgrid: QGrid, f: impl Fn(f64) -> f64) -> Self {
        let mut m = CMatrix::zeros(qgrid.n, qgrid.n);
        for x in 0..qgrid.n {
            m[(x, x)] = C64::new(f(qgrid.q(x)), 0.0);
        }
        Self { qgrid, entries: m }
    }

    /// `|psi><psi|` for a wavefunction normalized under `dq` quadrature.
    pub fn projector(qgrid: QGrid, psi: &[C64]) -> Result<Self> {
        if psi.len() != qgrid.n {
            return config("wavefunction length does not match the position grid");
        }
        let dq = qgrid.dq();
        let m = CMatrix::from_fn(qgrid.n, qgrid.n, |x, y| psi[x] * psi[y].conj() * dq);
        Ok(Self { qgrid, entries: m })
    }

    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.qgrid.n;
        let mut r: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                r = r.max((self.entries[(x, y)] - self.entries[(y, x)].conj()).norm());
            }
        }
        r
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }
}

/// Entries of half row `s`, for `d = -K, -K+2, ..., K`.
pub(crate) fn antidiagonal(a: &CMatrix, qgrid: &QGrid, s: usize) -> Vec<C64> {
    let k = qgrid.row_reach(s) as i64;
    let s = s as i64;
    (0..=k)
        .map(|m| {
            let d = -k + 2 * m;
            a[(((s + d) / 2) as usize, ((s - d) / 2) as usize)]
        })
        .collect()
}

/// `sum_m c_m exp(-i p d_m dq / hbar)` with `d_m = -K + 2m`, at each momentum.
pub(crate) fn row_symbol(c: &[C64], dq: f64, hbar: f64, ps: &[f64]) -> Vec<C64> {
    let k = (c.len() - 1) as f64;
    ps.iter()
        .map(|&p| {
            let z = C64::from_polar(1.0, -2.0 * p * dq / hbar);
            let mut acc = C64::new(0.0, 0.0);
            for &cm in c.iter().rev() {
                acc = acc * z + cm;
            }
            acc * C64::from_polar(1.0, p * k * dq / hbar)
        })
        .collect()
}

fn grid_rows(qgrid: &QGrid, grid: &PhaseGrid) -> Result<Vec<usize>> {
    (0..grid.nq).map(|i| qgrid.half_row(grid.q(i))).collect()
}

/// Weyl symbol of an operator, sampled on `grid`.
///
/// The q cell centers of `grid` must fall on the position half-lattice of
/// `a.qgrid`, and `grid.np` may not exceed the number of position points.
pub fn weyl_symbol(a: &OperatorMatrix, grid: &PhaseGrid, conv: &WeylConventions) -> Result<ComplexField> {
    let qgrid = &a.qgrid;
    if grid.np > qgrid.n {
        return config(format!(
            "np = {} exceeds the offset transform size {}",
            grid.np, qgrid.n
        ));
    }
    let rows = grid_rows(qgrid, grid)?;
    let ps = grid.ps();
    let pref = conv.prefactor();
    let cols: Vec<Vec<C64>> = rows
        .par_iter()
        .map(|&s| {
            let c = antidiagonal(&a.entries, qgrid, s);
            row_symbol(&c, qgrid.dq(), conv.hbar(), &ps)
        })
        .collect();
    let mut values = vec![C64::new(0.0, 0.0); grid.len()];
    for (i, col) in cols.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            values[grid.index(j, i)] = v * pref;
        }
    }
    ComplexField::new(*grid, values)
}

/// Periodic band-limited interpolation weight for `n` unit-spaced samples at offset `u`.
fn trig_kernel(u: f64, n: usize) -> f64 {
    let r = u.rem_euclid(n as f64);
    if r.abs() < 1e-12 || (n as f64 - r).abs() < 1e-12 {
        return 1.0;
    }
    let nf = n as f64;
    let num = (PI * u).sin();
    if n % 2 == 1 {
        num / (nf * (PI * u / nf).sin())
    } else {
        num / (nf * (PI * u / nf).tan())
    }
}

/// Operator whose symbol is `field`; the adjoint of [`weyl_symbol`].
///
/// Rows of the lattice that `field` does not sample are filled by periodic
/// band-limited interpolation across the field's q window; rows outside the
/// window are zero. The momentum integral is the midpoint rule on `field`'s
/// p cells, which is exact when the cells tile one momentum period with
/// `np >= K+1` samples, and spectrally accurate for symbols that decay inside
/// the window.
pub fn operator_of_symbol(field: &ComplexField, qgrid: &QGrid, conv: &WeylConventions) -> Result<OperatorMatrix> {
    let grid = &field.grid;
    let rows = grid_rows(qgrid, grid)?;
    let stride = if rows.len() > 1 { rows[1] as f64 - rows[0] as f64 } else { 1.0 };
    let s0 = rows[0] as f64;
    let n = qgrid.n;
    let dq = qgrid.dq();
    let hbar = conv.hbar();
    let ps = grid.ps();
    // midpoint-rule weight of the inverse p transform, undoing the prefactor
    let w = dq * grid.dp() / (PI * hbar) / conv.prefactor();
    let window = (s0 - stride / 2.0, s0 + (grid.nq as f64 - 0.5) * stride);

    let row_of: std::collections::HashMap<usize, usize> =
        rows.iter().enumerate().map(|(i, &s)| (s, i)).collect();

    let entries: Vec<(usize, Vec<C64>)> = (0..2 * n - 1)
        .into_par_iter()
        .filter_map(|s| {
            let sf = s as f64;
            if sf < window.0 - 1e-9 || sf > window.1 + 1e-9 {
                return None;
            }
            let line: Vec<C64> = if let Some(&i) = row_of.get(&s) {
                (0..grid.np).map(|j| field.at(j, i)).collect()
            } else {
                let u = (sf - s0) / stride;
                let wts: Vec<f64> = (0..grid.nq).map(|i| trig_kernel(u - i as f64, grid.nq)).collect();
                (0..grid.np)
                    .map(|j| {
                        let mut acc = C64::new(0.0, 0.0);
                        for (i, wt) in wts.iter().enumerate() {
                            acc += field.at(j, i) * *wt;
                        }
                        acc
                    })
                    .collect()
            };
            let k = qgrid.row_reach(s) as i64;
            let c: Vec<C64> = (0..=k)
                .map(|m| {
                    let d = (-k + 2 * m) as f64;
                    let mut acc = C64::new(0.0, 0.0);
                    for (j, v) in line.iter().enumerate() {
                        acc += v * C64::from_polar(1.0, ps[j] * d * dq / hbar);
                    }
                    acc * w
                })
                .collect();
            Some((s, c))
        })
        .collect();

    let mut m = CMatrix::zeros(n, n);
    for (s, c) in entries {
        let k = qgrid.row_reach(s) as i64;
        let s = s as i64;
        for (idx, v) in c.into_iter().enumerate() {
            let d = -k + 2 * idx as i64;
            m[(((s + d) / 2) as usize, ((s - d) / 2) as usize)] = v;
        }
    }
    OperatorMatrix::new(*qgrid, m)
}

/// Wigner function of a pure state.
pub fn wigner_of_state(psi: &[C64], qgrid: &QGrid, grid: &PhaseGrid, conv: &WeylConventions) -> Result<ScalarField> {
    if psi.len() != qgrid.n {
        return config("wavefunction length does not match the position grid");
    }
    let dq = qgrid.dq();
    let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>() * dq;
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Precondition(format!("wavefunction norm is {norm}, expected 1")));
    }
    if grid.np > qgrid.n {
        return config(format!("np = {} exceeds the offset transform size {}", grid.np, qgrid.n));
    }
    let rows = grid_rows(qgrid, grid)?;
    let ps = grid.ps();
    let hbar = conv.hbar();
    let pref = 1.0 / (PI * hbar);
    let cols: Vec<Vec<C64>> = rows
        .par_iter()
        .map(|&s| {
            let k = qgrid.row_reach(s) as i64;
            let si = s as i64;
            let c: Vec<C64> = (0..=k)
                .map(|m| {
                    let d = -k + 2 * m;
                    psi[((si + d) / 2) as usize] * psi[((si - d) / 2) as usize].conj() * dq
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
    if max_im > 1e-10 * max_re.max(1.0) {
        return Err(Error::Numeric(format!("Wigner function has imaginary residue {max_im}")));
    }
    ScalarField::new(*grid, values)
}

/// Symbol of the operator product, by direct quadrature of the composition integral
/// `A12(r) = (pi hbar)^-2 ∫∫ A1(r1) A2(r2) exp(i Δ3(r2, r1, r) / hbar)`.
///
/// The kernel factors as `exp(2i r1∧(r-r2)/hbar) exp(2i r∧r2/hbar)`, so the
/// inner integral is a symplectic Fourier transform of `A1` on the lattice of
/// grid differences, evaluated once and reused for every output point.
pub fn moyal_compose(a: &ComplexField, b: &ComplexField, conv: &WeylConventions) -> Result<ComplexField> {
    if a.grid != b.grid {
        return config("moyal_compose needs both symbols on the same grid");
    }
    let g = a.grid;
    let hbar = conv.hbar();
    let (np, nq) = (g.np, g.nq);
    let (dp, dq) = (g.dp(), g.dq());
    let area = g.cell_area();
    let ps = g.ps();
    let qs = g.qs();
    let nup = 2 * np - 1;
    let nuq = 2 * nq - 1;

    // half[(j1, iu)] = sum_i1 A(j1, i1) exp(-2i q_i1 u_p / hbar); u_p = (iu - (np-1)) dp
    // ahat[(ju, iu)] = area * sum_j1 exp(2i p_j1 u_q / hbar) half(j1, iu); u_q = (ju - (nq-1)) dq
    let half: Vec<Vec<C64>> = (0..np)
        .into_par_iter()
        .map(|j1| {
            (0..nup)
                .map(|iu| {
                    let up = (iu as f64 - (np as f64 - 1.0)) * dp;
                    let mut acc = C64::new(0.0, 0.0);
                    for i1 in 0..nq {
                        acc += a.at(j1, i1) * C64::from_polar(1.0, -2.0 * qs[i1] * up / hbar);
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let ahat: Vec<Vec<C64>> = (0..nuq)
        .into_par_iter()
        .map(|ju| {
            let uq = (ju as f64 - (nq as f64 - 1.0)) * dq;
            let tw: Vec<C64> = (0..np).map(|j1| C64::from_polar(area, 2.0 * ps[j1] * uq / hbar)).collect();
            (0..nup)
                .map(|iu| {
                    let mut acc = C64::new(0.0, 0.0);
                    for j1 in 0..np {
                        acc += tw[j1] * half[j1][iu];
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let pref = area / (PI * hbar).powi(2);
    let values: Vec<C64> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (j, i) = (k / nq, k % nq);
            let (p, q) = (ps[j], qs[i]);
            let mut acc = C64::new(0.0, 0.0);
            for j2 in 0..np {
                let iu = j + (np - 1) - j2;
                for i2 in 0..nq {
                    let ju = i + (nq - 1) - i2;
                    // r ∧ r2 = p q2 - q p2
                    let ph = 2.0 * (p * qs[i2] - q * ps[j2]) / hbar;
                    acc += b.at(j2, i2) * C64::from_polar(1.0, ph) * ahat[ju][iu];
                }
            }
            acc * pref
        })
        .collect();
    ComplexField::new(g, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn symplectic_product_examples() {
        let e_p = PhasePoint::new(1.0, 0.0);
        let e_q = PhasePoint::new(0.0, 1.0);
        assert_eq!(symplectic_product(e_p, e_q), 1.0);
        assert_eq!(symplectic_product(e_q, e_p), -1.0);
        let r = PhasePoint::new(0.3, -1.7);
        assert_eq!(symplectic_product(r, r), 0.0);
    }

    #[test]
    fn triangle_area_examples() {
        let o = PhasePoint::ORIGIN;
        let b = PhasePoint::new(1.0, 0.0);
        let cc = PhasePoint::new(0.0, 1.0);
        assert_eq!(triangle_area(o, b, cc), 2.0);
        let r = PhasePoint::new(0.4, 2.0);
        assert_eq!(triangle_area(r, r, r), 0.0);
        let b2 = PhasePoint::new(-0.7, 1.3);
        let c2 = PhasePoint::new(2.1, 0.4);
        assert_eq!(triangle_area(o, b2, c2), 2.0 * symplectic_product(b2, c2));
    }

    #[test]
    fn grid_geometry() {
        let g = PhaseGrid::new(-1.0, 1.0, 0.0, 4.0, 4, 8).unwrap();
        assert_eq!(g.dp(), 0.5);
        assert_eq!(g.dq(), 0.5);
        assert_eq!(g.cell_area(), 0.25);
        assert_eq!(g.index(1, 2), 10);
        assert_eq!(g.cell_of(PhasePoint::new(0.1, 1.2)), Some((2, 2)));
        assert_eq!(g.cell_of(PhasePoint::new(1.1, 1.2)), None);
        assert!(PhaseGrid::new(1.0, 1.0, 0.0, 1.0, 2, 2).is_err());
        assert!(PhaseGrid::new(0.0, 1.0, 0.0, 1.0, 1, 2).is_err());
    }

    #[test]
    fn centered_grid_has_center_cell() {
        let c0 = PhasePoint::new(0.3, -0.2);
        let g = PhaseGrid::centered(c0, 0.1, 0.05, 16, 9).unwrap();
        let (j, i) = g.cell_of(c0).unwrap();
        assert!((g.p(j) - c0.p).abs() < 1e-12);
        assert!((g.q(i) - c0.q).abs() < 1e-12);
    }

    #[test]
    fn half_rows() {
        let qg = QGrid::new(-2.0, 2.0, 8).unwrap();
        assert_eq!(qg.dq(), 0.5);
        assert_eq!(qg.half_row(-2.0).unwrap(), 0);
        assert_eq!(qg.half_row(-1.75).unwrap(), 1);
        assert_eq!(qg.half_row(1.5).unwrap(), 14);
        assert!(qg.half_row(1.75).is_err());
        assert!(qg.half_row(-1.6).is_err());
        assert_eq!(qg.row_reach(0), 0);
        assert_eq!(qg.row_reach(7), 7);
        assert_eq!(qg.row_reach(10), 4);
    }

    #[test]
    fn identity_symbol_is_one() {
        let qg = QGrid::new(-4.0, 4.0, 32).unwrap();
        // cells of 2 dq, centers on integer points
        let g = PhaseGrid::new(-3.0, 3.0, -4.0, 4.0, 12, 16).unwrap();
        let w = weyl_symbol(&OperatorMatrix::identity(qg), &g, &WeylConventions::default()).unwrap();
        for v in &w.values {
            assert!((v - c(1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn position_symbol_is_q() {
        let qg = QGrid::new(-4.0, 4.0, 32).unwrap();
        let g = PhaseGrid::new(-3.0, 3.0, -4.0, 4.0, 12, 16).unwrap();
        let w = weyl_symbol(&OperatorMatrix::diagonal(qg, |q| q), &g, &WeylConventions::default()).unwrap();
        for j in 0..g.np {
            for i in 0..g.nq {
                assert!((w.at(j, i) - c(g.q(i))).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn np_larger_than_n_is_rejected() {
        let qg = QGrid::new(-4.0, 4.0, 8).unwrap();
        let g = PhaseGrid::new(-3.0, 3.0, -4.0, 4.0, 16, 4).unwrap();
        assert!(weyl_symbol(&OperatorMatrix::identity(qg), &g, &WeylConventions::default()).is_err());
    }

    #[test]
    fn trig_kernel_interpolates_samples() {
        for n in [5, 6] {
            for k in 0..n {
                let v = trig_kernel(k as f64, n);
                assert!((v - if k == 0 { 1.0 } else { 0.0 }).abs() < 1e-12, "n={n} k={k} v={v}");
            }
        }
        // a band-limited periodic function is reproduced between samples
        let n = 9;
        let f = |x: f64| (2.0 * PI * x / n as f64).cos() + 0.3 * (4.0 * PI * x / n as f64).sin();
        let u = 2.37;
        let interp: f64 = (0..n).map(|i| f(i as f64) * trig_kernel(u - i as f64, n)).sum();
        assert!((interp - f(u)).abs() < 1e-12);
    }

    #[test]
    fn natural_lattice_round_trip_is_exact() {
        let qg = QGrid::new(-3.0, 3.0, 12).unwrap();
        let g = PhaseGrid::natural(&qg, 1.0).unwrap();
        let mut seed = 7u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let m = CMatrix::from_fn(12, 12, |_, _| C64::new(rnd(), rnd()));
        let a = OperatorMatrix::new(qg, m).unwrap();
        for norm in [SymbolNorm::Weyl, SymbolNorm::Wigner] {
            let conv = WeylConventions::new(1.0, norm).unwrap();
            let w = weyl_symbol(&a, &g, &conv).unwrap();
            let back = operator_of_symbol(&w, &qg, &conv).unwrap();
            let err = (&back.entries - &a.entries).norm() / a.entries.norm();
            assert!(err < 1e-12, "round trip error {err}");
        }
    }

    #[test]
    fn non_normalized_state_is_rejected() {
        let qg = QGrid::new(-3.0, 3.0, 16).unwrap();
        let g = PhaseGrid::new(-2.0, 2.0, -3.0, 3.0, 8, 8).unwrap();
        let psi = vec![C64::new(1.0, 0.0); 16];
        let err = wigner_of_state(&psi, &qg, &g, &WeylConventions::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn moyal_grid_mismatch_is_rejected() {
        let g1 = PhaseGrid::new(-1.0, 1.0, -1.0, 1.0, 4, 4).unwrap();
        let g2 = PhaseGrid::new(-1.0, 1.0, -1.0, 1.0, 4, 6).unwrap();
        let a = ComplexField::from_fn(g1, |_| c(1.0)).unwrap();
        let b = ComplexField::from_fn(g2, |_| c(1.0)).unwrap();
        assert!(moyal_compose(&a, &b, &WeylConventions::default()).is_err());
    }
}
