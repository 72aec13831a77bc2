//! Semiclassical Wigner propagator from pairs of classical trajectories.
//!
//! A pair starts at `r' +- rt'/2` and both members run under the full flow. Its
//! endpoint midpoint receives `2 (4/h) cos(S/hbar - nu pi/4) / |det(M+ - M-)|^(1/2)`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::classical::{default_step, flow, rk4_step, steps, StabilityMatrix};
use crate::error::{config, numeric, Result};
use crate::models::SystemParams;
use crate::phase::{symplectic_product, PhaseGrid, PhasePoint, ScalarField};
use crate::quantum::{PropagatorSlice, Route};

/// Offset rows handled by one worker task.
const BLOCK_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRoot {
    pub offset: PhasePoint,
    pub plus: PhasePoint,
    pub minus: PhasePoint,
    pub midpoint: PhasePoint,
    pub action: f64,
    pub maslov: u32,
    pub detdiff: f64,
    /// Zero when degenerate.
    pub amplitude: f64,
    pub degenerate: bool,
    pub m_plus: StabilityMatrix,
    pub m_minus: StabilityMatrix,
}

impl PairRoot {
    /// `d rbar'' / d rt' = (M+ - M-) / 4`.
    pub fn jacobian(&self) -> StabilityMatrix {
        self.m_plus.sub(&self.m_minus).scale(0.25)
    }

    /// `cos(S/hbar - nu pi/4)`.
    pub fn phase_factor(&self, hbar: f64) -> f64 {
        (self.action / hbar - self.maslov as f64 * PI / 4.0).cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanConfig {
    /// Half-widths of the offset grid in `p` and `q`.
    pub extent: PhasePoint,
    pub np: usize,
    pub nq: usize,
    /// Relative degeneracy threshold, scaled by `max(1, |M+| |M-|)`.
    pub eps_det: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Seeds per root search.
    pub multistart: usize,
    /// Integration step; `None` uses the classical default.
    pub dt: Option<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            extent: PhasePoint::new(4.0, 4.0),
            np: 512,
            nq: 512,
            eps_det: 1e-10,
            newton_tol: 1e-8,
            max_iter: 50,
            multistart: 16,
            dt: None,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_det > 0.0) {
            return config(format!("eps_det must be positive, got {}", self.eps_det));
        }
        if self.np < 2 || self.nq < 2 {
            return config(format!("offset resolution must be at least 2, got {}x{}", self.np, self.nq));
        }
        if !(self.extent.p > 0.0 && self.extent.q > 0.0 && self.extent.is_finite()) {
            return config("offset extent must be positive");
        }
        if !(self.newton_tol > 0.0) || self.max_iter == 0 || self.multistart == 0 {
            return config("newton settings must be positive");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return config(format!("dt must be positive, got {dt}"));
            }
        }
        Ok(())
    }

    /// Extent set to four times the `|G|`-weighted spread of `slice` in each direction.
    pub fn with_extent_from(mut self, slice: &PropagatorSlice) -> Result<Self> {
        let f = &slice.field;
        let g = f.grid;
        let (mut w, mut mp, mut mq, mut pp, mut qq) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..g.np {
            for i in 0..g.nq {
                let a = f.at(j, i).abs();
                let r = g.point(j, i);
                w += a;
                mp += a * r.p;
                mq += a * r.q;
                pp += a * r.p * r.p;
                qq += a * r.q * r.q;
            }
        }
        if !(w > 0.0) {
            return numeric("cannot size the offset grid from an empty slice");
        }
        let (mp, mq) = (mp / w, mq / w);
        let sp = (pp / w - mp * mp).max(0.0).sqrt();
        let sq = (qq / w - mq * mq).max(0.0).sqrt();
        self.extent = PhasePoint::new(4.0 * sp.max(g.dp()), 4.0 * sq.max(g.dq()));
        Ok(self)
    }

    fn step(&self, params: &SystemParams, t: f64) -> f64 {
        self.dt.unwrap_or_else(|| default_step(params, t))
    }

    /// Offset sample spacing `(dp, dq)`.
    pub fn spacing(&self) -> (f64, f64) {
        (2.0 * self.extent.p / self.np as f64, 2.0 * self.extent.q / self.nq as f64)
    }

    /// Cell-centred offset sample `(j, i)`.
    pub fn offset(&self, j: usize, i: usize) -> PhasePoint {
        let (dp, dq) = self.spacing();
        PhasePoint::new(-self.extent.p + (j as f64 + 0.5) * dp, -self.extent.q + (i as f64 + 0.5) * dq)
    }
}

fn point(y: &[f64; 13], k: usize) -> PhasePoint {
    PhasePoint::new(y[k], y[k + 1])
}

fn matrix(y: &[f64; 13], k: usize) -> StabilityMatrix {
    StabilityMatrix([[y[k], y[k + 1]], [y[k + 2], y[k + 3]]])
}

/// Action integrand `rt ^ d(rbar)/dt - H(r+) + H(r-)`.
pub fn action_rate(params: &SystemParams, plus: PhasePoint, minus: PhasePoint) -> f64 {
    let vp = PhasePoint::new(params.force(plus.q), plus.p / params.mass);
    let vm = PhasePoint::new(params.force(minus.q), minus.p / params.mass);
    let rbar_dot = (vp + vm) * 0.5;
    symplectic_product(plus - minus, rbar_dot) - params.hamiltonian(plus) + params.hamiltonian(minus)
}

fn pair_flow(params: &SystemParams, y: &[f64; 13]) -> [f64; 13] {
    let mut d = [0.0; 13];
    for (k, m) in [(0usize, 4usize), (2, 8)] {
        let s = [y[k], y[k + 1], y[m], y[m + 1], y[m + 2], y[m + 3]];
        let f = flow(params, &s);
        d[k] = f[0];
        d[k + 1] = f[1];
        d[m..m + 4].copy_from_slice(&f[2..]);
    }
    d[12] = action_rate(params, point(y, 0), point(y, 2));
    d
}

fn det_threshold(eps: f64, a: &StabilityMatrix, b: &StabilityMatrix) -> f64 {
    eps * (a.norm() * b.norm()).max(1.0)
}

fn sign_of(det: f64, thr: f64) -> i8 {
    if det > thr {
        1
    } else if det < -thr {
        -1
    } else {
        0
    }
}

fn pair_with(params: &SystemParams, origin: PhasePoint, offset: PhasePoint, t: f64, dt: f64, eps: f64) -> Result<PairRoot> {
    let plus = origin + offset * 0.5;
    let minus = origin - offset * 0.5;
    if !plus.is_finite() || !minus.is_finite() {
        return numeric("pair initial conditions are not finite");
    }
    let (n, h) = steps(t, dt)?;
    let mut y = [plus.p, plus.q, minus.p, minus.q, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let mut maslov = 0u32;
    let mut last = 0i8;
    for _ in 0..n {
        y = rk4_step(|s| pair_flow(params, s), &y, h);
        let (mp, mm) = (matrix(&y, 4), matrix(&y, 8));
        let s = sign_of(mp.sub(&mm).det(), det_threshold(eps, &mp, &mm));
        if s != 0 {
            if last != 0 && s != last {
                maslov += 1;
            }
            last = s;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return numeric(format!("pair from ({}, {}) +- ({}, {})/2 diverged", origin.p, origin.q, offset.p, offset.q));
    }
    let (m_plus, m_minus) = (matrix(&y, 4), matrix(&y, 8));
    let detdiff = m_plus.sub(&m_minus).det();
    let degenerate = detdiff.abs() < det_threshold(eps, &m_plus, &m_minus);
    let (p2, m2) = (point(&y, 0), point(&y, 2));
    let mut root = PairRoot {
        offset,
        plus: p2,
        minus: m2,
        midpoint: (p2 + m2) * 0.5,
        action: y[12],
        maslov,
        detdiff,
        amplitude: 0.0,
        degenerate,
        m_plus,
        m_minus,
    };
    if !degenerate {
        let hbar = params.hbar();
        let h = 2.0 * PI * hbar;
        root.amplitude = 2.0 * (4.0 / h) * root.phase_factor(hbar) / detdiff.abs().sqrt();
    }
    Ok(root)
}

/// Evolves the pair `r' +- rt'/2` over `t` with both stability matrices and the action.
pub fn evolve_pair(params: &SystemParams, origin: PhasePoint, offset: PhasePoint, t: f64, dt: f64) -> Result<PairRoot> {
    pair_with(params, origin, offset, t, dt, ScanConfig::default().eps_det)
}

fn solve2(m: &StabilityMatrix, b: PhasePoint) -> Option<PhasePoint> {
    let d = m.det();
    if d.abs() < 1e-300 || !d.is_finite() {
        return None;
    }
    let a = &m.0;
    Some(PhasePoint::new((a[1][1] * b.p - a[0][1] * b.q) / d, (a[0][0] * b.q - a[1][0] * b.p) / d))
}

fn norm(r: PhasePoint) -> f64 {
    r.p.hypot(r.q)
}

fn newton(params: &SystemParams, origin: PhasePoint, target: PhasePoint, t: f64, seed: PhasePoint, cfg: &ScanConfig) -> Option<PairRoot> {
    let dt = cfg.step(params, t);
    let mut pair = pair_with(params, origin, seed, t, dt, cfg.eps_det).ok()?;
    let mut res = norm(pair.midpoint - target);
    for _ in 0..cfg.max_iter {
        if res < cfg.newton_tol {
            return Some(pair);
        }
        let step = solve2(&pair.jacobian(), target - pair.midpoint)?;
        let mut lambda = 1.0;
        loop {
            let trial = pair_with(params, origin, pair.offset + step * lambda, t, dt, cfg.eps_det).ok();
            if let Some(tp) = trial {
                let r = norm(tp.midpoint - target);
                if r < res {
                    pair = tp;
                    res = r;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-4 {
                return None;
            }
        }
    }
    (res < cfg.newton_tol).then_some(pair)
}

/// Roots of `rbar''(rt') = r''`, found by Newton iteration from the offsets whose midpoints land
/// closest to `r''` on a coarse scan, plus `rt' = 0`. Degenerate roots are kept with their flag set.
pub fn find_pairs(params: &SystemParams, origin: PhasePoint, target: PhasePoint, t: f64, cfg: &ScanConfig) -> Result<Vec<PairRoot>> {
    cfg.validate()?;
    let dt = cfg.step(params, t);
    let coarse = ScanConfig { np: cfg.np.min(64), nq: cfg.nq.min(64), ..*cfg };
    let mut cands: Vec<(f64, PhasePoint)> = (0..coarse.np * coarse.nq)
        .into_par_iter()
        .filter_map(|k| {
            let off = coarse.offset(k / coarse.nq, k % coarse.nq);
            let pr = pair_with(params, origin, off, t, dt, cfg.eps_det).ok()?;
            Some((norm(pr.midpoint - target), off))
        })
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut seeds = vec![PhasePoint::ORIGIN];
    seeds.extend(cands.iter().take(cfg.multistart).map(|c| c.1));
    let found: Vec<PairRoot> = seeds.par_iter().filter_map(|s| newton(params, origin, target, t, *s, cfg)).collect();
    let (sp, sq) = coarse.spacing();
    let tol = 1e-6 * sp.hypot(sq).max(1.0);
    let mut roots: Vec<PairRoot> = Vec::new();
    for r in found {
        if roots.iter().all(|o| norm(o.offset - r.offset) > tol) {
            roots.push(r);
        }
    }
    Ok(roots)
}

/// Sum of root amplitudes at a single `r''`.
pub fn semiclassical_point(params: &SystemParams, origin: PhasePoint, target: PhasePoint, t: f64, cfg: &ScanConfig) -> Result<f64> {
    Ok(find_pairs(params, origin, target, t, cfg)?.iter().filter(|r| !r.degenerate).map(|r| r.amplitude).sum())
}

/// Scan-deposition propagator over the offset grid of `cfg`.
pub fn semiclassical_propagator(
    params: &SystemParams,
    origin: PhasePoint,
    t: f64,
    grid: &PhaseGrid,
    cfg: &ScanConfig,
) -> Result<PropagatorSlice> {
    cfg.validate()?;
    if !grid.contains(origin) {
        return config(format!("origin ({}, {}) lies outside the output grid", origin.p, origin.q));
    }
    let dt = cfg.step(params, t);
    let hbar = params.hbar();
    let h = 2.0 * PI * hbar;
    let (sp, sq) = cfg.spacing();
    let d2 = sp * sq;
    let scan_area = 4.0 * cfg.extent.p * cfg.extent.q;
    let cell = grid.cell_area();
    let blocks = cfg.np.div_ceil(BLOCK_ROWS);
    let parts: Vec<Result<(Vec<f64>, f64, f64)>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; grid.len()];
            let (mut total, mut lost) = (0.0, 0.0);
            for j in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(cfg.np) {
                for i in 0..cfg.nq {
                    let pr = pair_with(params, origin, cfg.offset(j, i), t, dt, cfg.eps_det)?;
                    let w = if pr.degenerate {
                        d2 / scan_area / cell
                    } else {
                        pr.detdiff.abs().sqrt() * pr.phase_factor(hbar) / (2.0 * h) * d2 / cell
                    };
                    total += w.abs();
                    match grid.cell_of(pr.midpoint) {
                        Some((a, c)) => acc[grid.index(a, c)] += w,
                        None => lost += w.abs(),
                    }
                }
            }
            Ok((acc, total, lost))
        })
        .collect();
    let mut values = vec![0.0; grid.len()];
    let (mut total, mut lost) = (0.0, 0.0);
    for part in parts {
        let (acc, tt, l) = part?;
        for (v, a) in values.iter_mut().zip(acc) {
            *v += a;
        }
        total += tt;
        lost += l;
    }
    Ok(PropagatorSlice {
        field: ScalarField::new(*grid, values)?,
        origin,
        t,
        route: Route::Semiclassical,
        imag_residue: 0.0,
        leak: if total > 0.0 { lost / total } else { 0.0 },
        filter_energy: None,
    })
}
