//! Hamiltonian trajectories, stability matrices, and the classical (Liouville) propagator.

use std::f64::consts::PI;

use crate::error::{config, numeric, Error, Result};
use crate::models::SystemParams;
use crate::phase::{PhaseGrid, PhasePoint, ScalarField};
use crate::quantum::{PropagatorSlice, Route};

/// Classical steps per natural period.
pub const STEPS_PER_PERIOD: f64 = 2000.0;

/// One classical RK4 step of size `h` for a state of `N` components.
pub(crate) fn rk4_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], h: f64) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], s: f64| -> [f64; N] {
        let mut o = *a;
        for i in 0..N {
            o[i] += s * b[i];
        }
        o
    };
    let k1 = f(y);
    let k2 = f(&add(y, &k1, h / 2.0));
    let k3 = f(&add(y, &k2, h / 2.0));
    let k4 = f(&add(y, &k3, h));
    let mut o = *y;
    for i in 0..N {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

/// Default step: the natural period over [`STEPS_PER_PERIOD`], or `max(|t|, 1)` over it
/// for systems without a natural frequency.
pub fn default_step(params: &SystemParams, t: f64) -> f64 {
    match params.natural_frequency() {
        Ok(w) => 2.0 * PI / w / STEPS_PER_PERIOD,
        Err(_) => t.abs().max(1.0) / STEPS_PER_PERIOD,
    }
}

/// Step count and exact step size covering `t` with steps no longer than `dt`.
pub(crate) fn steps(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !t.is_finite() {
        return config(format!("time must be finite, got {t}"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return config(format!("dt must be positive, got {dt}"));
    }
    let n = (t.abs() / dt).ceil() as usize;
    Ok(if n == 0 { (0, 0.0) } else { (n, t / n as f64) })
}

/// `M = d r(t) / d r(0)` in `(p, q)` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityMatrix(pub [[f64; 2]; 2]);

impl StabilityMatrix {
    pub const IDENTITY: StabilityMatrix = StabilityMatrix([[1.0, 0.0], [0.0, 1.0]]);

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn apply(&self, r: PhasePoint) -> PhasePoint {
        let m = &self.0;
        PhasePoint::new(m[0][0] * r.p + m[0][1] * r.q, m[1][0] * r.p + m[1][1] * r.q)
    }

    pub fn sub(&self, o: &StabilityMatrix) -> StabilityMatrix {
        let (a, b) = (&self.0, &o.0);
        StabilityMatrix([[a[0][0] - b[0][0], a[0][1] - b[0][1]], [a[1][0] - b[1][0], a[1][1] - b[1][1]]])
    }

    pub fn scale(&self, s: f64) -> StabilityMatrix {
        let a = &self.0;
        StabilityMatrix([[s * a[0][0], s * a[0][1]], [s * a[1][0], s * a[1][1]]])
    }

    fn from_state(y: &[f64]) -> Self {
        StabilityMatrix([[y[0], y[1]], [y[2], y[3]]])
    }
}

/// Sampled classical trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, PhasePoint)>,
    pub params: SystemParams,
}

impl Trajectory {
    pub fn endpoint(&self) -> PhasePoint {
        self.samples.last().expect("trajectory has at least one sample").1
    }

    /// Largest `|H(r(t)) - H(r(0))| / (|H(r(0))| + 1e-12)` over the samples.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.params.hamiltonian(self.samples[0].1);
        self.samples
            .iter()
            .map(|(_, r)| (self.params.hamiltonian(*r) - e0).abs() / (e0.abs() + 1e-12))
            .fold(0.0, f64::max)
    }
}

/// Hamilton's equations with the variational equation; state `(p, q, M00, M01, M10, M11)`.
pub(crate) fn flow(params: &SystemParams, y: &[f64; 6]) -> [f64; 6] {
    let (p, q) = (y[0], y[1]);
    let k = params.curvature(q);
    let im = 1.0 / params.mass;
    // dM/dt = [[0, -V''], [1/m, 0]] M
    [params.force(q), p * im, -k * y[4], -k * y[5], im * y[2], im * y[3]]
}

/// RK4 integration of a trajectory and its stability matrix over `t` (negative `t` runs backward).
pub fn integrate_trajectory(
    params: &SystemParams,
    r0: PhasePoint,
    t: f64,
    dt: f64,
) -> Result<(Trajectory, StabilityMatrix)> {
    if !r0.is_finite() {
        return numeric("initial point is not finite");
    }
    let (n, h) = steps(t, dt)?;
    let mut y = [r0.p, r0.q, 1.0, 0.0, 0.0, 1.0];
    let mut samples = Vec::with_capacity(n + 1);
    samples.push((0.0, r0));
    for k in 1..=n {
        y = rk4_step(|s| flow(params, s), &y, h);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("trajectory from ({}, {}) diverged at t = {}", r0.p, r0.q, k as f64 * h)));
        }
        samples.push((k as f64 * h, PhasePoint::new(y[0], y[1])));
    }
    Ok((Trajectory { samples, params: *params }, StabilityMatrix::from_state(&y[2..])))
}

/// Endpoint of the flow, without storing samples.
pub fn flow_endpoint(params: &SystemParams, r0: PhasePoint, t: f64, dt: f64) -> Result<(PhasePoint, StabilityMatrix)> {
    let (n, h) = steps(t, dt)?;
    let mut y = [r0.p, r0.q, 1.0, 0.0, 0.0, 1.0];
    for _ in 0..n {
        y = rk4_step(|s| flow(params, s), &y, h);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return numeric(format!("trajectory from ({}, {}) diverged", r0.p, r0.q));
    }
    Ok((PhasePoint::new(y[0], y[1]), StabilityMatrix::from_state(&y[2..])))
}

/// Frobenius-Perron propagator: unit mass in the cell holding the classical endpoint.
pub fn classical_propagator(params: &SystemParams, origin: PhasePoint, t: f64, grid: &PhaseGrid) -> Result<PropagatorSlice> {
    if !grid.contains(origin) {
        return config(format!("origin ({}, {}) lies outside the output grid", origin.p, origin.q));
    }
    let (end, _) = flow_endpoint(params, origin, t, default_step(params, t))?;
    let Some((j, i)) = grid.cell_of(end) else {
        return numeric(format!("classical endpoint ({}, {}) lies outside the output grid", end.p, end.q));
    };
    let mut field = ScalarField::zeros(*grid);
    field.values[grid.index(j, i)] = 1.0 / grid.cell_area();
    Ok(PropagatorSlice { field, origin, t, route: Route::Classical, imag_residue: 0.0, leak: 0.0, filter_energy: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PotentialModel;
    use crate::phase::WeylConventions;
    use proptest::prelude::*;

    fn harmonic() -> SystemParams {
        SystemParams::new(0.5, PotentialModel::Harmonic { omega: 2.5, qe: 0.0 }, WeylConventions::default()).unwrap()
    }

    #[test]
    fn free_flight() {
        let sys = SystemParams::new(0.5, PotentialModel::Free, WeylConventions::default()).unwrap();
        let (tr, m) = integrate_trajectory(&sys, PhasePoint::new(1.0, 0.0), 1.0, 1e-3).unwrap();
        let e = tr.endpoint();
        assert!((e.p - 1.0).abs() < 1e-14 && (e.q - 2.0).abs() < 1e-12);
        let want = [[1.0, 0.0], [2.0, 1.0]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((m.0[a][b] - want[a][b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn harmonic_quarter_turn() {
        let sys = harmonic();
        let t = PI / 5.0;
        let (tr, m) = integrate_trajectory(&sys, PhasePoint::new(0.0, 0.1), t, default_step(&sys, t)).unwrap();
        let e = tr.endpoint();
        assert!((e.p + 0.125).abs() < 1e-8, "p = {}", e.p);
        assert!(e.q.abs() < 1e-8, "q = {}", e.q);
        assert!((m.det() - 1.0).abs() < 1e-8);
        assert!(tr.energy_drift() < 1e-8);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = SystemParams::morse_reference();
        let r0 = PhasePoint::new(0.3, 0.4);
        let t = 1.0;
        let base = 0.02;
        let reference = flow_endpoint(&sys, r0, t, base / 64.0).unwrap().0;
        let err = |dt: f64| {
            let e = flow_endpoint(&sys, r0, t, dt).unwrap().0;
            ((e.p - reference.p).powi(2) + (e.q - reference.q).powi(2)).sqrt()
        };
        let ratio = err(base) / err(base / 2.0);
        assert!((ratio / 16.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn morse_symplectic_and_conservative() {
        let sys = SystemParams::morse_reference();
        let t = sys.quarter_period().unwrap() * 4.0;
        let (tr, m) = integrate_trajectory(&sys, PhasePoint::new(0.4, -0.2), t, default_step(&sys, t)).unwrap();
        assert!((m.det() - 1.0).abs() < 1e-8);
        assert!(tr.energy_drift() < 1e-8, "drift {}", tr.energy_drift());
        assert!(tr.samples.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn stability_matches_finite_difference() {
        let sys = SystemParams::morse_reference();
        let r0 = PhasePoint::new(0.2, 0.3);
        let t = 0.8;
        let dt = default_step(&sys, t);
        let (_, m) = flow_endpoint(&sys, r0, t, dt).unwrap();
        let h = 1e-6;
        for (col, d) in [PhasePoint::new(h, 0.0), PhasePoint::new(0.0, h)].into_iter().enumerate() {
            let a = flow_endpoint(&sys, r0 + d, t, dt).unwrap().0;
            let b = flow_endpoint(&sys, r0 - d, t, dt).unwrap().0;
            let fd = [(a.p - b.p) / (2.0 * h), (a.q - b.q) / (2.0 * h)];
            for row in 0..2 {
                assert!((m.0[row][col] - fd[row]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn classical_slice() {
        let sys = harmonic();
        let grid = PhaseGrid::new(-1.0, 1.0, -1.0, 1.0, 16, 16).unwrap();
        let o = PhasePoint::new(0.0, 0.1);
        let s0 = classical_propagator(&sys, o, 0.0, &grid).unwrap();
        let (j, i) = grid.cell_of(o).unwrap();
        assert_eq!(s0.field.at(j, i) * grid.cell_area(), 1.0);
        let s = classical_propagator(&sys, o, PI / 5.0, &grid).unwrap();
        assert!((s.field.integral() - 1.0).abs() < 1e-12);
        let (j, i) = s.field.argmax_abs();
        assert_eq!(grid.cell_of(PhasePoint::new(-0.125, 1e-9)).unwrap(), (j, i));
        let far = PhaseGrid::new(-1.0, 1.0, 0.05, 1.0, 16, 16).unwrap();
        assert!(matches!(classical_propagator(&sys, o, PI / 5.0, &far), Err(Error::Numeric(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn det_m_is_one(p in -1.0f64..1.0, q in -0.5f64..1.5, t in 0.0f64..2.0) {
            let sys = SystemParams::morse_reference();
            let (tr, m) = integrate_trajectory(&sys, PhasePoint::new(p, q), t, default_step(&sys, t)).unwrap();
            prop_assert!((m.det() - 1.0).abs() < 1e-8);
            prop_assert!(tr.energy_drift() < 1e-8);
        }
    }
}
