use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use wigprop::classical::{classical_propagator, default_step, flow_endpoint};
use wigprop::io::RunConfig;
use wigprop::phase::{weyl_symbol, wigner_of_state};
use wigprop::quantum::{coherent_state, expectation, Observable};
use wigprop::semiclassical::{find_pairs, semiclassical_propagator, ScanConfig};
use wigprop::verify::{self, lobes};
use wigprop::{
    ComplexField, ExactPropagator, OperatorMatrix, PhaseGrid, PhasePoint, QGrid, ScalarField, SpectralFilter,
    SymbolNorm, SystemParams,
};

fn harmonic() -> SystemParams {
    SystemParams::morse_reference().harmonic_of().unwrap()
}

fn ground_sigma(p: &SystemParams) -> f64 {
    (p.hbar() / (2.0 * p.mass * p.natural_frequency().unwrap())).sqrt()
}

fn fig1_slice(params: SystemParams) -> wigprop::PropagatorSlice {
    let cfg = RunConfig::default();
    let t = params.quarter_period().unwrap();
    ExactPropagator::new(params, cfg.qgrid, cfg.filter).unwrap().slice(cfg.origin, t, &cfg.grid).unwrap()
}

#[test]
fn harmonic_peak_follows_the_classical_rotation() {
    let cfg = RunConfig::default();
    let params = harmonic();
    let t = params.quarter_period().unwrap();
    let ex = ExactPropagator::new(params, QGrid::new(-34.0, 26.0, 1536).unwrap(), SpectralFilter::Auto).unwrap();
    let s = ex.slice(cfg.origin, t, &cfg.grid).unwrap();
    let peak = s.field.argmax_abs();
    let target = cfg.grid.cell_of(PhasePoint::new(-0.125, 0.0)).unwrap();
    assert!(peak.0.abs_diff(target.0) <= 1 && peak.1.abs_diff(target.1) <= 1, "{peak:?} vs {target:?}");
    let cl = classical_propagator(&params, s.origin, t, &cfg.grid).unwrap();
    assert_eq!(cl.field.argmax_abs(), peak);
}

#[test]
fn morse_fig1_is_negative_with_ridge_oscillations() {
    let s = fig1_slice(SystemParams::morse_reference());
    assert!(s.field.values.iter().cloned().fold(f64::INFINITY, f64::min) < 0.0);
    assert!(verify::structure_metric(&s) > 0.05);
    let ridge = verify::ridge_sign_changes(&s.field);
    assert!(ridge > 10, "ridge sign changes {ridge}");
}

#[test]
fn harmonic_fig1_structure_metric_is_negligible() {
    let n = verify::structure_metric(&fig1_slice(harmonic()));
    assert!(n < 1e-6, "negativity {n}");
}

#[test]
fn exact_slices_are_real_and_normalized() {
    let cfg = RunConfig::default();
    // the display window cuts the momentum tails, so normalization is taken over |p| <= 30
    let wide = PhaseGrid::new(-30.0, 30.0, cfg.grid.qmin, cfg.grid.qmax, 384, 128).unwrap();
    for params in [SystemParams::morse_reference(), harmonic()] {
        let t = params.quarter_period().unwrap();
        let s = ExactPropagator::new(params, cfg.qgrid, cfg.filter).unwrap().slice(cfg.origin, t, &wide).unwrap();
        assert!(s.imag_residue < 1e-9, "{}", s.imag_residue);
        assert!((s.mass() - 1.0).abs() < 1e-6, "{}", s.mass());
        assert!(verify::check_reality(&s).pass);
    }
}

#[test]
fn structure_metric_is_stable_under_refinement() {
    let cfg = RunConfig::default();
    let params = SystemParams::morse_reference();
    let t = params.quarter_period().unwrap();
    let ex = ExactPropagator::new(params, cfg.qgrid, cfg.filter).unwrap();
    let fine = PhaseGrid::new(cfg.grid.pmin, cfg.grid.pmax, cfg.grid.qmin, cfg.grid.qmax, 256, 256).unwrap();
    let a = verify::structure_metric(&ex.slice(cfg.origin, t, &cfg.grid).unwrap());
    let b = verify::structure_metric(&ex.slice(cfg.origin, t, &fine).unwrap());
    assert!((a - b).abs() <= 0.05 * a, "{a} vs {b}");
}

fn route_gap(params: SystemParams) -> f64 {
    let cfg = RunConfig::default();
    let hbar = params.hbar();
    let t = params.quarter_period().unwrap();
    let ex = ExactPropagator::new(params, cfg.qgrid, SpectralFilter::Auto).unwrap();
    let psi = coherent_state(&cfg.qgrid, cfg.origin, ground_sigma(&params), hbar).unwrap();
    let grid = PhaseGrid::natural(&cfg.qgrid, hbar).unwrap();
    let conv = params.conv.with_norm(SymbolNorm::Wigner);
    let rho = wigner_of_state(&psi, &cfg.qgrid, &grid, &conv).unwrap();
    let evolved = ex.evolve_wigner(&rho, t).unwrap();
    assert!((evolved.integral() - 1.0).abs() < 1e-6);
    let oracle = wigner_of_state(&ex.eig.evolve_state(&psi, t, hbar), &cfg.qgrid, &grid, &conv).unwrap();
    evolved.rms_diff(&oracle).unwrap()
}

#[test]
fn evolved_wigner_matches_wavefunction_evolution() {
    let h = route_gap(harmonic());
    assert!(h < 1e-6, "harmonic {h}");
    let m = route_gap(SystemParams::morse_reference());
    assert!(m < 1e-4, "Morse {m}");
}

#[test]
fn zero_time_evolution_is_identity() {
    let qg = QGrid::new(-5.0, 7.0, 48).unwrap();
    let params = SystemParams::morse_reference();
    let ex = ExactPropagator::new(params, qg, SpectralFilter::Auto).unwrap();
    let grid = PhaseGrid::natural(&qg, 1.0).unwrap();
    let psi = coherent_state(&qg, PhasePoint::new(0.3, 0.2), 0.6, 1.0).unwrap();
    let rho = wigner_of_state(&psi, &qg, &grid, &params.conv).unwrap();
    assert!(ex.evolve_wigner(&rho, 0.0).unwrap().rms_diff(&rho).unwrap() < 1e-8);
}

#[test]
fn expectation_examples() {
    let qg = QGrid::new(-8.0, 8.0, 96).unwrap();
    let params = harmonic();
    let hbar = params.hbar();
    let (m, w) = (params.mass, params.natural_frequency().unwrap());
    let ex = ExactPropagator::new(params, qg, SpectralFilter::Auto).unwrap();
    let grid = PhaseGrid::natural(&qg, hbar).unwrap();
    let r0 = PhasePoint::new(0.4, 0.3);
    let psi = coherent_state(&qg, r0, ground_sigma(&params), hbar).unwrap();
    let rho = wigner_of_state(&psi, &qg, &grid, &params.conv).unwrap();

    let one = ComplexField::from_fn(grid, |_| C64::new(1.0, 0.0)).unwrap();
    assert!((expectation(&one, &rho).unwrap() - 1.0).norm() < 1e-8);

    let energy = Observable::Energy.symbol(&params, &qg, &grid).unwrap();
    let position = Observable::Position.symbol(&params, &qg, &grid).unwrap();
    let e0 = expectation(&energy, &rho).unwrap().re;
    for k in 1..=8 {
        let t = 0.1 * k as f64;
        let r = ex.evolve_wigner(&rho, t).unwrap();
        let e = expectation(&energy, &r).unwrap();
        assert!((e.re - e0).abs() < 1e-8 * e0.abs() && e.im.abs() < 1e-8 * e0.abs(), "t={t}: {e} vs {e0}");
        let q = expectation(&position, &r).unwrap().re;
        let want = r0.q * (w * t).cos() + r0.p / (m * w) * (w * t).sin();
        assert!((q - want).abs() < 1e-6, "t={t}: <q> {q} vs {want}");
    }
}

fn gaussian_wigner(p: &SystemParams, r: PhasePoint) -> f64 {
    let (m, w, hbar) = (p.mass, p.natural_frequency().unwrap(), p.hbar());
    (-(r.p * r.p) / (m * w * hbar) - m * w * r.q * r.q / hbar).exp() / (PI * hbar)
}

#[test]
fn harmonic_ground_state_symbol_is_gaussian() {
    let params = harmonic();
    let qg = QGrid::new(-6.0, 6.0, 64).unwrap();
    let eig = wigprop::quantum::EigenSystem::solve(&params, &qg).unwrap();
    let ground = eig.wavefunction(0);
    let grid = PhaseGrid::natural(&qg, 1.0).unwrap();
    let want = ScalarField::from_fn(grid, |r| gaussian_wigner(&params, r)).unwrap();

    let rho = wigner_of_state(&ground, &qg, &grid, &params.conv).unwrap();
    assert!(rho.values.iter().all(|&v| v > -1e-10));
    assert!((rho.integral() - 1.0).abs() < 1e-8);
    assert!(rho.rms_diff(&want).unwrap() < 1e-8, "{}", rho.rms_diff(&want).unwrap());

    let proj = OperatorMatrix::projector(qg, &ground).unwrap();
    let sym = weyl_symbol(&proj, &grid, &params.conv.with_norm(SymbolNorm::Wigner)).unwrap();
    assert!(sym.max_abs_im() < 1e-10);
    assert!(sym.re().rms_diff(&want).unwrap() < 1e-8);
}

#[test]
fn cat_state_has_negative_fringes_at_the_centre() {
    let qg = QGrid::new(-8.0, 8.0, 128).unwrap();
    let a = 2.5;
    let g = |q: f64| (-(q * q) / (2.0 * 0.5f64.powi(2))).exp();
    let raw: Vec<C64> = (0..qg.n).map(|x| C64::new(g(qg.q(x) - a) + g(qg.q(x) + a), 0.0)).collect();
    let norm = (raw.iter().map(|v| v.norm_sqr()).sum::<f64>() * qg.dq()).sqrt();
    let psi: Vec<C64> = raw.iter().map(|v| v / norm).collect();
    let grid = PhaseGrid::natural(&qg, 1.0).unwrap();
    let rho = wigner_of_state(&psi, &qg, &grid, &wigprop::WeylConventions::default()).unwrap();
    assert!((rho.integral() - 1.0).abs() < 1e-8);
    let centre = (0..grid.nq).filter(|&i| grid.q(i).abs() < 0.2);
    let min = centre.flat_map(|i| (0..grid.np).map(move |j| (j, i))).map(|(j, i)| rho.at(j, i)).fold(f64::INFINITY, f64::min);
    assert!(min < -0.1, "min {min}");
}

#[test]
fn strongest_offclassical_positive_lobe_has_a_pair_root() {
    let cfg = RunConfig::default();
    let params = cfg.system;
    let t = params.quarter_period().unwrap();
    let exact = fig1_slice(params);
    let (end, _) = flow_endpoint(&params, exact.origin, t, default_step(&params, t)).unwrap();
    let classical_cell = cfg.grid.cell_of(end).unwrap();
    let lobe = lobes(&exact.field, 0.1)
        .into_iter()
        .find(|l| l.sign > 0.0 && !l.cells.contains(&classical_cell))
        .expect("off-classical positive lobe");
    let &(j, i) = lobe.cells.iter().max_by(|a, b| exact.field.at(a.0, a.1).total_cmp(&exact.field.at(b.0, b.1))).unwrap();
    let target = cfg.grid.point(j, i);
    let scan = ScanConfig { np: 64, nq: 64, ..cfg.scan.with_extent_from(&exact).unwrap() };
    let roots = find_pairs(&params, exact.origin, target, t, &scan).unwrap();
    let good: Vec<_> = roots.iter().filter(|r| !r.degenerate).collect();
    assert!(!good.is_empty(), "no non-degenerate root at {target:?}");
    for r in good {
        let res = r.midpoint - target;
        assert!(res.p.hypot(res.q) < 1e-8, "{res:?}");
    }
}

#[test]
fn semiclassical_short_time_is_near_identity() {
    let cfg = RunConfig::default();
    let params = cfg.system;
    let t = 4.0 * params.quarter_period().unwrap() / 1000.0;
    let scan = ScanConfig { extent: PhasePoint::new(2.0, 2.0), np: 128, nq: 128, ..cfg.scan };
    let s = semiclassical_propagator(&params, cfg.origin, t, &cfg.grid, &scan).unwrap();
    let (j0, i0) = cfg.grid.cell_of(cfg.origin).unwrap();
    let g = cfg.grid;
    let mut near = 0.0;
    for j in j0.saturating_sub(2)..=(j0 + 2).min(g.np - 1) {
        for i in i0.saturating_sub(2)..=(i0 + 2).min(g.nq - 1) {
            near += s.field.at(j, i).abs();
        }
    }
    let total: f64 = s.field.values.iter().map(|v| v.abs()).sum();
    assert!(near >= 0.99 * total, "{}", near / total);
}

#[test]
fn harmonic_composition_and_back_propagation_are_exact() {
    let qg = QGrid::new(-6.0, 6.0, 96).unwrap();
    let ex = ExactPropagator::new(harmonic(), qg, SpectralFilter::Auto).unwrap();
    let o = PhasePoint::new(0.0, 0.1);
    let t = harmonic().quarter_period().unwrap();
    let ck = verify::check_chapman_kolmogorov(&ex, o, t).unwrap();
    assert!(ck.metric < 1e-8, "{ck}");
    let orth = verify::check_orthogonality(&ex, o, t).unwrap();
    assert!(orth.metric < 1e-8, "{orth}");
    assert!(verify::check_chapman_kolmogorov(&ex, o, 0.0).unwrap().metric < 1e-10);
}
