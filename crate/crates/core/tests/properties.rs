use std::f64::consts::PI;

use proptest::prelude::*;
use syncrds_core::diagnostics::{
    pullback, spme_energy_average, sync_distances, wilson_interval, SyncCurve,
};
use syncrds_core::engines::{Drift, FbmConfig, OuConfig, ReflectedConfig, SpmeConfig};
use syncrds_core::grid::{laplacian_apply, laplacian_solve};
use syncrds_core::{
    CocycleEngine, EngineConfig, GridFunction, GridSpec, Norm, OrderRelation, QSpec, State, StateOrder,
};

fn spme(n: usize, dt: f64) -> CocycleEngine {
    let grid = GridSpec::dirichlet(1.0, n).unwrap();
    let q = QSpec::power_law(n, 1.0, 1.0, 1.0).unwrap();
    CocycleEngine::new(EngineConfig::Spme(SpmeConfig::new(grid, 2.0, q)), dt).unwrap()
}

fn field(n: usize, values: Vec<f64>) -> GridFunction {
    GridFunction::new(GridSpec::dirichlet(1.0, n).unwrap(), values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solve_inverts_apply(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let n = v.len();
        let u = field(n, v);
        let back = laplacian_solve(&laplacian_apply(&u).scale(-1.0)).unwrap();
        let scale = u.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in back.values().iter().zip(u.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * scale * (n * n) as f64);
        }
    }

    #[test]
    fn hminus1_dual_pairing(v in prop::collection::vec(-3.0f64..3.0, 2..30)) {
        let u = field(v.len(), v);
        let w = laplacian_solve(&u).unwrap();
        // ‖u‖²_{H⁻¹} = ‖(−Δ_h)⁻¹u‖²_{H¹₀}
        let lhs = u.norm(Norm::Hminus1).unwrap().powi(2);
        let rhs = w.norm(Norm::H10).unwrap().powi(2);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1e-12));
    }

    #[test]
    fn dual_order_is_pointwise_on_solves(
        a in prop::collection::vec(-2.0f64..2.0, 8),
        b in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let (x, y) = (field(8, a), field(8, b));
        let dual = OrderRelation::dual().leq(&x, &y).unwrap();
        let direct = OrderRelation::pointwise()
            .leq(&laplacian_solve(&x).unwrap(), &laplacian_solve(&y).unwrap())
            .unwrap();
        prop_assert_eq!(dual, direct);
    }

    #[test]
    fn wilson_brackets_estimate(n in 1usize..2000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(k, n);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn ou_cocycle_exact(seed in 0u64..500, s in 1usize..100, t in 1usize..100, x in -5.0f64..5.0) {
        let dt = 0.01;
        let e = CocycleEngine::new(EngineConfig::Ou(OuConfig::default()), dt).unwrap();
        let p = e.noise(seed, 0.0, 2.0).unwrap();
        let (s, t) = (s as f64 * dt, t as f64 * dt);
        let x = State::Scalar(x);
        let mid = e.evolve(&p, &x, 0.0, s).unwrap();
        prop_assert_eq!(e.evolve(&p, &x, 0.0, s + t).unwrap(), e.evolve(&p, &mid, s, s + t).unwrap());
        prop_assert_eq!(e.evolve(&p.shift(s).unwrap(), &mid, 0.0, t).unwrap(), e.evolve(&p, &mid, s, s + t).unwrap());
    }

    #[test]
    fn reflected_stays_in_domain(seed in 0u64..500, x in -1.0f64..=1.0) {
        let cfg = ReflectedConfig { lower: -1.0, upper: 1.0, drift: Drift::DoubleWell };
        let e = CocycleEngine::new(EngineConfig::Reflected(cfg), 0.01).unwrap();
        let p = e.noise(seed, 0.0, 5.0).unwrap();
        let mut s = State::Scalar(x);
        for k in 0..50 {
            let t = k as f64 * 0.1;
            s = e.evolve(&p, &s, t, t + 0.1).unwrap();
            let v = s.as_scalar().unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn monotone_bracketing_under_pullback() {
    let e = spme(16, 0.01);
    let grid = e.grid().unwrap();
    let order = StateOrder::Grid(OrderRelation::pointwise());
    let p = e.noise(5, -2.0, 0.0).unwrap();
    for k in 0..20 {
        let c = k as f64 * 0.1;
        let lo = State::Field(grid.from_fn(|s| -1.0 - c + 0.3 * (PI * s).sin()));
        let mid = State::Field(grid.from_fn(|s| c * (2.0 * PI * s).sin()));
        let hi = State::Field(grid.from_fn(|s| 1.0 + c + 0.3 * (3.0 * PI * s).sin()));
        let images: Vec<State> = [&lo, &mid, &hi].iter().map(|x| pullback(&e, &p, x, 2.0).unwrap()).collect();
        assert!(order.leq(&images[0], &images[1]).unwrap());
        assert!(order.leq(&images[1], &images[2]).unwrap());
    }
}

#[test]
fn fbm_real_order_bracketing() {
    let e = CocycleEngine::new(
        EngineConfig::FbmSde(FbmConfig { hurst: 0.3, drift: Drift::DoubleWell, ode_substeps: 2 }),
        0.01,
    )
    .unwrap();
    let p = e.noise(3, -5.0, 0.0).unwrap();
    let xs: Vec<f64> = (0..11).map(|i| -2.0 + 0.4 * i as f64).collect();
    let images: Vec<f64> =
        xs.iter().map(|&x| pullback(&e, &p, &State::Scalar(x), 5.0).unwrap().as_scalar().unwrap()).collect();
    assert!(images.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn sync_curve_rows_are_consistent() {
    let e = CocycleEngine::new(EngineConfig::Ou(OuConfig::default()), 0.01).unwrap();
    let times = [0.5, 1.0, 2.0, 3.0];
    let d = sync_distances(&e, &State::Scalar(-0.5), &State::Scalar(0.5), &times, 64, 2, false).unwrap();
    let mut prev: Option<SyncCurve> = None;
    for eps in [0.05, 0.1, 0.2, 0.4, 0.8] {
        let c = SyncCurve::from_distances(eps, &times, &d);
        for r in &c.rows {
            assert!(0.0 <= r.ci_low && r.ci_low <= r.p_hat && r.p_hat <= r.ci_high && r.ci_high <= 1.0);
            assert_eq!(r.n_paths, 64);
        }
        if let Some(p) = prev {
            assert!(c.rows.iter().zip(&p.rows).all(|(a, b)| a.p_hat <= b.p_hat));
        }
        prev = Some(c);
    }
}

#[test]
fn spme_energy_respects_ito_bound() {
    let e = spme(32, 0.01);
    let x0 = e.grid().unwrap().from_fn(|s| 2.0 * (PI * s).sin());
    for seed in 0..3 {
        let c = spme_energy_average(&e, &x0, 5.0, seed).unwrap();
        assert!(c.average <= c.bound(0.5), "{c:?}");
    }
}

#[test]
fn engine_keeps_its_config() {
    let grid = GridSpec::dirichlet(1.0, 4).unwrap();
    let cfg = EngineConfig::Spme(SpmeConfig::new(grid, 2.0, QSpec::power_law(4, 1.0, 1.0, 1.0).unwrap()));
    let e = CocycleEngine::new(cfg.clone(), 0.1).unwrap();
    assert_eq!(e.config(), &cfg);
    assert_eq!(e.kind().name(), "spme");
}

#[test]
fn torus_pair_synchronizes_weakly() {
    let e = CocycleEngine::new(EngineConfig::Torus, 0.01).unwrap();
    let d = sync_distances(&e, &State::Scalar(0.3), &State::Scalar(0.7), &[200.0], 500, 8, true).unwrap();
    let c = SyncCurve::from_distances(0.05, &[200.0], &d);
    assert!(c.rows[0].p_hat < 0.15, "{:?}", c.rows[0]);
}
