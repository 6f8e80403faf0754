use hjs_core::coupling::CouplingMatrix;
use hjs_core::grid::SpatialGrid;
use hjs_core::markov::{path_rng, sample_path, IndexPath, PathEnsemble};
use hjs_core::models::{
    effective_lagrangian, legendre, CosinePotential, Hamiltonian, Lagrangian, TabulatedHamiltonian,
};
use hjs_core::pde::{reference_problem, GridField, SlSolver};
use proptest::prelude::*;

/// Off-diagonal rates in `[0, 3]` for an `m`-state generator.
fn generator(m: usize) -> impl Strategy<Value = CouplingMatrix> {
    prop::collection::vec(0.0..3.0f64, m * m).prop_map(move |r| {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let off: f64 = (0..m).filter(|&j| j != i).map(|j| r[i * m + j]).sum();
                (0..m).map(|j| if i == j { off } else { -r[i * m + j] }).collect()
            })
            .collect();
        CouplingMatrix::validate(&rows).unwrap()
    })
}

fn sized_generator() -> impl Strategy<Value = CouplingMatrix> {
    (1usize..=4).prop_flat_map(generator)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_matrices_are_stochastic(b in sized_generator(), t in 0.0..4.0f64) {
        let p = b.transition_matrix(t).unwrap();
        for i in 0..b.dim() {
            let row = p.row(i);
            prop_assert!((row.total() - 1.0).abs() < 1e-12);
            prop_assert!(row.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn transition_matrices_form_a_semigroup(b in sized_generator(), s in 0.0..2.0f64, t in 0.0..2.0f64) {
        let lhs = b.transition_matrix(s + t).unwrap();
        let rhs = b.transition_matrix(s).unwrap().mul(&b.transition_matrix(t).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn push_preserves_order_and_constants(
        b in generator(3),
        t in 0.0..3.0f64,
        v in prop::collection::vec(-5.0..5.0f64, 3),
        gap in prop::collection::vec(0.0..2.0f64, 3),
        c in -4.0..4.0f64,
    ) {
        let w: Vec<f64> = v.iter().zip(&gap).map(|(a, g)| a + g).collect();
        let pv = b.push_vector(t, &v).unwrap();
        let pw = b.push_vector(t, &w).unwrap();
        prop_assert!(pv.iter().zip(&pw).all(|(a, b)| *a <= *b + 1e-12));
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        let ps = b.push_vector(t, &shifted).unwrap();
        prop_assert!(pv.iter().zip(&ps).all(|(a, s)| (a + c - s).abs() < 1e-11));
    }

    #[test]
    fn coupling_annihilates_constants(b in sized_generator(), c in -10.0..10.0f64) {
        let u = vec![c; b.dim()];
        prop_assert!(b.apply(&u).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sampled_paths_are_well_formed(b in generator(3), i in 0usize..3, horizon in 0.1..3.0f64, seed in any::<u64>()) {
        let path = sample_path(&b, i, horizon, &mut path_rng(seed, 0));
        prop_assert_eq!(path.initial_state(), i);
        let jumps = path.jumps();
        prop_assert!(jumps.windows(2).all(|w| w[0].time < w[1].time));
        prop_assert!(jumps.iter().all(|j| j.time > 0.0 && j.time < horizon));
        let mut state = i;
        for j in jumps {
            prop_assert!(j.state != state);
            prop_assert!(b.entry(state, j.state) < 0.0);
            state = j.state;
        }
        prop_assert_eq!(path.final_state(), state);

        let intervals = path.intervals();
        prop_assert_eq!(intervals.first().unwrap().start, 0.0);
        prop_assert_eq!(intervals.last().unwrap().end, horizon);
        prop_assert!(intervals.windows(2).all(|w| w[0].end == w[1].start));

        let parsed = IndexPath::from_line(&path.to_line()).unwrap();
        prop_assert_eq!(&parsed, &path);
    }

    #[test]
    fn shifting_paths_composes(b in generator(2), seed in any::<u64>(), h1 in 0.0..0.5f64, h2 in 0.0..0.5f64, s in 0.0..1.0f64) {
        let path = sample_path(&b, 0, 2.0, &mut path_rng(seed, 1));
        let once = path.shift(h1 + h2).unwrap();
        let twice = path.shift(h1).unwrap().shift(h2).unwrap();
        prop_assert!((once.horizon() - twice.horizon()).abs() < 1e-12);
        let t = s * once.horizon();
        prop_assert_eq!(once.state_at(t).unwrap(), path.state_at(t + h1 + h2).unwrap());
        prop_assert_eq!(once.state_at(t).unwrap(), twice.state_at(t).unwrap());
    }

    #[test]
    fn piecewise_integral_of_one_is_length(b in generator(3), seed in any::<u64>(), a in 0.0..1.0f64, len in 0.0..1.0f64) {
        let path = sample_path(&b, 1, 2.0, &mut path_rng(seed, 2));
        let total = path.integrate_pieces(a, a + len, |_, s0, s1| s1 - s0);
        prop_assert!((total - len).abs() < 1e-12);
    }

    #[test]
    fn fenchel_inequality_quadratic(
        amp in -1.0..1.0f64,
        phase in 0.0..6.3f64,
        x in -5.0..5.0f64,
        p in -4.0..4.0f64,
        q in -4.0..4.0f64,
    ) {
        let h = Hamiltonian::QuadraticCosine(CosinePotential::single(amp, 1.0, phase));
        let l = legendre(&h, [x, 0.0], [q, 0.0], 5.0).unwrap();
        prop_assert!(l + h.value([x, 0.0], [p, 0.0]) >= p * q - 1e-12);
        // equality at the conjugate momentum p = q
        prop_assert!((l + h.value([x, 0.0], [q, 0.0]) - q * q).abs() < 1e-12);
    }

    #[test]
    fn effective_lagrangian_is_affine_in_the_field(
        c1 in -2.0..2.0f64,
        c2 in -2.0..2.0f64,
        s in -3.0..3.0f64,
        x in -1.5..1.5f64,
        q in -2.0..2.0f64,
    ) {
        let b = CouplingMatrix::symmetric_two_state(1.0).unwrap();
        let l = Lagrangian::QuadraticCosine(CosinePotential::single(0.3, 1.0, 0.0));
        let grid = SpatialGrid::new(1, 2.0, 0.05).unwrap();
        let make = |a: f64, k: f64| {
            GridField::from_fn(grid.clone(), vec![0.0], 2, 1.0, move |_, p| vec![a * p[0].sin(), k * p[0].cos()])
        };
        let f = make(c1, c2);
        let g = make(c1 * s, c2 * s);
        let base = l.value([x, 0.0], [q, 0.0]);
        for j in 0..2 {
            let ef = effective_lagrangian(&l, j, &f, &b, 0.0, [x, 0.0], [q, 0.0]).unwrap();
            let eg = effective_lagrangian(&l, j, &g, &b, 0.0, [x, 0.0], [q, 0.0]).unwrap();
            prop_assert!(((eg - base) - s * (ef - base)).abs() < 1e-10);
        }
    }
}

fn tabulated_quadratic() -> TabulatedHamiltonian {
    let xs: Vec<f64> = (0..=40).map(|k| -4.0 + 0.2 * k as f64).collect();
    let ps: Vec<f64> = (0..=120).map(|k| -6.0 + 0.1 * k as f64).collect();
    let values = xs.iter().flat_map(|&x| ps.iter().map(move |&p| 0.5 * p * p + 0.3 * x.cos())).collect();
    TabulatedHamiltonian::new(xs, ps, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fenchel_inequality_tabulated(x in -3.5..3.5f64, p in -5.0..5.0f64, q in -4.0..4.0f64) {
        let table = tabulated_quadratic();
        let l = table.conjugate(x, q);
        prop_assert!(l + table.value(x, p) >= p * q - 1e-9);
    }
}

fn reference_grid_step(values: &[f64]) -> Vec<f64> {
    let problem = reference_problem().with_half_width(2.0).unwrap();
    let solver = SlSolver::new(&problem, 0.1, 0.1).unwrap();
    solver.step(values, 0.0, 0.1).unwrap()
}

/// Node-major two-component datum on the 41-node grid of `[-2, 2]`.
fn smooth_datum(scale: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0..1.0f64, 6), -1.0..1.0f64).prop_map(move |(c, shift)| {
        (0..41)
            .flat_map(|k| {
                let x = -2.0 + 0.1 * k as f64;
                let a = shift + c[0] * (x + c[1]).sin() + c[2] * (0.5 * x).cos();
                let b = shift + c[3] * (x - c[4]).cos() + c[5] * (0.7 * x).sin();
                [scale * a, scale * b]
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sl_step_is_sup_norm_nonexpansive(u in smooth_datum(1.0), v in smooth_datum(1.0)) {
        let su = reference_grid_step(&u);
        let sv = reference_grid_step(&v);
        let before = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let after = su.iter().zip(&sv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn sl_step_preserves_order(u in smooth_datum(1.0), gap in smooth_datum(0.5)) {
        let v: Vec<f64> = u.iter().zip(&gap).map(|(a, g)| a + g.abs()).collect();
        let su = reference_grid_step(&u);
        let sv = reference_grid_step(&v);
        prop_assert!(su.iter().zip(&sv).all(|(a, b)| *a <= *b + 1e-12));
    }

    #[test]
    fn sl_step_commutes_with_constants(u in smooth_datum(1.0), c in -3.0..3.0f64) {
        let shifted: Vec<f64> = u.iter().map(|a| a + c).collect();
        let su = reference_grid_step(&u);
        let ss = reference_grid_step(&shifted);
        prop_assert!(su.iter().zip(&ss).all(|(a, s)| (a + c - s).abs() < 1e-11));
    }
}

#[test]
fn chapman_kolmogorov_on_sampled_laws() {
    let b = CouplingMatrix::validate(&[vec![2.0, -1.5, -0.5], vec![-1.0, 1.0, 0.0], vec![-0.5, -0.5, 1.0]]).unwrap();
    let n = 40_000;
    let ensemble = PathEnsemble::sample(&b, 0, 1.0, n, 7);
    let exact = b.transition_matrix(0.6).unwrap();
    let law = ensemble.state_law(0.6, 3).unwrap();
    for (j, &freq) in law.iter().enumerate() {
        let p = exact.entry(0, j);
        let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1.0 / n as f64);
        assert!((freq - p).abs() <= 4.0 * sigma, "state {j}: {freq} vs {p}");
    }
}
