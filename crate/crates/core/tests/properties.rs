use fockhier::fock::FockVector;
use fockhier::inverse::{identity_residual, left_inverse_g, right_inverse_k_plus_g, unit_minus_vacuum};
use fockhier::model::{IndexSpace, KernelSet};
use fockhier::op::Op;
use fockhier::oracle::{estimate_mtcf, marginals, simulate, Dynamics, EnsembleSpec, ModelScheme, ProbabilityTensor};
use fockhier::solver::{free_solution, perturbation_series, residual, PerturbOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Lower-triangular `K` with diagonal bounded away from zero, nonzero source.
fn arb_kernels(d: usize) -> impl Strategy<Value = (IndexSpace, KernelSet)> {
    (
        prop::collection::vec(0.5f64..2.0, d),
        prop::collection::vec(-1.0f64..1.0, d * d),
        prop::collection::vec(prop_oneof![-1.0f64..-0.2, 0.2f64..1.0], d),
        prop::collection::vec(0.5f64..1.5, d),
        -0.2f64..0.2,
    )
        .prop_map(move |(diag, low, g, m, lambda)| {
            let labels: Vec<String> = (0..d).map(|i| format!("u{i}")).collect();
            let space = IndexSpace::new(1, labels).unwrap();
            let k = DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else if j < i { 0.5 * low[i * d + j] } else { 0.0 });
            let ks = KernelSet::new(&space, k, DVector::from_vec(g), DMatrix::from_diagonal(&DVector::from_vec(m)), lambda, 0.0).unwrap();
            (space, ks)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn k_plus_g_right_inverse((_, k) in arb_kernels(3)) {
        let b = right_inverse_k_plus_g(&k, 3, None).unwrap();
        let (r, top) = identity_residual(&b.defining_product(), &Op::from(unit_minus_vacuum(3)), 3, 3).unwrap();
        prop_assert!(top.is_some());
        prop_assert!(r <= 1e-10, "{}", r);
    }

    #[test]
    fn g_left_inverse_is_left_inverse((_, k) in arb_kernels(3), w in prop::collection::vec(0.1f64..1.0, 3)) {
        let total: f64 = w.iter().sum();
        let chi: Vec<f64> = w.iter().map(|x| x / total).collect();
        let b = left_inverse_g(&k, Some(&chi)).unwrap();
        let (r, _) = identity_residual(&b.defining_product(), &Op::identity(3), 3, 3).unwrap();
        prop_assert!(r <= 1e-12, "{}", r);
    }

    #[test]
    fn free_solution_solves_linear_hierarchy((s, k) in arb_kernels(2)) {
        let k0 = k.with_lambda(0.0);
        let v = free_solution(&k0, 4).unwrap();
        prop_assert_eq!(v.level(0), &[1.0][..]);
        for r in residual(&v, &s, &k0).unwrap().iter().filter(|r| r.trusted) {
            prop_assert!(r.max_abs <= 1e-12, "{:?}", r);
        }
        let series = perturbation_series(&s, &k0, 4, &PerturbOptions { order: 2, ..Default::default() }).unwrap();
        prop_assert_eq!(series.v, v);
    }

    #[test]
    fn marginals_compose(raw in prop::collection::vec(0.01f64..1.0, 12)) {
        let total: f64 = raw.iter().sum();
        let f = ProbabilityTensor::new(vec![2, 3, 2], raw.iter().map(|x| x / total).collect()).unwrap();
        for m in 0..=3 {
            for n in m..=3 {
                let a = marginals(&marginals(&f, n).unwrap(), m).unwrap();
                let b = marginals(&f, m).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn pinned_ensemble_gives_product_moments(y0 in -0.2f64..0.2, y1 in -0.2f64..0.2, lambda in 0.0f64..0.1) {
        let mut f = vec![0.0; 4];
        f[0] = -1.0;
        f[1] = -0.9;
        let (space, kernels) = fockhier::model::build_oscillator_model(&fockhier::model::OscillatorParams::new(1.0, 0.2, 4, lambda, 0.0, f)).unwrap();
        let dy = Dynamics::ModelScheme(ModelScheme { space, kernels, boundary_rows: 2 });
        let (phi, _) = dy.run(&[y0, y1]).unwrap();
        let traj = simulate(&dy, &EnsembleSpec::pinned(&[y0, y1], 5, 3)).unwrap();
        let table = estimate_mtcf(&traj, 3, None).unwrap();
        let (v, se) = table.to_fock(3).unwrap();
        prop_assert_eq!(se.norm(), 0.0);
        let mut direct = FockVector::vacuum(4, 3);
        for n in 1..=3 {
            for (idx, x) in direct.level_mut(n).iter_mut().enumerate() {
                *x = fockhier::fock::word_at(4, n, idx).iter().map(|&l| phi[l]).product();
            }
        }
        prop_assert!(v.max_abs_diff(&direct, 3).unwrap() <= 1e-15);
    }
}
