//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fockhier::cuntz::OperatorExpr;
use fockhier::fock::{FockVector, DEFAULT_BUDGET};
use fockhier::inverse::{component_contraction_factor, identity_catalog, CatalogOptions, CheckStatus};
use fockhier::model::{build_oscillator_model, IndexSpace, KernelSet, OscillatorParams};
use fockhier::oracle::{
    dalembert_average, estimate_mtcf, gaussian_free_moments, hierarchy_residual_stats, hydro_moments, marginals, project,
    simulate, Dynamics, EnsembleSpec, ModelScheme, OscillatorDynamics, ProbabilityTensor, WaveDynamics,
};
use fockhier::solver::{
    branching_term_norm, free_solution, lambda_degree_check, lower_triangular_expansion, perturbation_series, rational_solve,
    PerturbOptions, RationalOptions,
};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Oscillator on `points` grid points with initial data carried by the source.
fn model(points: usize, lambda: f64) -> (IndexSpace, KernelSet) {
    let mut f = vec![0.0; points];
    f[0] = -1.0;
    f[1] = -0.95;
    build_oscillator_model(&OscillatorParams::new(1.0, 0.2, points, lambda, 0.0, f)).unwrap()
}

fn max_dense_diff(a: &OperatorExpr, b: &OperatorExpr, level: usize) -> f64 {
    let x = a.materialize(level, DEFAULT_BUDGET).unwrap().to_dense();
    let y = b.materialize(level, DEFAULT_BUDGET).unwrap().to_dense();
    (x - y).amax()
}

fn c1_cuntz() -> Outcome {
    let mut worst = 0.0f64;
    for d in [2, 3, 5] {
        for i in 0..d {
            for j in 0..d {
                let c = OperatorExpr::annihilator(d, i).compose(&OperatorExpr::creator(d, j)).unwrap();
                let want = if i == j { OperatorExpr::identity(d) } else { OperatorExpr::zero(d) };
                worst = worst.max(max_dense_diff(&c, &want, 3));
            }
        }
        worst = worst.max(max_dense_diff(&OperatorExpr::unit_decomposition(d), &OperatorExpr::identity(d), 4));
    }
    outcome(worst <= 1e-12, format!("max residual {worst:.1e} (tol 1e-12), d in {{2,3,5}}, levels <= 4"))
}

fn c2_factor_a() -> Outcome {
    let f: Vec<f64> = (1..=3).map(|a| component_contraction_factor(a).unwrap()).collect();
    let pass = f.iter().enumerate().all(|(i, &x)| x == (i + 1) as f64);
    outcome(pass, format!("factors {f:?} for A = 1, 2, 3"))
}

fn c3_catalog() -> Outcome {
    let mut p = OscillatorParams::new(1.0, 0.2, 5, 0.5, 0.3, vec![-1.0, -0.95, 0.2, 0.3, 0.1]);
    p.lags = vec![1.0, 0.4];
    let (space, kernels) = build_oscillator_model(&p).unwrap();
    let results = identity_catalog(&space, &kernels, 3, &CatalogOptions::default());
    let bad: Vec<String> = results
        .iter()
        .filter(|r| !(r.passed() || r.status == CheckStatus::Info))
        .map(|r| format!("{}={:?}", r.id, r.max_residual))
        .collect();
    let worst = results.iter().filter(|r| r.passed()).filter_map(|r| r.max_residual).fold(0.0, f64::max);
    let info = results.iter().filter(|r| r.status == CheckStatus::Info).count();
    outcome(
        bad.is_empty(),
        format!("{} identities, max residual {worst:.1e} (tol 1e-10), {info} informational, failing: {bad:?}", results.len()),
    )
}

fn c4_branching() -> Outcome {
    let (space, kernels) = model(5, 0.2);
    let (r, top) = branching_term_norm(&space, &kernels, 4, None).unwrap();
    outcome(top.is_some() && r <= 1e-12, format!("norm {r:.1e} (tol 1e-12), trusted up to {top:?}"))
}

fn c5_structure() -> Outcome {
    let s = IndexSpace::new(1, ["u"]).unwrap();
    let k = KernelSet::new(&s, DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 0.3, 0.0).unwrap();
    let mut seed = FockVector::vacuum(1, 4);
    for n in 1..=4 {
        seed.level_mut(n)[0] = 0.1 * n as f64;
    }
    let r = lower_triangular_expansion(&s, &k, 4, Some(seed)).unwrap();
    let predicted: Vec<usize> = (0..=4).map(|m| m / 2 + 1).collect();
    let counts_ok = r.series_terms_used == predicted;
    let (space, kernels) = model(5, 0.0);
    let series = perturbation_series(&space, &kernels, 4, &PerturbOptions { order: 3, ..Default::default() }).unwrap();
    let bit_exact = series.v == free_solution(&kernels, 4).unwrap();
    outcome(
        counts_ok && bit_exact,
        format!("term counts {:?} vs predicted {predicted:?}; perturbation at zero coupling bit-exact: {bit_exact}", r.series_terms_used),
    )
}

fn c6_rational() -> Outcome {
    let (space, kernels) = model(5, 0.0);
    let opts = RationalOptions::default();
    let grid: Vec<f64> = (0..8).map(|i| 0.01 * i as f64).collect();
    let rep = lambda_degree_check(|l| rational_solve(&space, &kernels, 4, l, &opts).map(|r| r.v), &grid).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for lv in &rep.levels {
        let ok = lv.degree.is_some_and(|d| d <= lv.level.div_ceil(2) + 1) && lv.residual < 1e-10;
        pass &= ok;
        parts.push(format!("m={} deg={:?}", lv.level, lv.degree));
    }
    let worst = rep.levels.iter().map(|l| l.residual).fold(0.0, f64::max);
    outcome(pass, format!("{}; max fit residual {worst:.1e} (tol 1e-10)", parts.join(", ")))
}

fn c7_isserlis() -> Outcome {
    let dy = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.0, dt: 0.02, stride: 25, points: 4, sites: 1, components: 1, forcing: vec![0.0] });
    let ens = EnsembleSpec::gaussian(vec![0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.09])), 10_000, 42);
    let traj = simulate(&dy, &ens).unwrap();
    let table = estimate_mtcf(&traj, 4, None).unwrap();
    let exact = gaussian_free_moments(&dy, &ens, 4).unwrap();
    let mut worst = 0.0f64;
    let mut over = 0;
    for (w, &v) in &exact {
        if w.is_empty() {
            continue;
        }
        let e = table.get(w).unwrap();
        let z = (e.value - v).abs() / e.stderr;
        worst = worst.max(z);
        over += usize::from(z > 3.0);
    }
    outcome(over == 0, format!("{} words up to order 4, max |diff|/stderr {worst:.2} (tol 3), {over} outside", exact.len() - 1))
}

fn truncation_error(lambda: f64) -> f64 {
    let (space, kernels) = model(5, lambda);
    let report = perturbation_series(&space, &kernels, 6, &PerturbOptions { order: 2, ..Default::default() }).unwrap();
    let top = report.trusted_levels.unwrap();
    let dy = Dynamics::ModelScheme(ModelScheme { space: space.clone(), kernels, boundary_rows: 2 });
    let traj = simulate(&dy, &EnsembleSpec::pinned(&[0.0, 0.0], 100_000, 1)).unwrap();
    let table = estimate_mtcf(&traj, top, None).unwrap();
    let (oracle, _) = table.to_fock(top).unwrap();
    report.v.resized(top).max_abs_diff(&oracle, top).unwrap()
}

fn c8_perturbation() -> Outcome {
    let e2 = truncation_error(0.02);
    let e1 = truncation_error(0.01);
    let ratio = e2 / e1;
    outcome((4.0..=16.0).contains(&ratio), format!("errors {e2:.3e} / {e1:.3e}, ratio {ratio:.2} (band [4, 16])"))
}

fn c9_residual() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for lambda in [0.0, 0.02] {
        let (space, kernels) = model(5, lambda);
        let dy = Dynamics::ModelScheme(ModelScheme { space: space.clone(), kernels: kernels.clone(), boundary_rows: 2 });
        let ens = EnsembleSpec::gaussian(vec![0.0, 0.0], DMatrix::identity(2, 2) * 0.01, 10_000, 5);
        let traj = simulate(&dy, &ens).unwrap();
        let table = estimate_mtcf(&traj, 4, None).unwrap();
        let stats = hierarchy_residual_stats(&table, &space, &kernels, 4, &[2, 3, 4]).unwrap();
        for s in &stats {
            pass &= s.max_ratio <= 4.0;
            parts.push(format!("lambda={lambda} level {}: ratio {:.2}", s.level, s.max_ratio));
        }
    }
    outcome(pass, format!("{} (tol 4)", parts.join("; ")))
}

fn c10_dalembert() -> Outcome {
    let w = WaveDynamics { points: 64, length: 2.0, speed: 1.0, cfl: 0.5, stride: 8, records: 5 };
    let pi = std::f64::consts::PI;
    let x: Vec<f64> = (0..64).map(|j| j as f64 * w.dx()).collect();
    let mut mean: Vec<f64> = x.iter().map(|x| (pi * x).sin()).collect();
    mean.extend(vec![0.0; 64]);
    let mut cols = Vec::new();
    for k in 1..=3 {
        let c: Vec<f64> = x.iter().map(|x| (pi * k as f64 * x).cos()).collect();
        let s: Vec<f64> = x.iter().map(|x| (pi * k as f64 * x).sin()).collect();
        let z = vec![0.0; 64];
        cols.extend([[c.clone(), z.clone()].concat(), [z.clone(), c].concat(), [s.clone(), z.clone()].concat(), [z, s].concat()]);
    }
    let b = DMatrix::from_fn(128, cols.len(), |i, j| 0.1 * cols[j][i]);
    let cov = &b * b.transpose();
    let ens = EnsembleSpec::gaussian(mean, (&cov + cov.transpose()) * 0.5, 200, 11);
    let avg = dalembert_average(&w, &ens).unwrap();
    outcome(avg.max_diff <= 1e-3, format!("max-norm {:.2e} (tol 1e-3), 64 points, CFL 0.5", avg.max_diff))
}

fn c11_marginals_hydro() -> Outcome {
    let raw = [1.0, 7.0, 3.0, 5.0, 2.0, 4.0, 6.0, 4.0];
    let total: f64 = raw.iter().sum();
    let f = ProbabilityTensor::new(vec![2, 2, 2], raw.iter().map(|x| x / total).collect()).unwrap();
    let mut exact = true;
    for m in 0..=3 {
        for n in m..=3 {
            exact &= marginals(&marginals(&f, n).unwrap(), m).unwrap() == marginals(&f, m).unwrap();
            exact &= project(&project(&f, n).unwrap(), m).unwrap() == project(&f, m).unwrap();
        }
    }
    let dy = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.0, dt: 0.05, stride: 4, points: 3, sites: 3, components: 3, forcing: vec![0.0; 3] });
    let ens = EnsembleSpec::gaussian(vec![0.1; 18], DMatrix::identity(18, 18) * 0.2, 3000, 4);
    let traj = simulate(&dy, &ens).unwrap();
    let worst = [(0, 0, 0), (1, 0, 0), (1, 2, 0), (0, 1, 1)]
        .iter()
        .map(|&(k, l, m)| hydro_moments(&traj, k, l, m).unwrap().max_discrepancy())
        .fold(0.0, f64::max);
    outcome(exact && worst <= 3.0, format!("marginal law exact: {exact}; hydro routes max discrepancy {worst:.2} combined stderr (tol 3)"))
}

const CLI_CONFIG: &str = r#"
level = 6

[model]
omega = 1.0
dt = 0.2
points = 5
lambda = 0.02
forcing = [-1.0, -0.95, 0.0, 0.0, 0.0]

[oracle]
samples = 4000
seed = 42
max_order = 2

[oracle.ensemble]
kind = "gaussian"
variance = [0.01, 0.01]

[compare]
sigma = 1e9
"#;

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, CLI_CONFIG).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let mut identical = true;
    let mut files = 0;
    for cmd in [&["oracle", "run"][..], &["compare"][..]] {
        let runs: Vec<_> = ["1", "4"]
            .iter()
            .map(|threads| {
                let out = dir.path().join(format!("{}-{threads}", cmd.join("-")));
                let mut args = vec!["fockhier"];
                args.extend_from_slice(cmd);
                let out_s = out.to_string_lossy().into_owned();
                args.extend([cfg.as_str(), "--out", out_s.as_str(), "--threads", threads]);
                assert_eq!(fockhier::cli::main_with_args(args), 0);
                out
            })
            .collect();
        for entry in std::fs::read_dir(&runs[0]).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(runs[0].join(&name)).unwrap();
            let b = std::fs::read(runs[1].join(&name)).unwrap();
            identical &= a == b;
            files += 1;
        }
    }
    outcome(identical, format!("{files} output files compared across runs with 1 and 4 threads, byte-identical: {identical}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 12] = [
        ("cuntz relations and unit decomposition", c1_cuntz, Duration::from_secs(10)),
        ("component contraction factor", c2_factor_a, Duration::MAX),
        ("inverse identity catalog", c3_catalog, Duration::from_secs(60)),
        ("branching-term closure", c4_branching, Duration::MAX),
        ("expansion structure", c5_structure, Duration::MAX),
        ("rational coupling polynomiality", c6_rational, Duration::MAX),
        ("oracle vs Gaussian pairing moments", c7_isserlis, Duration::from_secs(120)),
        ("oracle vs perturbation series", c8_perturbation, Duration::from_secs(600)),
        ("hierarchy residual of estimates", c9_residual, Duration::MAX),
        ("averaged wave vs d'Alembert", c10_dalembert, Duration::MAX),
        ("marginal law and hydrodynamic routes", c11_marginals_hydro, Duration::MAX),
        ("determinism", c12_determinism, Duration::MAX),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let time_note = if *limit == Duration::MAX { String::new() } else { format!(", limit {}s", limit.as_secs()) };
        println!(
            "criterion {:2} {} {name}: {} [{:.2}s{time_note}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
