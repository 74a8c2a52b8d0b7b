use std::ffi::{c_char, c_int, CStr, CString};
use std::ptr;

use fockhier_ffi::*;

const CONFIG: &str = r#"
level = 6

[model]
omega = 1.0
dt = 0.2
points = 5
lambda = 0.01
forcing = [-1.0, -0.95, 0.0, 0.0, 0.0]

[oracle]
samples = 20
max_order = 2

[compare]
abs = 1e-4
"#;

fn last_error() -> String {
    unsafe {
        let n = fh_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0u8; n];
        fh_last_error_message(buf.as_mut_ptr() as *mut c_char, n);
        CStr::from_bytes_with_nul(&buf).unwrap().to_string_lossy().into_owned()
    }
}

fn experiment(text: &str) -> *mut FhExperiment {
    let c = CString::new(text).unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { fh_experiment_from_toml(c.as_ptr(), &mut exp) }, FhStatus::Ok, "{}", last_error());
    exp
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(fh_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn bad_config_sets_status_and_message() {
    let c = CString::new("level = 2\n[model]\nomega = 1.0").unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { fh_experiment_from_toml(c.as_ptr(), &mut exp) }, FhStatus::InvalidConfig);
    assert!(exp.is_null());
    assert!(last_error().contains("missing field"), "{}", last_error());
    assert_eq!(unsafe { fh_experiment_from_toml(ptr::null(), &mut exp) }, FhStatus::NullPointer);
}

#[test]
fn solution_matches_library() {
    let exp = experiment(CONFIG);
    let mut sol = ptr::null_mut();
    unsafe {
        assert_eq!(fh_solve(exp, &mut sol), FhStatus::Ok);
        let (mut d, mut l) = (0, 0);
        assert_eq!(fh_solution_shape(sol, &mut d, &mut l), FhStatus::Ok);
        assert_eq!((d, l), (5, 6));
        let mut trusted: c_int = -2;
        fh_solution_trusted_levels(sol, &mut trusted);
        assert_eq!(trusted, 2);
        let mut n = 0;
        assert_eq!(fh_solution_level(sol, 2, ptr::null_mut(), 0, &mut n), FhStatus::Ok);
        assert_eq!(n, 25);
        let mut small = [0.0; 3];
        assert_eq!(fh_solution_level(sol, 2, small.as_mut_ptr(), 3, &mut n), FhStatus::BufferTooSmall);
        let mut buf = vec![0.0; n];
        assert_eq!(fh_solution_level(sol, 2, buf.as_mut_ptr(), n, &mut n), FhStatus::Ok);
        assert_eq!(fh_solution_level(sol, 7, buf.as_mut_ptr(), n, &mut n), FhStatus::InvalidArgument);

        let cfg = fockhier::cli::ExperimentConfig::from_toml(CONFIG).unwrap();
        let report = fockhier::cli::run_solver(&cfg).unwrap();
        assert_eq!(buf, report.v.level(2));

        let mut needed = 0;
        fh_solution_json(sol, ptr::null_mut(), 0, &mut needed);
        let mut text = vec![0u8; needed];
        assert_eq!(fh_solution_json(sol, text.as_mut_ptr() as *mut c_char, needed, &mut needed), FhStatus::Ok);
        let json: serde_json::Value = serde_json::from_slice(&text[..needed - 1]).unwrap();
        assert_eq!(json["method"], "perturb");
        fh_solution_free(sol);
        fh_experiment_free(exp);
    }
}

#[test]
fn oracle_table_and_compare() {
    let exp = experiment(CONFIG);
    unsafe {
        let mut table = ptr::null_mut();
        assert_eq!(fh_oracle_run(exp, &mut table), FhStatus::Ok);
        let (mut v, mut se) = (0.0, 0.0);
        assert_eq!(fh_table_get(table, ptr::null(), 0, &mut v, &mut se), FhStatus::Ok);
        assert_eq!((v, se), (1.0, 0.0));
        let w = [1usize, 0];
        assert_eq!(fh_table_get(table, w.as_ptr(), 2, &mut v, &mut se), FhStatus::Ok);
        let w2 = [0usize, 1];
        let mut v2 = 0.0;
        fh_table_get(table, w2.as_ptr(), 2, &mut v2, &mut se);
        assert_eq!(v, v2);
        let far = [0usize, 0, 0, 0];
        assert_eq!(fh_table_get(table, far.as_ptr(), 4, &mut v, &mut se), FhStatus::InvalidArgument);
        fh_table_free(table);

        let (mut pass, mut diff) = (0, f64::NAN);
        assert_eq!(fh_compare(exp, &mut pass, &mut diff), FhStatus::Ok);
        assert_eq!(pass, 1);
        assert!(diff < 1e-4);
        assert_eq!(fh_experiment_set_lambda(exp, 0.0), FhStatus::Ok);
        let mut sol = ptr::null_mut();
        assert_eq!(fh_solve(exp, &mut sol), FhStatus::Ok);
        fh_solution_free(sol);
        fh_experiment_free(exp);
    }
}

#[test]
fn library_errors_map_to_codes() {
    let exp = experiment(&CONFIG.replace("[oracle]", "[solver]\nmethod = \"free\"\nseed_mode = \"file\"\n\n[oracle]"));
    let mut sol = ptr::null_mut();
    unsafe {
        assert_eq!(fh_solve(exp, &mut sol), FhStatus::InvalidConfig);
        assert!(sol.is_null());
        assert!(last_error().contains("seed_file"));
        assert_eq!(fh_solve(ptr::null(), &mut sol), FhStatus::NullPointer);
        fh_experiment_free(exp);
        fh_experiment_free(ptr::null_mut());
    }
}
