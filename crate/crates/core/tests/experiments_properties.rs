mod common;

use common::*;
use gllod::experiments::*;
use gllod::forms::Potential;
use gllod::space::SpaceKind;
use num_complex::Complex64;
use proptest::prelude::*;

fn small(space: SpaceKind) -> ExperimentConfig {
    ExperimentConfig {
        kappa: 4.0,
        coarse_n: 8,
        fine_n: 8,
        layers: 2,
        space,
        initial: Initial::Index(10),
        tol: 1e-13,
        max_iter: 2000,
        ..Default::default()
    }
}

#[test]
fn degenerate_lod_matches_p1() {
    let (_, lod) = run_single(&small(SpaceKind::Lod), None, None).unwrap();
    let (_, p1) = run_single(&small(SpaceKind::P1), None, None).unwrap();
    assert!((lod.final_energy - p1.final_energy).abs() <= 1e-8, "{} vs {}", lod.final_energy, p1.final_energy);
}

#[test]
fn table_keeps_cell_order_and_records_unconverged_runs() {
    let config = ExperimentConfig {
        kappas: Some(vec![2.0, 4.0]),
        initials: Some(vec![1, 5, 10]),
        max_iter: 3,
        ..small(SpaceKind::P1)
    };
    let rows = run_table(&config, None, 3).unwrap();
    let cells: Vec<(usize, f64)> = rows.iter().map(|r| (r.initial, r.kappa)).collect();
    assert_eq!(cells, vec![(1, 2.0), (1, 4.0), (5, 2.0), (5, 4.0), (10, 2.0), (10, 4.0)]);
    for r in &rows {
        assert!(r.energy.is_finite());
        assert_eq!(r.iterations, 3);
        assert_eq!(r.termination, "max_iterations");
    }
    let serial = run_table(&config, None, 1).unwrap();
    assert_eq!(format!("{rows:?}"), format!("{serial:?}"));
    let bad = ExperimentConfig { initials: Some(vec![1, 99]), ..config };
    assert!(run_table(&bad, None, 1).is_err());
}

#[test]
fn table_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { kappas: Some(vec![2.0]), initials: Some(vec![10]), ..small(SpaceKind::P1) };
    let rows = run_table(&config, None, 1).unwrap();
    let path = dir.path().join("table.csv");
    write_table_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "initial,kappa,energy,iterations,termination");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("10,2,"));
}

#[test]
fn cached_basis_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { coarse_n: 4, fine_n: 16, ..small(SpaceKind::Lod) };
    let first = build_space(&config, config.kappa, Some(dir.path())).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1);
    let stamp = std::fs::metadata(&files[0]).unwrap().modified().unwrap();
    let second = build_space(&config, config.kappa, Some(dir.path())).unwrap();
    assert_eq!(std::fs::metadata(&files[0]).unwrap().modified().unwrap(), stamp);
    let (a, b) = (first.basis().unwrap(), second.basis().unwrap());
    for j in 0..a.num_columns() {
        assert_eq!(a.column_dense(j), b.column_dense(j));
    }
}

#[test]
fn field_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = gllod::mesh::Mesh::build_uniform(6).unwrap();
    let field = initial_value(7, &mesh).unwrap();
    let path = dir.path().join("field.csv");
    write_field_csv(&path, &mesh, field.values()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,re,im");
    let (n, values) = read_field_csv(&path).unwrap();
    assert_eq!(n, 6);
    for (a, b) in values.iter().zip(field.values()) {
        assert!((a - b).norm() <= 1e-14);
    }
}

#[test]
fn config_json_round_trips_and_rejects_unknown_keys() {
    let config = small(SpaceKind::Lod);
    assert_eq!(ExperimentConfig::from_json(&config.to_json()).unwrap(), config);
    assert_eq!(config.hash(), ExperimentConfig::from_json(&config.to_json()).unwrap().hash());
    let bad = config.to_json().replacen("\"kappa\"", "\"kapa\"", 1);
    assert!(ExperimentConfig::from_json(&bad).is_err());
    let mismatched = ExperimentConfig { fine_n: 12, ..config };
    assert!(mismatched.validate().is_err());
}

#[test]
fn fitted_slope_of_exact_power_law() {
    let pts: Vec<(usize, f64)> = [4usize, 8, 16, 32].iter().map(|&n| (n, 3.0 * (n as f64).powi(-3))).collect();
    assert!((fit_slope(&pts) - 3.0).abs() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn aligned_errors_ignore_global_phase(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        let f = forms(6, 5.0, Potential::SinCos);
        let mut r = rng(seed);
        let nv = f.mesh().num_vertices();
        let (u, v) = (random_vec(&mut r, nv), random_vec(&mut r, nv));
        let rotated: Vec<Complex64> = v.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
        let (h0, l0) = aligned_errors(&f, &u, &v);
        let (h1, l1) = aligned_errors(&f, &u, &rotated);
        prop_assert!((h0 - h1).abs() <= 1e-10 * (1.0 + h0));
        prop_assert!((l0 - l1).abs() <= 1e-10 * (1.0 + l0));
        let (self_h, self_l) = aligned_errors(&f, &u, &u.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect::<Vec<_>>());
        prop_assert!(self_h <= 1e-10 * f.h1kappa_norm(&u));
        prop_assert!(self_l <= 1e-10 * f.l2_norm(&u));
    }
}

#[test]
#[ignore = "desk-scale minimizations, several minutes"]
fn stronger_field_carries_more_vortices() {
    let count = |kappa: f64| {
        let config = ExperimentConfig { kappa, ..Default::default() };
        let (space, run) = run_single(&config, None, None).unwrap();
        count_vortices(space.mesh(), &run.field, 0.2)
    };
    let (weak, strong) = (count(10.0), count(25.0));
    println!("vortices: kappa=10 {weak}, kappa=25 {strong}");
    assert!(strong >= weak);
}
