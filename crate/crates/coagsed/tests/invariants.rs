use std::sync::Arc;

use coagsed::cli::commands::cmd_rescale;
use coagsed::cli::config::ExperimentConfig;
use coagsed::cli::io::{grid_header, read_field, write_field};
use coagsed::grid_fields::{derived_constants, init_field, init_value, total_mass, Field2D, Grid2D, ModelInputs, ParamMode, Params};
use coagsed::kernels::KernelSpec;
use coagsed::mild_solver::{picard_solve, PicardProblem};
use coagsed::splitting_solver::{run, run_from, RunOptions, Scheme};
use proptest::prelude::*;
use serde_json::json;

fn params(epsilon: f64) -> Params {
    derived_constants(
        ModelInputs {
            epsilon,
            alpha: 0.5,
            gamma: 1.2,
            b: 4.0,
            m: 10,
            a: 1.0,
            m1: 64.0,
            m2: 1e6,
        },
        ParamMode::Theorem,
    )
    .unwrap()
}

fn transport_error(ny: usize) -> f64 {
    let p = params(0.1);
    let g = Arc::new(Grid2D::new(-4.0, 4.0, ny, 0.125, 4, 25).unwrap());
    let k = KernelSpec::sum(1.2).scaled(0.0);
    let t = 0.05;
    let tr = run(&p, g.clone(), &k, t, 0.01, 1000).unwrap();
    let h = tr.final_field();
    let e = (t / p.epsilon).exp();
    let mut worst = 0.0f64;
    for i in 0..g.ny() {
        for j in 0..g.nv() {
            let c = g.v[j].powf(p.alpha);
            let exact = e * init_value(c + e * (g.y[i] - c), g.v[j], &p);
            worst = worst.max((h.at(i, j) - exact).abs());
        }
    }
    worst
}

#[test]
fn pure_transport_converges_at_second_order() {
    let errs: Vec<f64> = [96, 192, 384].iter().map(|&n| transport_error(n)).collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] > 3.0, "errors {errs:?}");
    }
    assert!(errs[2] < 5e-3, "errors {errs:?}");
}

fn mild_vs_splitting(ny: usize) -> f64 {
    let p = params(0.1);
    let g = Arc::new(Grid2D::new(-3.0, 3.0, ny, 0.25, 2, 9).unwrap());
    let k = KernelSpec::sum(1.2);
    let horizon = 0.05;
    let problem = PicardProblem::new(p.clone(), g.clone(), &k, horizon, 10, 3).unwrap();
    let mild = picard_solve(&problem, 1e-12, 30).unwrap();
    let a = mild.last().last().unwrap().clone();
    let tr = run(&p, g, &k, horizon, 0.0025, 1000).unwrap();
    tr.final_field().sup_diff(&a) / a.values.iter().cloned().fold(0.0, f64::max)
}

#[test]
fn mild_and_splitting_solutions_agree() {
    let coarse = mild_vs_splitting(48);
    let fine = mild_vs_splitting(96);
    assert!(fine < 0.02, "relative gap {fine:e}");
    assert!(coarse / fine > 2.5, "gap {coarse:e} -> {fine:e}");
}

fn small_grid() -> Arc<Grid2D> {
    Arc::new(Grid2D::new(-2.0, 2.0, 17, 0.25, 2, 7).unwrap())
}

fn field_from(values: Vec<f64>, t: f64) -> Field2D {
    Field2D {
        grid: small_grid(),
        values,
        t,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splitting_keeps_mass_balance_and_sign(
        vals in proptest::collection::vec(0.0f64..2.0, 17 * 7),
        dt in 0.002f64..0.01,
        strang in any::<bool>(),
    ) {
        let p = params(0.2);
        let f = field_from(vals, 0.0);
        let opts = RunOptions {
            horizon: 0.03,
            dt,
            snapshot_every: 1,
            scheme: if strang { Scheme::Strang } else { Scheme::Lie },
        };
        let tr = run_from(&f, &KernelSpec::sum(1.2), &p, opts).unwrap();
        prop_assert!(tr.mass_drift() < 1e-12, "drift {}", tr.mass_drift());
        for s in &tr.snapshots {
            prop_assert!(s.values.iter().all(|&h| h >= 0.0 && h.is_finite()));
        }
        for w in tr.mass_series.windows(2) {
            prop_assert!(w[1].boundary_loss >= w[0].boundary_loss);
        }
    }

    #[test]
    fn snapshots_round_trip_exactly(
        vals in proptest::collection::vec(-1e3f64..1e3, 17 * 7),
        t in 0.0f64..5.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let f = field_from(vals, t);
        let header = json!({"t": t, "grid": grid_header(&f.grid)});
        write_field(&path, &header, &f, ["y", "v", "H"]).unwrap();
        let back = read_field(&path).unwrap();
        prop_assert_eq!(back.field.values, f.values);
        prop_assert_eq!(back.field.t, t);
    }

    #[test]
    fn rescaling_preserves_mass_and_inverts(
        vals in proptest::collection::vec(0.0f64..3.0, 17 * 7),
        t in 0.0f64..0.5,
    ) {
        let cfg = ExperimentConfig::parse("model.epsilon = 0.1\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let f = field_from(vals, t);
        let header = json!({"t": t, "epsilon": 0.1, "grid": grid_header(&f.grid)});
        write_field(&path, &header, &f, ["y", "v", "H"]).unwrap();
        let fwd = cmd_rescale(&cfg, &path, false, dir.path()).unwrap();
        prop_assert!(fwd.failures.is_empty(), "{:?}", fwd.failures);
        let rain = dir.path().join("s_rain.csv");
        let r = read_field(&rain).unwrap();
        prop_assert!((total_mass(&r.field) - total_mass(&f)).abs() <= 1e-12 * total_mass(&f).max(1e-300));
        let back = cmd_rescale(&cfg, &rain, true, dir.path()).unwrap();
        prop_assert!(back.failures.is_empty());
        let b = read_field(&dir.path().join("s_rain_fast.csv")).unwrap();
        for (x, y) in b.field.values.iter().zip(&f.values) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn initial_mass_matches_the_projected_profile() {
    let p = params(0.1);
    let g = Arc::new(Grid2D::new(-4.0, 4.0, 96, 0.125, 4, 25).unwrap());
    let h0 = init_field(g.clone(), &p);
    let tr = run(&p, g, &KernelSpec::sum(1.2), 0.0, 0.01, 1).unwrap();
    assert!((tr.initial_mass() - total_mass(&h0)).abs() <= 1e-13 * total_mass(&h0));
    assert!(tr.snapshots[0].sup_diff(&h0) < 0.05 * h0.values.iter().cloned().fold(0.0, f64::max));
}
