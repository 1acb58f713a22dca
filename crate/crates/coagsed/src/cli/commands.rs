//! Subcommand bodies. Each returns an [`Outcome`]; hard errors propagate.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, KernelKind, SolverKind};
use super::io::{fmt, grid_header, read_field, write_csv, write_field, write_json};
use crate::characteristics::{
    fit_k3, largest_clean_epsilon, prop44_sweep, random_starts, CharParams, SweepReport, Tolerance, ALL_BOUNDS,
};
use crate::diagnostics::{
    concentration_rate, dirac_concentration, envelope_check, fit_envelope_constants, lemma_211_sweep,
    lemma_212_sweep, negativity_check, semigroup_decay_sweep, quarter_octave_ladder, CheckReport,
};
use crate::diagonal_limit::{beta, evolve_diagonal, marginal_compare, DiagonalOptions, DiagonalTrajectory, Profile1D};
use crate::grid_fields::{init_field, total_mass, Field2D};
use crate::mild_solver::{picard_solve, PicardProblem, PicardState};
use crate::splitting_solver::{run_from, RunOptions};
use crate::{Error, Result};

/// What a command reports besides its files. Failures make the exit status nonzero.
#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
}

impl Outcome {
    fn absorb(&mut self, other: Outcome, prefix: &str) {
        self.summary.extend(other.summary.into_iter().map(|s| format!("{prefix}{s}")));
        self.warnings.extend(other.warnings.into_iter().map(|s| format!("{prefix}{s}")));
        self.failures.extend(other.failures.into_iter().map(|s| format!("{prefix}{s}")));
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const RAIN_CAVEAT: &str =
    "caveat: the rain kernel vanishes on the diagonal, so its diagonal limit is static; the L1 column compares against the initial marginal";

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn header(cfg: &ExperimentConfig, kind: &str, extra: Value) -> Value {
    let mut h = json!({
        "kind": kind,
        "config": cfg.resolved(),
        "params": cfg.params,
        "epsilon": cfg.params.epsilon,
    });
    if let (Some(h), Value::Object(extra)) = (h.as_object_mut(), extra) {
        h.extend(extra);
    }
    h
}

fn snapshot_header(cfg: &ExperimentConfig, f: &Field2D) -> Value {
    header(cfg, "snapshot", json!({"t": f.t, "grid": grid_header(&f.grid)}))
}

struct Run2d {
    snapshots: Vec<Field2D>,
    drift: f64,
}

fn solve_2d(cfg: &ExperimentConfig, out: &Path, outcome: &mut Outcome) -> Result<Run2d> {
    let grid = cfg.grid.build()?;
    let h0 = init_field(grid.clone(), &cfg.params);
    match cfg.solver {
        SolverKind::Splitting => {
            let traj = run_from(
                &h0,
                &cfg.kernel,
                &cfg.params,
                RunOptions {
                    horizon: cfg.horizon,
                    dt: cfg.dt,
                    snapshot_every: cfg.snapshot_every,
                    scheme: cfg.scheme,
                },
            )?;
            let rows = traj.mass_series.iter().map(|r| vec![fmt(r.t), fmt(r.mass), fmt(r.boundary_loss)]);
            write_csv(&out.join("mass.csv"), &header(cfg, "mass_series", json!({})), &["t", "mass", "boundary_loss"], rows)?;
            outcome.summary.push(format!("steps = {}", traj.steps));
            let drift = traj.mass_drift();
            Ok(Run2d { snapshots: traj.snapshots, drift })
        }
        SolverKind::Mild => {
            let snapshots = if cfg.horizon == 0.0 {
                vec![h0]
            } else {
                let state = run_picard(cfg, out, outcome)?;
                state.last().to_vec()
            };
            let m0 = total_mass(&snapshots[0]);
            let rows: Vec<Vec<String>> = snapshots.iter().map(|f| vec![fmt(f.t), fmt(total_mass(f))]).collect();
            write_csv(&out.join("mass.csv"), &header(cfg, "mass_series", json!({})), &["t", "mass"], rows)?;
            let drift = (total_mass(snapshots.last().unwrap()) - m0).abs() / m0;
            Ok(Run2d { snapshots, drift })
        }
    }
}

fn run_picard(cfg: &ExperimentConfig, out: &Path, outcome: &mut Outcome) -> Result<PicardState> {
    let grid = cfg.grid.build()?;
    let problem = PicardProblem::new(
        cfg.params.clone(),
        grid,
        &cfg.kernel,
        cfg.horizon,
        cfg.picard.intervals,
        cfg.picard.substeps,
    )?;
    let state = picard_solve(&problem, cfg.picard.tol, cfg.picard.max_iter)?;
    let ratios = state.ratios();
    let rows = state.residuals.iter().enumerate().map(|(n, &r)| {
        let ratio = if n == 0 { f64::NAN } else { ratios[n - 1] };
        vec![n.to_string(), fmt(r), fmt(ratio)]
    });
    write_csv(
        &out.join("residuals.csv"),
        &header(cfg, "picard_residuals", json!({"status": state.status})),
        &["n", "sup_residual", "fitted_ratio"],
        rows,
    )?;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome.summary.push(format!(
        "picard: {} residuals, last = {:.3e}, ratios = [{}], status = {:?}",
        state.residuals.len(),
        state.residuals.last().copied().unwrap_or(0.0),
        shown.join(", "),
        state.status
    ));
    if let Some(&first) = ratios.first() {
        if first > 0.5 {
            outcome
                .warnings
                .push(format!("picard: first residual ratio {first:.3} exceeds 1/2; shorten solver.horizon"));
        }
    }
    Ok(state)
}

fn envelope_reports(cfg: &ExperimentConfig, fields: &[Field2D], outcome: &mut Outcome) -> Value {
    let checks: Vec<CheckReport> = fields.iter().map(|f| envelope_check(f, &cfg.params, cfg.envelope.mode)).collect();
    let negativity: Vec<CheckReport> = fields.iter().map(negativity_check).collect();
    let misses: usize = checks.iter().map(|c| c.violation_count).sum();
    let worst = checks.iter().map(|c| c.max_ratio).fold(0.0, f64::max);
    outcome.summary.push(format!(
        "envelope (M1 = {}, M2 = {}): worst ratio = {worst:.4}, violations = {misses}",
        cfg.params.m1, cfg.params.m2
    ));
    if misses > 0 {
        outcome
            .warnings
            .push(format!("envelope: {misses} nodes exceed the envelope with the configured M1, M2"));
    }
    let negative: usize = negativity.iter().map(|c| c.violation_count).sum();
    if negative > 0 {
        outcome.failures.push(format!("nonnegativity: {negative} negative nodes"));
    }
    let fit = if cfg.envelope.fit {
        let ladder = quarter_octave_ladder(cfg.envelope.ladder_start, cfg.envelope.ladder_count);
        let fit = fit_envelope_constants(fields, &cfg.params, cfg.envelope.mode, &ladder);
        match fit {
            Some(f) => outcome.summary.push(format!("envelope fit: M1 = {}, M2 = {}", f.m1, f.m2)),
            None => outcome.warnings.push("envelope fit: no M1 on the ladder passes".into()),
        }
        json!(fit)
    } else {
        Value::Null
    };
    json!({"checks": checks, "negativity": negativity, "fit": fit})
}

fn concentration_rows(cfg: &ExperimentConfig, fields: &[Field2D]) -> Vec<(f64, f64)> {
    fields
        .iter()
        .filter_map(|f| dirac_concentration(f, cfg.params.alpha, cfg.delta).ok().map(|c| (f.t, c)))
        .collect()
}

pub fn cmd_run2d(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    run2d_collect(cfg, out).map(|(o, _)| o)
}

fn run2d_collect(cfg: &ExperimentConfig, out: &Path) -> Result<(Outcome, Vec<Field2D>)> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    let run = solve_2d(cfg, out, &mut outcome)?;
    for (k, f) in run.snapshots.iter().enumerate() {
        write_field(&out.join(format!("snapshot_{k:04}.csv")), &snapshot_header(cfg, f), f, ["y", "v", "H"])?;
    }
    let env = envelope_reports(cfg, &run.snapshots, &mut outcome);
    write_json(&out.join("envelope.json"), &header(cfg, "envelope", json!({})), &env)?;
    let conc = concentration_rows(cfg, &run.snapshots);
    let m = cfg.params.m;
    let eps = cfg.params.epsilon;
    let rows = conc.iter().map(|&(t, c)| vec![fmt(t), fmt(c), fmt(concentration_rate(eps, t, m))]);
    write_csv(
        &out.join("concentration.csv"),
        &header(cfg, "concentration", json!({"delta": cfg.delta})),
        &["t", "fraction", "rate"],
        rows,
    )?;
    outcome.summary.insert(0, format!("snapshots = {}", run.snapshots.len()));
    outcome.summary.push(format!("mass drift = {:.3e}", run.drift));
    if let Some(&(t, c)) = conc.last() {
        outcome.summary.push(format!("outside-mass fraction at t = {t} (delta = {}) = {c:.4}", cfg.delta));
    }
    Ok((outcome, run.snapshots))
}

fn diagonal_run(cfg: &ExperimentConfig) -> Result<(Profile1D, DiagonalTrajectory)> {
    let grid = cfg.grid.build()?;
    let g0 = Profile1D::from_marginal(&init_field(grid, &cfg.params));
    let mut opts = DiagonalOptions::new(cfg.params.alpha, cfg.params.gamma, cfg.diagonal.horizon, cfg.diagonal.dt);
    opts.snapshot_every = cfg.diagonal.snapshot_every;
    opts.closure = cfg.diagonal.closure;
    let traj = evolve_diagonal(&g0, opts)?;
    Ok((g0, traj))
}

pub fn cmd_run_diagonal(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    if cfg.kernel_kind == KernelKind::Rain {
        outcome.warnings.push(RAIN_CAVEAT.into());
    }
    let (_, traj) = diagonal_run(cfg)?;
    let rows = traj
        .profiles
        .iter()
        .flat_map(|p| p.v.iter().zip(&p.values).map(move |(&v, &g)| vec![fmt(p.t), fmt(v), fmt(g)]));
    write_csv(&out.join("diagonal.csv"), &header(cfg, "diagonal_profiles", json!({})), &["t", "v", "G"], rows)?;
    let rows = traj.profiles.iter().map(|p| vec![fmt(p.t), fmt(p.mass()), fmt(p.mass_median().unwrap_or(f64::NAN))]);
    write_csv(
        &out.join("diagonal_moments.csv"),
        &header(cfg, "diagonal_moments", json!({})),
        &["t", "mass", "mass_median"],
        rows,
    )?;
    outcome.summary.push(format!("steps = {}", traj.steps));
    outcome.summary.push(format!("mass drift = {:.3e}", traj.mass_drift()));
    outcome.summary.push(format!("outflux = {:.3e}, clamp mass = {:.3e}", traj.outflux, traj.clamp_mass));
    outcome
        .summary
        .push(format!("self-similar exponent beta = {:.6}", beta(cfg.params.alpha, cfg.params.gamma)));
    Ok(outcome)
}

pub fn cmd_picard(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    run_picard(cfg, out, &mut outcome)?;
    Ok(outcome)
}

fn char_sweep(cfg: &ExperimentConfig, starts: usize, fd_every: usize) -> Result<SweepReport> {
    let c = &cfg.characteristics;
    let p = CharParams {
        epsilon: c.epsilon,
        ..CharParams::from(&cfg.params)
    };
    let pts = random_starts(starts, c.v_lo, c.v_hi, c.depth, p.alpha, cfg.seed);
    prop44_sweep(p, &pts, c.t_end, Tolerance { rtol: c.rtol, atol: c.atol }, c.bound_tol, fd_every)
}

fn sweep_findings(rep: &SweepReport, outcome: &mut Outcome) {
    outcome.summary.push(format!(
        "characteristics: {} starts at epsilon = {}, violations = {}, max FD error = {:.3e}",
        rep.starts, rep.epsilon, rep.violations, rep.max_fd_error
    ));
    if rep.violations > 0 {
        outcome.warnings.push(format!(
            "characteristics: {} bound violations at epsilon = {} (model-regime finding)",
            rep.violations, rep.epsilon
        ));
    }
    if rep.max_fd_error > 1e-4 {
        outcome
            .warnings
            .push(format!("characteristics: variational derivatives off by {:.3e}", rep.max_fd_error));
    }
}

fn bound_name(b: crate::characteristics::Bound) -> String {
    let s = serde_json::to_value(b).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let mut out = String::new();
    for (k, ch) in s.chars().enumerate() {
        if ch.is_uppercase() && k > 0 {
            out.push('_');
        }
        out.push(ch.to_ascii_lowercase());
    }
    out
}

pub fn cmd_characteristics(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    let c = &cfg.characteristics;
    let rep = char_sweep(cfg, c.starts, c.fd_every)?;
    let mut cols = vec!["y0".to_string(), "v0".to_string()];
    cols.extend(ALL_BOUNDS.iter().map(|&b| bound_name(b)));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let rows = rep.rows.iter().map(|r| {
        let mut row = vec![fmt(r.y0), fmt(r.v0)];
        row.extend(r.worst.iter().map(|&x| fmt(x)));
        row
    });
    write_csv(&out.join("characteristics.csv"), &header(cfg, "characteristics_sweep", json!({})), &cols, rows)?;
    sweep_findings(&rep, &mut outcome);

    let p = CharParams {
        epsilon: c.epsilon,
        ..CharParams::from(&cfg.params)
    };
    let pts = random_starts(c.starts, c.v_lo, c.v_hi, c.depth, p.alpha, cfg.seed);
    let tol = Tolerance { rtol: c.rtol, atol: c.atol };
    let eps1 = if c.epsilon_ladder.is_empty() {
        None
    } else {
        let e = largest_clean_epsilon(p, &c.epsilon_ladder, &pts, c.t_end, tol, c.bound_tol)?;
        match e {
            Some(e) => outcome.summary.push(format!("largest clean epsilon on the ladder = {e}")),
            None => outcome.warnings.push("no epsilon on the ladder is clean".into()),
        }
        e
    };
    let k3 = if c.k3_ladder.is_empty() {
        None
    } else {
        let params = cfg.params.clone().with_epsilon(c.epsilon);
        let r = fit_k3(&params, &c.k3_ladder, &pts, c.time_samples)?;
        match &r {
            Some(r) => outcome.summary.push(format!("smallest passing K3 = {} (max ratio {:.4})", r.k3, r.max_ratio)),
            None => outcome.warnings.push("no K3 on the ladder passes the T3 domination check".into()),
        }
        r
    };
    let summary = json!({
        "starts": rep.starts,
        "t_end": rep.t_end,
        "epsilon": rep.epsilon,
        "violations": rep.violations,
        "worst": rep.worst,
        "max_fd_error": rep.max_fd_error,
        "largest_clean_epsilon": eps1,
        "k3": k3,
    });
    write_json(&out.join("characteristics.json"), &header(cfg, "characteristics", json!({})), &summary)?;
    Ok(outcome)
}

fn eps_dir(out: &Path, eps: f64) -> PathBuf {
    out.join(format!("eps_{eps}"))
}

/// `(ε, final time, L¹ error at the final time, outside-mass fraction)`.
pub type SweepTableRow = (f64, f64, f64, f64);

pub fn cmd_sweep_epsilon(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    let rain = cfg.kernel_kind == KernelKind::Rain;
    let (g0, traj) = diagonal_run(cfg)?;
    let profiles: Vec<Profile1D> = if rain {
        traj.profiles.iter().map(|p| Profile1D { t: p.t, ..g0.clone() }).collect()
    } else {
        traj.profiles.clone()
    };
    let per: Vec<(f64, Outcome, Vec<(f64, f64)>, f64)> = cfg
        .epsilons
        .par_iter()
        .map(|&eps| {
            let c = cfg.with("model.epsilon", eps)?;
            let dir = eps_dir(out, eps);
            let (o, snaps) = run2d_collect(&c, &dir)?;
            let last = snaps.last().ok_or_else(|| Error::Snapshot("run produced no snapshot".into()))?;
            let conc = dirac_concentration(last, c.params.alpha, c.delta)?;
            let tol = |t: f64| 1e-9 * t.abs().max(1.0);
            let times: Vec<f64> = snaps
                .iter()
                .map(|f| f.t)
                .filter(|&t| profiles.iter().any(|p| (p.t - t).abs() <= tol(t)))
                .collect();
            let errs = marginal_compare(&snaps, &profiles, &times)?;
            Ok((eps, o, errs.iter().map(|e| (e.t, e.l1)).collect(), conc))
        })
        .collect::<Result<_>>()?;

    let mut table: Vec<SweepTableRow> = Vec::new();
    let mut series = Vec::new();
    for (eps, o, errs, conc) in per {
        outcome.absorb(o, &format!("[eps = {eps}] "));
        let (t, l1) = errs.last().copied().unwrap_or((f64::NAN, f64::NAN));
        table.push((eps, t, l1, conc));
        series.extend(errs.into_iter().map(|(t, l1)| (eps, t, l1)));
    }
    let rows = series.iter().map(|&(e, t, l1)| vec![fmt(e), fmt(t), fmt(l1)]);
    write_csv(&out.join("sweep_l1.csv"), &header(cfg, "sweep_l1_series", json!({})), &["epsilon", "t", "L1_error"], rows)?;
    let rows = table.iter().map(|&(e, t, l1, c)| vec![fmt(e), fmt(t), fmt(l1), fmt(c)]);
    write_csv(
        &out.join("sweep.csv"),
        &header(cfg, "sweep_table", json!({"delta": cfg.delta})),
        &["epsilon", "t", "L1_error", "concentration"],
        rows,
    )?;

    outcome.summary.push("epsilon        t          L1_error       concentration".into());
    for &(e, t, l1, c) in &table {
        outcome.summary.push(format!("{e:<14} {t:<10} {l1:<14.6e} {c:.6}"));
    }
    let mut by_eps = table.clone();
    by_eps.sort_by(|a, b| b.0.total_cmp(&a.0));
    if by_eps.len() > 1 {
        let l1_monotone = by_eps.windows(2).all(|w| w[1].2 <= w[0].2);
        let conc_strict = by_eps.windows(2).all(|w| w[1].3 < w[0].3);
        outcome.summary.push(format!(
            "trend: L1 error {} as epsilon decreases",
            if l1_monotone { "is nonincreasing" } else { "is not monotone" }
        ));
        if !conc_strict {
            outcome
                .warnings
                .push("concentration does not strictly decrease as epsilon decreases".into());
        }
    }
    if rain {
        outcome.summary.push(RAIN_CAVEAT.into());
    }
    Ok(outcome)
}

pub fn cmd_check_bounds(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    let p = &cfg.params;

    let l211 = lemma_211_sweep(cfg.check.lemma_samples, cfg.seed);
    outcome
        .summary
        .push(format!("distance-product inequality: {} samples, {} violations", l211.samples, l211.violations));
    if l211.violations > 0 {
        outcome
            .failures
            .push(format!("distance-product inequality violated at {:?}", l211.first_violation));
    }

    let b = beta(p.alpha, p.gamma);
    let l212 = if b > 1.0 {
        let vs: Vec<f64> = (-4..=4).map(|k| 2f64.powi(k)).collect();
        let r = lemma_212_sweep(p.alpha, b, &vs, &[0.0, 1.0, 5.0], &[0.5, 0.9, 1.0])?;
        outcome.summary.push(format!(
            "jacobian integral bound: constant = {:.4}, non-finite cases = {}",
            r.fitted_constant.unwrap_or(f64::NAN),
            r.violation_count
        ));
        if !r.passed() {
            outcome.failures.push(format!("jacobian integral bound: {} non-finite integrals", r.violation_count));
        }
        Some(r)
    } else {
        outcome
            .warnings
            .push(format!("jacobian integral bound skipped: exponent {b} is not above 1"));
        None
    };

    let decay = semigroup_decay_sweep(p, 2.0, cfg.check.decay_kmax, &[0.1, 0.5, 1.0], &[p.epsilon, 0.5 * p.epsilon]);
    outcome.summary.push(format!("semigroup decay: max ratio = {:.4}", decay.max_ratio));
    if !decay.passed() {
        outcome
            .warnings
            .push(format!("semigroup decay: {} non-finite ratios", decay.violation_count));
    }

    let c = &cfg.characteristics;
    let p44 = char_sweep(cfg, c.starts, c.fd_every)?;
    sweep_findings(&p44, &mut outcome);

    let fields = match &cfg.check.snapshot {
        Some(path) => vec![read_field(path)?.field],
        None => {
            let short = cfg.with("solver.horizon", cfg.check.horizon)?;
            let run_dir = out.join("short_run");
            mkdir(&run_dir)?;
            let mut o = Outcome::default();
            solve_2d(&short, &run_dir, &mut o)?.snapshots
        }
    };
    let env = envelope_reports(cfg, &fields, &mut outcome);

    let report = json!({
        "lemma_211": l211,
        "lemma_212": l212,
        "semigroup_decay": decay,
        "characteristic_bounds": {
            "starts": p44.starts,
            "epsilon": p44.epsilon,
            "violations": p44.violations,
            "worst": p44.worst,
            "max_fd_error": p44.max_fd_error,
        },
        "envelope": env,
        "passed": outcome.passed(),
        "warnings": outcome.warnings,
        "failures": outcome.failures,
    });
    write_json(&out.join("bounds.json"), &header(cfg, "check_bounds", json!({})), &report)?;
    Ok(outcome)
}

/// Converts between the fast-transport frame `H(y, v, t)` and the rain frame
/// `f(x, v, τ)` with `x = e^{t/ε} y`, `τ = e^{t/ε} − 1`, `f = e^{−t/ε} H`.
pub fn cmd_rescale(cfg: &ExperimentConfig, snapshot: &Path, inverse: bool, out: &Path) -> Result<Outcome> {
    mkdir(out)?;
    let mut outcome = Outcome::default();
    let snap = read_field(snapshot)?;
    let (want, make) = if inverse {
        (["x", "v", "f"], ["y", "v", "H"])
    } else {
        (["y", "v", "H"], ["x", "v", "f"])
    };
    if snap.columns != want.map(String::from) {
        return Err(Error::Snapshot(format!("expected columns {want:?}, got {:?}", snap.columns)));
    }
    let eps = snap.number("epsilon").unwrap_or(cfg.params.epsilon);
    let t = snap.field.t;
    let e = (t / eps).exp();
    if !e.is_finite() {
        return Err(Error::Snapshot(format!("e^(t/epsilon) overflows for t = {t}, epsilon = {eps}")));
    }
    let (space, value) = if inverse { (1.0 / e, e) } else { (e, 1.0 / e) };
    let g = &snap.field.grid;
    let grid = crate::grid_fields::Grid2D::new(g.y_min() * space, g.y_max() * space, g.ny(), g.v[0], g.q, g.nv())?;
    let field = Field2D {
        grid: std::sync::Arc::new(grid),
        values: snap.field.values.iter().map(|&h| h * value).collect(),
        t,
    };
    let before = total_mass(&snap.field);
    let after = total_mass(&field);
    let rel = (after - before).abs() / before.abs().max(f64::MIN_POSITIVE);
    let mut h = snap.header.clone();
    if let Some(o) = h.as_object_mut() {
        o.insert("kind".into(), json!(if inverse { "snapshot" } else { "rain_frame" }));
        o.insert("epsilon".into(), json!(eps));
        o.insert("tau".into(), json!(e - 1.0));
        o.insert("grid".into(), grid_header(&field.grid));
    }
    let stem = snapshot.file_stem().and_then(|s| s.to_str()).unwrap_or("snapshot");
    let name = if inverse { format!("{stem}_fast.csv") } else { format!("{stem}_rain.csv") };
    write_field(&out.join(&name), &h, &field, make)?;
    outcome.summary.push(format!("wrote {name}: t = {t}, tau = {:.6e}", e - 1.0));
    outcome
        .summary
        .push(format!("mass before = {before:.12e}, after = {after:.12e}, relative change = {rel:.3e}"));
    if rel > 1e-10 {
        outcome.failures.push(format!("rescaling changed the mass by {rel:.3e}"));
    }
    Ok(outcome)
}
