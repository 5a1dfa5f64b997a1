//! Acceptance criteria, one printed PASS/FAIL line each.
//!
//! Everything runs in a single test so timings are not skewed by other
//! tests sharing the thread pool.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use bsde_core::condexp::{Conditioner, RegressionBasis};
use bsde_core::diagnostics::{
    aldous_check, cv_check, decompose_l, default_pairs, martingale_residuals, orthogonality_residuals,
    u_bound_check, u_decay_from_outputs, z_energy_inequality, Process, Verdict,
};
use bsde_core::experiment::{run_experiment, ExperimentConfig};
use bsde_core::problem_model::{builtin_problem, p2_reference, p3_family_solution, ProblemSpec};
use bsde_core::scheme::{residual_bsde, run_scheme, run_scheme_with, SchemeOutput};
use bsde_core::stochastic_basis::{sample_brownian, PathEnsemble, TimeGrid, TreeModel};

const SEED: u64 = 2024;

struct Tally {
    failed: Vec<String>,
}

impl Tally {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        println!("[{}] criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id.to_string());
        }
    }
}

fn mc_run(name: &str, n: usize, delay: usize) -> (ProblemSpec, PathEnsemble, SchemeOutput) {
    let problem = builtin_problem(name).unwrap();
    let grid = TimeGrid::new(1.0, n, 1).unwrap();
    let ens = sample_brownian(&grid, 1, 1 << 14, SEED).unwrap();
    let out = run_scheme(&problem, &ens, delay, &RegressionBasis::polynomial(3, 1e-8)).unwrap();
    (problem, ens, out)
}

fn tree_exactness(t: &mut Tally) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for depth in 1..=8 {
        let ens = TreeModel::new(depth, 1.0).unwrap().ensemble();
        for name in ["P1", "P2", "P3", "P4", "P4b"] {
            let problem = builtin_problem(name).unwrap();
            let cond = Conditioner::new(&problem, &ens, &RegressionBasis::indicator()).unwrap();
            for delay in [1, 2, 3, depth].into_iter().filter(|d| *d <= depth) {
                let (out, _) = run_scheme_with(&problem, &ens, delay, &cond).unwrap();
                worst = worst.max(residual_bsde(&out, &problem, &ens).unwrap().max_abs);
                runs += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    t.line(
        "1 tree residual",
        worst <= 1e-10 && secs < 10.0,
        format!("{runs} runs, depth ≤ 8, max residual {worst:.2e} (≤ 1e-10), {secs:.2} s (< 10 s)"),
    );
}

fn martingale_recovery(t: &mut Tally) -> (PathEnsemble, SchemeOutput) {
    let start = Instant::now();
    let (_, ens, out) = mc_run("P1", 64, 1);
    let secs = start.elapsed().as_secs_f64();
    let (pc, n) = (out.paths, 64);
    let dt = out.grid.dt();
    let z_err: f64 = (0..pc)
        .map(|p| (0..n).map(|k| (out.z_at(p, k)[0] - 1.0).powi(2)).sum::<f64>() * dt)
        .sum::<f64>()
        / pc as f64;
    let y_err = (0..=n)
        .map(|k| (0..pc).map(|p| (out.y_at(p, k)[0] - ens.value(p, k)[0]).abs()).sum::<f64>() / pc as f64)
        .fold(0.0, f64::max);
    t.line(
        "2 P1 recovery",
        z_err <= 0.02 && y_err <= 0.02 && secs < 60.0,
        format!("E∫|Z−1|² = {z_err:.4e} (≤ 0.02), max_t E|Y−W| = {y_err:.4e} (≤ 0.02), {secs:.2} s (< 60 s)"),
    );
    (ens, out)
}

fn linear_recovery(t: &mut Tally) {
    let (_, ens, out) = mc_run("P2", 64, 1);
    let reference = p2_reference(1.0);
    let (mut ey, mut ny, mut ez, mut nz) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..out.paths {
        for k in 0..64 {
            let (y, z) = reference(out.grid.node(k), ens.value(p, k));
            ey += (out.y_at(p, k)[0] - y[0]).powi(2);
            ny += y[0] * y[0];
            ez += (out.z_at(p, k)[0] - z[0]).powi(2);
            nz += z[0] * z[0];
        }
    }
    let (ry, rz) = ((ey / ny).sqrt(), (ez / nz).sqrt());
    t.line(
        "3 P2 recovery",
        ry <= 0.05 && rz <= 0.10,
        format!("relative L² error Y {:.2}% (≤ 5%), Z {:.2}% (≤ 10%)", 100.0 * ry, 100.0 * rz),
    );
}

fn zero_fixed_point(t: &mut Tally) {
    let problem = builtin_problem("P3").unwrap();
    let mut zero_max: f64 = 0.0;
    let (_, _, mc) = mc_run("P3", 64, 1);
    let tree_ens = TreeModel::new(8, 1.0).unwrap().ensemble();
    let tree = run_scheme(&problem, &tree_ens, 2, &RegressionBasis::indicator()).unwrap();
    for out in [&mc, &tree] {
        for v in out.y.iter().chain(&out.z) {
            zero_max = zero_max.max(v.abs());
        }
    }

    // the strong solution ¼(t₀ − t)² with Z = 0 and t₀ = 1
    let n = 64;
    let grid = TimeGrid::new(1.0, n, 1).unwrap();
    let ens = sample_brownian(&grid, 1, 64, SEED).unwrap();
    let dt = grid.dt();
    let y_path: Vec<f64> = (0..=n).map(|k| p3_family_solution(1.0, grid.node(k))).collect();
    let u_path: Vec<f64> = (0..=n)
        .map(|k| if k < n { y_path[k].abs().sqrt() * dt } else { 0.0 })
        .collect();
    let pc = ens.paths();
    let candidate = SchemeOutput::assemble(
        &problem,
        &ens,
        1,
        y_path.repeat(pc),
        vec![0.0; pc * n],
        vec![0.0; pc * n],
        u_path.repeat(pc),
        "closed-form",
    )
    .unwrap();
    let res = residual_bsde(&candidate, &problem, &ens).unwrap().max_abs;
    t.line(
        "4 P3 fixed point",
        zero_max <= 1e-12 && res <= dt,
        format!("max |Y|,|Z| of scheme {zero_max:.1e} (≤ 1e-12), strong-solution residual {res:.3e} (≤ dt = {dt:.3e})"),
    );
}

struct Sweep {
    ens: PathEnsemble,
    cond: Conditioner,
    outputs: Vec<SchemeOutput>,
}

fn p4_sweep(name: &str) -> Sweep {
    let problem = builtin_problem(name).unwrap();
    let grid = TimeGrid::new(1.0, 128, 1).unwrap();
    let ens = sample_brownian(&grid, 1, 1 << 14, SEED).unwrap();
    let cond = Conditioner::new(&problem, &ens, &RegressionBasis::polynomial(3, 1e-8)).unwrap();
    let outputs = [4, 8, 16, 32]
        .iter()
        .map(|d| run_scheme_with(&problem, &ens, *d, &cond).unwrap().0)
        .collect();
    Sweep { ens, cond, outputs }
}

fn u_decay(t: &mut Tally, p4: &Sweep, p4b: &Sweep) {
    let study = u_decay_from_outputs(&p4.outputs, 1.0).unwrap();
    let table: Vec<String> = study.sup_u.iter().map(|e| format!("{:.4}", e.value)).collect();
    let slope = study.fit.map_or(f64::NAN, |f| f.slope);
    t.line(
        "5a P4 U-decay",
        study.verdict == Verdict::Pass,
        format!(
            "E sup|U| for h = 1/32..1/4: [{}], strictly decreasing in 1/h: {}, slope {slope:.3} with 95% lower bound {:.3} (> 0)",
            table.join(", "),
            study.strictly_decreasing,
            study.slope_lower95
        ),
    );
    let entries: Vec<_> = p4b.outputs.iter().map(|o| u_bound_check(o, FRAC_PI_2)).collect();
    let ok = entries.iter().all(|e| e.verdict == Verdict::Pass);
    let worst = entries
        .iter()
        .map(|e| e.estimate / e.threshold.unwrap())
        .fold(0.0, f64::max);
    t.line(
        "5b bounded generator U bound",
        ok,
        format!("E sup|U| ≤ K·h + 3 SE at every h, largest ratio to K·h {worst:.3}"),
    );
}

fn energy(t: &mut Tally, p4: &Sweep) {
    let mut checked = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for o in &p4.outputs {
        let r = z_energy_inequality(o, FRAC_PI_2, 4.0 * FRAC_PI_2).unwrap();
        checked += r.entries.len();
        ok &= r.all_passed();
        for e in &r.entries {
            worst = worst.max(e.estimate - e.threshold.unwrap());
        }
    }
    t.line(
        "6 energy inequality",
        ok,
        format!("{checked} block boundaries over D ∈ {{4,8,16,32}}, largest paired margin above 2 SE {worst:.3e} (≤ 0)"),
    );
}

fn martingale_suite(t: &mut Tally, p1: &(PathEnsemble, SchemeOutput), p4: &Sweep) {
    let mut fractions = Vec::new();
    let mut ok = true;
    let (ens, out) = p1;
    let v = Process::new(&out.v, out.paths, out.steps(), 1).unwrap();
    let table = martingale_residuals(v, ens, &default_pairs(out.steps())).unwrap();
    ok &= table.passed;
    fractions.push(format!("P1 {:.3}", table.pass_fraction));
    for o in &p4.outputs {
        let v = Process::new(&o.v, o.paths, o.steps(), 1).unwrap();
        let table = martingale_residuals(v, &p4.ens, &default_pairs(o.steps())).unwrap();
        ok &= table.passed;
        fractions.push(format!("P4/D{} {:.3}", o.delay(), table.pass_fraction));
    }

    let n = 128;
    let pc = p4.ens.paths();
    let drift: Vec<f64> = (0..pc).flat_map(|_| (0..=n).map(|k| k as f64 / n as f64)).collect();
    let drift_table =
        martingale_residuals(Process::new(&drift, pc, n, 1).unwrap(), &p4.ens, &default_pairs(n)).unwrap();
    let w = Process::new(p4.ens.values(), pc, n, 1).unwrap();
    let dec = decompose_l(w, &vec![0.0; pc * n], &p4.ens).unwrap();
    let self_orth = orthogonality_residuals(dec.l_process(), &p4.ens, &default_pairs(n)).unwrap();
    let controls_fail = !drift_table.passed && !self_orth.passed;
    t.line(
        "7 martingale suite",
        ok && controls_fail,
        format!(
            "V pass fractions [{}] (≥ 0.95); drift control {:.3}, L = W orthogonality control {:.3} (both must fail)",
            fractions.join(", "),
            drift_table.pass_fraction,
            self_orth.pass_fraction
        ),
    );
}

fn tightness(t: &mut Tally, p4: &Sweep) {
    let mut cv_ok = true;
    let mut cv_worst: f64 = 0.0;
    let mut al_ok = true;
    let mut al_worst: f64 = 0.0;
    for o in &p4.outputs {
        let cv = cv_check(o, &p4.cond, FRAC_PI_2, &[16, 4, 1]).unwrap();
        for e in cv.entries.iter().filter(|e| e.statistic_id.starts_with("cv_y_")) {
            cv_ok &= e.verdict == Verdict::Pass;
            cv_worst = cv_worst.max(e.estimate / e.threshold.unwrap());
        }
        let al = aldous_check(o, FRAC_PI_2, &[1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0]).unwrap();
        for e in &al.entries {
            al_ok &= e.verdict == Verdict::Pass;
            al_worst = al_worst.max(e.estimate / e.threshold.unwrap());
        }
    }
    t.line(
        "8a conditional variation",
        cv_ok,
        format!("CV of Y over 3 partitions and 4 delays, largest ratio to bound {cv_worst:.3} (≤ 1 within 2 SE)"),
    );
    t.line(
        "8b Aldous increments",
        al_ok,
        format!("tail-integral increments for δ ∈ {{T/16, T/8, T/4}}, largest ratio to bound {al_worst:.3} (≤ 1 within 2 SE)"),
    );
}

fn determinism(t: &mut Tally) {
    let dir = tempfile::tempdir().unwrap();
    let config = |sub: &str| {
        ExperimentConfig::from_json(&format!(
            r#"{{"problem": "P4", "steps": 64, "delay": 8, "paths": 4096, "seed": {SEED}, "output_dir": {:?}}}"#,
            dir.path().join(sub).to_str().unwrap()
        ))
        .unwrap()
    };
    let a = run_experiment(&config("a")).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| run_experiment(&config("b"))).unwrap();
    let (ha, hb) = (&a.file("report.csv").unwrap().sha256, &b.file("report.csv").unwrap().sha256);
    let bins = a.file("scheme.bin").unwrap().sha256 == b.file("scheme.bin").unwrap().sha256;
    t.line(
        "9 determinism",
        ha == hb && bins,
        format!("report.csv sha256 {}… on both reruns (second on 1 thread), scheme.bin identical: {bins}", &ha[..16]),
    );
}

#[test]
fn acceptance_criteria() {
    let mut t = Tally { failed: Vec::new() };
    tree_exactness(&mut t);
    let p1 = martingale_recovery(&mut t);
    linear_recovery(&mut t);
    zero_fixed_point(&mut t);
    let p4 = p4_sweep("P4");
    let p4b = p4_sweep("P4b");
    u_decay(&mut t, &p4, &p4b);
    energy(&mut t, &p4);
    martingale_suite(&mut t, &p1, &p4);
    tightness(&mut t, &p4);
    determinism(&mut t);
    assert!(t.failed.is_empty(), "failed criteria: {:?}", t.failed);
}
