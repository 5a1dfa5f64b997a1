//! Configuration, single runs, delay sweeps and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condexp::{BasisKind, Conditioner, RegressionBasis, DEFAULT_RIDGE};
use crate::diagnostics::{
    aldous_check, bounded_by_median, cv_check, decompose_l, default_pairs, l2_bounds, law_stabilization,
    martingale_residuals, orthogonality_residuals, u_bound_check, u_decay_from_outputs, ut_statistic,
    z_energy_inequality, DiagnosticEntry, DiagnosticsReport, Process, Verdict, CSV_HEADER,
};
use crate::error::{Error, Result};
use crate::problem_model::{builtin_problem, custom_affine_problem, p2_reference, ProblemSpec, ReferenceFn};
use crate::scheme::{delay_shift_gap, residual_bsde, run_scheme_with, SchemeOutput};
use crate::stats::{median, Estimate};
use crate::stochastic_basis::{sample_brownian, PathEnsemble, TimeGrid, TreeModel};

pub const OUTPUT_DIR_ENV: &str = "BSDE_OUTPUT_DIR";
pub const THREADS_ENV: &str = "BSDE_THREADS";

pub const ALL_DIAGNOSTICS: &[&str] = &[
    "residual",
    "l2",
    "energy",
    "u_bound",
    "cv",
    "ut",
    "aldous",
    "martingale",
    "orthogonality",
    "delay_gap",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineGenerator {
    /// `[d][d][m]` coefficient of `z`.
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<f64>,
    #[serde(default = "default_terminal")]
    pub terminal: String,
}

fn default_terminal() -> String {
    "identity".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemChoice {
    Named(String),
    Inline(InlineGenerator),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Independent Gaussian paths.
    #[default]
    MonteCarlo,
    /// Every path of the `±√dt` tree of depth `steps`; `paths` is ignored.
    Tree,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_basis() -> String {
    "poly3".into()
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_diagnostics() -> Vec<String> {
    ALL_DIAGNOSTICS.iter().map(|s| s.to_string()).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("bsde-output")
}
fn default_q() -> f64 {
    1.0
}
fn default_random_controls() -> usize {
    16
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemChoice,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub delay: Option<usize>,
    #[serde(default)]
    pub delays: Option<Vec<usize>>,
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default = "default_basis")]
    pub basis: String,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_diagnostics")]
    pub diagnostics: Vec<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Also write the Brownian ensemble next to the scheme output.
    #[serde(default = "yes")]
    pub write_ensemble: bool,
    #[serde(default = "default_q")]
    pub q: f64,
    /// `λ²` of the energy bound; defaults to `4K`.
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default = "default_random_controls")]
    pub random_controls: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// `BSDE_OUTPUT_DIR` replaces `output_dir` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        match &self.problem {
            ProblemChoice::Named(name) => builtin_problem(name),
            ProblemChoice::Inline(g) => custom_affine_problem(&g.alpha, &g.beta, &g.terminal),
        }
    }

    pub fn regression_basis(&self) -> Result<RegressionBasis> {
        RegressionBasis::from_name(&self.basis, self.ridge)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon", "must be finite and > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be ≥ 1"));
        }
        let check_delay = |field: &str, d: usize| {
            if d == 0 || d > self.steps {
                Err(Error::config(field, format!("delay {d} must lie in 1..={}", self.steps)))
            } else {
                Ok(())
            }
        };
        if let Some(d) = self.delay {
            check_delay("delay", d)?;
        }
        if let Some(ds) = &self.delays {
            for d in ds {
                check_delay("delays", *d)?;
            }
        }
        match self.engine {
            Engine::MonteCarlo => match self.paths {
                None => return Err(Error::config("paths", "required for the monte-carlo engine")),
                Some(p) if p < 4 => return Err(Error::config("paths", "need at least 4 paths")),
                _ => {}
            },
            Engine::Tree => {
                if self.steps > 24 {
                    return Err(Error::config("steps", "tree engine supports at most 24 steps"));
                }
            }
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::config("ridge", "must be finite and ≥ 0"));
        }
        self.regression_basis()?;
        if !(1.0..2.0).contains(&self.q) {
            return Err(Error::config("q", "must lie in [1, 2)"));
        }
        for d in &self.diagnostics {
            if !ALL_DIAGNOSTICS.contains(&d.as_str()) {
                return Err(Error::config(
                    "diagnostics",
                    format!("unknown diagnostic `{d}` (expected one of {})", ALL_DIAGNOSTICS.join(", ")),
                ));
            }
        }
        let problem = self.problem_spec()?;
        if self.engine == Engine::Tree && problem.dim_w() != 1 {
            return Err(Error::config(
                "engine",
                format!("the tree engine is scalar, problem {} needs m = {}", problem.name(), problem.dim_w()),
            ));
        }
        if let Some(l2) = self.lambda2 {
            let k = problem.generator().growth_k();
            if !(l2 > 2.0 * k) {
                return Err(Error::config("lambda2", format!("must exceed 2K = {}", 2.0 * k)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn wants(&self, name: &str) -> bool {
        self.diagnostics.iter().any(|d| d == name)
    }
}

/// Sets the rayon pool size from `BSDE_THREADS` if present.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{value}`")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub wall_clock_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    pub fn file(&self, path: &str) -> Option<&FileRecord> {
        self.files.iter().find(|f| f.path == path)
    }
}

struct Recorder {
    root: PathBuf,
    files: Vec<FileRecord>,
    stages: BTreeMap<String, f64>,
}

impl Recorder {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::from(e).in_stage("write"))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            stages: BTreeMap::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes).map_err(|e| e.in_stage("write"))?;
        self.files.push(FileRecord {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        *self.stages.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sample(config: &ExperimentConfig, dim: usize) -> Result<PathEnsemble> {
    match config.engine {
        Engine::MonteCarlo => {
            let grid = TimeGrid::new(config.horizon, config.steps, 1)?;
            sample_brownian(&grid, dim, config.paths.unwrap_or(0), config.seed)
        }
        Engine::Tree => Ok(TreeModel::new(config.steps, config.horizon)?.ensemble()),
    }
}

/// Closed-form solution of a builtin problem, when one is known.
pub fn reference_solution(problem: &ProblemSpec, horizon: f64) -> Option<ReferenceFn> {
    if problem.name() == "P2" {
        Some(p2_reference(horizon))
    } else {
        problem.reference().cloned()
    }
}

/// Per-run diagnostics selected by the configuration.
pub fn run_diagnostics(
    config: &ExperimentConfig,
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    cond: &Conditioner,
    output: &SchemeOutput,
) -> Result<DiagnosticsReport> {
    let k = problem.generator().growth_k();
    let n = output.steps();
    let d = output.dim_y;
    let mut r = DiagnosticsReport::default();
    if config.wants("residual") {
        let res = residual_bsde(output, problem, ensemble)?;
        let max = Estimate::exact(res.max_abs);
        // the identity is exact only when conditional expectations are
        if config.engine == Engine::Tree && matches!(cond.basis().kind, BasisKind::Indicator) {
            let scale = res.mean_abs_y.iter().fold(0.0f64, |a, b| a.max(*b)).max(1.0);
            let threshold = 1e-10 * scale;
            r.push(
                DiagnosticEntry::new("residual_max", max, Verdict::from_bool(res.max_abs <= threshold))
                    .threshold(threshold),
            );
        } else {
            r.push(DiagnosticEntry::new("residual_max", max, Verdict::Info));
        }
        let worst_mean = res.mean_abs_profile.iter().fold(0.0f64, |a, b| a.max(*b));
        r.push(DiagnosticEntry::new("residual_mean_abs", Estimate::exact(worst_mean), Verdict::Info));
    }
    if config.wants("l2") {
        r.extend(l2_bounds(output));
    }
    if config.wants("energy") {
        let lambda2 = config.lambda2.unwrap_or(4.0 * k);
        if lambda2 > 2.0 * k {
            r.extend(z_energy_inequality(output, k, lambda2)?);
        }
    }
    if config.wants("u_bound") && problem.name() == "P4b" {
        r.push(u_bound_check(output, k));
    }
    if config.wants("cv") {
        r.extend(cv_check(output, cond, k, &[(n / 8).max(1), (n / 32).max(1), 1])?);
    }
    if config.wants("ut") {
        let y = Process::new(&output.y, output.paths, n, d)?;
        r.extend(ut_statistic(y, cond, config.random_controls, config.seed)?.report());
    }
    if config.wants("aldous") {
        let t = config.horizon;
        let deltas: Vec<f64> = [t / 16.0, t / 8.0, t / 4.0]
            .into_iter()
            .filter(|delta| *delta >= output.grid.dt())
            .collect();
        if !deltas.is_empty() {
            r.extend(aldous_check(output, k, &deltas)?);
        }
    }
    let pairs = default_pairs(n);
    if config.wants("martingale") {
        let v = Process::new(&output.v, output.paths, n, d)?;
        r.push(martingale_residuals(v, ensemble, &pairs)?.entry("martingale_v"));
    }
    if config.wants("orthogonality") {
        let v = Process::new(&output.v, output.paths, n, d)?;
        let dec = decompose_l(v, &output.z, ensemble)?;
        r.push(orthogonality_residuals(dec.l_process(), ensemble, &pairs)?.entry("orthogonality_l_w"));
    }
    if config.wants("delay_gap") && problem.generator().is_affine() {
        let gap = delay_shift_gap(output, problem, ensemble)?;
        r.push(DiagnosticEntry::new("delay_gap_sq", gap.squared_gap, Verdict::Info));
        r.push(DiagnosticEntry::new("delay_gap_weighted", gap.weighted_gap, Verdict::Info));
    }
    Ok(r.with_run(output.delay(), ensemble.seed()))
}

fn report_json(report: &DiagnosticsReport) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn scheme_bytes(output: &SchemeOutput) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    output.write_binary(&mut buf)?;
    Ok(buf)
}

fn finish(rec: Recorder, config: &ExperimentConfig, started: chrono::DateTime<chrono::Utc>, clock: Instant) -> Result<RunManifest> {
    let manifest = RunManifest {
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        started_at: started.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        stage_seconds: rec.stages,
        files: rec.files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&rec.root.join("manifest.json"), text.as_bytes()).map_err(|e| e.in_stage("write"))?;
    Ok(manifest)
}

/// One delay: sample, run the scheme, run the selected diagnostics and write
/// `scheme.bin`, `scheme.json`, `report.csv`, `report.json` (plus
/// `ensemble.bin` when requested) and `manifest.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    if config.delays.is_some() {
        return Err(Error::config("delays", "a single run takes `delay`; use `sweep` for a delay list"));
    }
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let delay = config.delay.unwrap_or(1);
    let problem = config.problem_spec()?;
    let basis = config.regression_basis()?;
    let mut rec = Recorder::new(&config.output_dir)?;

    let ensemble = rec.time("sample", || sample(config, problem.dim_w()))?;
    let (cond, output) = rec.time("scheme", || {
        let cond = Conditioner::new(&problem, &ensemble, &basis)?;
        let (out, _) = run_scheme_with(&problem, &ensemble, delay, &cond)?;
        Ok((cond, out))
    })?;
    let report = rec.time("diagnostics", || run_diagnostics(config, &problem, &ensemble, &cond, &output))?;

    if config.write_ensemble {
        let mut buf = Vec::new();
        ensemble.write_binary(&mut buf)?;
        rec.write("ensemble.bin", &buf)?;
    }
    rec.write("scheme.bin", &scheme_bytes(&output)?)?;
    let side = serde_json::to_string_pretty(&output.manifest()).expect("sidecar serializes");
    rec.write("scheme.json", side.as_bytes())?;
    rec.write("report.csv", report.to_csv().as_bytes())?;
    rec.write("report.json", &report_json(&report))?;
    finish(rec, config, started, clock)
}

/// Result of a sweep in memory, alongside what was written.
pub struct SweepResult {
    pub manifest: RunManifest,
    pub outputs: Vec<SchemeOutput>,
    pub report: DiagnosticsReport,
}

/// Several delays on one shared ensemble, with cross-run statistics.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let mut delays = match &config.delays {
        Some(d) if d.len() >= 2 => d.clone(),
        _ => {
            return Err(Error::config(
                "delays",
                "a sweep needs at least 2 delays; use `run` for a single delay",
            ))
        }
    };
    delays.sort_unstable();
    delays.dedup();
    if delays.len() < 2 {
        return Err(Error::config("delays", "a sweep needs at least 2 distinct delays"));
    }
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let problem = config.problem_spec()?;
    let basis = config.regression_basis()?;
    let mut rec = Recorder::new(&config.output_dir)?;

    let ensemble = rec.time("sample", || sample(config, problem.dim_w()))?;
    let cond = rec.time("scheme", || Conditioner::new(&problem, &ensemble, &basis))?;
    if config.write_ensemble {
        let mut buf = Vec::new();
        ensemble.write_binary(&mut buf)?;
        rec.write("ensemble.bin", &buf)?;
    }

    let mut outputs = Vec::new();
    let mut combined = DiagnosticsReport::default();
    for &d in &delays {
        let out = rec.time("scheme", || run_scheme_with(&problem, &ensemble, d, &cond).map(|(o, _)| o))?;
        let report = rec.time("diagnostics", || run_diagnostics(config, &problem, &ensemble, &cond, &out))?;
        let dir = format!("D{d}");
        rec.write(&format!("{dir}/scheme.bin"), &scheme_bytes(&out)?)?;
        let side = serde_json::to_string_pretty(&out.manifest()).expect("sidecar serializes");
        rec.write(&format!("{dir}/scheme.json"), side.as_bytes())?;
        rec.write(&format!("{dir}/report.csv"), report.to_csv().as_bytes())?;
        combined.extend(report);
        outputs.push(out);
    }

    let cross = rec.time("diagnostics", || cross_run_report(config, &problem, &ensemble, &outputs))?;
    combined.extend(cross.report);
    rec.write("convergence.csv", cross.convergence_csv.as_bytes())?;
    rec.write("report.csv", combined.to_csv().as_bytes())?;
    rec.write("report.json", &report_json(&combined))?;
    let manifest = finish(rec, config, started, clock)?;
    Ok(SweepResult {
        manifest,
        outputs,
        report: combined,
    })
}

struct CrossRun {
    report: DiagnosticsReport,
    convergence_csv: String,
}

fn cross_run_report(
    config: &ExperimentConfig,
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    outputs: &[SchemeOutput],
) -> Result<CrossRun> {
    let seed = ensemble.seed();
    let mut r = DiagnosticsReport::default();

    let decay = if outputs.len() >= 3 {
        let study = u_decay_from_outputs(outputs, config.q)?;
        r.extend(study.report());
        Some(study)
    } else {
        None
    };

    // no-blow-up check of the L² magnitudes across the sweep
    let l2: Vec<DiagnosticsReport> = outputs.iter().map(l2_bounds).collect();
    for id in ["l2_sup_y_sq", "l2_int_z_sq", "l2_int_ztilde_sq", "l2_sup_tail_integral_sq"] {
        let vals: Vec<f64> = l2.iter().filter_map(|rep| rep.find(id)).map(|e| e.estimate).collect();
        let (threshold, ok) = bounded_by_median(&vals);
        let worst = vals.iter().fold(0.0f64, |a, b| a.max(*b));
        r.push(
            DiagnosticEntry::new(format!("{id}_sweep_max"), Estimate::exact(worst), Verdict::from_bool(ok))
                .threshold(threshold),
        );
    }

    if config.wants("ut") {
        let cond = Conditioner::new(problem, ensemble, &config.regression_basis()?)?;
        let mut q99 = Vec::new();
        for o in outputs {
            let y = Process::new(&o.y, o.paths, o.steps(), o.dim_y)?;
            q99.push(ut_statistic(y, &cond, config.random_controls, config.seed)?.random_q99);
        }
        let med = median(&q99);
        let worst = q99.iter().fold(0.0f64, |a, b| a.max(*b));
        let ratio = if med > 0.0 { worst / med } else { 1.0 };
        r.push(
            DiagnosticEntry::new("ut_q99_uniformity", Estimate::exact(ratio), Verdict::from_bool(ratio <= 3.0))
                .threshold(3.0),
        );
    }

    let n = outputs[0].steps();
    let nodes = [0, n / 4, n / 2, 3 * n / 4];
    for dist in law_stabilization(outputs, &nodes)? {
        let mut e = DiagnosticEntry::new(
            format!("law_ks_{}{}_vs_D{}", dist.component, dist.coordinate, dist.delay_b),
            Estimate::exact(dist.ks),
            Verdict::Info,
        )
        .at(outputs[0].grid.node(dist.node))
        .threshold(dist.p_value);
        e.delay = Some(dist.delay_a);
        e.seed = seed;
        r.push(e);
    }

    // errors against the closed form, or against the finest delay
    let reference = reference_solution(problem, config.horizon);
    let finest = &outputs[0];
    let mut csv = String::from("D,h,sup_u_q,sup_u_q_se,y_error_l2,z_error_l2,int_z_sq\n");
    for (idx, o) in outputs.iter().enumerate() {
        let (ye, ze) = match &reference {
            Some(f) => path_errors(o, |p, k| {
                let (y, z) = f(o.grid.node(k), ensemble.value(p, k));
                (y, z)
            }),
            None => path_errors(o, |p, k| {
                let z = if k < n { finest.z_at(p, k).to_vec() } else { Vec::new() };
                (finest.y_at(p, k).to_vec(), z)
            }),
        };
        let label = if reference.is_some() { "closed_form" } else { "finest_delay" };
        for (id, e) in [("y", ye), ("z", ze)] {
            let mut entry = DiagnosticEntry::new(format!("convergence_{id}_vs_{label}"), e, Verdict::Info);
            entry.delay = Some(o.delay());
            entry.seed = seed;
            r.push(entry);
        }
        let int_z = l2[idx].find("l2_int_z_sq").map_or(f64::NAN, |e| e.estimate);
        let (su, su_se) = decay
            .as_ref()
            .and_then(|s| s.delays.iter().position(|d| *d == o.delay()).map(|i| s.sup_u[i]))
            .map_or((f64::NAN, f64::NAN), |e| (e.value, e.std_error));
        csv.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            o.delay(),
            o.grid.delay(),
            su,
            su_se,
            ye.value,
            ze.value,
            int_z
        ));
    }
    for e in &mut r.entries {
        e.seed = seed;
    }
    Ok(CrossRun {
        report: r,
        convergence_csv: csv,
    })
}

/// `Ê Σ_k ‖Y − Y*‖² dt` and `Ê Σ_{k<N} ‖Z − Z*‖² dt` against a target.
fn path_errors<F>(o: &SchemeOutput, target: F) -> (Estimate, Estimate)
where
    F: Fn(usize, usize) -> (Vec<f64>, Vec<f64>) + Sync,
{
    use rayon::prelude::*;
    let n = o.steps();
    let dt = o.grid.dt();
    let rows: Vec<(f64, f64)> = (0..o.paths)
        .into_par_iter()
        .map(|p| {
            let (mut ey, mut ez) = (0.0, 0.0);
            for k in 0..n {
                let (y, z) = target(p, k);
                ey += o.y_at(p, k).iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * dt;
                ez += o.z_at(p, k).iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * dt;
            }
            (ey, ez)
        })
        .collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let zs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    (Estimate::from_samples(&ys), Estimate::from_samples(&zs))
}

/// Reads the `report.csv` of a finished run.
pub fn read_report_csv(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join("report.csv"))?;
    if !text.starts_with(CSV_HEADER) {
        return Err(Error::Format("report.csv has an unexpected header".into()));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"problem": "P1", "steps": 16, "paths": 256, "seed": 1, "output_dir": {:?}}}"#,
            dir.to_str().unwrap()
        ))
        .unwrap()
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"problem": "P1", "steps": 4, "pathz": 10}"#).unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "pathz");
                assert!(message.contains("pathz"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inline_generator_parses() {
        let c = ExperimentConfig::from_json(
            r#"{"problem": {"alpha": [[[0.5]]], "beta": [0.1], "terminal": "tanh"}, "steps": 8, "paths": 64}"#,
        )
        .unwrap();
        let p = c.problem_spec().unwrap();
        assert_eq!(p.dim_w(), 1);
        assert!((p.generator().growth_k() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = base(dir.path());
        c.delay = Some(17);
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "delay"));
        let mut c = base(dir.path());
        c.paths = None;
        assert!(c.validate().is_err());
        let mut c = base(dir.path());
        c.diagnostics = vec!["nope".into()];
        assert!(c.validate().is_err());
        let mut c = base(dir.path());
        c.problem = ProblemChoice::Named("P5".into());
        c.engine = Engine::Tree;
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "engine"));
        let mut c = base(dir.path());
        c.problem = ProblemChoice::Named("P4".into());
        c.lambda2 = Some(std::f64::consts::PI);
        assert!(c.validate().is_err());
    }

    #[test]
    fn run_writes_files_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&base(&dir.path().join("a"))).unwrap();
        let b = run_experiment(&base(&dir.path().join("b"))).unwrap();
        for f in ["scheme.bin", "report.csv", "report.json", "ensemble.bin"] {
            assert_eq!(a.file(f).unwrap().sha256, b.file(f).unwrap().sha256, "{f}");
        }
        assert_eq!(a.config_hash, b.config_hash);
        assert!(dir.path().join("a/manifest.json").exists());
        let csv = read_report_csv(&dir.path().join("a")).unwrap();
        assert!(csv.contains("martingale_v,1,global"));
    }

    #[test]
    fn sweep_needs_two_delays() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = base(dir.path());
        c.delays = Some(vec![8]);
        let err = sweep(&c).err().unwrap();
        assert!(err.to_string().contains("use `run`"));
        c.delays = Some(vec![1, 2]);
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn zero_generator_sweep_has_zero_decay_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = base(dir.path());
        c.delays = Some(vec![1, 2, 4]);
        c.diagnostics = vec!["l2".into()];
        let res = sweep(&c).unwrap();
        let rows: Vec<_> = res
            .report
            .entries
            .iter()
            .filter(|e| e.statistic_id == "u_decay_sup_u_q")
            .collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|e| e.estimate == 0.0));
        // common randomness: one ensemble file for the whole sweep
        assert!(dir.path().join("ensemble.bin").exists());
        assert!(dir.path().join("D4/scheme.bin").exists());
        assert!(dir.path().join("convergence.csv").exists());
    }
}
