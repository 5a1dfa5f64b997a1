//! Statistics with verdicts for the structural estimates of the scheme.
//!
//! Every statistic is a path average computed with fixed-order reductions,
//! so a report is a pure function of its inputs. Inequalities compare both
//! sides on the same paths (paired) wherever the two sides are linear in
//! per-path quantities.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::Conditioner;
use crate::error::{Error, Result};
use crate::problem_model::norm;
use crate::scheme::SchemeOutput;
use crate::stats::{fit_line, ks_two_sample, median, t_critical, Estimate, LineFit};
use crate::stochastic_basis::{path_rng, PathEnsemble, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Info,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Info => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticEntry {
    pub statistic_id: String,
    pub delay: Option<usize>,
    /// Time of the statistic, `None` for whole-path statistics.
    pub t: Option<f64>,
    pub estimate: f64,
    pub std_error: f64,
    pub threshold: Option<f64>,
    pub verdict: Verdict,
    pub sample_size: usize,
    pub seed: u64,
}

impl DiagnosticEntry {
    pub fn new(id: impl Into<String>, estimate: Estimate, verdict: Verdict) -> Self {
        Self {
            statistic_id: id.into(),
            delay: None,
            t: None,
            estimate: estimate.value,
            std_error: estimate.std_error,
            threshold: None,
            verdict,
            sample_size: estimate.n,
            seed: 0,
        }
    }

    pub fn at(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    pub fn threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }

    pub fn with_run(mut self, delay: usize, seed: u64) -> Self {
        self.delay = Some(delay);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub entries: Vec<DiagnosticEntry>,
}

pub const CSV_HEADER: &str = "statistic_id,D,t,estimate,std_error,threshold,verdict";

fn sci(v: f64) -> String {
    format!("{v:.12e}")
}

impl DiagnosticsReport {
    pub fn push(&mut self, entry: DiagnosticEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: DiagnosticsReport) {
        self.entries.extend(other.entries);
    }

    /// Stamps every entry with the run's delay and seed.
    pub fn with_run(mut self, delay: usize, seed: u64) -> Self {
        for e in &mut self.entries {
            e.delay = Some(delay);
            e.seed = seed;
        }
        self
    }

    pub fn find(&self, id: &str) -> Option<&DiagnosticEntry> {
        self.entries.iter().find(|e| e.statistic_id == id)
    }

    pub fn failures(&self) -> impl Iterator<Item = &DiagnosticEntry> {
        self.entries.iter().filter(|e| e.verdict == Verdict::Fail)
    }

    pub fn all_passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.statistic_id,
                e.delay.map(|d| d.to_string()).unwrap_or_default(),
                e.t.map(sci).unwrap_or_else(|| "global".into()),
                sci(e.estimate),
                sci(e.std_error),
                e.threshold.map(sci).unwrap_or_default(),
                e.verdict.as_str()
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }
}

/// Read-only view of a `P × (N+1) × d` process array.
#[derive(Clone, Copy, Debug)]
pub struct Process<'a> {
    values: &'a [f64],
    paths: usize,
    steps: usize,
    dim: usize,
}

impl<'a> Process<'a> {
    pub fn new(values: &'a [f64], paths: usize, steps: usize, dim: usize) -> Result<Self> {
        if dim == 0 || values.len() != paths * (steps + 1) * dim {
            return Err(Error::contract(format!(
                "process has {} values, expected {paths} × {} × {dim}",
                values.len(),
                steps + 1
            )));
        }
        Ok(Self {
            values,
            paths,
            steps,
            dim,
        })
    }

    pub fn at(&self, p: usize, k: usize) -> &'a [f64] {
        let o = (p * (self.steps + 1) + k) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All paths at node `k`, `P × d`.
    fn slice_at(&self, k: usize) -> Vec<f64> {
        (0..self.paths).flat_map(|p| self.at(p, k).to_vec()).collect()
    }
}

fn per_path<F>(paths: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..paths).into_par_iter().map(f).collect()
}

/// `L²`-type magnitudes of one output.
pub fn l2_bounds(output: &SchemeOutput) -> DiagnosticsReport {
    let (pc, n) = (output.paths, output.steps());
    let dt = output.grid.dt();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let sup_y = per_path(pc, |p| (0..=n).map(|k| sq(output.y_at(p, k))).fold(0.0, f64::max));
    let int_z = per_path(pc, |p| (0..n).map(|k| sq(output.z_at(p, k))).sum::<f64>() * dt);
    let int_zt = per_path(pc, |p| (0..n).map(|k| sq(output.z_tilde_at(p, k))).sum::<f64>() * dt);
    let sup_tail = per_path(pc, |p| {
        let vn = output.v_at(p, n);
        (0..=n)
            .map(|k| {
                let d: Vec<f64> = vn.iter().zip(output.v_at(p, k)).map(|(a, b)| a - b).collect();
                sq(&d)
            })
            .fold(0.0, f64::max)
    });
    let mut r = DiagnosticsReport::default();
    for (id, xs) in [
        ("l2_sup_y_sq", sup_y),
        ("l2_int_z_sq", int_z),
        ("l2_int_ztilde_sq", int_zt),
        ("l2_sup_tail_integral_sq", sup_tail),
    ] {
        r.push(DiagnosticEntry::new(id, Estimate::from_samples(&xs), Verdict::Info));
    }
    r
}

/// No-blow-up check across a sweep: every value at most twice the median.
pub fn bounded_by_median(values: &[f64]) -> (f64, bool) {
    let med = median(values);
    let threshold = 2.0 * med;
    (threshold, values.iter().all(|v| *v <= threshold || (*v == 0.0 && med == 0.0)))
}

/// Constants of the a priori energy bound
/// `E∫_t^T‖Z‖² ≤ C_A E∫_t^T‖Y + U‖² + C_B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub c_a: f64,
    /// `C_B` without the `E‖ξ‖²` term, which is paired per path.
    pub c_b_shift: f64,
    /// `1 / (1 − 2K/λ²)`.
    pub inflation: f64,
}

pub fn energy_constants(k: f64, lambda2: f64, horizon: f64) -> Result<EnergyConstants> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::config("K", "growth constant must be finite and ≥ 0"));
    }
    if !(lambda2 > 2.0 * k) {
        return Err(Error::config(
            "lambda2",
            format!("λ² must exceed 2K = {} for the energy bound, got {lambda2}", 2.0 * k),
        ));
    }
    let inflation = 1.0 / (1.0 - 2.0 * k / lambda2);
    Ok(EnergyConstants {
        c_a: 4.0 * k * lambda2 * inflation,
        c_b_shift: 2.0 * k * horizon / lambda2 * inflation,
        inflation,
    })
}

/// Checks the energy bound at `t = 0` and at every block boundary before `T`.
///
/// Per path, `q = Σ_{k≥t}‖Z_k‖²dt − C_A Σ_{k≥t}‖Y_k+U_k‖²dt − (‖ξ‖² + 2KT/λ²)/(1 − 2K/λ²)`;
/// the bound holds when `Ê q ≤ 2·SE(q)`.
pub fn z_energy_inequality(output: &SchemeOutput, k: f64, lambda2: f64) -> Result<DiagnosticsReport> {
    let c = energy_constants(k, lambda2, output.grid.horizon())?;
    let (pc, n, d) = (output.paths, output.steps(), output.dim_y);
    let dt = output.grid.dt();
    let mut report = DiagnosticsReport::default();
    let mut starts: Vec<usize> = output.grid.block_boundaries().into_iter().filter(|b| *b < n).collect();
    starts.sort_unstable();
    for t in starts {
        let q = per_path(pc, |p| {
            let z2: f64 = (t..n).map(|s| output.z_at(p, s).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * dt;
            let yt2: f64 = (t..n)
                .map(|s| {
                    (0..d)
                        .map(|i| {
                            let v = output.y_at(p, s)[i] + output.u_at(p, s)[i];
                            v * v
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                * dt;
            let xi2: f64 = output.y_at(p, n).iter().map(|v| v * v).sum();
            z2 - c.c_a * yt2 - (xi2 * c.inflation + c.c_b_shift)
        });
        let est = Estimate::from_samples(&q);
        let slack = 2.0 * est.std_error;
        report.push(
            DiagnosticEntry::new("energy_margin", est, Verdict::from_bool(est.value <= slack))
                .at(output.grid.node(t))
                .threshold(slack),
        );
    }
    Ok(report)
}

/// `E sup_t ‖U_t‖^q` per delay, with the log-log decay fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UDecayStudy {
    pub q: f64,
    pub delays: Vec<usize>,
    pub h: Vec<f64>,
    pub sup_u: Vec<Estimate>,
    pub fit: Option<LineFit>,
    /// Slope standard error including propagated sampling error.
    pub slope_se: f64,
    pub slope_lower95: f64,
    /// Every entry zero; the fit is skipped.
    pub degenerate: bool,
    pub strictly_decreasing: bool,
    /// Decay exponent `(2 − q′)/2`, `q′ = (q + 2)/2`, from the convergence proof.
    pub reference_rate: f64,
    pub verdict: Verdict,
}

fn sup_u_q(output: &SchemeOutput, q: f64) -> Estimate {
    let n = output.steps();
    let xs = per_path(output.paths, |p| {
        (0..=n).map(|k| norm(output.u_at(p, k)).powf(q)).fold(0.0, f64::max)
    });
    Estimate::from_samples(&xs)
}

pub fn u_decay_from_outputs(outputs: &[SchemeOutput], q: f64) -> Result<UDecayStudy> {
    if !(1.0..2.0).contains(&q) {
        return Err(Error::config("q", format!("q must lie in [1, 2), got {q}")));
    }
    if outputs.len() < 3 {
        return Err(Error::config(
            "delays",
            format!("the decay study needs at least 3 delays, got {}", outputs.len()),
        ));
    }
    let dt = outputs[0].grid.dt();
    if outputs.iter().any(|o| o.grid.dt() != dt) {
        return Err(Error::contract("decay study outputs must share the time step"));
    }
    let mut order: Vec<&SchemeOutput> = outputs.iter().collect();
    order.sort_by_key(|o| o.delay());
    let delays: Vec<usize> = order.iter().map(|o| o.delay()).collect();
    let h: Vec<f64> = order.iter().map(|o| o.grid.delay()).collect();
    let sup_u: Vec<Estimate> = order.iter().map(|o| sup_u_q(o, q)).collect();
    let q_prime = (q + 2.0) / 2.0;
    let reference_rate = (2.0 - q_prime) / 2.0;
    let degenerate = sup_u.iter().all(|e| e.value == 0.0);
    // ascending in h means strictly decreasing as 1/h grows
    let strictly_decreasing = sup_u.windows(2).all(|w| w[0].value < w[1].value);
    let mut study = UDecayStudy {
        q,
        delays,
        h: h.clone(),
        sup_u: sup_u.clone(),
        fit: None,
        slope_se: f64::NAN,
        slope_lower95: f64::NAN,
        degenerate,
        strictly_decreasing,
        reference_rate,
        verdict: Verdict::Info,
    };
    if degenerate || sup_u.iter().any(|e| !(e.value > 0.0)) {
        return Ok(study);
    }
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = sup_u.iter().map(|e| e.value.ln()).collect();
    let fit = fit_line(&x, &y).ok_or_else(|| Error::contract("delays must differ"))?;
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sampling: f64 = x
        .iter()
        .zip(&sup_u)
        .map(|(xi, e)| ((xi - mx) / sxx * e.std_error / e.value).powi(2))
        .sum();
    let se = (fit.slope_se.powi(2) + sampling).sqrt();
    let lower = fit.slope - t_critical(0.95, (x.len() - 2) as f64) * se;
    study.fit = Some(fit);
    study.slope_se = se;
    study.slope_lower95 = lower;
    study.verdict = Verdict::from_bool(lower > 0.0 && strictly_decreasing);
    Ok(study)
}

impl UDecayStudy {
    pub fn report(&self) -> DiagnosticsReport {
        let mut r = DiagnosticsReport::default();
        for ((d, h), e) in self.delays.iter().zip(&self.h).zip(&self.sup_u) {
            let mut entry = DiagnosticEntry::new("u_decay_sup_u_q", *e, Verdict::Info).threshold(*h);
            entry.delay = Some(*d);
            r.push(entry);
        }
        let slope = self.fit.map_or(f64::NAN, |f| f.slope);
        r.push(
            DiagnosticEntry::new(
                "u_decay_slope",
                Estimate {
                    value: slope,
                    std_error: self.slope_se,
                    n: self.h.len(),
                },
                self.verdict,
            )
            .threshold(0.0),
        );
        r.push(DiagnosticEntry::new("u_decay_reference_rate", Estimate::exact(self.reference_rate), Verdict::Info));
        r
    }
}

/// `Ê sup_t‖U_t‖ ≤ K·h + 3·SE`, the bound for generators with `‖f‖ ≤ K`.
pub fn u_bound_check(output: &SchemeOutput, k: f64) -> DiagnosticEntry {
    let est = sup_u_q(output, 1.0);
    let bound = k * output.grid.delay();
    DiagnosticEntry::new(
        "u_sup_bounded_generator",
        est,
        Verdict::from_bool(est.value <= bound + 3.0 * est.std_error),
    )
    .threshold(bound)
}

/// Grid nodes `0, stride, 2·stride, ..., N` (always ending at `N`).
pub fn uniform_partition(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut nodes: Vec<usize> = (0..steps).step_by(stride).collect();
    nodes.push(steps);
    nodes
}

/// `CV_π(X) = Ê[‖X_T‖ + Σ_i ‖Ê[X_{t_{i+1}} − X_{t_i} | F_{t_i}]‖]`.
pub fn conditional_variation(process: Process<'_>, cond: &Conditioner, partition: &[usize]) -> Result<Estimate> {
    let n = process.steps();
    if cond.nodes() != n + 1 || cond.states(0).rows() != process.paths() {
        return Err(Error::contract("conditioner does not match the process"));
    }
    let mut nodes = partition.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.last() != Some(&n) {
        return Err(Error::contract("partition must include the terminal node"));
    }
    if nodes.iter().any(|k| *k > n) {
        return Err(Error::contract("partition node beyond the horizon"));
    }
    let (pc, d) = (process.paths(), process.dim());
    let mut acc: Vec<f64> = (0..pc).map(|p| norm(process.at(p, n))).collect();
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let inc: Vec<f64> = (0..pc)
            .flat_map(|p| {
                let (xa, xb) = (process.at(p, a), process.at(p, b));
                (0..d).map(move |i| xb[i] - xa[i])
            })
            .collect();
        let fit = cond.condexp(a, &inc, d)?;
        for (p, v) in acc.iter_mut().enumerate() {
            *v += norm(&fit[p * d..(p + 1) * d]);
        }
    }
    Ok(Estimate::from_samples(&acc))
}

/// The bound `E‖ξ‖ + K(T + √T (E∫‖Z̃‖²)^{1/2})` on the conditional variation of `Y`,
/// with a delta-method standard error.
pub fn cv_bound(output: &SchemeOutput, k: f64) -> Estimate {
    let (pc, n) = (output.paths, output.steps());
    let t = output.grid.horizon();
    let dt = output.grid.dt();
    let xi = Estimate::from_samples(&per_path(pc, |p| norm(output.y_at(p, n))));
    let zt = Estimate::from_samples(&per_path(pc, |p| {
        (0..n).map(|s| output.z_tilde_at(p, s).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * dt
    }));
    let root = zt.value.sqrt();
    let d_root = if root > 0.0 { zt.std_error / (2.0 * root) } else { 0.0 };
    let scale = k * t.sqrt();
    Estimate {
        value: xi.value + k * (t + t.sqrt() * root),
        std_error: (xi.std_error.powi(2) + (scale * d_root).powi(2)).sqrt(),
        n: pc,
    }
}

/// `CV_π(Y)` on nested partitions against its bound, within 2 SE.
pub fn cv_check(output: &SchemeOutput, cond: &Conditioner, k: f64, strides: &[usize]) -> Result<DiagnosticsReport> {
    let y = Process::new(&output.y, output.paths, output.steps(), output.dim_y)?;
    let bound = cv_bound(output, k);
    let mut r = DiagnosticsReport::default();
    let mut previous: Option<Estimate> = None;
    let mut monotone = true;
    let mut strides = strides.to_vec();
    strides.sort_unstable_by(|a, b| b.cmp(a));
    for s in strides {
        let cv = conditional_variation(y, cond, &uniform_partition(output.steps(), s))?;
        let slack = 2.0 * (cv.std_error.powi(2) + bound.std_error.powi(2)).sqrt();
        if let Some(prev) = previous {
            monotone &= prev.value <= cv.value + 2.0 * cv.std_error.max(prev.std_error);
        }
        previous = Some(cv);
        r.push(
            DiagnosticEntry::new(
                format!("cv_y_stride_{s}"),
                cv,
                Verdict::from_bool(cv.value <= bound.value + slack),
            )
            .threshold(bound.value),
        );
    }
    r.push(DiagnosticEntry::new("cv_bound", bound, Verdict::Info));
    r.push(DiagnosticEntry::new(
        "cv_refinement_monotone",
        Estimate::exact(if monotone { 1.0 } else { 0.0 }),
        Verdict::from_bool(monotone),
    ));
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtStatistic {
    /// `Ê Σ H_i·ΔX_i` with `H_i = sign Ê[ΔX_i | F_{t_i}]`, cross-fitted.
    pub adversarial: Estimate,
    /// Quantiles of `|Σ H·ΔX|` over random `±1` step controls and paths.
    pub random_q90: f64,
    pub random_q99: f64,
    pub random_controls: usize,
}

pub fn ut_statistic(process: Process<'_>, cond: &Conditioner, random_controls: usize, seed: u64) -> Result<UtStatistic> {
    let (pc, n, d) = (process.paths(), process.steps(), process.dim());
    if cond.nodes() != n + 1 || cond.states(0).rows() != pc {
        return Err(Error::contract("conditioner does not match the process"));
    }
    let increments: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            (0..pc)
                .flat_map(|p| {
                    let (a, b) = (process.at(p, k), process.at(p, k + 1));
                    (0..d).map(move |i| b[i] - a[i])
                })
                .collect()
        })
        .collect();
    let mut gain = vec![0.0; pc];
    for (k, inc) in increments.iter().enumerate() {
        let drift = cond.condexp_crossfit(k, inc, d)?;
        for (p, g) in gain.iter_mut().enumerate() {
            for i in 0..d {
                let h = drift[p * d + i];
                let sign = if h > 0.0 { 1.0 } else if h < 0.0 { -1.0 } else { 0.0 };
                *g += sign * inc[p * d + i];
            }
        }
    }
    let mut pooled: Vec<f64> = (0..random_controls)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut rng = path_rng(seed, r as u64);
            let signs: Vec<f64> = (0..n * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let incs = &increments;
            (0..pc).map(move |p| {
                let mut s = 0.0;
                for k in 0..n {
                    for i in 0..d {
                        s += signs[k * d + i] * incs[k][p * d + i];
                    }
                }
                s.abs()
            })
        })
        .collect();
    pooled.sort_by(f64::total_cmp);
    let quantile = |q: f64| -> f64 {
        if pooled.is_empty() {
            return f64::NAN;
        }
        let idx = ((pooled.len() as f64 * q).ceil() as usize).clamp(1, pooled.len()) - 1;
        pooled[idx]
    };
    Ok(UtStatistic {
        adversarial: Estimate::from_samples(&gain),
        random_q90: quantile(0.90),
        random_q99: quantile(0.99),
        random_controls,
    })
}

impl UtStatistic {
    pub fn report(&self) -> DiagnosticsReport {
        let mut r = DiagnosticsReport::default();
        r.push(DiagnosticEntry::new("ut_adversarial_integral", self.adversarial, Verdict::Info));
        for (id, v) in [("ut_random_q90", self.random_q90), ("ut_random_q99", self.random_q99)] {
            let mut e = DiagnosticEntry::new(id, Estimate::exact(v), Verdict::Info);
            e.sample_size = self.random_controls * self.adversarial.n;
            r.push(e);
        }
        r
    }
}

/// Aldous-type statistics of a path functional.
///
/// `(B)` uses deterministic times `|τ − σ| ≤ δ`, a computable subfamily of
/// the stopping times in the criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AldousStatistics {
    /// `(R, P̂(sup_t‖F_t‖ ≥ R))`.
    pub tail: Vec<(f64, Estimate)>,
    /// `(δ, max over node pairs within δ of Ê‖F_τ − F_σ‖)`.
    pub increments: Vec<(f64, Estimate)>,
}

pub fn aldous_statistics(process: Process<'_>, grid: &TimeGrid, radii: &[f64], deltas: &[f64]) -> Result<AldousStatistics> {
    let (pc, n) = (process.paths(), process.steps());
    if grid.steps() != n {
        return Err(Error::contract("grid does not match the process"));
    }
    let sup: Vec<f64> = per_path(pc, |p| (0..=n).map(|k| norm(process.at(p, k))).fold(0.0, f64::max));
    let tail = radii
        .iter()
        .map(|&r| {
            let hits: Vec<f64> = sup.iter().map(|s| if *s >= r { 1.0 } else { 0.0 }).collect();
            (r, Estimate::from_samples(&hits))
        })
        .collect();
    let dt = grid.dt();
    let max_lag = deltas.iter().fold(0.0f64, |a, b| a.max(*b));
    let max_lag = ((max_lag / dt + 1e-9).floor() as usize).min(n);
    // best[lag] = pair (σ, σ+lag) with the largest mean increment
    let by_lag: Vec<Estimate> = (0..=max_lag)
        .into_par_iter()
        .map(|lag| {
            let mut best = Estimate::exact(0.0);
            best.n = pc;
            if lag == 0 {
                return best;
            }
            for s in 0..=n - lag {
                let xs: Vec<f64> = (0..pc)
                    .map(|p| {
                        let (a, b) = (process.at(p, s), process.at(p, s + lag));
                        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    })
                    .collect();
                let e = Estimate::from_samples(&xs);
                if e.value > best.value {
                    best = e;
                }
            }
            best
        })
        .collect();
    let increments = deltas
        .iter()
        .map(|&delta| {
            let lags = ((delta / dt + 1e-9).floor() as usize).min(n);
            let best = by_lag[..=lags]
                .iter()
                .copied()
                .fold(by_lag[0], |a, b| if b.value > a.value { b } else { a });
            (delta, best)
        })
        .collect();
    Ok(AldousStatistics { tail, increments })
}

/// `F_t = Σ_{s ≥ t} f_s dt`, the tail integral of the drift, `P × (N+1) × d`.
pub fn drift_tail_integral(output: &SchemeOutput) -> Vec<f64> {
    let (pc, n, d) = (output.paths, output.steps(), output.dim_y);
    let dt = output.grid.dt();
    let mut out = vec![0.0; pc * (n + 1) * d];
    out.par_chunks_mut((n + 1) * d).enumerate().for_each(|(p, fp)| {
        for k in (0..n).rev() {
            for i in 0..d {
                fp[k * d + i] = fp[(k + 1) * d + i] + output.drift_at(p, k)[i] * dt;
            }
        }
    });
    out
}

/// Aldous `(B)` for the drift tail integral against `δ^{1/2} K (1 + Ê∫‖Z̃‖²)^{1/2}`.
pub fn aldous_check(output: &SchemeOutput, k: f64, deltas: &[f64]) -> Result<DiagnosticsReport> {
    let tail = drift_tail_integral(output);
    let proc = Process::new(&tail, output.paths, output.steps(), output.dim_y)?;
    let stats = aldous_statistics(proc, &output.grid, &[], deltas)?;
    let dt = output.grid.dt();
    let n = output.steps();
    let zt = Estimate::from_samples(&per_path(output.paths, |p| {
        (0..n).map(|s| output.z_tilde_at(p, s).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * dt
    }));
    let mut r = DiagnosticsReport::default();
    for (delta, est) in stats.increments {
        let root = (1.0 + zt.value).sqrt();
        let bound = delta.sqrt() * k * root;
        let bound_se = delta.sqrt() * k * zt.std_error / (2.0 * root);
        let slack = 2.0 * (est.std_error.powi(2) + bound_se.powi(2)).sqrt();
        r.push(
            DiagnosticEntry::new("aldous_b_tail_integral", est, Verdict::from_bool(est.value <= bound + slack))
                .at(delta)
                .threshold(bound),
        );
    }
    Ok(r)
}

/// A cell of the martingale residual table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualCell {
    pub t: usize,
    pub t_next: usize,
    pub coordinate: usize,
    pub test_fn: String,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTable {
    pub cells: Vec<ResidualCell>,
    pub pass_fraction: f64,
    pub passed: bool,
}

impl MartingaleTable {
    pub fn entry(&self, id: &str) -> DiagnosticEntry {
        let mut e = DiagnosticEntry::new(id, Estimate::exact(self.pass_fraction), Verdict::from_bool(self.passed))
            .threshold(0.95);
        e.sample_size = self.cells.len();
        e
    }
}

/// Node pairs `(t, t + s)` probing the martingale property.
pub fn default_pairs(steps: usize) -> Vec<(usize, usize)> {
    let eighth = (steps / 8).max(1);
    let mut starts = vec![0, steps / 8, steps / 4, steps / 2, 3 * steps / 4];
    starts.sort_unstable();
    starts.dedup();
    let mut pairs = Vec::new();
    for t in starts.into_iter().filter(|t| *t < steps) {
        for end in [(t + eighth).min(steps), steps] {
            if end > t && !pairs.contains(&(t, end)) {
                pairs.push((t, end));
            }
        }
    }
    pairs
}

/// z-scores of `Ê[(X_{t+s} − X_t)·h(history_t)]` over a family of bounded
/// history functions of the driving Brownian motion: `1`, `tanh(W_t^c)`, and
/// products with `tanh(W^c)` at up to two lookback nodes. Cells where `h`
/// vanishes on every path are skipped.
pub fn martingale_residuals(
    process: Process<'_>,
    ensemble: &PathEnsemble,
    pairs: &[(usize, usize)],
) -> Result<MartingaleTable> {
    let (pc, n, d) = (process.paths(), process.steps(), process.dim());
    if ensemble.paths() != pc || ensemble.grid().steps() != n {
        return Err(Error::contract("process and ensemble shapes differ"));
    }
    if pairs.iter().any(|(a, b)| a >= b || *b > n) {
        return Err(Error::contract("pairs must satisfy t < t + s ≤ N"));
    }
    let m = ensemble.dim();
    let lookback = (n / 16).max(1);
    let mut cells = Vec::new();
    for &(t, t2) in pairs {
        let lag1 = t.saturating_sub(lookback);
        let lag2 = t.saturating_sub(2 * lookback);
        let mut family: Vec<(String, Vec<f64>)> = vec![("one".into(), vec![1.0; pc])];
        for c in 0..m {
            let th = |k: usize| -> Vec<f64> { (0..pc).map(|p| ensemble.value(p, k)[c].tanh()).collect() };
            let (h0, h1, h2) = (th(t), th(lag1), th(lag2));
            let h01: Vec<f64> = h0.iter().zip(&h1).map(|(a, b)| a * b).collect();
            let h012: Vec<f64> = h01.iter().zip(&h2).map(|(a, b)| a * b).collect();
            family.push((format!("tanh_w{c}"), h0));
            family.push((format!("tanh_w{c}_lag1"), h01));
            family.push((format!("tanh_w{c}_lag2"), h012));
        }
        for (name, h) in family {
            if h.iter().all(|v| v.abs() < 1e-300) {
                continue;
            }
            for i in 0..d {
                let xs: Vec<f64> = (0..pc)
                    .map(|p| (process.at(p, t2)[i] - process.at(p, t)[i]) * h[p].clamp(-1.0, 1.0))
                    .collect();
                let e = Estimate::from_samples(&xs);
                let scale = xs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                let z = if e.std_error > 1e-14 * scale.max(1e-300) {
                    e.value / e.std_error
                } else if e.value.abs() <= 1e-12 * scale.max(1.0) {
                    0.0
                } else {
                    e.value.signum() * f64::INFINITY
                };
                cells.push(ResidualCell {
                    t,
                    t_next: t2,
                    coordinate: i,
                    test_fn: name.clone(),
                    z,
                });
            }
        }
    }
    let ok = cells.iter().filter(|c| c.z.abs() <= 3.0).count();
    let pass_fraction = if cells.is_empty() { 1.0 } else { ok as f64 / cells.len() as f64 };
    Ok(MartingaleTable {
        passed: pass_fraction >= 0.95,
        pass_fraction,
        cells,
    })
}

/// Martingale residuals of the products `L^i W^j`, which vanish in
/// expectation when `L` is orthogonal to `W`.
pub fn orthogonality_residuals(
    l: Process<'_>,
    ensemble: &PathEnsemble,
    pairs: &[(usize, usize)],
) -> Result<MartingaleTable> {
    let (pc, n, d) = (l.paths(), l.steps(), l.dim());
    if ensemble.paths() != pc || ensemble.grid().steps() != n {
        return Err(Error::contract("process and ensemble shapes differ"));
    }
    let m = ensemble.dim();
    let mut prod = vec![0.0; pc * (n + 1) * d * m];
    prod.par_chunks_mut((n + 1) * d * m).enumerate().for_each(|(p, out)| {
        for k in 0..=n {
            let (lk, wk) = (l.at(p, k), ensemble.value(p, k));
            for i in 0..d {
                for j in 0..m {
                    out[(k * d + i) * m + j] = lk[i] * wk[j];
                }
            }
        }
    });
    martingale_residuals(Process::new(&prod, pc, n, d * m)?, ensemble, pairs)
}

/// `V − V_0 = M_Z + L` with `M_Z = Σ Z·ΔW`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakLimitDecomposition {
    /// `P × (N+1) × d`, zero at `t = 0`.
    pub l: Vec<f64>,
    pub mz: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
}

impl WeakLimitDecomposition {
    pub fn l_process(&self) -> Process<'_> {
        Process::new(&self.l, self.paths, self.steps, self.dim).expect("shape fixed at construction")
    }
}

/// Splits `v` against the kernel `z` (`P × N × d × m`) along the ensemble.
pub fn decompose_l(v: Process<'_>, z: &[f64], ensemble: &PathEnsemble) -> Result<WeakLimitDecomposition> {
    let (pc, n, d) = (v.paths(), v.steps(), v.dim());
    let m = ensemble.dim();
    if ensemble.paths() != pc || ensemble.grid().steps() != n || z.len() != pc * n * d * m {
        return Err(Error::contract("V, Z and the ensemble must be aligned"));
    }
    let mut mz = vec![0.0; pc * (n + 1) * d];
    mz.par_chunks_mut((n + 1) * d).enumerate().for_each(|(p, out)| {
        for k in 0..n {
            let dw = ensemble.increment(p, k);
            for i in 0..d {
                let zk = &z[((p * n + k) * d + i) * m..((p * n + k) * d + i + 1) * m];
                out[(k + 1) * d + i] = out[k * d + i] + zk.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    let mut l = vec![0.0; pc * (n + 1) * d];
    l.par_chunks_mut((n + 1) * d).enumerate().for_each(|(p, out)| {
        let v0 = v.at(p, 0);
        for k in 0..=n {
            for i in 0..d {
                out[k * d + i] = v.at(p, k)[i] - v0[i] - mz[(p * (n + 1) + k) * d + i];
            }
        }
    });
    Ok(WeakLimitDecomposition {
        l,
        mz,
        paths: pc,
        steps: n,
        dim: d,
    })
}

/// One Kolmogorov–Smirnov comparison of two runs at a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawDistance {
    pub node: usize,
    /// `"Y"` or `"V"`.
    pub component: String,
    pub coordinate: usize,
    pub delay_a: usize,
    pub delay_b: usize,
    pub ks: f64,
    pub p_value: f64,
}

/// Pairwise distances between the per-time laws of `Y_t` and `V_t` across runs.
pub fn law_stabilization(outputs: &[SchemeOutput], nodes: &[usize]) -> Result<Vec<LawDistance>> {
    if outputs.len() < 2 {
        return Err(Error::config("delays", "law comparison needs at least 2 outputs"));
    }
    let first = &outputs[0];
    for o in outputs {
        if o.steps() != first.steps()
            || o.grid.horizon() != first.grid.horizon()
            || o.paths != first.paths
            || o.dim_y != first.dim_y
        {
            return Err(Error::contract("outputs must share grid, path count and dimension"));
        }
    }
    if nodes.iter().any(|k| *k > first.steps()) {
        return Err(Error::contract("node beyond the horizon"));
    }
    let d = first.dim_y;
    let mut out = Vec::new();
    for &k in nodes {
        for (component, pick) in [("Y", 0usize), ("V", 1)] {
            let laws: Vec<Vec<f64>> = outputs
                .iter()
                .map(|o| {
                    let arr = if pick == 0 { &o.y } else { &o.v };
                    Process::new(arr, o.paths, o.steps(), d).expect("validated").slice_at(k)
                })
                .collect();
            for a in 0..outputs.len() {
                for b in a + 1..outputs.len() {
                    for i in 0..d {
                        let xa: Vec<f64> = laws[a].iter().skip(i).step_by(d).copied().collect();
                        let xb: Vec<f64> = laws[b].iter().skip(i).step_by(d).copied().collect();
                        let (ks, p_value) = ks_two_sample(&xa, &xb);
                        out.push(LawDistance {
                            node: k,
                            component: component.into(),
                            coordinate: i,
                            delay_a: outputs[a].delay(),
                            delay_b: outputs[b].delay(),
                            ks,
                            p_value,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::RegressionBasis;
    use crate::problem_model::builtin_problem;
    use crate::scheme::{run_scheme, run_scheme_with};
    use crate::stochastic_basis::{sample_brownian, TreeModel};

    fn mc(name: &str, n: usize, paths: usize, delay: usize, seed: u64) -> (SchemeOutput, PathEnsemble, Conditioner) {
        let problem = builtin_problem(name).unwrap();
        let grid = TimeGrid::new(1.0, n, 1).unwrap();
        let ens = sample_brownian(&grid, problem.dim_w(), paths, seed).unwrap();
        let cond = Conditioner::new(&problem, &ens, &RegressionBasis::polynomial(3, 1e-8)).unwrap();
        let (out, _) = run_scheme_with(&problem, &ens, delay, &cond).unwrap();
        (out, ens, cond)
    }

    fn tree(name: &str, depth: usize, delay: usize) -> (SchemeOutput, PathEnsemble, Conditioner) {
        let problem = builtin_problem(name).unwrap();
        let ens = TreeModel::new(depth, 1.0).unwrap().ensemble();
        let cond = Conditioner::new(&problem, &ens, &RegressionBasis::indicator()).unwrap();
        let (out, _) = run_scheme_with(&problem, &ens, delay, &cond).unwrap();
        (out, ens, cond)
    }

    #[test]
    fn martingale_problem_l2_values() {
        let (out, _, _) = mc("P1", 16, 4096, 1, 3);
        let r = l2_bounds(&out);
        let z = r.find("l2_int_z_sq").unwrap();
        assert!((z.estimate - 1.0).abs() < 0.05, "{}", z.estimate);
    }

    #[test]
    fn sup_w_squared_matches_tree_enumeration() {
        // E sup_k W_k² enumerated exactly on a depth-10 tree.
        let tree = TreeModel::new(10, 1.0).unwrap();
        let reference = tree.expectation(|w| w.iter().fold(0.0f64, |a, x| a.max(x * x)));
        assert!((reference - 1.491796875).abs() < 1e-9);
        let (out, _, _) = mc("P1", 10, 1 << 14, 1, 11);
        let got = l2_bounds(&out).find("l2_sup_y_sq").unwrap().estimate;
        assert!((got - reference).abs() / reference < 0.05, "{got} vs {reference}");
    }

    #[test]
    fn zero_problem_has_zero_statistics() {
        let (out, _, _) = tree("P3", 5, 1);
        assert!(l2_bounds(&out).entries.iter().all(|e| e.estimate == 0.0));
    }

    #[test]
    fn energy_bound_is_isometry_for_zero_generator() {
        let (out, _, _) = mc("P1", 32, 4096, 1, 5);
        let r = z_energy_inequality(&out, 0.0, 1.0).unwrap();
        assert!(r.all_passed(), "{:?}", r);
        assert_eq!(r.entries.len(), 32);
    }

    #[test]
    fn energy_requires_lambda_above_twice_k() {
        let (out, _, _) = tree("P1", 3, 1);
        assert!(matches!(
            z_energy_inequality(&out, 1.0, 2.0),
            Err(Error::Config { .. })
        ));
        let c = energy_constants(std::f64::consts::FRAC_PI_2, 2.0 * std::f64::consts::PI, 1.0).unwrap();
        assert!((c.inflation - 2.0).abs() < 1e-12);
        assert!((c.c_a - 8.0 * std::f64::consts::PI.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn zero_generator_has_degenerate_decay_table() {
        let problem = builtin_problem("P1").unwrap();
        let ens = TreeModel::new(6, 1.0).unwrap().ensemble();
        let outs: Vec<SchemeOutput> = [1, 2, 4]
            .iter()
            .map(|d| run_scheme(&problem, &ens, *d, &RegressionBasis::indicator()).unwrap())
            .collect();
        let s = u_decay_from_outputs(&outs, 1.0).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.verdict, Verdict::Info);
        assert!(matches!(u_decay_from_outputs(&outs[..2], 1.0), Err(Error::Config { .. })));
        assert!(u_decay_from_outputs(&outs, 2.0).is_err());
    }

    #[test]
    fn bounded_generator_obeys_deterministic_u_bound() {
        for delay in [2, 4, 8] {
            let (out, _, _) = tree("P4b", 8, delay);
            let entry = u_bound_check(&out, std::f64::consts::FRAC_PI_2);
            assert_eq!(entry.verdict, Verdict::Pass);
            // exact on the tree: no slack needed
            let worst = (0..out.paths)
                .flat_map(|p| (0..=8).map(move |k| (p, k)))
                .map(|(p, k)| out.u_at(p, k)[0].abs())
                .fold(0.0, f64::max);
            assert!(worst <= std::f64::consts::FRAC_PI_2 * out.grid.delay() + 1e-12);
        }
    }

    #[test]
    fn decay_fit_on_exact_power_law() {
        // Synthetic outputs with sup U = h exactly give slope 1.
        let problem = builtin_problem("P1").unwrap();
        let ens = TreeModel::new(4, 1.0).unwrap().ensemble();
        let outs: Vec<SchemeOutput> = [1usize, 2, 4]
            .iter()
            .map(|&d| {
                let pc = ens.paths();
                let h = d as f64 / 4.0;
                SchemeOutput::assemble(
                    &problem,
                    &ens,
                    d,
                    vec![0.0; pc * 5],
                    vec![0.0; pc * 4],
                    vec![0.0; pc * 4],
                    vec![h; pc * 5],
                    "test",
                )
                .unwrap()
            })
            .collect();
        let s = u_decay_from_outputs(&outs, 1.0).unwrap();
        assert!((s.fit.unwrap().slope - 1.0).abs() < 1e-12);
        assert_eq!(s.verdict, Verdict::Pass);
        assert!((s.reference_rate - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cv_of_martingale_is_terminal_norm() {
        let (out, _, cond) = tree("P1", 6, 1);
        let v = Process::new(&out.v, out.paths, 6, 1).unwrap();
        let terminal = Estimate::from_samples(&(0..out.paths).map(|p| out.v_at(p, 6)[0].abs()).collect::<Vec<_>>());
        for stride in [1, 2, 3, 6] {
            let cv = conditional_variation(v, &cond, &uniform_partition(6, stride)).unwrap();
            assert!((cv.value - terminal.value).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_of_deterministic_path_is_twice_horizon() {
        let (out, _, cond) = tree("P1", 5, 1);
        let vals: Vec<f64> = (0..out.paths).flat_map(|_| (0..=5).map(|k| k as f64 / 5.0)).collect();
        let x = Process::new(&vals, out.paths, 5, 1).unwrap();
        let cv = conditional_variation(x, &cond, &uniform_partition(5, 1)).unwrap();
        assert!((cv.value - 2.0).abs() < 1e-12);
        assert!(matches!(
            conditional_variation(x, &cond, &[0, 2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cv_bound_holds_for_affine_problem() {
        let (out, _, cond) = mc("P4", 32, 4096, 4, 9);
        let r = cv_check(&out, &cond, std::f64::consts::FRAC_PI_2, &[8, 4, 1]).unwrap();
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn ut_on_martingale_and_drift() {
        let (out, _, cond) = mc("P1", 16, 4096, 1, 21);
        let v = Process::new(&out.v, out.paths, 16, 1).unwrap();
        let ut = ut_statistic(v, &cond, 8, 1).unwrap();
        assert!(ut.adversarial.value.abs() <= 3.0 * ut.adversarial.std_error, "{:?}", ut.adversarial);
        assert!(ut.random_q99 >= ut.random_q90);
        let vals: Vec<f64> = (0..out.paths).flat_map(|_| (0..=16).map(|k| k as f64 / 16.0)).collect();
        let x = Process::new(&vals, out.paths, 16, 1).unwrap();
        let ut = ut_statistic(x, &cond, 4, 1).unwrap();
        assert!((ut.adversarial.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aldous_constant_and_bounded_drift() {
        let grid = TimeGrid::new(1.0, 8, 1).unwrap();
        let vals = vec![2.0; 10 * 9];
        let proc = Process::new(&vals, 10, 8, 1).unwrap();
        let a = aldous_statistics(proc, &grid, &[1.0, 2.5], &[0.25]).unwrap();
        assert_eq!(a.tail[0].1.value, 1.0);
        assert_eq!(a.tail[1].1.value, 0.0);
        assert_eq!(a.increments[0].1.value, 0.0);

        let (out, _, _) = tree("P4b", 8, 2);
        let tail = drift_tail_integral(&out);
        let proc = Process::new(&tail, out.paths, 8, 1).unwrap();
        let k = std::f64::consts::FRAC_PI_2;
        let a = aldous_statistics(proc, &out.grid, &[], &[0.125, 0.25, 0.5]).unwrap();
        for (delta, e) in a.increments {
            assert!(e.value <= k * delta + 1e-12);
        }
    }

    #[test]
    fn brownian_passes_and_drift_fails_residuals() {
        let grid = TimeGrid::new(1.0, 32, 1).unwrap();
        let ens = sample_brownian(&grid, 1, 4096, 2).unwrap();
        let w = Process::new(ens.values(), 4096, 32, 1).unwrap();
        let pairs = default_pairs(32);
        let t = martingale_residuals(w, &ens, &pairs).unwrap();
        assert!(t.passed, "{}", t.pass_fraction);
        let drift: Vec<f64> = (0..4096).flat_map(|_| (0..=32).map(|k| k as f64 / 32.0)).collect();
        let x = Process::new(&drift, 4096, 32, 1).unwrap();
        let t = martingale_residuals(x, &ens, &pairs).unwrap();
        assert!(!t.passed);
        assert!(t.cells.iter().any(|c| c.test_fn == "one" && c.z.is_infinite()));
    }

    #[test]
    fn tree_martingale_residuals_are_zero() {
        let (out, ens, _) = tree("P1", 8, 1);
        let v = Process::new(&out.v, out.paths, 8, 1).unwrap();
        let t = martingale_residuals(v, &ens, &default_pairs(8)).unwrap();
        assert!(t.cells.iter().all(|c| c.z.abs() < 1e-6), "{:?}", t.cells);
    }

    #[test]
    fn decomposition_of_single_run_vanishes() {
        let (out, ens, _) = mc("P4", 16, 1024, 2, 4);
        let v = Process::new(&out.v, out.paths, 16, 1).unwrap();
        let dec = decompose_l(v, &out.z, &ens).unwrap();
        assert!(dec.l.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn brownian_is_not_orthogonal_to_itself() {
        let grid = TimeGrid::new(1.0, 32, 1).unwrap();
        let ens = sample_brownian(&grid, 1, 4096, 8).unwrap();
        let w = Process::new(ens.values(), 4096, 32, 1).unwrap();
        let zero_z = vec![0.0; 4096 * 32];
        let dec = decompose_l(w, &zero_z, &ens).unwrap();
        assert!(dec.l.iter().zip(ens.values()).all(|(a, b)| a == b));
        let t = orthogonality_residuals(dec.l_process(), &ens, &default_pairs(32)).unwrap();
        assert!(!t.passed, "{}", t.pass_fraction);
    }

    #[test]
    fn law_distances_identical_and_mismatched() {
        let (a, _, _) = tree("P1", 5, 1);
        let d = law_stabilization(&[a.clone(), a.clone()], &[0, 3, 5]).unwrap();
        assert!(d.iter().all(|x| x.ks == 0.0));
        let (b, _, _) = tree("P1", 4, 1);
        assert!(matches!(law_stabilization(&[a.clone(), b], &[0]), Err(Error::Contract(_))));
        assert!(law_stabilization(&[a], &[0]).is_err());
    }

    #[test]
    fn median_bound_flags_blow_up() {
        assert!(bounded_by_median(&[1.0, 1.1, 0.9]).1);
        assert!(!bounded_by_median(&[1.0, 1.1, 5.0]).1);
        assert!(bounded_by_median(&[0.0, 0.0, 0.0]).1);
    }

    #[test]
    fn csv_layout() {
        let mut r = DiagnosticsReport::default();
        r.push(DiagnosticEntry::new("x", Estimate::exact(0.5), Verdict::Pass).threshold(1.0));
        r.push(DiagnosticEntry::new("y", Estimate::exact(1.0), Verdict::Info).at(0.25));
        let r = r.with_run(4, 9);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "x,4,global,5.000000000000e-1,0.000000000000e0,1.000000000000e0,pass");
        assert_eq!(lines[2], "y,4,2.500000000000e-1,1.000000000000e0,0.000000000000e0,,info");
        assert_eq!(r.entries[0].seed, 9);
    }
}
