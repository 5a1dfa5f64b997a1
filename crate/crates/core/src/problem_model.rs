//! BSDE data `(f, ξ, X)`, hypothesis checkers and the builtin problems.
//!
//! Generators are affine in `z`: `f(t,x,y,z) = α(t,x,y)·z + β(t,x,y)` where
//! `α` is stored as a `d × d × m` tensor contracted over the last two axes
//! against the `d × m` matrix `z`. Demo generators outside that class carry a
//! direct evaluator instead.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stochastic_basis::{path_rng, PathEnsemble, TimeGrid};

/// `(t, x, y, out)`
pub type CoefficientFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, y, z, out)`
pub type DirectFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(w_path, x_path, out)` over all nodes.
pub type TerminalFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(times, w_prefix, out)` writes `X` at the last node of the prefix.
pub type ForwardFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, w_prefix, x_now, out)` writes the regression state at the last node.
pub type FeatureFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, w_t) -> (Y_t, Z_t)` for problems with a closed-form solution.
pub type ReferenceFn = Arc<dyn Fn(f64, &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync>;

#[derive(Clone)]
pub struct GeneratorSpec {
    dim_y: usize,
    dim_w: usize,
    alpha: Option<CoefficientFn>,
    beta: Option<CoefficientFn>,
    direct: Option<DirectFn>,
    growth_k: f64,
    affine: bool,
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("dim_y", &self.dim_y)
            .field("dim_w", &self.dim_w)
            .field("growth_k", &self.growth_k)
            .field("affine", &self.affine)
            .finish_non_exhaustive()
    }
}

impl GeneratorSpec {
    /// `f = α·z + β`. A missing coefficient is identically zero.
    pub fn affine(
        dim_y: usize,
        dim_w: usize,
        alpha: Option<CoefficientFn>,
        beta: Option<CoefficientFn>,
        growth_k: f64,
    ) -> Self {
        Self {
            dim_y,
            dim_w,
            alpha,
            beta,
            direct: None,
            growth_k,
            affine: true,
        }
    }

    /// Generator evaluated directly, declared non-affine.
    pub fn direct(dim_y: usize, dim_w: usize, eval: DirectFn, growth_k: f64) -> Self {
        Self {
            dim_y,
            dim_w,
            alpha: None,
            beta: None,
            direct: Some(eval),
            growth_k,
            affine: false,
        }
    }

    pub fn zero(dim_y: usize, dim_w: usize) -> Self {
        Self::affine(dim_y, dim_w, None, None, 0.0)
    }

    /// Constant coefficients, `alpha` laid out `[i][j][k]` row-major.
    pub fn constant(dim_y: usize, dim_w: usize, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != dim_y * dim_y * dim_w {
            return Err(Error::config(
                "alpha",
                format!("expected {dim_y}×{dim_y}×{dim_w} entries, got {}", alpha.len()),
            ));
        }
        if beta.len() != dim_y {
            return Err(Error::config(
                "beta",
                format!("expected {dim_y} entries, got {}", beta.len()),
            ));
        }
        let alpha_norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
        let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let a: CoefficientFn = Arc::new(move |_, _, _, out| out.copy_from_slice(&alpha));
        let b: CoefficientFn = Arc::new(move |_, _, _, out| out.copy_from_slice(&beta));
        Ok(Self::affine(
            dim_y,
            dim_w,
            Some(a),
            Some(b),
            alpha_norm.max(beta_norm),
        ))
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn dim_z(&self) -> usize {
        self.dim_y * self.dim_w
    }

    /// Declared constant of the growth bound `‖f‖ ≤ K(1 + ‖z‖)`.
    pub fn growth_k(&self) -> f64 {
        self.growth_k
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    /// Writes `α(t,x,y)` into `out` (length `d·d·m`). Returns false for
    /// non-affine generators.
    pub fn alpha_into(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        if !self.affine {
            return false;
        }
        match &self.alpha {
            Some(a) => a(t, x, y, out),
            None => out.fill(0.0),
        }
        true
    }

    /// Checked evaluation of `f(t, x, y, z)`.
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim_y || z.len() != self.dim_z() {
            return Err(Error::contract(format!(
                "generator expects y∈ℝ^{} and z∈ℝ^{}×{}, got |y|={} |z|={}",
                self.dim_y,
                self.dim_y,
                self.dim_w,
                y.len(),
                z.len()
            )));
        }
        let mut out = vec![0.0; self.dim_y];
        self.eval_into(t, x, y, z, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation for the hot loops.
    pub fn eval_into(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        if let Some(direct) = &self.direct {
            direct(t, x, y, z, out);
            return;
        }
        match &self.beta {
            Some(b) => b(t, x, y, out),
            None => out.fill(0.0),
        }
        if let Some(a) = &self.alpha {
            let d = self.dim_y;
            let dz = self.dim_z();
            let mut alpha = vec![0.0; d * dz];
            a(t, x, y, &mut alpha);
            for (i, o) in out.iter_mut().enumerate() {
                *o += alpha[i * dz..(i + 1) * dz]
                    .iter()
                    .zip(z)
                    .map(|(a, z)| a * z)
                    .sum::<f64>();
            }
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// A point `(t, x, y, z)` at which a generator is probed.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthReport {
    /// `max ‖f‖ - K(1 + ‖z‖)` over the cloud.
    pub max_margin: f64,
    pub worst: GeneratorPoint,
    /// Largest `‖f‖` seen, an empirical sup of the generator on the cloud.
    pub sup_norm: f64,
    pub passed: bool,
}

pub fn check_growth(gen: &GeneratorSpec, cloud: &[GeneratorPoint], k: f64) -> Result<GrowthReport> {
    if cloud.is_empty() {
        return Err(Error::contract("growth check needs a non-empty cloud"));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut sup_norm = 0.0f64;
    for (i, pt) in cloud.iter().enumerate() {
        let f = gen.eval(pt.t, &pt.x, &pt.y, &pt.z)?;
        let fnorm = norm(&f);
        sup_norm = sup_norm.max(fnorm);
        let margin = fnorm - k * (1.0 + norm(&pt.z));
        if best.is_none_or(|(m, _)| margin > m) {
            best = Some((margin, i));
        }
    }
    let (max_margin, idx) = best.unwrap();
    Ok(GrowthReport {
        max_margin,
        worst: cloud[idx].clone(),
        sup_norm,
        passed: max_margin <= 0.0,
    })
}

/// Two `z` values sharing `(t, x, y)` for the midpoint-affinity probe.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityProbe {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityReport {
    /// `max ‖f(z₁) + f(z₂) − 2 f((z₁+z₂)/2)‖`.
    pub max_defect: f64,
    pub worst: usize,
    pub passed: bool,
}

pub fn check_affine_in_z(gen: &GeneratorSpec, probes: &[AffinityProbe]) -> Result<AffinityReport> {
    if probes.is_empty() {
        return Err(Error::contract("affinity check needs at least one probe"));
    }
    let mut max_defect = 0.0f64;
    let mut worst = 0;
    let mut passed = true;
    for (i, pr) in probes.iter().enumerate() {
        let mid: Vec<f64> = pr.z1.iter().zip(&pr.z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let f1 = gen.eval(pr.t, &pr.x, &pr.y, &pr.z1)?;
        let f2 = gen.eval(pr.t, &pr.x, &pr.y, &pr.z2)?;
        let fm = gen.eval(pr.t, &pr.x, &pr.y, &mid)?;
        let defect: Vec<f64> = (0..f1.len()).map(|j| f1[j] + f2[j] - 2.0 * fm[j]).collect();
        let defect = norm(&defect);
        let tol = 1e-9 * (1.0 + norm(&f1) + norm(&f2));
        if defect > tol {
            passed = false;
        }
        if defect > max_defect || i == 0 {
            max_defect = defect;
            worst = i;
        }
    }
    Ok(AffinityReport {
        max_defect,
        worst,
        passed,
    })
}

/// Gaussian cloud with spread `scale`, times uniform on `[0, horizon]`.
pub fn random_points(
    gen: &GeneratorSpec,
    dim_x: usize,
    horizon: f64,
    count: usize,
    scale: f64,
    seed: u64,
) -> Vec<GeneratorPoint> {
    let mut rng = path_rng(seed, 0);
    let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    (0..count)
        .map(|_| {
            let t = horizon * rng.random::<f64>();
            GeneratorPoint {
                t,
                x: draw(dim_x, &mut rng),
                y: draw(gen.dim_y(), &mut rng),
                z: draw(gen.dim_z(), &mut rng),
            }
        })
        .collect()
}

pub fn random_affinity_probes(
    gen: &GeneratorSpec,
    dim_x: usize,
    horizon: f64,
    count: usize,
    seed: u64,
) -> Vec<AffinityProbe> {
    let base = random_points(gen, dim_x, horizon, count, 3.0, seed);
    let other = random_points(gen, dim_x, horizon, count, 3.0, seed ^ 0x9e37_79b9_7f4a_7c15);
    base.into_iter()
        .zip(other)
        .map(|(a, b)| AffinityProbe {
            t: a.t,
            x: a.x,
            y: a.y,
            z1: a.z,
            z2: b.z,
        })
        .collect()
}

/// Terminal condition, forward process and regression state of a BSDE.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    description: String,
    generator: GeneratorSpec,
    dim_x: usize,
    terminal: TerminalFn,
    forward: ForwardFn,
    feature_dim: usize,
    features: FeatureFn,
    reference: Option<ReferenceFn>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("generator", &self.generator)
            .field("dim_x", &self.dim_x)
            .field("feature_dim", &self.feature_dim)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// A problem with `X = W` and regression state `(t, W_t)`.
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        generator: GeneratorSpec,
        terminal: TerminalFn,
    ) -> Self {
        let m = generator.dim_w();
        let forward: ForwardFn = Arc::new(move |_, w, out| {
            out.copy_from_slice(&w[w.len() - m..]);
        });
        let features: FeatureFn = Arc::new(move |t, w, _, out| {
            out[0] = t;
            out[1..].copy_from_slice(&w[w.len() - m..]);
        });
        Self {
            name: name.into(),
            description: description.into(),
            generator,
            dim_x: m,
            terminal,
            forward,
            feature_dim: m + 1,
            features,
            reference: None,
        }
    }

    pub fn with_forward(mut self, dim_x: usize, forward: ForwardFn) -> Self {
        self.dim_x = dim_x;
        self.forward = forward;
        self
    }

    pub fn with_features(mut self, feature_dim: usize, features: FeatureFn) -> Self {
        self.feature_dim = feature_dim;
        self.features = features;
        self
    }

    pub fn with_reference(mut self, reference: ReferenceFn) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn generator(&self) -> &GeneratorSpec {
        &self.generator
    }

    pub fn dim_y(&self) -> usize {
        self.generator.dim_y()
    }

    pub fn dim_w(&self) -> usize {
        self.generator.dim_w()
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn reference(&self) -> Option<&ReferenceFn> {
        self.reference.as_ref()
    }

    /// `X` at every node of one path, row-major `(N+1) × dim_x`.
    pub fn forward_path(&self, grid: &TimeGrid, w_path: &[f64]) -> Vec<f64> {
        let m = self.dim_w();
        let times = grid.nodes();
        let mut x = vec![0.0; times.len() * self.dim_x];
        for k in 0..times.len() {
            (self.forward)(
                &times[..=k],
                &w_path[..(k + 1) * m],
                &mut x[k * self.dim_x..(k + 1) * self.dim_x],
            );
        }
        x
    }

    pub fn terminal_into(&self, w_path: &[f64], x_path: &[f64], out: &mut [f64]) {
        (self.terminal)(w_path, x_path, out)
    }

    pub fn features_into(&self, t: f64, w_prefix: &[f64], x_now: &[f64], out: &mut [f64]) {
        (self.features)(t, w_prefix, x_now, out)
    }
}

/// `X` along every path of an ensemble, `P × (N+1) × dim_x`.
pub fn forward_paths(problem: &ProblemSpec, ensemble: &PathEnsemble) -> Vec<f64> {
    let grid = ensemble.grid();
    let row = (grid.steps() + 1) * problem.dim_x();
    let mut out = vec![0.0; ensemble.paths() * row];
    out.par_chunks_mut(row.max(1)).enumerate().for_each(|(p, x)| {
        x.copy_from_slice(&problem.forward_path(grid, ensemble.path(p)));
    });
    out
}

fn unary_beta(f: fn(f64) -> f64) -> CoefficientFn {
    Arc::new(move |_, _, y, out| {
        for (o, v) in out.iter_mut().zip(y) {
            *o = f(*v);
        }
    })
}

fn terminal_of_last(m: usize, g: fn(f64) -> f64) -> TerminalFn {
    Arc::new(move |w, _, out| {
        let last = &w[w.len() - m..];
        for (i, o) in out.iter_mut().enumerate() {
            *o = g(last[i % m]);
        }
    })
}

pub const P4_Z_COEFFICIENT: f64 = 0.5;

/// The builtin test problems.
///
/// * `P1`: `f ≡ 0`, `ξ = W_T`; `Y = W`, `Z ≡ 1`.
/// * `P2`: `f = y`, `ξ = W_T`; `Y_t = e^{T-t} W_t`, `Z_t = e^{T-t}`.
/// * `P3`: `f = √|y|`, `ξ = 0`; strong solutions are not unique.
/// * `P4`: `f = arctan(y) + z/2`, `ξ = tanh(W_T)`; satisfies the growth and
///   affinity hypotheses with `K = π/2`.
/// * `P4b`: `f = arctan(y)`, `ξ = tanh(W_T)`; bounded by `π/2`.
/// * `P5`: `d = 1, m = 2`, `f = 0.3 z₁ − 0.2 z₂ + cos(y)/2`,
///   `ξ = sin(W¹_T) + W²_T / 2`.
pub fn builtin_problems() -> Vec<ProblemSpec> {
    vec![p1(), p2(), p3(), p4(), p4_bounded(), p5()]
}

pub fn builtin_problem(name: &str) -> Result<ProblemSpec> {
    builtin_problems()
        .into_iter()
        .find(|p| p.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            Error::config(
                "problem",
                format!("unknown problem `{name}` (expected one of P1, P2, P3, P4, P4b, P5)"),
            )
        })
}

fn p1() -> ProblemSpec {
    ProblemSpec::new(
        "P1",
        "f ≡ 0, ξ = W_T (Y = W, Z ≡ 1)",
        GeneratorSpec::zero(1, 1),
        terminal_of_last(1, |w| w),
    )
    .with_reference(Arc::new(|_, w| (vec![w[0]], vec![1.0])))
}

fn p2() -> ProblemSpec {
    let gen = GeneratorSpec::affine(1, 1, None, Some(unary_beta(|y| y)), 1.0);
    ProblemSpec::new(
        "P2",
        "f = y, ξ = W_T (Y_t = e^{T-t} W_t, Z_t = e^{T-t}); violates the growth bound",
        gen,
        terminal_of_last(1, |w| w),
    )
}

/// Reference solution of `P2` on horizon `T`.
pub fn p2_reference(horizon: f64) -> ReferenceFn {
    Arc::new(move |t, w| {
        let g = (horizon - t).exp();
        (vec![g * w[0]], vec![g])
    })
}

fn p3() -> ProblemSpec {
    let gen = GeneratorSpec::affine(1, 1, None, Some(unary_beta(|y| y.abs().sqrt())), 1.0);
    ProblemSpec::new(
        "P3",
        "f = √|y|, ξ = 0 (a family of strong solutions Y_t = (t₀−t)²/4 on [0,t₀], Z = 0)",
        gen,
        terminal_of_last(1, |_| 0.0),
    )
    .with_reference(Arc::new(|_, _| (vec![0.0], vec![0.0])))
}

/// Member `t₀` of the `P3` solution family: `Y_t = (t₀ − t)²/4` for `t ≤ t₀`.
pub fn p3_family_solution(t0: f64, t: f64) -> f64 {
    if t <= t0 {
        0.25 * (t0 - t) * (t0 - t)
    } else {
        0.0
    }
}

fn p4() -> ProblemSpec {
    let alpha: CoefficientFn = Arc::new(|_, _, _, out| out[0] = P4_Z_COEFFICIENT);
    let gen = GeneratorSpec::affine(
        1,
        1,
        Some(alpha),
        Some(unary_beta(f64::atan)),
        FRAC_PI_2.max(P4_Z_COEFFICIENT),
    );
    ProblemSpec::new(
        "P4",
        "f = arctan(y) + z/2, ξ = tanh(W_T); growth constant K = π/2",
        gen,
        terminal_of_last(1, f64::tanh),
    )
}

fn p4_bounded() -> ProblemSpec {
    let gen = GeneratorSpec::affine(1, 1, None, Some(unary_beta(f64::atan)), FRAC_PI_2);
    ProblemSpec::new(
        "P4b",
        "f = arctan(y), ξ = tanh(W_T); ‖f‖ ≤ π/2 pointwise",
        gen,
        terminal_of_last(1, f64::tanh),
    )
}

fn p5() -> ProblemSpec {
    let alpha: CoefficientFn = Arc::new(|_, _, _, out| {
        out[0] = 0.3;
        out[1] = -0.2;
    });
    let beta: CoefficientFn = Arc::new(|_, _, y, out| out[0] = 0.5 * y[0].cos());
    let gen = GeneratorSpec::affine(1, 2, Some(alpha), Some(beta), 0.5);
    let terminal: TerminalFn = Arc::new(|w, _, out| {
        let n = w.len();
        out[0] = w[n - 2].sin() + 0.5 * w[n - 1];
    });
    ProblemSpec::new(
        "P5",
        "d = 1, m = 2: f = 0.3 z₁ − 0.2 z₂ + cos(y)/2, ξ = sin(W¹_T) + W²_T/2",
        gen,
        terminal,
    )
}

/// Terminal conditions available to custom problems: `ξ_i = g(W_T^{(i mod m)})`.
pub fn named_terminal(name: &str, m: usize) -> Result<TerminalFn> {
    let g: fn(f64) -> f64 = match name {
        "identity" => |w| w,
        "tanh" => f64::tanh,
        "sin" => f64::sin,
        "zero" => |_| 0.0,
        other => {
            return Err(Error::config(
                "terminal",
                format!("unknown terminal `{other}` (identity, tanh, sin, zero)"),
            ))
        }
    };
    Ok(terminal_of_last(m, g))
}

/// Custom affine problem with constant `α` (nested `[d][d][m]`) and `β`.
pub fn custom_affine_problem(
    alpha: &[Vec<Vec<f64>>],
    beta: &[f64],
    terminal: &str,
) -> Result<ProblemSpec> {
    let d = beta.len();
    if d == 0 {
        return Err(Error::config("beta", "beta must have at least one entry"));
    }
    if alpha.len() != d || alpha.iter().any(|row| row.len() != d) {
        return Err(Error::config("alpha", format!("alpha must have shape [{d}][{d}][m]")));
    }
    let m = alpha[0][0].len();
    if m == 0 || alpha.iter().flatten().any(|v| v.len() != m) {
        return Err(Error::config("alpha", "alpha rows must share a non-zero length m"));
    }
    if alpha.iter().flatten().flatten().chain(beta).any(|v| !v.is_finite()) {
        return Err(Error::config("alpha", "coefficients must be finite"));
    }
    let flat: Vec<f64> = alpha.iter().flatten().flatten().copied().collect();
    let gen = GeneratorSpec::constant(d, m, flat, beta.to_vec())?;
    Ok(ProblemSpec::new(
        "custom",
        format!("constant affine generator, d = {d}, m = {m}, terminal {terminal}"),
        gen,
        named_terminal(terminal, m)?,
    ))
}
