//! Delayed-control backward induction.
//!
//! With `h = D·dt` and block boundaries `N, N−D, ...`, each block `[a, b)` is
//! filled from quantities on `[b, N]` only:
//!
//! * `Z̃_s = Ê[Z_{s+D} | F_s]` (zero once `s + D ≥ N`),
//! * `Y_s = Ê[ξ + Σ_{r ≥ s+D} f_r dt | F_s]`,
//! * `f_s = f(s, X_s, Y_s, Z̃_s)` and the block martingale
//!   `M^b_k = Ê[ξ + Σ_{r ≥ a} f_r dt | F_k]`, `k ∈ [a, b]`,
//! * `Z_k = Ê[ΔM^b_k ΔW_kᵀ | F_k] / dt`,
//! * `U_s = Ê[Σ_{s ≤ r < s+D} f_r dt | F_s]`.
//!
//! Time integrals are left-endpoint sums, so `f_r` enters for `r < N` only.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::{Conditioner, RegressionBasis};
use crate::error::{Error, Result};
use crate::problem_model::{forward_paths, norm, ProblemSpec};
use crate::stats::Estimate;
use crate::stochastic_basis::{write_binary_block, BinaryHeader, PathEnsemble, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub problem: String,
    pub delay: usize,
    pub seed: u64,
    pub basis: String,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
}

/// Per-path, per-node output of the scheme.
///
/// Layouts are row-major with the path index outermost: node arrays are
/// `P × (N+1) × d`, step arrays `P × N × d` (drift) or `P × N × d × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeOutput {
    pub grid: TimeGrid,
    pub dim_y: usize,
    pub dim_w: usize,
    pub paths: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub z_tilde: Vec<f64>,
    pub u: Vec<f64>,
    /// Running stochastic integral `Σ_{r<k} Z_r ΔW_r`.
    pub v: Vec<f64>,
    /// `M_0 + V`, with `M_0` the sample mean of `ξ + Σ f dt`.
    pub m: Vec<f64>,
    /// `f(s, X_s, Y_s, Z̃_s)` at steps `s < N`.
    pub drift: Vec<f64>,
    pub provenance: Provenance,
}

impl SchemeOutput {
    /// Completes `(Y, Z, Z̃, U)` into an output: evaluates the drift and
    /// accumulates `V` and `M` along the ensemble's increments.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        problem: &ProblemSpec,
        ensemble: &PathEnsemble,
        delay: usize,
        y: Vec<f64>,
        z: Vec<f64>,
        z_tilde: Vec<f64>,
        u: Vec<f64>,
        basis: &str,
    ) -> Result<Self> {
        check_dims(problem, ensemble)?;
        let grid = ensemble.grid().with_delay(delay)?;
        let (p_count, n) = (ensemble.paths(), grid.steps());
        let (d, m) = (problem.dim_y(), problem.dim_w());
        let dz = d * m;
        for (name, len, want) in [
            ("Y", y.len(), p_count * (n + 1) * d),
            ("Z", z.len(), p_count * n * dz),
            ("Z̃", z_tilde.len(), p_count * n * dz),
            ("U", u.len(), p_count * (n + 1) * d),
        ] {
            if len != want {
                return Err(Error::contract(format!("{name} has {len} entries, expected {want}")));
            }
        }
        let x = forward_paths(problem, ensemble);
        let drift = evaluate_drift(problem, &grid, &x, &y, &z_tilde, p_count);
        let dt = grid.dt();
        let mut v = vec![0.0; p_count * (n + 1) * d];
        v.par_chunks_mut((n + 1) * d).enumerate().for_each(|(p, vp)| {
            for k in 0..n {
                let dw = ensemble.increment(p, k);
                let zk = &z[(p * n + k) * dz..(p * n + k + 1) * dz];
                for i in 0..d {
                    let inc: f64 = (0..m).map(|c| zk[i * m + c] * dw[c]).sum();
                    vp[(k + 1) * d + i] = vp[k * d + i] + inc;
                }
            }
        });
        let mut m0 = vec![0.0; d];
        for p in 0..p_count {
            for i in 0..d {
                let total: f64 = (0..n).map(|k| drift[(p * n + k) * d + i]).sum::<f64>() * dt;
                m0[i] += y[(p * (n + 1) + n) * d + i] + total;
            }
        }
        m0.iter_mut().for_each(|v| *v /= p_count as f64);
        let mart: Vec<f64> = v
            .chunks(d)
            .flat_map(|vk| vk.iter().zip(&m0).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        Ok(Self {
            grid,
            dim_y: d,
            dim_w: m,
            paths: p_count,
            y,
            z,
            z_tilde,
            u,
            v,
            m: mart,
            drift,
            provenance: Provenance {
                problem: problem.name().to_string(),
                delay,
                seed: ensemble.seed(),
                basis: basis.to_string(),
                paths: p_count,
                steps: n,
                horizon: grid.horizon(),
            },
        })
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn delay(&self) -> usize {
        self.grid.delay_steps()
    }

    fn node(&self, p: usize, k: usize) -> std::ops::Range<usize> {
        let o = (p * (self.steps() + 1) + k) * self.dim_y;
        o..o + self.dim_y
    }

    pub fn y_at(&self, p: usize, k: usize) -> &[f64] {
        &self.y[self.node(p, k)]
    }

    pub fn u_at(&self, p: usize, k: usize) -> &[f64] {
        &self.u[self.node(p, k)]
    }

    pub fn v_at(&self, p: usize, k: usize) -> &[f64] {
        &self.v[self.node(p, k)]
    }

    pub fn m_at(&self, p: usize, k: usize) -> &[f64] {
        &self.m[self.node(p, k)]
    }

    pub fn z_at(&self, p: usize, k: usize) -> &[f64] {
        let dz = self.dim_y * self.dim_w;
        let o = (p * self.steps() + k) * dz;
        &self.z[o..o + dz]
    }

    pub fn z_tilde_at(&self, p: usize, k: usize) -> &[f64] {
        let dz = self.dim_y * self.dim_w;
        let o = (p * self.steps() + k) * dz;
        &self.z_tilde[o..o + dz]
    }

    pub fn drift_at(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.steps() + k) * self.dim_y;
        &self.drift[o..o + self.dim_y]
    }

    /// Binary dump: ensemble header, then `Y, Z, Z̃, U, V, M` back to back.
    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let header = BinaryHeader {
            horizon: self.grid.horizon(),
            steps: self.steps() as u64,
            delay: self.delay() as u64,
            dim: self.dim_w as u64,
            paths: self.paths as u64,
            seed: self.provenance.seed,
        };
        write_binary_block(
            out,
            &header,
            &[&self.y, &self.z, &self.z_tilde, &self.u, &self.v, &self.m],
        )
    }

    /// Sidecar describing the binary layout and where the data came from.
    pub fn manifest(&self) -> serde_json::Value {
        let (p, n, d, m) = (self.paths, self.steps(), self.dim_y, self.dim_w);
        let shapes: [(&str, Vec<usize>); 6] = [
            ("Y", vec![p, n + 1, d]),
            ("Z", vec![p, n, d, m]),
            ("Ztilde", vec![p, n, d, m]),
            ("U", vec![p, n + 1, d]),
            ("V", vec![p, n + 1, d]),
            ("M", vec![p, n + 1, d]),
        ];
        let mut offset = BinaryHeader::LEN;
        let arrays: Vec<serde_json::Value> = shapes
            .iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let entry = serde_json::json!({
                    "name": name,
                    "shape": shape,
                    "byte_offset": offset,
                    "dtype": "f64-le",
                });
                offset += len * 8;
                entry
            })
            .collect();
        serde_json::json!({
            "problem": self.provenance.problem,
            "delay": self.provenance.delay,
            "basis": self.provenance.basis,
            "seed": self.provenance.seed,
            "paths": p,
            "steps": n,
            "horizon": self.grid.horizon(),
            "dim_y": d,
            "dim_w": m,
            "arrays": arrays,
            "written_at": chrono::Utc::now().to_rfc3339(),
        })
    }
}

fn check_dims(problem: &ProblemSpec, ensemble: &PathEnsemble) -> Result<()> {
    if problem.dim_w() != ensemble.dim() {
        return Err(Error::contract(format!(
            "problem {} needs a {}-dimensional Brownian motion, ensemble has {}",
            problem.name(),
            problem.dim_w(),
            ensemble.dim()
        )));
    }
    Ok(())
}

fn evaluate_drift(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    y: &[f64],
    z_tilde: &[f64],
    paths: usize,
) -> Vec<f64> {
    let (n, d, dz, dx) = (
        grid.steps(),
        problem.dim_y(),
        problem.dim_y() * problem.dim_w(),
        problem.dim_x(),
    );
    let gen = problem.generator();
    let mut drift = vec![0.0; paths * n * d];
    drift.par_chunks_mut(n * d).enumerate().for_each(|(p, fp)| {
        for k in 0..n {
            let xo = (p * (n + 1) + k) * dx;
            let yo = (p * (n + 1) + k) * d;
            let zo = (p * n + k) * dz;
            gen.eval_into(
                grid.node(k),
                &x[xo..xo + dx],
                &y[yo..yo + d],
                &z_tilde[zo..zo + dz],
                &mut fp[k * d..(k + 1) * d],
            );
        }
    });
    drift
}

/// Record of which `Z` indices a block read while computing `Z̃`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTrace {
    pub start: usize,
    pub end: usize,
    /// Smallest step index of `Z` read, `None` when the block read none.
    pub min_z_read: Option<usize>,
}

pub fn run_scheme(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    delay: usize,
    basis: &RegressionBasis,
) -> Result<SchemeOutput> {
    check_dims(problem, ensemble)?;
    let cond = Conditioner::new(problem, ensemble, basis)?;
    run_scheme_with(problem, ensemble, delay, &cond).map(|(o, _)| o)
}

/// Runs the scheme with prebuilt per-node projectors, returning the block trace.
pub fn run_scheme_with(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    delay: usize,
    cond: &Conditioner,
) -> Result<(SchemeOutput, Vec<BlockTrace>)> {
    check_dims(problem, ensemble)?;
    let grid = ensemble.grid().with_delay(delay)?;
    if cond.nodes() != grid.steps() + 1 {
        return Err(Error::contract("conditioner was built for a different grid"));
    }
    let (pc, n, dt) = (ensemble.paths(), grid.steps(), grid.dt());
    let (d, m) = (problem.dim_y(), problem.dim_w());
    let dz = d * m;
    let n1 = n + 1;

    let x = forward_paths(problem, ensemble);
    let dx = problem.dim_x();
    let mut xi = vec![0.0; pc * d];
    xi.par_chunks_mut(d).enumerate().for_each(|(p, out)| {
        problem.terminal_into(ensemble.path(p), &x[p * n1 * dx..(p + 1) * n1 * dx], out);
    });
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("terminal condition produced non-finite values"));
    }

    let mut y = vec![0.0; pc * n1 * d];
    let mut u = vec![0.0; pc * n1 * d];
    let mut z = vec![0.0; pc * n * dz];
    let mut zt = vec![0.0; pc * n * dz];
    let mut drift = vec![0.0; pc * n * d];
    // suffix[p][k] = Σ_{k ≤ r < N} f_r dt
    let mut suffix = vec![0.0; pc * n1 * d];
    for p in 0..pc {
        y[(p * n1 + n) * d..(p * n1 + n + 1) * d].copy_from_slice(&xi[p * d..(p + 1) * d]);
    }

    let gen = problem.generator();
    let mut traces = Vec::new();
    for block in grid.blocks() {
        let (a, b) = (block.start, block.end);
        let mut min_read = None;
        for s in a..b {
            let ahead = s + delay;
            if ahead < n {
                min_read = Some(min_read.map_or(ahead, |r: usize| r.min(ahead)));
                let target = gather(&z, pc, n, dz, ahead);
                let fit = cond.condexp(s, &target, dz)?;
                scatter(&mut zt, &fit, pc, n, dz, s);
            }
            let ahead = ahead.min(n);
            let mut target = xi.clone();
            for p in 0..pc {
                for i in 0..d {
                    target[p * d + i] += suffix[(p * n1 + ahead) * d + i];
                }
            }
            let fit = cond.condexp(s, &target, d)?;
            scatter(&mut y, &fit, pc, n1, d, s);
        }

        drift.par_chunks_mut(n * d).enumerate().for_each(|(p, fp)| {
            for s in a..b {
                let xo = (p * n1 + s) * dx;
                let yo = (p * n1 + s) * d;
                let zo = (p * n + s) * dz;
                gen.eval_into(
                    grid.node(s),
                    &x[xo..xo + dx],
                    &y[yo..yo + d],
                    &zt[zo..zo + dz],
                    &mut fp[s * d..(s + 1) * d],
                );
            }
        });
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("generator produced non-finite values"));
        }
        suffix.par_chunks_mut(n1 * d).enumerate().for_each(|(p, sp)| {
            for s in (a..b).rev() {
                for i in 0..d {
                    sp[s * d + i] = sp[(s + 1) * d + i] + drift[(p * n + s) * d + i] * dt;
                }
            }
        });

        for s in a..b {
            let ahead = (s + delay).min(n);
            let target: Vec<f64> = (0..pc)
                .flat_map(|p| {
                    let sp = &suffix[p * n1 * d..(p + 1) * n1 * d];
                    (0..d).map(move |i| sp[s * d + i] - sp[ahead * d + i])
                })
                .collect();
            let fit = cond.condexp(s, &target, d)?;
            scatter(&mut u, &fit, pc, n1, d, s);
        }

        // block martingale E[ξ + Σ_{r ≥ a} f_r dt | F_k] on [a, b]
        let mut g = xi.clone();
        for p in 0..pc {
            for i in 0..d {
                g[p * d + i] += suffix[(p * n1 + a) * d + i];
            }
        }
        let mut upper = if b == n { g.clone() } else { cond.condexp(b, &g, d)? };
        for k in (a..b).rev() {
            let lower = cond.condexp(k, &g, d)?;
            let dm: Vec<f64> = upper.iter().zip(&lower).map(|(hi, lo)| hi - lo).collect();
            let dw: Vec<f64> = (0..pc).flat_map(|p| ensemble.increment(p, k).to_vec()).collect();
            let zk = cond.extract_z(k, &dm, d, &dw, m, dt)?;
            scatter(&mut z, &zk, pc, n, dz, k);
            upper = lower;
        }
        traces.push(BlockTrace {
            start: a,
            end: b,
            min_z_read: min_read,
        });
    }

    let out = SchemeOutput::assemble(problem, ensemble, delay, y, z, zt, u, &cond.basis().name)?;
    Ok((out, traces))
}

fn gather(a: &[f64], pc: usize, len: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pc * w);
    for p in 0..pc {
        let o = (p * len + k) * w;
        out.extend_from_slice(&a[o..o + w]);
    }
    out
}

fn scatter(a: &mut [f64], vals: &[f64], pc: usize, len: usize, w: usize, k: usize) {
    for p in 0..pc {
        let o = (p * len + k) * w;
        a[o..o + w].copy_from_slice(&vals[p * w..(p + 1) * w]);
    }
}

/// Residual of `Y_t = ξ + Σ_{s≥t} f_s dt − (V_T − V_t) − U_t` along every path.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub max_abs: f64,
    /// `Ê‖R_k‖` per node.
    pub mean_abs_profile: Vec<f64>,
    /// `Ê‖Y_k‖` per node, the scale used by relative budgets.
    pub mean_abs_y: Vec<f64>,
}

/// Recomputes `ξ` and the drift from `problem` and checks the identity
/// linking `(Y, Z, Z̃, U)`.
pub fn residual_bsde(
    output: &SchemeOutput,
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
) -> Result<ResidualReport> {
    check_dims(problem, ensemble)?;
    if output.paths != ensemble.paths() || output.steps() != ensemble.grid().steps() {
        return Err(Error::contract("output and ensemble shapes differ"));
    }
    let (pc, n, d) = (output.paths, output.steps(), output.dim_y);
    let n1 = n + 1;
    let dt = output.grid.dt();
    let x = forward_paths(problem, ensemble);
    let dx = problem.dim_x();
    let drift = evaluate_drift(problem, &output.grid, &x, &output.y, &output.z_tilde, pc);
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..pc)
        .into_par_iter()
        .map(|p| {
            let mut xi = vec![0.0; d];
            problem.terminal_into(ensemble.path(p), &x[p * n1 * dx..(p + 1) * n1 * dx], &mut xi);
            let mut tail = vec![0.0; d];
            let mut r = vec![0.0; n1];
            let mut ya = vec![0.0; n1];
            for k in (0..=n).rev() {
                if k < n {
                    for i in 0..d {
                        tail[i] += drift[(p * n + k) * d + i] * dt;
                    }
                }
                let yk = output.y_at(p, k);
                let res: Vec<f64> = (0..d)
                    .map(|i| {
                        yk[i]
                            - (xi[i] + tail[i]
                                - (output.v_at(p, n)[i] - output.v_at(p, k)[i])
                                - output.u_at(p, k)[i])
                    })
                    .collect();
                r[k] = norm(&res);
                ya[k] = norm(yk);
            }
            (r, ya)
        })
        .collect();
    let mut max_abs = 0.0f64;
    let mut prof = vec![0.0; n1];
    let mut yprof = vec![0.0; n1];
    for (r, ya) in &per_path {
        for k in 0..n1 {
            max_abs = max_abs.max(r[k]);
            prof[k] += r[k];
            yprof[k] += ya[k];
        }
    }
    prof.iter_mut().for_each(|v| *v /= pc as f64);
    yprof.iter_mut().for_each(|v| *v /= pc as f64);
    Ok(ResidualReport {
        max_abs,
        mean_abs_profile: prof,
        mean_abs_y: yprof,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DelayGap {
    /// `Ê Σ ‖Z̃_s − Z_s‖² dt`.
    pub squared_gap: Estimate,
    /// `Ê ‖Σ α(s, X_s, Y_s)(Z̃_s − Z_s) dt‖`.
    pub weighted_gap: Estimate,
    /// The α-weighted gap per path, `P × d`.
    pub weighted_per_path: Vec<f64>,
}

pub fn delay_shift_gap(
    output: &SchemeOutput,
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
) -> Result<DelayGap> {
    let gen = problem.generator();
    if !gen.is_affine() {
        return Err(Error::Unsupported(format!(
            "{} has no affine representation, the α-weighted gap is undefined",
            problem.name()
        )));
    }
    check_dims(problem, ensemble)?;
    let (pc, n, d, m) = (output.paths, output.steps(), output.dim_y, output.dim_w);
    let dz = d * m;
    let dt = output.grid.dt();
    let dx = problem.dim_x();
    let x = forward_paths(problem, ensemble);
    let rows: Vec<(f64, Vec<f64>)> = (0..pc)
        .into_par_iter()
        .map(|p| {
            let mut sq = 0.0;
            let mut weighted = vec![0.0; d];
            let mut alpha = vec![0.0; d * dz];
            for k in 0..n {
                let gap: Vec<f64> = output
                    .z_tilde_at(p, k)
                    .iter()
                    .zip(output.z_at(p, k))
                    .map(|(a, b)| a - b)
                    .collect();
                sq += gap.iter().map(|g| g * g).sum::<f64>() * dt;
                let xo = (p * (n + 1) + k) * dx;
                gen.alpha_into(output.grid.node(k), &x[xo..xo + dx], output.y_at(p, k), &mut alpha);
                for i in 0..d {
                    weighted[i] += alpha[i * dz..(i + 1) * dz]
                        .iter()
                        .zip(&gap)
                        .map(|(a, g)| a * g)
                        .sum::<f64>()
                        * dt;
                }
            }
            (sq, weighted)
        })
        .collect();
    let sq: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let wn: Vec<f64> = rows.iter().map(|r| norm(&r.1)).collect();
    Ok(DelayGap {
        squared_gap: Estimate::from_samples(&sq),
        weighted_gap: Estimate::from_samples(&wn),
        weighted_per_path: rows.into_iter().flat_map(|r| r.1).collect(),
    })
}
