//! Conditional expectations: exact tree averages, least-squares projections on
//! path ensembles, and martingale-representation kernels from increments.
//!
//! All reductions over paths run in fixed-size chunks combined by a fixed
//! pairwise tree, so results do not depend on the rayon thread count.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem_model::{forward_paths, ProblemSpec};
use crate::stochastic_basis::{PathEnsemble, TreeModel};

const CHUNK: usize = 2048;
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// Monomials of the standardized state up to the given total degree.
    Polynomial { degree: usize },
    /// Indicators of the atoms named by the (integer) state label.
    Indicator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Relative ridge: `ridge · G_jj` is added to each non-intercept diagonal
    /// entry of the normal matrix `G`.
    pub ridge: f64,
    pub name: String,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize, ridge: f64) -> Self {
        Self {
            kind: BasisKind::Polynomial { degree },
            ridge,
            name: format!("poly{degree}"),
        }
    }

    pub fn indicator() -> Self {
        Self {
            kind: BasisKind::Indicator,
            ridge: 0.0,
            name: "indicator-tree".into(),
        }
    }

    /// `poly1` | `poly2` | `poly3` | `indicator-tree`.
    pub fn from_name(name: &str, ridge: f64) -> Result<Self> {
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::config("ridge", "ridge must be finite and ≥ 0"));
        }
        match name {
            "poly1" => Ok(Self::polynomial(1, ridge)),
            "poly2" => Ok(Self::polynomial(2, ridge)),
            "poly3" => Ok(Self::polynomial(3, ridge)),
            "indicator-tree" => Ok(Self::indicator()),
            other => Err(Error::config(
                "basis",
                format!("unknown basis `{other}` (poly1, poly2, poly3, indicator-tree)"),
            )),
        }
    }
}

/// Row-major `rows × cols` matrix of per-path states at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StateMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "state matrix {rows}×{cols} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("states must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_column(col: Vec<f64>) -> Result<Self> {
        let rows = col.len();
        Self::new(rows, 1, col)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondExpEstimate {
    /// Fitted values, `rows × width`.
    pub fitted: Vec<f64>,
    /// `n_basis × width`.
    pub coefficients: Vec<f64>,
    pub n_basis: usize,
    pub width: usize,
    /// Mean of `‖target − fitted‖²` over the fitting rows.
    pub residual_second_moment: f64,
}

#[derive(Clone, Debug)]
enum Fitter {
    Poly {
        center: Vec<f64>,
        scale: Vec<f64>,
        kept: Vec<usize>,
        exponents: Vec<Vec<u32>>,
        chol: Vec<f64>,
    },
    Indicator {
        row_group: Vec<usize>,
        counts: Vec<usize>,
    },
}

/// A factorized projection onto the span of a basis at one time.
///
/// Built once per node and reused for every target fitted there.
#[derive(Clone, Debug)]
pub struct Projector {
    fitter: Fitter,
    active: Option<Vec<usize>>,
    rows: usize,
}

impl Projector {
    pub fn build(basis: &RegressionBasis, states: &StateMatrix) -> Result<Self> {
        Self::build_inner(basis, states, None)
    }

    /// Projection estimated from `rows` only; fitted values still cover every row.
    pub fn build_on(basis: &RegressionBasis, states: &StateMatrix, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&r| r >= states.rows()) {
            return Err(Error::contract("row subset index out of range"));
        }
        Self::build_inner(basis, states, Some(rows.to_vec()))
    }

    fn build_inner(
        basis: &RegressionBasis,
        states: &StateMatrix,
        active: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n_active = active.as_ref().map_or(states.rows(), Vec::len);
        let fitter = match basis.kind {
            BasisKind::Polynomial { degree } => {
                build_poly(states, active.as_deref(), degree, basis.ridge, n_active)?
            }
            BasisKind::Indicator => build_indicator(states, active.as_deref())?,
        };
        Ok(Self {
            fitter,
            active,
            rows: states.rows(),
        })
    }

    pub fn n_basis(&self) -> usize {
        match &self.fitter {
            Fitter::Poly { exponents, .. } => exponents.len(),
            Fitter::Indicator { counts, .. } => counts.len(),
        }
    }

    fn active_len(&self) -> usize {
        self.active.as_ref().map_or(self.rows, Vec::len)
    }

    fn active_row(&self, i: usize) -> usize {
        self.active.as_ref().map_or(i, |a| a[i])
    }

    /// Least-squares fit of `targets` (`rows × width`, row-major).
    pub fn fit(&self, states: &StateMatrix, targets: &[f64], width: usize) -> Result<CondExpEstimate> {
        if states.rows() != self.rows || targets.len() != self.rows * width {
            return Err(Error::contract(format!(
                "fit expects {} rows × {width} targets, got {} states and {} targets",
                self.rows,
                states.rows(),
                targets.len()
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("regression targets must be finite"));
        }
        let (coefficients, fitted) = match &self.fitter {
            Fitter::Poly {
                center,
                scale,
                kept,
                exponents,
                chol,
            } => {
                let b = exponents.len();
                let feat = |row: &[f64], out: &mut [f64]| {
                    poly_features(row, center, scale, kept, exponents, out)
                };
                let n = self.active_len();
                let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
                    .into_par_iter()
                    .map(|c| {
                        let mut acc = vec![0.0; b * width];
                        let mut phi = vec![0.0; b];
                        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                            let r = self.active_row(i);
                            feat(states.row(r), &mut phi);
                            let y = &targets[r * width..(r + 1) * width];
                            for (j, pj) in phi.iter().enumerate() {
                                for (w, yw) in y.iter().enumerate() {
                                    acc[j * width + w] += pj * yw;
                                }
                            }
                        }
                        acc
                    })
                    .collect();
                let rhs = pairwise_sum(parts, b * width);
                let coef = cholesky_solve(chol, b, &rhs, width);
                let mut fitted = vec![0.0; self.rows * width];
                fitted
                    .par_chunks_mut(width.max(1))
                    .enumerate()
                    .for_each_init(
                        || vec![0.0; b],
                        |phi, (r, out)| {
                            feat(states.row(r), phi);
                            for (w, o) in out.iter_mut().enumerate() {
                                *o = (0..b).map(|j| phi[j] * coef[j * width + w]).sum();
                            }
                        },
                    );
                (coef, fitted)
            }
            Fitter::Indicator {
                row_group,
                counts,
                ..
            } => {
                let g = counts.len();
                let mut sums = vec![0.0; g * width];
                for i in 0..self.active_len() {
                    let r = self.active_row(i);
                    let grp = row_group[r];
                    for w in 0..width {
                        sums[grp * width + w] += targets[r * width + w];
                    }
                }
                for (grp, &c) in counts.iter().enumerate() {
                    if c > 0 {
                        for w in 0..width {
                            sums[grp * width + w] /= c as f64;
                        }
                    }
                }
                let mut fitted = vec![0.0; self.rows * width];
                for r in 0..self.rows {
                    let grp = row_group[r];
                    fitted[r * width..(r + 1) * width]
                        .copy_from_slice(&sums[grp * width..(grp + 1) * width]);
                }
                (sums, fitted)
            }
        };
        let n = self.active_len();
        let rss: f64 = (0..n)
            .map(|i| {
                let r = self.active_row(i);
                (0..width)
                    .map(|w| (targets[r * width + w] - fitted[r * width + w]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        Ok(CondExpEstimate {
            fitted,
            coefficients,
            n_basis: self.n_basis(),
            width,
            residual_second_moment: rss / n.max(1) as f64,
        })
    }
}

fn exponent_tuples(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    if vars == 0 {
        return out;
    }
    for total in 1..=degree as u32 {
        let mut cur = vec![0u32; vars];
        collect_tuples(&mut cur, 0, total, &mut out);
    }
    out
}

fn collect_tuples(cur: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == cur.len() {
        cur[pos] = remaining;
        out.push(cur.to_vec());
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e;
        collect_tuples(cur, pos + 1, remaining - e, out);
    }
    cur[pos] = 0;
}

fn poly_features(
    row: &[f64],
    center: &[f64],
    scale: &[f64],
    kept: &[usize],
    exponents: &[Vec<u32>],
    out: &mut [f64],
) {
    for (o, ex) in out.iter_mut().zip(exponents) {
        let mut v = 1.0;
        for (slot, &e) in ex.iter().enumerate() {
            if e > 0 {
                let c = kept[slot];
                v *= ((row[c] - center[slot]) / scale[slot]).powi(e as i32);
            }
        }
        *o = v;
    }
}

fn build_poly(
    states: &StateMatrix,
    active: Option<&[usize]>,
    degree: usize,
    ridge: f64,
    n: usize,
) -> Result<Fitter> {
    if n == 0 {
        return Err(Error::contract("cannot fit on zero rows"));
    }
    let row_of = |i: usize| active.map_or(i, |a| a[i]);
    let q = states.cols();
    let mut center = Vec::new();
    let mut scale = Vec::new();
    let mut kept = Vec::new();
    for c in 0..q {
        let mean = (0..n).map(|i| states.row(row_of(i))[c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (states.row(row_of(i))[c] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt();
        // constant columns are absorbed by the intercept
        if sd > 1e-12 * mean.abs().max(1.0) {
            center.push(mean);
            scale.push(sd);
            kept.push(c);
        }
    }
    let exponents = exponent_tuples(kept.len(), degree);
    let b = exponents.len();
    if n < b {
        return Err(Error::contract(format!(
            "{n} rows cannot identify {b} basis functions"
        )));
    }
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| {
            let mut acc = vec![0.0; b * b];
            let mut phi = vec![0.0; b];
            for i in ch * CHUNK..((ch + 1) * CHUNK).min(n) {
                poly_features(states.row(row_of(i)), &center, &scale, &kept, &exponents, &mut phi);
                for j in 0..b {
                    for l in 0..=j {
                        acc[j * b + l] += phi[j] * phi[l];
                    }
                }
            }
            acc
        })
        .collect();
    let mut gram = pairwise_sum(parts, b * b);
    for j in 0..b {
        for l in 0..j {
            gram[l * b + j] = gram[j * b + l];
        }
    }
    for j in 1..b {
        gram[j * b + j] *= 1.0 + ridge;
    }
    let chol = cholesky(&gram, b).ok_or_else(|| Error::SingularRegression {
        context: format!("{b} polynomial features on {n} rows, ridge {ridge}"),
    })?;
    Ok(Fitter::Poly {
        center,
        scale,
        kept,
        exponents,
        chol,
    })
}

fn build_indicator(states: &StateMatrix, active: Option<&[usize]>) -> Result<Fitter> {
    if states.cols() != 1 {
        return Err(Error::contract("indicator basis expects one label column"));
    }
    let mut groups = HashMap::new();
    let mut row_group = Vec::with_capacity(states.rows());
    for r in 0..states.rows() {
        let label = states.row(r)[0];
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::contract(format!("atom label {label} is not a non-negative integer")));
        }
        let next = groups.len();
        row_group.push(*groups.entry(label as u64).or_insert(next));
    }
    let mut counts = vec![0usize; groups.len()];
    match active {
        Some(a) => a.iter().for_each(|&r| counts[row_group[r]] += 1),
        None => row_group.iter().for_each(|&g| counts[g] += 1),
    }
    Ok(Fitter::Indicator {
        row_group,
        counts,
    })
}

/// Fixed-shape pairwise tree sum of equally sized partial vectors.
pub(crate) fn pairwise_sum(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Lower Cholesky factor; `None` when a pivot collapses relative to its diagonal.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 1e-12 * a[j * n + j].abs()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, rhs: &[f64], width: usize) -> Vec<f64> {
    let mut x = rhs.to_vec();
    for w in 0..width {
        for i in 0..n {
            let mut s = x[i * width + w];
            for k in 0..i {
                s -= l[i * n + k] * x[k * width + w];
            }
            x[i * width + w] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * width + w];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * width + w];
            }
            x[i * width + w] = s / l[i * n + i];
        }
    }
    x
}

/// Least-squares projection of `targets` on `basis` evaluated at `states`.
pub fn fit_condexp(
    states: &StateMatrix,
    targets: &[f64],
    width: usize,
    basis: &RegressionBasis,
) -> Result<CondExpEstimate> {
    Projector::build(basis, states)?.fit(states, targets, width)
}

/// Exact `E[leaf value | node]` at `level`: the mean over each node's leaves.
pub fn tree_condexp(tree: &TreeModel, level: usize, leaf_values: &[f64], width: usize) -> Result<Vec<f64>> {
    if level > tree.depth() {
        return Err(Error::contract(format!(
            "level {level} exceeds tree depth {}",
            tree.depth()
        )));
    }
    if leaf_values.len() != tree.leaf_count() * width {
        return Err(Error::contract("one value vector per leaf expected"));
    }
    let nodes = tree.nodes_at(level);
    let mut out = vec![0.0; nodes * width];
    for leaf in 0..tree.leaf_count() {
        let node = leaf % nodes;
        for w in 0..width {
            out[node * width + w] += leaf_values[leaf * width + w];
        }
    }
    let per_node = (tree.leaf_count() / nodes) as f64;
    out.iter_mut().for_each(|v| *v /= per_node);
    Ok(out)
}

/// Representation kernel `Z_t ≈ E[ΔM ΔWᵀ | F_t] / dt`, returned `rows × d × m`.
pub fn extract_z_with(
    projector: &Projector,
    states: &StateMatrix,
    dm: &[f64],
    d: usize,
    dw: &[f64],
    m: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::contract("time step must be > 0"));
    }
    let rows = states.rows();
    if dm.len() != rows * d || dw.len() != rows * m {
        return Err(Error::contract("increments must align with the states"));
    }
    let mut targets = vec![0.0; rows * d * m];
    targets.par_chunks_mut(d * m).enumerate().for_each(|(r, t)| {
        for j in 0..d {
            for k in 0..m {
                t[j * m + k] = dm[r * d + j] * dw[r * m + k] / dt;
            }
        }
    });
    Ok(projector.fit(states, &targets, d * m)?.fitted)
}

pub fn extract_z(
    states: &StateMatrix,
    basis: &RegressionBasis,
    dm: &[f64],
    d: usize,
    dw: &[f64],
    m: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::contract("time step must be > 0"));
    }
    extract_z_with(&Projector::build(basis, states)?, states, dm, d, dw, m, dt)
}

/// Per-node states and projectors of one ensemble under one basis.
///
/// Polynomial bases regress on the problem's state features; the indicator
/// basis conditions on the path prefix, labelled by the signs of the
/// increments seen so far (exact on tree ensembles).
#[derive(Clone, Debug)]
pub struct Conditioner {
    basis: RegressionBasis,
    states: Vec<StateMatrix>,
    projectors: Vec<Projector>,
}

impl Conditioner {
    pub fn new(problem: &ProblemSpec, ensemble: &PathEnsemble, basis: &RegressionBasis) -> Result<Self> {
        let n = ensemble.grid().steps();
        let states: Vec<StateMatrix> = match basis.kind {
            BasisKind::Indicator => {
                let m = ensemble.dim();
                if n * m > 53 {
                    return Err(Error::config(
                        "basis",
                        format!("indicator-tree labels need steps·dim ≤ 53, got {}", n * m),
                    ));
                }
                (0..=n)
                    .map(|k| StateMatrix::from_column(prefix_labels(ensemble, k)))
                    .collect::<Result<_>>()?
            }
            BasisKind::Polynomial { .. } => {
                let x = forward_paths(problem, ensemble);
                (0..=n)
                    .into_par_iter()
                    .map(|k| feature_matrix(problem, ensemble, &x, k))
                    .collect::<Result<_>>()?
            }
        };
        let projectors = states
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                Projector::build(basis, s).map_err(|e| match e {
                    Error::SingularRegression { context } => Error::SingularRegression {
                        context: format!("node {k}: {context}"),
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            basis: basis.clone(),
            states,
            projectors,
        })
    }

    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn nodes(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self, k: usize) -> &StateMatrix {
        &self.states[k]
    }

    pub fn projector(&self, k: usize) -> &Projector {
        &self.projectors[k]
    }

    /// `Ê[target | F_k]` for `rows × width` targets.
    pub fn condexp(&self, k: usize, targets: &[f64], width: usize) -> Result<Vec<f64>> {
        Ok(self.projectors[k].fit(&self.states[k], targets, width)?.fitted)
    }

    pub fn extract_z(&self, k: usize, dm: &[f64], d: usize, dw: &[f64], m: usize, dt: f64) -> Result<Vec<f64>> {
        extract_z_with(&self.projectors[k], &self.states[k], dm, d, dw, m, dt)
    }

    /// Two-fold cross-fitted `Ê[target | F_k]`: each half of the paths gets
    /// the fit estimated on the other half, so a path's own noise never
    /// enters its fitted value. The indicator basis is exact on trees and
    /// is fitted in sample.
    pub fn condexp_crossfit(&self, k: usize, targets: &[f64], width: usize) -> Result<Vec<f64>> {
        if matches!(self.basis.kind, BasisKind::Indicator) {
            return self.condexp(k, targets, width);
        }
        let states = &self.states[k];
        let rows = states.rows();
        if rows < 4 {
            return Err(Error::contract("cross-fitting needs at least 4 paths"));
        }
        let half = rows / 2;
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..rows).collect();
        let from_second = Projector::build_on(&self.basis, states, &second)?.fit(states, targets, width)?;
        let from_first = Projector::build_on(&self.basis, states, &first)?.fit(states, targets, width)?;
        let mut out = from_first.fitted;
        out[..half * width].copy_from_slice(&from_second.fitted[..half * width]);
        Ok(out)
    }
}

/// Sign-bit labels of the first `k` increments of each path.
pub fn prefix_labels(ensemble: &PathEnsemble, k: usize) -> Vec<f64> {
    let m = ensemble.dim();
    (0..ensemble.paths())
        .map(|p| {
            let mut label = 0u64;
            for j in 0..k {
                for (c, v) in ensemble.increment(p, j).iter().enumerate() {
                    if *v > 0.0 {
                        label |= 1u64 << (j * m + c);
                    }
                }
            }
            label as f64
        })
        .collect()
}

fn feature_matrix(problem: &ProblemSpec, ensemble: &PathEnsemble, x: &[f64], k: usize) -> Result<StateMatrix> {
    let q = problem.feature_dim();
    let m = ensemble.dim();
    let dx = problem.dim_x();
    let n1 = ensemble.grid().steps() + 1;
    let t = ensemble.grid().node(k);
    let mut data = vec![0.0; ensemble.paths() * q];
    data.par_chunks_mut(q).enumerate().for_each(|(p, out)| {
        let w = &ensemble.path(p)[..(k + 1) * m];
        let xk = &x[(p * n1 + k) * dx..(p * n1 + k + 1) * dx];
        problem.features_into(t, w, xk, out);
    });
    StateMatrix::new(ensemble.paths(), q, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic_basis::{sample_brownian, TimeGrid};

    fn col(v: &[f64]) -> StateMatrix {
        StateMatrix::from_column(v.to_vec()).unwrap()
    }

    #[test]
    fn exponent_enumeration() {
        assert_eq!(exponent_tuples(1, 3).len(), 4);
        assert_eq!(exponent_tuples(2, 3).len(), 10);
        assert_eq!(exponent_tuples(0, 3), vec![Vec::<u32>::new()]);
    }

    #[test]
    fn tree_level_one_recovers_w() {
        let tree = TreeModel::new(2, 1.0).unwrap();
        let leaves: Vec<f64> = (0..4).map(|i| tree.leaf_path(i)[2]).collect();
        let nodes = tree_condexp(&tree, 1, &leaves, 1).unwrap();
        for n in 0..2 {
            assert!((nodes[n] - tree.leaf_path(n)[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn tree_constant_and_tower() {
        let tree = TreeModel::new(6, 1.0).unwrap();
        let c = vec![2.5; 64];
        for level in 0..=6 {
            assert!(tree_condexp(&tree, level, &c, 1).unwrap().iter().all(|v| *v == 2.5));
        }
        let g: Vec<f64> = (0..64).map(|i| tree.leaf_path(i).iter().map(|w| w.sin()).sum()).collect();
        let at4 = tree_condexp(&tree, 4, &g, 1).unwrap();
        let lifted: Vec<f64> = (0..64).map(|i| at4[i % 16]).collect();
        let via = tree_condexp(&tree, 2, &lifted, 1).unwrap();
        let direct = tree_condexp(&tree, 2, &g, 1).unwrap();
        for (a, b) in via.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(tree_condexp(&tree, 7, &g, 1).is_err());
    }

    #[test]
    fn constant_target_on_constant_basis() {
        let s = col(&[0.0; 5]);
        let e = fit_condexp(&s, &[3.0; 5], 1, &RegressionBasis::polynomial(3, 0.0)).unwrap();
        assert_eq!(e.n_basis, 1);
        assert!(e.fitted.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn target_in_span_is_reproduced() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let e = fit_condexp(&col(&x), &x, 1, &RegressionBasis::polynomial(1, 0.0)).unwrap();
        for (f, t) in e.fitted.iter().zip(&x) {
            assert!((f - t).abs() < 1e-12);
        }
        assert!(e.residual_second_moment < 1e-24);
    }

    #[test]
    fn indicator_fit_equals_tree_average() {
        let tree = TreeModel::new(3, 1.0).unwrap();
        let ens = tree.ensemble();
        let wt: Vec<f64> = (0..8).map(|p| ens.value(p, 3)[0]).collect();
        for level in 0..=3 {
            let s = col(&prefix_labels(&ens, level));
            let e = fit_condexp(&s, &wt, 1, &RegressionBasis::indicator()).unwrap();
            let exact = tree_condexp(&tree, level, &wt, 1).unwrap();
            for p in 0..8 {
                assert!((e.fitted[p] - exact[p % (1 << level)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_without_ridge() {
        let s = StateMatrix::new(4, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let err = fit_condexp(&s, &[1.0; 4], 1, &RegressionBasis::polynomial(1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::SingularRegression { .. }));
        assert!(err.to_string().contains("ridge"));
        assert!(fit_condexp(&s, &[1.0; 4], 1, &RegressionBasis::polynomial(1, 1e-6)).is_ok());
    }

    #[test]
    fn z_of_w_is_one() {
        let g = TimeGrid::new(1.0, 8, 1).unwrap();
        let e = sample_brownian(&g, 1, 4096, 3).unwrap();
        let k = 4;
        let states = col(&(0..4096).map(|p| e.value(p, k)[0]).collect::<Vec<_>>());
        let dw: Vec<f64> = (0..4096).map(|p| e.increment(p, k)[0]).collect();
        let z = extract_z(&states, &RegressionBasis::polynomial(1, 0.0), &dw, 1, &dw, 1, g.dt()).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        let scaled: Vec<f64> = dw.iter().map(|v| 2.5 * v).collect();
        let z2 = extract_z(&states, &RegressionBasis::polynomial(1, 0.0), &scaled, 1, &dw, 1, g.dt()).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn z_of_w_squared_on_tree() {
        // M_t = W_t² − t has kernel 2W_t
        let tree = TreeModel::new(5, 1.0).unwrap();
        let ens = tree.ensemble();
        let dt = tree.dt();
        for k in 0..5 {
            let t0 = k as f64 * dt;
            let dm: Vec<f64> = (0..32)
                .map(|p| {
                    let (a, b) = (ens.value(p, k)[0], ens.value(p, k + 1)[0]);
                    (b * b - (t0 + dt)) - (a * a - t0)
                })
                .collect();
            let dw: Vec<f64> = (0..32).map(|p| ens.increment(p, k)[0]).collect();
            let s = col(&prefix_labels(&ens, k));
            let z = extract_z(&s, &RegressionBasis::indicator(), &dm, 1, &dw, 1, dt).unwrap();
            for p in 0..32 {
                assert!((z[p] - 2.0 * ens.value(p, k)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_rejects_nonpositive_dt() {
        let s = col(&[0.0, 1.0]);
        let err = extract_z(&s, &RegressionBasis::polynomial(1, 0.0), &[0.0; 2], 1, &[0.0; 2], 1, 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn basis_names() {
        assert_eq!(RegressionBasis::from_name("poly3", 1e-8).unwrap().kind, BasisKind::Polynomial { degree: 3 });
        assert_eq!(RegressionBasis::from_name("indicator-tree", 0.0).unwrap().kind, BasisKind::Indicator);
        assert!(RegressionBasis::from_name("poly9", 0.0).is_err());
        assert!(RegressionBasis::from_name("poly1", -1.0).is_err());
    }

    #[test]
    fn cross_fit_predicts_unseen_rows() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v).collect();
        let even: Vec<usize> = (0..40).step_by(2).collect();
        let pr = Projector::build_on(&RegressionBasis::polynomial(1, 0.0), &col(&x), &even).unwrap();
        let e = pr.fit(&col(&x), &y, 1).unwrap();
        for i in 0..40 {
            assert!((e.fitted[i] - y[i]).abs() < 1e-10);
        }
    }
}
