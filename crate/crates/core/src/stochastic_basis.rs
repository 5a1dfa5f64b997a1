//! Time grids, seeded Brownian path ensembles and the Bernoulli tree.
//!
//! The tree is a finite filtered probability space whose increments are
//! `±√dt` with probability one half each. Enumerating its `2^depth` leaves as
//! an equally weighted ensemble turns every sample mean into an exact
//! expectation, which is what the tree-exact conditional-expectation engine
//! relies on.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENSEMBLE_MAGIC: &[u8; 9] = b"BSDE-ENS1";
pub const MAX_TREE_DEPTH: usize = 24;

/// Uniform grid on `[0, T]` with a delay of `delay_steps` grid steps.
///
/// The delay `h = D·dt` is the discrete stand-in for the control lag of the
/// scheme; backward blocks have boundaries at `N, N-D, N-2D, ...` and a
/// possibly shorter first block ending at index 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    delay_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize, delay_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("horizon", "horizon must be finite and > 0"));
        }
        if steps == 0 {
            return Err(Error::config("steps", "steps must be ≥ 1"));
        }
        if delay_steps == 0 || delay_steps > steps {
            return Err(Error::config(
                "delay",
                format!("delay steps must lie in 1..={steps}, got {delay_steps}"),
            ));
        }
        Ok(Self {
            horizon,
            steps,
            delay_steps,
        })
    }

    /// Same nodes, different delay.
    pub fn with_delay(&self, delay_steps: usize) -> Result<Self> {
        Self::new(self.horizon, self.steps, delay_steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Delay length `h = D·dt`.
    pub fn delay(&self) -> f64 {
        self.delay_steps as f64 * self.dt()
    }

    pub fn node(&self, k: usize) -> f64 {
        assert!(k <= self.steps, "node index {k} beyond {}", self.steps);
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Block boundaries in backward order: `N, N-D, ..., 0`.
    pub fn block_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.steps / self.delay_steps + 2);
        let mut b = self.steps;
        out.push(b);
        while b > 0 {
            b = b.saturating_sub(self.delay_steps);
            out.push(b);
        }
        out
    }

    /// Half-open step ranges `[a, b)` of each block, latest block first.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        self.block_boundaries()
            .windows(2)
            .map(|w| w[1]..w[0])
            .collect()
    }
}

/// How the random numbers of an ensemble were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamPolicy {
    /// ChaCha8 seeded with the ensemble seed, stream number = path index.
    ChaChaPerPath,
    /// Deterministic enumeration of all Bernoulli-tree leaves.
    TreeEnumeration,
}

/// Discretized Brownian paths together with their increments.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    values: Vec<f64>,
    increments: Vec<f64>,
    seed: u64,
    stream: StreamPolicy,
}

impl PathEnsemble {
    fn from_values(
        grid: TimeGrid,
        dim: usize,
        paths: usize,
        values: Vec<f64>,
        seed: u64,
        stream: StreamPolicy,
    ) -> Self {
        let n = grid.steps();
        debug_assert_eq!(values.len(), paths * (n + 1) * dim);
        let mut increments = vec![0.0; paths * n * dim];
        increments
            .par_chunks_mut(n * dim)
            .zip(values.par_chunks(((n + 1) * dim).max(1)))
            .for_each(|(inc, v)| {
                for k in 0..n {
                    for c in 0..dim {
                        inc[k * dim + c] = v[(k + 1) * dim + c] - v[k * dim + c];
                    }
                }
            });
        Self {
            grid,
            dim,
            paths,
            values,
            increments,
            seed,
            stream,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_policy(&self) -> StreamPolicy {
        self.stream
    }

    /// `W` at node `k` of path `p`.
    pub fn value(&self, p: usize, k: usize) -> &[f64] {
        let n1 = self.grid.steps() + 1;
        let o = (p * n1 + k) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// All nodes of path `p`, row-major `(N+1) × m`.
    pub fn path(&self, p: usize) -> &[f64] {
        let len = (self.grid.steps() + 1) * self.dim;
        &self.values[p * len..(p + 1) * len]
    }

    /// `W_{k+1} - W_k` on path `p`.
    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let n = self.grid.steps();
        let o = (p * n + k) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Writes the ensemble header followed by `values` as little-endian f64.
    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let header = BinaryHeader {
            horizon: self.grid.horizon(),
            steps: self.grid.steps() as u64,
            delay: self.grid.delay_steps() as u64,
            dim: self.dim as u64,
            paths: self.paths as u64,
            seed: self.seed,
        };
        write_binary_block(out, &header, &[&self.values])
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Self> {
        let (header, mut reader) = BinaryHeader::read(input)?;
        let grid = TimeGrid::new(header.horizon, header.steps as usize, header.delay as usize)
            .map_err(|e| Error::Format(format!("bad grid in header: {e}")))?;
        let dim = header.dim as usize;
        let paths = header.paths as usize;
        let count = paths * (grid.steps() + 1) * dim;
        let values = read_f64s(&mut reader, count)?;
        Ok(Self::from_values(
            grid,
            dim,
            paths,
            values,
            header.seed,
            StreamPolicy::ChaChaPerPath,
        ))
    }
}

/// Draws `paths` Brownian paths of dimension `dim` on `grid`.
///
/// Path `p` is generated from its own ChaCha8 stream, so it does not depend
/// on how many paths are requested or on the thread count.
pub fn sample_brownian(grid: &TimeGrid, dim: usize, paths: usize, seed: u64) -> Result<PathEnsemble> {
    if dim == 0 {
        return Err(Error::config("dim", "Brownian dimension must be ≥ 1"));
    }
    if paths == 0 {
        return Err(Error::config("paths", "path count must be ≥ 1"));
    }
    let n = grid.steps();
    let sd = grid.dt().sqrt();
    let row = (n + 1) * dim;
    let mut values = vec![0.0; paths * row];
    values.par_chunks_mut(row).enumerate().for_each(|(p, v)| {
        let mut rng = path_rng(seed, p as u64);
        for k in 0..n {
            for c in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                v[(k + 1) * dim + c] = v[k * dim + c] + sd * z;
            }
        }
    });
    Ok(PathEnsemble::from_values(
        *grid,
        dim,
        paths,
        values,
        seed,
        StreamPolicy::ChaChaPerPath,
    ))
}

/// Substream `stream` of the ensemble seed.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Binary symmetric random walk with `depth` steps on `[0, T]`.
///
/// Leaf `i` takes increment `+√dt` at step `j` when bit `j` of `i` is set,
/// so the node reached after `l` steps is `i mod 2^l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeModel {
    depth: usize,
    horizon: f64,
}

impl TreeModel {
    pub fn new(depth: usize, horizon: f64) -> Result<Self> {
        if depth == 0 || depth > MAX_TREE_DEPTH {
            return Err(Error::config(
                "depth",
                format!("tree depth must lie in 1..={MAX_TREE_DEPTH}, got {depth}"),
            ));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("horizon", "horizon must be finite and > 0"));
        }
        Ok(Self { depth, horizon })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.depth as f64
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    /// Probability of a single node at `level`.
    pub fn node_weight(&self, level: usize) -> f64 {
        (0.5f64).powi(level as i32)
    }

    pub fn increment(&self, leaf: usize, step: usize) -> f64 {
        let s = self.dt().sqrt();
        if (leaf >> step) & 1 == 1 {
            s
        } else {
            -s
        }
    }

    /// `W_0, ..., W_depth` along leaf `leaf`.
    pub fn leaf_path(&self, leaf: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.depth + 1);
        w.push(0.0);
        for j in 0..self.depth {
            let next = w[j] + self.increment(leaf, j);
            w.push(next);
        }
        w
    }

    /// Exact expectation of a path functional: the weighted sum over leaves.
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, g: F) -> f64 {
        let w = self.node_weight(self.depth);
        (0..self.leaf_count())
            .map(|i| g(&self.leaf_path(i)))
            .sum::<f64>()
            * w
    }

    /// All leaves as an equally weighted one-dimensional ensemble.
    pub fn ensemble(&self) -> PathEnsemble {
        let grid = TimeGrid::new(self.horizon, self.depth, 1).expect("tree grid is valid");
        let values: Vec<f64> = (0..self.leaf_count())
            .flat_map(|i| self.leaf_path(i))
            .collect();
        PathEnsemble::from_values(
            grid,
            1,
            self.leaf_count(),
            values,
            0,
            StreamPolicy::TreeEnumeration,
        )
    }
}

/// Fixed header shared by ensemble and scheme-output binaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryHeader {
    pub horizon: f64,
    pub steps: u64,
    pub delay: u64,
    pub dim: u64,
    pub paths: u64,
    pub seed: u64,
}

impl BinaryHeader {
    pub const LEN: usize = 9 + 6 * 8;

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(ENSEMBLE_MAGIC)?;
        out.write_all(&self.horizon.to_le_bytes())?;
        for v in [self.steps, self.delay, self.dim, self.paths, self.seed] {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<(Self, R)> {
        let mut magic = [0u8; 9];
        input.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format("missing BSDE-ENS1 magic".into()));
        }
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let horizon = f64::from_le_bytes(buf);
        let mut ints = [0u64; 5];
        for v in ints.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = u64::from_le_bytes(buf);
        }
        Ok((
            Self {
                horizon,
                steps: ints[0],
                delay: ints[1],
                dim: ints[2],
                paths: ints[3],
                seed: ints[4],
            },
            input,
        ))
    }
}

pub(crate) fn write_binary_block<W: Write>(
    out: W,
    header: &BinaryHeader,
    arrays: &[&[f64]],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    header.write(&mut out)?;
    for a in arrays {
        for v in a.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
