//! Discretization: time grids aligned with cost jumps, a binary scenario
//! tree, and Monte Carlo path sampling of the state.
//!
//! Every cost breakpoint gets two adjacent layers, a pre-jump layer seeing
//! the left-limit costs and a post-jump layer seeing the right-continuous
//! values, joined by a zero-length step. Solvers read jump corrections off
//! that pair directly instead of reconstructing left limits numerically.
//!
//! The tree increments are two-point (`+/- sqrt(dt)`, probability one half
//! each), which matches the first two moments of the driving noise. When
//! the volatility function is identically zero the state is deterministic,
//! so layers keep a single node and the depth cap does not bind; only
//! branching steps count against it.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::problem::SwitchingProblem;
use crate::{Error, Result};

/// Kind of a grid layer. `PreJump` layers have zero-length steps into their
/// `PostJump` twin at the same clock time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Plain,
    PreJump,
    PostJump,
    Terminal,
}

/// Time grid: layer times plus jump bookkeeping.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    times: Vec<f64>,
    kinds: Vec<LayerKind>,
}

impl TimeGrid {
    /// Uniform-within-interval grid that places every breakpoint in
    /// `(0, horizon)` as a pre/post layer pair; steps never exceed `max_dt`.
    pub fn build(horizon: f64, breakpoints: &[f64], max_dt: f64) -> Result<TimeGrid> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if !(max_dt > 0.0) {
            return Err(Error::Domain(format!("max step must be positive, got {max_dt}")));
        }
        let mut anchors: Vec<f64> = vec![0.0];
        for &b in breakpoints {
            if !(b > 0.0 && b <= horizon) {
                return Err(Error::Domain(format!(
                    "breakpoint {b} outside (0, {horizon}]"
                )));
            }
            if b < horizon {
                anchors.push(b);
            }
        }
        anchors.push(horizon);
        anchors.dedup();
        if anchors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("breakpoints must be strictly increasing".into()));
        }

        let mut times = vec![0.0];
        let mut kinds = vec![LayerKind::Plain];
        for w in anchors.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let len = hi - lo;
            let n = (len / max_dt).ceil().max(1.0) as usize;
            for j in 1..=n {
                let t = if j == n { hi } else { lo + len * j as f64 / n as f64 };
                times.push(t);
                kinds.push(LayerKind::Plain);
            }
            // interior anchor: the layer just pushed is the pre-jump one
            if hi < horizon {
                *kinds.last_mut().unwrap() = LayerKind::PreJump;
                times.push(hi);
                kinds.push(LayerKind::PostJump);
            }
        }
        *kinds.last_mut().unwrap() = LayerKind::Terminal;
        Ok(TimeGrid { times, kinds })
    }

    pub fn for_problem(p: &SwitchingProblem, max_dt: f64) -> Result<TimeGrid> {
        TimeGrid::build(p.horizon, &p.cost_breakpoints(), max_dt)
    }

    pub fn n_layers(&self) -> usize {
        self.times.len()
    }

    pub fn time(&self, m: usize) -> f64 {
        self.times[m]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kind(&self, m: usize) -> LayerKind {
        self.kinds[m]
    }

    /// Step length out of layer `m`; zero exactly on pre-jump layers.
    pub fn dt(&self, m: usize) -> f64 {
        self.times[m + 1] - self.times[m]
    }

    pub fn is_pre_jump(&self, m: usize) -> bool {
        self.kinds[m] == LayerKind::PreJump
    }

    /// Indices of (pre, post) layer pairs, in time order.
    pub fn jump_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers())
            .filter(|&m| self.kinds[m] == LayerKind::PreJump)
            .map(|m| (m, m + 1))
            .collect()
    }

    /// Number of branching steps (positive-length steps), which is what the
    /// tree depth cap counts.
    pub fn n_branching_steps(&self) -> usize {
        (0..self.n_layers() - 1).filter(|&m| self.dt(m) > 0.0).count()
    }
}

/// Hard cap on branching depth; beyond this the tree would not fit in
/// memory (nodes double on every branching step).
pub const MAX_BRANCH_DEPTH: usize = 22;

/// Non-recombining binary tree over a [`TimeGrid`].
///
/// Layer `m` holds `states[m]`; node `j` of a branching layer has children
/// `2j` (down) and `2j + 1` (up) in layer `m + 1`, each with probability one
/// half. Non-branching steps (zero volatility, or zero-length jump steps)
/// keep node `j -> j`.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub grid: TimeGrid,
    states: Vec<Vec<f64>>,
    branches: Vec<bool>,
}

impl Lattice {
    /// Euler states along the grid: `x' = x + b(x) dt + sigma(x) * (+/- sqrt(dt))`.
    pub fn build(p: &SwitchingProblem, grid: TimeGrid) -> Result<Lattice> {
        let sigma_zero = p.sigma.is_zero();
        let mut branches = Vec::with_capacity(grid.n_layers() - 1);
        let mut depth = 0usize;
        for m in 0..grid.n_layers() - 1 {
            let branch = grid.dt(m) > 0.0 && !sigma_zero;
            if branch {
                depth += 1;
            }
            branches.push(branch);
        }
        if depth > MAX_BRANCH_DEPTH {
            return Err(Error::Size(format!(
                "{depth} branching steps exceed the cap of {MAX_BRANCH_DEPTH}; widen the step or drop volatility"
            )));
        }
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(grid.n_layers());
        states.push(vec![p.x0]);
        for m in 0..grid.n_layers() - 1 {
            let dt = grid.dt(m);
            let prev = &states[m];
            let next = if branches[m] {
                let sq = dt.sqrt();
                let mut out = Vec::with_capacity(prev.len() * 2);
                for &x in prev {
                    let drifted = x + p.drift.eval(x) * dt;
                    let vol = p.sigma.eval(x) * sq;
                    out.push(drifted - vol);
                    out.push(drifted + vol);
                }
                out
            } else {
                prev.iter().map(|&x| x + p.drift.eval(x) * dt).collect()
            };
            states.push(next);
        }
        Ok(Lattice { grid, states, branches })
    }

    pub fn n_layers(&self) -> usize {
        self.grid.n_layers()
    }

    pub fn layer(&self, m: usize) -> &[f64] {
        &self.states[m]
    }

    pub fn state(&self, m: usize, j: usize) -> f64 {
        self.states[m][j]
    }

    /// Whether the step out of layer `m` branches.
    pub fn branches(&self, m: usize) -> bool {
        self.branches[m]
    }

    /// Children of node `(m, j)` in layer `m + 1`: `(down, up)` when
    /// branching, a single index otherwise.
    pub fn children(&self, m: usize, j: usize) -> (usize, Option<usize>) {
        if self.branches[m] {
            (2 * j, Some(2 * j + 1))
        } else {
            (j, None)
        }
    }

    /// Expectation of per-node values one layer ahead, seen from `(m, j)`.
    pub fn step_expectation(&self, m: usize, j: usize, next: &[f64]) -> f64 {
        match self.children(m, j) {
            (d, Some(u)) => 0.5 * (next[d] + next[u]),
            (c, None) => next[c],
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }

    /// Mean and variance of the terminal layer under the tree measure.
    pub fn terminal_moments(&self) -> (f64, f64) {
        let last = self.states.last().unwrap();
        let n = last.len() as f64;
        let mean = last.iter().sum::<f64>() / n;
        let var = last.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Monte Carlo paths over the same grid, one row per path.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub grid: TimeGrid,
    pub n_paths: usize,
    /// Row-major: `values[path * n_layers + layer]`.
    pub values: Vec<f64>,
    pub seed: u64,
}

impl PathSet {
    pub fn state(&self, path: usize, layer: usize) -> f64 {
        self.values[path * self.grid.n_layers() + layer]
    }
}

/// Independent Euler paths; path `i` draws from its own counter-derived
/// stream, so the set is reproducible and order-independent.
pub fn simulate_paths(
    p: &SwitchingProblem,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    if n_paths == 0 {
        return Err(Error::Domain("path count must be positive".into()));
    }
    let n_layers = grid.n_layers();
    if n_paths.saturating_mul(n_layers) > 200_000_000 {
        return Err(Error::Size(format!(
            "{n_paths} paths x {n_layers} layers exceeds the in-memory budget"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut row = Vec::with_capacity(n_layers);
            let mut x = p.x0;
            row.push(x);
            for m in 0..n_layers - 1 {
                let dt = grid.dt(m);
                if dt > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    x += p.drift.eval(x) * dt + p.sigma.eval(x) * dt.sqrt() * n;
                }
                row.push(x);
            }
            row
        })
        .collect();
    let mut values = Vec::with_capacity(n_paths * n_layers);
    for row in rows {
        values.extend_from_slice(&row);
    }
    Ok(PathSet { grid: grid.clone(), n_paths, values, seed })
}
