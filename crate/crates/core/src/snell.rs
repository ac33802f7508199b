//! Backward dynamic programming for the switching value system on a tree.
//!
//! `solve_full` computes, per mode, the value of optimally switching under
//! the full budget; `solve_capped` computes the stagewise values with at
//! most `n` switches, whose limit is the full solution. Both treat a
//! pre-jump layer as the left limit of the value process: continuation is a
//! plain copy across the zero-length step and the switching obstacle is
//! evaluated at the left-limit costs, so the value's jump at a cost
//! breakpoint is exactly `-(obstacle_pre - value_post)^+` by construction.
//! `jump_report` extracts those corrections and re-checks the identity.
//!
//! Same-instant switch chains are admissible. In the full solve a layer is
//! closed by repeated improvement sweeps; the strictly positive cost floor
//! makes any chain revisiting a mode unprofitable, so sweeps stabilize
//! after at most one pass per mode.

use crate::lattice::{Lattice, TimeGrid};
use crate::problem::SwitchingProblem;
use crate::{Error, Result};

/// Per-mode value (and volatility proxy) surfaces over a lattice.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: TimeGrid,
    pub q: usize,
    /// `values[layer][mode][node]`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Same shape; increment regression over the next step, zero where the
    /// step carries no noise, carried across zero-length steps, zero at the
    /// terminal layer.
    pub z: Vec<Vec<Vec<f64>>>,
}

impl ValueField {
    pub fn root(&self, mode: usize) -> f64 {
        self.values[0][mode][0]
    }

    pub fn roots(&self) -> Vec<f64> {
        (0..self.q).map(|i| self.root(i)).collect()
    }

    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    /// Largest absolute value difference over all layers, modes, nodes.
    pub fn max_abs_diff(&self, other: &ValueField) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            for (ai, bi) in a.iter().zip(b) {
                for (x, y) in ai.iter().zip(bi) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    pub fn bitwise_eq(&self, other: &ValueField) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .flatten()
                .flatten()
                .map(|v| v.to_bits())
                .eq(other.values.iter().flatten().flatten().map(|v| v.to_bits()))
    }

    /// Multiplies values and volatility proxies by a layerwise time factor;
    /// used to undo exponential rescalings.
    pub fn rescaled_by_time(&self, factor: impl Fn(f64) -> f64) -> ValueField {
        let mut out = self.clone();
        for m in 0..out.values.len() {
            let c = factor(out.grid.time(m));
            for i in 0..out.q {
                for v in out.values[m][i].iter_mut() {
                    *v *= c;
                }
                for v in out.z[m][i].iter_mut() {
                    *v *= c;
                }
            }
        }
        out
    }
}

const NODE_BUDGET: usize = 250_000_000;

pub(crate) fn check_shape(p: &SwitchingProblem, lat: &Lattice) -> Result<()> {
    let pairs = lat.grid.jump_pairs();
    let mut covered: Vec<f64> = pairs.iter().map(|&(m, _)| lat.grid.time(m)).collect();
    covered.dedup();
    for b in p.cost_breakpoints() {
        if b < p.horizon && !covered.iter().any(|&t| t == b) {
            return Err(Error::Domain(format!(
                "cost breakpoint {b} has no pre/post layer pair in the grid"
            )));
        }
    }
    if lat.total_nodes().saturating_mul(p.q) > NODE_BUDGET {
        return Err(Error::Size(format!(
            "{} nodes x {} modes exceeds the value-storage budget",
            lat.total_nodes(),
            p.q
        )));
    }
    Ok(())
}

fn require_rates(p: &SwitchingProblem) -> Result<()> {
    if p.drivers.is_some() {
        return Err(Error::Domain(
            "instance declares coupled drivers; use the fixed-point solver".into(),
        ));
    }
    Ok(())
}

/// Switching obstacle for mode `i` at one node: best competing value minus
/// the cost of reaching it. `left` selects pre-jump cost values.
pub(crate) fn obstacle(
    p: &SwitchingProblem,
    vals: &[Vec<f64>],
    i: usize,
    j: usize,
    t: f64,
    x: f64,
    left: bool,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for k in 0..p.q {
        if k == i {
            continue;
        }
        let g = if left {
            p.cost(i, k).left_value(t, x)?
        } else {
            p.cost(i, k).eval(t, x)?
        };
        let cand = vals[k][j] - g;
        if cand > best {
            best = cand;
        }
    }
    Ok(best)
}

/// Closes one layer under same-instant switching: repeated sweeps of
/// `y_i = max(cont_i, max_k(y_k - g_ik))` until bitwise stable.
pub(crate) fn close_layer(
    p: &SwitchingProblem,
    cont: &[Vec<f64>],
    t: f64,
    xs: &[f64],
    left: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut vals = cont.to_vec();
    if p.q == 1 {
        return Ok(vals);
    }
    let max_sweeps = 4 * p.q + 8;
    for _ in 0..max_sweeps {
        let mut changed = false;
        let snapshot = vals.clone();
        for i in 0..p.q {
            for (j, &x) in xs.iter().enumerate() {
                let l = obstacle(p, &snapshot, i, j, t, x, left)?;
                let y = cont[i][j].max(l);
                if y.to_bits() != vals[i][j].to_bits() {
                    vals[i][j] = y;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(vals);
        }
    }
    Err(Error::Numerical(
        "same-instant switching closure failed to stabilize".into(),
    ))
}

pub(crate) fn z_for_step(
    lat: &Lattice,
    m: usize,
    next_vals: &[Vec<f64>],
    next_z: &[Vec<f64>],
    q: usize,
) -> Vec<Vec<f64>> {
    let n = lat.layer(m).len();
    let dt = lat.grid.dt(m);
    let mut z = vec![vec![0.0; n]; q];
    for i in 0..q {
        for j in 0..n {
            if lat.branches(m) {
                let (d, u) = (2 * j, 2 * j + 1);
                z[i][j] = (next_vals[i][u] - next_vals[i][d]) / (2.0 * dt.sqrt());
            } else if dt == 0.0 {
                z[i][j] = next_z[i][j];
            }
        }
    }
    z
}

/// Optimal switching values under an unlimited switch budget.
pub fn solve_full(p: &SwitchingProblem, lat: &Lattice) -> Result<ValueField> {
    require_rates(p)?;
    check_shape(p, lat)?;
    let q = p.q;
    let last = lat.n_layers() - 1;
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); lat.n_layers()];
    let mut zs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); lat.n_layers()];

    values[last] = (0..q)
        .map(|i| lat.layer(last).iter().map(|&x| p.terminal[i].eval(x)).collect())
        .collect();
    zs[last] = vec![vec![0.0; lat.layer(last).len()]; q];

    for m in (0..last).rev() {
        let dt = lat.grid.dt(m);
        let t = lat.grid.time(m);
        let xs = lat.layer(m);
        let mut cont = vec![vec![0.0; xs.len()]; q];
        for i in 0..q {
            for (j, &x) in xs.iter().enumerate() {
                let e = lat.step_expectation(m, j, &values[m + 1][i]);
                cont[i][j] = if dt > 0.0 { p.psi[i].eval(x) * dt + e } else { e };
            }
        }
        let left = lat.grid.is_pre_jump(m);
        values[m] = close_layer(p, &cont, t, xs, left)?;
        zs[m] = z_for_step(lat, m, &values[m + 1], &zs[m + 1], q);
    }

    Ok(ValueField { grid: lat.grid.clone(), q, values, z: zs })
}

/// Values with at most `n_max` switches, one field per stage `0..=n_max`.
///
/// Stage `0` never switches; stage `n` takes its obstacle from stage
/// `n - 1` at the same layer, so chains of same-instant switches spend one
/// stage per leg. Stages are nondecreasing and reach the full solution once
/// the budget exceeds what any optimal strategy uses.
pub fn solve_capped_stages(
    p: &SwitchingProblem,
    lat: &Lattice,
    n_max: usize,
) -> Result<Vec<ValueField>> {
    require_rates(p)?;
    check_shape(p, lat)?;
    let q = p.q;
    let last = lat.n_layers() - 1;
    let mut stages: Vec<ValueField> = Vec::with_capacity(n_max + 1);

    for n in 0..=n_max {
        let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); lat.n_layers()];
        let mut zs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); lat.n_layers()];
        values[last] = (0..q)
            .map(|i| lat.layer(last).iter().map(|&x| p.terminal[i].eval(x)).collect())
            .collect();
        zs[last] = vec![vec![0.0; lat.layer(last).len()]; q];
        for m in (0..last).rev() {
            let dt = lat.grid.dt(m);
            let t = lat.grid.time(m);
            let xs = lat.layer(m);
            let left = lat.grid.is_pre_jump(m);
            let mut vals = vec![vec![0.0; xs.len()]; q];
            for i in 0..q {
                for (j, &x) in xs.iter().enumerate() {
                    let e = lat.step_expectation(m, j, &values[m + 1][i]);
                    let cont = if dt > 0.0 { p.psi[i].eval(x) * dt + e } else { e };
                    vals[i][j] = if n == 0 {
                        cont
                    } else {
                        let l = obstacle(p, &stages[n - 1].values[m], i, j, t, x, left)?;
                        cont.max(l)
                    };
                }
            }
            values[m] = vals;
            zs[m] = z_for_step(lat, m, &values[m + 1], &zs[m + 1], q);
        }
        stages.push(ValueField { grid: lat.grid.clone(), q, values, z: zs });
    }
    Ok(stages)
}

/// Final stage of [`solve_capped_stages`].
pub fn solve_capped(p: &SwitchingProblem, lat: &Lattice, n_max: usize) -> Result<ValueField> {
    Ok(solve_capped_stages(p, lat, n_max)?.pop().unwrap())
}

/// One value-jump record at a cost breakpoint.
#[derive(Debug, Clone)]
pub struct JumpRecord {
    pub t: f64,
    pub pre_layer: usize,
    pub post_layer: usize,
    pub mode: usize,
    pub node: usize,
    pub x: f64,
    pub y_pre: f64,
    pub y_post: f64,
    pub delta: f64,
    /// Best competing value minus left-limit cost, seen just before the jump.
    pub obstacle_pre: f64,
    /// `delta + (obstacle_pre - y_post)^+`; zero when the predictable-jump
    /// identity holds.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct JumpReport {
    /// Entries with a nonzero value jump.
    pub records: Vec<JumpRecord>,
    /// Number of (pair, mode, node) combinations examined.
    pub checked: usize,
    /// Worst identity residual over everything examined.
    pub max_residual: f64,
}

/// Scans every pre/post layer pair and checks that each value jump equals
/// the negative part the pre-jump obstacle forces.
pub fn jump_report(p: &SwitchingProblem, lat: &Lattice, field: &ValueField) -> Result<JumpReport> {
    let mut records = Vec::new();
    let mut checked = 0usize;
    let mut max_residual: f64 = 0.0;
    for (pre, post) in field.grid.jump_pairs() {
        let t = field.grid.time(pre);
        for i in 0..field.q {
            for (j, &x) in lat.layer(pre).iter().enumerate() {
                let y_pre = field.values[pre][i][j];
                let y_post = field.values[post][i][j];
                let l_pre = obstacle(p, &field.values[pre], i, j, t, x, true)?;
                let delta = y_post - y_pre;
                let residual = delta + (l_pre - y_post).max(0.0);
                checked += 1;
                max_residual = max_residual.max(residual.abs());
                if delta != 0.0 {
                    records.push(JumpRecord {
                        t,
                        pre_layer: pre,
                        post_layer: post,
                        mode: i,
                        node: j,
                        x,
                        y_pre,
                        y_post,
                        delta,
                        obstacle_pre: l_pre,
                        residual,
                    });
                }
            }
        }
    }
    Ok(JumpReport { records, checked, max_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cadlag::StepFunction;
    use crate::problem::{Cost, SpaceFn};

    fn det_lattice(p: &SwitchingProblem, max_dt: f64) -> Lattice {
        let grid = TimeGrid::for_problem(p, max_dt).unwrap();
        Lattice::build(p, grid).unwrap()
    }

    fn rates_problem(psi: [f64; 2], g: Cost) -> SwitchingProblem {
        SwitchingProblem::builder(2, 1.0)
            .gamma(g.step.min_value().min(10.0).max(1e-9))
            .psi(vec![SpaceFn::constant(psi[0]), SpaceFn::constant(psi[1])])
            .uniform_cost(g)
            .build()
            .unwrap()
    }

    // Costs too high to ever pay: each mode just integrates its own rate.
    #[test]
    fn prohibitive_costs_mean_never_switching() {
        let p = rates_problem([1.0, 0.0], Cost::constant(1.0, 10.0).unwrap());
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        assert!((f.root(0) - 1.0).abs() <= 1e-12);
        assert!(f.root(1).abs() <= 1e-12);
    }

    // Cheap switch into a better rate: switch immediately.
    #[test]
    fn cheap_switch_is_taken_at_time_zero() {
        let p = rates_problem([0.0, 2.0], Cost::constant(1.0, 0.5).unwrap());
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        assert!((f.root(0) - 1.5).abs() <= 1e-12);
        assert!((f.root(1) - 2.0).abs() <= 1e-12);
    }

    fn step_cost_problem(v0: f64, v1: f64) -> SwitchingProblem {
        // g_12 steps from v0 to v1 at t = 0.5; return costs prohibitive
        let step = StepFunction::new(1.0, v0, &[(0.5, v1)]).unwrap();
        SwitchingProblem::builder(2, 1.0)
            .gamma(v0.min(v1))
            .psi(vec![SpaceFn::zero(), SpaceFn::constant(1.0)])
            .cost(0, 1, Cost::from_step(step))
            .cost(1, 0, Cost::constant(1.0, 10.0).unwrap())
            .build()
            .unwrap()
    }

    // Cost drops at 0.5: wait for the drop, pay 0.2, collect the remaining
    // half unit of rate.
    #[test]
    fn waiting_for_a_cost_drop() {
        let p = step_cost_problem(1.0, 0.2);
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        assert!((f.root(0) - 0.3).abs() <= 1e-12, "root {}", f.root(0));
        // the drop arrives, drops create no value jump downward
        let report = jump_report(&p, &lat, &f).unwrap();
        assert_eq!(report.records.len(), 0);
        assert!(report.checked > 0);
        assert!(report.max_residual <= 1e-15);
    }

    // Cost rises at 0.5: the option dies; the value in mode 1 jumps down by
    // exactly the reflected amount.
    #[test]
    fn value_jump_at_a_cost_rise() {
        let p = step_cost_problem(0.2, 1.0);
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        assert!((f.root(0) - 0.8).abs() <= 1e-12, "root {}", f.root(0));
        let report = jump_report(&p, &lat, &f).unwrap();
        assert!(report.max_residual <= 1e-15);
        let recs: Vec<_> = report.records.iter().filter(|r| r.mode == 0).collect();
        assert_eq!(recs.len(), 1);
        let r = recs[0];
        assert_eq!(r.t, 0.5);
        assert!((r.y_pre - 0.3).abs() <= 1e-12);
        assert!(r.y_post.abs() <= 1e-12);
        assert!((r.delta + 0.3).abs() <= 1e-12);
        assert!((r.obstacle_pre - 0.3).abs() <= 1e-12);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn continuous_costs_produce_an_empty_jump_report() {
        let p = rates_problem([0.0, 2.0], Cost::constant(1.0, 0.5).unwrap());
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        let report = jump_report(&p, &lat, &f).unwrap();
        assert_eq!(report.checked, 0);
        assert!(report.records.is_empty());
    }

    #[test]
    fn capped_stages_increase_and_stabilize_to_full() {
        let p = step_cost_problem(1.0, 0.2);
        let lat = det_lattice(&p, 0.25);
        let full = solve_full(&p, &lat).unwrap();
        let n_big = p.q * (lat.n_layers() - 1);
        let stages = solve_capped_stages(&p, &lat, n_big).unwrap();

        // no switches: mode 1 earns nothing
        assert!(stages[0].root(0).abs() <= 1e-15);
        // one switch suffices here
        assert!((stages[1].root(0) - 0.3).abs() <= 1e-12);

        for w in stages.windows(2) {
            for m in 0..w[0].n_layers() {
                for i in 0..p.q {
                    for (a, b) in w[0].values[m][i].iter().zip(&w[1].values[m][i]) {
                        assert!(a <= b);
                    }
                }
            }
        }
        assert!(stages[n_big].bitwise_eq(&full));
    }

    #[test]
    fn generous_budget_matches_full_bitwise_with_noise() {
        let step = StepFunction::new(1.0, 0.8, &[(0.4, 0.4)]).unwrap();
        let p = SwitchingProblem::builder(2, 1.0)
            .gamma(0.4)
            .psi(vec![SpaceFn::Poly(vec![0.0, 1.0]), SpaceFn::constant(0.5)])
            .terminal(vec![SpaceFn::constant(0.1), SpaceFn::constant(0.1)])
            .uniform_cost(Cost::from_step(step))
            .diffusion(SpaceFn::zero(), SpaceFn::constant(1.0), 0.0)
            .build()
            .unwrap();
        let lat = det_lattice(&p, 0.15);
        let full = solve_full(&p, &lat).unwrap();
        let n_big = p.q * (lat.n_layers() - 1);
        let capped = solve_capped(&p, &lat, n_big).unwrap();
        assert!(capped.bitwise_eq(&full));
    }

    #[test]
    fn three_mode_same_instant_chain_closes() {
        // 1 -> 3 direct costs 3; 1 -> 2 -> 3 costs 0.4 + 0.4; rate only in 3
        let horizon = 1.0;
        let cheap = Cost::constant(horizon, 0.4).unwrap();
        let dear = Cost::constant(horizon, 3.0).unwrap();
        let p = SwitchingProblem::builder(3, horizon)
            .gamma(0.4)
            .psi(vec![SpaceFn::zero(), SpaceFn::zero(), SpaceFn::constant(2.0)])
            .cost(0, 1, cheap.clone())
            .cost(0, 2, dear.clone())
            .cost(1, 0, dear.clone())
            .cost(1, 2, cheap.clone())
            .cost(2, 0, dear.clone())
            .cost(2, 1, dear)
            .build()
            .unwrap();
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        // two-leg chain at t = 0: -0.8 + 2.0
        assert!((f.root(0) - 1.2).abs() <= 1e-12, "root {}", f.root(0));
        // capped: one switch cannot reach mode 3 profitably
        let stages = solve_capped_stages(&p, &lat, 2).unwrap();
        assert!(stages[1].root(0).abs() <= 1e-12);
        assert!((stages[2].root(0) - 1.2).abs() <= 1e-12);
    }

    #[test]
    fn solvers_reject_driver_instances_and_misaligned_grids() {
        let p = rates_problem([0.0, 1.0], Cost::constant(1.0, 0.5).unwrap());
        let mut with_drivers = p.clone();
        with_drivers.drivers = Some(crate::problem::DriverSet {
            f: vec![
                crate::problem::LinearDriver {
                    base: SpaceFn::zero(),
                    base_tscale: 0.0,
                    y_coef: vec![0.0, 0.0],
                    z_coef: 0.0,
                },
                crate::problem::LinearDriver {
                    base: SpaceFn::zero(),
                    base_tscale: 0.0,
                    y_coef: vec![0.0, 0.0],
                    z_coef: 0.0,
                },
            ],
            lipschitz: 0.0,
            monotone: true,
        });
        let lat = det_lattice(&p, 0.25);
        assert!(matches!(solve_full(&with_drivers, &lat), Err(Error::Domain(_))));

        let jumpy = step_cost_problem(1.0, 0.2);
        let plain_grid = TimeGrid::build(1.0, &[], 0.25).unwrap();
        let plain_lat = Lattice::build(&jumpy, plain_grid).unwrap();
        assert!(matches!(solve_full(&jumpy, &plain_lat), Err(Error::Domain(_))));
    }

    // With noise, switching values stay ordered across capped budgets and
    // the volatility proxy vanishes exactly where the tree does not branch.
    #[test]
    fn z_is_zero_without_branching_and_finite_with_it() {
        let p = rates_problem([0.0, 2.0], Cost::constant(1.0, 0.5).unwrap());
        let lat = det_lattice(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        for m in 0..f.n_layers() {
            for i in 0..p.q {
                for &z in &f.z[m][i] {
                    assert_eq!(z, 0.0);
                }
            }
        }

        let noisy = SwitchingProblem::builder(2, 1.0)
            .gamma(0.5)
            .psi(vec![SpaceFn::zero(), SpaceFn::Poly(vec![0.0, 1.0])])
            .uniform_cost(Cost::constant(1.0, 0.5).unwrap())
            .diffusion(SpaceFn::zero(), SpaceFn::constant(1.0), 0.0)
            .build()
            .unwrap();
        let lat = det_lattice(&noisy, 0.5);
        let f = solve_full(&noisy, &lat).unwrap();
        assert!(f.z[0][1][0].is_finite());
        assert!(f.z[0][1][0] != 0.0);
    }
}
