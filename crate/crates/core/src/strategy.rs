//! Switching strategies read off the value surfaces.
//!
//! The near-optimal rule switches the first time the own value sits within
//! a slack of the best switching alternative; the slack halves with every
//! switch already made, so the total giveaway across infinitely many
//! potential switches stays below the requested tolerance. Ties go to the
//! lowest-numbered target mode.
//!
//! `brute_force_value` enumerates every budgeted strategy directly on tiny
//! trees; it shares no code with the dynamic-programming solver and exists
//! to cross-check it.

use std::collections::HashMap;

use crate::lattice::Lattice;
use crate::problem::SwitchingProblem;
use crate::snell::ValueField;
use crate::{Error, Result};

/// Upper bound on how many switches any optimal strategy can use: each
/// switch costs at least the floor, the value surface bounds what switching
/// can earn, and a final burst of same-instant switches can add at most one
/// leg per mode.
pub fn admissibility_bound(p: &SwitchingProblem, field: &ValueField) -> usize {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for layer in &field.values {
        for mode in layer {
            for &v in mode {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let range = (hi - lo).max(0.0);
    (range / p.gamma).ceil() as usize + p.q
}

/// Near-optimal switching rule over a solved value field.
pub struct Policy<'a> {
    pub problem: &'a SwitchingProblem,
    pub lattice: &'a Lattice,
    pub field: &'a ValueField,
    pub eps: f64,
    /// Hard budget; the rule never switches past it.
    pub cap: usize,
}

/// One realized switch.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchEvent {
    pub layer: usize,
    pub t: f64,
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Expectation of a policy's payoff under the tree measure.
#[derive(Debug, Clone, Copy)]
pub struct PolicyValue {
    pub value: f64,
    pub expected_switches: f64,
    pub expected_cost: f64,
}

impl<'a> Policy<'a> {
    pub fn new(
        p: &'a SwitchingProblem,
        lat: &'a Lattice,
        field: &'a ValueField,
        eps: f64,
    ) -> Result<Policy<'a>> {
        if !(eps >= 0.0) {
            return Err(Error::Domain(format!("slack must be nonnegative, got {eps}")));
        }
        Ok(Policy { problem: p, lattice: lat, field, eps, cap: admissibility_bound(p, field) })
    }

    fn cost_at(&self, m: usize, i: usize, k: usize, x: f64) -> Result<f64> {
        let t = self.field.grid.time(m);
        if self.field.grid.is_pre_jump(m) {
            self.problem.cost(i, k).left_value(t, x)
        } else {
            self.problem.cost(i, k).eval(t, x)
        }
    }

    /// Target mode if the rule switches at `(m, j)` in `mode` with
    /// `n_done` switches behind it, `None` to stay. Never fires at the
    /// terminal layer.
    pub fn decide(&self, m: usize, j: usize, mode: usize, n_done: usize) -> Result<Option<usize>> {
        if n_done >= self.cap || m + 1 == self.field.n_layers() || self.problem.q == 1 {
            return Ok(None);
        }
        let x = self.lattice.state(m, j);
        let y_own = self.field.values[m][mode][j];
        let mut best = f64::NEG_INFINITY;
        let mut target = mode;
        for k in 0..self.problem.q {
            if k == mode {
                continue;
            }
            let cand = self.field.values[m][k][j] - self.cost_at(m, mode, k, x)?;
            if cand > best {
                best = cand;
                target = k;
            }
        }
        let slack = self.eps * 0.5f64.powi(n_done as i32 + 1);
        if y_own <= best + slack {
            Ok(Some(target))
        } else {
            Ok(None)
        }
    }

    /// Applies the rule repeatedly at one node (same-instant chains); stops
    /// at the budget or after one leg per mode.
    fn chain(
        &self,
        m: usize,
        j: usize,
        mode: usize,
        n_done: usize,
    ) -> Result<(usize, usize, Vec<SwitchEvent>)> {
        let mut cur = mode;
        let mut n = n_done;
        let mut events = Vec::new();
        for _ in 0..self.problem.q {
            match self.decide(m, j, cur, n)? {
                None => break,
                Some(k) => {
                    let x = self.lattice.state(m, j);
                    events.push(SwitchEvent {
                        layer: m,
                        t: self.field.grid.time(m),
                        from: cur,
                        to: k,
                        cost: self.cost_at(m, cur, k, x)?,
                    });
                    cur = k;
                    n += 1;
                }
            }
        }
        Ok((cur, n, events))
    }
}

/// Expected payoff of following `policy` from the root in `start_mode`.
pub fn evaluate_policy(policy: &Policy, start_mode: usize) -> Result<PolicyValue> {
    let p = policy.problem;
    let lat = policy.lattice;
    if start_mode >= p.q {
        return Err(Error::Domain(format!("start mode {} out of range", start_mode + 1)));
    }
    let states = lat.total_nodes() * p.q * (policy.cap + 1);
    if states > 50_000_000 {
        return Err(Error::Size(format!(
            "policy evaluation needs {states} memo slots; tree or budget too large"
        )));
    }
    let mut memo: HashMap<(usize, usize, usize, usize), (f64, f64, f64)> = HashMap::new();
    let v = walk(policy, 0, 0, start_mode, 0, &mut memo)?;
    Ok(PolicyValue { value: v.0, expected_switches: v.1, expected_cost: v.2 })
}

fn walk(
    policy: &Policy,
    m: usize,
    j: usize,
    mode: usize,
    n_done: usize,
    memo: &mut HashMap<(usize, usize, usize, usize), (f64, f64, f64)>,
) -> Result<(f64, f64, f64)> {
    let key = (m, j, mode, n_done);
    if let Some(&v) = memo.get(&key) {
        return Ok(v);
    }
    let p = policy.problem;
    let lat = policy.lattice;
    let last = policy.field.n_layers() - 1;
    let out = if m == last {
        (p.terminal[mode].eval(lat.state(m, j)), 0.0, 0.0)
    } else {
        let (cur, n, events) = policy.chain(m, j, mode, n_done)?;
        let paid: f64 = events.iter().map(|e| e.cost).sum();
        let legs = events.len() as f64;
        let dt = policy.field.grid.dt(m);
        let x = lat.state(m, j);
        let run = if dt > 0.0 { p.psi[cur].eval(x) * dt } else { 0.0 };
        let (d, up) = lat.children(m, j);
        let a = walk(policy, m + 1, d, cur, n, memo)?;
        let (v_next, s_next, c_next) = if let Some(u) = up {
            let b = walk(policy, m + 1, u, cur, n, memo)?;
            (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1), 0.5 * (a.2 + b.2))
        } else {
            a
        };
        (run + v_next - paid, legs + s_next, paid + c_next)
    };
    memo.insert(key, out);
    Ok(out)
}

/// Runs the policy along a deterministic (non-branching) tree and returns
/// the realized switches in time order.
pub fn realize_on_chain(policy: &Policy, start_mode: usize) -> Result<Vec<SwitchEvent>> {
    let lat = policy.lattice;
    for m in 0..policy.field.n_layers() - 1 {
        if lat.branches(m) {
            return Err(Error::Domain(
                "tree branches; realized switch paths are only defined for deterministic instances"
                    .into(),
            ));
        }
    }
    let mut mode = start_mode;
    let mut n = 0usize;
    let mut out = Vec::new();
    for m in 0..policy.field.n_layers() - 1 {
        let (cur, nn, events) = policy.chain(m, 0, mode, n)?;
        out.extend(events);
        mode = cur;
        n = nn;
    }
    Ok(out)
}

const BRUTE_MAX_BRANCH_DEPTH: usize = 5;
const BRUTE_MAX_MODES: usize = 3;
const BRUTE_MAX_SWITCHES: usize = 4;

/// Direct enumeration of every strategy with at most `n_max` switches.
///
/// Exponential in depth and budget by design; refuses anything beyond a toy
/// size. Pre-jump layers charge left-limit costs, the terminal layer pays
/// the standing mode's terminal value and allows no switch.
pub fn brute_force_value(
    p: &SwitchingProblem,
    lat: &Lattice,
    start_mode: usize,
    n_max: usize,
) -> Result<f64> {
    if lat.grid.n_branching_steps() > BRUTE_MAX_BRANCH_DEPTH
        || p.q > BRUTE_MAX_MODES
        || n_max > BRUTE_MAX_SWITCHES
    {
        return Err(Error::Size(format!(
            "brute force limited to depth {BRUTE_MAX_BRANCH_DEPTH}, {BRUTE_MAX_MODES} modes, {BRUTE_MAX_SWITCHES} switches"
        )));
    }
    if p.drivers.is_some() {
        return Err(Error::Domain(
            "brute force enumerates rate instances only".into(),
        ));
    }
    if start_mode >= p.q {
        return Err(Error::Domain(format!("start mode {} out of range", start_mode + 1)));
    }
    brute(p, lat, 0, 0, start_mode, n_max)
}

fn brute(
    p: &SwitchingProblem,
    lat: &Lattice,
    m: usize,
    j: usize,
    mode: usize,
    budget: usize,
) -> Result<f64> {
    let last = lat.n_layers() - 1;
    let x = lat.state(m, j);
    if m == last {
        return Ok(p.terminal[mode].eval(x));
    }
    let dt = lat.grid.dt(m);
    let run = if dt > 0.0 { p.psi[mode].eval(x) * dt } else { 0.0 };
    let (d, up) = lat.children(m, j);
    let stay_next = if let Some(u) = up {
        0.5 * (brute(p, lat, m + 1, d, mode, budget)? + brute(p, lat, m + 1, u, mode, budget)?)
    } else {
        brute(p, lat, m + 1, d, mode, budget)?
    };
    let mut best = run + stay_next;
    if budget > 0 {
        let t = lat.grid.time(m);
        for k in 0..p.q {
            if k == mode {
                continue;
            }
            let g = if lat.grid.is_pre_jump(m) {
                p.cost(mode, k).left_value(t, x)?
            } else {
                p.cost(mode, k).eval(t, x)?
            };
            let v = brute(p, lat, m, j, k, budget - 1)? - g;
            if v > best {
                best = v;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cadlag::StepFunction;
    use crate::lattice::TimeGrid;
    use crate::problem::{Cost, SpaceFn};
    use crate::snell::{solve_capped, solve_full};

    fn lattice_for(p: &SwitchingProblem, max_dt: f64) -> Lattice {
        let grid = TimeGrid::for_problem(p, max_dt).unwrap();
        Lattice::build(p, grid).unwrap()
    }

    fn rates(psi: [f64; 2], g: Cost, gamma: f64) -> SwitchingProblem {
        SwitchingProblem::builder(2, 1.0)
            .gamma(gamma)
            .psi(vec![SpaceFn::constant(psi[0]), SpaceFn::constant(psi[1])])
            .uniform_cost(g)
            .build()
            .unwrap()
    }

    #[test]
    fn prohibitive_costs_never_trigger() {
        let p = rates([1.0, 0.0], Cost::constant(1.0, 10.0).unwrap(), 10.0);
        let lat = lattice_for(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        let pol = Policy::new(&p, &lat, &f, 0.01).unwrap();
        assert!(realize_on_chain(&pol, 0).unwrap().is_empty());
        let v = evaluate_policy(&pol, 0).unwrap();
        assert!((v.value - 1.0).abs() <= 1e-12);
        assert_eq!(v.expected_switches, 0.0);
        assert_eq!(v.expected_cost, 0.0);
    }

    #[test]
    fn immediate_switch_fires_at_the_root() {
        let p = rates([0.0, 2.0], Cost::constant(1.0, 0.5).unwrap(), 0.5);
        let lat = lattice_for(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        let pol = Policy::new(&p, &lat, &f, 0.01).unwrap();
        let events = realize_on_chain(&pol, 0).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].layer, 0);
        assert_eq!((events[0].from, events[0].to), (0, 1));
        let v = evaluate_policy(&pol, 0).unwrap();
        assert!(v.value >= f.root(0) - 0.01);
        assert!((v.value - 1.5).abs() <= 1e-12);
        assert!((v.expected_cost - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn cost_drop_delays_the_switch_to_the_post_jump_layer() {
        let step = StepFunction::new(1.0, 1.0, &[(0.5, 0.2)]).unwrap();
        let p = SwitchingProblem::builder(2, 1.0)
            .gamma(0.2)
            .psi(vec![SpaceFn::zero(), SpaceFn::constant(1.0)])
            .cost(0, 1, Cost::from_step(step))
            .cost(1, 0, Cost::constant(1.0, 10.0).unwrap())
            .build()
            .unwrap();
        let lat = lattice_for(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        let pol = Policy::new(&p, &lat, &f, 0.01).unwrap();
        let events = realize_on_chain(&pol, 0).unwrap();
        assert_eq!(events.len(), 1);
        let (_, post) = f.grid.jump_pairs()[0];
        assert_eq!(events[0].layer, post);
        assert_eq!(events[0].t, 0.5);
        assert!((events[0].cost - 0.2).abs() <= 1e-15);
        let v = evaluate_policy(&pol, 0).unwrap();
        assert!((v.value - 0.3).abs() <= 1e-12);
        assert!(v.value >= f.root(0) - 0.01);
    }

    #[test]
    fn slack_guarantee_holds_for_both_tolerances_under_noise() {
        let step = StepFunction::new(1.0, 0.8, &[(0.4, 0.4)]).unwrap();
        let p = SwitchingProblem::builder(2, 1.0)
            .gamma(0.4)
            .psi(vec![SpaceFn::Poly(vec![0.0, 1.0]), SpaceFn::constant(0.5)])
            .terminal(vec![SpaceFn::constant(0.1), SpaceFn::constant(0.1)])
            .uniform_cost(Cost::from_step(step))
            .diffusion(SpaceFn::zero(), SpaceFn::constant(1.0), 0.0)
            .build()
            .unwrap();
        let lat = lattice_for(&p, 0.2);
        let f = solve_full(&p, &lat).unwrap();
        for eps in [0.1, 0.01] {
            let pol = Policy::new(&p, &lat, &f, eps).unwrap();
            for i in 0..p.q {
                let v = evaluate_policy(&pol, i).unwrap();
                assert!(
                    v.value >= f.root(i) - eps,
                    "eps {eps} mode {i}: {} < {} - {eps}",
                    v.value,
                    f.root(i)
                );
                assert!(v.value <= f.root(i) + 1e-12);
            }
        }
    }

    #[test]
    fn terminal_layer_never_switches() {
        // mode 2 pays a better terminal value than mode 1 and switching at
        // the end would be free value; the rule must not take it
        let p = SwitchingProblem::builder(2, 1.0)
            .gamma(0.5)
            .terminal(vec![SpaceFn::constant(0.6), SpaceFn::constant(1.0)])
            .uniform_cost(Cost::constant(1.0, 0.5).unwrap())
            .build()
            .unwrap();
        let lat = lattice_for(&p, 0.5);
        let f = solve_full(&p, &lat).unwrap();
        let pol = Policy::new(&p, &lat, &f, 0.0).unwrap();
        let events = realize_on_chain(&pol, 0).unwrap();
        // switching earlier is fine (0.5 cost for 0.4 gain is not), none at T
        assert!(events.iter().all(|e| e.layer + 1 < f.n_layers()));
        let v = evaluate_policy(&pol, 0).unwrap();
        assert!((v.value - f.root(0)).abs() <= 1e-12);
    }

    #[test]
    fn admissibility_bound_matches_the_hand_count() {
        let p = rates([0.0, 2.0], Cost::constant(1.0, 0.5).unwrap(), 0.5);
        let lat = lattice_for(&p, 0.25);
        let f = solve_full(&p, &lat).unwrap();
        // values span [0, 2]; ceil(2 / 0.5) + 2
        assert_eq!(admissibility_bound(&p, &f), 6);
    }

    #[test]
    fn brute_force_agrees_with_the_capped_solver() {
        let step = StepFunction::new(1.0, 0.9, &[(0.5, 0.3)]).unwrap();
        let p = SwitchingProblem::builder(2, 1.0)
            .gamma(0.3)
            .psi(vec![SpaceFn::Poly(vec![0.2, 0.5]), SpaceFn::constant(0.6)])
            .terminal(vec![SpaceFn::constant(0.2), SpaceFn::constant(0.0)])
            .uniform_cost(Cost::from_step(step))
            .diffusion(SpaceFn::constant(0.1), SpaceFn::constant(1.0), 0.1)
            .build()
            .unwrap();
        let lat = lattice_for(&p, 0.25);
        for n in 0..=3usize {
            let capped = solve_capped(&p, &lat, n).unwrap();
            for i in 0..p.q {
                let bf = brute_force_value(&p, &lat, i, n).unwrap();
                assert!(
                    (bf - capped.root(i)).abs() <= 1e-12,
                    "n {n} mode {i}: {bf} vs {}",
                    capped.root(i)
                );
            }
        }
    }

    #[test]
    fn brute_force_agrees_on_three_modes_with_chains() {
        let cheap = Cost::constant(1.0, 0.4).unwrap();
        let dear = Cost::constant(1.0, 3.0).unwrap();
        let p = SwitchingProblem::builder(3, 1.0)
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
        let lat = lattice_for(&p, 0.5);
        for n in 0..=3usize {
            let capped = solve_capped(&p, &lat, n).unwrap();
            for i in 0..p.q {
                let bf = brute_force_value(&p, &lat, i, n).unwrap();
                assert!((bf - capped.root(i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn brute_force_refuses_oversized_inputs() {
        let p = rates([0.0, 1.0], Cost::constant(1.0, 0.5).unwrap(), 0.5);
        let noisy = SwitchingProblem::builder(2, 1.0)
            .gamma(0.5)
            .psi(vec![SpaceFn::zero(), SpaceFn::constant(1.0)])
            .uniform_cost(Cost::constant(1.0, 0.5).unwrap())
            .diffusion(SpaceFn::zero(), SpaceFn::constant(1.0), 0.0)
            .build()
            .unwrap();
        let lat = lattice_for(&noisy, 1.0 / 6.0);
        assert!(matches!(
            brute_force_value(&noisy, &lat, 0, 2),
            Err(Error::Size(_))
        ));
        let lat = lattice_for(&p, 0.25);
        assert!(matches!(
            brute_force_value(&p, &lat, 0, 5),
            Err(Error::Size(_))
        ));
    }
}
