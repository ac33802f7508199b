//! Switching-problem instances and their standing assumptions.
//!
//! An instance couples `q` operating modes: running payoff rates (or, in the
//! coupled case, drivers), terminal payoffs, a scalar diffusion, and a cost
//! `g_ik(t, x)` for each ordered mode pair. Costs factor as a step function
//! of time times a continuous factor of the state, so the only time
//! discontinuities in the whole problem are cost jumps.
//!
//! `validate` probes the assumptions the solvers rely on: a strictly
//! positive cost floor (no profitable switching loop), terminal consistency
//! (no free terminal switch), and declared driver regularity. Probing
//! falsifies, it does not prove; every failure carries a witness point.
//!
//! `exp_transform` rewrites an instance in exponentially scaled variables:
//! values map as `Y -> e^{at}Y`, so drivers gain `-a y_own`, terminals and
//! costs gain `e^{aT}` and `e^{at}` factors. Solving the transformed
//! instance and undoing the scaling recovers the original solution exactly;
//! cross partials of the drivers are untouched by the transform.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::cadlag::StepFunction;
use crate::{Error, Result};

/// Scalar function of the state: polynomials (coefficients lowest degree
/// first) closed under min, max, clipped exponential, and constant scaling.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceFn {
    Poly(Vec<f64>),
    Sum(Vec<SpaceFn>),
    Min(Box<SpaceFn>, Box<SpaceFn>),
    Max(Box<SpaceFn>, Box<SpaceFn>),
    /// `exp(min(arg(x), bound))`; the clip keeps growth dominated by a
    /// polynomial, which the moment estimates need.
    ExpClip { arg: Box<SpaceFn>, bound: f64 },
    Scaled(f64, Box<SpaceFn>),
}

impl SpaceFn {
    pub fn zero() -> Self {
        SpaceFn::Poly(vec![])
    }

    pub fn constant(c: f64) -> Self {
        SpaceFn::Poly(vec![c])
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            SpaceFn::Poly(c) => c.iter().rev().fold(0.0, |acc, &a| acc * x + a),
            SpaceFn::Sum(fs) => fs.iter().map(|f| f.eval(x)).sum(),
            SpaceFn::Min(a, b) => a.eval(x).min(b.eval(x)),
            SpaceFn::Max(a, b) => a.eval(x).max(b.eval(x)),
            SpaceFn::ExpClip { arg, bound } => arg.eval(x).min(*bound).exp(),
            SpaceFn::Scaled(c, f) => c * f.eval(x),
        }
    }

    /// Syntactic zero test; used to recognize degenerate diffusions.
    pub fn is_zero(&self) -> bool {
        match self {
            SpaceFn::Poly(c) => c.iter().all(|&a| a == 0.0),
            SpaceFn::Sum(fs) => fs.iter().all(|f| f.is_zero()),
            SpaceFn::Scaled(c, f) => *c == 0.0 || f.is_zero(),
            SpaceFn::Min(..) | SpaceFn::Max(..) | SpaceFn::ExpClip { .. } => false,
        }
    }

    /// The function shifted by a constant.
    pub fn offset(&self, c: f64) -> SpaceFn {
        if c == 0.0 {
            return self.clone();
        }
        match self {
            SpaceFn::Poly(coef) => {
                let mut coef = coef.clone();
                if coef.is_empty() {
                    coef.push(c);
                } else {
                    coef[0] += c;
                }
                SpaceFn::Poly(coef)
            }
            other => SpaceFn::Sum(vec![other.clone(), SpaceFn::constant(c)]),
        }
    }
}

/// Switching cost for one ordered mode pair:
/// `cost(t, x) = e^{exp_scale * t} * step(t) * xfactor(x)`.
///
/// The exponential factor is continuous, so every discontinuity (and hence
/// every envelope correction) comes from `step`; it exists so that the
/// exponential change of variables stays inside this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Cost {
    pub step: StepFunction,
    pub xfactor: Option<SpaceFn>,
    pub exp_scale: f64,
}

impl Cost {
    pub fn from_step(step: StepFunction) -> Self {
        Cost { step, xfactor: None, exp_scale: 0.0 }
    }

    pub fn constant(horizon: f64, v: f64) -> Result<Self> {
        Ok(Cost::from_step(StepFunction::constant(horizon, v)?))
    }

    fn xf(&self, x: f64) -> f64 {
        self.xfactor.as_ref().map_or(1.0, |f| f.eval(x))
    }

    fn tscale(&self, t: f64) -> f64 {
        if self.exp_scale == 0.0 {
            1.0
        } else {
            (self.exp_scale * t).exp()
        }
    }

    /// Right-continuous value at `t`.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.tscale(t) * self.step.eval(t)? * self.xf(x))
    }

    /// Left limit at `t`; only the step factor jumps.
    pub fn left_value(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.tscale(t) * self.step.left_limit(t)? * self.xf(x))
    }

    pub fn breakpoints(&self) -> &[f64] {
        self.step.breakpoints()
    }

    pub fn has_jumps(&self) -> bool {
        !self.step.is_continuous()
    }
}

/// Driver affine in the value and volatility arguments:
/// `f(t, x, y, z) = e^{base_tscale * t} * base(x) + y_coef . y + z_coef * z`.
///
/// The class is closed under the exponential transform, which is why the
/// base carries its own time scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDriver {
    pub base: SpaceFn,
    pub base_tscale: f64,
    pub y_coef: Vec<f64>,
    pub z_coef: f64,
}

impl LinearDriver {
    pub fn eval(&self, t: f64, x: f64, y: &[f64], z: f64) -> f64 {
        let scale = if self.base_tscale == 0.0 {
            1.0
        } else {
            (self.base_tscale * t).exp()
        };
        let mut acc = scale * self.base.eval(x);
        for (a, yv) in self.y_coef.iter().zip(y) {
            acc += a * yv;
        }
        acc + self.z_coef * z
    }
}

/// Coupled drivers with their declared regularity.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSet {
    pub f: Vec<LinearDriver>,
    /// Declared Lipschitz constant in `(y, z)` jointly.
    pub lipschitz: f64,
    /// Declared: each driver is nondecreasing in every other mode's value.
    pub monotone: bool,
}

/// One switching-problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingProblem {
    pub q: usize,
    pub horizon: f64,
    pub x0: f64,
    /// Strictly positive lower bound every cost must respect.
    pub gamma: f64,
    /// Per-mode running payoff rates; used only when `drivers` is `None`.
    pub psi: Vec<SpaceFn>,
    /// Per-mode terminal payoffs.
    pub terminal: Vec<SpaceFn>,
    costs: BTreeMap<(usize, usize), Cost>,
    pub drivers: Option<DriverSet>,
    pub drift: SpaceFn,
    pub sigma: SpaceFn,
    pub diffusion_lipschitz: f64,
    pub seed: u64,
}

/// Mutable construction wrapper; `build` performs the structural checks.
pub struct ProblemBuilder {
    p: SwitchingProblem,
}

impl SwitchingProblem {
    pub fn builder(q: usize, horizon: f64) -> ProblemBuilder {
        ProblemBuilder {
            p: SwitchingProblem {
                q,
                horizon,
                x0: 0.0,
                gamma: 1.0,
                psi: vec![SpaceFn::zero(); q],
                terminal: vec![SpaceFn::zero(); q],
                costs: BTreeMap::new(),
                drivers: None,
                drift: SpaceFn::zero(),
                sigma: SpaceFn::zero(),
                diffusion_lipschitz: 0.0,
                seed: 0,
            },
        }
    }

    /// Cost for the ordered pair `(i, k)`, modes 0-based.
    pub fn cost(&self, i: usize, k: usize) -> &Cost {
        &self.costs[&(i, k)]
    }

    pub fn cost_pairs(&self) -> impl Iterator<Item = (&(usize, usize), &Cost)> {
        self.costs.iter()
    }

    /// All distinct cost breakpoints, sorted.
    pub fn cost_breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for c in self.costs.values() {
            out = crate::cadlag::merge_breakpoints(&out, c.breakpoints());
        }
        out
    }

    pub fn has_cost_jumps(&self) -> bool {
        self.costs.values().any(|c| c.has_jumps())
    }

    /// Declared Lipschitz constant of the drivers; zero for pure rates.
    pub fn lipschitz(&self) -> f64 {
        self.drivers.as_ref().map_or(0.0, |d| d.lipschitz)
    }

    /// Driver evaluation for mode `i`, falling back to the payoff rate
    /// (independent of `y` and `z`) when no drivers are declared.
    pub fn driver(&self, i: usize, t: f64, x: f64, y: &[f64], z: f64) -> f64 {
        match &self.drivers {
            Some(d) => d.f[i].eval(t, x, y, z),
            None => {
                let _ = t;
                let _ = z;
                let _ = y;
                self.psi[i].eval(x)
            }
        }
    }

    /// Exponential change of variables with rate `alpha >= 0`.
    ///
    /// Values map as `Y -> e^{alpha t} Y`; accordingly terminals scale by
    /// `e^{alpha T}`, costs by `e^{alpha t}` (still at least `gamma` since
    /// they only grow), and each driver `f_i` becomes
    ///
    /// ```text
    /// F_i(t, x, y, z) = e^{alpha t} f_i(t, x, e^{-alpha t} y, e^{-alpha t} z) - alpha y_i,
    /// ```
    ///
    /// which for the affine class keeps every cross coefficient and shifts
    /// the own-value coefficient by `-alpha`. A rate-only problem picks up
    /// genuine drivers (the `-alpha y_i` term), so the result must be solved
    /// with the coupled-system solvers.
    pub fn exp_transform(&self, alpha: f64) -> Result<SwitchingProblem> {
        if !(alpha >= 0.0) {
            return Err(Error::Domain(format!(
                "transform rate must be nonnegative, got {alpha}"
            )));
        }
        if alpha == 0.0 {
            return Ok(self.clone());
        }
        let q = self.q;
        let old: Vec<LinearDriver> = match &self.drivers {
            Some(d) => d.f.clone(),
            None => self
                .psi
                .iter()
                .map(|r| LinearDriver {
                    base: r.clone(),
                    base_tscale: 0.0,
                    y_coef: vec![0.0; q],
                    z_coef: 0.0,
                })
                .collect(),
        };
        let f: Vec<LinearDriver> = old
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let mut y_coef = d.y_coef;
                y_coef[i] -= alpha;
                LinearDriver {
                    base: d.base,
                    base_tscale: d.base_tscale + alpha,
                    y_coef,
                    z_coef: d.z_coef,
                }
            })
            .collect();
        let lipschitz = self.lipschitz() + alpha;
        let monotone = self.drivers.as_ref().map_or(true, |d| d.monotone);
        let scale_t = (alpha * self.horizon).exp();
        let terminal = self
            .terminal
            .iter()
            .map(|h| SpaceFn::Scaled(scale_t, Box::new(h.clone())))
            .collect();
        let costs = self
            .costs
            .iter()
            .map(|(&pair, c)| {
                (pair, Cost { step: c.step.clone(), xfactor: c.xfactor.clone(), exp_scale: c.exp_scale + alpha })
            })
            .collect();
        Ok(SwitchingProblem {
            q,
            horizon: self.horizon,
            x0: self.x0,
            gamma: self.gamma,
            psi: vec![SpaceFn::zero(); q],
            terminal,
            costs,
            drivers: Some(DriverSet { f, lipschitz, monotone }),
            drift: self.drift.clone(),
            sigma: self.sigma.clone(),
            diffusion_lipschitz: self.diffusion_lipschitz,
            seed: self.seed,
        })
    }
}

impl ProblemBuilder {
    pub fn x0(mut self, x0: f64) -> Self {
        self.p.x0 = x0;
        self
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.p.gamma = gamma;
        self
    }

    pub fn psi(mut self, psi: Vec<SpaceFn>) -> Self {
        self.p.psi = psi;
        self
    }

    pub fn terminal(mut self, h: Vec<SpaceFn>) -> Self {
        self.p.terminal = h;
        self
    }

    pub fn cost(mut self, i: usize, k: usize, c: Cost) -> Self {
        self.p.costs.insert((i, k), c);
        self
    }

    /// Same cost profile for every ordered pair.
    pub fn uniform_cost(mut self, c: Cost) -> Self {
        for i in 0..self.p.q {
            for k in 0..self.p.q {
                if i != k {
                    self.p.costs.insert((i, k), c.clone());
                }
            }
        }
        self
    }

    pub fn drivers(mut self, d: DriverSet) -> Self {
        self.p.drivers = Some(d);
        self
    }

    pub fn diffusion(mut self, b: SpaceFn, sigma: SpaceFn, lipschitz: f64) -> Self {
        self.p.drift = b;
        self.p.sigma = sigma;
        self.p.diffusion_lipschitz = lipschitz;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.p.seed = seed;
        self
    }

    pub fn build(self) -> Result<SwitchingProblem> {
        let p = self.p;
        if p.q < 1 {
            return Err(Error::Domain("mode count must be at least 1".into()));
        }
        if !(p.horizon > 0.0) || !p.horizon.is_finite() {
            return Err(Error::Domain(format!(
                "horizon must be positive, got {}",
                p.horizon
            )));
        }
        if p.psi.len() != p.q {
            return Err(Error::Domain(format!(
                "expected {} payoff rates, got {}",
                p.q,
                p.psi.len()
            )));
        }
        if p.terminal.len() != p.q {
            return Err(Error::Domain(format!(
                "expected {} terminal payoffs, got {}",
                p.q,
                p.terminal.len()
            )));
        }
        for i in 0..p.q {
            for k in 0..p.q {
                if i != k && !p.costs.contains_key(&(i, k)) {
                    return Err(Error::Domain(format!(
                        "missing cost entry for mode pair {}->{}",
                        i + 1,
                        k + 1
                    )));
                }
            }
        }
        for (&(i, k), c) in &p.costs {
            if i == k {
                return Err(Error::Domain(format!(
                    "cost entry {}->{} pairs a mode with itself",
                    i + 1,
                    k + 1
                )));
            }
            if i >= p.q || k >= p.q {
                return Err(Error::Domain(format!(
                    "cost entry {}->{} references a mode beyond q={}",
                    i + 1,
                    k + 1,
                    p.q
                )));
            }
            if c.step.horizon() != p.horizon {
                return Err(Error::Domain(format!(
                    "cost {}->{} has horizon {}, problem has {}",
                    i + 1,
                    k + 1,
                    c.step.horizon(),
                    p.horizon
                )));
            }
        }
        if let Some(d) = &p.drivers {
            if d.f.len() != p.q {
                return Err(Error::Domain(format!(
                    "expected {} drivers, got {}",
                    p.q,
                    d.f.len()
                )));
            }
            for (i, f) in d.f.iter().enumerate() {
                if f.y_coef.len() != p.q {
                    return Err(Error::Domain(format!(
                        "driver {} has {} value coefficients, expected {}",
                        i + 1,
                        f.y_coef.len(),
                        p.q
                    )));
                }
            }
            if !(d.lipschitz >= 0.0) {
                return Err(Error::Domain(
                    "declared Lipschitz constant must be nonnegative".into(),
                ));
            }
        }
        Ok(p)
    }
}

/// Deterministic sampling plan for assumption probing.
#[derive(Debug, Clone)]
pub struct ProbePlan {
    pub n_points: usize,
    pub seed: u64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub tol: f64,
}

impl ProbePlan {
    pub fn for_problem(p: &SwitchingProblem) -> Self {
        ProbePlan {
            n_points: 1000,
            seed: p.seed ^ 0x9e37_79b9_7f4a_7c15,
            x_lo: p.x0 - 3.0,
            x_hi: p.x0 + 3.0,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub t: f64,
    pub x: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub probes: usize,
    /// Smallest slack observed; negative means violated.
    pub worst_margin: f64,
    pub witnesses: Vec<Witness>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const MAX_WITNESSES: usize = 8;

struct CheckAcc {
    name: &'static str,
    probes: usize,
    worst_margin: f64,
    // (margin, witness); trimmed to the worst few, earliest time first on ties
    violations: Vec<(f64, Witness)>,
    note: String,
}

impl CheckAcc {
    fn new(name: &'static str) -> Self {
        CheckAcc {
            name,
            probes: 0,
            worst_margin: f64::INFINITY,
            violations: Vec::new(),
            note: String::new(),
        }
    }

    fn push_violation(&mut self, margin: f64, t: f64, x: f64, detail: String) {
        self.violations.push((margin, Witness { t, x, detail }));
        if self.violations.len() > 4 * MAX_WITNESSES {
            self.trim();
        }
    }

    fn trim(&mut self) {
        self.violations.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.t.total_cmp(&b.1.t))
                .then(a.1.x.total_cmp(&b.1.x))
        });
        self.violations.truncate(MAX_WITNESSES);
    }

    fn record(&mut self, margin: f64, t: f64, x: f64, detail: impl FnOnce() -> String) {
        self.probes += 1;
        if margin < self.worst_margin {
            self.worst_margin = margin;
        }
        if margin < 0.0 {
            self.push_violation(margin, t, x, detail());
        }
    }

    fn finish(mut self) -> AssumptionCheck {
        self.trim();
        AssumptionCheck {
            name: self.name.to_string(),
            passed: self.violations.is_empty(),
            probes: self.probes,
            worst_margin: if self.probes == 0 { 0.0 } else { self.worst_margin },
            witnesses: self.violations.into_iter().map(|(_, w)| w).collect(),
            note: self.note,
        }
    }
}

/// Probes the standing assumptions on a structurally valid instance.
///
/// Structural defects (bad mode count, horizon, missing cost pairs) error
/// out before any probing; assumption violations come back as failed checks
/// with witnesses, never as `Err`.
pub fn validate(p: &SwitchingProblem, plan: &ProbePlan) -> Result<ValidationReport> {
    if plan.n_points == 0 {
        return Err(Error::Domain("probe plan must contain points".into()));
    }
    if !(plan.x_lo < plan.x_hi) {
        return Err(Error::Domain("probe range is empty".into()));
    }
    // Re-run the structural checks so a hand-assembled problem cannot skip
    // them.
    let rebuilt = ProblemBuilder { p: p.clone() }.build()?;
    let p = &rebuilt;

    let mut rng = ChaCha12Rng::seed_from_u64(plan.seed);
    let mut xs: Vec<f64> = vec![p.x0];
    let mut ts: Vec<f64> = vec![0.0, p.horizon];
    for bp in p.cost_breakpoints() {
        ts.push(bp);
    }
    let n_rand = plan.n_points.saturating_sub(ts.len()).max(8);
    for _ in 0..n_rand {
        ts.push(rng.random::<f64>() * p.horizon);
        xs.push(plan.x_lo + rng.random::<f64>() * (plan.x_hi - plan.x_lo));
    }

    let mut checks = Vec::new();

    // A: strictly positive cost floor, including pre-jump values.
    let mut a = CheckAcc::new("A");
    if !(p.gamma > 0.0) {
        a.probes = 1;
        a.worst_margin = p.gamma;
        a.push_violation(
            p.gamma,
            0.0,
            p.x0,
            format!("declared gamma = {} is not strictly positive", p.gamma),
        );
        a.note = "requires a strictly positive cost floor gamma".to_string();
    } else {
        for (&(i, k), cost) in p.cost_pairs() {
            for &t in &ts {
                for &x in xs.iter().take(16) {
                    let v = cost.eval(t, x)?;
                    a.record(v - p.gamma, t, x, || {
                        format!(
                            "g_{}{}({t}, {x}) = {v} < gamma = {}",
                            i + 1,
                            k + 1,
                            p.gamma
                        )
                    });
                    if t > 0.0 {
                        let lv = cost.left_value(t, x)?;
                        a.record(lv - p.gamma, t, x, || {
                            format!(
                                "g_{}{}({t}-, {x}) = {lv} < gamma = {}",
                                i + 1,
                                k + 1,
                                p.gamma
                            )
                        });
                    }
                }
            }
        }
    }
    checks.push(a.finish());

    // H2(ii): declared Lipschitz constant dominates the empirical one.
    let mut h2ii = CheckAcc::new("H2ii");
    match &p.drivers {
        None => {
            h2ii.probes = 0;
            h2ii.note = "no drivers declared; payoff rates are free of (y, z)".to_string();
        }
        Some(d) => {
            for _ in 0..plan.n_points {
                let t = rng.random::<f64>() * p.horizon;
                let x = plan.x_lo + rng.random::<f64>() * (plan.x_hi - plan.x_lo);
                let mut y1 = vec![0.0; p.q];
                let mut y2 = vec![0.0; p.q];
                for j in 0..p.q {
                    y1[j] = rng.random_range(-3.0..3.0);
                    y2[j] = rng.random_range(-3.0..3.0);
                }
                let z1: f64 = rng.random_range(-3.0..3.0);
                let z2: f64 = rng.random_range(-3.0..3.0);
                let i = rng.random_range(0..p.q);
                let lhs = (d.f[i].eval(t, x, &y1, z1) - d.f[i].eval(t, x, &y2, z2)).abs();
                let dist: f64 = y1
                    .iter()
                    .zip(&y2)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    + (z1 - z2).abs();
                let bound = (d.lipschitz + plan.tol) * dist;
                h2ii.record(bound - lhs, t, x, || {
                    format!(
                        "driver {} varies by {lhs} over (y, z) distance {dist}, exceeding declared constant {}",
                        i + 1,
                        d.lipschitz
                    )
                });
            }
        }
    }
    checks.push(h2ii.finish());

    // H2(iv): declared cross-mode monotonicity of the drivers.
    let mut h2iv = CheckAcc::new("H2iv");
    match &p.drivers {
        None => {
            h2iv.note = "no drivers declared".to_string();
        }
        Some(d) if !d.monotone => {
            h2iv.note = "monotonicity not declared; not probed".to_string();
        }
        Some(d) => {
            let delta = 1e-4;
            for _ in 0..plan.n_points {
                let t = rng.random::<f64>() * p.horizon;
                let x = plan.x_lo + rng.random::<f64>() * (plan.x_hi - plan.x_lo);
                let mut y = vec![0.0; p.q];
                for v in y.iter_mut() {
                    *v = rng.random_range(-3.0..3.0);
                }
                let z: f64 = rng.random_range(-3.0..3.0);
                let i = rng.random_range(0..p.q);
                for k in 0..p.q {
                    if k == i {
                        continue;
                    }
                    let f0 = d.f[i].eval(t, x, &y, z);
                    let mut yk = y.clone();
                    yk[k] += delta;
                    let f1 = d.f[i].eval(t, x, &yk, z);
                    let slope = (f1 - f0) / delta;
                    h2iv.record(slope + 1e-12, t, x, || {
                        format!(
                            "driver {} decreases in y_{} (slope {slope})",
                            i + 1,
                            k + 1
                        )
                    });
                }
            }
        }
    }
    checks.push(h2iv.finish());

    // H3: cost regularity. The cadlag-in-time, continuous-in-x form is
    // guaranteed by the representation; the shared floor is probed under A.
    let mut h3 = CheckAcc::new("H3");
    h3.note =
        "costs are step-in-time times continuous-in-x by representation; floor probed under A"
            .to_string();
    let jumps = p.costs.values().filter(|c| c.has_jumps()).count();
    h3.note.push_str(&format!("; {jumps} cost profiles carry jumps"));
    checks.push(h3.finish());

    // H4: no terminal switch can be profitable.
    let mut h4 = CheckAcc::new("H4");
    for &x in &xs {
        for i in 0..p.q {
            let hi = p.terminal[i].eval(x);
            for k in 0..p.q {
                if k == i {
                    continue;
                }
                let hk = p.terminal[k].eval(x);
                let g = p.cost(i, k).eval(p.horizon, x)?;
                let margin = hi - (hk - g);
                h4.record(margin + plan.tol, p.horizon, x, || {
                    format!(
                        "h_{}({x}) = {hi} < h_{}({x}) - g_{}{}(T, {x}) = {}",
                        i + 1,
                        k + 1,
                        i + 1,
                        k + 1,
                        hk - g
                    )
                });
            }
        }
    }
    checks.push(h4.finish());

    let passed = checks.iter().all(|c| c.passed);
    Ok(ValidationReport { passed, checks })
}
