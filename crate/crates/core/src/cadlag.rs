//! Piecewise-constant cadlag time profiles with exact left limits and
//! semicontinuous envelopes.
//!
//! A [`StepFunction`] is right-continuous by construction:
//!
//! ```text
//! f(t) = values[j]   on [b_{j-1}, b_j),   with b_{-1} = 0, b_last <= T,
//! ```
//!
//! so `eval(b_j)` returns the post-jump value and `left_limit(b_j)` the
//! pre-jump one. Envelopes differ from the function only at breakpoints:
//! the upper one takes the larger of the two one-sided values, the lower one
//! the smaller. A plain step function cannot carry such isolated point
//! values, hence [`SampledStep`].
//!
//! All operations stay inside exact floating arithmetic: combining two step
//! functions only ever evaluates and compares the inputs, so identities such
//! as the envelope algebra used by the viscosity residual checks hold with
//! `==`, not with a tolerance, whenever the inputs are exact.

use crate::{Error, Result};

/// Right-continuous piecewise-constant function on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    horizon: f64,
    /// Strictly increasing, all in (0, horizon]. A breakpoint supplied at
    /// t = 0 is normalized away (it only renames the initial value).
    breakpoints: Vec<f64>,
    /// One value per segment; `values.len() == breakpoints.len() + 1`.
    values: Vec<f64>,
}

/// Binary pointwise combinations of step functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineOp {
    Sum,
    Min,
    Max,
}

impl StepFunction {
    /// Constant profile.
    pub fn constant(horizon: f64, v: f64) -> Result<Self> {
        Self::new(horizon, v, &[])
    }

    /// Builds from the initial value and `(t, v)` jump records.
    pub fn new(horizon: f64, v0: f64, steps: &[(f64, f64)]) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!(
                "step function horizon must be positive and finite, got {horizon}"
            )));
        }
        let mut breakpoints = Vec::with_capacity(steps.len());
        let mut values = Vec::with_capacity(steps.len() + 1);
        values.push(v0);
        for &(t, v) in steps {
            if !t.is_finite() || !(0.0..=horizon).contains(&t) {
                return Err(Error::Domain(format!(
                    "breakpoint {t} outside [0, {horizon}]"
                )));
            }
            if let Some(&prev) = breakpoints.last() {
                if t <= prev {
                    return Err(Error::Domain(format!(
                        "breakpoints must increase strictly: {t} after {prev}"
                    )));
                }
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite segment value {v}")));
            }
            breakpoints.push(t);
            values.push(v);
        }
        if !v0.is_finite() {
            return Err(Error::Domain(format!("non-finite initial value {v0}")));
        }
        // A jump at t = 0 has no left side; the function equals its post-jump
        // value there, so drop the orphaned initial segment.
        if breakpoints.first() == Some(&0.0) {
            breakpoints.remove(0);
            values.remove(0);
        }
        Ok(StepFunction { horizon, breakpoints, values })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segment_values(&self) -> &[f64] {
        &self.values
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Right-continuous evaluation: the value of the segment whose left
    /// endpoint is the greatest breakpoint `<= t`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        Ok(self.values[idx])
    }

    /// Value of the segment immediately left of `t`. Errors at `t = 0`,
    /// where no left limit exists.
    pub fn left_limit(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 {
            return Err(Error::Domain(
                "left limit undefined at t = 0".to_string(),
            ));
        }
        let idx = self.breakpoints.partition_point(|&b| b < t);
        Ok(self.values[idx])
    }

    /// True when every jump is trivial, i.e. both one-sided values agree at
    /// every breakpoint.
    pub fn is_continuous(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    /// Smallest value the function attains on `[0, horizon]`. For a step
    /// function the one-sided limits take no values beyond the segment
    /// values, so this is the segment minimum.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn negate(&self) -> StepFunction {
        StepFunction {
            horizon: self.horizon,
            breakpoints: self.breakpoints.clone(),
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Exact upper and lower semicontinuous envelopes.
    pub fn envelopes(&self) -> EnvelopePair {
        let mut usc_points = Vec::with_capacity(self.breakpoints.len());
        let mut lsc_points = Vec::with_capacity(self.breakpoints.len());
        for (j, _) in self.breakpoints.iter().enumerate() {
            let left = self.values[j];
            let right = self.values[j + 1];
            usc_points.push(left.max(right));
            lsc_points.push(left.min(right));
        }
        EnvelopePair {
            usc: SampledStep { base: self.clone(), point_values: usc_points },
            lsc: SampledStep { base: self.clone(), point_values: lsc_points },
        }
    }
}

/// Pointwise combination on the merged breakpoint set.
pub fn combine(f1: &StepFunction, f2: &StepFunction, op: CombineOp) -> Result<StepFunction> {
    if f1.horizon != f2.horizon {
        return Err(Error::Domain(format!(
            "horizon mismatch: {} vs {}",
            f1.horizon, f2.horizon
        )));
    }
    let merged = merge_breakpoints(&f1.breakpoints, &f2.breakpoints);
    let apply = |a: f64, b: f64| match op {
        CombineOp::Sum => a + b,
        CombineOp::Min => a.min(b),
        CombineOp::Max => a.max(b),
    };
    let mut values = Vec::with_capacity(merged.len() + 1);
    values.push(apply(f1.values[0], f2.values[0]));
    for &t in &merged {
        // Both evals are in-range by construction.
        values.push(apply(f1.eval(t).unwrap(), f2.eval(t).unwrap()));
    }
    Ok(StepFunction { horizon: f1.horizon, breakpoints: merged, values })
}

/// Union of two sorted breakpoint lists, duplicates collapsed.
pub fn merge_breakpoints(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => {
                if x < y {
                    i += 1;
                    x
                } else if y < x {
                    j += 1;
                    y
                } else {
                    i += 1;
                    j += 1;
                    x
                }
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

/// Step function augmented with explicit values at its breakpoints. The
/// semicontinuous envelope of a step function with a genuine jump is not a
/// step function; it differs from one at isolated points only.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStep {
    base: StepFunction,
    point_values: Vec<f64>,
}

impl SampledStep {
    pub fn eval(&self, t: f64) -> Result<f64> {
        self.base.check_time(t)?;
        // Breakpoints are exact grid values shared with callers, so exact
        // comparison is the intended semantics.
        if let Ok(j) = self
            .base
            .breakpoints
            .binary_search_by(|b| b.partial_cmp(&t).unwrap())
        {
            return Ok(self.point_values[j]);
        }
        self.base.eval(t)
    }

    pub fn base(&self) -> &StepFunction {
        &self.base
    }
}

/// Upper and lower semicontinuous envelopes of one step function.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePair {
    pub usc: SampledStep,
    pub lsc: SampledStep,
}
