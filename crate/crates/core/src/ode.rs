//! Explicit Runge-Kutta integration driven by coefficient tables.
//!
//! A scheme with `n` stages advances `y` by
//!
//! ```text
//! y_next = y + sum_i gamma_i * F_i
//! F_1    = h * f(y, t)
//! F_i    = h * f(y + sum_{j<i} beta_ij * F_j, t + alpha_i * h)
//! ```
//!
//! All arithmetic is `f64`; order estimation needs the headroom.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Global errors below this are treated as round-off and refuse order
/// estimation.
pub const PRECISION_FLOOR: f64 = 1e-13;

/// Butcher-style coefficient table of an explicit Runge-Kutta method.
#[derive(Debug, Clone, PartialEq)]
pub struct RkScheme {
    name: String,
    alpha: Vec<f64>,
    /// Row-major `stages x stages`, strictly lower triangular.
    beta: Vec<f64>,
    gamma: Vec<f64>,
    nominal_order: usize,
}

impl RkScheme {
    /// Builds a scheme from its table. `beta` is given row by row.
    pub fn new(
        name: impl Into<String>,
        alpha: Vec<f64>,
        beta: Vec<Vec<f64>>,
        gamma: Vec<f64>,
        nominal_order: usize,
    ) -> Result<Self> {
        let n = gamma.len();
        if n == 0 {
            return Err(Error::invalid("scheme needs at least one stage"));
        }
        if nominal_order == 0 {
            return Err(Error::invalid("nominal order must be at least 1"));
        }
        if alpha.len() != n || beta.len() != n {
            return Err(Error::dim("rk_scheme", &[alpha.len(), beta.len()], &[n, n]));
        }
        let mut flat = vec![0.0; n * n];
        for (i, row) in beta.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim("rk_scheme", &[row.len()], &[n]));
            }
            for (j, &b) in row.iter().enumerate() {
                if j >= i && b != 0.0 {
                    return Err(Error::invalid("beta must be strictly lower triangular"));
                }
                flat[i * n + j] = b;
            }
        }
        Ok(Self { name: name.into(), alpha, beta: flat, gamma, nominal_order })
    }

    /// Forward Euler: one stage, first order.
    pub fn euler() -> Self {
        Self::new("euler", vec![0.0], vec![vec![0.0]], vec![1.0], 1).expect("valid table")
    }

    /// Improved Euler (Heun): the two-stage, second-order method.
    pub fn rk2() -> Self {
        Self::new("rk2", vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.5], 2).expect("valid table")
    }

    /// Classical fourth-order Runge-Kutta.
    pub fn rk4() -> Self {
        Self::new(
            "rk4",
            vec![0.0, 0.5, 0.5, 1.0],
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0],
            4,
        )
        .expect("valid table")
    }

    pub fn presets() -> [Self; 3] {
        [Self::euler(), Self::rk2(), Self::rk4()]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.gamma.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self, i: usize, j: usize) -> f64 {
        self.beta[i * self.stages() + j]
    }

    pub fn nominal_order(&self) -> usize {
        self.nominal_order
    }

    /// `sum(gamma) == 1` within 1e-12.
    pub fn is_consistent(&self) -> bool {
        (self.gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    }
}

/// Vector field `f(y, t)` writing `dy/dt` into the output slice.
pub type FieldFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;
/// Exact solution `t -> y(t)`.
pub type AnalyticFn = dyn Fn(f64) -> Vec<f64> + Send + Sync;

/// Initial value problem on `[t0, t_end]`.
pub struct OdeProblem {
    pub name: String,
    pub field: Box<FieldFn>,
    pub y0: Vec<f64>,
    pub t0: f64,
    pub t_end: f64,
    pub analytic: Option<Box<AnalyticFn>>,
}

impl core::fmt::Debug for OdeProblem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("OdeProblem")
            .field("name", &self.name)
            .field("y0", &self.y0)
            .field("t0", &self.t0)
            .field("t_end", &self.t_end)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl OdeProblem {
    pub fn new(
        name: impl Into<String>,
        field: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        y0: Vec<f64>,
        t0: f64,
        t_end: f64,
    ) -> Result<Self> {
        if !(t_end > t0) {
            return Err(Error::invalid("t_end must exceed t0"));
        }
        if y0.is_empty() {
            return Err(Error::invalid("empty initial state"));
        }
        Ok(Self { name: name.into(), field: Box::new(field), y0, t0, t_end, analytic: None })
    }

    pub fn with_analytic(mut self, exact: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.analytic = Some(Box::new(exact));
        self
    }

    /// `y' = lambda * y`, `y(0) = 1` on `[0, 1]`.
    pub fn exponential(lambda: f64) -> Self {
        Self::new(
            if lambda < 0.0 { "decay" } else { "growth" },
            move |y, _t, dy| dy[0] = lambda * y[0],
            vec![1.0],
            0.0,
            1.0,
        )
        .expect("valid problem")
        .with_analytic(move |t| vec![libm::exp(lambda * t)])
    }

    /// `y' = cos t`, `y(0) = 0` on `[0, 1]`; exact solution `sin t`.
    pub fn cosine() -> Self {
        Self::new("cosine", |_y, t, dy| dy[0] = libm::cos(t), vec![0.0], 0.0, 1.0)
            .expect("valid problem")
            .with_analytic(|t| vec![libm::sin(t)])
    }

    pub fn dim(&self) -> usize {
        self.y0.len()
    }
}

/// States sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// One explicit Runge-Kutta step of size `h` from `(y, t)`.
pub fn rk_step<F>(scheme: &RkScheme, f: F, y: &[f64], t: f64, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("step size must be positive and finite"));
    }
    let n = scheme.stages();
    let d = y.len();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut probe = vec![0.0; d];
    for i in 0..n {
        probe.copy_from_slice(y);
        for (j, fj) in stages.iter().enumerate() {
            let b = scheme.beta(i, j);
            if b != 0.0 {
                for (p, v) in probe.iter_mut().zip(fj) {
                    *p += b * v;
                }
            }
        }
        let mut k = vec![0.0; d];
        f(&probe, t + scheme.alpha[i] * h, &mut k);
        for v in k.iter_mut() {
            *v *= h;
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::StageOverflow { stage: i });
        }
        stages.push(k);
    }
    let mut out = y.to_vec();
    for (g, k) in scheme.gamma.iter().zip(&stages) {
        for (o, v) in out.iter_mut().zip(k) {
            *o += g * v;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::StageOverflow { stage: n - 1 });
    }
    Ok(out)
}

/// Integrates `problem` with `n_steps` uniform steps.
pub fn integrate(scheme: &RkScheme, problem: &OdeProblem, n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let h = (problem.t_end - problem.t0) / n_steps as f64;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(problem.t0);
    states.push(problem.y0.clone());
    let field = |y: &[f64], t: f64, dy: &mut [f64]| (problem.field)(y, t, dy);
    for step in 0..n_steps {
        let t = problem.t0 + step as f64 * h;
        let next = rk_step(scheme, field, &states[step], t, h).map_err(|e| match e {
            Error::StageOverflow { stage } => Error::StepOverflow { step, stage },
            other => other,
        })?;
        times.push(problem.t0 + (step + 1) as f64 * h);
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// One row of an order study.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub scheme: String,
    pub n_steps: usize,
    pub error: f64,
    /// `log2(e_{n/2} / e_n)`; absent on the coarsest grid.
    pub local_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEstimate {
    pub scheme: String,
    pub problem: String,
    /// Mean of the pairwise estimates.
    pub order: f64,
    pub rows: Vec<OrderRow>,
}

/// Max-norm global error at `t_end`.
pub fn global_error(scheme: &RkScheme, problem: &OdeProblem, n_steps: usize) -> Result<f64> {
    let exact = problem.analytic.as_ref().ok_or_else(|| Error::invalid("problem has no analytic solution"))?;
    let traj = integrate(scheme, problem, n_steps)?;
    let truth = exact(problem.t_end);
    Ok(traj.last().iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Estimates the convergence order from successive step doublings.
pub fn empirical_order(scheme: &RkScheme, problem: &OdeProblem, step_counts: &[usize]) -> Result<OrderEstimate> {
    if step_counts.len() < 2 {
        return Err(Error::invalid("need at least two step counts"));
    }
    if step_counts[0] == 0 || step_counts.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::invalid("step counts must double successively"));
    }
    let mut rows: Vec<OrderRow> = Vec::with_capacity(step_counts.len());
    for &n in step_counts {
        let error = global_error(scheme, problem, n)?;
        if error < PRECISION_FLOOR {
            return Err(Error::PrecisionFloor { n_steps: n, error });
        }
        let local_order = rows.last().map(|prev| libm::log2(prev.error / error));
        rows.push(OrderRow { scheme: scheme.name().to_string(), n_steps: n, error, local_order });
    }
    let estimates: Vec<f64> = rows.iter().filter_map(|r| r.local_order).collect();
    let order = estimates.iter().sum::<f64>() / estimates.len() as f64;
    Ok(OrderEstimate { scheme: scheme.name().to_string(), problem: problem.name.clone(), order, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn grow(y: &[f64], _t: f64, dy: &mut [f64]) {
        dy[0] = y[0];
    }

    #[test]
    fn euler_single_step() {
        let y = rk_step(&RkScheme::euler(), grow, &[1.0], 0.0, 0.1).unwrap();
        assert_eq!(y[0], 1.1);
    }

    #[test]
    fn rk2_single_step_matches_hand_iteration() {
        // F1 = 0.1, F2 = 0.1 * 1.1 = 0.11, y + (F1 + F2) / 2
        let y = rk_step(&RkScheme::rk2(), grow, &[1.0], 0.0, 0.1).unwrap();
        assert!((y[0] - 1.105).abs() < 1e-15);
    }

    #[test]
    fn rk4_single_step_matches_hand_iteration() {
        // Four-stage hand iteration of y' = y: 1 + h + h^2/2 + h^3/6 + h^4/24.
        let h: f64 = 0.1;
        let f1 = h;
        let f2 = h * (1.0 + f1 / 2.0);
        let f3 = h * (1.0 + f2 / 2.0);
        let f4 = h * (1.0 + f3);
        let hand = 1.0 + (f1 + 2.0 * f2 + 2.0 * f3 + f4) / 6.0;
        let y = rk_step(&RkScheme::rk4(), grow, &[1.0], 0.0, h).unwrap();
        assert!((y[0] - hand).abs() < 1e-15);
        assert!((y[0] - 1.105_170_833_333_333).abs() < 1e-14);
        assert!((y[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn preset_tables() {
        let rk4 = RkScheme::rk4();
        assert_eq!(rk4.beta(1, 0), 0.5);
        assert_eq!(rk4.beta(2, 1), 0.5);
        assert_eq!(rk4.beta(3, 2), 1.0);
        assert_eq!(rk4.beta(3, 0), 0.0);
        for s in RkScheme::presets() {
            assert!(s.is_consistent(), "{}", s.name());
            for i in 0..s.stages() {
                for j in i..s.stages() {
                    assert_eq!(s.beta(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_implicit_table() {
        let err = RkScheme::new("bad", vec![0.0], vec![vec![1.0]], vec![1.0], 1);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(rk_step(&RkScheme::euler(), grow, &[1.0], 0.0, 0.0).is_err());
        assert!(rk_step(&RkScheme::euler(), grow, &[1.0], 0.0, -0.1).is_err());
    }

    #[test]
    fn overflow_reports_stage() {
        // Stage 0 is finite; stage 1 evaluates at y + F1 = 1e308 + 1e308.
        let f = |y: &[f64], _t: f64, dy: &mut [f64]| dy[0] = y[0];
        let err = rk_step(&RkScheme::rk2(), f, &[1e308], 0.0, 1.0).unwrap_err();
        assert_eq!(err, Error::StageOverflow { stage: 1 });

        let p = OdeProblem::new("blowup", |y, _t, dy| dy[0] = y[0] * y[0], vec![1.0], 0.0, 10.0).unwrap();
        let err = integrate(&RkScheme::euler(), &p, 20).unwrap_err();
        assert!(matches!(err, Error::StepOverflow { stage: 0, .. }));
    }

    #[test]
    fn euler_integration_is_repeated_multiplication() {
        let p = OdeProblem::exponential(1.0);
        let traj = integrate(&RkScheme::euler(), &p, 10).unwrap();
        let mut oracle = 1.0f64;
        for _ in 0..10 {
            oracle *= 1.1;
        }
        assert_eq!(traj.len(), 11);
        assert_eq!(traj.states[0], vec![1.0]);
        assert_eq!(traj.times[0], 0.0);
        assert!((traj.last()[0] - oracle).abs() < 1e-12);
        assert!((traj.last()[0] - 2.593_742_460_1).abs() < 1e-9);
    }

    #[test]
    fn zero_field_keeps_state() {
        let p = OdeProblem::new("still", |_y, _t, dy| dy.fill(0.0), vec![3.5, -2.0], 0.0, 2.0).unwrap();
        for s in RkScheme::presets() {
            let traj = integrate(&s, &p, 7).unwrap();
            assert!(traj.states.iter().all(|row| row == &[3.5, -2.0]));
        }
    }

    #[test]
    fn rk4_decay_twenty_steps() {
        let p = OdeProblem::exponential(-1.0);
        let traj = integrate(&RkScheme::rk4(), &p, 20).unwrap();
        assert!((traj.last()[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn constant_field_is_exact() {
        let f = |_y: &[f64], _t: f64, dy: &mut [f64]| dy.fill(0.75);
        for s in RkScheme::presets() {
            let y = rk_step(&s, f, &[2.0, -1.0], 0.3, 0.25).unwrap();
            assert_eq!(y, vec![2.0 + 0.25 * 0.75, -1.0 + 0.25 * 0.75], "{}", s.name());
        }
    }

    #[test]
    fn stages_are_evaluated_in_order() {
        // Each stage must be evaluated once, in increasing stage order, and
        // only after every stage it depends on.
        for s in RkScheme::presets() {
            let calls = RefCell::new(Vec::new());
            let h = 0.5;
            let f = |y: &[f64], t: f64, dy: &mut [f64]| {
                calls.borrow_mut().push(t);
                dy[0] = y[0] + t;
            };
            rk_step(&s, f, &[1.0], 0.0, h).unwrap();
            let expected: Vec<f64> = s.alpha().iter().map(|a| a * h).collect();
            assert_eq!(*calls.borrow(), expected, "{}", s.name());
        }
    }

    #[test]
    fn orders_on_decay() {
        let p = OdeProblem::exponential(-1.0);
        let counts = [16, 32, 64, 128];
        let euler = empirical_order(&RkScheme::euler(), &p, &counts).unwrap();
        let rk2 = empirical_order(&RkScheme::rk2(), &p, &counts).unwrap();
        let rk4 = empirical_order(&RkScheme::rk4(), &p, &counts).unwrap();
        assert!((0.9..=1.1).contains(&euler.order), "{}", euler.order);
        assert!((1.9..=2.1).contains(&rk2.order), "{}", rk2.order);
        assert!((3.7..=4.3).contains(&rk4.order), "{}", rk4.order);
        assert_eq!(rk4.rows.len(), 4);
        assert!(rk4.rows[0].local_order.is_none());
    }

    #[test]
    fn orders_on_cosine() {
        let p = OdeProblem::cosine();
        let counts = [16, 32, 64, 128];
        let bands = [(0.9, 1.1), (1.9, 2.1), (3.7, 4.3)];
        for (s, (lo, hi)) in RkScheme::presets().iter().zip(bands) {
            let est = empirical_order(s, &p, &counts).unwrap();
            assert!(est.order >= lo && est.order <= hi, "{} {}", s.name(), est.order);
        }
    }

    #[test]
    fn precision_floor_is_reported() {
        // Linear-in-t solution is integrated exactly by every consistent scheme.
        let p = OdeProblem::new("linear", |_y, _t, dy| dy[0] = 1.0, vec![0.0], 0.0, 1.0)
            .unwrap()
            .with_analytic(|t| vec![t]);
        let err = empirical_order(&RkScheme::rk2(), &p, &[4, 8]).unwrap_err();
        assert!(matches!(err, Error::PrecisionFloor { .. }));
    }

    #[test]
    fn order_needs_doubling_counts() {
        let p = OdeProblem::exponential(-1.0);
        assert!(empirical_order(&RkScheme::euler(), &p, &[16]).is_err());
        assert!(empirical_order(&RkScheme::euler(), &p, &[16, 24]).is_err());
        let no_exact = OdeProblem::new("x", |_y, _t, dy| dy[0] = 0.0, vec![1.0], 0.0, 1.0).unwrap();
        assert!(empirical_order(&RkScheme::euler(), &no_exact, &[2, 4]).is_err());
    }

    #[test]
    fn integration_is_deterministic() {
        let p = OdeProblem::cosine();
        let a = integrate(&RkScheme::rk4(), &p, 33).unwrap();
        let b = integrate(&RkScheme::rk4(), &p, 33).unwrap();
        assert_eq!(a, b);
    }
}
