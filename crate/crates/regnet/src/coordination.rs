//! Distributed disaggregation of a regulation signal across aggregators.
//!
//! Each aggregator holds a convex cost, a capacity box and a ramp limit; the
//! fleet must split the required regulation `x_r` at minimum total cost. The
//! constrained dispatch is reformulated with exact penalties (one weight for
//! the shared-total constraint, one for the per-aggregator boxes) and solved
//! by gradient descent combined with dynamic average consensus, so that only
//! one aggregator needs to know `x_r` and every exchange happens along a
//! strongly connected weight-balanced digraph. A centralized solve of the same
//! penalized program provides the reference the distributed run is checked
//! against.
//!
//! The dynamics assume nonnegative required regulation; negative `x_r` is
//! handled by mirroring the problem (negate the signal, swap and negate the
//! boxes) and un-mirroring the returned allocation.

use crate::abstraction::MicrogridAbstraction;
use crate::convexsolve::{ConvexProgram, SolveError, Status};
use crate::netgraph::DiGraph;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Subgradient selection width: a penalty argument within this distance of
/// zero is treated as sitting on the kink and contributes nothing.
const KINK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CoordinationError {
    #[error("communication graph violates the convergence hypotheses: {0}")]
    GraphHypothesisViolated(String),
    #[error("dimension mismatch between models, previous setpoints and graph")]
    DimensionMismatch,
    #[error("gains must be positive")]
    BadGains,
    #[error("state became non-finite at step {0}")]
    NonFiniteState(usize),
    #[error("no aggregators")]
    Empty,
    #[error(transparent)]
    Solver(#[from] SolveError),
}

/// Closed-form description of an aggregator cost, for the centralized solver.
#[derive(Debug, Clone)]
pub enum CostModel {
    /// `a x^2 + b x`
    Quadratic { a: f64, b: f64 },
    /// Piecewise-linear epigraph samples.
    PiecewiseLinear { xs: Vec<f64>, ys: Vec<f64> },
}

/// What the coordination layer needs from one aggregator.
pub trait AggregatorModel: Sync {
    /// Cost of holding regulation `x`.
    fn cost(&self, x: f64) -> f64;
    /// A subgradient of the cost at `x`.
    fn cost_grad(&self, x: f64) -> f64;
    /// Capacity interval `(lo, hi)` with `lo <= 0 <= hi`.
    fn bounds(&self) -> (f64, f64);
    /// Reachable change within one instant when currently at `x_prev`.
    fn ramp(&self, x_prev: f64) -> f64;
    /// Cost description for the centralized reference solve.
    fn cost_model(&self) -> CostModel;
}

impl AggregatorModel for MicrogridAbstraction {
    fn cost(&self, x: f64) -> f64 {
        self.cost(x)
    }
    fn cost_grad(&self, x: f64) -> f64 {
        self.cost_grad(x)
    }
    fn bounds(&self) -> (f64, f64) {
        (self.up_capacity(), self.down_capacity())
    }
    fn ramp(&self, x_prev: f64) -> f64 {
        self.ramp(x_prev)
    }
    fn cost_model(&self) -> CostModel {
        CostModel::PiecewiseLinear {
            xs: self.cost_fn().xs().to_vec(),
            ys: self.cost_fn().ys().to_vec(),
        }
    }
}

/// Simple quadratic aggregator, mostly for experiments and tests.
#[derive(Debug, Clone)]
pub struct QuadraticAggregator {
    pub a: f64,
    pub b: f64,
    pub lo: f64,
    pub hi: f64,
    pub ramp: f64,
}

impl AggregatorModel for QuadraticAggregator {
    fn cost(&self, x: f64) -> f64 {
        self.a * x * x + self.b * x
    }
    fn cost_grad(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }
    fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
    fn ramp(&self, _x_prev: f64) -> f64 {
        self.ramp
    }
    fn cost_model(&self) -> CostModel {
        CostModel::Quadratic {
            a: self.a,
            b: self.b,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Gains {
    pub mu: f64,
    pub mu2: f64,
    pub nu: f64,
    pub beta: f64,
}

impl Gains {
    /// The gain set used in the reference experiments.
    pub fn paper() -> Self {
        Gains {
            mu: 1000.0,
            mu2: 1100.0,
            nu: 400.0,
            beta: 400.0,
        }
    }
}

/// One regulation instant for the fleet. Effective per-aggregator boxes (the
/// capacity interval intersected with what the ramp can reach from the
/// previous setpoint) are frozen at construction.
pub struct CoordinationProblem<'a> {
    models: &'a [&'a dyn AggregatorModel],
    x_r: f64,
    laplacian: DMatrix<f64>,
    gains: Gains,
    informed: usize,
    boxes: Vec<(f64, f64)>,
    mirrored: bool,
}

impl<'a> CoordinationProblem<'a> {
    pub fn new(
        models: &'a [&'a dyn AggregatorModel],
        x_r: f64,
        x_prev: &[f64],
        comm: &DiGraph,
        gains: Gains,
        informed: usize,
    ) -> Result<Self, CoordinationError> {
        let n = models.len();
        if n == 0 {
            return Err(CoordinationError::Empty);
        }
        if x_prev.len() != n || comm.vertex_count() != n || informed >= n {
            return Err(CoordinationError::DimensionMismatch);
        }
        if !(gains.mu > 0.0 && gains.mu2 > 0.0 && gains.nu > 0.0 && gains.beta > 0.0) {
            return Err(CoordinationError::BadGains);
        }
        if !comm.is_strongly_connected() {
            return Err(CoordinationError::GraphHypothesisViolated(
                "not strongly connected".into(),
            ));
        }
        if !comm.is_weight_balanced() {
            return Err(CoordinationError::GraphHypothesisViolated(
                "not weight-balanced".into(),
            ));
        }
        let mirrored = x_r < 0.0;
        let sign = if mirrored { -1.0 } else { 1.0 };
        let boxes = (0..n)
            .map(|i| {
                let reach = models[i].ramp(x_prev[i]).max(0.0);
                let (lo, hi) = models[i].bounds();
                let (lo, hi) = if mirrored { (-hi, -lo) } else { (lo, hi) };
                let prev = sign * x_prev[i];
                let b_lo = lo.max(prev - reach);
                let b_hi = hi.min(prev + reach);
                if b_lo <= b_hi {
                    (b_lo, b_hi)
                } else {
                    // capacity moved outside ramp reach; the reachable point
                    // nearest the capacity interval is all that remains
                    let p = if prev - reach > hi {
                        prev - reach
                    } else {
                        prev + reach
                    };
                    (p, p)
                }
            })
            .collect();
        Ok(CoordinationProblem {
            models,
            x_r: x_r.abs(),
            laplacian: comm.laplacian(),
            gains,
            informed,
            boxes,
            mirrored,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn gains(&self) -> Gains {
        self.gains
    }

    pub fn is_mirrored(&self) -> bool {
        self.mirrored
    }

    /// Effective boxes in the internal (mirrored) frame.
    pub fn effective_boxes(&self) -> &[(f64, f64)] {
        &self.boxes
    }

    /// Required regulation in the internal frame (always nonnegative).
    pub fn required(&self) -> f64 {
        self.x_r
    }

    fn cost_i(&self, i: usize, x: f64) -> f64 {
        if self.mirrored {
            self.models[i].cost(-x)
        } else {
            self.models[i].cost(x)
        }
    }

    fn grad_i(&self, i: usize, x: f64) -> f64 {
        if self.mirrored {
            -self.models[i].cost_grad(-x)
        } else {
            self.models[i].cost_grad(x)
        }
    }

    fn cost_model_i(&self, i: usize) -> CostModel {
        let model = self.models[i].cost_model();
        if !self.mirrored {
            return model;
        }
        match model {
            CostModel::Quadratic { a, b } => CostModel::Quadratic { a, b: -b },
            CostModel::PiecewiseLinear { xs, ys } => {
                let mut pairs: Vec<(f64, f64)> =
                    xs.into_iter().zip(ys).map(|(x, y)| (-x, y)).collect();
                pairs.reverse();
                let (xs, ys) = pairs.into_iter().unzip();
                CostModel::PiecewiseLinear { xs, ys }
            }
        }
    }

    fn map_out(&self, x: &DVector<f64>) -> Vec<f64> {
        let sign = if self.mirrored { -1.0 } else { 1.0 };
        x.iter().map(|&v| sign * v).collect()
    }

    /// Subgradient of the box-penalized cost `f + mu2 (over + under)` at `x`,
    /// component `i`, with the zero selection on the kinks.
    fn grad_fmu2(&self, i: usize, x: f64) -> f64 {
        let (lo, hi) = self.boxes[i];
        let mut g = self.grad_i(i, x);
        let over = x - hi;
        if over > KINK_TOL {
            g += self.gains.mu2;
        }
        let under = lo - x;
        if under > KINK_TOL {
            g -= self.gains.mu2;
        }
        g
    }

    /// Fully penalized objective (internal frame): total cost plus the box
    /// penalties plus the shortfall penalty.
    fn penalty_value_internal(&self, x: &DVector<f64>) -> f64 {
        let n = self.len();
        let mut value = 0.0;
        for i in 0..n {
            value += self.cost_i(i, x[i]);
            let (lo, hi) = self.boxes[i];
            value += self.gains.mu2 * ((x[i] - hi).max(0.0) + (lo - x[i]).max(0.0));
        }
        let shortfall = (self.x_r - x.sum()).max(0.0);
        value + self.gains.mu * shortfall
    }

    /// Penalized objective at an allocation given in the external frame.
    pub fn penalty_value(&self, x: &[f64]) -> f64 {
        let sign = if self.mirrored { -1.0 } else { 1.0 };
        let xi = DVector::from_fn(x.len(), |i, _| sign * x[i]);
        self.penalty_value_internal(&xi)
    }

    /// One Euler step of the gradient-descent + dynamic-average-consensus
    /// dynamics. The state lives in the internal frame.
    pub fn gdac_step(
        &self,
        state: &mut CoordinationState,
        dt: f64,
    ) -> Result<(), CoordinationError> {
        let n = self.len();
        let lz = &self.laplacian * &state.z;
        let mut xdot = DVector::zeros(n);
        for i in 0..n {
            let push = if state.z[i] > 0.0 { self.gains.mu } else { 0.0 };
            xdot[i] = -self.grad_fmu2(i, state.x[i]) + push;
        }
        let mut vdot = lz.scale(self.gains.nu * self.gains.beta);
        // center the v increment: its exact sum is zero, and removing the
        // floating-point drift here keeps 1'v at machine zero over long runs
        let mean = vdot.sum() / n as f64;
        vdot.add_scalar_mut(-mean);
        for i in 0..n {
            let e_i = if i == self.informed { self.x_r } else { 0.0 };
            let zdot = -self.gains.nu * state.z[i] - self.gains.beta * lz[i] - state.v[i]
                + self.gains.nu * (e_i - state.x[i])
                - xdot[i];
            state.z[i] += dt * zdot;
        }
        state.x += xdot.scale(dt);
        state.v += vdot.scale(dt);
        state.t += dt;
        state.steps += 1;
        if !state.x.iter().all(|v| v.is_finite())
            || !state.z.iter().all(|v| v.is_finite())
            || !state.v.iter().all(|v| v.is_finite())
        {
            return Err(CoordinationError::NonFiniteState(state.steps));
        }
        Ok(())
    }

    /// `|1'z - (x_r - 1'x)|`: the consensus-conservation residual that the
    /// prescribed initialization keeps at zero.
    pub fn conservation_residual(&self, state: &CoordinationState) -> f64 {
        (state.z.sum() - (self.x_r - state.x.sum())).abs()
    }

    /// Centralized solve of the penalized dispatch over the effective boxes,
    /// in the external frame.
    pub fn centralized_oracle(&self) -> Result<Vec<f64>, CoordinationError> {
        self.centralized_with_mu(self.gains.mu)
    }

    /// Centralized penalized solve with an explicit shortfall weight.
    pub fn centralized_with_mu(&self, mu: f64) -> Result<Vec<f64>, CoordinationError> {
        let n = self.len();
        let mut p = ConvexProgram::new(n + 1);
        let s = n;
        self.add_cost_objective(&mut p);
        p.add_linear(s, mu);
        p.bound(s, 0.0, f64::INFINITY);
        // x_r - sum x <= s
        let mut row: Vec<(usize, f64)> = (0..n).map(|i| (i, -1.0)).collect();
        row.push((s, -1.0));
        p.add_ineq(&row, -self.x_r);
        for i in 0..n {
            p.bound(i, self.boxes[i].0, self.boxes[i].1);
        }
        let sol = p.solve()?;
        match sol.status {
            Status::Optimal => Ok(self.map_out(&sol.x.rows(0, n).into_owned())),
            _ => Err(CoordinationError::Solver(SolveError::NumericalFailure(
                sol.iterations,
            ))),
        }
    }

    /// Hard-constrained dispatch (`sum x = x_r` over the boxes), in the
    /// external frame; `None` when infeasible.
    pub fn equality_constrained(&self) -> Result<Option<Vec<f64>>, CoordinationError> {
        let n = self.len();
        let mut p = ConvexProgram::new(n + 1);
        // keep the variable layout of the oracle; the slack is pinned to zero
        p.bound(n, 0.0, 0.0);
        self.add_cost_objective(&mut p);
        let row: Vec<(usize, f64)> = (0..n).map(|i| (i, 1.0)).collect();
        p.add_eq(&row, self.x_r);
        for i in 0..n {
            p.bound(i, self.boxes[i].0, self.boxes[i].1);
        }
        let sol = p.solve()?;
        match sol.status {
            Status::Optimal => Ok(Some(self.map_out(&sol.x.rows(0, n).into_owned()))),
            Status::Infeasible => Ok(None),
            Status::Unbounded => Err(CoordinationError::Solver(SolveError::NumericalFailure(
                sol.iterations,
            ))),
        }
    }

    /// Install the fleet cost on variables `0..n`, appending epigraph
    /// variables for piecewise-linear models.
    fn add_cost_objective(&self, p: &mut ConvexProgram) {
        let n = self.len();
        let pwl_count = (0..n)
            .filter(|&i| matches!(self.cost_model_i(i), CostModel::PiecewiseLinear { .. }))
            .count();
        let mut next_epi = p.add_variables(pwl_count);
        for i in 0..n {
            match self.cost_model_i(i) {
                CostModel::Quadratic { a, b } => {
                    p.add_quadratic(i, a);
                    p.add_linear(i, b);
                }
                CostModel::PiecewiseLinear { xs, ys } => {
                    let t = next_epi;
                    next_epi += 1;
                    p.add_linear(t, 1.0);
                    for k in 0..xs.len().saturating_sub(1) {
                        let slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]);
                        // t >= ys[k] + slope (x - xs[k])
                        p.add_ineq(&[(i, slope), (t, -1.0)], slope * xs[k] - ys[k]);
                    }
                    if xs.len() == 1 {
                        p.add_ineq(&[(t, -1.0)], -ys[0]);
                    }
                }
            }
        }
    }

    /// Largest cost-gradient magnitude over the effective boxes, for sizing
    /// the shortfall penalty (`2 * max + 1` makes the penalty exact).
    pub fn max_grad_over_boxes(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            let (lo, hi) = self.boxes[i];
            match self.cost_model_i(i) {
                CostModel::Quadratic { a, b } => {
                    worst = worst
                        .max((2.0 * a * lo + b).abs())
                        .max((2.0 * a * hi + b).abs());
                }
                CostModel::PiecewiseLinear { xs, ys } => {
                    for k in 0..xs.len().saturating_sub(1) {
                        if xs[k + 1] < lo || xs[k] > hi {
                            continue;
                        }
                        let slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]);
                        worst = worst.max(slope.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Per-aggregator coordination state `(x, z, v)` and elapsed algorithm time.
/// When the problem was mirrored, the state lives in the mirrored frame.
#[derive(Debug, Clone)]
pub struct CoordinationState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
    pub steps: usize,
}

impl CoordinationState {
    /// The prescribed initialization: everything zero except the informed
    /// aggregator, which starts at the required regulation.
    pub fn theorem_init(prob: &CoordinationProblem) -> Self {
        let n = prob.len();
        let mut x = DVector::zeros(n);
        x[prob.informed] = prob.x_r;
        CoordinationState {
            x,
            z: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0.0,
            steps: 0,
        }
    }
}

/// One Euler step of dynamic average consensus:
/// `zdot = udot - nu (z - u) - beta L z - v`, `vdot = nu beta L z`.
pub fn dac_step(
    z: &mut DVector<f64>,
    v: &mut DVector<f64>,
    u: &DVector<f64>,
    u_dot: &DVector<f64>,
    laplacian: &DMatrix<f64>,
    nu: f64,
    beta: f64,
    dt: f64,
) {
    let lz = laplacian * &*z;
    let zdot = u_dot - (&*z - u).scale(nu) - lz.scale(beta) - &*v;
    let mut vdot = lz.scale(nu * beta);
    let mean = vdot.sum() / vdot.len() as f64;
    vdot.add_scalar_mut(-mean);
    *z += zdot.scale(dt);
    *v += vdot.scale(dt);
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub sum_x: f64,
    pub delta_x: f64,
    pub fp: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub dt: f64,
    pub max_steps: usize,
    /// Convergence: `|xdot|_inf < tol * (1 + |x_r|)` sustained for 100 steps.
    pub tol: f64,
    pub trace_stride: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            dt: 1e-3,
            max_steps: 200_000,
            tol: 1e-3,
            trace_stride: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// Final allocation in the external frame.
    pub x: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
    /// The chattering guard halved the step size once during the run.
    pub dt_halved: bool,
    pub trace: Vec<TraceRow>,
    pub final_state: CoordinationState,
}

/// Integrate the distributed dynamics from the prescribed initialization
/// until the allocation settles (or `max_steps`). On a non-converged run the
/// returned allocation is the best iterate by penalized objective.
pub fn solve_instant(
    prob: &CoordinationProblem,
    opts: SolveOptions,
) -> Result<SolveOutcome, CoordinationError> {
    let n = prob.len();
    let mut state = CoordinationState::theorem_init(prob);
    let mut dt = opts.dt;
    let mut dt_halved = false;
    let threshold = opts.tol * (1.0 + prob.x_r.abs());
    let mut quiet = 0usize;
    let mut trace = Vec::new();
    let mut best_fp = f64::INFINITY;
    let mut best_x = state.x.clone();
    let mut converged = false;
    let mut prev_fp = [f64::INFINITY; 2];
    let mut chatter = 0usize;

    let mut record = |state: &CoordinationState, fp: f64, trace: &mut Vec<TraceRow>| {
        let x_out = prob.map_out(&state.x);
        let sum: f64 = state.x.sum();
        let sign = if prob.mirrored { -1.0 } else { 1.0 };
        trace.push(TraceRow {
            step: state.steps,
            t: state.t,
            x: x_out,
            sum_x: sign * sum,
            delta_x: sign * (prob.x_r - sum),
            fp,
        });
    };

    record(&state, prob.penalty_value_internal(&state.x), &mut trace);
    for step in 0..opts.max_steps {
        let x_before = state.x.clone();
        prob.gdac_step(&mut state, dt)?;
        // periodic re-projection of the consensus integrator
        if state.steps % 10_000 == 0 {
            let mean = state.v.sum() / n as f64;
            state.v.add_scalar_mut(-mean);
        }
        let fp = prob.penalty_value_internal(&state.x);
        if fp < best_fp {
            best_fp = fp;
            best_x.copy_from(&state.x);
        }
        if state.steps % opts.trace_stride == 0 {
            record(&state, fp, &mut trace);
        }
        // chattering guard: period-2 oscillation of the penalized objective
        if (fp - prev_fp[1]).abs() <= 1e-9 * (1.0 + fp.abs())
            && (fp - prev_fp[0]).abs() > threshold
        {
            chatter += 1;
            if chatter >= 1000 && !dt_halved {
                dt *= 0.5;
                dt_halved = true;
                chatter = 0;
            }
        } else {
            chatter = 0;
        }
        prev_fp[1] = prev_fp[0];
        prev_fp[0] = fp;

        let step_inf = (&state.x - &x_before).amax() / dt;
        if step_inf < threshold {
            quiet += 1;
            if quiet >= 100 {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
        let _ = step;
    }
    let fp = prob.penalty_value_internal(&state.x);
    record(&state, fp, &mut trace);
    let x_final = if converged { state.x.clone() } else { best_x };
    Ok(SolveOutcome {
        x: prob.map_out(&x_final),
        converged,
        steps: state.steps,
        dt_halved,
        trace,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn pair_graph() -> DiGraph {
        DiGraph::new(2, vec![(1, 2), (2, 1)]).unwrap()
    }

    fn ring(n: usize) -> DiGraph {
        let edges = (1..=n).map(|i| (i, i % n + 1)).collect();
        DiGraph::new(n, edges).unwrap()
    }

    #[test]
    fn dac_constant_inputs_reach_average() {
        let lap = pair_graph().laplacian();
        let u = dvector![0.0, 2.0];
        let u_dot = dvector![0.0, 0.0];
        let mut z = DVector::zeros(2);
        let mut v = DVector::zeros(2);
        for _ in 0..100_000 {
            dac_step(&mut z, &mut v, &u, &u_dot, &lap, 1.0, 1.0, 1e-3);
        }
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-6);
        assert!(v.sum().abs() < 1e-12);
    }

    #[test]
    fn dac_uniform_input_is_fixed_point() {
        let lap = ring(4).laplacian();
        let u = DVector::from_element(4, 3.5);
        let u_dot = DVector::zeros(4);
        let mut z = u.clone();
        let mut v = DVector::zeros(4);
        for _ in 0..100 {
            dac_step(&mut z, &mut v, &u, &u_dot, &lap, 2.0, 3.0, 1e-3);
        }
        assert!((z - u).amax() < 1e-12);
        assert!(v.amax() < 1e-12);
    }

    #[test]
    fn dac_tracks_common_ramp() {
        // u_i(t) = t + c_i: the offsets average out and the common drift is
        // fed through u_dot, so the tracking error vanishes
        let lap = pair_graph().laplacian();
        let offsets = dvector![0.0, 2.0];
        let u_dot = dvector![1.0, 1.0];
        let mut z = DVector::zeros(2);
        let mut v = DVector::zeros(2);
        let dt = 1e-3;
        let mut t = 0.0;
        for _ in 0..100_000 {
            let u = DVector::from_fn(2, |i, _| t + offsets[i]);
            dac_step(&mut z, &mut v, &u, &u_dot, &lap, 1.0, 1.0, dt);
            t += dt;
        }
        let target = t + 1.0;
        assert_abs_diff_eq!(z[0], target, epsilon = 1e-6);
        assert_abs_diff_eq!(z[1], target, epsilon = 1e-6);
    }

    fn quad(a: f64, hi: f64, ramp: f64) -> QuadraticAggregator {
        QuadraticAggregator {
            a,
            b: 0.0,
            lo: -hi,
            hi,
            ramp,
        }
    }

    fn small_gains() -> Gains {
        Gains {
            mu: 10.0,
            mu2: 11.0,
            nu: 4.0,
            beta: 4.0,
        }
    }

    #[test]
    fn penalty_value_examples() {
        let m1 = quad(1.0, 100.0, 100.0);
        let m2 = quad(1.0, 100.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let gains = Gains {
            mu: 10.0,
            mu2: 11.0,
            nu: 1.0,
            beta: 1.0,
        };
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), gains, 0).unwrap();
        // shortfall of 1 at (1,1)
        assert_abs_diff_eq!(prob.penalty_value(&[1.0, 1.0]), 2.0 + 10.0, epsilon = 1e-12);
        // exact total: only the cost remains
        assert_abs_diff_eq!(prob.penalty_value(&[1.0, 2.0]), 5.0, epsilon = 1e-12);

        // box violated by 0.5 adds mu2 * 0.5
        let m3 = quad(1.0, 1.0, 0.5);
        let models: Vec<&dyn AggregatorModel> = vec![&m3, &m2];
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), gains, 0).unwrap();
        // box of aggregator 0 is [-0.5, 0.5]; x = 1.0 violates by 0.5
        let base = 1.0 + 4.0; // costs at (1, 2)
        assert_abs_diff_eq!(
            prob.penalty_value(&[1.0, 2.0]),
            base + 11.0 * 0.5,
            epsilon = 1e-12
        );
    }

    /// Gains in the reference ratio (penalties sized to the gradients,
    /// consensus rates kept high) for the unit-scale dynamics tests.
    fn fast_gains() -> Gains {
        Gains {
            mu: 10.0,
            mu2: 11.0,
            nu: 400.0,
            beta: 400.0,
        }
    }

    #[test]
    fn gdac_symmetric_pair_splits_evenly() {
        let m = quad(1.0, 1.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m, &m];
        let prob =
            CoordinationProblem::new(&models, 2.0, &[0.0, 0.0], &pair_graph(), fast_gains(), 0)
                .unwrap();
        let opts = SolveOptions {
            dt: 1e-5,
            max_steps: 100_000,
            ..Default::default()
        };
        let out = solve_instant(&prob, opts).unwrap();
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn gdac_weighted_pair_matches_oracle() {
        let m1 = quad(1.0, 2.0, 100.0);
        let m2 = quad(2.0, 2.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), fast_gains(), 0)
                .unwrap();
        let opts = SolveOptions {
            dt: 1e-5,
            max_steps: 150_000,
            ..Default::default()
        };
        let out = solve_instant(&prob, opts).unwrap();
        // stationarity: marginal costs equalize, 2 x1 = 4 x2 with x1 + x2 = 3
        assert_abs_diff_eq!(out.x[0], 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-3);
        let oracle = prob.centralized_oracle().unwrap();
        assert_abs_diff_eq!(oracle[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(oracle[1], 1.0, epsilon = 1e-6);
        for i in 0..2 {
            assert!((out.x[i] - oracle[i]).abs() <= 1e-3 * (1.0 + 3.0));
        }
    }

    #[test]
    fn gdac_saturates_on_infeasible_instant() {
        // effective boxes collapse to [0, 0.5] through the ramp limit
        let m = quad(1.0, 100.0, 0.5);
        let models: Vec<&dyn AggregatorModel> = vec![&m, &m];
        let prob =
            CoordinationProblem::new(&models, 2.0, &[0.0, 0.0], &pair_graph(), small_gains(), 0)
                .unwrap();
        assert_eq!(prob.effective_boxes(), &[(-0.5, 0.5), (-0.5, 0.5)]);
        let opts = SolveOptions {
            dt: 5e-5,
            max_steps: 150_000,
            ..Default::default()
        };
        let out = solve_instant(&prob, opts).unwrap();
        assert_abs_diff_eq!(out.x[0], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[1], 0.5, epsilon = 1e-3);
        let residual = 2.0 - out.x.iter().sum::<f64>();
        assert_abs_diff_eq!(residual, 1.0, epsilon = 3e-3);
        // oracle agrees: the box-clipped optimum saturates the upper corners
        let oracle = prob.centralized_oracle().unwrap();
        assert_abs_diff_eq!(oracle[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(oracle[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn single_aggregator_clips_to_box() {
        let m = quad(0.01, 1.5, 10.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m];
        let solo = DiGraph::new(1, vec![]).unwrap();
        let prob =
            CoordinationProblem::new(&models, 4.0, &[0.0], &solo, small_gains(), 0).unwrap();
        let out = solve_instant(&prob, SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(out.x[0], 1.5, epsilon = 1e-3);
    }

    #[test]
    fn oracle_insensitive_to_penalty_above_threshold() {
        let m1 = quad(1.0, 4.0, 100.0);
        let m2 = quad(2.0, 4.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), small_gains(), 0)
                .unwrap();
        let mu_hat = 2.0 * prob.max_grad_over_boxes() + 1.0;
        let a = prob.centralized_with_mu(mu_hat).unwrap();
        let b = prob.centralized_with_mu(10.0 * mu_hat).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn equality_solve_matches_oracle_when_feasible() {
        let m1 = quad(1.5, 4.0, 100.0);
        let m2 = quad(0.7, 4.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), small_gains(), 0)
                .unwrap();
        let eq = prob.equality_constrained().unwrap().unwrap();
        let mu = 2.0 * prob.max_grad_over_boxes() + 1.0;
        let pen = prob.centralized_with_mu(mu).unwrap();
        for i in 0..2 {
            assert!((eq[i] - pen[i]).abs() <= 1e-5, "{} vs {}", eq[i], pen[i]);
        }
    }

    #[test]
    fn conservation_and_v_sum_hold_along_run() {
        let m1 = quad(1.0, 100.0, 100.0);
        let m2 = quad(2.0, 100.0, 100.0);
        let m3 = quad(0.5, 100.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2, &m3];
        let prob =
            CoordinationProblem::new(&models, 5.0, &[0.0; 3], &ring(3), small_gains(), 1).unwrap();
        let mut state = CoordinationState::theorem_init(&prob);
        assert_eq!(prob.conservation_residual(&state), 0.0);
        for _ in 0..20_000 {
            prob.gdac_step(&mut state, 1e-4).unwrap();
            assert!(prob.conservation_residual(&state) <= 1e-8 * (1.0 + 5.0));
            assert!(state.v.sum().abs() <= 1e-9);
        }
    }

    #[test]
    fn lyapunov_descends_up_to_euler_error() {
        // slack boxes: the analyzed dynamics coincide with the implemented
        // ones, and V = f(x) + mu [dx]+ + mu sum[z]+ + 0.5 |eta|^2 descends
        let m1 = quad(1.0, 100.0, 100.0);
        let m2 = quad(2.0, 100.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let gains = small_gains();
        let prob =
            CoordinationProblem::new(&models, 3.0, &[0.0, 0.0], &pair_graph(), gains, 0).unwrap();
        let dt = 5e-5;
        let mut state = CoordinationState::theorem_init(&prob);
        let value = |s: &CoordinationState| {
            let f: f64 = (0..2).map(|i| prob.cost_i(i, s.x[i])).sum();
            let dx = prob.x_r - s.x.sum();
            let zplus: f64 = s.z.iter().map(|&z| z.max(0.0)).sum();
            let e = DVector::from_fn(2, |i, _| if i == 0 { prob.x_r } else { 0.0 });
            let eta = (&s.z - (e - &s.x)).scale(gains.nu) + &s.v;
            f + gains.mu * dx.max(0.0) + gains.mu * zplus + 0.5 * eta.norm_squared()
        };
        let mut prev = value(&state);
        let mut worst_rise = 0.0f64;
        for _ in 0..100_000 {
            prob.gdac_step(&mut state, dt).unwrap();
            let now = value(&state);
            worst_rise = worst_rise.max(now - prev);
            prev = now;
        }
        // Euler error scales with dt * |dynamics|^2; anything near this
        // bound would indicate ascent, not discretization noise
        let scale = (gains.mu + gains.mu2 + 10.0).powi(2);
        assert!(
            worst_rise <= dt * scale,
            "worst rise {worst_rise} vs allowance {}",
            dt * scale
        );
    }

    #[test]
    fn mirrored_negative_regulation() {
        let m1 = quad(1.0, 2.0, 100.0);
        let m2 = quad(2.0, 2.0, 100.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m1, &m2];
        let prob =
            CoordinationProblem::new(&models, -3.0, &[0.0, 0.0], &pair_graph(), fast_gains(), 0)
                .unwrap();
        assert!(prob.is_mirrored());
        let oracle = prob.centralized_oracle().unwrap();
        assert_abs_diff_eq!(oracle[0], -2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(oracle[1], -1.0, epsilon = 1e-6);
        let opts = SolveOptions {
            dt: 1e-5,
            max_steps: 150_000,
            ..Default::default()
        };
        let out = solve_instant(&prob, opts).unwrap();
        assert_abs_diff_eq!(out.x[0], -2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[1], -1.0, epsilon = 1e-3);
    }

    #[test]
    fn graph_hypotheses_enforced() {
        let m = quad(1.0, 1.0, 1.0);
        let models: Vec<&dyn AggregatorModel> = vec![&m, &m];
        let one_way = DiGraph::new(2, vec![(1, 2)]).unwrap();
        assert!(matches!(
            CoordinationProblem::new(&models, 1.0, &[0.0, 0.0], &one_way, small_gains(), 0),
            Err(CoordinationError::GraphHypothesisViolated(_))
        ));
        let unbalanced =
            DiGraph::with_weights(2, vec![(1, 2), (2, 1)], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            CoordinationProblem::new(&models, 1.0, &[0.0, 0.0], &unbalanced, small_gains(), 0),
            Err(CoordinationError::GraphHypothesisViolated(_))
        ));
    }
}
