//! Minimal deterministic solver for the small dense linear and convex
//! quadratic programs produced by the abstraction and coordination modules.
//!
//! Programs are
//!
//! ```text
//!     minimize    1/2 x' Q x + c' x
//!     subject to  A x <= b,   E x = d,   lo <= x <= hi
//! ```
//!
//! with `Q` symmetric positive semidefinite (possibly zero). The solver runs a
//! Phase-I elastic program to certify feasibility, then a Mehrotra
//! predictor-corrector interior-point iteration, and finishes with an
//! active-set polish that refines the returned point to near machine
//! precision when the active set is identified correctly. There is no
//! randomness and no data-dependent pivoting beyond LU partial pivoting, so
//! identical inputs always produce identical outputs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// All numerical tolerances in one place.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Absolute-with-scale primal feasibility target on the returned point.
    pub feas_tol: f64,
    /// Scaled stationarity / complementarity target on the returned point.
    pub stat_tol: f64,
    /// Interior-point convergence target (tighter than the acceptance
    /// thresholds above; polish usually lands well below it).
    pub ipm_tol: f64,
    /// Phase-I objective above `phase1_tol * (1 + |rhs|_inf)` means infeasible.
    pub phase1_tol: f64,
    /// Static regularization added to the KKT systems.
    pub kkt_reg: f64,
    /// Iterate norms beyond this scale are treated as divergence.
    pub divergence: f64,
    /// Skip the Phase-I feasibility run (for callers that know better).
    pub assume_feasible: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-7,
            stat_tol: 1e-6,
            ipm_tol: 1e-9,
            phase1_tol: 1e-7,
            kkt_reg: 1e-11,
            divergence: 1e9,
            assume_feasible: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub x: DVector<f64>,
    pub objective_value: f64,
    /// Largest scaled KKT residual (primal, dual, gap) at the returned point;
    /// for infeasible programs, the certified minimum constraint violation.
    pub max_kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers for the inequality rows, then hi-bound rows, then lo-bound
    /// rows (finite bounds only, variable order).
    pub dual_ineq: DVector<f64>,
    /// Multipliers for the equality rows.
    pub dual_eq: DVector<f64>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("iteration cap {0} exceeded without convergence")]
    NumericalFailure(usize),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
}

/// A convex program under construction. Rows and objective terms accumulate;
/// `solve` leaves the program untouched so it can be re-solved or extended.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    n: usize,
    q: DMatrix<f64>,
    c: DVector<f64>,
    a_rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    e_rows: Vec<Vec<(usize, f64)>>,
    d: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ConvexProgram {
    pub fn new(n: usize) -> Self {
        ConvexProgram {
            n,
            q: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            a_rows: Vec::new(),
            b: Vec::new(),
            e_rows: Vec::new(),
            d: Vec::new(),
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Append `count` new free variables with zero objective, returning the
    /// index of the first.
    pub fn add_variables(&mut self, count: usize) -> usize {
        let first = self.n;
        self.n += count;
        self.q = self.q.clone().resize(self.n, self.n, 0.0);
        self.c = self.c.clone().resize_vertically(self.n, 0.0);
        self.lo.resize(self.n, f64::NEG_INFINITY);
        self.hi.resize(self.n, f64::INFINITY);
        first
    }

    /// Add `coeff * x_i` to the objective.
    pub fn add_linear(&mut self, i: usize, coeff: f64) {
        self.c[i] += coeff;
    }

    /// Add `a * x_i^2` to the objective.
    pub fn add_quadratic(&mut self, i: usize, a: f64) {
        self.q[(i, i)] += 2.0 * a;
    }

    /// Add `a * x_i * x_j` (i != j) to the objective.
    pub fn add_quadratic_cross(&mut self, i: usize, j: usize, a: f64) {
        assert_ne!(i, j);
        self.q[(i, j)] += a;
        self.q[(j, i)] += a;
    }

    /// Constrain `sum coeff_k * x_{i_k} <= rhs`.
    pub fn add_ineq(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        self.a_rows.push(coeffs.to_vec());
        self.b.push(rhs);
    }

    /// Constrain `sum coeff_k * x_{i_k} = rhs`.
    pub fn add_eq(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        self.e_rows.push(coeffs.to_vec());
        self.d.push(rhs);
    }

    /// Intersect the box of variable `i` with `[lo, hi]` (infinities allowed).
    pub fn bound(&mut self, i: usize, lo: f64, hi: f64) {
        self.lo[i] = self.lo[i].max(lo);
        self.hi[i] = self.hi[i].min(hi);
    }

    pub fn solve(&self) -> Result<Solution, SolveError> {
        self.solve_with(&SolverConfig::default())
    }

    pub fn solve_with(&self, cfg: &SolverConfig) -> Result<Solution, SolveError> {
        self.validate()?;

        // crossed bounds: infeasible with the crossing as certificate
        let mut crossing = 0.0f64;
        for i in 0..self.n {
            if self.lo[i] > self.hi[i] {
                crossing = crossing.max(self.lo[i] - self.hi[i]);
            }
        }
        if crossing > 0.0 {
            return Ok(self.infeasible_solution(crossing));
        }

        let cap = 10 * (self.n + self.a_rows.len() + self.e_rows.len()).pow(2).max(5);

        // Phase I: minimize total elastic violation of rows (bounds stay hard).
        if !cfg.assume_feasible && (!self.a_rows.is_empty() || !self.e_rows.is_empty()) {
            let rhs_scale = self
                .b
                .iter()
                .chain(self.d.iter())
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            let phase1 = self.build_phase1();
            let std = phase1.standard_form();
            // Phase I is always feasible and bounded below; divergence here
            // is a genuine numerical failure.
            let IpmOutcome::Point(pt) = ipm(&std, cfg, cap) else {
                return Err(SolveError::NumericalFailure(cap));
            };
            let pt = polish(&std, pt, cfg);
            let r = Residuals::at(&std, &pt);
            if !(r.primal <= cfg.feas_tol
                && r.equality <= cfg.feas_tol
                && r.dual <= cfg.stat_tol
                && r.gap <= cfg.stat_tol)
            {
                return Err(SolveError::NumericalFailure(pt.iterations));
            }
            let violation = phase1.c.dot(&pt.x);
            if violation > cfg.phase1_tol * (1.0 + rhs_scale) {
                return Ok(self.infeasible_solution(violation));
            }
        }

        let std = self.standard_form();
        let pt = match ipm(&std, cfg, cap) {
            IpmOutcome::Point(pt) => pt,
            IpmOutcome::Diverged(iters) => {
                return Ok(Solution {
                    status: Status::Unbounded,
                    x: DVector::zeros(self.n),
                    objective_value: f64::NEG_INFINITY,
                    max_kkt_residual: f64::INFINITY,
                    iterations: iters,
                    dual_ineq: DVector::zeros(std.g.nrows()),
                    dual_eq: DVector::zeros(std.e.nrows()),
                })
            }
        };
        let pt = polish(&std, pt, cfg);

        // the contract is checked on the point actually returned
        let r = Residuals::at(&std, &pt);
        if !(r.primal <= cfg.feas_tol
            && r.equality <= cfg.feas_tol
            && r.dual <= cfg.stat_tol
            && r.gap <= cfg.stat_tol)
        {
            return Err(SolveError::NumericalFailure(pt.iterations));
        }
        Ok(Solution {
            status: Status::Optimal,
            objective_value: std.objective(&pt.x),
            max_kkt_residual: r.max(),
            x: pt.x,
            iterations: pt.iterations,
            dual_ineq: pt.z,
            dual_eq: pt.y,
        })
    }

    fn infeasible_solution(&self, violation: f64) -> Solution {
        Solution {
            status: Status::Infeasible,
            x: DVector::zeros(self.n),
            objective_value: f64::INFINITY,
            max_kkt_residual: violation,
            iterations: 0,
            dual_ineq: DVector::zeros(0),
            dual_eq: DVector::zeros(0),
        }
    }

    fn validate(&self) -> Result<(), SolveError> {
        if self.n == 0 {
            return Err(SolveError::InvalidProgram("no variables".into()));
        }
        let finite = |v: f64| v.is_finite();
        if !self.c.iter().copied().all(finite) || !self.q.iter().copied().all(finite) {
            return Err(SolveError::InvalidProgram("non-finite objective".into()));
        }
        for (row, rhs) in self.a_rows.iter().zip(&self.b) {
            if !rhs.is_finite() || row.iter().any(|&(i, v)| i >= self.n || !v.is_finite()) {
                return Err(SolveError::InvalidProgram("bad inequality row".into()));
            }
        }
        for (row, rhs) in self.e_rows.iter().zip(&self.d) {
            if !rhs.is_finite() || row.iter().any(|&(i, v)| i >= self.n || !v.is_finite()) {
                return Err(SolveError::InvalidProgram("bad equality row".into()));
            }
        }
        if self.lo.iter().any(|v| v.is_nan()) || self.hi.iter().any(|v| v.is_nan()) {
            return Err(SolveError::InvalidProgram("NaN bound".into()));
        }
        // PSD check on the quadratic term (entries of our programs are tiny
        // dense blocks, so the eigen cost is negligible)
        let qmax = self.q.amax();
        if qmax > 0.0 {
            let eig = self.q.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            if min_eig < -1e-9 * (1.0 + qmax) {
                return Err(SolveError::InvalidProgram(format!(
                    "quadratic term not PSD (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(())
    }

    /// Elastic feasibility program: minimize the total violation of the
    /// inequality and equality rows with variable bounds kept hard.
    fn build_phase1(&self) -> ConvexProgram {
        let k = self.a_rows.len();
        let p = self.e_rows.len();
        let mut ph = ConvexProgram::new(self.n + k + 2 * p);
        ph.lo[..self.n].copy_from_slice(&self.lo);
        ph.hi[..self.n].copy_from_slice(&self.hi);
        for j in 0..k + 2 * p {
            ph.lo[self.n + j] = 0.0;
            ph.c[self.n + j] = 1.0;
        }
        for (idx, (row, &rhs)) in self.a_rows.iter().zip(&self.b).enumerate() {
            let mut r = row.clone();
            r.push((self.n + idx, -1.0));
            ph.add_ineq(&r, rhs);
        }
        for (idx, (row, &rhs)) in self.e_rows.iter().zip(&self.d).enumerate() {
            let mut r = row.clone();
            r.push((self.n + k + 2 * idx, 1.0));
            r.push((self.n + k + 2 * idx + 1, -1.0));
            ph.add_eq(&r, rhs);
        }
        ph
    }

    /// Fold bounds into inequality rows: G x <= h stacks the A rows, then
    /// hi-bound rows, then lo-bound rows.
    fn standard_form(&self) -> StandardForm {
        let n = self.n;
        let finite_hi: Vec<usize> = (0..n).filter(|&i| self.hi[i].is_finite()).collect();
        let finite_lo: Vec<usize> = (0..n).filter(|&i| self.lo[i].is_finite()).collect();
        let q_rows = self.a_rows.len() + finite_hi.len() + finite_lo.len();
        let mut g = DMatrix::zeros(q_rows, n);
        let mut h = DVector::zeros(q_rows);
        for (r, (row, &rhs)) in self.a_rows.iter().zip(&self.b).enumerate() {
            for &(i, v) in row {
                g[(r, i)] += v;
            }
            h[r] = rhs;
        }
        let mut r = self.a_rows.len();
        for &i in &finite_hi {
            g[(r, i)] = 1.0;
            h[r] = self.hi[i];
            r += 1;
        }
        for &i in &finite_lo {
            g[(r, i)] = -1.0;
            h[r] = -self.lo[i];
            r += 1;
        }
        let mut e = DMatrix::zeros(self.e_rows.len(), n);
        let mut d = DVector::zeros(self.e_rows.len());
        for (r, (row, &rhs)) in self.e_rows.iter().zip(&self.d).enumerate() {
            for &(i, v) in row {
                e[(r, i)] += v;
            }
            d[r] = rhs;
        }
        StandardForm {
            q: self.q.clone(),
            c: self.c.clone(),
            g,
            h,
            e,
            d,
        }
    }
}

struct StandardForm {
    q: DMatrix<f64>,
    c: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    e: DMatrix<f64>,
    d: DVector<f64>,
}

impl StandardForm {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.q * x).dot(x) + self.c.dot(x)
    }
}

#[derive(Clone)]
struct Point {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    iterations: usize,
}

enum IpmOutcome {
    /// Best iterate found (not necessarily converged; the caller verifies).
    Point(Point),
    Diverged(usize),
}

/// Scaled KKT residuals of a candidate point. Dual scaling includes the
/// multiplier terms so noisy multipliers do not masquerade as divergence.
struct Residuals {
    primal: f64,
    equality: f64,
    dual: f64,
    gap: f64,
}

impl Residuals {
    fn at(sf: &StandardForm, pt: &Point) -> Self {
        let p = sf.e.nrows();
        let q_rows = sf.g.nrows();
        let qx = &sf.q * &pt.x;
        let gtz = sf.g.transpose() * &pt.z;
        let ety = sf.e.transpose() * &pt.y;
        let r_d = &qx + &sf.c + &gtz + &ety;
        let dual_scale = 1.0 + sf.c.amax() + qx.amax() + gtz.amax() + ety.amax();
        let dual = r_d.amax() / dual_scale;
        let primal = if q_rows > 0 {
            (&sf.g * &pt.x - &sf.h).map(|v| v.max(0.0)).amax() / (1.0 + sf.h.amax())
        } else {
            0.0
        };
        let equality = if p > 0 {
            (&sf.e * &pt.x - &sf.d).amax() / (1.0 + sf.d.amax())
        } else {
            0.0
        };
        let gap = if q_rows > 0 {
            let slack = (&sf.h - &sf.g * &pt.x).map(|v| v.max(0.0));
            slack.dot(&pt.z).abs() / (1.0 + sf.objective(&pt.x).abs())
        } else {
            0.0
        };
        Residuals {
            primal,
            equality,
            dual,
            gap,
        }
    }

    fn max(&self) -> f64 {
        self.primal.max(self.equality).max(self.dual).max(self.gap)
    }
}

/// Largest step `alpha <= 1` keeping `v + alpha dv > 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

/// Mehrotra predictor-corrector on the standard form. Equality-only programs
/// (no inequality rows at all) are solved directly from the KKT system.
fn ipm(sf: &StandardForm, cfg: &SolverConfig, cap: usize) -> IpmOutcome {
    let n = sf.c.len();
    let q_rows = sf.g.nrows();
    let p = sf.e.nrows();

    if q_rows == 0 {
        let x = solve_equality_qp(sf, cfg);
        return IpmOutcome::Point(Point {
            s: DVector::zeros(0),
            z: DVector::zeros(0),
            y: x.1,
            x: x.0,
            iterations: 1,
        });
    }

    // initial point from one regularized least-squares KKT solve
    let mut kkt = DMatrix::zeros(n + p, n + p);
    let qq = &sf.q + sf.g.transpose() * &sf.g;
    kkt.view_mut((0, 0), (n, n)).copy_from(&qq);
    for i in 0..n {
        kkt[(i, i)] += 1e-8;
    }
    kkt.view_mut((0, n), (n, p)).copy_from(&sf.e.transpose());
    kkt.view_mut((n, 0), (p, n)).copy_from(&sf.e);
    for i in 0..p {
        kkt[(n + i, n + i)] = -1e-8;
    }
    let mut rhs = DVector::zeros(n + p);
    let top = sf.g.transpose() * &sf.h - &sf.c;
    rhs.rows_mut(0, n).copy_from(&top);
    rhs.rows_mut(n, p).copy_from(&sf.d);
    let init = kkt
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| DVector::zeros(n + p));
    let mut x = init.rows(0, n).into_owned();
    let mut y = DVector::zeros(p);

    // Mehrotra starting point: primal slacks from the least-squares primal,
    // duals from the least-norm solution of G'z = -(c + Qx), both shifted
    // into the positive orthant and balanced against each other
    let s_raw = &sf.h - &sf.g * &x;
    let mut gram = &sf.g.transpose() * &sf.g;
    for i in 0..n {
        gram[(i, i)] += 1e-8;
    }
    let r0 = -(&sf.c + &sf.q * &x);
    let z_raw = match gram.lu().solve(&r0) {
        Some(u) => &sf.g * u,
        None => DVector::zeros(q_rows),
    };
    let ds0 = (-1.5 * s_raw.min()).max(0.0);
    let dz0 = (-1.5 * z_raw.min()).max(0.0);
    let s_hat = s_raw.add_scalar(ds0);
    let z_hat = z_raw.add_scalar(dz0);
    let dot = s_hat.dot(&z_hat).max(1e-12);
    let ds1 = 0.5 * dot / z_hat.sum().max(1.0);
    let dz1 = 0.5 * dot / s_hat.sum().max(1.0);
    let mut s = s_hat.add_scalar(ds1 + 1e-3);
    let mut z = z_hat.add_scalar(dz1 + 1e-3);

    let init_scale = 1.0 + x.amax();
    let mut best_score = f64::INFINITY;
    let mut best: Option<Point> = None;
    let mut stall = 0usize;

    for iter in 0..cap {
        let r_d = &sf.q * &x + &sf.c + sf.g.transpose() * &z + sf.e.transpose() * &y;
        let r_p = &sf.g * &x + &s - &sf.h;
        let r_e = &sf.e * &x - &sf.d;
        let mu = s.dot(&z) / q_rows as f64;
        let obj = sf.objective(&x);

        let current = Point {
            x: x.clone(),
            s: s.clone(),
            z: z.clone(),
            y: y.clone(),
            iterations: iter,
        };
        let r = Residuals::at(sf, &current);
        let score = r.max();
        if std::env::var_os("REGNET_DEBUG_IPM").is_some() {
            eprintln!(
                "iter {iter}: mu={mu:.3e} rel_p={:.3e} rel_e={:.3e} rel_d={:.3e} gap={:.3e}",
                r.primal, r.equality, r.dual, r.gap
            );
        }
        if score < best_score {
            best_score = score;
            best = Some(current);
            stall = 0;
        } else {
            stall += 1;
        }

        if score <= cfg.ipm_tol {
            return IpmOutcome::Point(best.unwrap());
        }

        // divergence: primal iterate running away means the objective is
        // unbounded below (feasibility was certified by Phase I)
        if x.amax() > cfg.divergence * init_scale || obj < -1e18 {
            return IpmOutcome::Diverged(iter);
        }

        // past the floor of complementarity, further iterations only churn
        // floating-point noise; stalling means the same
        if mu < 1e-17 * (1.0 + obj.abs()) || stall > 25 {
            return IpmOutcome::Point(best.unwrap());
        }

        // assemble the reduced KKT system
        let w: DVector<f64> = z.component_div(&s);
        let mut gw = sf.g.clone();
        for r in 0..q_rows {
            let wr = w[r];
            for c in 0..n {
                gw[(r, c)] *= wr;
            }
        }
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let qgwg = &sf.q + sf.g.transpose() * &gw;
        // regularization scales with the assembled block, not the raw data:
        // late iterations push z/s toward 1/eps and the block grows with it
        let reg = cfg.kkt_reg * (1.0 + qgwg.amax());
        kkt.view_mut((0, 0), (n, n)).copy_from(&qgwg);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        kkt.view_mut((0, n), (n, p)).copy_from(&sf.e.transpose());
        kkt.view_mut((n, 0), (p, n)).copy_from(&sf.e);
        for i in 0..p {
            kkt[(n + i, n + i)] = -reg;
        }
        let lu = kkt.lu();

        let solve_dir = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // eliminate (ds, dz): dz = W (G dx + r_p) - r_c / s
            let t: DVector<f64> =
                DVector::from_fn(q_rows, |i, _| w[i] * r_p[i] - r_c[i] / s[i]);
            let mut rhs = DVector::zeros(n + p);
            let top = -&r_d - sf.g.transpose() * &t;
            rhs.rows_mut(0, n).copy_from(&top);
            rhs.rows_mut(n, p).copy_from(&(-&r_e));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, p).into_owned();
            let gdx = &sf.g * &dx;
            let dz = DVector::from_fn(q_rows, |i, _| w[i] * (gdx[i] + r_p[i]) - r_c[i] / s[i]);
            let ds = DVector::from_fn(q_rows, |i, _| -(r_c[i] + s[i] * dz[i]) / z[i]);
            Some((dx, dy, dz, ds))
        };

        // affine direction
        let r_c_aff: DVector<f64> = s.component_mul(&z);
        let Some((dx_a, _dy_a, dz_a, ds_a)) = solve_dir(&r_c_aff) else {
            return IpmOutcome::Point(best.unwrap());
        };
        let ap = max_step(&s, &ds_a);
        let ad = max_step(&z, &dz_a);
        let mu_aff = (&s + ds_a.scale(ap)).dot(&(&z + dz_a.scale(ad))) / q_rows as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // corrector
        let r_c: DVector<f64> =
            DVector::from_fn(q_rows, |i, _| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu);
        let Some((dx, dy, dz, ds)) = solve_dir(&r_c) else {
            return IpmOutcome::Point(best.unwrap());
        };
        let _ = dx_a;
        let mut alpha = 0.99 * max_step(&s, &ds).min(max_step(&z, &dz));
        alpha = alpha.min(1.0);
        // damp steps that would let complementarity grow out of control
        for _ in 0..60 {
            let mu_next =
                (&s + ds.scale(alpha)).dot(&(&z + dz.scale(alpha))) / q_rows as f64;
            if mu_next <= 10.0 * mu.max(1e-12) {
                break;
            }
            alpha *= 0.5;
        }
        if std::env::var_os("REGNET_DEBUG_IPM").is_some() {
            eprintln!(
                "    alpha={alpha:.3e} sigma={sigma:.3e} mu_aff={mu_aff:.3e} |dx|={:.3e} |dz|={:.3e} |ds|={:.3e}",
                dx.amax(),
                dz.amax(),
                ds.amax()
            );
        }
        x += dx.scale(alpha);
        y += dy.scale(alpha);
        s += ds.scale(alpha);
        z += dz.scale(alpha);
    }
    match best {
        Some(pt) => IpmOutcome::Point(pt),
        None => IpmOutcome::Diverged(cap),
    }
}

/// Direct KKT solve for programs with equality constraints only.
fn solve_equality_qp(sf: &StandardForm, cfg: &SolverConfig) -> (DVector<f64>, DVector<f64>) {
    let n = sf.c.len();
    let p = sf.e.nrows();
    let mut kkt = DMatrix::zeros(n + p, n + p);
    kkt.view_mut((0, 0), (n, n)).copy_from(&sf.q);
    let reg = cfg.kkt_reg * (1.0 + sf.q.amax());
    for i in 0..n {
        kkt[(i, i)] += reg;
    }
    kkt.view_mut((0, n), (n, p)).copy_from(&sf.e.transpose());
    kkt.view_mut((n, 0), (p, n)).copy_from(&sf.e);
    for i in 0..p {
        kkt[(n + i, n + i)] = -reg;
    }
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(&(-&sf.c));
    rhs.rows_mut(n, p).copy_from(&sf.d);
    match kkt.lu().solve(&rhs) {
        Some(sol) => (sol.rows(0, n).into_owned(), sol.rows(n, p).into_owned()),
        None => (DVector::zeros(n), DVector::zeros(p)),
    }
}

/// Active-set refinement: re-solve the KKT system restricted to the
/// constraints the interior point identifies as active, and adopt the result
/// when it is feasible, has valid multiplier signs and does not worsen the
/// objective.
fn polish(sf: &StandardForm, pt: Point, cfg: &SolverConfig) -> Point {
    let n = sf.c.len();
    let q_rows = sf.g.nrows();
    let p = sf.e.nrows();
    if q_rows == 0 {
        return pt;
    }
    let active: Vec<usize> = (0..q_rows).filter(|&i| pt.z[i] > pt.s[i]).collect();
    let na = active.len();
    let dim = n + na + p;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&sf.q);
    let reg = 1e-12 * (1.0 + sf.q.amax());
    for i in 0..n {
        kkt[(i, i)] += reg;
    }
    for (r, &a) in active.iter().enumerate() {
        for cidx in 0..n {
            kkt[(cidx, n + r)] = sf.g[(a, cidx)];
            kkt[(n + r, cidx)] = sf.g[(a, cidx)];
        }
        kkt[(n + r, n + r)] = -reg;
    }
    for r in 0..p {
        for cidx in 0..n {
            kkt[(cidx, n + na + r)] = sf.e[(r, cidx)];
            kkt[(n + na + r, cidx)] = sf.e[(r, cidx)];
        }
        kkt[(n + na + r, n + na + r)] = -reg;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&sf.c));
    for (r, &a) in active.iter().enumerate() {
        rhs[n + r] = sf.h[a];
    }
    for r in 0..p {
        rhs[n + na + r] = sf.d[r];
    }
    let lu = kkt.clone().lu();
    let Some(mut sol) = lu.solve(&rhs) else {
        return pt;
    };
    // one step of iterative refinement
    let resid = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }

    let x = sol.rows(0, n).into_owned();
    let za = sol.rows(n, na).into_owned();
    let y = sol.rows(n + na, p).into_owned();

    // validity checks
    let slack = &sf.h - &sf.g * &x;
    let feas_ok = (0..q_rows).all(|i| slack[i] >= -cfg.feas_tol * (1.0 + sf.h[i].abs()));
    let eq_ok = p == 0 || (&sf.e * &x - &sf.d).amax() <= cfg.feas_tol * (1.0 + sf.d.amax());
    let dual_ok = za.iter().all(|&v| v >= -cfg.stat_tol * (1.0 + pt.z.amax()));
    let obj_ok = sf.objective(&x) <= sf.objective(&pt.x) + cfg.stat_tol * (1.0 + sf.objective(&pt.x).abs());
    if !(feas_ok && eq_ok && dual_ok && obj_ok) {
        return pt;
    }

    let mut z = DVector::zeros(q_rows);
    for (r, &a) in active.iter().enumerate() {
        z[a] = za[r].max(0.0);
    }
    let s = slack.map(|v| v.max(0.0));
    Point {
        x,
        s,
        z,
        y,
        iterations: pt.iterations,
    }
}
