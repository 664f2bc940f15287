//! Convex quadratic programs `min 1/2 x'Hx + g'x  s.t.  Gx <= h`.
//!
//! Primal active-set method: each iteration minimizes over the null space
//! of the working constraints, using a pseudo-inverse of the reduced
//! Hessian so positive-semidefinite `H` is handled. Zero-curvature
//! directions with a nonzero gradient component are followed until a
//! constraint blocks them. A feasible start is found by an auxiliary
//! phase-1 program when none is supplied.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max-iter",
            QpStatus::NumericalFailure => "numerical-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticProgram {
    /// `a` and `b` hold the constraint matrix and bounds of `a x <= b`.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let p = g.len();
        if h.nrows() != p || h.ncols() != p {
            return Err(Error::Dimension {
                expected: p,
                got: h.nrows(),
            });
        }
        if a.ncols() != p && a.nrows() > 0 {
            return Err(Error::Dimension {
                expected: p,
                got: a.ncols(),
            });
        }
        if a.nrows() != b.len() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        let scale = h.amax().max(1.0);
        for i in 0..p {
            for j in 0..i {
                if (h[(i, j)] - h[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::Qp(format!("Hessian not symmetric at ({i}, {j})")));
                }
            }
        }
        if h.iter().chain(g.iter()).chain(a.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Qp("non-finite problem data".into()));
        }
        let a = if a.nrows() == 0 { DMatrix::zeros(0, p) } else { a };
        Ok(QuadraticProgram { h, g, a, b })
    }

    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        let p = g.len();
        QuadraticProgram::new(h, g, DMatrix::zeros(0, p), DVector::zeros(0))
    }

    pub fn n_vars(&self) -> usize {
        self.g.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Largest signed violation `max_i (a_i x - b_i)`; negative when strictly
    /// feasible, `-inf` without constraints.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let r = &self.a * x - &self.b;
        r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub trace: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Absolute KKT residual; optimality accepts it up to `tol` times
    /// `max(1, |g|, |H| |x|)`.
    pub kkt_residual: f64,
    /// Signed worst constraint violation (negative when strictly feasible).
    pub max_violation: f64,
    pub active_set: Vec<usize>,
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    pub trace: Vec<TraceRow>,
}

/// Solve from scratch, running phase 1 when the origin is infeasible.
pub fn qp_solve(qp: &QuadraticProgram, tol: f64, max_iter: usize) -> Result<QpSolution> {
    qp_solve_with(
        qp,
        None,
        QpOptions {
            tol,
            max_iter,
            trace: false,
        },
    )
}

pub fn qp_solve_with(qp: &QuadraticProgram, x0: Option<&DVector<f64>>, opts: QpOptions) -> Result<QpSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Qp("tolerance must be positive".into()));
    }
    let p = qp.n_vars();
    let start = match x0 {
        Some(x) => {
            if x.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: x.len(),
                });
            }
            if qp.n_constraints() > 0 && qp.max_violation(x) > opts.tol {
                return Err(Error::Qp(format!(
                    "starting point violates constraints by {:e}",
                    qp.max_violation(x)
                )));
            }
            x.clone()
        }
        None => {
            let zero = DVector::zeros(p);
            if qp.n_constraints() == 0 || qp.max_violation(&zero) <= 0.0 {
                zero
            } else {
                phase_one(qp, opts)?
            }
        }
    };
    Ok(active_set(qp, start, opts))
}

/// Minimize the total violation `sum s` over `a x - s <= b, s >= 0`.
fn phase_one(qp: &QuadraticProgram, opts: QpOptions) -> Result<DVector<f64>> {
    let p = qp.n_vars();
    let m = qp.n_constraints();
    let nv = p + m;
    let mut a = DMatrix::zeros(2 * m, nv);
    let mut b = DVector::zeros(2 * m);
    for i in 0..m {
        for j in 0..p {
            a[(i, j)] = qp.a[(i, j)];
        }
        a[(i, p + i)] = -1.0;
        b[i] = qp.b[i];
        a[(m + i, p + i)] = -1.0;
    }
    let mut g = DVector::zeros(nv);
    g.rows_mut(p, m).fill(1.0);
    let aux = QuadraticProgram {
        h: DMatrix::zeros(nv, nv),
        g,
        a,
        b,
    };
    let mut x0 = DVector::zeros(nv);
    let viol = -&qp.b;
    for i in 0..m {
        x0[p + i] = viol[i].max(0.0);
    }
    let sol = active_set(
        &aux,
        x0,
        QpOptions {
            trace: false,
            max_iter: opts.max_iter.max(4 * nv),
            ..opts
        },
    );
    let x = sol.x.rows(0, p).into_owned();
    let v = qp.max_violation(&x);
    if v > opts.tol {
        return Err(Error::Qp(format!("constraints infeasible (violation {v:e})")));
    }
    Ok(x)
}

/// Orthonormal bases of range(A_W') and its complement, plus the
/// triangular factor used for multiplier solves.
struct WorkingBasis {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    w: usize,
}

impl WorkingBasis {
    fn new(qp: &QuadraticProgram, work: &[usize]) -> Self {
        let p = qp.n_vars();
        let w = work.len();
        let mut m = DMatrix::zeros(p, w + p);
        for (k, &i) in work.iter().enumerate() {
            m.set_column(k, &qp.a.row(i).transpose());
        }
        for j in 0..p {
            m[(j, w + j)] = 1.0;
        }
        let qr = m.qr();
        WorkingBasis {
            q: qr.q(),
            r: qr.r(),
            w,
        }
    }

    fn null_space(&self) -> DMatrix<f64> {
        let p = self.q.nrows();
        self.q.columns(self.w, p - self.w).into_owned()
    }

    /// Least-squares multipliers of `A_W' lambda = -grad`.
    fn multipliers(&self, grad: &DVector<f64>) -> Option<DVector<f64>> {
        let w = self.w;
        if w == 0 {
            return Some(DVector::zeros(0));
        }
        let rhs = -(self.q.columns(0, w).transpose() * grad);
        let r11 = self.r.view((0, 0), (w, w)).into_owned();
        r11.solve_upper_triangular(&rhs)
    }
}

fn kkt_residual(qp: &QuadraticProgram, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let grad = &qp.h * x + &qp.g;
    let stat = (&grad + qp.a.transpose() * lambda).amax();
    let mut worst = stat;
    for i in 0..qp.n_constraints() {
        let slack = qp.b[i] - qp.a.row(i).dot(&x.transpose());
        worst = worst
            .max((-slack).max(0.0))
            .max((-lambda[i]).max(0.0))
            .max((lambda[i] * slack).abs());
    }
    worst
}

/// Magnitude of the gradient terms, for relative stationarity tests.
fn stat_scale(qp: &QuadraticProgram, x: &DVector<f64>) -> f64 {
    1.0f64.max(qp.g.amax()).max(qp.h.amax() * x.amax())
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
///
/// Reduced Hessians here are small, often rank deficient and have many
/// exactly repeated zero eigenvalues; nalgebra's `SymmetricEigen` and SVD
/// both return inaccurate vectors on some of them, while Jacobi keeps the
/// residual at rounding level.
fn symmetric_eigen(mut a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut v = DMatrix::identity(n, n);
    let scale = a.norm();
    if scale == 0.0 {
        return (DVector::zeros(n), v);
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// Constraints tight at `x`, keeping only a linearly independent subset
/// (Gram-Schmidt on the constraint normals, in index order).
fn initial_working_set(qp: &QuadraticProgram, x: &DVector<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut work = Vec::new();
    let xs = x.amax();
    for i in 0..qp.n_constraints() {
        let row = qp.a.row(i).transpose();
        let rn = row.norm();
        let slack = qp.b[i] - row.dot(x);
        if rn == 0.0 || slack.abs() > 1e-12 * (rn * xs + qp.b[i].abs() + 1.0) {
            continue;
        }
        let mut r = row.clone();
        for _ in 0..2 {
            for q in &basis {
                r -= q * q.dot(&r);
            }
        }
        let res = r.norm();
        if res > 1e-8 * rn && basis.len() < qp.n_vars() {
            basis.push(r / res);
            work.push(i);
        }
    }
    work
}

fn active_set(qp: &QuadraticProgram, mut x: DVector<f64>, opts: QpOptions) -> QpSolution {
    let p = qp.n_vars();
    let m = qp.n_constraints();
    let dual_tol = 1e-3 * opts.tol;
    let row_norms: Vec<f64> = (0..m).map(|i| qp.a.row(i).norm()).collect();
    let mut work = initial_working_set(qp, &x);
    let mut lambda_full = DVector::zeros(m);
    let mut trace = Vec::new();
    let mut degenerate = false;
    // constraints that re-blocked at zero step right after being released;
    // their negative multipliers are rounding noise at this point
    let mut pinned: Vec<usize> = Vec::new();
    let mut last_drop = None;
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;

    let finish = |x: DVector<f64>, work: Vec<usize>, lambda: DVector<f64>, status: QpStatus, iterations, trace| {
        let kkt = kkt_residual(qp, &x, &lambda);
        let status = match status {
            // stationarity is only meaningful relative to the size of H x and g
            QpStatus::Optimal if kkt > opts.tol * stat_scale(qp, &x) => QpStatus::NumericalFailure,
            s => s,
        };
        let mut active = work;
        active.sort_unstable();
        QpSolution {
            objective: qp.objective(&x),
            max_violation: qp.max_violation(&x),
            kkt_residual: kkt,
            x,
            active_set: active,
            multipliers: lambda,
            iterations,
            status,
            trace,
        }
    };

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let grad = &qp.h * &x + &qp.g;
        let basis = WorkingBasis::new(qp, &work);
        let z = basis.null_space();
        let gscale = 1e-9 * grad.amax().max(1.0);

        let mut d = DVector::zeros(p);
        let mut unbounded_dir = false;
        let mut rg_small = true;
        if z.ncols() > 0 {
            let rg = z.transpose() * &grad;
            rg_small = rg.amax() <= 1e-12 * stat_scale(qp, &x);
            let hz = &qp.h * &z;
            let rh = z.transpose() * &hz;
            let rh = (&rh + rh.transpose()) * 0.5;
            let rh_max = rh.diagonal().amax();
            // positive definite reduced Hessian: plain Newton step
            let newton = rh.clone().cholesky().and_then(|ch| {
                let l = ch.l_dirty();
                let weak = (0..l.nrows()).any(|k| l[(k, k)] * l[(k, k)] <= 1e-10 * rh_max.max(1.0));
                (!weak).then(|| -ch.solve(&rg))
            });
            let dz = match newton {
                Some(dz) => dz,
                None => {
                    let (evals, evecs) = symmetric_eigen(rh);
                    let lam_max = evals.amax();
                    let flat = 1e-13 * lam_max.max(1.0);
                    let c = evecs.transpose() * &rg;
                    let mut dz = DVector::zeros(z.ncols());
                    for k in 0..c.len() {
                        if evals[k] <= flat && c[k].abs() > gscale {
                            unbounded_dir = true;
                        }
                    }
                    for k in 0..c.len() {
                        let lam = evals[k];
                        let coef = if unbounded_dir {
                            if lam <= flat {
                                -c[k]
                            } else {
                                0.0
                            }
                        } else if lam > flat {
                            -c[k] / lam
                        } else {
                            0.0
                        };
                        if coef != 0.0 {
                            dz += evecs.column(k) * coef;
                        }
                    }
                    dz
                }
            };
            d = &z * dz;
        }

        if opts.trace {
            let lam_est = basis.multipliers(&grad).unwrap_or_else(|| DVector::zeros(work.len()));
            let mut full = DVector::zeros(m);
            for (k, &i) in work.iter().enumerate() {
                full[i] = lam_est[k];
            }
            trace.push(TraceRow {
                iter,
                objective: qp.objective(&x),
                kkt_residual: kkt_residual(qp, &x, &full),
            });
        }

        // a step whose predicted decrease is below the rounding level of the
        // objective cannot make progress
        let hd = &qp.h * &d;
        let pred = -(grad.dot(&d) + 0.5 * d.dot(&hd));
        let fscale = 0.5 * x.dot(&(&qp.h * &x)).abs() + qp.g.dot(&x).abs();
        let stalled = !unbounded_dir && pred <= 64.0 * f64::EPSILON * fscale;
        let step_small = rg_small || stalled || d.amax() <= 1e-13 * (1.0 + x.amax());
        if step_small {
            let Some(lam) = basis.multipliers(&grad) else {
                status = QpStatus::NumericalFailure;
                break;
            };
            lambda_full = DVector::zeros(m);
            for (k, &i) in work.iter().enumerate() {
                lambda_full[i] = lam[k];
            }
            let negative: Vec<usize> = (0..work.len())
                .filter(|&k| lam[k] < -dual_tol && !pinned.contains(&work[k]))
                .collect();
            if negative.is_empty() {
                status = QpStatus::Optimal;
                break;
            }
            // Bland's rule after a degenerate step avoids cycling.
            let drop = if degenerate {
                *negative.iter().min_by_key(|&&k| work[k]).unwrap()
            } else {
                *negative
                    .iter()
                    .min_by(|&&a, &&b| lam[a].total_cmp(&lam[b]).then(work[a].cmp(&work[b])))
                    .unwrap()
            };
            lambda_full[work[drop]] = 0.0;
            last_drop = Some(work.remove(drop));
            continue;
        }

        let dnorm = d.norm();
        let mut alpha = if unbounded_dir { f64::INFINITY } else { 1.0 };
        let mut blocking = None;
        for i in 0..m {
            if work.contains(&i) {
                continue;
            }
            let ad = qp.a.row(i).dot(&d.transpose());
            if ad <= 1e-12 * row_norms[i] * dnorm {
                continue;
            }
            let slack = (qp.b[i] - qp.a.row(i).dot(&x.transpose())).max(0.0);
            let ai = slack / ad;
            if ai < alpha {
                alpha = ai;
                blocking = Some(i);
            }
        }
        if unbounded_dir {
            // nearly flat curvature is still curvature: stop at the line
            // minimizer rather than overshooting to a distant constraint
            let curv = d.dot(&hd);
            if curv > 0.0 {
                let a_star = -grad.dot(&d) / curv;
                if a_star < alpha {
                    alpha = a_star;
                    blocking = None;
                }
            }
        }
        if alpha.is_infinite() {
            status = QpStatus::NumericalFailure;
            break;
        }
        x += &d * alpha;
        degenerate = alpha <= 1e-14;
        if !degenerate {
            pinned.clear();
        }
        if let Some(i) = blocking {
            work.push(i);
            if degenerate && last_drop == Some(i) {
                pinned.push(i);
            }
        }
        last_drop = None;
        lambda_full = DVector::zeros(m);
    }

    if status == QpStatus::MaxIter {
        // report multipliers for the final working set anyway
        let grad = &qp.h * &x + &qp.g;
        if let Some(lam) = WorkingBasis::new(qp, &work).multipliers(&grad) {
            lambda_full = DVector::zeros(m);
            for (k, &i) in work.iter().enumerate() {
                lambda_full[i] = lam[k];
            }
        }
    }
    finish(x, work, lambda_full, status, iterations, trace)
}

/// Gershgorin dominance of an affine row image `a = M theta`:
/// `a_c - sum_{j != c} |a_j| >= margin`, linearized with one slack per
/// off-centre entry. Variables are `[theta; t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DominanceBlock {
    pub map: DMatrix<f64>,
    pub center: usize,
    pub margin: f64,
}

impl DominanceBlock {
    pub fn new(map: DMatrix<f64>, center: usize, margin: f64) -> Result<Self> {
        if map.nrows() == 0 {
            return Err(Error::Constraint("empty constrained row".into()));
        }
        if center >= map.nrows() {
            return Err(Error::Index {
                dof: center,
                n: map.nrows(),
            });
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::Constraint(format!("margin must be >= 0, got {margin}")));
        }
        Ok(DominanceBlock { map, center, margin })
    }

    pub fn n_params(&self) -> usize {
        self.map.ncols()
    }

    pub fn n_slacks(&self) -> usize {
        self.map.nrows() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.n_params() + self.n_slacks()
    }

    fn off_center(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.map.nrows()).filter(move |&j| j != self.center)
    }

    /// Constraint rows `G [theta; t] <= h`: `+a_j - t_j`, `-a_j - t_j` per
    /// off-centre entry, then `sum t - a_c <= -margin`.
    pub fn rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.n_params();
        let ns = self.n_slacks();
        let mut g = DMatrix::zeros(2 * ns + 1, p + ns);
        for (k, j) in self.off_center().enumerate() {
            for c in 0..p {
                g[(2 * k, c)] = self.map[(j, c)];
                g[(2 * k + 1, c)] = -self.map[(j, c)];
            }
            g[(2 * k, p + k)] = -1.0;
            g[(2 * k + 1, p + k)] = -1.0;
        }
        let last = 2 * ns;
        for c in 0..p {
            g[(last, c)] = -self.map[(self.center, c)];
        }
        for k in 0..ns {
            g[(last, p + k)] = 1.0;
        }
        let mut h = DVector::zeros(2 * ns + 1);
        h[last] = -self.margin;
        (g, h)
    }

    pub fn row_values(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.map * theta
    }

    /// `a_c - sum |a_j|`; dominance holds when this is `>= margin`.
    pub fn gap(&self, theta: &DVector<f64>) -> f64 {
        let a = self.row_values(theta);
        a[self.center] - self.off_center().map(|j| a[j].abs()).sum::<f64>()
    }

    /// `[theta; |a_j|]`, the tightest slacks for given parameters.
    pub fn lift(&self, theta: &DVector<f64>) -> DVector<f64> {
        let a = self.row_values(theta);
        let mut x = DVector::zeros(self.n_vars());
        x.rows_mut(0, self.n_params()).copy_from(theta);
        for (k, j) in self.off_center().enumerate() {
            x[self.n_params() + k] = a[j].abs();
        }
        x
    }
}

/// Dominance block acting directly on `p_dim` coefficients.
pub fn absval_reformulate(p_dim: usize, center: usize, margin: f64) -> Result<DominanceBlock> {
    DominanceBlock::new(DMatrix::identity(p_dim, p_dim), center, margin)
}
