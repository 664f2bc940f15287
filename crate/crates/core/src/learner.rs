//! Learning paths: ridge regression (LDO) and dominance-constrained least
//! squares (S-LDO), solved independently per degree of freedom.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_problem, normalize_problem, FeatureLayout, RegressionProblem};
use crate::form::{SemiDiscreteForm, Term, TermKind};
use crate::grid::{AssembledOperator, Grid, LocalOperator, Offset, StencilSpec};
use crate::par::{try_map_indices, Execution};
use crate::qp::{qp_solve_with, DominanceBlock, QpOptions, QpStatus, QuadraticProgram};
use crate::refsim::{CaseKind, CaseParams, SnapshotSet};

/// Ridge weight of the feasible warm start handed to the constrained solver.
pub const WARM_START_BETA: f64 = 1e-8;
/// Smallest accepted ratio of triangular-factor diagonals.
pub const SINGULAR_RATIO: f64 = 1e-12;
/// Default strict-dominance margin for linearized nonlinear constraints.
pub const NONLINEAR_MARGIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ldo")]
    Ldo,
    #[serde(rename = "s-ldo")]
    Sldo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ldo => "LDO",
            Method::Sldo => "S-LDO",
        }
    }

    /// Lower-case form used in config files and artifact names.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Ldo => "ldo",
            Method::Sldo => "s-ldo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ldo" => Ok(Method::Ldo),
            "s-ldo" | "sldo" => Ok(Method::Sldo),
            _ => Err(Error::config("methods", format!("unknown method `{s}`"))),
        }
    }
}

/// What the ridge penalty measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RidgeScaling {
    /// The parameters `theta` themselves.
    #[default]
    Parameter,
    /// Grid-free stencil coefficients `theta / unit`, so one `beta` means
    /// the same relative shrinkage for every block and grid spacing.
    Stencil,
}

impl RidgeScaling {
    pub fn name(self) -> &'static str {
        match self {
            RidgeScaling::Parameter => "parameter",
            RidgeScaling::Stencil => "stencil",
        }
    }
}

impl FromStr for RidgeScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameter" => Ok(RidgeScaling::Parameter),
            "stencil" => Ok(RidgeScaling::Stencil),
            _ => Err(Error::config("ridge_scaling", format!("unknown ridge scaling `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RidgeConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub scaling: RidgeScaling,
}

impl RidgeConfig {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if !(beta1 >= 0.0 && beta1.is_finite()) {
            return Err(Error::config("beta1", "must be finite and >= 0"));
        }
        if !(beta2 >= 0.0 && beta2.is_finite()) {
            return Err(Error::config("beta2", "must be finite and >= 0"));
        }
        Ok(RidgeConfig {
            beta1,
            beta2,
            scaling: RidgeScaling::Parameter,
        })
    }

    pub fn with_scaling(self, scaling: RidgeScaling) -> Self {
        RidgeConfig { scaling, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    LinearCombined,
    BurgersLinearized,
    Advect2dCombined,
}

impl ConstraintMode {
    pub fn for_case(kind: CaseKind) -> Self {
        match kind {
            CaseKind::Burgers => ConstraintMode::BurgersLinearized,
            CaseKind::Advection2d => ConstraintMode::Advect2dCombined,
            _ => ConstraintMode::LinearCombined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConstraintSpec {
    pub mode: ConstraintMode,
    pub equilibrium: Option<f64>,
    pub margin: f64,
}

impl StabilityConstraintSpec {
    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Constraint(format!("margin must be >= 0, got {}", self.margin)));
        }
        match self.mode {
            ConstraintMode::BurgersLinearized => {
                let u0 = self
                    .equilibrium
                    .ok_or_else(|| Error::Constraint("linearized constraints need an equilibrium value".into()))?;
                if !u0.is_finite() {
                    return Err(Error::Constraint("equilibrium must be finite".into()));
                }
            }
            _ if layout.has_quadratic() => {
                return Err(Error::Constraint("quadratic blocks need linearized constraints".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ridge solution of `(X'X + B) theta = X'y`. `B` is diagonal with `beta1`
/// on linear columns and `beta2` on quadratic columns, divided by `unit^2`
/// under [`RidgeScaling::Stencil`]. The system is solved through a
/// Householder QR of the stacked matrix `[X; sqrt(B)]`, which has the same
/// minimizer without squaring the condition number of `X`.
pub fn solve_ldo(p: &RegressionProblem, cfg: RidgeConfig) -> Result<DVector<f64>> {
    let (nt, np) = (p.x.nrows(), p.x.ncols());
    let mut a = DMatrix::zeros(nt + np, np);
    a.view_mut((0, 0), (nt, np)).copy_from(&p.x);
    for b in p.layout.blocks() {
        let beta = match b.kind {
            TermKind::Linear => cfg.beta1,
            TermKind::Quadratic => cfg.beta2,
        };
        let unit = match cfg.scaling {
            RidgeScaling::Parameter => 1.0,
            RidgeScaling::Stencil => b.unit.abs(),
        };
        for k in b.range() {
            a[(nt + k, k)] = beta.sqrt() / unit;
        }
    }
    let mut rhs = DVector::zeros(nt + np);
    rhs.rows_mut(0, nt).copy_from(&p.y);
    let qr = a.qr();
    let r = qr.r();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..np {
        lo = lo.min(r[(k, k)].abs());
        hi = hi.max(r[(k, k)].abs());
    }
    if !(lo > SINGULAR_RATIO * hi) {
        return Err(Error::SingularSystem { dof: p.dof });
    }
    let qtb = qr.q().tr_mul(&rhs);
    let theta = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::SingularSystem { dof: p.dof })?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { dof: p.dof });
    }
    Ok(theta)
}

/// Linear map from parameters to the constrained row on the layout window.
pub fn constraint_map(layout: &FeatureLayout, mode: ConstraintMode, equilibrium: Option<f64>) -> Result<DMatrix<f64>> {
    let window = layout.window();
    if window.is_empty() {
        return Err(Error::Constraint("empty union stencil".into()));
    }
    let c = window.center_pos();
    let mut m = DMatrix::zeros(window.len(), layout.n_params());
    for b in layout.blocks() {
        for (k, off) in b.stencil.offsets().iter().enumerate() {
            let col = b.start + k;
            let row = window.position(*off).expect("window covers every block");
            match b.kind {
                TermKind::Linear => m[(row, col)] += 1.0,
                TermKind::Quadratic => {
                    if mode != ConstraintMode::BurgersLinearized {
                        return Err(Error::Constraint("quadratic blocks need linearized constraints".into()));
                    }
                    let u0 = equilibrium
                        .ok_or_else(|| Error::Constraint("linearized constraints need an equilibrium value".into()))?;
                    // d/du of u_i sum_k N_k u_{i+k} at a constant state u0
                    if *off == Offset::ZERO {
                        m[(c, col)] += 2.0 * u0;
                    } else {
                        m[(row, col)] += u0;
                        m[(c, col)] += u0;
                    }
                }
            }
        }
    }
    Ok(m)
}

pub fn build_stability_constraints(spec: &StabilityConstraintSpec, layout: &FeatureLayout) -> Result<DominanceBlock> {
    spec.validate(layout)?;
    let map = constraint_map(layout, spec.mode, spec.equilibrium)?;
    DominanceBlock::new(map, layout.window().center_pos(), spec.margin)
}

/// Linearized row of `N(u) - nu L(u)` at the constant state `u0`, on the
/// layout window. `n` and `l` are operator coefficients of the first
/// quadratic and first linear block.
pub fn linearize_burgers(n: &[f64], l: &[f64], u0: f64, layout: &FeatureLayout, nu: f64) -> Result<Vec<f64>> {
    let quad = layout
        .blocks()
        .iter()
        .find(|b| b.kind == TermKind::Quadratic)
        .ok_or_else(|| Error::Constraint("layout has no quadratic block".into()))?;
    let lin = layout
        .blocks()
        .iter()
        .find(|b| b.kind == TermKind::Linear)
        .ok_or_else(|| Error::Constraint("layout has no linear block".into()))?;
    if n.len() != quad.stencil.len() || l.len() != lin.stencil.len() {
        return Err(Error::Dimension {
            expected: quad.stencil.len() + lin.stencil.len(),
            got: n.len() + l.len(),
        });
    }
    let w = layout.window();
    let c = w.center_pos();
    let mut row = vec![0.0; w.len()];
    for (k, off) in quad.stencil.offsets().iter().enumerate() {
        if *off == Offset::ZERO {
            row[c] += 2.0 * u0 * n[k];
        } else {
            row[w.position(*off).unwrap()] += u0 * n[k];
            row[c] += u0 * n[k];
        }
    }
    for (k, off) in lin.stencil.offsets().iter().enumerate() {
        row[w.position(*off).unwrap()] -= nu * l[k];
    }
    Ok(row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldoSolution {
    pub theta: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub gap: f64,
}

/// Feasible start: ridge parameters, tight slacks, and a centre raise on a
/// parameter that feeds only the centre entry.
pub fn warm_start(p: &RegressionProblem, block: &DominanceBlock) -> Result<DVector<f64>> {
    let mut theta = solve_ldo(
        p,
        RidgeConfig {
            beta1: WARM_START_BETA,
            beta2: WARM_START_BETA,
            scaling: RidgeScaling::Parameter,
        },
    )?;
    let c = block.center;
    let col = (0..block.n_params())
        .filter(|&k| block.map[(c, k)] > 0.0 && (0..block.map.nrows()).all(|r| r == c || block.map[(r, k)] == 0.0))
        .max_by(|&a, &b| block.map[(c, a)].total_cmp(&block.map[(c, b)]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Constraint("no parameter can raise the centre coefficient".into()))?;
    let deficit = block.margin - block.gap(&theta);
    if deficit > 0.0 {
        theta[col] += deficit / block.map[(c, col)];
        // guard against rounding in the raise
        let gap = block.gap(&theta);
        if gap < block.margin {
            theta[col] += (block.margin - gap) / block.map[(c, col)] + 4.0 * f64::EPSILON * theta[col].abs();
        }
    }
    Ok(block.lift(&theta))
}

/// Unregularized least squares subject to the dominance block.
pub fn solve_sldo(p: &RegressionProblem, spec: &StabilityConstraintSpec, opts: QpOptions) -> Result<SldoSolution> {
    let block = build_stability_constraints(spec, &p.layout)?;
    let np = block.n_params();
    let nv = block.n_vars();
    let xtx = p.x.tr_mul(&p.x);
    let xty = p.x.tr_mul(&p.y);
    let mut h = DMatrix::zeros(nv, nv);
    h.view_mut((0, 0), (np, np)).copy_from(&xtx);
    let mut g = DVector::zeros(nv);
    g.rows_mut(0, np).copy_from(&(-xty));
    let (a, b) = block.rows();
    let qp = QuadraticProgram::new(h, g, a, b)?;
    let x0 = warm_start(p, &block)?;
    let sol = qp_solve_with(&qp, Some(&x0), opts).map_err(|e| Error::Solver {
        dof: p.dof,
        status: QpStatus::NumericalFailure,
        detail: e.to_string(),
    })?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver {
            dof: p.dof,
            status: sol.status,
            detail: format!(
                "{} iterations, kkt residual {:e}, violation {:e}",
                sol.iterations, sol.kkt_residual, sol.max_violation
            ),
        });
    }
    let theta = sol.x.rows(0, np).into_owned();
    let gap = block.gap(&theta);
    Ok(SldoSolution {
        theta,
        status: sol.status,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        max_violation: sol.max_violation,
        gap,
    })
}

#[derive(Debug, Clone)]
pub struct LearnConfig {
    pub ridge: RidgeConfig,
    pub qp: QpOptions,
    /// Dominance margin; `None` picks 0 for linear cases and
    /// [`NONLINEAR_MARGIN`] for linearized ones.
    pub margin: Option<f64>,
    /// Linearization state; `None` uses the mean of the training states.
    pub equilibrium: Option<f64>,
    pub exec: Execution,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            ridge: RidgeConfig {
                beta1: 1e-3,
                beta2: 1e-3,
                scaling: RidgeScaling::Parameter,
            },
            qp: QpOptions::default(),
            margin: None,
            equilibrium: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DofDiagnostics {
    pub dof: usize,
    pub norm: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
    /// `a_c - sum |a_j|` of the constrained row.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub case: CaseKind,
    pub method: Method,
    pub grid: Grid,
    pub layout: Arc<FeatureLayout>,
    pub sizes: Vec<usize>,
    /// Operators `W_b`, one per block; the physical factor is not included.
    pub operators: Vec<AssembledOperator>,
    /// Parameters `theta` per DOF in layout order.
    pub params: Vec<DVector<f64>>,
    pub ridge: RidgeConfig,
    pub tol: f64,
    pub margin: f64,
    pub equilibrium: Option<f64>,
    pub mode: ConstraintMode,
    pub diagnostics: Vec<DofDiagnostics>,
}

impl LearnedModel {
    /// Build from per-DOF parameters laid out as in `layout`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_params(
        case: CaseKind,
        method: Method,
        grid: Grid,
        layout: Arc<FeatureLayout>,
        sizes: Vec<usize>,
        params: Vec<DVector<f64>>,
        ridge: RidgeConfig,
        constraint: StabilityConstraintSpec,
        tol: f64,
        diagnostics: Vec<DofDiagnostics>,
    ) -> Result<Self> {
        if params.len() != grid.n_dofs() {
            return Err(Error::Dimension {
                expected: grid.n_dofs(),
                got: params.len(),
            });
        }
        let mut operators = Vec::with_capacity(layout.blocks().len());
        for b in layout.blocks() {
            let rows = params
                .iter()
                .enumerate()
                .map(|(dof, th)| {
                    let coeffs = th.as_slice()[b.range()].iter().map(|v| v / b.scale).collect();
                    LocalOperator::new(dof, b.stencil.clone(), coeffs)
                })
                .collect::<Result<Vec<_>>>()?;
            operators.push(AssembledOperator::assemble(grid, rows)?);
        }
        Ok(LearnedModel {
            case,
            method,
            grid,
            layout,
            sizes,
            operators,
            params,
            ridge,
            tol,
            margin: constraint.margin,
            equilibrium: constraint.equilibrium,
            mode: constraint.mode,
            diagnostics,
        })
    }

    pub fn form(&self) -> Result<SemiDiscreteForm> {
        SemiDiscreteForm::new(
            self.layout
                .blocks()
                .iter()
                .zip(&self.operators)
                .map(|(b, op)| Term {
                    kind: b.kind,
                    scale: b.scale,
                    op: op.clone(),
                })
                .collect(),
        )
    }

    pub fn constraint_spec(&self) -> StabilityConstraintSpec {
        StabilityConstraintSpec {
            mode: self.mode,
            equilibrium: self.equilibrium,
            margin: self.margin,
        }
    }

    /// The constrained combination (`c L1 - nu L2`, `cx Lx + cy Ly`, or the
    /// Burgers operator linearized at the equilibrium) as one operator.
    pub fn constrained_operator(&self) -> Result<AssembledOperator> {
        let map = constraint_map(&self.layout, self.mode, self.equilibrium)?;
        let window: StencilSpec = self.layout.window().clone();
        let rows = self
            .params
            .iter()
            .enumerate()
            .map(|(dof, th)| LocalOperator::new(dof, window.clone(), (&map * th).as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        AssembledOperator::assemble(self.grid, rows)
    }

    /// Smallest dominance gap `a_c - sum |a_j|` over all DOFs.
    pub fn min_dominance_gap(&self) -> Result<f64> {
        let map = constraint_map(&self.layout, self.mode, self.equilibrium)?;
        let block = DominanceBlock::new(map, self.layout.window().center_pos(), 0.0)?;
        Ok(self.params.iter().map(|th| block.gap(th)).fold(f64::INFINITY, f64::min))
    }
}

/// Mean over all training states.
pub fn mean_state(snap: &SnapshotSet) -> f64 {
    let s = &snap.traj.states;
    s.iter().sum::<f64>() / s.len() as f64
}

/// Learn one operator per block of `case` from `snap`.
pub fn learn_model(
    snap: &SnapshotSet,
    case: &CaseParams,
    method: Method,
    sizes: &[usize],
    cfg: &LearnConfig,
) -> Result<LearnedModel> {
    if snap.grid() != &case.grid {
        return Err(Error::config("grid", "snapshots and case disagree on the grid"));
    }
    let layout = Arc::new(FeatureLayout::for_case(case, sizes)?);
    let mode = ConstraintMode::for_case(case.kind);
    let equilibrium = match mode {
        ConstraintMode::BurgersLinearized => Some(cfg.equilibrium.unwrap_or_else(|| mean_state(snap))),
        _ => None,
    };
    let margin = cfg.margin.unwrap_or(match mode {
        ConstraintMode::BurgersLinearized => NONLINEAR_MARGIN,
        _ => 0.0,
    });
    let spec = StabilityConstraintSpec {
        mode,
        equilibrium,
        margin,
    };
    spec.validate(&layout)?;
    let dominance = build_stability_constraints(&spec, &layout)?;

    let solved = try_map_indices(snap.n_dofs(), cfg.exec, |dof| -> Result<(DVector<f64>, DofDiagnostics)> {
        let p = normalize_problem(snap, build_problem(snap, dof, &layout)?);
        match method {
            Method::Ldo => {
                let theta = solve_ldo(&p, cfg.ridge)?;
                let gap = dominance.gap(&theta);
                Ok((
                    theta,
                    DofDiagnostics {
                        dof,
                        norm: p.norm,
                        iterations: 0,
                        kkt_residual: 0.0,
                        max_violation: 0.0,
                        gap,
                    },
                ))
            }
            Method::Sldo => {
                let s = solve_sldo(&p, &spec, cfg.qp)?;
                Ok((
                    s.theta,
                    DofDiagnostics {
                        dof,
                        norm: p.norm,
                        iterations: s.iterations,
                        kkt_residual: s.kkt_residual,
                        max_violation: s.max_violation,
                        gap: s.gap,
                    },
                ))
            }
        }
    })?;
    let (params, diagnostics): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    LearnedModel::from_params(
        case.kind,
        method,
        case.grid,
        layout,
        sizes.to_vec(),
        params,
        cfg.ridge,
        spec,
        cfg.qp.tol,
        diagnostics,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_linear_problem;
    use crate::grid::Grid1D;
    use crate::refsim::{generate_training, simulate, SnapshotMeta, Trajectory};
    use approx::assert_relative_eq;

    fn toy_problem(x: DMatrix<f64>, y: Vec<f64>) -> RegressionProblem {
        let p = x.ncols();
        let offs: Vec<Offset> = (0..p as i32).map(|k| Offset::along_x(k - (p as i32 - 1) / 2)).collect();
        let layout = FeatureLayout::new(vec![("L".into(), TermKind::Linear, 1.0, StencilSpec::new(offs).unwrap())]).unwrap();
        RegressionProblem {
            dof: 7,
            x,
            y: DVector::from_vec(y),
            norm: 1.0,
            layout: Arc::new(layout),
        }
    }

    #[test]
    fn ridge_hand_cases() {
        let p = toy_problem(DMatrix::identity(2, 2), vec![1.0, 2.0]);
        // centred layout for p = 2 is [0, 1]
        let th = solve_ldo(&p, RidgeConfig::new(1.0, 0.0).unwrap()).unwrap();
        assert_relative_eq!(th, DVector::from_vec(vec![0.5, 1.0]), epsilon = 1e-15);

        let x = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let y = vec![1.0, -2.0, 0.5];
        let p = toy_problem(x.clone(), y.clone());
        let th = solve_ldo(&p, RidgeConfig::default()).unwrap();
        let direct = x.lu().solve(&DVector::from_vec(y)).unwrap();
        assert_relative_eq!(th, direct, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_names_dof() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 3.0, 3.0, 0.0]);
        let p = toy_problem(x, vec![1.0, 1.0, 1.0]);
        assert!(matches!(
            solve_ldo(&p, RidgeConfig::default()),
            Err(Error::SingularSystem { dof: 7 })
        ));
    }

    #[test]
    fn diffusion_ldo_recovers_generator() {
        let case = CaseParams::canonical(CaseKind::Diffusion);
        let snap = generate_training(&case).unwrap();
        let dx = case.grid.as_line().unwrap().dx();
        let s = StencilSpec::centered(3).unwrap();
        for dof in [0, 50, 100, 150, 200] {
            let p = normalize_problem(&snap, build_linear_problem(&snap, dof, &s, -case.nu).unwrap());
            let th = solve_ldo(&p, RidgeConfig::default()).unwrap();
            let l: Vec<f64> = th.iter().map(|v| v / -case.nu * dx * dx).collect();
            for (a, b) in l.iter().zip([1.0, -2.0, 1.0]) {
                assert!((a - b).abs() < 1e-6, "dof {dof}: {l:?}");
            }
        }
    }

    #[test]
    fn linearization_examples() {
        let s3 = StencilSpec::centered(3).unwrap();
        let layout = FeatureLayout::new(vec![
            ("N".into(), TermKind::Quadratic, 1.0, s3.clone()),
            ("L".into(), TermKind::Linear, -0.1, s3.clone()),
        ])
        .unwrap();
        let n = [-0.5, 0.0, 0.5];
        let l = [1.0, -2.0, 1.0];
        let row = linearize_burgers(&n, &l, 1.0, &layout, 0.1).unwrap();
        let expect = [-0.6, 0.2, 0.4];
        for k in 0..3 {
            assert!((row[k] - expect[k]).abs() < 1e-15);
        }
        let row0 = linearize_burgers(&n, &l, 0.0, &layout, 0.1).unwrap();
        assert_eq!(row0, vec![-0.1, 0.2, -0.1]);
        let centre = linearize_burgers(&n, &[0.0; 3], 3.0, &layout, 0.1).unwrap();
        assert_eq!(centre[1], 0.0);
        // documents that dominance is sufficient, not necessary
        assert!(row[1] < row[0].abs() + row[2].abs());
    }

    #[test]
    fn constraint_map_matches_linearization() {
        let s3 = StencilSpec::centered(3).unwrap();
        let s5 = StencilSpec::centered(5).unwrap();
        let nu = 0.07;
        let layout = FeatureLayout::new(vec![
            ("N".into(), TermKind::Quadratic, 1.0, s5),
            ("L".into(), TermKind::Linear, -nu, s3),
        ])
        .unwrap();
        let n = [0.3, -0.2, 0.9, 0.1, -0.4];
        let l = [1.1, -2.3, 0.7];
        let u0 = 0.37;
        let theta: Vec<f64> = n.iter().cloned().chain(l.iter().map(|v| -nu * v)).collect();
        let m = constraint_map(&layout, ConstraintMode::BurgersLinearized, Some(u0)).unwrap();
        let via_map = &m * DVector::from_vec(theta);
        let direct = linearize_burgers(&n, &l, u0, &layout, nu).unwrap();
        for k in 0..5 {
            assert!((via_map[k] - direct[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn equality_cases_of_dominance() {
        let s3 = StencilSpec::centered(3).unwrap();
        let spec = StabilityConstraintSpec {
            mode: ConstraintMode::LinearCombined,
            equilibrium: None,
            margin: 0.0,
        };
        let nu = 0.5;
        let diff = FeatureLayout::new(vec![("L2".into(), TermKind::Linear, -nu, s3.clone())]).unwrap();
        let blk = build_stability_constraints(&spec, &diff).unwrap();
        // theta = -nu * [1, -2, 1]
        let th = DVector::from_vec(vec![-nu, 2.0 * nu, -nu]);
        assert_eq!(blk.gap(&th), 0.0);
        let adv = FeatureLayout::new(vec![("L1".into(), TermKind::Linear, 1.0, s3)]).unwrap();
        let blk = build_stability_constraints(&spec, &adv).unwrap();
        assert_eq!(blk.gap(&DVector::from_vec(vec![-1.0, 1.0, 0.0])), 0.0);

        let burgers = StabilityConstraintSpec {
            mode: ConstraintMode::BurgersLinearized,
            equilibrium: None,
            margin: 1e-8,
        };
        let s3 = StencilSpec::centered(3).unwrap();
        let lay = FeatureLayout::new(vec![
            ("N".into(), TermKind::Quadratic, 1.0, s3.clone()),
            ("L".into(), TermKind::Linear, -0.1, s3),
        ])
        .unwrap();
        assert!(build_stability_constraints(&burgers, &lay).is_err());
        assert!(build_stability_constraints(&spec, &lay).is_err());
    }

    fn linear_set(case: &CaseParams, n_times: usize) -> SnapshotSet {
        simulate(case, n_times).unwrap()
    }

    #[test]
    fn sldo_recovers_dominant_generator() {
        // backward difference is dominant with equality
        let case = CaseParams::canonical(CaseKind::Advection);
        let snap = linear_set(&case, 200);
        let s = StencilSpec::centered(3).unwrap();
        let spec = StabilityConstraintSpec {
            mode: ConstraintMode::LinearCombined,
            equilibrium: None,
            margin: 0.0,
        };
        let dx = case.grid.as_line().unwrap().dx();
        for dof in [20, 60] {
            let p = normalize_problem(&snap, build_linear_problem(&snap, dof, &s, case.c).unwrap());
            let sol = solve_sldo(&p, &spec, QpOptions::default()).unwrap();
            let l: Vec<f64> = sol.theta.iter().map(|v| v / case.c * dx).collect();
            for (a, b) in l.iter().zip([-1.0, 1.0, 0.0]) {
                assert!((a - b).abs() < 1e-5, "dof {dof}: {l:?}");
            }
        }
    }

    #[test]
    fn sldo_zero_target_gives_zero() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 0.2, 0.0, 0.3, 1.0, 0.1, 0.0, 0.4, 1.0, 0.5, 0.5, 0.5]);
        let p = toy_problem(x, vec![0.0; 4]);
        let spec = StabilityConstraintSpec {
            mode: ConstraintMode::LinearCombined,
            equilibrium: None,
            margin: 0.0,
        };
        let s = solve_sldo(&p, &spec, QpOptions::default()).unwrap();
        assert!(s.theta.amax() < 1e-12);
    }

    #[test]
    fn sldo_dominance_postcondition_on_random_data() {
        let n = 9;
        let nt = 12;
        let states = DMatrix::from_fn(n, nt, |i, j| ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.4);
        let rhs = DMatrix::from_fn(n, nt, |i, j| ((i * 7 + j * 5) % 11) as f64 / 11.0 - 0.5);
        let mut case = CaseParams::canonical(CaseKind::AdvectionDiffusion);
        case.grid = Grid::Line(Grid1D::new(n, 9.0).unwrap());
        let snap = SnapshotSet::new(
            Trajectory {
                times: (0..nt).map(|j| j as f64).collect(),
                states,
                rhs,
            },
            SnapshotMeta::from_case(&case),
        )
        .unwrap();
        let cfg = LearnConfig {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let m = learn_model(&snap, &case, Method::Sldo, &[5, 3], &cfg).unwrap();
        assert!(m.min_dominance_gap().unwrap() >= -1e-6);
        let ldo = learn_model(&snap, &case, Method::Ldo, &[5, 3], &cfg).unwrap();
        assert!(ldo.min_dominance_gap().unwrap() < 0.0);
    }

    #[test]
    fn learn_model_diffusion_matches_reference() {
        let case = CaseParams::canonical(CaseKind::Diffusion);
        let snap = generate_training(&case).unwrap();
        let cfg = LearnConfig {
            ridge: RidgeConfig::default(),
            ..Default::default()
        };
        let m = learn_model(&snap, &case, Method::Ldo, &[3], &cfg).unwrap();
        let reference = &case.reference_operators().unwrap()[0];
        for dof in 0..201 {
            let got = &m.operators[0].row(dof).coeffs;
            let want = &reference.row(dof).coeffs;
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "dof {dof}");
            }
        }
    }

    #[test]
    fn dof_order_does_not_matter() {
        let case = CaseParams::canonical(CaseKind::Advection);
        let snap = linear_set(&case, 100);
        let seq = LearnConfig {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let par = LearnConfig {
            exec: Execution::Parallel,
            ..Default::default()
        };
        let a = learn_model(&snap, &case, Method::Sldo, &[5], &seq).unwrap();
        let b = learn_model(&snap, &case, Method::Sldo, &[5], &par).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn learned_linear_model_is_scale_invariant() {
        let case = CaseParams::canonical(CaseKind::Advection);
        let snap = linear_set(&case, 100);
        let mut big = snap.clone();
        big.traj.states *= 3.0;
        big.traj.rhs *= 3.0;
        let cfg = LearnConfig::default();
        let a = learn_model(&snap, &case, Method::Ldo, &[5], &cfg).unwrap();
        let b = learn_model(&big, &case, Method::Ldo, &[5], &cfg).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert!((x - y).amax() <= 1e-8 * x.amax().max(1.0));
        }
    }

    #[test]
    fn stencil_scaling_is_rescaled_parameter_ridge() {
        let case = CaseParams::canonical(CaseKind::Diffusion);
        let snap = linear_set(&case, 100);
        let unit = case.stencil_unit(&case.blocks()[0]);
        let beta = 0.1;
        let run = |ridge| {
            let cfg = LearnConfig {
                ridge,
                ..Default::default()
            };
            learn_model(&snap, &case, Method::Ldo, &[5], &cfg).unwrap()
        };
        let a = run(RidgeConfig::new(beta, 0.0).unwrap().with_scaling(RidgeScaling::Stencil));
        let b = run(RidgeConfig::new(beta / (unit * unit), 0.0).unwrap());
        for (x, y) in a.params.iter().zip(&b.params) {
            assert!((x - y).amax() <= 1e-9 * x.amax().max(1.0));
        }
    }
}
