//! Per-DOF regression problems: stencil gathers, quadratic features, and
//! local-norm normalization.
//!
//! The unknowns of a problem are `theta_b = scale_b * W_b` for each operator
//! block `b`, so the semi-discrete model reads `-udot_i = X_i theta`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::form::TermKind;
use crate::grid::{Grid, Offset, StencilSpec};
use crate::refsim::{Axis, CaseParams, OperatorBlock, SnapshotSet};

/// Floor applied to degenerate normalization windows.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub name: String,
    pub kind: TermKind,
    pub scale: f64,
    /// Parameters per unit of grid-free stencil coefficient; ridge
    /// penalties act on `theta / unit`.
    pub unit: f64,
    pub stencil: StencilSpec,
    /// First design-matrix column of this block.
    pub start: usize,
}

impl FeatureBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.stencil.len()
    }
}

/// Column layout of a design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    blocks: Vec<FeatureBlock>,
    window: StencilSpec,
}

impl FeatureLayout {
    pub fn new(blocks: Vec<(String, TermKind, f64, StencilSpec)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidStencil("a layout needs at least one block".into()));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(blocks.len());
        for (name, kind, scale, stencil) in blocks {
            if !(scale.is_finite() && scale != 0.0) {
                return Err(Error::config(
                    name.clone(),
                    format!("physical factor of block `{name}` must be finite and nonzero, got {scale}"),
                ));
            }
            let len = stencil.len();
            out.push(FeatureBlock {
                name,
                kind,
                scale,
                unit: 1.0,
                stencil,
                start,
            });
            start += len;
        }
        let window = StencilSpec::union(out.iter().map(|b| &b.stencil))?;
        Ok(FeatureLayout { blocks: out, window })
    }

    /// Layout of a case with one stencil size per block.
    pub fn for_case(case: &CaseParams, sizes: &[usize]) -> Result<Self> {
        let blocks = case.blocks();
        if blocks.len() != sizes.len() {
            return Err(Error::config(
                "stencil_sizes",
                format!("case `{}` needs {} stencil sizes, got {}", case.kind, blocks.len(), sizes.len()),
            ));
        }
        let mut spec = Vec::with_capacity(blocks.len());
        for (b, &s) in blocks.iter().zip(sizes) {
            spec.push((b.name.to_string(), b.kind, b.scale, block_stencil(b, s)?));
        }
        let mut layout = FeatureLayout::new(spec)?;
        for (fb, b) in layout.blocks.iter_mut().zip(&blocks) {
            fb.unit = case.stencil_unit(b);
        }
        for b in &layout.blocks {
            if let Some(bad) = b.stencil.offsets().iter().find(|o| !fits(&case.grid, **o)) {
                return Err(Error::InvalidStencil(format!(
                    "offset ({}, {}) of block `{}` does not fit the grid",
                    bad.x, bad.y, b.name
                )));
            }
        }
        Ok(layout)
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.stencil.len()).sum()
    }

    /// Union of all block offsets: the local solution window.
    pub fn window(&self) -> &StencilSpec {
        &self.window
    }

    pub fn has_quadratic(&self) -> bool {
        self.blocks.iter().any(|b| b.kind == TermKind::Quadratic)
    }

    pub fn block_params<'a>(&self, theta: &'a [f64], b: usize) -> &'a [f64] {
        &theta[self.blocks[b].range()]
    }
}

fn block_stencil(b: &OperatorBlock, size: usize) -> Result<StencilSpec> {
    match b.axis {
        Axis::X => StencilSpec::centered(size),
        Axis::Y => StencilSpec::centered_y(size),
    }
}

/// A stencil fits when it never wraps onto itself.
fn fits(grid: &Grid, off: Offset) -> bool {
    if !grid.supports(off) {
        return false;
    }
    match grid {
        Grid::Line(g) => (2 * off.x.unsigned_abs() as usize) < g.n(),
        Grid::Plane(g) => (2 * off.x.unsigned_abs() as usize) < g.nx() && (2 * off.y.unsigned_abs() as usize) < g.ny(),
    }
}

#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub dof: usize,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub norm: f64,
    pub layout: Arc<FeatureLayout>,
}

/// Gather the design matrix and target for `dof`.
pub fn build_problem(snap: &SnapshotSet, dof: usize, layout: &Arc<FeatureLayout>) -> Result<RegressionProblem> {
    let n = snap.n_dofs();
    if dof >= n {
        return Err(Error::Index { dof, n });
    }
    let grid = snap.grid();
    let nt = snap.n_times();
    let p = layout.n_params();
    let mut cols = Vec::with_capacity(p);
    for b in layout.blocks() {
        for off in b.stencil.offsets() {
            if !fits(grid, *off) {
                return Err(Error::InvalidStencil(format!(
                    "offset ({}, {}) does not fit the grid",
                    off.x, off.y
                )));
            }
            cols.push((grid.wrap(dof, *off), b.kind));
        }
    }
    let states = &snap.traj.states;
    let x = DMatrix::from_fn(nt, p, |t, k| {
        let (j, kind) = cols[k];
        match kind {
            TermKind::Linear => states[(j, t)],
            TermKind::Quadratic => states[(dof, t)] * states[(j, t)],
        }
    });
    let y = DVector::from_fn(nt, |t, _| -snap.traj.rhs[(dof, t)]);
    Ok(RegressionProblem {
        dof,
        x,
        y,
        norm: 1.0,
        layout: Arc::clone(layout),
    })
}

/// Single linear block with known physical factor `scale`.
pub fn build_linear_problem(snap: &SnapshotSet, dof: usize, stencil: &StencilSpec, scale: f64) -> Result<RegressionProblem> {
    let layout = FeatureLayout::new(vec![("L".into(), TermKind::Linear, scale, stencil.clone())])?;
    build_problem(snap, dof, &Arc::new(layout))
}

/// Quadratic block `z_k = u_i u_{i+k}` followed by a linear block for `-nu L`.
pub fn build_burgers_problem(
    snap: &SnapshotSet,
    dof: usize,
    s_n: &StencilSpec,
    s_l: &StencilSpec,
    nu: f64,
) -> Result<RegressionProblem> {
    let layout = FeatureLayout::new(vec![
        ("N".into(), TermKind::Quadratic, 1.0, s_n.clone()),
        ("L".into(), TermKind::Linear, -nu, s_l.clone()),
    ])?;
    build_problem(snap, dof, &Arc::new(layout))
}

/// Euclidean norm, over all times, of the state values in the union window.
pub fn local_norm(snap: &SnapshotSet, dof: usize, window: &StencilSpec) -> f64 {
    let grid = snap.grid();
    let states = &snap.traj.states;
    let mut acc = 0.0;
    for off in window.offsets() {
        let j = grid.wrap(dof, *off);
        acc += states.row(j).iter().map(|v| v * v).sum::<f64>();
    }
    acc.sqrt().max(NORM_FLOOR)
}

/// Divide `X` and `y` by `norm`, recording it.
pub fn normalize_with(mut p: RegressionProblem, norm: f64) -> RegressionProblem {
    let norm = norm.max(NORM_FLOOR);
    let f = p.norm / norm;
    p.x *= f;
    p.y *= f;
    p.norm = norm;
    p
}

/// Normalize by the norm of the local solution window.
pub fn normalize_problem(snap: &SnapshotSet, p: RegressionProblem) -> RegressionProblem {
    let norm = local_norm(snap, p.dof, p.layout.window());
    normalize_with(p, norm)
}

/// Raw (unnormalized) design matrix.
pub fn denormalized_x(p: &RegressionProblem) -> DMatrix<f64> {
    &p.x * p.norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid1D, Grid2D};
    use crate::refsim::{simulate, CaseKind, SnapshotMeta, Trajectory};
    use proptest::prelude::*;

    fn hand_set(states: DMatrix<f64>, rhs: DMatrix<f64>) -> SnapshotSet {
        let n = states.nrows();
        let mut case = CaseParams::canonical(CaseKind::Diffusion);
        case.grid = Grid::Line(Grid1D::new(n, n as f64).unwrap());
        let nt = states.ncols();
        SnapshotSet::new(
            Trajectory {
                times: (0..nt).map(|j| j as f64).collect(),
                states,
                rhs,
            },
            SnapshotMeta::from_case(&case),
        )
        .unwrap()
    }

    #[test]
    fn constant_states_give_equal_columns() {
        let snap = hand_set(DMatrix::from_element(7, 4, 2.5), DMatrix::zeros(7, 4));
        let p = build_linear_problem(&snap, 3, &StencilSpec::centered(5).unwrap(), 1.0).unwrap();
        assert!(p.x.iter().all(|v| *v == 2.5));
        assert!(p.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_enumerated_three_dof_set() {
        // states[dof, t]
        let states = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let rhs = DMatrix::from_row_slice(3, 2, &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        let snap = hand_set(states, rhs);
        let p = build_linear_problem(&snap, 0, &StencilSpec::centered(3).unwrap(), 1.0).unwrap();
        assert_eq!(p.x, DMatrix::from_row_slice(2, 3, &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]));
        assert_eq!(p.y.as_slice(), &[-0.1, -0.4]);
        let p = build_linear_problem(&snap, 2, &StencilSpec::centered(3).unwrap(), 1.0).unwrap();
        assert_eq!(p.x, DMatrix::from_row_slice(2, 3, &[2.0, 3.0, 1.0, 5.0, 6.0, 4.0]));
    }

    #[test]
    fn diffusion_columns_are_wrapped_states() {
        let case = CaseParams::canonical(CaseKind::Diffusion);
        let snap = simulate(&case, 10).unwrap();
        let p = build_linear_problem(&snap, 200, &StencilSpec::centered(3).unwrap(), -case.nu).unwrap();
        for t in 0..10 {
            assert_eq!(p.x[(t, 0)], snap.traj.states[(199, t)]);
            assert_eq!(p.x[(t, 1)], snap.traj.states[(200, t)]);
            assert_eq!(p.x[(t, 2)], snap.traj.states[(0, t)]);
        }
        assert!(matches!(
            build_linear_problem(&snap, 201, &StencilSpec::centered(3).unwrap(), 1.0),
            Err(Error::Index { dof: 201, n: 201 })
        ));
    }

    #[test]
    fn quadratic_columns() {
        let mut states = DMatrix::from_element(5, 3, 1.0);
        let snap = hand_set(states.clone(), DMatrix::zeros(5, 3));
        let s3 = StencilSpec::centered(3).unwrap();
        let p = build_burgers_problem(&snap, 2, &s3, &s3, 0.1).unwrap();
        assert!(p.x.columns(0, 3).iter().all(|v| *v == 1.0));

        states[(2, 1)] = 0.0;
        let snap = hand_set(states, DMatrix::zeros(5, 3));
        let p = build_burgers_problem(&snap, 2, &s3, &s3, 0.1).unwrap();
        assert!(p.x.row(1).columns(0, 3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_matches_elementwise_product() {
        let case = CaseParams::canonical(CaseKind::Burgers);
        let snap = simulate(&case, 5).unwrap();
        let s3 = StencilSpec::centered(3).unwrap();
        let p = build_burgers_problem(&snap, 0, &s3, &s3, case.nu).unwrap();
        let u = &snap.traj.states;
        for t in 0..5 {
            assert_eq!(p.x[(t, 0)], u[(0, t)] * u[(128, t)]);
            assert_eq!(p.x[(t, 1)], u[(0, t)] * u[(0, t)]);
            assert_eq!(p.x[(t, 2)], u[(0, t)] * u[(1, t)]);
            assert_eq!(p.x[(t, 3)], u[(128, t)]);
        }
    }

    #[test]
    fn normalization_floor_and_inverse() {
        let snap = hand_set(DMatrix::zeros(5, 3), DMatrix::zeros(5, 3));
        let p = build_linear_problem(&snap, 1, &StencilSpec::centered(3).unwrap(), 1.0).unwrap();
        let q = normalize_problem(&snap, p);
        assert_eq!(q.norm, NORM_FLOOR);
        assert!(q.y.iter().all(|v| *v == 0.0));

        let case = CaseParams::canonical(CaseKind::Advection);
        let snap = simulate(&case, 20).unwrap();
        let p = build_linear_problem(&snap, 10, &StencilSpec::centered(5).unwrap(), case.c).unwrap();
        let q = normalize_problem(&snap, p.clone());
        assert!(q.norm > 0.0);
        let back = denormalized_x(&q);
        for (a, b) in back.iter().zip(p.x.iter()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn normalized_linear_problem_is_scale_invariant() {
        let case = CaseParams::canonical(CaseKind::Advection);
        let snap = simulate(&case, 20).unwrap();
        let mut big = snap.clone();
        big.traj.states *= 10.0;
        big.traj.rhs *= 10.0;
        let s = StencilSpec::centered(7).unwrap();
        let a = normalize_problem(&snap, build_linear_problem(&snap, 50, &s, case.c).unwrap());
        let b = normalize_problem(&big, build_linear_problem(&big, 50, &s, case.c).unwrap());
        for (u, v) in a.x.iter().zip(b.x.iter()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1e-12));
        }
    }

    #[test]
    fn generator_is_an_exact_fit() {
        let case = CaseParams::canonical(CaseKind::AdvectionDiffusion);
        let snap = simulate(&case, 30).unwrap();
        let layout = Arc::new(FeatureLayout::for_case(&case, &[5, 3]).unwrap());
        let dx = case.grid.as_line().unwrap().dx();
        // theta = [c * L1 on 5 offsets, -nu * L2 on 3 offsets]
        let theta = DVector::from_vec(vec![
            0.0,
            -case.c / dx,
            case.c / dx,
            0.0,
            0.0,
            -case.nu / (dx * dx),
            2.0 * case.nu / (dx * dx),
            -case.nu / (dx * dx),
        ]);
        for dof in [0, 100, 200] {
            let p = build_problem(&snap, dof, &layout).unwrap();
            let r = &p.y - &p.x * &theta;
            assert!(r.amax() < 1e-12 * p.y.amax().max(1.0), "{}", r.amax());
        }
    }

    #[test]
    fn two_dimensional_gather() {
        let mut case = CaseParams::canonical(CaseKind::Advection2d);
        case.grid = Grid::Plane(Grid2D::new(5, 4, 5.0, 4.0).unwrap());
        let snap = simulate(&case, 3).unwrap();
        let layout = Arc::new(FeatureLayout::for_case(&case, &[3, 3]).unwrap());
        let g = case.grid.as_plane().unwrap();
        let p = build_problem(&snap, g.index(0, 0), &layout).unwrap();
        let u = &snap.traj.states;
        assert_eq!(p.x[(1, 0)], u[(g.index(4, 0), 1)]);
        assert_eq!(p.x[(1, 3)], u[(g.index(0, 3), 1)]);
        assert_eq!(p.x[(1, 5)], u[(g.index(0, 1), 1)]);
        assert_eq!(layout.window().len(), 5);
    }

    #[test]
    fn oversized_stencil_is_rejected() {
        let mut case = CaseParams::canonical(CaseKind::Diffusion);
        case.grid = Grid::Line(Grid1D::new(5, 5.0).unwrap());
        assert!(FeatureLayout::for_case(&case, &[7]).is_err());
        assert!(FeatureLayout::for_case(&case, &[5]).is_ok());
        assert!(FeatureLayout::for_case(&case, &[3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn gather_agrees_with_apply(seed in 0u64..1000, dof in 0usize..16, half in 1usize..4) {
            let n = 16;
            let vals: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0).collect();
            let states = DMatrix::from_column_slice(n, 1, &vals);
            let snap = hand_set(states, DMatrix::zeros(n, 1));
            let s = StencilSpec::centered(2 * half + 1).unwrap();
            let coeffs: Vec<f64> = (0..s.len()).map(|k| k as f64 - half as f64 + 0.25).collect();
            let p = build_linear_problem(&snap, dof, &s, 1.0).unwrap();
            let op = crate::grid::AssembledOperator::uniform(*snap.grid(), &s, &coeffs).unwrap();
            let applied = op.apply(&vals).unwrap()[dof];
            let gathered: f64 = p.x.row(0).iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            prop_assert!((applied - gathered).abs() < 1e-12);
        }
    }
}
