//! Periodic grids, stencil patterns, and row-local sparse operators.
//!
//! An [`AssembledOperator`] keeps one [`LocalOperator`] per degree of
//! freedom. Column indices are obtained by wrapping `dof + offset` on the
//! periodic grid, so a stencil wider than the grid simply folds back onto
//! itself. A dense view is only materialized for analysis.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Signed offset from a degree of freedom, `(x, y)`. One-dimensional
/// stencils have `y == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Offset {
    pub x: i32,
    pub y: i32,
}

impl Offset {
    pub const ZERO: Offset = Offset { x: 0, y: 0 };

    pub const fn new(x: i32, y: i32) -> Self {
        Offset { x, y }
    }

    pub const fn along_x(k: i32) -> Self {
        Offset { x: k, y: 0 }
    }

    pub const fn along_y(k: i32) -> Self {
        Offset { x: 0, y: k }
    }
}

// Ordered by y first, then x, which matches row-major flattening.
impl Ord for Offset {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Offset {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Periodic 1-D grid with `n` nodes and no duplicated endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    n: usize,
    length: f64,
    dx: f64,
}

impl Grid1D {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 nodes, got {n}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("length must be positive, got {length}")));
        }
        Ok(Grid1D {
            n,
            length,
            dx: length / n as f64,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Node coordinate `i * dx`.
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn wrap(&self, i: usize, k: i32) -> usize {
        wrap_index(i, k, self.n)
    }
}

/// Periodic 2-D grid, flattened row-major: `dof = iy * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    dx: f64,
    dy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes per direction, got {nx}x{ny}"
            )));
        }
        if !(lx.is_finite() && lx > 0.0 && ly.is_finite() && ly > 0.0) {
            return Err(Error::InvalidGrid(format!("extents must be positive, got {lx}x{ly}")));
        }
        Ok(Grid2D {
            nx,
            ny,
            lx,
            ly,
            dx: lx / nx as f64,
            dy: ly / ny as f64,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, dof: usize) -> (usize, usize) {
        (dof % self.nx, dof / self.nx)
    }

    pub fn wrap(&self, dof: usize, off: Offset) -> usize {
        let (ix, iy) = self.coords(dof);
        self.index(wrap_index(ix, off.x, self.nx), wrap_index(iy, off.y, self.ny))
    }
}

/// Either grid kind. Operators and snapshot sets carry one of these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grid {
    Line(Grid1D),
    Plane(Grid2D),
}

impl Grid {
    pub fn n_dofs(&self) -> usize {
        match self {
            Grid::Line(g) => g.n(),
            Grid::Plane(g) => g.n(),
        }
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, Grid::Plane(_))
    }

    /// Column index reached from `dof` by `off` with periodic wrap.
    ///
    /// Panics if a 1-D grid is given an offset with a `y` component;
    /// operators are validated against their grid on assembly.
    pub fn wrap(&self, dof: usize, off: Offset) -> usize {
        match self {
            Grid::Line(g) => {
                assert_eq!(off.y, 0, "2-D offset on a 1-D grid");
                g.wrap(dof, off.x)
            }
            Grid::Plane(g) => g.wrap(dof, off),
        }
    }

    pub fn supports(&self, off: Offset) -> bool {
        match self {
            Grid::Line(_) => off.y == 0,
            Grid::Plane(_) => true,
        }
    }

    pub fn as_line(&self) -> Option<&Grid1D> {
        match self {
            Grid::Line(g) => Some(g),
            Grid::Plane(_) => None,
        }
    }

    pub fn as_plane(&self) -> Option<&Grid2D> {
        match self {
            Grid::Plane(g) => Some(g),
            Grid::Line(_) => None,
        }
    }
}

/// `(i + k) mod n`, always in `[0, n)`.
pub fn wrap_index(i: usize, k: i32, n: usize) -> usize {
    let n_i = n as i64;
    ((i as i64 + k as i64).rem_euclid(n_i)) as usize
}

/// Ordered offset pattern containing the zero offset exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StencilSpec {
    offsets: Vec<Offset>,
    center: usize,
}

impl StencilSpec {
    pub fn new(offsets: Vec<Offset>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidStencil("empty offset list".into()));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidStencil(format!(
                "offsets must be strictly increasing: {offsets:?}"
            )));
        }
        let center = offsets
            .iter()
            .position(|o| *o == Offset::ZERO)
            .ok_or_else(|| Error::InvalidStencil("offset list lacks the zero offset".into()))?;
        Ok(StencilSpec { offsets, center })
    }

    /// Centered window of `size` points along x.
    pub fn centered(size: usize) -> Result<Self> {
        Self::centered_along(size, Offset::along_x)
    }

    /// Centered window of `size` points along y.
    pub fn centered_y(size: usize) -> Result<Self> {
        Self::centered_along(size, Offset::along_y)
    }

    fn centered_along(size: usize, make: fn(i32) -> Offset) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::InvalidStencil(format!(
                "centered stencil size must be odd and >= 3, got {size}"
            )));
        }
        let h = (size / 2) as i32;
        Self::new((-h..=h).map(make).collect())
    }

    /// Union of several patterns, sorted.
    pub fn union<'a>(specs: impl IntoIterator<Item = &'a StencilSpec>) -> Result<Self> {
        let mut all: Vec<Offset> = specs
            .into_iter()
            .flat_map(|s| s.offsets.iter().copied())
            .collect();
        all.sort();
        all.dedup();
        Self::new(all)
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn center_pos(&self) -> usize {
        self.center
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn position(&self, off: Offset) -> Option<usize> {
        self.offsets.binary_search(&off).ok()
    }

    /// Largest |x| among the offsets.
    pub fn half_width_x(&self) -> i32 {
        self.offsets.iter().map(|o| o.x.abs()).max().unwrap_or(0)
    }
}

/// The contribution of one degree of freedom's row.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    pub dof: usize,
    pub stencil: StencilSpec,
    pub coeffs: Vec<f64>,
}

impl LocalOperator {
    pub fn new(dof: usize, stencil: StencilSpec, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != stencil.len() {
            return Err(Error::Dimension {
                expected: stencil.len(),
                got: coeffs.len(),
            });
        }
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::Assembly(format!("non-finite coefficient {bad} at dof {dof}")));
        }
        Ok(LocalOperator {
            dof,
            stencil,
            coeffs,
        })
    }

    pub fn coeff(&self, off: Offset) -> f64 {
        self.stencil.position(off).map_or(0.0, |p| self.coeffs[p])
    }

    pub fn center_coeff(&self) -> f64 {
        self.coeffs[self.stencil.center_pos()]
    }

    /// Row re-expressed on a wider pattern; offsets absent here get zero.
    pub fn embedded(&self, pattern: &StencilSpec) -> Result<Vec<f64>> {
        let mut out = vec![0.0; pattern.len()];
        for (off, c) in self.stencil.offsets().iter().zip(&self.coeffs) {
            let p = pattern
                .position(*off)
                .ok_or_else(|| Error::InvalidStencil(format!("offset {off:?} not in target pattern")))?;
            out[p] = *c;
        }
        Ok(out)
    }
}

/// Row-local sparse operator over every degree of freedom of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledOperator {
    grid: Grid,
    rows: Vec<LocalOperator>,
    // CSR cache of the wrapped column indices.
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl AssembledOperator {
    /// Assemble exactly one row per DOF. Rows may arrive in any order.
    pub fn assemble(grid: Grid, rows: Vec<LocalOperator>) -> Result<Self> {
        let n = grid.n_dofs();
        let mut slots: Vec<Option<LocalOperator>> = vec![None; n];
        for row in rows {
            if row.dof >= n {
                return Err(Error::Assembly(format!("row for dof {} but n = {n}", row.dof)));
            }
            if let Some(off) = row.stencil.offsets().iter().find(|o| !grid.supports(**o)) {
                return Err(Error::Assembly(format!(
                    "offset {off:?} at dof {} does not fit the grid",
                    row.dof
                )));
            }
            if row.coeffs.len() != row.stencil.len() {
                return Err(Error::Dimension {
                    expected: row.stencil.len(),
                    got: row.coeffs.len(),
                });
            }
            if row.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::Assembly(format!("non-finite coefficient at dof {}", row.dof)));
            }
            let dof = row.dof;
            if slots[dof].replace(row).is_some() {
                return Err(Error::Assembly(format!("duplicate row for dof {dof}")));
            }
        }
        let rows: Vec<LocalOperator> = slots
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Assembly(format!("missing row for dof {i}"))))
            .collect::<Result<_>>()?;

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for (off, c) in row.stencil.offsets().iter().zip(&row.coeffs) {
                cols.push(grid.wrap(row.dof, *off));
                vals.push(*c);
            }
            row_ptr.push(cols.len());
        }
        Ok(AssembledOperator {
            grid,
            rows,
            row_ptr,
            cols,
            vals,
        })
    }

    /// Same stencil and coefficients at every DOF.
    pub fn uniform(grid: Grid, stencil: &StencilSpec, coeffs: &[f64]) -> Result<Self> {
        let rows = (0..grid.n_dofs())
            .map(|dof| LocalOperator::new(dof, stencil.clone(), coeffs.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(grid, rows)
    }

    /// Row-wise linear combination `sum_k w_k A_k` expressed on the union
    /// of each row's patterns.
    pub fn combine(terms: &[(f64, &AssembledOperator)]) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Assembly("empty combination".into()))?
            .1;
        let grid = first.grid;
        if terms.iter().any(|(_, a)| a.n() != first.n()) {
            return Err(Error::Assembly("combined operators differ in size".into()));
        }
        let rows = (0..first.n())
            .map(|i| {
                let pattern = StencilSpec::union(terms.iter().map(|(_, a)| &a.rows[i].stencil))?;
                let mut coeffs = vec![0.0; pattern.len()];
                for (w, a) in terms {
                    for (c, e) in coeffs.iter_mut().zip(a.rows[i].embedded(&pattern)?) {
                        *c += w * e;
                    }
                }
                LocalOperator::new(i, pattern, coeffs)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(grid, rows)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[LocalOperator] {
        &self.rows
    }

    pub fn row(&self, dof: usize) -> &LocalOperator {
        &self.rows[dof]
    }

    /// Wrapped `(column, coefficient)` pairs of one row; columns may repeat
    /// when the stencil is wider than the grid.
    pub fn row_entries(&self, dof: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[dof], self.row_ptr[dof + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    /// `result_i = sum_k coeff_k * u[wrap(i + offset_k)]`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n()];
        self.apply_into(u, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n();
        if u.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: u.len(),
            });
        }
        if out.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: out.len(),
            });
        }
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.vals[k] * u[self.cols[k]];
            }
            *o = acc;
        }
        Ok(())
    }

    pub fn apply_vec(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.apply(u.as_slice())?))
    }

    /// Dense `n x n` matrix; wrapped duplicates are summed.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, c) in self.row_entries(i) {
                m[(i, j)] += c;
            }
        }
        m
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        let rows = self
            .rows
            .iter()
            .map(|r| LocalOperator::new(r.dof, r.stencil.clone(), r.coeffs.iter().map(|c| alpha * c).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(self.grid, rows)
    }

    /// Mean coefficient per offset over all rows. Rows lacking an offset
    /// contribute zero.
    pub fn mean_row(&self) -> BTreeMap<Offset, f64> {
        let mut acc: BTreeMap<Offset, f64> = BTreeMap::new();
        for r in &self.rows {
            for (off, c) in r.stencil.offsets().iter().zip(&r.coeffs) {
                *acc.entry(*off).or_insert(0.0) += c;
            }
        }
        let n = self.n() as f64;
        acc.values_mut().for_each(|v| *v /= n);
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> Grid {
        Grid::Line(Grid1D::new(n, n as f64).unwrap())
    }

    #[test]
    fn centered_stencils() {
        let s3 = StencilSpec::centered(3).unwrap();
        assert_eq!(
            s3.offsets(),
            &[Offset::along_x(-1), Offset::ZERO, Offset::along_x(1)]
        );
        assert_eq!(s3.center_pos(), 1);
        let s5 = StencilSpec::centered(5).unwrap();
        let xs: Vec<i32> = s5.offsets().iter().map(|o| o.x).collect();
        assert_eq!(xs, vec![-2, -1, 0, 1, 2]);
        assert_eq!(s5.center_pos(), 2);
        assert!(matches!(StencilSpec::centered(4), Err(Error::InvalidStencil(_))));
        assert!(matches!(StencilSpec::centered(1), Err(Error::InvalidStencil(_))));
    }

    #[test]
    fn stencil_validation() {
        assert!(StencilSpec::new(vec![Offset::along_x(1), Offset::ZERO]).is_err());
        assert!(StencilSpec::new(vec![Offset::along_x(-1), Offset::along_x(1)]).is_err());
        assert!(StencilSpec::new(vec![Offset::ZERO, Offset::ZERO]).is_err());
        let s = StencilSpec::new(vec![Offset::along_x(-1), Offset::ZERO]).unwrap();
        assert_eq!(s.center_pos(), 1);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(2, 1.0).is_err());
        assert!(Grid1D::new(10, 0.0).is_err());
        let g = Grid1D::new(201, 10.0).unwrap();
        assert!((g.dx() * g.n() as f64 - g.length()).abs() < 1e-12);
        assert!(Grid2D::new(2, 5, 1.0, 1.0).is_err());
    }

    #[test]
    fn identity_assembly() {
        let g = line(3);
        let s = StencilSpec::new(vec![Offset::ZERO]).unwrap();
        let a = AssembledOperator::uniform(g, &s, &[1.0]).unwrap();
        assert_eq!(a.to_dense(), DMatrix::identity(3, 3));
        let u = vec![0.3, -1.0, 2.5];
        assert_eq!(a.apply(&u).unwrap(), u);
    }

    #[test]
    fn backward_difference_wraps() {
        let g = line(4);
        let s = StencilSpec::new(vec![Offset::along_x(-1), Offset::ZERO]).unwrap();
        let a = AssembledOperator::uniform(g, &s, &[-1.0, 1.0]).unwrap();
        let d = a.to_dense();
        assert_eq!(d[(0, 3)], -1.0);
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(2, 1)], -1.0);
        assert_eq!(d.row(0).iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn duplicate_or_missing_rows() {
        let g = line(3);
        let s = StencilSpec::new(vec![Offset::ZERO]).unwrap();
        let rows = [0, 0, 2]
            .iter()
            .map(|&d| LocalOperator::new(d, s.clone(), vec![1.0]).unwrap())
            .collect();
        assert!(matches!(AssembledOperator::assemble(g, rows), Err(Error::Assembly(_))));
        let rows = vec![LocalOperator::new(0, s.clone(), vec![1.0]).unwrap()];
        assert!(matches!(AssembledOperator::assemble(g, rows), Err(Error::Assembly(_))));
    }

    #[test]
    fn consistent_stencils_annihilate_constants() {
        let g = line(16);
        let s = StencilSpec::centered(3).unwrap();
        let bd = AssembledOperator::uniform(g, &s, &[-2.0, 2.0, 0.0]).unwrap();
        let lap = AssembledOperator::uniform(g, &s, &[4.0, -8.0, 4.0]).unwrap();
        let u = vec![0.7; 16];
        assert!(bd.apply(&u).unwrap().iter().all(|v| *v == 0.0));
        assert!(lap.apply(&u).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn apply_checks_length() {
        let g = line(5);
        let s = StencilSpec::centered(3).unwrap();
        let a = AssembledOperator::uniform(g, &s, &[1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(a.apply(&[1.0; 4]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn two_dimensional_wrap() {
        let g = Grid2D::new(3, 3, 3.0, 3.0).unwrap();
        // dof 0 = (0,0): left neighbour wraps to (2,0) = 2, down to (0,2) = 6
        assert_eq!(g.wrap(0, Offset::along_x(-1)), 2);
        assert_eq!(g.wrap(0, Offset::along_y(-1)), 6);
        assert_eq!(g.wrap(4, Offset::new(1, 1)), 8);
        assert_eq!(g.wrap(8, Offset::new(1, 1)), 0);
    }

    #[test]
    fn combine_on_union() {
        let g = line(8);
        let bd = AssembledOperator::uniform(g, &StencilSpec::centered(3).unwrap(), &[-1.0, 1.0, 0.0]).unwrap();
        let wide = AssembledOperator::uniform(g, &StencilSpec::centered(5).unwrap(), &[1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = AssembledOperator::combine(&[(2.0, &bd), (-1.0, &wide)]).unwrap();
        assert_eq!(c.row(3).coeffs, vec![-1.0, -2.0, 2.0, 0.0, -1.0]);
        let lhs = c.to_dense();
        let rhs = bd.to_dense() * 2.0 - wide.to_dense();
        assert_eq!(lhs, rhs);
    }

    fn random_rows(n: usize, seeds: &[(i32, i32, f64)]) -> AssembledOperator {
        let g = line(n);
        let rows = (0..n)
            .map(|dof| {
                let (lo, hi, v) = seeds[dof % seeds.len()];
                let lo = -lo.abs();
                let hi = hi.abs();
                let s = StencilSpec::new((lo..=hi).map(Offset::along_x).collect()).unwrap();
                let coeffs = (0..s.len()).map(|k| v * (k as f64 + 1.0).sin() + dof as f64 * 0.01).collect();
                LocalOperator::new(dof, s, coeffs).unwrap()
            })
            .collect();
        AssembledOperator::assemble(g, rows).unwrap()
    }

    proptest! {
        #[test]
        fn apply_matches_dense(
            n in 3usize..64,
            seeds in prop::collection::vec((0i32..5, 0i32..5, -3.0f64..3.0), 1..8),
            u in prop::collection::vec(-5.0f64..5.0, 64),
        ) {
            let a = random_rows(n, &seeds);
            let u = DVector::from_column_slice(&u[..n]);
            let sparse = a.apply_vec(&u).unwrap();
            let dense = a.to_dense() * &u;
            let scale = dense.amax().max(1.0);
            prop_assert!((sparse - dense).amax() <= 1e-12 * scale);
        }

        #[test]
        fn wrap_is_periodic(i in 0usize..500, k in -1000i32..1000, n in 1usize..200) {
            let w = wrap_index(i, k, n);
            prop_assert!(w < n);
            prop_assert_eq!(w, wrap_index(i, k + n as i32, n));
            prop_assert_eq!(w, wrap_index(i + n, k, n));
        }

        #[test]
        fn rows_round_trip(n in 3usize..40, seeds in prop::collection::vec((0i32..4, 0i32..4, -3.0f64..3.0), 1..5)) {
            let a = random_rows(n, &seeds);
            let b = AssembledOperator::assemble(*a.grid(), a.rows().to_vec()).unwrap();
            for i in 0..n {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }
}
