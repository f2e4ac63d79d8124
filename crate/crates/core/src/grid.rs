//! Uniform axis-aligned partitions, the quantizer `Π` and the cell map `Ξ`.
//!
//! Cells are half-open `[face_j, face_{j+1})` per axis, except the last cell
//! of each axis which also owns the upper face of the box. Representative
//! points are cell centers. Flat indices are row-major: axis 0 is the most
//! significant digit.

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, invalid, Error, Result};
use crate::model::IntervalBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    bounds: IntervalBox,
    cells: Vec<usize>,
    widths: Vec<f64>,
}

/// Output of `Ξ`: the cell and whether the point had to be clamped into the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLookup {
    pub index: usize,
    pub clamped: bool,
}

/// Output of `Π`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub index: usize,
    pub point: Vec<f64>,
    pub clamped: bool,
}

impl Grid {
    pub fn partition_box(bounds: IntervalBox, cells_per_dim: Vec<usize>) -> Result<Self> {
        dim_check("cells per dimension", bounds.dim(), cells_per_dim.len())?;
        if bounds.dim() == 0 {
            return Err(Error::InvalidBox("zero-dimensional box".into()));
        }
        if let Some(i) = cells_per_dim.iter().position(|c| *c == 0) {
            return Err(invalid("cells_per_dim", format!("dimension {i} has zero cells")));
        }
        let total = cells_per_dim
            .iter()
            .try_fold(1usize, |acc, c| acc.checked_mul(*c));
        if total.is_none_or(|t| t > u32::MAX as usize) {
            return Err(invalid("cells_per_dim", "total cell count overflows"));
        }
        let widths = (0..bounds.dim())
            .map(|i| bounds.width(i) / cells_per_dim[i] as f64)
            .collect();
        Ok(Self {
            bounds,
            cells: cells_per_dim,
            widths,
        })
    }

    /// Finest-needed uniform grid whose cell diameter does not exceed `delta`.
    ///
    /// Each axis gets `ceil(width·√d / δ)` cells; a relative slack of `1e-9`
    /// absorbs representation error so that `[19,21]` with `δ = 0.005` gives
    /// exactly 400 cells.
    pub fn with_target_delta(bounds: IntervalBox, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(invalid("delta", format!("must be positive, got {delta}")));
        }
        let scale = (bounds.dim() as f64).sqrt();
        let cells = (0..bounds.dim())
            .map(|i| {
                let exact = bounds.width(i) * scale / delta;
                ((exact * (1.0 - 1e-9)).ceil() as usize).max(1)
            })
            .collect();
        Self::partition_box(bounds, cells)
    }

    pub fn bounds(&self) -> &IntervalBox {
        &self.bounds
    }
    pub fn dim(&self) -> usize {
        self.cells.len()
    }
    pub fn cells_per_dim(&self) -> &[usize] {
        &self.cells
    }
    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Discretization parameter: Euclidean diameter of one cell.
    pub fn delta(&self) -> f64 {
        self.widths.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// `face(axis, j)` for `j ∈ 0..=cells`; the last face is the box's upper bound.
    pub fn face(&self, axis: usize, j: usize) -> f64 {
        if j == self.cells[axis] {
            self.bounds.hi()[axis]
        } else {
            self.bounds.lo()[axis] + j as f64 * self.widths[axis]
        }
    }

    pub fn center(&self, axis: usize, j: usize) -> f64 {
        self.bounds.lo()[axis] + (j as f64 + 0.5) * self.widths[axis]
    }

    /// Cell along one axis containing `x`, clamped into the box.
    fn axis_index(&self, axis: usize, x: f64) -> (usize, bool) {
        let lo = self.bounds.lo()[axis];
        let hi = self.bounds.hi()[axis];
        let n = self.cells[axis];
        if x < lo {
            return (0, true);
        }
        if x > hi {
            return (n - 1, true);
        }
        let guess = ((x - lo) / self.widths[axis]).floor();
        let mut j = if guess < 0.0 { 0 } else { (guess as usize).min(n - 1) };
        // reconcile with the faces as computed by `face`, so the half-open
        // convention is exact
        while j + 1 < n && x >= self.face(axis, j + 1) {
            j += 1;
        }
        while j > 0 && x < self.face(axis, j) {
            j -= 1;
        }
        (j, false)
    }

    /// Cell index along a single axis, clamped into the box.
    pub fn cell_of_axis(&self, axis: usize, x: f64) -> usize {
        self.axis_index(axis, x).0
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        dim_check("grid point", self.dim(), x.len())?;
        if let Some(i) = x.iter().position(|v| v.is_nan()) {
            return Err(Error::NanCoordinate(i));
        }
        Ok(())
    }

    /// The cell map `Ξ`.
    pub fn cell_of(&self, x: &[f64]) -> Result<CellLookup> {
        self.check_point(x)?;
        let mut index = 0;
        let mut clamped = false;
        for (axis, v) in x.iter().enumerate() {
            let (j, c) = self.axis_index(axis, *v);
            index = index * self.cells[axis] + j;
            clamped |= c;
        }
        Ok(CellLookup { index, clamped })
    }

    /// The quantizer `Π`.
    pub fn quantize(&self, x: &[f64]) -> Result<Quantized> {
        let CellLookup { index, clamped } = self.cell_of(x)?;
        Ok(Quantized {
            index,
            point: self.representative(index),
            clamped,
        })
    }

    /// `Π` extended to all of ℝⁿ by continuing the lattice beyond the box.
    ///
    /// Inside the box this agrees with [`Grid::quantize`]; outside it returns
    /// the center of the lattice cell that would contain `x`, so the error
    /// stays below half a width per axis.
    pub fn lattice_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(x.iter()
            .enumerate()
            .map(|(axis, v)| {
                let lo = self.bounds.lo()[axis];
                if *v >= lo && *v <= self.bounds.hi()[axis] {
                    self.center(axis, self.axis_index(axis, *v).0)
                } else {
                    let w = self.widths[axis];
                    lo + (((v - lo) / w).floor() + 0.5) * w
                }
            })
            .collect())
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            out[axis] = index % self.cells[axis];
            index /= self.cells[axis];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.cells)
            .fold(0, |acc, (j, n)| acc * n + j)
    }

    pub fn representative(&self, index: usize) -> Vec<f64> {
        self.multi_index(index)
            .into_iter()
            .enumerate()
            .map(|(axis, j)| self.center(axis, j))
            .collect()
    }

    pub fn representatives(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.representative(i))
    }

    /// Lower and upper corner of a cell.
    pub fn cell_bounds(&self, index: usize) -> (Vec<f64>, Vec<f64>) {
        let multi = self.multi_index(index);
        let lo = multi.iter().enumerate().map(|(a, j)| self.face(a, *j)).collect();
        let hi = multi.iter().enumerate().map(|(a, j)| self.face(a, j + 1)).collect();
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn temp_grid() -> Grid {
        Grid::partition_box(IntervalBox::interval(19.0, 21.0).unwrap(), vec![400]).unwrap()
    }

    #[test]
    fn temperature_grid_resolution() {
        let g = temp_grid();
        assert!((g.widths()[0] - 0.005).abs() < 1e-15);
        assert!((g.delta() - 0.005).abs() < 1e-15);
        let g = Grid::with_target_delta(IntervalBox::interval(19.0, 21.0).unwrap(), 0.005).unwrap();
        assert_eq!(g.cells_per_dim(), &[400]);
    }

    #[test]
    fn input_grid_resolution() {
        let g = Grid::partition_box(IntervalBox::interval(0.0, 0.6).unwrap(), vec![15]).unwrap();
        assert!((g.widths()[0] - 0.04).abs() < 1e-15);
        let g = Grid::with_target_delta(IntervalBox::interval(0.0, 0.6).unwrap(), 0.04).unwrap();
        assert_eq!(g.cells_per_dim(), &[15]);
    }

    #[test]
    fn one_cell_grid() {
        let b = IntervalBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g = Grid::partition_box(b, vec![1, 1]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.representative(0), vec![0.5, 0.5]);
        assert!((g.delta() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_cells_and_nan() {
        let b = IntervalBox::interval(0.0, 1.0).unwrap();
        assert!(Grid::partition_box(b.clone(), vec![0]).is_err());
        assert!(Grid::with_target_delta(b.clone(), 0.0).is_err());
        let g = Grid::partition_box(b, vec![4]).unwrap();
        assert!(matches!(g.quantize(&[f64::NAN]), Err(Error::NanCoordinate(0))));
    }

    #[test]
    fn representative_is_a_fixed_point() {
        let g = temp_grid();
        for i in [0, 17, 199, 200, 399] {
            let r = g.representative(i);
            let q = g.quantize(&r).unwrap();
            assert_eq!(q.index, i);
            assert_eq!(q.point, r);
            assert!(!q.clamped);
        }
    }

    #[test]
    fn quantizes_near_lower_edge() {
        let g = temp_grid();
        let q = g.quantize(&[19.0012]).unwrap();
        assert_eq!(q.index, 0);
        assert!((q.point[0] - 19.0025).abs() < 1e-12);
        assert_eq!(g.cell_of(&[19.0012]).unwrap().index, 0);
    }

    #[test]
    fn interior_boundary_goes_to_upper_cell() {
        let g = temp_grid();
        let face = g.face(0, 200);
        assert_eq!(g.cell_of(&[face]).unwrap().index, 200);
        assert!((g.quantize(&[20.0]).unwrap().point[0] - 20.0025).abs() < 1e-12);
        // the top face belongs to the last cell
        assert_eq!(g.cell_of(&[21.0]).unwrap(), CellLookup { index: 399, clamped: false });
    }

    #[test]
    fn outside_points_are_clamped_and_flagged() {
        let g = temp_grid();
        assert_eq!(g.cell_of(&[18.0]).unwrap(), CellLookup { index: 0, clamped: true });
        assert_eq!(g.cell_of(&[25.0]).unwrap(), CellLookup { index: 399, clamped: true });
    }

    #[test]
    fn lattice_extends_beyond_the_box() {
        let g = temp_grid();
        let p = g.lattice_point(&[21.0012]).unwrap();
        assert!((p[0] - 21.0025).abs() < 1e-12);
        let p = g.lattice_point(&[18.9999]).unwrap();
        assert!((p[0] - 18.9975).abs() < 1e-12);
        assert_eq!(g.lattice_point(&[20.3]).unwrap(), g.quantize(&[20.3]).unwrap().point);
    }

    #[test]
    fn flat_and_multi_indices_agree() {
        let b = IntervalBox::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 3.0]).unwrap();
        let g = Grid::partition_box(b, vec![3, 4, 2]).unwrap();
        assert_eq!(g.len(), 24);
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
            assert_eq!(g.cell_of(&g.representative(i)).unwrap().index, i);
        }
    }

    proptest! {
        #[test]
        fn quantizer_properties(
            cells in prop::collection::vec(1usize..40, 1..4),
            fracs in prop::collection::vec(0.0f64..=1.0, 3),
        ) {
            let d = cells.len();
            let lo: Vec<f64> = (0..d).map(|i| -1.0 + i as f64).collect();
            let hi: Vec<f64> = (0..d).map(|i| 1.5 + 2.0 * i as f64).collect();
            let g = Grid::partition_box(IntervalBox::new(lo.clone(), hi.clone()).unwrap(), cells).unwrap();
            let x: Vec<f64> = (0..d).map(|i| lo[i] + fracs[i] * (hi[i] - lo[i])).collect();
            let q = g.quantize(&x).unwrap();
            prop_assert!(!q.clamped);
            // ‖Π(x) − x‖ ≤ δ and per-axis error ≤ w/2
            let err: f64 = x.iter().zip(&q.point).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= g.delta() * (1.0 + 1e-12));
            for (axis, (a, b)) in x.iter().zip(&q.point).enumerate() {
                prop_assert!((a - b).abs() <= g.widths()[axis] * 0.5 * (1.0 + 1e-9));
            }
            // idempotence and cell consistency
            let qq = g.quantize(&q.point).unwrap();
            prop_assert_eq!(&qq.point, &q.point);
            prop_assert_eq!(g.cell_of(&q.point).unwrap().index, q.index);
            // the point lies in its cell
            let (clo, chi) = g.cell_bounds(q.index);
            for i in 0..d {
                prop_assert!(x[i] >= clo[i] && x[i] <= chi[i]);
                prop_assert!(q.point[i] >= clo[i] && q.point[i] <= chi[i]);
            }
        }
    }
}
