//! Grids of equal-width cubes over a bounded box of a subspace, paired with
//! width-`ε₂` intervals of the label line. Cells are addressed by index and
//! never materialized.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MimError, Result};
use crate::subspace::Subspace;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Cube partition of the box of `V` whose basis coordinates lie in
/// `[z_0, z_M]`, with thresholds `z_i = -sqrt(2 ln(k/ε)) + iε + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubePartition {
    subspace: Subspace,
    width: f64,
    offset: f64,
    cells_per_axis: usize,
    start: f64,
}

impl CubePartition {
    pub fn new(subspace: Subspace, width: f64, offset: f64) -> Result<Self> {
        if !(width > 0.0 && width < 1.0) {
            return Err(MimError::Config(format!("cube width must lie in (0, 1), got {width}")));
        }
        if !(0.0..width / 2.0).contains(&offset) {
            return Err(MimError::Config(format!(
                "offset must lie in [0, width/2), got {offset}"
            )));
        }
        let k = subspace.dim();
        let (start, cells_per_axis) = if k == 0 {
            (0.0, 1)
        } else {
            let half = (2.0 * (k as f64 / width).ln()).sqrt();
            (-half + offset, (2.0 * half / width).ceil() as usize)
        };
        Ok(CubePartition {
            subspace,
            width,
            offset,
            cells_per_axis,
            start,
        })
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn dim(&self) -> usize {
        self.subspace.dim()
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    /// Threshold `z_i`, `i = 0..=M`.
    pub fn threshold(&self, i: usize) -> f64 {
        self.start + i as f64 * self.width
    }

    /// Cube index of a point given by its basis coordinates. A coordinate on a
    /// threshold belongs to the lower-index cube.
    pub fn locate_coords(&self, coords: &[f64]) -> Option<Vec<u32>> {
        let hi = self.threshold(self.cells_per_axis);
        coords
            .iter()
            .map(|&c| {
                if !(c >= self.start && c <= hi) {
                    return None;
                }
                let u = ((c - self.start) / self.width).ceil() as i64 - 1;
                Some(u.clamp(0, self.cells_per_axis as i64 - 1) as u32)
            })
            .collect()
    }

    pub fn locate(&self, x: &[f64]) -> Result<Option<Vec<u32>>> {
        Ok(self.locate_coords(&self.subspace.coords(x)?))
    }

    /// Exact standard-Gaussian mass of a cube.
    pub fn cube_mass(&self, cube: &[u32]) -> f64 {
        cube.iter()
            .map(|&j| {
                let j = j as usize;
                normal_cdf(self.threshold(j + 1)) - normal_cdf(self.threshold(j))
            })
            .product()
    }

    /// Exact Gaussian mass of the whole box.
    pub fn box_mass(&self) -> f64 {
        let axis = normal_cdf(self.threshold(self.cells_per_axis)) - normal_cdf(self.start);
        axis.powi(self.dim() as i32)
    }
}

/// Label interval: bounded `[iε₂ - ε₂/2, iε₂ + ε₂/2]` or one of the two tails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntervalId {
    NegTail,
    Bounded(i64),
    PosTail,
}

/// Intervals `{[iε₂ - ε₂/2, iε₂ + ε₂/2] : |i| <= B/ε₂ - 1}` plus the two
/// unbounded tails, which absorb everything past the last bounded interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalPartition {
    width: f64,
    bound: f64,
    max_index: i64,
}

impl IntervalPartition {
    pub fn new(width: f64, bound: f64) -> Result<Self> {
        if !(width > 0.0) || !(bound >= width) || !bound.is_finite() {
            return Err(MimError::Config(format!(
                "interval partition needs 0 < width <= bound, got width {width}, bound {bound}"
            )));
        }
        let max_index = (bound / width - 1.0 + 1e-9).floor() as i64;
        Ok(IntervalPartition {
            width,
            bound,
            max_index: max_index.max(0),
        })
    }

    /// `B = 1/ε₂²`.
    pub fn with_default_bound(width: f64) -> Result<Self> {
        Self::new(width, 1.0 / (width * width))
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn max_index(&self) -> i64 {
        self.max_index
    }

    pub fn bounded_count(&self) -> usize {
        (2 * self.max_index + 1) as usize
    }

    /// Nearest interval centre, ties to the lower index, clamped into the tails.
    pub fn locate(&self, y: f64) -> IntervalId {
        let i = (y / self.width - 0.5).ceil();
        if i > self.max_index as f64 {
            IntervalId::PosTail
        } else if i < -(self.max_index as f64) {
            IntervalId::NegTail
        } else {
            IntervalId::Bounded(i as i64)
        }
    }

    /// Closed end points of an interval; tails use infinities.
    pub fn bounds(&self, id: IntervalId) -> (f64, f64) {
        let edge = (self.max_index as f64 + 0.5) * self.width;
        match id {
            IntervalId::NegTail => (f64::NEG_INFINITY, -edge),
            IntervalId::PosTail => (edge, f64::INFINITY),
            IntervalId::Bounded(i) => {
                let c = i as f64 * self.width;
                (c - self.width / 2.0, c + self.width / 2.0)
            }
        }
    }
}

/// Address of a (cube, interval) pair. `cube = None` is the region outside
/// the box.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub cube: Option<Vec<u32>>,
    pub interval: IntervalId,
}

impl CellId {
    pub fn is_outside(&self) -> bool {
        self.cube.is_none()
    }
}

/// An `(ε₁, ε₂, B)` discretization of `V x R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub cubes: CubePartition,
    pub intervals: IntervalPartition,
}

impl Discretization {
    pub fn locate(&self, x: &[f64], y: f64) -> Result<CellId> {
        check_dim(self.cubes.subspace.ambient_dim(), x.len())?;
        Ok(CellId {
            cube: self.cubes.locate(x)?,
            interval: self.intervals.locate(y),
        })
    }

    /// Exact Gaussian mass of the cube of `cell`; the outside region gets the
    /// complement of the box.
    pub fn cell_mass(&self, cell: &CellId) -> f64 {
        match &cell.cube {
            Some(c) => self.cubes.cube_mass(c),
            None => 1.0 - self.cubes.box_mass(),
        }
    }
}

/// Builds both partitions. `bound = None` uses `B = 1/ε₂²`.
pub fn build_discretization(
    subspace: &Subspace,
    cube_width: f64,
    interval_width: f64,
    bound: Option<f64>,
    offset: f64,
) -> Result<Discretization> {
    let cubes = CubePartition::new(subspace.clone(), cube_width, offset)?;
    let intervals = match bound {
        Some(b) => IntervalPartition::new(interval_width, b)?,
        None => IntervalPartition::with_default_bound(interval_width)?,
    };
    Ok(Discretization { cubes, intervals })
}

/// Free-function lookup.
pub fn locate(x: &[f64], y: f64, parts: &Discretization) -> Result<CellId> {
    parts.locate(x, y)
}

/// Free-function exact cube mass.
pub fn cell_mass(cell: &CellId, parts: &Discretization) -> f64 {
    parts.cell_mass(cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cells_per_axis_example() {
        let v = Subspace::coordinate(3, &[0]).unwrap();
        let p = build_discretization(&v, 0.5, 0.1, None, 0.0).unwrap();
        assert_eq!(p.cubes.cells_per_axis(), 5);
        let half = (2.0 * 2f64.ln()).sqrt();
        assert!((p.cubes.threshold(0) + half).abs() < 1e-15);
        assert!((p.intervals.bound() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn interval_count_example() {
        let ip = IntervalPartition::new(0.1, 100.0).unwrap();
        assert_eq!(ip.max_index(), 999);
        assert_eq!(ip.bounded_count(), 1999);
    }

    #[test]
    fn trivial_subspace_single_cell() {
        let p = build_discretization(&Subspace::trivial(4), 0.3, 0.1, None, 0.0).unwrap();
        let c = p.locate(&[9.0, -9.0, 1.0, 1e6], 0.0).unwrap();
        assert_eq!(c.cube, Some(vec![]));
        assert_eq!(p.cell_mass(&c), 1.0);
    }

    #[test]
    fn locate_examples() {
        let v = Subspace::coordinate(2, &[0]).unwrap();
        let p = build_discretization(&v, 0.5, 0.1, Some(100.0), 0.0).unwrap();
        assert_eq!(p.intervals.locate(0.0), IntervalId::Bounded(0));
        assert_eq!(p.intervals.locate(250.0), IntervalId::PosTail);
        assert_eq!(p.intervals.locate(-250.0), IntervalId::NegTail);
        // 99.97 lies past the last bounded interval but below B.
        assert_eq!(p.intervals.locate(99.97), IntervalId::PosTail);
        assert_eq!(p.intervals.locate(0.05), IntervalId::Bounded(0));
        let z0 = p.cubes.threshold(0);
        let c = p.locate(&[z0 + 0.6, 3.0], 0.0).unwrap();
        assert_eq!(c.cube, Some(vec![1]));
        // exactly on z_1: lower-index cube
        assert_eq!(p.cubes.locate_coords(&[z0 + 0.5]), Some(vec![0]));
        assert_eq!(p.cubes.locate_coords(&[z0]), Some(vec![0]));
        assert_eq!(p.cubes.locate_coords(&[z0 - 1e-9]), None);
        assert_eq!(p.cubes.locate_coords(&[p.cubes.threshold(5)]), Some(vec![4]));
        assert_eq!(p.cubes.locate_coords(&[f64::NAN]), None);
    }

    #[test]
    fn parameter_errors() {
        let v = Subspace::coordinate(2, &[0]).unwrap();
        assert!(build_discretization(&v, 1.0, 0.1, None, 0.0).is_err());
        assert!(build_discretization(&v, 0.5, 0.0, None, 0.0).is_err());
        assert!(build_discretization(&v, 0.5, 0.1, Some(0.05), 0.0).is_err());
        assert!(build_discretization(&v, 0.5, 0.1, None, 0.25).is_err());
        assert!(build_discretization(&v, 0.5, 0.1, None, 0.2).is_ok());
    }

    #[test]
    fn cube_mass_examples() {
        // A 1-d cell [0, 0.5]: pick offset so that 0 is a threshold.
        let v = Subspace::coordinate(1, &[0]).unwrap();
        let half = (2.0 * (1.0f64 / 0.5).ln()).sqrt();
        let frac = (half / 0.5).fract() * 0.5;
        let cp = CubePartition::new(v.clone(), 0.5, frac).unwrap();
        let j = cp.locate_coords(&[0.25]).unwrap()[0];
        assert!(cp.threshold(j as usize).abs() < 1e-12);
        assert!((cp.cube_mass(&[j]) - 0.191_462_461_274_013_1).abs() < 1e-9);
        // symmetric cells [-a, 0] and [0, a]
        assert!((cp.cube_mass(&[j - 1]) - cp.cube_mass(&[j])).abs() < 1e-12);
        let total: f64 = (0..cp.cells_per_axis() as u32).map(|j| cp.cube_mass(&[j])).sum();
        assert!((total - cp.box_mass()).abs() < 1e-12);
    }

    #[test]
    fn located_points_satisfy_cube_inequalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Subspace::span_of(4, &[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, -1.0]]).unwrap();
        let p = build_discretization(&v, 0.2, 0.1, None, 0.07).unwrap();
        let mut counts = std::collections::HashMap::new();
        let n = 20_000;
        for _ in 0..n {
            let x: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let id = p.locate(&x, 0.0).unwrap();
            if let Some(c) = &id.cube {
                let coords = v.coords(&x).unwrap();
                for (i, &j) in c.iter().enumerate() {
                    let j = j as usize;
                    assert!(p.cubes.threshold(j) <= coords[i] + 1e-12);
                    assert!(coords[i] <= p.cubes.threshold(j + 1) + 1e-12);
                }
            }
            *counts.entry(id.cube).or_insert(0usize) += 1;
        }
        assert_eq!(counts.values().sum::<usize>(), n);
    }
}
