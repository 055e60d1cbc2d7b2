use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matgrid::Grid;

/// Ordered token-map sizes plus the index where fidelity refinement begins.
///
/// Scales `0..refinement_start` form the establishment stage and always run
/// unmodified; `refinement_start..len()` is the refinement stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<Grid>,
    refinement_start: usize,
}

/// Square sides of the default desk schedule.
pub const DESK_SIDES: [usize; 9] = [1, 2, 4, 8, 16, 32, 40, 48, 64];
/// First refinement index in [`DESK_SIDES`] (the 40-side scale).
pub const DESK_REFINEMENT_START: usize = 6;

impl ScaleSchedule {
    pub fn new(scales: Vec<Grid>, refinement_start: usize) -> Result<Self> {
        let Some(first) = scales.first() else {
            return Err(Error::Config("schedule needs at least one scale".into()));
        };
        if *first != Grid::new(1, 1) {
            return Err(Error::Config(format!("first scale must be 1x1, got {first}")));
        }
        for pair in scales.windows(2) {
            if pair[1].h < pair[0].h || pair[1].w < pair[0].w {
                return Err(Error::Config(format!(
                    "scales must be nondecreasing, {} follows {}",
                    pair[1], pair[0]
                )));
            }
        }
        if refinement_start == 0 || refinement_start > scales.len() {
            return Err(Error::Config(format!(
                "refinement_start {refinement_start} outside 1..={}",
                scales.len()
            )));
        }
        Ok(Self {
            scales,
            refinement_start,
        })
    }

    pub fn from_sides(sides: &[usize], refinement_start: usize) -> Result<Self> {
        if sides.contains(&0) {
            return Err(Error::Config("scale sides must be positive".into()));
        }
        Self::new(sides.iter().map(|&s| Grid::square(s)).collect(), refinement_start)
    }

    pub fn desk() -> Self {
        Self::from_sides(&DESK_SIDES, DESK_REFINEMENT_START).expect("desk schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scales(&self) -> &[Grid] {
        &self.scales
    }

    pub fn grid(&self, k: usize) -> Grid {
        self.scales[k]
    }

    /// Final (image-resolution) grid.
    pub fn full_grid(&self) -> Grid {
        *self.scales.last().expect("nonempty")
    }

    pub fn refinement_start(&self) -> usize {
        self.refinement_start
    }

    pub fn is_refinement(&self, k: usize) -> bool {
        k >= self.refinement_start
    }

    pub fn refinement_scales(&self) -> std::ops::Range<usize> {
        self.refinement_start..self.scales.len()
    }

    pub fn num_refinement(&self) -> usize {
        self.scales.len() - self.refinement_start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schedule_shape() {
        let s = ScaleSchedule::desk();
        assert_eq!(s.len(), 9);
        assert_eq!(s.full_grid(), Grid::square(64));
        assert_eq!(s.refinement_scales(), 6..9);
        assert_eq!(s.grid(6), Grid::square(40));
    }

    #[test]
    fn validation() {
        assert!(ScaleSchedule::from_sides(&[], 1).is_err());
        assert!(ScaleSchedule::from_sides(&[2, 4], 1).is_err());
        assert!(ScaleSchedule::from_sides(&[1, 4, 2], 1).is_err());
        assert!(ScaleSchedule::from_sides(&[1, 2], 0).is_err());
        assert!(ScaleSchedule::from_sides(&[1, 2], 3).is_err());
        assert!(ScaleSchedule::from_sides(&[1, 0], 1).is_err());
        // No refinement scales at all is allowed.
        assert_eq!(ScaleSchedule::from_sides(&[1, 2], 2).unwrap().num_refinement(), 0);
        assert!(ScaleSchedule::new(vec![Grid::new(1, 1), Grid::new(2, 1), Grid::new(2, 3)], 2).is_ok());
    }
}
