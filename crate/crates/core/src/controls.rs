//! Control pairs: a Cameron-Martin control for the Brownian channels and an
//! RKHS element for the fractional channel, with their energies.

use thiserror::Error;

use crate::frac_ops::{rkhs_inner, FracError};
use crate::grid::{GridError, GridFunction, HurstParam, SampleKind, TimeGrid};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("hdot must carry one R^{{d1+d2}} value per cell ({expected}), got {got}")]
    HdotShape { expected: usize, got: usize },
    #[error("hbar must be pointwise R^{{d1}} on the same grid")]
    HbarShape,
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `(h, h̄)`: piecewise-constant Cameron-Martin derivative `ḣ` on the cells
/// (values in `R^{d1+d2}`) and a pointwise RKHS element `h̄` (values in
/// `R^{d1}`), with cached energies
/// `½ ∫ |ḣ|² dt` and `½ ‖h̄‖²_H`.
#[derive(Debug, Clone)]
pub struct ControlPair {
    grid: TimeGrid,
    hurst: HurstParam,
    d1: usize,
    d2: usize,
    hdot: Vec<Vec<f64>>,
    hbar: GridFunction,
    cm_energy: f64,
    rkhs_energy: f64,
}

impl ControlPair {
    pub fn new(
        grid: TimeGrid,
        hurst: HurstParam,
        d1: usize,
        d2: usize,
        hdot: Vec<Vec<f64>>,
        hbar: GridFunction,
    ) -> Result<Self, ControlError> {
        let n = grid.steps();
        if hdot.len() != n || hdot.iter().any(|v| v.len() != d1 + d2) {
            return Err(ControlError::HdotShape {
                expected: n,
                got: hdot.len(),
            });
        }
        if hbar.kind() != SampleKind::Pointwise || hbar.dim() != d1 || hbar.grid() != &grid {
            return Err(ControlError::HbarShape);
        }
        let dt = grid.dt();
        let cm_energy = 0.5
            * dt
            * hdot
                .iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>();
        let rkhs_energy = 0.5 * rkhs_inner(&hbar, &hbar, hurst)?;
        Ok(Self {
            grid,
            hurst,
            d1,
            d2,
            hdot,
            hbar,
            cm_energy,
            rkhs_energy,
        })
    }

    /// The zero control.
    pub fn zero(grid: TimeGrid, hurst: HurstParam, d1: usize, d2: usize) -> Self {
        let hdot = vec![vec![0.0; d1 + d2]; grid.steps()];
        let hbar = GridFunction::zeros(grid, SampleKind::Pointwise, d1);
        Self::new(grid, hurst, d1, d2, hdot, hbar).expect("zero control is well formed")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    /// `ḣ` per cell.
    pub fn hdot(&self) -> &[Vec<f64>] {
        &self.hdot
    }

    /// First `d1` coordinates of `ḣ` on cell `k`.
    pub fn hdot_p1(&self, k: usize) -> &[f64] {
        &self.hdot[k][..self.d1]
    }

    /// Last `d2` coordinates of `ḣ` on cell `k`.
    pub fn hdot_p2(&self, k: usize) -> &[f64] {
        &self.hdot[k][self.d1..]
    }

    pub fn hbar(&self) -> &GridFunction {
        &self.hbar
    }

    /// `½ ∫ |ḣ|² dt`.
    pub fn cm_energy(&self) -> f64 {
        self.cm_energy
    }

    /// `½ ‖h̄‖²_H`.
    pub fn rkhs_energy(&self) -> f64 {
        self.rkhs_energy
    }

    pub fn total_energy(&self) -> f64 {
        self.cm_energy + self.rkhs_energy
    }

    /// Membership in the radius-`N` control balls: `∫|ḣ|² <= N` and
    /// `‖h̄‖²_H <= N`, i.e. each stored half-energy at most `N/2`.
    pub fn in_ball(&self, n: f64) -> bool {
        self.cm_energy <= 0.5 * n && self.rkhs_energy <= 0.5 * n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn energies_of_simple_controls() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let h = HurstParam::new(0.75).unwrap();
        // hdot = (1, 0) on every cell: ½∫|hdot|² = ½ * 2
        let hdot = vec![vec![1.0, 0.0]; 8];
        // hbar = 1 pointwise: ½ ‖1‖²_H = ½ T^{2H}
        let hbar = GridFunction::sample_scalar(grid, |_| 1.0);
        let c = ControlPair::new(grid, h, 1, 1, hdot, hbar).unwrap();
        assert_relative_eq!(c.cm_energy(), 1.0);
        assert_relative_eq!(c.rkhs_energy(), 0.5 * 2f64.powf(1.5), max_relative = 1e-12);
        assert!(c.in_ball(2.0 * c.total_energy() + 1.0));
        assert!(!c.in_ball(0.1));
    }

    #[test]
    fn zero_control_has_zero_energy() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let h = HurstParam::new(0.75).unwrap();
        let c = ControlPair::zero(grid, h, 2, 1);
        assert_eq!(c.total_energy(), 0.0);
        assert_eq!(c.hdot_p1(0).len(), 2);
        assert_eq!(c.hdot_p2(0).len(), 1);
    }

    #[test]
    fn shape_errors() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let h = HurstParam::new(0.75).unwrap();
        let bad_hdot = vec![vec![0.0; 2]; 3];
        let hbar = GridFunction::zeros(grid, SampleKind::Pointwise, 1);
        assert!(ControlPair::new(grid, h, 1, 1, bad_hdot, hbar.clone()).is_err());
        let bad_hbar = GridFunction::zeros(grid, SampleKind::PiecewiseConstant, 1);
        let hdot = vec![vec![0.0; 2]; 4];
        assert!(ControlPair::new(grid, h, 1, 1, hdot, bad_hbar).is_err());
    }
}
