//! Time discretization and grid-sampled functions.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("Hurst parameter must lie in (0,1), got {0}")]
    HurstOutOfRange(f64),
    #[error("operation requires H > 1/2 (kernel-derivative branch), got {0}")]
    UnsupportedHurstBranch(f64),
    #[error("time horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("time grid needs at least one step")]
    EmptyGrid,
    #[error("block size {block} is not a positive grid multiple of step {dt}")]
    BadBlockSize { block: f64, dt: f64 },
    #[error("{kind:?} sampling expects {expected} values, got {got}")]
    ValueCount {
        kind: SampleKind,
        expected: usize,
        got: usize,
    },
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("non-finite value in grid function")]
    NonFinite,
}

/// Hurst index of fractional Brownian motion, constrained to (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self, GridError> {
        if !(h.is_finite() && h > 0.0 && h < 1.0) {
            return Err(GridError::HurstOutOfRange(h));
        }
        Ok(Self(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn two_h(self) -> f64 {
        2.0 * self.0
    }

    /// The kernel-derivative operators only exist in the rough-integral form
    /// for `H > 1/2`; everything in the rate-function pipeline calls this.
    pub fn require_upper_branch(self) -> Result<f64, GridError> {
        if self.0 <= 0.5 {
            return Err(GridError::UnsupportedHurstBranch(self.0));
        }
        Ok(self.0)
    }
}

/// Uniform grid `t_k = k T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, GridError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        if steps == 0 {
            return Err(GridError::EmptyGrid);
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k`; `node(steps) == horizon` exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64 / self.steps as f64)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        debug_assert!(k < self.steps);
        self.horizon * ((k as f64 + 0.5) / self.steps as f64)
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.midpoint(k)).collect()
    }

    /// Number of grid steps per block, requiring `block` to be a positive
    /// integer multiple of the step.
    pub fn block_steps(&self, block: f64) -> Result<usize, GridError> {
        let dt = self.dt();
        let ratio = block / dt;
        let rounded = ratio.round();
        if !(block > 0.0) || rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(GridError::BadBlockSize { block, dt });
        }
        Ok(rounded as usize)
    }

    /// Block-floor map `bar(t) = floor(t/delta) * delta`.
    pub fn block_floor(&self, t: f64, block: f64) -> Result<f64, GridError> {
        self.block_steps(block)?;
        Ok((t / block).floor() * block)
    }

    /// Largest grid multiple of `dt` that does not exceed `target`; used for
    /// rounding block sizes like `epsilon^{2/3}` down onto the grid.
    pub fn floor_to_grid(&self, target: f64) -> f64 {
        let dt = self.dt();
        let k = (target / dt).floor().max(1.0);
        k * dt
    }
}

/// Whether values are node samples or per-cell constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// One value per node `t_0..t_n`.
    Pointwise,
    /// One value per cell `[t_k, t_{k+1})`.
    PiecewiseConstant,
}

/// An `R^m`-valued function carried on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    kind: SampleKind,
    dim: usize,
    values: Vec<Vec<f64>>,
}

impl GridFunction {
    pub fn pointwise(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self, GridError> {
        Self::build(grid, SampleKind::Pointwise, values)
    }

    pub fn piecewise_constant(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self, GridError> {
        Self::build(grid, SampleKind::PiecewiseConstant, values)
    }

    fn build(grid: TimeGrid, kind: SampleKind, values: Vec<Vec<f64>>) -> Result<Self, GridError> {
        let expected = match kind {
            SampleKind::Pointwise => grid.steps() + 1,
            SampleKind::PiecewiseConstant => grid.steps(),
        };
        if values.len() != expected {
            return Err(GridError::ValueCount {
                kind,
                expected,
                got: values.len(),
            });
        }
        let dim = values.first().map_or(0, Vec::len);
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(GridError::ValueCount {
                kind,
                expected,
                got: values.len(),
            });
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite);
        }
        Ok(Self {
            grid,
            kind,
            dim,
            values,
        })
    }

    /// Scalar function sampled at the nodes.
    pub fn sample_scalar(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().into_iter().map(|t| vec![f(t)]).collect();
        Self::pointwise(grid, values).expect("sampled values are well formed")
    }

    /// Scalar indicator of `[0, t_end]` as a per-cell constant; a cell counts
    /// as inside when its midpoint is below `t_end`.
    pub fn indicator(grid: TimeGrid, t_end: f64) -> Self {
        let values = (0..grid.steps())
            .map(|k| vec![if grid.midpoint(k) <= t_end { 1.0 } else { 0.0 }])
            .collect();
        Self::piecewise_constant(grid, values).expect("indicator values are well formed")
    }

    pub fn zeros(grid: TimeGrid, kind: SampleKind, dim: usize) -> Self {
        let count = match kind {
            SampleKind::Pointwise => grid.steps() + 1,
            SampleKind::PiecewiseConstant => grid.steps(),
        };
        Self::build(grid, kind, vec![vec![0.0; dim]; count]).expect("zeros are well formed")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }

    /// Per-cell representation: piecewise-constant data unchanged, pointwise
    /// data averaged over cell endpoints.
    pub fn cell_values(&self) -> Vec<Vec<f64>> {
        match self.kind {
            SampleKind::PiecewiseConstant => self.values.clone(),
            SampleKind::Pointwise => (0..self.grid.steps())
                .map(|k| {
                    (0..self.dim)
                        .map(|c| 0.5 * (self.values[k][c] + self.values[k + 1][c]))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.grid == other.grid && self.dim == other.dim
    }

    /// Debug dump as `time,c0,...` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "time")?;
        for c in 0..self.dim {
            write!(out, ",c{c}")?;
        }
        writeln!(out)?;
        let times: Vec<f64> = match self.kind {
            SampleKind::Pointwise => self.grid.nodes(),
            SampleKind::PiecewiseConstant => self.grid.midpoints(),
        };
        for (t, row) in times.iter().zip(&self.values) {
            write!(out, "{t}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hurst_range_is_enforced() {
        assert!(HurstParam::new(0.75).is_ok());
        assert!(HurstParam::new(0.0).is_err());
        assert!(HurstParam::new(1.0).is_err());
        assert!(HurstParam::new(f64::NAN).is_err());
        assert!(HurstParam::new(0.5).unwrap().require_upper_branch().is_err());
        assert!(HurstParam::new(0.6).unwrap().require_upper_branch().is_ok());
    }

    #[test]
    fn grid_nodes_are_uniform_and_exact() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(8), 2.0);
        let nodes = g.nodes();
        for k in 1..nodes.len() {
            assert!(nodes[k] > nodes[k - 1]);
        }
    }

    #[test]
    fn block_floor_requires_grid_multiple() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(g.block_floor(0.55, 0.2).unwrap(), 0.4);
        assert_eq!(g.block_steps(0.3).unwrap(), 3);
        assert!(g.block_steps(0.15).is_err());
        assert!(g.block_steps(0.0).is_err());
    }

    #[test]
    fn value_counts_match_kind() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert!(GridFunction::pointwise(g, vec![vec![0.0]; 5]).is_ok());
        assert!(GridFunction::pointwise(g, vec![vec![0.0]; 4]).is_err());
        assert!(GridFunction::piecewise_constant(g, vec![vec![0.0]; 4]).is_ok());
        assert!(GridFunction::piecewise_constant(g, vec![vec![f64::NAN]; 4]).is_err());
    }

    #[test]
    fn cell_values_average_pointwise_samples() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let f = GridFunction::pointwise(g, vec![vec![0.0], vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(f.cell_values(), vec![vec![1.0], vec![3.0]]);
    }
}
