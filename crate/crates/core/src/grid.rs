//! Uniform periodic 2-D grids, cell-centered field states, trajectories,
//! and the block-mean / strided coarse-graining operators.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Uniform periodic cell lattice. Cells are indexed `[j][i]` with `j` along y
/// and `i` along x; values live at cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 4x4 for the stencil footprint, got {nx}x{ny}"
            )));
        }
        if lx <= 0.0 || ly <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "domain extents must be positive, got {lx}x{ly}"
            )));
        }
        Ok(Grid {
            nx,
            ny,
            lx,
            ly,
            dx: lx / nx as f64,
            dy: ly / ny as f64,
        })
    }

    /// x coordinate of the center of cell column `i`.
    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    /// y coordinate of the center of cell row `j`.
    pub fn y_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dy
    }

    /// x coordinate of face `i` along x (the face between cells `i-1` and `i`).
    pub fn x_face(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn y_face(&self, j: usize) -> f64 {
        j as f64 * self.dy
    }
}

pub const CH_U: &str = "u";
pub const CH_V: &str = "v";
pub const CH_S: &str = "s";

/// Cell-centered flow variables on one grid at one instant. Velocity channels
/// `u`, `v` are always present; the passive scalar `s` only for shear flow.
#[derive(Debug, Clone)]
pub struct FieldState {
    pub grid: Grid,
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
}

impl FieldState {
    pub fn new(grid: Grid, channels: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(channels.len());
        let mut arrays = Vec::with_capacity(channels.len());
        for (name, a) in channels {
            if a.dim() != (grid.ny, grid.nx) {
                return Err(Error::ShapeMismatch(format!(
                    "channel {name}: expected {}x{}, got {:?}",
                    grid.ny,
                    grid.nx,
                    a.dim()
                )));
            }
            names.push(name);
            arrays.push(a);
        }
        let state = FieldState { grid, names, arrays };
        state.check_finite(0)?;
        Ok(state)
    }

    pub fn velocity(grid: Grid, u: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        FieldState::new(grid, vec![(CH_U.into(), u), (CH_V.into(), v)])
    }

    pub fn zeros_like(&self) -> Self {
        let arrays = self
            .arrays
            .iter()
            .map(|a| Array2::zeros(a.dim()))
            .collect();
        FieldState {
            grid: self.grid,
            names: self.names.clone(),
            arrays,
        }
    }

    pub fn channel_names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, name: &str) -> Option<&Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| &self.arrays[k])
    }

    pub fn channels(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.arrays.iter())
    }

    pub fn num_channels(&self) -> usize {
        self.arrays.len()
    }

    /// Non-finite values mean the simulation blew up; surface them as such.
    pub fn check_finite(&self, step: usize) -> Result<()> {
        for (name, a) in self.channels() {
            if let Some(bad) = a.iter().find(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("channel {name} contains non-finite value {bad}"),
                });
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// Time-ordered sequence of states on one shared grid with a uniform step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<FieldState>,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<FieldState>, dt: f64, t0: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs >= 1 state".into()));
        }
        if dt <= 0.0 {
            return Err(Error::InvalidArgument("trajectory dt must be > 0".into()));
        }
        let g = states[0].grid;
        let names = states[0].channel_names().to_vec();
        for s in &states {
            if s.grid != g || s.channel_names() != names.as_slice() {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Trajectory { states, dt, t0 })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Physical time of state `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }
}

/// Block-mean coarse-graining of one channel; finite-volume cell averaging.
pub fn downsample_array(fine: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (ny, nx) = fine.dim();
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if ny % factor != 0 || nx % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} does not divide field shape {ny}x{nx}"
        )));
    }
    let (cy, cx) = (ny / factor, nx / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array2::zeros((cy, cx));
    for j in 0..cy {
        for i in 0..cx {
            let mut acc = 0.0;
            for dj in 0..factor {
                for di in 0..factor {
                    acc += fine[[j * factor + dj, i * factor + di]];
                }
            }
            out[[j, i]] = acc * inv;
        }
    }
    Ok(out)
}

/// Spatial coarse-graining: each coarse cell is the arithmetic mean of its
/// `factor x factor` fine-cell block. Extents are preserved.
pub fn downsample_spatial(fine: &FieldState, factor: usize) -> Result<FieldState> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if fine.grid.nx % factor != 0 || fine.grid.ny % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} does not divide grid {}x{}",
            fine.grid.nx, fine.grid.ny
        )));
    }
    let coarse = Grid::new(
        fine.grid.nx / factor,
        fine.grid.ny / factor,
        fine.grid.lx,
        fine.grid.ly,
    )?;
    let channels = fine
        .channels()
        .map(|(name, a)| Ok((name.to_string(), downsample_array(a, factor)?)))
        .collect::<Result<Vec<_>>>()?;
    FieldState::new(coarse, channels)
}

/// Temporal coarse-graining: keep states at indices 0, factor, 2*factor, ...
/// as instantaneous snapshots; the step widens accordingly.
pub fn downsample_temporal(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let states = traj
        .states
        .iter()
        .step_by(factor)
        .cloned()
        .collect::<Vec<_>>();
    Trajectory::new(states, traj.dt * factor as f64, traj.t0)
}
