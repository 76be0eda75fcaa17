//! Temporal correction: every k_c steps a spectral operator maps the buffered
//! velocity history to an estimate of the accumulated step error, which is
//! added to the freshly stepped state.

use std::collections::VecDeque;

use crate::engine::Engine;
use crate::equations::EquationSystem;
use crate::error::{Error, Result};
use crate::fluxblock::{spectral_stack_apply, AblationSwitches, SpectralHyper, SpectralStackVars};
use crate::grid::Grid;
use crate::solver::{project, step_projected, FluxOperator, StateVars};

/// Rolling buffer of the k_c - 1 most recent velocity pairs, oldest first.
pub struct HistoryBuffer<T> {
    k_c: usize,
    grid: Grid,
    items: VecDeque<(T, T)>,
}

impl<T: Clone> HistoryBuffer<T> {
    pub fn new(k_c: usize, grid: Grid) -> Result<Self> {
        if k_c < 2 {
            return Err(Error::InvalidArgument(format!(
                "temporal correction interval must be >= 2, got {k_c}"
            )));
        }
        Ok(HistoryBuffer { k_c, grid, items: VecDeque::with_capacity(k_c - 1) })
    }

    pub fn interval(&self) -> usize {
        self.k_c
    }

    pub fn capacity(&self) -> usize {
        self.k_c - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity()
    }

    /// Append a velocity pair, evicting the oldest entry at capacity.
    pub fn push(&mut self, grid: Grid, u: T, v: T) -> Result<()> {
        if grid != self.grid {
            return Err(Error::GridMismatch);
        }
        if self.items.len() == self.capacity() {
            self.items.pop_front();
        }
        self.items.push_back((u, v));
        Ok(())
    }

    /// Oldest-to-newest iteration.
    pub fn iter(&self) -> impl Iterator<Item = &(T, T)> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

/// Learned error estimate from a full history buffer: the spectral operator on
/// the channel-stacked velocities, yielding a (u, v) correction pair.
pub fn correct<E: Engine>(
    e: &E,
    buffer: &HistoryBuffer<E::T>,
    corrector: &SpectralStackVars<E::T>,
    k_max: usize,
) -> Result<(E::T, E::T)> {
    if !buffer.is_full() {
        return Err(Error::InvalidArgument(format!(
            "temporal buffer underfull: {} of {} states",
            buffer.len(),
            buffer.capacity()
        )));
    }
    let mut parts = Vec::with_capacity(2 * buffer.capacity());
    for (u, v) in buffer.iter() {
        parts.push(u.clone());
        parts.push(v.clone());
    }
    let x = e.stack(&parts);
    let y = spectral_stack_apply(e, &x, corrector, k_max);
    Ok((e.unstack(&y, 0), e.unstack(&y, 1)))
}

/// Whether the correction branch fires at (1-based) step `k`.
pub fn correction_due(
    k: usize,
    k_c: usize,
    enabled: bool,
    buffer_full: bool,
) -> bool {
    enabled && buffer_full && k >= 1 && k % k_c == 0
}

/// One hybrid step: the finite-volume step, plus the learned temporal
/// correction at every k_c-th step once the buffer is full. For the NSE kinds
/// the correction itself is projected to divergence-free before it is added,
/// so the incompressibility invariant survives and a zero-weight corrector is
/// an exact no-op. The buffer always receives the step's final velocities.
#[allow(clippy::too_many_arguments)]
pub fn step_hybrid<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    k: usize,
    buffer: &mut HistoryBuffer<E::T>,
    sys: &EquationSystem,
    flux: &F,
    corrector: Option<&SpectralStackVars<E::T>>,
    hyper: &SpectralHyper,
    switches: &AblationSwitches,
    dt: f64,
) -> Result<StateVars<E::T>> {
    let mut next = step_projected(e, state, sys, flux, dt)?;
    let enabled = switches.enable_temporal_correction && corrector.is_some();
    if correction_due(k, buffer.interval(), enabled, buffer.is_full()) {
        let (mut eu, mut ev) = correct(e, buffer, corrector.expect("enabled"), hyper.k_max)?;
        if sys.kind.is_nse() {
            let (pu, pv) = project(e, &next.grid, &eu, &ev, dt)?;
            eu = pu;
            ev = pv;
        }
        next.channels[0] = e.add(&next.channels[0], &eu);
        next.channels[1] = e.add(&next.channels[1], &ev);
    }
    buffer.push(next.grid, next.channels[0].clone(), next.channels[1].clone())?;
    Ok(next)
}
