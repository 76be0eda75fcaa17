//! Finite-volume right-hand sides, the spectral projection, RK4 stepping, and
//! vorticity. Everything is written once against [`Engine`], so the classical
//! solver and the differentiable learned solver share the exact same kernels.

use ndarray::{Array2, Ix2};

use crate::engine::Engine;
use crate::equations::{EquationSystem, FlowKind};
use crate::error::{Error, Result};
use crate::fft::PoissonSymbol;
use crate::fluxblock::{apply_flux_op, AblationSwitches, ModelVars, OpKind, SpectralHyper};
use crate::grid::{FieldState, Grid, Trajectory, CH_S, CH_U, CH_V};
use crate::stencil::{
    face_average_adjoint_kernel, face_average_kernel, face_difference_kernel,
    face_gradient_kernel, face_to_cell_interpolate_kernel, physics_derivative_kernel,
    physics_interpolate_kernel, Axis,
};

/// A [`FieldState`] lifted onto an engine.
#[derive(Clone)]
pub struct StateVars<T> {
    pub grid: Grid,
    pub names: Vec<String>,
    pub channels: Vec<T>,
}

pub fn upload_state<E: Engine>(e: &E, s: &FieldState) -> StateVars<E::T> {
    StateVars {
        grid: s.grid,
        names: s.channel_names().to_vec(),
        channels: s
            .channels()
            .map(|(_, a)| e.constant(a.clone().into_dyn()))
            .collect(),
    }
}

pub fn download_state<E: Engine>(e: &E, s: &StateVars<E::T>) -> Result<FieldState> {
    let channels = s
        .names
        .iter()
        .zip(&s.channels)
        .map(|(n, t)| {
            let a = e
                .value(t)
                .into_dimensionality::<Ix2>()
                .map_err(|err| Error::ShapeMismatch(format!("channel {n}: {err}")))?;
            Ok((n.clone(), a))
        })
        .collect::<Result<Vec<_>>>()?;
    FieldState::new(s.grid, channels)
}

/// Face derivative / interpolation provider: the physics stencils alone, or
/// the learned integrated operator.
pub trait FluxOperator<E: Engine> {
    fn op(&self, e: &E, u: &E::T, m: OpKind, axis: Axis, grid: &Grid) -> Result<E::T>;
}

/// Classical solver fluxes: fixed 4th-order stencils, nothing learned.
pub struct PhysicsFlux;

impl<E: Engine> FluxOperator<E> for PhysicsFlux {
    fn op(&self, e: &E, u: &E::T, m: OpKind, axis: Axis, grid: &Grid) -> Result<E::T> {
        let h = match axis {
            Axis::X => grid.dx,
            Axis::Y => grid.dy,
        };
        let k = match m {
            OpKind::Derivative => physics_derivative_kernel(axis, h),
            OpKind::Interpolate => physics_interpolate_kernel(axis),
        };
        Ok(e.stencil(u, &k))
    }
}

/// The learned integrated flux operator with per-(kind, axis) parameters.
pub struct LearnedFlux<'a, T> {
    pub vars: &'a ModelVars<T>,
    pub hyper: SpectralHyper,
    pub switches: AblationSwitches,
}

impl<'a, E: Engine> FluxOperator<E> for LearnedFlux<'a, E::T> {
    fn op(&self, e: &E, u: &E::T, m: OpKind, axis: Axis, grid: &Grid) -> Result<E::T> {
        let slot = &self.vars.flux[crate::fluxblock::flux_index(m, axis)];
        apply_flux_op(e, u, slot, m, axis, grid, &self.hyper, &self.switches)
    }
}

/// Discrete flux-sum divergence: 2-point face differences along each axis,
/// divided by the cell size.
pub fn face_divergence<E: Engine>(e: &E, fx: &E::T, fy: &E::T, grid: &Grid) -> E::T {
    let dx = e.stencil(fx, &face_difference_kernel(Axis::X, grid.dx));
    let dy = e.stencil(fy, &face_difference_kernel(Axis::Y, grid.dy));
    e.add(&dx, &dy)
}

/// Burgers tendency: per velocity channel, flux along the channel's own axis
/// carries the advective u^2/2 term; both axes carry -nu * derivative.
pub fn burgers_rhs<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    sys: &EquationSystem,
    flux: &F,
) -> Result<StateVars<E::T>> {
    if sys.kind != FlowKind::Burgers {
        return Err(Error::InvalidArgument(format!(
            "burgers_rhs called with kind {}",
            sys.kind.name()
        )));
    }
    let grid = &state.grid;
    let mut channels = Vec::with_capacity(state.channels.len());
    for (idx, c) in state.channels.iter().enumerate() {
        let own_axis = if idx == 0 { Axis::X } else { Axis::Y };
        let mut faces = Vec::with_capacity(2);
        for axis in [Axis::X, Axis::Y] {
            let deriv = flux.op(e, c, OpKind::Derivative, axis, grid)?;
            let visc = e.scale(&deriv, -sys.viscosity);
            let f = if axis == own_axis {
                let m = flux.op(e, c, OpKind::Interpolate, axis, grid)?;
                e.add(&e.scale(&e.mul(&m, &m), 0.5), &visc)
            } else {
                visc
            };
            faces.push(f);
        }
        let div = face_divergence(e, &faces[0], &faces[1], grid);
        channels.push(e.scale(&div, -1.0));
    }
    Ok(StateVars { grid: *grid, names: state.names.clone(), channels })
}

/// Conservative advection-diffusion tendency of one transported channel:
/// -div( u_face * interp(c) - diff * deriv(c) ).
fn transport_tendency<E: Engine, F: FluxOperator<E>>(
    e: &E,
    c: &E::T,
    un_x: &E::T,
    un_y: &E::T,
    diff: f64,
    flux: &F,
    grid: &Grid,
    reuse_interp: (Option<&E::T>, Option<&E::T>),
) -> Result<E::T> {
    let interp_x = match reuse_interp.0 {
        Some(t) => t.clone(),
        None => flux.op(e, c, OpKind::Interpolate, Axis::X, grid)?,
    };
    let interp_y = match reuse_interp.1 {
        Some(t) => t.clone(),
        None => flux.op(e, c, OpKind::Interpolate, Axis::Y, grid)?,
    };
    let deriv_x = flux.op(e, c, OpKind::Derivative, Axis::X, grid)?;
    let deriv_y = flux.op(e, c, OpKind::Derivative, Axis::Y, grid)?;
    let fx = e.add(&e.mul(un_x, &interp_x), &e.scale(&deriv_x, -diff));
    let fy = e.add(&e.mul(un_y, &interp_y), &e.scale(&deriv_y, -diff));
    let div = face_divergence(e, &fx, &fy, grid);
    Ok(e.scale(&div, -1.0))
}

/// Momentum (and scalar, when present) tendency for the NSE kinds: conservative
/// advection with face-normal velocities, viscous fluxes, and the Kolmogorov
/// forcing for forced flow. The pressure contribution is handled by
/// [`project`], never here.
pub fn nse_rhs<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    sys: &EquationSystem,
    flux: &F,
) -> Result<StateVars<E::T>> {
    if !sys.kind.is_nse() {
        return Err(Error::InvalidArgument(format!(
            "nse_rhs called with kind {}",
            sys.kind.name()
        )));
    }
    let grid = &state.grid;
    let u = &state.channels[0];
    let v = &state.channels[1];
    let un_x = flux.op(e, u, OpKind::Interpolate, Axis::X, grid)?;
    let un_y = flux.op(e, v, OpKind::Interpolate, Axis::Y, grid)?;

    let mut channels = Vec::with_capacity(state.channels.len());
    for (idx, (name, c)) in state.names.iter().zip(&state.channels).enumerate() {
        let diff = if name == CH_S {
            sys.diffusivity.ok_or_else(|| {
                Error::InvalidArgument("scalar channel present but no diffusivity set".into())
            })?
        } else {
            sys.viscosity
        };
        let reuse = (
            (idx == 0).then_some(&un_x),
            (idx == 1).then_some(&un_y),
        );
        let mut t = transport_tendency(e, c, &un_x, &un_y, diff, flux, grid, reuse)?;
        if let Some(f) = &sys.forcing {
            if name == CH_U {
                let body = Array2::from_shape_fn((grid.ny, grid.nx), |(j, _)| {
                    f.amplitude * (f.wavenumber * grid.y_center(j)).sin()
                });
                t = e.add(&t, &e.constant(body.into_dyn()));
            }
            if name == CH_U || name == CH_V {
                t = e.axpy(-f.drag, c, &t);
            }
        }
        channels.push(t);
    }
    Ok(StateVars { grid: *grid, names: state.names.clone(), channels })
}

/// Scalar advection-diffusion tendency alone (shear flow).
pub fn scalar_rhs<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    sys: &EquationSystem,
    flux: &F,
) -> Result<E::T> {
    if sys.kind != FlowKind::Shear {
        return Err(Error::InvalidArgument(format!(
            "scalar_rhs called with kind {}",
            sys.kind.name()
        )));
    }
    let grid = &state.grid;
    let s_idx = state
        .names
        .iter()
        .position(|n| n == CH_S)
        .ok_or_else(|| Error::InvalidArgument("scalar channel missing".into()))?;
    let un_x = flux.op(e, &state.channels[0], OpKind::Interpolate, Axis::X, grid)?;
    let un_y = flux.op(e, &state.channels[1], OpKind::Interpolate, Axis::Y, grid)?;
    let diff = sys
        .diffusivity
        .ok_or_else(|| Error::InvalidArgument("shear flow needs a diffusivity".into()))?;
    transport_tendency(
        e,
        &state.channels[s_idx],
        &un_x,
        &un_y,
        diff,
        flux,
        grid,
        (None, None),
    )
}

/// Full tendency for any equation kind.
pub fn rhs<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    sys: &EquationSystem,
    flux: &F,
) -> Result<StateVars<E::T>> {
    match sys.kind {
        FlowKind::Burgers => burgers_rhs(e, state, sys, flux),
        _ => nse_rhs(e, state, sys, flux),
    }
}

/// Pressure projection on the 2-point face-average / face-difference path:
/// removes the discrete divergence of (u, v) to round-off.
pub fn project<E: Engine>(
    e: &E,
    grid: &Grid,
    u: &E::T,
    v: &E::T,
    dt: f64,
) -> Result<(E::T, E::T)> {
    let fx = e.stencil(u, &face_average_kernel(Axis::X));
    let fy = e.stencil(v, &face_average_kernel(Axis::Y));
    let div = face_divergence(e, &fx, &fy, grid);
    let rhs = e.scale(&div, 1.0 / dt);
    let p = e.poisson(&rhs, grid.dx, grid.dy, PoissonSymbol::Projection)?;
    let gx = e.stencil(&p, &face_gradient_kernel(Axis::X, grid.dx));
    let gy = e.stencil(&p, &face_gradient_kernel(Axis::Y, grid.dy));
    let cx = e.stencil(&gx, &face_average_adjoint_kernel(Axis::X));
    let cy = e.stencil(&gy, &face_average_adjoint_kernel(Axis::Y));
    Ok((e.axpy(-dt, &cx, u), e.axpy(-dt, &cy, v)))
}

/// Project the velocity channels of a state in place; other channels pass
/// through untouched.
pub fn project_state_vars<E: Engine>(
    e: &E,
    mut state: StateVars<E::T>,
    dt: f64,
) -> Result<StateVars<E::T>> {
    let (u, v) = project(e, &state.grid, &state.channels[0], &state.channels[1], dt)?;
    state.channels[0] = u;
    state.channels[1] = v;
    Ok(state)
}

/// Classical-path projection of a plain state.
pub fn project_state(state: &FieldState, dt: f64) -> Result<FieldState> {
    let e = crate::engine::RawEngine;
    let vars = upload_state(&e, state);
    let out = project_state_vars(&e, vars, dt)?;
    download_state(&e, &out)
}

/// Discrete divergence on the projection path (face-average then
/// face-difference), for audits.
pub fn discrete_divergence(state: &FieldState) -> Array2<f64> {
    let e = crate::engine::RawEngine;
    let grid = state.grid;
    let u = state.channel(CH_U).expect("velocity").clone().into_dyn();
    let v = state.channel(CH_V).expect("velocity").clone().into_dyn();
    let fx = e.stencil(&u, &face_average_kernel(Axis::X));
    let fy = e.stencil(&v, &face_average_kernel(Axis::Y));
    face_divergence(&e, &fx, &fy, &grid)
        .into_dimensionality::<Ix2>()
        .expect("rank 2")
}

fn state_axpy<E: Engine>(
    e: &E,
    alpha: f64,
    x: &StateVars<E::T>,
    y: &StateVars<E::T>,
) -> StateVars<E::T> {
    StateVars {
        grid: y.grid,
        names: y.names.clone(),
        channels: x
            .channels
            .iter()
            .zip(&y.channels)
            .map(|(xc, yc)| e.axpy(alpha, xc, yc))
            .collect(),
    }
}

fn check_stage_finite<E: Engine>(e: &E, s: &StateVars<E::T>, stage: &str) -> Result<()> {
    for (name, t) in s.names.iter().zip(&s.channels) {
        let v = e.value(t);
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: 0,
                detail: format!("RK4 {stage}: channel {name} contains non-finite value {bad}"),
            });
        }
    }
    Ok(())
}

/// Classical 4-stage Runge-Kutta with a per-stage hook (projection for the
/// NSE kinds; identity otherwise). The hook receives the stage's effective dt.
pub fn rk4_step<E, R, P>(
    e: &E,
    state: &StateVars<E::T>,
    dt: f64,
    rhs_fn: R,
    post_stage: P,
) -> Result<StateVars<E::T>>
where
    E: Engine,
    R: Fn(&E, &StateVars<E::T>) -> Result<StateVars<E::T>>,
    P: Fn(&E, StateVars<E::T>, f64) -> Result<StateVars<E::T>>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let k1 = rhs_fn(e, state)?;
    let s1 = post_stage(e, state_axpy(e, dt / 2.0, &k1, state), dt / 2.0)?;
    check_stage_finite(e, &s1, "stage 1")?;
    let k2 = rhs_fn(e, &s1)?;
    let s2 = post_stage(e, state_axpy(e, dt / 2.0, &k2, state), dt / 2.0)?;
    check_stage_finite(e, &s2, "stage 2")?;
    let k3 = rhs_fn(e, &s2)?;
    let s3 = post_stage(e, state_axpy(e, dt, &k3, state), dt)?;
    check_stage_finite(e, &s3, "stage 3")?;
    let k4 = rhs_fn(e, &s3)?;
    // state + dt/6 * (k1 + 2 k2 + 2 k3 + k4)
    let mut acc = state.clone();
    acc = state_axpy(e, dt / 6.0, &k1, &acc);
    acc = state_axpy(e, dt / 3.0, &k2, &acc);
    acc = state_axpy(e, dt / 3.0, &k3, &acc);
    acc = state_axpy(e, dt / 6.0, &k4, &acc);
    let next = post_stage(e, acc, dt)?;
    check_stage_finite(e, &next, "stage 4 (combine)")?;
    Ok(next)
}

/// One full time step: RK4 over the equation tendency, with per-stage
/// projection for the NSE kinds. Burgers never projects.
pub fn step_projected<E: Engine, F: FluxOperator<E>>(
    e: &E,
    state: &StateVars<E::T>,
    sys: &EquationSystem,
    flux: &F,
    dt: f64,
) -> Result<StateVars<E::T>> {
    let project_stages = sys.kind.is_nse();
    rk4_step(
        e,
        state,
        dt,
        |e, s| rhs(e, s, sys, flux),
        |e, s, stage_dt| {
            if project_stages {
                project_state_vars(e, s, stage_dt)
            } else {
                Ok(s)
            }
        },
    )
}

/// One classical (physics-only) step on a plain state.
pub fn classical_step(state: &FieldState, sys: &EquationSystem, dt: f64) -> Result<FieldState> {
    let e = crate::engine::RawEngine;
    let vars = upload_state(&e, state);
    let next = step_projected(&e, &vars, sys, &PhysicsFlux, dt)?;
    download_state(&e, &next)
}

/// Classical rollout recording every state (initial included). Divergence is
/// reported with the failing step index.
pub fn classical_rollout(
    initial: &FieldState,
    sys: &EquationSystem,
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial.clone());
    let mut current = initial.clone();
    for k in 1..=steps {
        current = classical_step(&current, sys, dt).map_err(|err| match err {
            Error::Diverged { detail, .. } => Error::Diverged { step: k, detail },
            other => other,
        })?;
        states.push(current.clone());
    }
    Trajectory::new(states, dt, 0.0)
}

/// Cell-centered vorticity dv/dx - du/dy: 4th-order face derivatives mapped
/// back to cell centers with the matching 4th-order face interpolation.
pub fn vorticity(state: &FieldState) -> Array2<f64> {
    let e = crate::engine::RawEngine;
    let grid = state.grid;
    let u = state.channel(CH_U).expect("velocity").clone().into_dyn();
    let v = state.channel(CH_V).expect("velocity").clone().into_dyn();
    let dvdx = e.stencil(
        &e.stencil(&v, &physics_derivative_kernel(Axis::X, grid.dx)),
        &face_to_cell_interpolate_kernel(Axis::X),
    );
    let dudy = e.stencil(
        &e.stencil(&u, &physics_derivative_kernel(Axis::Y, grid.dy)),
        &face_to_cell_interpolate_kernel(Axis::Y),
    );
    e.sub(&dvdx, &dudy)
        .into_dimensionality::<Ix2>()
        .expect("rank 2")
}

/// Mean kinetic energy density 0.5 <u^2 + v^2>.
pub fn kinetic_energy(state: &FieldState) -> f64 {
    let u = state.channel(CH_U).expect("velocity");
    let v = state.channel(CH_V).expect("velocity");
    let n = (u.len()) as f64;
    0.5 * (u.iter().map(|x| x * x).sum::<f64>() + v.iter().map(|x| x * x).sum::<f64>()) / n
}
