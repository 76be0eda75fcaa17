//! Learnable flux operators: for each (kind, axis) the output is the sum of a
//! fixed physics stencil, a trainable 5x4 stencil, and a truncated spectral
//! branch. No weight sharing across kinds or axes.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::fft::check_kmax;
use crate::grid::Grid;
use crate::stencil::{physics_derivative_kernel, physics_interpolate_kernel, Axis};

/// Flux operator kind: face derivative or face interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Derivative,
    Interpolate,
}

impl OpKind {
    pub fn is_derivative(self) -> bool {
        matches!(self, OpKind::Derivative)
    }

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::Derivative => "d",
            OpKind::Interpolate => "i",
        }
    }
}

fn axis_tag(axis: Axis) -> &'static str {
    match axis {
        Axis::X => "x",
        Axis::Y => "y",
    }
}

/// Index of the (kind, axis) slot in the flux parameter list.
pub fn flux_index(m: OpKind, axis: Axis) -> usize {
    let mi = if m.is_derivative() { 0 } else { 1 };
    let ai = match axis {
        Axis::X => 0,
        Axis::Y => 1,
    };
    mi * 2 + ai
}

pub fn flux_name(m: OpKind, axis: Axis) -> String {
    format!("flux_{}_{}", m.tag(), axis_tag(axis))
}

/// Spectral-branch hyperparameters shared by all learned spectral stacks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectralHyper {
    /// Number of per-mode complex linear layers (L).
    pub layers: usize,
    /// Channel width of the hidden layers (C).
    pub channels: usize,
    /// Retained mode offsets per axis: -k_max ..= k_max.
    pub k_max: usize,
    /// Uniform init half-width for the stencil and projection weights.
    pub init_scale: f64,
}

impl Default for SpectralHyper {
    fn default() -> Self {
        SpectralHyper { layers: 2, channels: 8, k_max: 12, init_scale: 1e-3 }
    }
}

impl SpectralHyper {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.k_max == 0 {
            return Err(Error::InvalidArgument(format!(
                "spectral hyperparameters must be >= 1, got L={} C={} k_max={}",
                self.layers, self.channels, self.k_max
            )));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::InvalidArgument("init_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        2 * self.k_max + 1
    }
}

/// Branch enable flags for the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationSwitches {
    pub enable_physics: bool,
    pub enable_learnable: bool,
    pub enable_spectral: bool,
    pub enable_temporal_correction: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            enable_physics: true,
            enable_learnable: true,
            enable_spectral: true,
            enable_temporal_correction: true,
        }
    }
}

impl AblationSwitches {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_physics || self.enable_learnable || self.enable_spectral) {
            return Err(Error::InvalidArgument(
                "at least one flux branch must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// One spectral operator: L layers of per-retained-mode complex channel maps
/// with a pointwise nonlinearity between layers, then a real projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralStack {
    /// (real, imaginary) weight pairs; layer 0 is `[C, in_ch, M, M]`, deeper
    /// layers `[C, C, M, M]` with `M = 2 k_max + 1`.
    pub layers: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    /// Projection back to output channels, `[out_ch, C]`.
    pub q: ArrayD<f64>,
}

impl SpectralStack {
    pub fn init(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, hyper: &SpectralHyper) -> Self {
        let m = hyper.mode_count();
        let c = hyper.channels;
        // standard spectral-layer scaling: keep per-mode maps O(1/(C * modes))
        let spectral_scale = 1.0 / (c as f64 * (m * m) as f64);
        let mut layers = Vec::with_capacity(hyper.layers);
        for l in 0..hyper.layers {
            let cin = if l == 0 { in_ch } else { c };
            let shape = IxDyn(&[c, cin, m, m]);
            let re = ArrayD::from_shape_fn(shape.clone(), |_| {
                rng.gen_range(-1.0..=1.0) * spectral_scale
            });
            let im =
                ArrayD::from_shape_fn(shape, |_| rng.gen_range(-1.0..=1.0) * spectral_scale);
            layers.push((re, im));
        }
        let eps = hyper.init_scale;
        let q = ArrayD::from_shape_fn(IxDyn(&[out_ch, c]), |_| rng.gen_range(-1.0..=1.0) * eps);
        SpectralStack { layers, q }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, hyper: &SpectralHyper) -> Self {
        let m = hyper.mode_count();
        let c = hyper.channels;
        let layers = (0..hyper.layers)
            .map(|l| {
                let cin = if l == 0 { in_ch } else { c };
                let shape = IxDyn(&[c, cin, m, m]);
                (ArrayD::zeros(shape.clone()), ArrayD::zeros(shape))
            })
            .collect();
        SpectralStack { layers, q: ArrayD::zeros(IxDyn(&[out_ch, c])) }
    }
}

/// Trainable parameters for one (kind, axis) flux operator.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxOpParams {
    /// Trainable 5x4 stencil, same anchoring as the physics kernel.
    pub w_l: ArrayD<f64>,
    pub spectral: SpectralStack,
}

/// Uploaded tensors for one flux operator on some engine.
#[derive(Clone)]
pub struct SpectralStackVars<T> {
    pub layers: Vec<(T, T)>,
    pub q: T,
}

#[derive(Clone)]
pub struct FluxOpVars<T> {
    pub w_l: T,
    pub spectral: SpectralStackVars<T>,
}

#[derive(Clone)]
pub struct ModelVars<T> {
    pub flux: Vec<FluxOpVars<T>>,
    pub corrector: Option<SpectralStackVars<T>>,
}

impl<T: Clone> ModelVars<T> {
    /// Named trainable leaves in the canonical parameter order.
    pub fn leaves(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        for (idx, op) in self.flux.iter().enumerate() {
            let name = FLUX_SLOT_NAMES[idx];
            out.push((format!("{name}.w_l"), op.w_l.clone()));
            push_stack_leaves(&mut out, name, &op.spectral);
        }
        if let Some(corr) = &self.corrector {
            push_stack_leaves(&mut out, "corr", corr);
        }
        out
    }
}

fn push_stack_leaves<T: Clone>(out: &mut Vec<(String, T)>, prefix: &str, s: &SpectralStackVars<T>) {
    for (l, (re, im)) in s.layers.iter().enumerate() {
        out.push((format!("{prefix}.spec{l}.re"), re.clone()));
        out.push((format!("{prefix}.spec{l}.im"), im.clone()));
    }
    out.push((format!("{prefix}.q"), s.q.clone()));
}

const FLUX_SLOT_NAMES: [&str; 4] = ["flux_d_x", "flux_d_y", "flux_i_x", "flux_i_y"];

/// Full learned-model parameter set: four flux operators plus the optional
/// temporal corrector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: SpectralHyper,
    /// Temporal-correction interval.
    pub k_c: usize,
    /// Indexed by [`flux_index`]: d_x, d_y, i_x, i_y.
    pub flux: Vec<FluxOpParams>,
    pub corrector: Option<SpectralStack>,
}

impl ModelParams {
    /// Seed-reproducible init: stencil and projection weights uniform in
    /// [-init_scale, init_scale], spectral maps at the 1/(C * modes) scale.
    pub fn init(seed: u64, hyper: SpectralHyper, k_c: usize, with_corrector: bool) -> Result<Self> {
        hyper.validate()?;
        if with_corrector && k_c < 2 {
            return Err(Error::InvalidArgument(format!(
                "temporal correction requires k_c >= 2, got {k_c}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = hyper.init_scale;
        let flux = (0..4)
            .map(|_| FluxOpParams {
                w_l: ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| rng.gen_range(-1.0..=1.0) * eps),
                spectral: SpectralStack::init(&mut rng, 1, 1, &hyper),
            })
            .collect();
        let corrector = if with_corrector {
            Some(SpectralStack::init(&mut rng, 2 * (k_c - 1), 2, &hyper))
        } else {
            None
        };
        Ok(ModelParams { hyper, k_c, flux, corrector })
    }

    /// All-zero learned weights: the model degenerates to the physics solver.
    pub fn zeros(hyper: SpectralHyper, k_c: usize, with_corrector: bool) -> Result<Self> {
        let mut p = Self::init(0, hyper, k_c, with_corrector)?;
        for (_, t) in p.named_tensors_mut() {
            t.fill(0.0);
        }
        Ok(p)
    }

    /// Named trainable tensors in canonical order (matches [`ModelVars::leaves`]).
    pub fn named_tensors(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        for (idx, op) in self.flux.iter().enumerate() {
            let name = FLUX_SLOT_NAMES[idx];
            out.push((format!("{name}.w_l"), &op.w_l));
            for (l, (re, im)) in op.spectral.layers.iter().enumerate() {
                out.push((format!("{name}.spec{l}.re"), re));
                out.push((format!("{name}.spec{l}.im"), im));
            }
            out.push((format!("{name}.q"), &op.spectral.q));
        }
        if let Some(corr) = &self.corrector {
            for (l, (re, im)) in corr.layers.iter().enumerate() {
                out.push((format!("corr.spec{l}.re"), re));
                out.push((format!("corr.spec{l}.im"), im));
            }
            out.push(("corr.q".to_string(), &corr.q));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::new();
        for (idx, op) in self.flux.iter_mut().enumerate() {
            let name = FLUX_SLOT_NAMES[idx];
            out.push((format!("{name}.w_l"), &mut op.w_l));
            for (l, (re, im)) in op.spectral.layers.iter_mut().enumerate() {
                out.push((format!("{name}.spec{l}.re"), re));
                out.push((format!("{name}.spec{l}.im"), im));
            }
            out.push((format!("{name}.q"), &mut op.spectral.q));
        }
        if let Some(corr) = &mut self.corrector {
            for (l, (re, im)) in corr.layers.iter_mut().enumerate() {
                out.push((format!("corr.spec{l}.re"), re));
                out.push((format!("corr.spec{l}.im"), im));
            }
            out.push(("corr.q".to_string(), &mut corr.q));
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if let Some(bad) = t.iter().find(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} contains non-finite value {bad}"
                )));
            }
        }
        Ok(())
    }

    /// Lift all tensors onto an engine; `trainable` decides whether the
    /// leaves track gradients.
    pub fn upload<E: Engine>(&self, e: &E, trainable: bool) -> ModelVars<E::T> {
        let lift = |t: &ArrayD<f64>| {
            if trainable {
                e.param(t.clone())
            } else {
                e.constant(t.clone())
            }
        };
        let flux = self
            .flux
            .iter()
            .map(|op| FluxOpVars {
                w_l: lift(&op.w_l),
                spectral: upload_stack(&op.spectral, &lift),
            })
            .collect();
        let corrector = self.corrector.as_ref().map(|c| upload_stack(c, &lift));
        ModelVars { flux, corrector }
    }
}

fn upload_stack<T>(s: &SpectralStack, lift: &impl Fn(&ArrayD<f64>) -> T) -> SpectralStackVars<T> {
    SpectralStackVars {
        layers: s.layers.iter().map(|(re, im)| (lift(re), lift(im))).collect(),
        q: lift(&s.q),
    }
}

/// Run one spectral stack: L truncated spectral convolutions with a pointwise
/// nonlinearity between layers (none after the last), then the channel
/// projection. Input `[in_ch, ny, nx]`, output `[out_ch, ny, nx]`.
pub fn spectral_stack_apply<E: Engine>(
    e: &E,
    x: &E::T,
    vars: &SpectralStackVars<E::T>,
    k_max: usize,
) -> E::T {
    let n = vars.layers.len();
    let mut h = x.clone();
    for (l, (re, im)) in vars.layers.iter().enumerate() {
        let y = e.spectral_conv(&h, re, im, k_max);
        h = if l + 1 < n { e.gelu(&y) } else { y };
    }
    e.channel_matmul(&h, &vars.q)
}

/// The spectral flux branch on a single field: stack to one channel, run the
/// operator, unstack.
pub fn spectral_branch<E: Engine>(
    e: &E,
    u: &E::T,
    vars: &SpectralStackVars<E::T>,
    k_max: usize,
    grid: &Grid,
) -> Result<E::T> {
    check_kmax(k_max, grid.nx, grid.ny)?;
    let x = e.stack(std::slice::from_ref(u));
    let y = spectral_stack_apply(e, &x, vars, k_max);
    Ok(e.unstack(&y, 0))
}

/// The integrated flux operator: sum of the enabled branches. Derivative-kind
/// learned branches are scaled by 1/h along the operation axis so their
/// weights stay resolution-dimensionless.
pub fn apply_flux_op<E: Engine>(
    e: &E,
    u: &E::T,
    vars: &FluxOpVars<E::T>,
    m: OpKind,
    axis: Axis,
    grid: &Grid,
    hyper: &SpectralHyper,
    switches: &AblationSwitches,
) -> Result<E::T> {
    switches.validate()?;
    let h = match axis {
        Axis::X => grid.dx,
        Axis::Y => grid.dy,
    };
    let unit_scale = if m.is_derivative() { 1.0 / h } else { 1.0 };

    let mut acc: Option<E::T> = None;
    if switches.enable_physics {
        let k = match m {
            OpKind::Derivative => physics_derivative_kernel(axis, h),
            OpKind::Interpolate => physics_interpolate_kernel(axis),
        };
        acc = Some(e.stencil(u, &k));
    }
    if switches.enable_learnable {
        let b = e.conv5x4(u, &vars.w_l, axis, unit_scale);
        acc = Some(match acc {
            Some(a) => e.add(&a, &b),
            None => b,
        });
    }
    if switches.enable_spectral {
        let raw = spectral_branch(e, u, &vars.spectral, hyper.k_max, grid)?;
        let b = if m.is_derivative() { e.scale(&raw, unit_scale) } else { raw };
        acc = Some(match acc {
            Some(a) => e.add(&a, &b),
            None => b,
        });
    }
    Ok(acc.expect("validated: at least one branch enabled"))
}
