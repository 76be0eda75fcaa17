//! Periodic stencil convolutions: fixed physics kernels (4th-order face
//! derivative and interpolation, 2-point face average/difference) and the
//! learnable 5x4 kernel with its adjoints.
//!
//! Face convention: along the operation axis, face `i` sits between cells
//! `i-1` and `i`. Face fields have the same shape as cell fields.

use ndarray::Array2;

/// Axis of a face-located quantity / operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// A fixed periodic stencil: `out[j,i] = sum_t w_t * in[j+ro_t, i+co_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel {
    pub taps: Vec<(isize, isize, f64)>,
}

impl StencilKernel {
    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        let (ny, nx) = a.dim();
        let mut out = Array2::zeros((ny, nx));
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let mut acc = 0.0;
                for &(ro, co, w) in &self.taps {
                    let jj = (j + ro).rem_euclid(ny as isize) as usize;
                    let ii = (i + co).rem_euclid(nx as isize) as usize;
                    acc += w * a[[jj, ii]];
                }
                out[[j as usize, i as usize]] = acc;
            }
        }
        out
    }

    /// Transpose stencil: same taps with negated offsets.
    pub fn adjoint(&self) -> StencilKernel {
        StencilKernel {
            taps: self.taps.iter().map(|&(r, c, w)| (-r, -c, w)).collect(),
        }
    }
}

/// 4th-order face derivative along `axis`:
/// value at face i = (f[i-2] - 27 f[i-1] + 27 f[i] - f[i+1]) / (24 h).
pub fn physics_derivative_kernel(axis: Axis, h: f64) -> StencilKernel {
    let w = [1.0, -27.0, 27.0, -1.0].map(|c| c / (24.0 * h));
    let offs = [-2isize, -1, 0, 1];
    face_taps(axis, &offs, &w)
}

/// 4th-order face interpolation along `axis`:
/// value at face i = (-f[i-2] + 9 f[i-1] + 9 f[i] - f[i+1]) / 16.
pub fn physics_interpolate_kernel(axis: Axis) -> StencilKernel {
    let w = [-1.0, 9.0, 9.0, -1.0].map(|c| c / 16.0);
    let offs = [-2isize, -1, 0, 1];
    face_taps(axis, &offs, &w)
}

/// 2-point face average (cells -> faces) used on the projection path.
pub fn face_average_kernel(axis: Axis) -> StencilKernel {
    face_taps(axis, &[-1, 0], &[0.5, 0.5])
}

/// Adjoint of the 2-point face average (faces -> cells).
pub fn face_average_adjoint_kernel(axis: Axis) -> StencilKernel {
    face_taps(axis, &[0, 1], &[0.5, 0.5])
}

/// 2-point face gradient (cells -> faces): (f[i] - f[i-1]) / h.
pub fn face_gradient_kernel(axis: Axis, h: f64) -> StencilKernel {
    face_taps(axis, &[-1, 0], &[-1.0 / h, 1.0 / h])
}

/// Face-difference divergence contribution (faces -> cells): (f[i+1] - f[i]) / h.
pub fn face_difference_kernel(axis: Axis, h: f64) -> StencilKernel {
    face_taps(axis, &[0, 1], &[-1.0 / h, 1.0 / h])
}

/// 4th-order interpolation from faces back to cell centers: the cell between
/// faces i and i+1 gets (-f[i-1] + 9 f[i] + 9 f[i+1] - f[i+2]) / 16.
pub fn face_to_cell_interpolate_kernel(axis: Axis) -> StencilKernel {
    let w = [-1.0, 9.0, 9.0, -1.0].map(|c| c / 16.0);
    face_taps(axis, &[-1, 0, 1, 2], &w)
}

fn face_taps(axis: Axis, offsets: &[isize], weights: &[f64]) -> StencilKernel {
    let taps = offsets
        .iter()
        .zip(weights)
        .map(|(&o, &w)| match axis {
            Axis::X => (0, o, w),
            Axis::Y => (o, 0, w),
        })
        .collect();
    StencilKernel { taps }
}

/// The fixed physics 5x4 kernel realized as a weight array: index `[t, a]`
/// with `a` along the operation axis (offset a-2) and `t` transverse
/// (offset t-2). Only the central transverse row is populated.
pub fn physics_weights_5x4(m_derivative: bool) -> Array2<f64> {
    let mut w = Array2::zeros((5, 4));
    let coeffs = if m_derivative {
        [1.0 / 24.0, -27.0 / 24.0, 27.0 / 24.0, -1.0 / 24.0]
    } else {
        [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0]
    };
    for (a, &c) in coeffs.iter().enumerate() {
        w[[2, a]] = c;
    }
    w
}

fn conv5x4_offsets(axis: Axis, t: usize, a: usize) -> (isize, isize) {
    let to = t as isize - 2;
    let ao = a as isize - 2;
    match axis {
        Axis::X => (to, ao),
        Axis::Y => (ao, to),
    }
}

/// Periodic 5x4 convolution anchored on faces, `out = scale * (W (*) in)`.
/// `scale` carries the 1/h factor for derivative-kind operators so learned
/// weights stay resolution-dimensionless.
pub fn conv5x4_forward(a: &Array2<f64>, w: &Array2<f64>, axis: Axis, scale: f64) -> Array2<f64> {
    assert_eq!(w.dim(), (5, 4), "learnable kernel must be 5x4");
    let (ny, nx) = a.dim();
    let mut out = Array2::zeros((ny, nx));
    for j in 0..ny as isize {
        for i in 0..nx as isize {
            let mut acc = 0.0;
            for t in 0..5 {
                for k in 0..4 {
                    let (ro, co) = conv5x4_offsets(axis, t, k);
                    let jj = (j + ro).rem_euclid(ny as isize) as usize;
                    let ii = (i + co).rem_euclid(nx as isize) as usize;
                    acc += w[[t, k]] * a[[jj, ii]];
                }
            }
            out[[j as usize, i as usize]] = scale * acc;
        }
    }
    out
}

/// Gradients of [`conv5x4_forward`] w.r.t. input and weights.
pub fn conv5x4_backward(
    a: &Array2<f64>,
    w: &Array2<f64>,
    axis: Axis,
    scale: f64,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (ny, nx) = a.dim();
    let mut ga = Array2::zeros((ny, nx));
    let mut gw = Array2::zeros((5, 4));
    for j in 0..ny as isize {
        for i in 0..nx as isize {
            let g = scale * grad_out[[j as usize, i as usize]];
            for t in 0..5 {
                for k in 0..4 {
                    let (ro, co) = conv5x4_offsets(axis, t, k);
                    let jj = (j + ro).rem_euclid(ny as isize) as usize;
                    let ii = (i + co).rem_euclid(nx as isize) as usize;
                    ga[[jj, ii]] += g * w[[t, k]];
                    gw[[t, k]] += g * a[[jj, ii]];
                }
            }
        }
    }
    (ga, gw)
}
