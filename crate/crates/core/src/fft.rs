//! 2-D FFT helpers with cached plans, the spectral Poisson solver, and the
//! truncated-mode spectral convolution used by the learnable operators.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, ArrayViewD, Ix3};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

type C = Complex<f64>;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized forward 2-D FFT of a real field (rows along x, columns along y).
pub fn fft2(a: &Array2<f64>) -> Array2<C> {
    let buf = a.mapv(|x| C::new(x, 0.0));
    fft2_complex(buf, false)
}

pub fn fft2_c(a: &Array2<C>) -> Array2<C> {
    fft2_complex(a.clone(), false)
}

/// Inverse 2-D FFT with 1/N normalization; returns the real part.
pub fn ifft2_re(a: &Array2<C>) -> Array2<f64> {
    let (ny, nx) = a.dim();
    let norm = 1.0 / (nx * ny) as f64;
    let full = fft2_complex(a.clone(), true);
    full.mapv(|z| z.re * norm)
}

/// Inverse 2-D FFT with 1/N normalization, complex output.
pub fn ifft2_c(a: &Array2<C>) -> Array2<C> {
    let (ny, nx) = a.dim();
    let norm = 1.0 / (nx * ny) as f64;
    let mut full = fft2_complex(a.clone(), true);
    full.mapv_inplace(|z| z * norm);
    full
}

fn fft2_complex(mut buf: Array2<C>, inverse: bool) -> Array2<C> {
    let (ny, nx) = buf.dim();
    let row_fft = plan(nx, inverse);
    for mut row in buf.rows_mut() {
        let slice = row.as_slice_mut().expect("row must be contiguous");
        row_fft.process(slice);
    }
    let col_fft = plan(ny, inverse);
    let mut col = vec![C::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = buf[[j, i]];
        }
        col_fft.process(&mut col);
        for j in 0..ny {
            buf[[j, i]] = col[j];
        }
    }
    buf
}

/// Spectral Laplacian symbols. Both are diagonal in Fourier space; the sign
/// convention is symbol = -khat^2 so that `symbol * p_hat = rhs_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonSymbol {
    /// Modified wavenumber of the plain 2-point face difference/gradient pair:
    /// khat = 2 sin(k h / 2) / h per axis. Inverts the compact 3-point
    /// Laplacian `face_divergence(face_gradient(p))` exactly.
    Compact,
    /// Composite symbol of the collocated projection path (2-point face
    /// average -> face difference on one side, face gradient -> adjoint
    /// average on the other): khat = sin(k h) / h per axis. Inverting this
    /// makes the projected velocity divergence-free to round-off.
    Projection,
}

fn khat2(symbol: PoissonSymbol, m: usize, n: usize, h: f64) -> f64 {
    let theta = 2.0 * std::f64::consts::PI * m as f64 / n as f64; // k * h
    match symbol {
        PoissonSymbol::Compact => {
            let s = 2.0 * (theta / 2.0).sin() / h;
            s * s
        }
        PoissonSymbol::Projection => {
            let s = theta.sin() / h;
            s * s
        }
    }
}

/// Solve `Laplacian(p) = rhs` on a periodic grid in Fourier space, zero-mean
/// gauge. The rhs must have (near-)zero mean for solvability.
pub fn poisson_solve(
    rhs: &Array2<f64>,
    dx: f64,
    dy: f64,
    symbol: PoissonSymbol,
) -> Result<Array2<f64>> {
    let (ny, nx) = rhs.dim();
    let n = (nx * ny) as f64;
    let mean = rhs.sum() / n;
    let norm = (rhs.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let tol = 1e-10 * norm.max(f64::MIN_POSITIVE);
    if mean.abs() > tol {
        return Err(Error::PoissonUnsolvable { mean, tol });
    }
    Ok(poisson_apply_unchecked(rhs, dx, dy, symbol))
}

/// The spectral solve without the solvability check; used as its own adjoint
/// in backpropagation (the symbol is real and diagonal).
pub fn poisson_apply_unchecked(
    rhs: &Array2<f64>,
    dx: f64,
    dy: f64,
    symbol: PoissonSymbol,
) -> Array2<f64> {
    let (ny, nx) = rhs.dim();
    let mut hat = fft2(rhs);
    for j in 0..ny {
        let ky2 = khat2(symbol, j, ny, dy);
        for i in 0..nx {
            let k2 = ky2 + khat2(symbol, i, nx, dx);
            if k2 > 1e-14 {
                hat[[j, i]] = hat[[j, i]] / (-k2);
            } else {
                // zero-mean gauge; null modes of the symbol carry no rhs content
                hat[[j, i]] = C::new(0.0, 0.0);
            }
        }
    }
    ifft2_re(&hat)
}

/// Retained-mode index map: offsets -k..=k per axis, wrapped into FFT layout.
fn mode_index(offset: isize, n: usize) -> usize {
    offset.rem_euclid(n as isize) as usize
}

pub fn check_kmax(k_max: usize, nx: usize, ny: usize) -> Result<()> {
    let n = nx.min(ny);
    if k_max == 0 || 2 * k_max + 1 > n {
        return Err(Error::InvalidArgument(format!(
            "k_max {k_max} out of range for grid {nx}x{ny}"
        )));
    }
    Ok(())
}

/// Truncated spectral convolution: per retained Fourier mode, a complex
/// channel-mixing linear map. Input `[Cin, ny, nx]`, weights
/// `[Cout, Cin, 2k+1, 2k+1]` (re and im parts), output `[Cout, ny, nx]`.
/// Output is real by taking the real part of the zero-padded inverse FFT.
pub fn spectral_conv_forward(
    x: &ArrayViewD<f64>,
    wre: &Array4<f64>,
    wim: &Array4<f64>,
    k_max: usize,
) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("x rank 3");
    let (cin, ny, nx) = x3.dim();
    let (cout, cin_w, my, mx) = wre.dim();
    assert_eq!(cin, cin_w, "spectral weight in-channel mismatch");
    assert_eq!((my, mx), (2 * k_max + 1, 2 * k_max + 1));
    assert_eq!(wim.dim(), wre.dim());

    let xhat: Vec<Array2<C>> = (0..cin)
        .map(|i| fft2(&x3.index_axis(ndarray::Axis(0), i).to_owned()))
        .collect();

    let k = k_max as isize;
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[cout, ny, nx]));
    for o in 0..cout {
        let mut yhat: Array2<C> = Array2::from_elem((ny, nx), C::new(0.0, 0.0));
        for (a, dy_off) in (-k..=k).enumerate() {
            let jj = mode_index(dy_off, ny);
            for (b, dx_off) in (-k..=k).enumerate() {
                let ii = mode_index(dx_off, nx);
                let mut acc = C::new(0.0, 0.0);
                for i in 0..cin {
                    let w = C::new(wre[[o, i, a, b]], wim[[o, i, a, b]]);
                    acc += w * xhat[i][[jj, ii]];
                }
                yhat[[jj, ii]] = acc;
            }
        }
        let phys = ifft2_re(&yhat);
        let mut slab = out.index_axis_mut(ndarray::Axis(0), o);
        slab.assign(&phys.into_dyn());
    }
    out
}

/// Adjoint of [`spectral_conv_forward`] w.r.t. input and both weight parts.
pub fn spectral_conv_backward(
    x: &ArrayViewD<f64>,
    wre: &Array4<f64>,
    wim: &Array4<f64>,
    k_max: usize,
    grad_out: &ArrayViewD<f64>,
) -> (ArrayD<f64>, Array4<f64>, Array4<f64>) {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("x rank 3");
    let g3 = grad_out
        .view()
        .into_dimensionality::<Ix3>()
        .expect("grad rank 3");
    let (cin, ny, nx) = x3.dim();
    let (cout, _, my, mx) = wre.dim();
    let n = (ny * nx) as f64;
    let k = k_max as isize;

    let xhat: Vec<Array2<C>> = (0..cin)
        .map(|i| fft2(&x3.index_axis(ndarray::Axis(0), i).to_owned()))
        .collect();
    let ghat: Vec<Array2<C>> = (0..cout)
        .map(|o| fft2(&g3.index_axis(ndarray::Axis(0), o).to_owned()))
        .collect();

    let mut gwre = Array4::zeros((cout, cin, my, mx));
    let mut gwim = Array4::zeros((cout, cin, my, mx));
    let mut gx = ArrayD::zeros(ndarray::IxDyn(&[cin, ny, nx]));

    // per-mode complex gradients; the 1/N factor comes from the inverse FFT
    // normalization in the forward pass.
    let mut zhat: Vec<Array2<C>> = (0..cin)
        .map(|_| Array2::from_elem((ny, nx), C::new(0.0, 0.0)))
        .collect();
    for (a, dy_off) in (-k..=k).enumerate() {
        let jj = mode_index(dy_off, ny);
        for (b, dx_off) in (-k..=k).enumerate() {
            let ii = mode_index(dx_off, nx);
            for o in 0..cout {
                let gc = ghat[o][[jj, ii]].conj() / n;
                for i in 0..cin {
                    let xm = xhat[i][[jj, ii]];
                    let z = gc * xm;
                    gwre[[o, i, a, b]] = z.re;
                    gwim[[o, i, a, b]] = -z.im;
                    let w = C::new(wre[[o, i, a, b]], wim[[o, i, a, b]]);
                    // accumulates sum_o Ghat[o,m] * conj(W[o,i,m])
                    zhat[i][[jj, ii]] += ghat[o][[jj, ii]] * w.conj();
                }
            }
        }
    }
    for i in 0..cin {
        let gi = ifft2_re(&zhat[i]);
        gx.index_axis_mut(ndarray::Axis(0), i).assign(&gi.into_dyn());
    }
    (gx, gwre, gwim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fft_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((16, 24), |_| rng.gen_range(-1.0..1.0));
        let back = ifft2_re(&fft2(&a));
        for (x, y) in a.iter().zip(back.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn poisson_zero_rhs_gives_zero() {
        let rhs = Array2::zeros((16, 16));
        let p = poisson_solve(&rhs, 0.1, 0.1, PoissonSymbol::Compact).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn poisson_rejects_nonzero_mean() {
        let rhs = Array2::from_elem((16, 16), 1.0);
        assert!(poisson_solve(&rhs, 0.1, 0.1, PoissonSymbol::Compact).is_err());
    }

    #[test]
    fn poisson_sine_mode_matches_analytic_shape() {
        // rhs = -2 sin x sin y on [0,2pi]^2 has continuous solution sin x sin y;
        // the discrete answer agrees up to the modified-wavenumber factor.
        let n = 64;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let rhs = Array2::from_shape_fn((n, n), |(j, i)| {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            -2.0 * x.sin() * y.sin()
        });
        let p = poisson_solve(&rhs, h, h, PoissonSymbol::Compact).unwrap();
        let khat2 = (2.0 * (h / 2.0).sin() / h).powi(2);
        let expected = Array2::from_shape_fn((n, n), |(j, i)| {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            2.0 / (2.0 * khat2) * x.sin() * y.sin()
        });
        for (a, b) in p.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn spectral_conv_zero_input_zero_output() {
        let x = ArrayD::zeros(ndarray::IxDyn(&[1, 16, 16]));
        let w = Array4::zeros((1, 1, 9, 9));
        let mut wre = w.clone();
        wre[[0, 0, 4, 4]] = 1.0;
        let y = spectral_conv_forward(&x.view(), &wre, &w, 4);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_low_pass_filter() {
        // R = identity on retained modes, single channel: output equals the
        // direct FFT truncation of the input.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 32;
        let k_max = 5usize;
        let field = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut x = ArrayD::zeros(ndarray::IxDyn(&[1, n, n]));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&field.clone().into_dyn());
        let m = 2 * k_max + 1;
        let mut wre = Array4::zeros((1, 1, m, m));
        let wim = Array4::zeros((1, 1, m, m));
        wre.fill(0.0);
        for a in 0..m {
            for b in 0..m {
                wre[[0, 0, a, b]] = 1.0;
            }
        }
        let y = spectral_conv_forward(&x.view(), &wre, &wim, k_max);

        // independent oracle: truncate the FFT directly
        let mut hat = fft2(&field);
        let k = k_max as isize;
        let keep: std::collections::HashSet<(usize, usize)> = (-k..=k)
            .flat_map(|a| (-k..=k).map(move |b| (mode_index(a, n), mode_index(b, n))))
            .collect();
        for j in 0..n {
            for i in 0..n {
                if !keep.contains(&(j, i)) {
                    hat[[j, i]] = C::new(0.0, 0.0);
                }
            }
        }
        let oracle = ifft2_re(&hat);
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_mode_scaling() {
        // input with one retained mode, diagonal R scaling that mode by 2
        let n = 32;
        let k_max = 4usize;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let field = Array2::from_shape_fn((n, n), |(j, i)| {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            (2.0 * x).cos() * (1.0 * y).sin()
        });
        let mut x = ArrayD::zeros(ndarray::IxDyn(&[1, n, n]));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&field.clone().into_dyn());
        let m = 2 * k_max + 1;
        let mut wre = Array4::zeros((1, 1, m, m));
        let wim = Array4::zeros((1, 1, m, m));
        for a in 0..m {
            for b in 0..m {
                wre[[0, 0, a, b]] = 2.0;
            }
        }
        let y = spectral_conv_forward(&x.view(), &wre, &wim, k_max);
        for (a, b) in y.iter().zip(field.iter()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_above_kmax_is_truncated() {
        // adding content entirely above k_max must not change the output
        let n = 32;
        let k_max = 3usize;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let low = Array2::from_shape_fn((n, n), |(j, i)| {
            ((i as f64 + 0.5) * h).sin() + ((j as f64 + 0.5) * h * 2.0).cos()
        });
        let high = Array2::from_shape_fn((n, n), |(j, i)| {
            ((i as f64 + 0.5) * h * 9.0).sin() * ((j as f64 + 0.5) * h * 7.0).cos()
        });
        let m = 2 * k_max + 1;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let wre = Array4::from_shape_fn((1, 1, m, m), |_| rng.gen_range(-1.0..1.0));
        let wim = Array4::from_shape_fn((1, 1, m, m), |_| rng.gen_range(-1.0..1.0));
        let pack = |f: &Array2<f64>| {
            let mut x = ArrayD::zeros(ndarray::IxDyn(&[1, n, n]));
            x.index_axis_mut(ndarray::Axis(0), 0)
                .assign(&f.clone().into_dyn());
            x
        };
        let y_low = spectral_conv_forward(&pack(&low).view(), &wre, &wim, k_max);
        let y_both = spectral_conv_forward(&pack(&(&low + &high)).view(), &wre, &wim, k_max);
        for (a, b) in y_low.iter().zip(y_both.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-11);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let k_max = 2usize;
        let m = 2 * k_max + 1;
        let (cin, cout) = (2, 3);
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[cin, n, n]), |_| rng.gen_range(-1.0..1.0));
        let wre = Array4::from_shape_fn((cout, cin, m, m), |_| rng.gen_range(-0.5..0.5));
        let wim = Array4::from_shape_fn((cout, cin, m, m), |_| rng.gen_range(-0.5..0.5));
        // loss = sum(out * r) for fixed random r
        let r = ArrayD::from_shape_fn(ndarray::IxDyn(&[cout, n, n]), |_| rng.gen_range(-1.0..1.0));
        let loss = |x: &ArrayD<f64>, wre: &Array4<f64>, wim: &Array4<f64>| {
            let y = spectral_conv_forward(&x.view(), wre, wim, k_max);
            y.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gx, gwre, gwim) = spectral_conv_backward(&x.view(), &wre, &wim, k_max, &r.view());
        let eps = 1e-6;
        // sample a few coordinates of each tensor
        for _ in 0..10 {
            let ix = ndarray::IxDyn(&[
                rng.gen_range(0..cin),
                rng.gen_range(0..n),
                rng.gen_range(0..n),
            ]);
            let mut xp = x.clone();
            xp[&ix] += eps;
            let mut xm = x.clone();
            xm[&ix] -= eps;
            let fd = (loss(&xp, &wre, &wim) - loss(&xm, &wre, &wim)) / (2.0 * eps);
            assert_abs_diff_eq!(gx[&ix], fd, epsilon = 1e-6 * fd.abs().max(1.0));
        }
        for _ in 0..10 {
            let ix = (
                rng.gen_range(0..cout),
                rng.gen_range(0..cin),
                rng.gen_range(0..m),
                rng.gen_range(0..m),
            );
            let mut wp = wre.clone();
            wp[ix] += eps;
            let mut wm = wre.clone();
            wm[ix] -= eps;
            let fd = (loss(&x, &wp, &wim) - loss(&x, &wm, &wim)) / (2.0 * eps);
            assert_abs_diff_eq!(gwre[ix], fd, epsilon = 1e-6 * fd.abs().max(1.0));

            let mut wp = wim.clone();
            wp[ix] += eps;
            let mut wm = wim.clone();
            wm[ix] -= eps;
            let fd = (loss(&x, &wre, &wp) - loss(&x, &wre, &wm)) / (2.0 * eps);
            assert_abs_diff_eq!(gwim[ix], fd, epsilon = 1e-6 * fd.abs().max(1.0));
        }
    }
}
