//! Convolution and resampling kernels on single rank-4 samples `[C, D, H, W]`.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Kernel size, stride and zero padding per spatial axis, ordered `[D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.pad[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return Err(shape_err!(
                    "kernel {:?} does not fit input {:?} with padding {:?}",
                    self.kernel,
                    input,
                    self.pad
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

/// Output positions `[lo, hi)` along one axis whose source index is in range.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    // o * stride + k - pad in [0, len)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `[C * taps, P]` matrix, rows ordered `(c, kz, ky, kx)`.
/// Row `r` is written to `cols[r * ld..r * ld + P]`.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    cols: &mut [T],
    ld: usize,
) {
    let [d, h, w] = input;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let sx = geom.stride[2];
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * ld..row * ld + p];
                    let (xlo, xhi) = valid_range(kx, sx, geom.pad[2], w, ow);
                    for oz in 0..od {
                        let Some(iz) = source(oz, kz, geom.stride[0], geom.pad[0], d) else {
                            dst[oz * oh * ow..(oz + 1) * oh * ow].fill(T::zero());
                            continue;
                        };
                        for oy in 0..oh {
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let Some(iy) = source(oy, ky, geom.stride[1], geom.pad[1], h) else {
                                drow.fill(T::zero());
                                continue;
                            };
                            let srow = &plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            drow[..xlo].fill(T::zero());
                            drow[xhi..].fill(T::zero());
                            let first = xlo * sx + kx - geom.pad[2];
                            if sx == 1 {
                                drow[xlo..xhi].copy_from_slice(&srow[first..first + (xhi - xlo)]);
                            } else {
                                for (j, v) in drow[xlo..xhi].iter_mut().enumerate() {
                                    *v = srow[first + j * sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back onto `dx`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    ld: usize,
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    dx: &mut [T],
) {
    let [d, h, w] = input;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let sx = geom.stride[2];
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * ld..row * ld + p];
                    let (xlo, xhi) = valid_range(kx, sx, geom.pad[2], w, ow);
                    for oz in 0..od {
                        let Some(iz) = source(oz, kz, geom.stride[0], geom.pad[0], d) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = source(oy, ky, geom.stride[1], geom.pad[1], h) else {
                                continue;
                            };
                            let srow = &src[(oz * oh + oy) * ow + xlo..(oz * oh + oy) * ow + xhi];
                            let drow = &mut plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let first = xlo * sx + kx - geom.pad[2];
                            if sx == 1 {
                                for (dv, &v) in drow[first..first + srow.len()].iter_mut().zip(srow) {
                                    *dv += v;
                                }
                            } else {
                                for (j, &v) in srow.iter().enumerate() {
                                    drow[first + j * sx] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling of one channel plane by integer factors.
pub(crate) fn upsample_plane<T: Scalar>(x: &[T], input: [usize; 3], factor: [usize; 3], y: &mut [T]) {
    let [d, h, w] = input;
    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
    for z in 0..od {
        for r in 0..oh {
            let src = &x[((z / factor[0]) * h + r / factor[1]) * w..][..w];
            let dst = &mut y[(z * oh + r) * ow..(z * oh + r + 1) * ow];
            for (c, v) in dst.iter_mut().enumerate() {
                *v = src[c / factor[2]];
            }
        }
    }
}

/// Adjoint of [`upsample_plane`].
pub(crate) fn upsample_plane_adjoint<T: Scalar>(
    dy: &[T],
    input: [usize; 3],
    factor: [usize; 3],
    dx: &mut [T],
) {
    let [d, h, w] = input;
    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
    for z in 0..od {
        for r in 0..oh {
            let src = &dy[(z * oh + r) * ow..(z * oh + r + 1) * ow];
            let dst = &mut dx[((z / factor[0]) * h + r / factor[1]) * w..][..w];
            for (c, &v) in src.iter().enumerate() {
                dst[c / factor[2]] += v;
            }
        }
    }
}
