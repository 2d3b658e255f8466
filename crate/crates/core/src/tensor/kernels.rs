//! Raw loops behind the tape's convolution and matrix primitives.
//!
//! All buffers are row-major. Convolutions use the cross-correlation
//! convention with implicit zero padding.

use super::Real;

/// Output extent of a strided convolution, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, or `None` if the result would be empty.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&n| n > 0)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    /// Channels on the "gathered" (conv input) side.
    pub cin: usize,
    /// Channels on the "scattered" (conv output) side.
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output positions `o` along one axis whose source `o*stride + tap - pad`
    /// falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= extent - 1
        let top = extent as isize - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_extent as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// `out[co, oy, ox] = sum_{ci,ky,kx} kern[co, ci, ky, kx] * x[ci, oy*s+ky-p, ox*s+kx-p]`.
/// `out` must be zeroed (or hold a bias) on entry.
pub(crate) fn conv_gather<E: Real>(g: &ConvGeom, x: &[E], kern: &[E], out: &mut [E]) {
    let (k, s) = (g.k, g.stride);
    for co in 0..g.cout {
        let out_c = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..k {
                    let wv = kern[((co * g.cin + ci) * k + ky) * k + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        let o_row = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox_lo..ox_hi {
                            o_row[ox] = o_row[ox] + wv * x_row[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_gather`] with respect to `x`: accumulates into `gx`.
pub(crate) fn conv_scatter<E: Real>(g: &ConvGeom, gy: &[E], kern: &[E], gx: &mut [E]) {
    let (k, s) = (g.k, g.stride);
    for co in 0..g.cout {
        let gy_c = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let gx_c = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..k {
                    let wv = kern[((co * g.cin + ci) * k + ky) * k + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        let g_row = &gy_c[oy * g.ow..(oy + 1) * g.ow];
                        let x_row = &mut gx_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - g.pad;
                            x_row[ix] = x_row[ix] + wv * g_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_gather`] with respect to the kernel: accumulates into `gk`.
pub(crate) fn conv_kernel_grad<E: Real>(g: &ConvGeom, x: &[E], gy: &[E], gk: &mut [E]) {
    let (k, s) = (g.k, g.stride);
    for co in 0..g.cout {
        let gy_c = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = E::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        let g_row = &gy_c[oy * g.ow..(oy + 1) * g.ow];
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox_lo..ox_hi {
                            acc = acc + g_row[ox] * x_row[ox * s + kx - g.pad];
                        }
                    }
                    let idx = ((co * g.cin + ci) * k + ky) * k + kx;
                    gk[idx] = gk[idx] + acc;
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn matmul_nn<E: Real>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
pub(crate) fn matmul_nt<E: Real>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: E = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_tn<E: Real>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}
