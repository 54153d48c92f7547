//! Forward and adjoint kernels behind the tape operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rs: usize,
    pub cs: usize,
}

/// `c[i, j] += sum_l a[i, l] * b[l, j]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    c_rs: usize,
) {
    if bv.cs == 1 {
        for i in 0..m {
            let crow = &mut c[i * c_rs..i * c_rs + n];
            for l in 0..k {
                let x = a[i * av.rs + l * av.cs];
                if x == T::zero() {
                    continue;
                }
                let brow = &b[l * bv.rs..l * bv.rs + n];
                for (cv, bvv) in crow.iter_mut().zip(brow) {
                    *cv += x * *bvv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for l in 0..k {
                    acc += a[i * av.rs + l * av.cs] * b[l * bv.rs + j * bv.cs];
                }
                c[i * c_rs + j] += acc;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho,
            wo,
        }
    }

    /// Output positions `o` along one axis whose source `o * stride + tap - pad` lies in `0..len`.
    #[inline]
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (len as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
    for oc in 0..g.cout {
        let grp = oc / cout_g;
        let oplane = &mut out[oc * hw_out..(oc + 1) * hw_out];
        let b = bias.map_or(T::zero(), |b| b[oc]);
        oplane.iter_mut().for_each(|v| *v = b);
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let iplane = &input[ic * hw_in..(ic + 1) * hw_in];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = weight[((oc * cin_g + icg) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            for (o, i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                *o += wv * *i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    gout: &[T],
    mut gin: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
    if let Some(gb) = gb {
        for oc in 0..g.cout {
            gb[oc] += gout[oc * hw_out..(oc + 1) * hw_out].iter().copied().sum::<T>();
        }
    }
    for oc in 0..g.cout {
        let grp = oc / cout_g;
        let gplane = &gout[oc * hw_out..(oc + 1) * hw_out];
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let iplane = &input[ic * hw_in..(ic + 1) * hw_in];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let widx = ((oc * cin_g + icg) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut wacc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            let irow = &iplane[iy * g.w + ix0..iy * g.w + ix0 + n];
                            let gs = &grow[ox_lo..ox_hi];
                            if gw.is_some() {
                                wacc += gs.iter().zip(irow).map(|(a, b)| *a * *b).sum::<T>();
                            }
                            if let Some(gin) = gin.as_deref_mut() {
                                let start = ic * hw_in + iy * g.w + ix0;
                                for (d, gv) in gin[start..start + n].iter_mut().zip(gs) {
                                    *d += wv * *gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = grow[ox];
                                wacc += gv * iplane[iy * g.w + ix];
                                if let Some(gin) = gin.as_deref_mut() {
                                    gin[ic * hw_in + iy * g.w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for bilinear x2 upsampling with half-pixel centers.
pub(crate) fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(c: usize, h: usize, w: usize, input: &[T], out: &mut [T]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let ip = &input[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                op[oy * w2 + ox] = gy * (gx * ip[y0 * w + x0] + fx * ip[y0 * w + x1])
                    + fy * (gx * ip[y1 * w + x0] + fx * ip[y1 * w + x1]);
            }
        }
    }
}

pub(crate) fn upsample2x_backward<T: Real>(c: usize, h: usize, w: usize, gout: &[T], gin: &mut [T]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let gp = &gout[ch * h2 * w2..(ch + 1) * h2 * w2];
        let ip = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let g = gp[oy * w2 + ox];
                ip[y0 * w + x0] += g * gy * gx;
                ip[y0 * w + x1] += g * gy * fx;
                ip[y1 * w + x0] += g * fy * gx;
                ip[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// 3x3 Sobel correlation weights `(dy, dx, wx, wy)`.
const SOBEL: [(isize, isize, i32, i32); 8] = [
    (-1, -1, -1, -1),
    (-1, 0, 0, -2),
    (-1, 1, 1, -1),
    (0, -1, -2, 0),
    (0, 1, 2, 0),
    (1, -1, -1, 1),
    (1, 0, 0, 2),
    (1, 1, 1, 1),
];

#[inline]
fn clamp_idx(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses with replicate padding.
pub(crate) fn sobel_xy<T: Real>(h: usize, w: usize, plane: &[T], gx: &mut [T], gy: &mut [T]) {
    let two = T::lit(2.0);
    for y in 0..h {
        for x in 0..w {
            let at = |dy: isize, dx: isize| plane[clamp_idx(y as isize + dy, h) * w + clamp_idx(x as isize + dx, w)];
            // Differences of weighted sums keep flat regions exactly zero.
            let right = at(-1, 1) + two * at(0, 1) + at(1, 1);
            let left = at(-1, -1) + two * at(0, -1) + at(1, -1);
            let down = at(1, -1) + two * at(1, 0) + at(1, 1);
            let up = at(-1, -1) + two * at(-1, 0) + at(-1, 1);
            gx[y * w + x] = right - left;
            gy[y * w + x] = down - up;
        }
    }
}

/// `|Gx| + |Gy|` per channel.
pub(crate) fn sobel_forward<T: Real>(c: usize, h: usize, w: usize, input: &[T], out: &mut [T]) {
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for ch in 0..c {
        sobel_xy(h, w, &input[ch * h * w..(ch + 1) * h * w], &mut gx, &mut gy);
        for (o, (a, b)) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(gx.iter().zip(&gy)) {
            *o = a.abs() + b.abs();
        }
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sobel_backward<T: Real>(c: usize, h: usize, w: usize, input: &[T], gout: &[T], gin: &mut [T]) {
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for ch in 0..c {
        let off = ch * h * w;
        sobel_xy(h, w, &input[off..off + h * w], &mut gx, &mut gy);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let g = gout[off + p];
                if g == T::zero() {
                    continue;
                }
                let (sx, sy) = (sign(gx[p]) * g, sign(gy[p]) * g);
                for &(dy, dx, wx, wy) in &SOBEL {
                    let q = clamp_idx(y as isize + dy, h) * w + clamp_idx(x as isize + dx, w);
                    gin[off + q] += sx * T::lit(wx as f64) + sy * T::lit(wy as f64);
                }
            }
        }
    }
}

/// Separable 'valid' filtering of every channel with a symmetric 1-D kernel.
pub(crate) fn filter_valid_forward<T: Real>(c: usize, h: usize, w: usize, taps: &[T], input: &[T], out: &mut [T]) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * wo];
    for ch in 0..c {
        let ip = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..wo {
                let row = &ip[y * w + x..y * w + x + k];
                tmp[y * wo + x] = row.iter().zip(taps).map(|(a, b)| *a * *b).sum();
            }
        }
        let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        op.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..ho {
            for (t, &tv) in taps.iter().enumerate() {
                let src = &tmp[(y + t) * wo..(y + t + 1) * wo];
                for (o, s) in op[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                    *o += tv * *s;
                }
            }
        }
    }
}

pub(crate) fn filter_valid_backward<T: Real>(c: usize, h: usize, w: usize, taps: &[T], gout: &[T], gin: &mut [T]) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut gtmp = vec![T::zero(); h * wo];
    for ch in 0..c {
        gtmp.iter_mut().for_each(|v| *v = T::zero());
        let gp = &gout[ch * ho * wo..(ch + 1) * ho * wo];
        for y in 0..ho {
            for (t, &tv) in taps.iter().enumerate() {
                let dst = &mut gtmp[(y + t) * wo..(y + t + 1) * wo];
                for (d, g) in dst.iter_mut().zip(&gp[y * wo..(y + 1) * wo]) {
                    *d += tv * *g;
                }
            }
        }
        let ip = &mut gin[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..wo {
                let g = gtmp[y * wo + x];
                for (t, &tv) in taps.iter().enumerate() {
                    ip[y * w + x + t] += tv * g;
                }
            }
        }
    }
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
