//! Dense 3D convolution kernels (im2col over z-slabs + GEMM) and their
//! adjoints. All functions operate on a single batch item laid out as
//! `(channel, z, y, x)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Upper bound on im2col buffer elements per slab.
const SLAB_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        input: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k {
                return None;
            }
            output[a] = (span - k) / stride + 1;
        }
        Some(ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn slab_depth(&self) -> usize {
        let plane = self.output[1] * self.output[2] * self.rows();
        (SLAB_ELEMS / plane.max(1)).clamp(1, self.output[0])
    }

    /// Output x range `[lo, hi)` whose input index `ox*s + kx - p` is in bounds.
    #[inline]
    fn valid_range(&self, kk: usize, axis: usize) -> (usize, usize) {
        let s = self.stride;
        let n = self.input[axis] as isize;
        let off = kk as isize - self.pad as isize;
        let out = self.output[axis] as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 {
            0
        } else {
            (-off + s as isize - 1) / s as isize
        };
        // largest o with o*s + off <= n-1
        let hi = if n - 1 - off < 0 {
            0
        } else {
            ((n - 1 - off) / s as isize + 1).min(out)
        };
        (lo.min(out) as usize, hi.max(lo.min(out)) as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, z0: usize, z1: usize, col: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let plane = ho * wo;
    let cols = (z1 - z0) * plane;
    let k = g.k;
    let s = g.stride;
    let p = g.pad as isize;
    let (ylo_k, xlo_k): (Vec<_>, Vec<_>) = (0..k)
        .map(|kk| (g.valid_range(kk, 1), g.valid_range(kk, 2)))
        .unzip();
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = ylo_k[ky];
                for kx in 0..k {
                    let (xlo, xhi) = xlo_k[kx];
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for oz in z0..z1 {
                        let seg = &mut row[(oz - z0) * plane..(oz - z0 + 1) * plane];
                        let iz = (oz * s) as isize + kz as isize - p;
                        if iz < 0 || iz >= d as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let zbase = iz as usize * h * w;
                        seg[..ylo * wo].fill(T::zero());
                        seg[yhi * wo..].fill(T::zero());
                        for oy in ylo..yhi {
                            let iy = (oy * s + ky) as isize - p;
                            let base = zbase + iy as usize * w;
                            let dst = &mut seg[oy * wo..(oy + 1) * wo];
                            dst[..xlo].fill(T::zero());
                            dst[xhi..].fill(T::zero());
                            if s == 1 {
                                let ix0 = (xlo + kx) as isize - p;
                                let src =
                                    &xc[base + ix0 as usize..base + ix0 as usize + (xhi - xlo)];
                                dst[xlo..xhi].copy_from_slice(src);
                            } else {
                                for ox in xlo..xhi {
                                    let ix = (ox * s + kx) as isize - p;
                                    dst[ox] = xc[base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, z0: usize, z1: usize, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let plane = ho * wo;
    let cols = (z1 - z0) * plane;
    let k = g.k;
    let s = g.stride;
    let p = g.pad as isize;
    for ci in 0..g.cin {
        let dc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = g.valid_range(ky, 1);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid_range(kx, 2);
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[r * cols..(r + 1) * cols];
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize + kz as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let seg = &row[(oz - z0) * plane..(oz - z0 + 1) * plane];
                        let zbase = iz as usize * h * w;
                        for oy in ylo..yhi {
                            let iy = (oy * s + ky) as isize - p;
                            let base = zbase + iy as usize * w;
                            let src = &seg[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let ix0 = ((xlo + kx) as isize - p) as usize;
                                for (o, v) in dc[base + ix0..base + ix0 + (xhi - xlo)]
                                    .iter_mut()
                                    .zip(&src[xlo..xhi])
                                {
                                    *o += *v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ((ox * s + kx) as isize - p) as usize;
                                    dc[base + ix] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = conv(x, w) + b` for one batch item. `w` is `(cout, cin, k, k, k)`.
pub(crate) fn conv3d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let vout = g.out_voxels();
    let rows = g.rows();
    debug_assert_eq!(out.len(), g.cout * vout);
    if g.is_pointwise() {
        // SAFETY: w is cout x cin, x is cin x vout, out is cout x vout (all row-major).
        unsafe {
            T::gemm(
                g.cout,
                rows,
                vout,
                T::one(),
                w.as_ptr(),
                rows as isize,
                1,
                x.as_ptr(),
                vout as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                vout as isize,
                1,
            );
        }
    } else {
        let plane = g.output[1] * g.output[2];
        let sd = g.slab_depth();
        let mut col = vec![T::zero(); rows * sd * plane];
        let mut z0 = 0;
        while z0 < g.output[0] {
            let z1 = (z0 + sd).min(g.output[0]);
            let cols = (z1 - z0) * plane;
            im2col(x, g, z0, z1, &mut col[..rows * cols]);
            // SAFETY: col is rows x cols; the output block starts at z0*plane with row stride vout.
            unsafe {
                T::gemm(
                    g.cout,
                    rows,
                    cols,
                    T::one(),
                    w.as_ptr(),
                    rows as isize,
                    1,
                    col.as_ptr(),
                    cols as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr().add(z0 * plane),
                    vout as isize,
                    1,
                );
            }
            z0 = z1;
        }
    }
    if let Some(b) = b {
        for (c, bv) in b.iter().enumerate() {
            for o in &mut out[c * vout..(c + 1) * vout] {
                *o += *bv;
            }
        }
    }
}

/// Accumulates `dw` and/or `dx` from `dout` for one batch item.
pub(crate) fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dw: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    let vout = g.out_voxels();
    let rows = g.rows();
    if g.is_pointwise() {
        if let Some(dw) = dw.as_deref_mut() {
            // dw (cout x cin) += dout (cout x v) * x^T (v x cin)
            unsafe {
                T::gemm(
                    g.cout,
                    vout,
                    rows,
                    T::one(),
                    dout.as_ptr(),
                    vout as isize,
                    1,
                    x.as_ptr(),
                    1,
                    vout as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dx (cin x v) += w^T (cin x cout) * dout (cout x v)
            unsafe {
                T::gemm(
                    rows,
                    g.cout,
                    vout,
                    T::one(),
                    w.as_ptr(),
                    1,
                    rows as isize,
                    dout.as_ptr(),
                    vout as isize,
                    1,
                    T::one(),
                    dx.as_mut_ptr(),
                    vout as isize,
                    1,
                );
            }
        }
        return;
    }
    let plane = g.output[1] * g.output[2];
    let sd = g.slab_depth();
    let mut col = vec![T::zero(); rows * sd * plane];
    let mut z0 = 0;
    while z0 < g.output[0] {
        let z1 = (z0 + sd).min(g.output[0]);
        let cols = (z1 - z0) * plane;
        let dslab = unsafe { dout.as_ptr().add(z0 * plane) };
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, g, z0, z1, &mut col[..rows * cols]);
            // dw (cout x rows) += dout_slab (cout x cols) * col^T (cols x rows)
            unsafe {
                T::gemm(
                    g.cout,
                    cols,
                    rows,
                    T::one(),
                    dslab,
                    vout as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol (rows x cols) = w^T (rows x cout) * dout_slab (cout x cols)
            unsafe {
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    T::one(),
                    w.as_ptr(),
                    1,
                    rows as isize,
                    dslab,
                    vout as isize,
                    1,
                    T::zero(),
                    col.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            col2im(&col[..rows * cols], g, z0, z1, dx);
        }
        z0 = z1;
    }
    debug_assert!(g.in_voxels() > 0);
}

/// Stride-2, kernel-2 transposed convolution. `w` is `(cin, cout, 2, 2, 2)`;
/// output spatial extent is twice the input's.
pub(crate) fn conv_transpose2_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    out: &mut [T],
) {
    let [d, h, wd] = input;
    let v = d * h * wd;
    let r = cout * 8;
    let mut tmp = vec![T::zero(); r * v];
    // tmp (r x v) = w^T (r x cin) * x (cin x v)
    unsafe {
        T::gemm(
            r,
            cin,
            v,
            T::one(),
            w.as_ptr(),
            1,
            r as isize,
            x.as_ptr(),
            v as isize,
            1,
            T::zero(),
            tmp.as_mut_ptr(),
            v as isize,
            1,
        );
    }
    let (ho, wo) = (2 * h, 2 * wd);
    let vo = 8 * v;
    for co in 0..cout {
        let bias = b.map_or(T::zero(), |b| b[co]);
        for o in 0..8 {
            let (a, bb, c) = (o >> 2, (o >> 1) & 1, o & 1);
            let src = &tmp[(co * 8 + o) * v..(co * 8 + o + 1) * v];
            let dst = &mut out[co * vo..(co + 1) * vo];
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    let row = ((2 * z + a) * ho + 2 * y + bb) * wo + c;
                    for xx in 0..wd {
                        dst[row + 2 * xx] = src[i] + bias;
                        i += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose2_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    cin: usize,
    cout: usize,
    input: [usize; 3],
    dw: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let [d, h, wd] = input;
    let v = d * h * wd;
    let r = cout * 8;
    let (ho, wo) = (2 * h, 2 * wd);
    let vo = 8 * v;
    let mut dtmp = vec![T::zero(); r * v];
    for co in 0..cout {
        for o in 0..8 {
            let (a, bb, c) = (o >> 2, (o >> 1) & 1, o & 1);
            let dst = &mut dtmp[(co * 8 + o) * v..(co * 8 + o + 1) * v];
            let src = &dout[co * vo..(co + 1) * vo];
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    let row = ((2 * z + a) * ho + 2 * y + bb) * wo + c;
                    for xx in 0..wd {
                        dst[i] = src[row + 2 * xx];
                        i += 1;
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        // dw (cin x r) += x (cin x v) * dtmp^T (v x r)
        unsafe {
            T::gemm(
                cin,
                v,
                r,
                T::one(),
                x.as_ptr(),
                v as isize,
                1,
                dtmp.as_ptr(),
                1,
                v as isize,
                T::one(),
                dw.as_mut_ptr(),
                r as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        // dx (cin x v) += w (cin x r) * dtmp (r x v)
        unsafe {
            T::gemm(
                cin,
                r,
                v,
                T::one(),
                w.as_ptr(),
                r as isize,
                1,
                dtmp.as_ptr(),
                v as isize,
                1,
                T::one(),
                dx.as_mut_ptr(),
                v as isize,
                1,
            );
        }
    }
}

/// Direct-loop reference convolution used to check the GEMM path.
#[cfg(test)]
pub(crate) fn conv3d_naive<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let mut out = vec![T::zero(); g.cout * od * oh * ow];
    for co in 0..g.cout {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(T::zero(), |b| b[co]);
                    for ci in 0..g.cin {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * d + iz as usize) * h + iy as usize) * wd
                                        + ix as usize;
                                    let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
