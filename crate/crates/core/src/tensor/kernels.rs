//! Naive loop kernels. Inner loops run over contiguous rows so the compiler
//! can vectorize them; accumulation order is fixed, so results are
//! bit-reproducible.

use super::{Scalar, Shape};

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`,
/// `None` when the offset reaches past the whole axis.
#[inline]
fn span(len: usize, d: isize) -> Option<(usize, usize)> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo < hi).then_some((lo, hi))
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Unfolds one image into `(cin*k*k, h*w)` patch rows. Cells that fall in
/// the padding are never written, so a reused buffer keeps its zeros.
fn im2col<T: Scalar>(x: &[T], s: Shape, k: usize, col: &mut [T]) {
    let plane = s.plane();
    let pad = (k / 2) as isize;
    for ci in 0..s.c {
        let xi = &x[ci * plane..][..plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let Some((y0, y1)) = span(s.h, dy) else {
                continue;
            };
            for kx in 0..k {
                let dx = kx as isize - pad;
                let Some((x0, x1)) = span(s.w, dx) else {
                    continue;
                };
                let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let xs = (x0 as isize + dx) as usize;
                    row[y * s.w + x0..y * s.w + x1]
                        .copy_from_slice(&xi[yi * s.w + xs..yi * s.w + xs + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adds patch-row gradients back onto the image they were unfolded from.
fn col2im_add<T: Scalar>(dcol: &[T], s: Shape, k: usize, dx: &mut [T]) {
    let plane = s.plane();
    let pad = (k / 2) as isize;
    for ci in 0..s.c {
        let di = &mut dx[ci * plane..][..plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let Some((y0, y1)) = span(s.h, dy) else {
                continue;
            };
            for kx in 0..k {
                let ddx = kx as isize - pad;
                let Some((x0, x1)) = span(s.w, ddx) else {
                    continue;
                };
                let row = &dcol[((ci * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let xs = (x0 as isize + ddx) as usize;
                    for (d, g) in di[yi * s.w + xs..yi * s.w + xs + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * s.w + x0..y * s.w + x1])
                    {
                        *d += *g;
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `w` is (cout, cin, k, k).
pub(super) fn conv2d_forward<T: Scalar>(
    x: &[T],
    s: Shape,
    w: &[T],
    cout: usize,
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = s.plane();
    let kk = s.c * k * k;
    // -0.0 is the additive identity, so a bias-free identity kernel is exact
    // even for negative zeros.
    let mut out = vec![T::from_f64(-0.0); s.n * cout * plane];
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..s.n {
        let xn = &x[n * s.c * plane..][..s.c * plane];
        let cols: &[T] = if k == 1 {
            xn
        } else {
            im2col(xn, s, k, &mut col);
            &col
        };
        for co in 0..cout {
            let o = &mut out[(n * cout + co) * plane..][..plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            let wr = &w[co * kk..][..kk];
            for (j, &wv) in wr.iter().enumerate() {
                axpy(o, wv, &cols[j * plane..][..plane]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is optional so unneeded
/// branches cost nothing.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Scalar>(
    x: &[T],
    s: Shape,
    w: &[T],
    cout: usize,
    k: usize,
    go: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = s.plane();
    let kk = s.c * k * k;
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
    let mut dcol = if dx.is_some() { vec![T::zero(); kk * plane] } else { Vec::new() };
    for n in 0..s.n {
        let xn = &x[n * s.c * plane..][..s.c * plane];
        let cols: &[T] = if k == 1 || dw.is_none() {
            xn
        } else {
            im2col(xn, s, k, &mut col);
            &col
        };
        dcol.iter_mut().for_each(|v| *v = T::zero());
        for co in 0..cout {
            let g = &go[(n * cout + co) * plane..][..plane];
            if let Some(db) = db.as_deref_mut() {
                let mut acc = T::zero();
                g.iter().for_each(|v| acc += *v);
                db[co] += acc;
            }
            for j in 0..kk {
                if let Some(dw) = dw.as_deref_mut() {
                    dw[co * kk + j] += dot(g, &cols[j * plane..][..plane]);
                }
                if dx.is_some() {
                    axpy(&mut dcol[j * plane..][..plane], w[co * kk + j], g);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * s.c * plane..][..s.c * plane];
            if k == 1 {
                dxn.iter_mut().zip(&dcol).for_each(|(d, g)| *d += *g);
            } else {
                col2im_add(&dcol, s, k, dxn);
            }
        }
    }
}

/// Per-channel convolution; `w` is (c, 1, k, k).
pub(super) fn depthwise_forward<T: Scalar>(
    x: &[T],
    s: Shape,
    w: &[T],
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = s.plane();
    let pad = (k / 2) as isize;
    let mut out = vec![T::from_f64(-0.0); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let xi = &x[off..off + plane];
            let o = &mut out[off..off + plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[c]);
            }
            for ky in 0..k {
                let dy = ky as isize - pad;
                let Some((y0, y1)) = span(s.h, dy) else {
                    continue;
                };
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let Some((x0, x1)) = span(s.w, dx) else {
                        continue;
                    };
                    let wv = w[(c * k + ky) * k + kx];
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        let xs = (x0 as isize + dx) as usize;
                        axpy(
                            &mut o[y * s.w + x0..y * s.w + x1],
                            wv,
                            &xi[yi * s.w + xs..yi * s.w + xs + (x1 - x0)],
                        );
                    }
                }
            }
        }
    }
    out
}

pub(super) fn depthwise_backward<T: Scalar>(
    x: &[T],
    s: Shape,
    w: &[T],
    k: usize,
    go: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = s.plane();
    let pad = (k / 2) as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let g = &go[off..off + plane];
            if let Some(db) = db.as_deref_mut() {
                let mut acc = T::zero();
                g.iter().for_each(|v| acc += *v);
                db[c] += acc;
            }
            for ky in 0..k {
                let dy = ky as isize - pad;
                let Some((y0, y1)) = span(s.h, dy) else {
                    continue;
                };
                for kx in 0..k {
                    let dxo = kx as isize - pad;
                    let Some((x0, x1)) = span(s.w, dxo) else {
                        continue;
                    };
                    let widx = (c * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut wacc = T::zero();
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        let xs = (x0 as isize + dxo) as usize;
                        let grow = &g[y * s.w + x0..y * s.w + x1];
                        let ioff = off + yi * s.w + xs;
                        if dw.is_some() {
                            wacc += dot(grow, &x[ioff..ioff + (x1 - x0)]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            axpy(&mut dx[ioff..ioff + (x1 - x0)], wv, grow);
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
}

/// Output extent of a 2x2/stride-2 pool with right/bottom padding on odd input.
pub(super) fn pooled(len: usize) -> usize {
    len.div_ceil(2)
}

/// 2x2 max pool. Returns the output and, per output element, the flat input
/// index that won. Padding cells never win (they act as -inf).
pub(super) fn maxpool_forward<T: Scalar>(x: &[T], s: Shape) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (pooled(s.h), pooled(s.w));
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for y in 2 * oy..(2 * oy + 2).min(s.h) {
                    for xx in 2 * ox..(2 * ox + 2).min(s.w) {
                        let i = base + y * s.w + xx;
                        // first strict maximum wins; NaN never replaces
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// 2x2 average pool; padding cells are excluded from the count.
pub(super) fn avgpool_forward<T: Scalar>(x: &[T], s: Shape) -> Vec<T> {
    let (oh, ow) = (pooled(s.h), pooled(s.w));
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(s.h) {
                    for xx in 2 * ox..(2 * ox + 2).min(s.w) {
                        acc += x[base + y * s.w + xx];
                        cnt += 1;
                    }
                }
                out.push(acc / T::from_f64(cnt as f64));
            }
        }
    }
    out
}

pub(super) fn avgpool_backward<T: Scalar>(s: Shape, go: &[T], dx: &mut [T]) {
    let (oh, ow) = (pooled(s.h), pooled(s.w));
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = 2 * oy..(2 * oy + 2).min(s.h);
                let xs = 2 * ox..(2 * ox + 2).min(s.w);
                let cnt = ys.len() * xs.len();
                let g = go[(nc * oh + oy) * ow + ox] / T::from_f64(cnt as f64);
                for y in ys {
                    for xx in xs.clone() {
                        dx[base + y * s.w + xx] += g;
                    }
                }
            }
        }
    }
}

pub(super) fn upsample_forward<T: Scalar>(x: &[T], s: Shape, f: usize) -> Vec<T> {
    let (oh, ow) = (s.h * f, s.w * f);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..oh {
            let row = &x[base + (y / f) * s.w..][..s.w];
            for xx in 0..ow {
                out.push(row[xx / f]);
            }
        }
    }
    out
}

pub(super) fn upsample_backward<T: Scalar>(s: Shape, f: usize, go: &[T], dx: &mut [T]) {
    let (oh, ow) = (s.h * f, s.w * f);
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..oh {
            let g = &go[(nc * oh + y) * ow..][..ow];
            let row = &mut dx[base + (y / f) * s.w..][..s.w];
            for (xx, v) in g.iter().enumerate() {
                row[xx / f] += *v;
            }
        }
    }
}

/// Copies channels `[start, start+len)` into a new buffer.
pub(super) fn slice_channels<T: Scalar>(x: &[T], s: Shape, start: usize, len: usize) -> Vec<T> {
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        out.extend_from_slice(&x[(n * s.c + start) * plane..(n * s.c + start + len) * plane]);
    }
    out
}

/// Top-left crop of each plane to (h, w).
pub(super) fn crop<T: Scalar>(x: &[T], s: Shape, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..h {
            out.extend_from_slice(&x[base + y * s.w..base + y * s.w + w]);
        }
    }
    out
}
