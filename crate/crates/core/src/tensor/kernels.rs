//! Slice-level numeric kernels shared by the untracked tensor API and the
//! tape's forward/backward rules. All planes are row-major `h x w`.

/// `out[y, x] += alpha * inp[y + dy, x + dx]` wherever both indices are in
/// range (zero padding elsewhere).
#[inline]
pub(crate) fn shifted_axpy(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    alpha: f64,
) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let src_y = (y as isize + dy) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let start = (src_y * w) as isize + x0 as isize + dx;
        let i = &inp[start as usize..start as usize + (x1 - x0)];
        for (ov, iv) in o.iter_mut().zip(i) {
            *ov += alpha * iv;
        }
    }
}

/// `sum over (y, x) of a[y, x] * b[y + dy, x + dx]`, zero padded.
#[inline]
pub(crate) fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if y0 >= y1 || x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let src_y = (y as isize + dy) as usize;
        let ar = &a[y * w + x0..y * w + x1];
        let start = (src_y * w) as isize + x0 as isize + dx;
        let br = &b[start as usize..start as usize + (x1 - x0)];
        let mut row = 0.0;
        for (av, bv) in ar.iter().zip(br) {
            row += av * bv;
        }
        acc += row;
    }
    acc
}

/// Output indices `t` in `[lo, hi)` with `0 <= t + shift < n`.
#[inline]
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

/// Geometry of a stride-1 "same"-padded 2D window op.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    #[inline]
    fn offset(&self, i: usize, j: usize) -> (isize, isize) {
        (
            i as isize - (self.kh / 2) as isize,
            j as isize - (self.kw / 2) as isize,
        )
    }

    #[inline]
    fn tap(&self, k: usize, c: usize) -> usize {
        (k * self.c + c) * self.kh * self.kw
    }
}

/// `out[k] = sum_c x[c] (*) w[k, c]`; x is `[C,H,W]`, w `[K,C,kh,kw]`,
/// out `[K,H,W]` (cross-correlation, same padding).
pub(crate) fn correlate(g: ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let plane = g.h * g.w;
    for k in 0..g.k {
        let o = &mut out[k * plane..(k + 1) * plane];
        for c in 0..g.c {
            let xi = &x[c * plane..(c + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = w[base + i * g.kw + j];
                    if wv != 0.0 {
                        let (dy, dx) = g.offset(i, j);
                        shifted_axpy(o, xi, g.h, g.w, dy, dx, wv);
                    }
                }
            }
        }
    }
}

/// Gradient of [`correlate`] with respect to `x`.
pub(crate) fn correlate_grad_input(g: ConvGeom, go: &[f64], w: &[f64], gx: &mut [f64]) {
    let plane = g.h * g.w;
    for c in 0..g.c {
        let gxc = &mut gx[c * plane..(c + 1) * plane];
        for k in 0..g.k {
            let gok = &go[k * plane..(k + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = w[base + i * g.kw + j];
                    if wv != 0.0 {
                        let (dy, dx) = g.offset(i, j);
                        shifted_axpy(gxc, gok, g.h, g.w, -dy, -dx, wv);
                    }
                }
            }
        }
    }
}

/// Gradient of [`correlate`] with respect to `w`.
pub(crate) fn correlate_grad_weight(g: ConvGeom, go: &[f64], x: &[f64], gw: &mut [f64]) {
    let plane = g.h * g.w;
    for k in 0..g.k {
        let gok = &go[k * plane..(k + 1) * plane];
        for c in 0..g.c {
            let xc = &x[c * plane..(c + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (dy, dx) = g.offset(i, j);
                    gw[base + i * g.kw + j] += shifted_dot(gok, xc, g.h, g.w, dy, dx);
                }
            }
        }
    }
}

/// True convolution placing each exemplar kernel at the weights in `a`:
/// `out[k, c, y, x] = sum_ij a[k, y - di, x - dj] * w[k, c, i, j]`.
/// a is `[K,H,W]`, w `[K,C,kh,kw]`, out `[K,C,H,W]`.
pub(crate) fn place(g: ConvGeom, a: &[f64], w: &[f64], out: &mut [f64]) {
    let plane = g.h * g.w;
    for k in 0..g.k {
        let ak = &a[k * plane..(k + 1) * plane];
        for c in 0..g.c {
            let o = &mut out[(k * g.c + c) * plane..(k * g.c + c + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = w[base + i * g.kw + j];
                    if wv != 0.0 {
                        let (dy, dx) = g.offset(i, j);
                        shifted_axpy(o, ak, g.h, g.w, -dy, -dx, wv);
                    }
                }
            }
        }
    }
}

pub(crate) fn place_grad_input(g: ConvGeom, go: &[f64], w: &[f64], ga: &mut [f64]) {
    let plane = g.h * g.w;
    for k in 0..g.k {
        let gak = &mut ga[k * plane..(k + 1) * plane];
        for c in 0..g.c {
            let gokc = &go[(k * g.c + c) * plane..(k * g.c + c + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = w[base + i * g.kw + j];
                    if wv != 0.0 {
                        let (dy, dx) = g.offset(i, j);
                        shifted_axpy(gak, gokc, g.h, g.w, dy, dx, wv);
                    }
                }
            }
        }
    }
}

pub(crate) fn place_grad_weight(g: ConvGeom, go: &[f64], a: &[f64], gw: &mut [f64]) {
    let plane = g.h * g.w;
    for k in 0..g.k {
        let ak = &a[k * plane..(k + 1) * plane];
        for c in 0..g.c {
            let gokc = &go[(k * g.c + c) * plane..(k * g.c + c + 1) * plane];
            let base = g.tap(k, c);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (dy, dx) = g.offset(i, j);
                    gw[base + i * g.kw + j] += shifted_dot(gokc, ak, g.h, g.w, -dy, -dx);
                }
            }
        }
    }
}

/// Per-axis bilinear sampling table (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub(crate) struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(n_in - 1);
            let h = (l + 1).min(n_in - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if l == h { 0.0 } else { src - l as f64 });
        }
        LinearTaps { lo, hi, frac }
    }
}

pub(crate) fn resize_plane(
    inp: &[f64],
    w_in: usize,
    ty: &LinearTaps,
    tx: &LinearTaps,
    out: &mut [f64],
) {
    let w_out = tx.lo.len();
    for (oy, ((&y0, &y1), &fy)) in ty.lo.iter().zip(&ty.hi).zip(&ty.frac).enumerate() {
        let r0 = &inp[y0 * w_in..(y0 + 1) * w_in];
        let r1 = &inp[y1 * w_in..(y1 + 1) * w_in];
        let orow = &mut out[oy * w_out..(oy + 1) * w_out];
        for (ox, o) in orow.iter_mut().enumerate() {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    }
}

pub(crate) fn resize_plane_grad(
    go: &[f64],
    w_in: usize,
    ty: &LinearTaps,
    tx: &LinearTaps,
    gi: &mut [f64],
) {
    let w_out = tx.lo.len();
    for (oy, ((&y0, &y1), &fy)) in ty.lo.iter().zip(&ty.hi).zip(&ty.frac).enumerate() {
        for ox in 0..w_out {
            let g = go[oy * w_out + ox];
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            gi[y0 * w_in + x0] += g * (1.0 - fy) * (1.0 - fx);
            gi[y0 * w_in + x1] += g * (1.0 - fy) * fx;
            gi[y1 * w_in + x0] += g * fy * (1.0 - fx);
            gi[y1 * w_in + x1] += g * fy * fx;
        }
    }
}

/// 2x2 average pooling with stride 2 over each `h x w` plane; odd trailing
/// rows/columns are dropped.
pub(crate) fn avg_pool2(inp: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &inp[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x];
                let b = src[2 * y * w + 2 * x + 1];
                let c = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = 0.25 * (a + b + c + d);
            }
        }
    }
    out
}
