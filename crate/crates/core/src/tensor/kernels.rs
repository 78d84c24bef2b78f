//! Dense numeric kernels shared by forward and backward passes.

use super::Precision;

/// Strided matrix view: `data[(i * rs + j * cs)]`, `rows × cols`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of the same storage.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c (+)= a · b` where `c` is `a.rows × b.cols` with row stride `rsc` and unit column stride.
pub(crate) fn gemm(
    prec: Precision,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    rsc: usize,
    accumulate: bool,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * rsc..i * rsc + n].fill(0.0);
            }
        }
        return;
    }
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    match prec {
        Precision::F64 => unsafe {
            // SAFETY: extents of a, b and c were checked against the strides above.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                if accumulate { 1.0 } else { 0.0 },
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.data[..a.extent()].iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.data[..b.extent()].iter().map(|&x| x as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: a32/b32 cover the strided extents; c32 is dense m×n.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    a.rs as isize,
                    a.cs as isize,
                    b32.as_ptr(),
                    b.rs as isize,
                    b.cs as isize,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for i in 0..m {
                let dst = &mut c[i * rsc..i * rsc + n];
                let src = &c32[i * n..(i + 1) * n];
                if accumulate {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s as f64;
                    }
                } else {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s as f64;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn head_view<'a>(&self, data: &'a [f64], b: usize, h: usize) -> MatRef<'a> {
        let off = b * self.tokens * self.width() + h * self.head_dim;
        MatRef {
            data: &data[off..],
            rows: self.tokens,
            cols: self.head_dim,
            rs: self.width(),
            cs: 1,
        }
    }

    fn head_offset(&self, b: usize, h: usize) -> usize {
        b * self.tokens * self.width() + h * self.head_dim
    }
}

/// Multi-head scaled dot-product attention. Returns the output and, when
/// `keep_probs`, the softmax probabilities `[batch, heads, tokens, tokens]`.
pub(crate) fn attention_forward(
    prec: Precision,
    dims: AttnDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let t = dims.tokens;
    let scale = 1.0 / (dims.head_dim as f64).sqrt();
    let mut out = vec![0.0; dims.batch * t * dims.width()];
    let mut probs_all = if keep_probs {
        vec![0.0; dims.batch * dims.heads * t * t]
    } else {
        Vec::new()
    };
    let mut scores = vec![0.0; t * t];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let qh = dims.head_view(q, b, h);
            let kh = dims.head_view(k, b, h);
            gemm(prec, qh, kh.t(), &mut scores, t, false);
            for row in scores.chunks_mut(t) {
                let mut max = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s = prec.round(*s / sum);
                }
            }
            let vh = dims.head_view(v, b, h);
            let off = dims.head_offset(b, h);
            gemm(
                prec,
                MatRef::dense(&scores, t, t),
                vh,
                &mut out[off..],
                dims.width(),
                false,
            );
            if keep_probs {
                let p_off = (b * dims.heads + h) * t * t;
                probs_all[p_off..p_off + t * t].copy_from_slice(&scores);
            }
        }
    }
    (out, probs_all)
}

/// Gradients of attention w.r.t. q, k, v, accumulated into the given buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    prec: Precision,
    dims: AttnDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let t = dims.tokens;
    let w = dims.width();
    let scale = 1.0 / (dims.head_dim as f64).sqrt();
    let mut dp = vec![0.0; t * t];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let p_off = (b * dims.heads + h) * t * t;
            let p = MatRef::dense(&probs[p_off..p_off + t * t], t, t);
            let off = dims.head_offset(b, h);
            let doh = dims.head_view(dout, b, h);
            gemm(prec, p.t(), doh, &mut dv[off..], w, true);
            gemm(prec, doh, dims.head_view(v, b, h).t(), &mut dp, t, false);
            for (i, row) in dp.chunks_mut(t).enumerate() {
                let prow = &p.data[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, &pv) in row.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let ds = MatRef::dense(&dp, t, t);
            gemm(prec, ds, dims.head_view(k, b, h), &mut dq[off..], w, true);
            gemm(prec, ds.t(), dims.head_view(q, b, h), &mut dk[off..], w, true);
        }
    }
}

/// Geometry of a channels-last 2-D (transposed) convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// For every input-side row (b, iy, ix) of a transposed conv, or output-side
    /// row (b, oy, ox) of a regular conv, the partner row index under tap (ky, kx).
    fn tap_pairs(&self, ky: usize, kx: usize, transposed: bool) -> Vec<Option<usize>> {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut pairs = Vec::new();
        if transposed {
            for b in 0..self.batch {
                for iy in 0..self.in_h {
                    for ix in 0..self.in_w {
                        let oy = iy as isize * s - p + ky as isize;
                        let ox = ix as isize * s - p + kx as isize;
                        pairs.push(self.out_index(b, oy, ox));
                    }
                }
            }
        } else {
            for b in 0..self.batch {
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        let iy = oy as isize * s - p + ky as isize;
                        let ix = ox as isize * s - p + kx as isize;
                        pairs.push(self.in_index(b, iy, ix));
                    }
                }
            }
        }
        pairs
    }

    fn in_index(&self, b: usize, y: isize, x: isize) -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < self.in_h && (x as usize) < self.in_w)
            .then(|| (b * self.in_h + y as usize) * self.in_w + x as usize)
    }

    fn out_index(&self, b: usize, y: isize, x: isize) -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < self.out_h && (x as usize) < self.out_w)
            .then(|| (b * self.out_h + y as usize) * self.out_w + x as usize)
    }

    fn tap_weight<'a>(&self, w: &'a [f64], ky: usize, kx: usize) -> MatRef<'a> {
        let off = (ky * self.kw + kx) * self.in_c * self.out_c;
        MatRef::dense(&w[off..off + self.in_c * self.out_c], self.in_c, self.out_c)
    }
}

fn gather_rows(src: &[f64], cols: usize, pairs: &[Option<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; pairs.len() * cols];
    for (r, p) in pairs.iter().enumerate() {
        if let Some(i) = p {
            out[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
    }
    out
}

fn scatter_add_rows(dst: &mut [f64], cols: usize, pairs: &[Option<usize>], src: &[f64]) {
    for (r, p) in pairs.iter().enumerate() {
        if let Some(i) = p {
            for (d, s) in dst[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(&src[r * cols..(r + 1) * cols])
            {
                *d += s;
            }
        }
    }
}

pub(crate) fn conv2d_forward(prec: Precision, g: ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let rows = g.batch * g.out_h * g.out_w;
    let mut out = vec![0.0; rows * g.out_c];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let pairs = g.tap_pairs(ky, kx, false);
            let xg = gather_rows(x, g.in_c, &pairs);
            gemm(
                prec,
                MatRef::dense(&xg, rows, g.in_c),
                g.tap_weight(w, ky, kx),
                &mut out,
                g.out_c,
                true,
            );
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    prec: Precision,
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let rows = g.batch * g.out_h * g.out_w;
    let dmat = MatRef::dense(dout, rows, g.out_c);
    let mut dx = dx;
    let mut dw = dw;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let pairs = g.tap_pairs(ky, kx, false);
            if let Some(dw) = dw.as_deref_mut() {
                let xg = gather_rows(x, g.in_c, &pairs);
                let off = (ky * g.kw + kx) * g.in_c * g.out_c;
                gemm(
                    prec,
                    MatRef::dense(&xg, rows, g.in_c).t(),
                    dmat,
                    &mut dw[off..off + g.in_c * g.out_c],
                    g.out_c,
                    true,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mut dxg = vec![0.0; rows * g.in_c];
                gemm(prec, dmat, g.tap_weight(w, ky, kx).t(), &mut dxg, g.in_c, false);
                scatter_add_rows(dx, g.in_c, &pairs, &dxg);
            }
        }
    }
}

pub(crate) fn conv_transpose2d_forward(
    prec: Precision,
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
) -> Vec<f64> {
    let in_rows = g.batch * g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.out_h * g.out_w * g.out_c];
    let mut tap_out = vec![0.0; in_rows * g.out_c];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let pairs = g.tap_pairs(ky, kx, true);
            gemm(
                prec,
                MatRef::dense(x, in_rows, g.in_c),
                g.tap_weight(w, ky, kx),
                &mut tap_out,
                g.out_c,
                false,
            );
            scatter_add_rows(&mut out, g.out_c, &pairs, &tap_out);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    prec: Precision,
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let in_rows = g.batch * g.in_h * g.in_w;
    let mut dx = dx;
    let mut dw = dw;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let pairs = g.tap_pairs(ky, kx, true);
            let dt = gather_rows(dout, g.out_c, &pairs);
            let dt = MatRef::dense(&dt, in_rows, g.out_c);
            if let Some(dx) = dx.as_deref_mut() {
                gemm(prec, dt, g.tap_weight(w, ky, kx).t(), dx, g.in_c, true);
            }
            if let Some(dw) = dw.as_deref_mut() {
                let off = (ky * g.kw + kx) * g.in_c * g.out_c;
                gemm(
                    prec,
                    MatRef::dense(x, in_rows, g.in_c).t(),
                    dt,
                    &mut dw[off..off + g.in_c * g.out_c],
                    g.out_c,
                    true,
                );
            }
        }
    }
}

/// Interpolation taps for one output coordinate: `(lo, hi, w_lo, w_hi)`.
pub(crate) type Tap = (usize, usize, f64, f64);

/// Half-pixel-centre bilinear taps (no corner alignment), clamped at the border.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of a `[batch, h, w, c]` buffer.
pub(crate) fn bilinear_forward(
    x: &[f64],
    batch: usize,
    (h, w, c): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; batch * oh * ow * c];
    for b in 0..batch {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let dst = ((b * oh + oy) * ow + ox) * c;
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let src = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[dst + ch] += wt * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    dout: &[f64],
    batch: usize,
    (h, w, c): (usize, usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for b in 0..batch {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let src = ((b * oh + oy) * ow + ox) * c;
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += wt * dout[src + ch];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
