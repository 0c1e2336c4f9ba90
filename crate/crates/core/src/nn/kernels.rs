//! Convolution, pooling and dense kernels. Convolutions run per sample
//! (im2col + GEMM) across the rayon pool; weight gradients are reduced in
//! sample order.

use crate::par;

/// `c = a·b + beta·c` with explicit row/column strides for `a` and `b`;
/// `c` is dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
        assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    }
    assert!(m * n <= c.len());
    // SAFETY: every index touched by the kernel was bounds-checked above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch `[n, in_c, h, w]`.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.in_c * g.h * g.w;
    let hw = g.out_h() * g.out_w();
    let out_len = g.out_c * hw;
    let patch = g.patch();
    let mut out = vec![0.0; n * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |i, dst| {
        let mut col = vec![0.0; patch * hw];
        im2col(g, &x[i * in_len..(i + 1) * in_len], &mut col);
        gemm(g.out_c, patch, hw, weight, (patch, 1), &col, (hw, 1), dst, 0.0);
        if let Some(b) = bias {
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    out
}

/// Backward convolution. Returns the input gradient; accumulates weight and
/// bias gradients into `wgrad`/`bgrad` when given.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    wgrad: Option<&mut [f64]>,
    bgrad: Option<&mut [f64]>,
) -> Vec<f64> {
    let in_len = g.in_c * g.h * g.w;
    let hw = g.out_h() * g.out_w();
    let out_len = g.out_c * hw;
    let patch = g.patch();
    let want_w = wgrad.is_some();
    let parts = par::map_indexed(n, |i| {
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        let mut dcol = vec![0.0; patch * hw];
        // dcol = W^T · dY
        gemm(patch, g.out_c, hw, weight, (1, patch), dyi, (hw, 1), &mut dcol, 0.0);
        let mut dx = vec![0.0; in_len];
        col2im(g, &dcol, &mut dx);
        let dw = if want_w {
            let mut col = vec![0.0; patch * hw];
            im2col(g, &x[i * in_len..(i + 1) * in_len], &mut col);
            let mut dw = vec![0.0; g.out_c * patch];
            // dW = dY · col^T
            gemm(g.out_c, hw, patch, dyi, (hw, 1), &col, (1, hw), &mut dw, 0.0);
            dw
        } else {
            Vec::new()
        };
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(n * in_len);
    let mut dws = Vec::with_capacity(if want_w { n } else { 0 });
    for (dxi, dwi) in parts {
        dx.extend_from_slice(&dxi);
        if want_w {
            dws.push(dwi);
        }
    }
    if let Some(wg) = wgrad {
        let sum = par::ordered_sum(dws, g.out_c * patch);
        wg.iter_mut().zip(sum).for_each(|(a, b)| *a += b);
    }
    if let Some(bg) = bgrad {
        for i in 0..n {
            for (oc, row) in dy[i * out_len..(i + 1) * out_len].chunks(hw).enumerate() {
                bg[oc] += row.iter().sum::<f64>();
            }
        }
    }
    dx
}

/// 2×2 max pooling, stride 2 (odd trailing rows/columns are dropped).
pub(crate) fn maxpool2_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = src[best];
                arg[o] = plane * h * w + best;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(in_len: usize, arg: &[usize], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&a, &g) in arg.iter().zip(dy) {
        dx[a] += g;
    }
    dx
}

/// `y[n, out] = x[n, in] · W^T + b` with `W` stored `[out, in]`.
pub(crate) fn linear_forward(
    n: usize,
    inp: usize,
    out: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(n, inp, out, x, (inp, 1), weight, (1, inp), &mut y, 1.0);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    n: usize,
    inp: usize,
    out: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    wgrad: Option<&mut [f64]>,
    bgrad: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, dy, (out, 1), weight, (inp, 1), &mut dx, 0.0);
    if let Some(wg) = wgrad {
        gemm(out, n, inp, dy, (1, out), x, (inp, 1), wg, 1.0);
    }
    if let Some(bg) = bgrad {
        for row in dy.chunks(out) {
            bg.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_c * oh * ow];
        for oc in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.in_c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = oy as isize + ki as isize - g.pad as isize;
                                let ix = ox as isize + kj as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    s += w[((oc * g.in_c + c) * g.k + ki) * g.k + kj]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom {
            in_c: 2,
            out_c: 3,
            k: 3,
            pad: 1,
            h: 5,
            w: 4,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let fast = conv_forward(&g, 1, &x, &w, None);
        let slow = naive_conv(&g, &x, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_roundtrip_shapes() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let w = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = linear_forward(2, 2, 3, &x, &w, &[0.5, 0.0, 0.0]);
        assert_eq!(y, vec![1.5, 2.0, 3.0, 3.5, 4.0, 7.0]);
    }
}
