//! Raw numeric kernels behind the tape operations.
//!
//! These are plain slice-in/slice-out routines with no autodiff knowledge.
//! Inner loops run over contiguous slices where the stride allows so the
//! compiler can vectorize them; summation order is fixed so results are
//! deterministic bit-for-bit.

/// Dimensions of one 2-D convolution instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn x_len(&self) -> usize {
        self.n * self.c_in * self.h * self.w
    }
    pub fn k_len(&self) -> usize {
        self.k_out * self.c_in * self.kh * self.kw
    }
    pub fn y_len(&self) -> usize {
        self.n * self.k_out * self.h_out * self.w_out
    }
}

/// Output index range [lo, hi) such that `o*stride + t - pad` stays in [0, limit).
#[inline]
fn valid_range(t: usize, pad: usize, stride: usize, limit: usize, out_len: usize) -> (usize, usize) {
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi = if limit + pad > t {
        (((limit - 1 + pad - t) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Visit every (output-channel, input-channel, tap) tuple with the valid
/// output ranges precomputed.
#[inline]
fn for_each_tap<F>(d: &ConvDims, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize)),
{
    let ConvDims { n, c_in, h, w, k_out, kh, kw, stride, pad, h_out, w_out } = *d;
    for bn in 0..n {
        for o in 0..k_out {
            for c in 0..c_in {
                for r in 0..kh {
                    let ir = valid_range(r, pad, stride, h, h_out);
                    for s in 0..kw {
                        let jr = valid_range(s, pad, stride, w, w_out);
                        f(bn, o, c, r, s, ir, jr);
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: y[n,o,i,j] = sum x[n,c,i*s+r-p, j*s+s'-p] * k[o,c,r,s'].
pub fn conv2d_forward(x: &[f64], k: &[f64], d: &ConvDims, y: &mut [f64]) {
    let ConvDims { c_in, h, w, k_out, kh, kw, stride, pad, h_out, w_out, .. } = *d;
    y.iter_mut().for_each(|v| *v = 0.0);
    for_each_tap(d, |bn, o, c, r, s, (i_lo, i_hi), (j_lo, j_hi)| {
        let wgt = k[((o * c_in + c) * kh + r) * kw + s];
        if wgt == 0.0 || j_lo >= j_hi {
            return;
        }
        let x_base = (bn * c_in + c) * h * w;
        let y_base = (bn * k_out + o) * h_out * w_out;
        let len = j_hi - j_lo;
        for i in i_lo..i_hi {
            let iy = i * stride + r - pad;
            let x_row = x_base + iy * w + j_lo * stride + s - pad;
            let y_row = y_base + i * w_out + j_lo;
            let ys = &mut y[y_row..y_row + len];
            if stride == 1 {
                let xs = &x[x_row..x_row + len];
                for (yv, xv) in ys.iter_mut().zip(xs) {
                    *yv += wgt * xv;
                }
            } else {
                let xs = &x[x_row..];
                for (j, yv) in ys.iter_mut().enumerate() {
                    *yv += wgt * xs[j * stride];
                }
            }
        }
    });
}

/// Gradient w.r.t. the input: g scattered back through the kernel taps.
pub fn conv2d_grad_input(g: &[f64], k: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let ConvDims { c_in, h, w, k_out, kh, kw, stride, pad, h_out, w_out, .. } = *d;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for_each_tap(d, |bn, o, c, r, s, (i_lo, i_hi), (j_lo, j_hi)| {
        let wgt = k[((o * c_in + c) * kh + r) * kw + s];
        if wgt == 0.0 || j_lo >= j_hi {
            return;
        }
        let x_base = (bn * c_in + c) * h * w;
        let g_base = (bn * k_out + o) * h_out * w_out;
        let len = j_hi - j_lo;
        for i in i_lo..i_hi {
            let iy = i * stride + r - pad;
            let x_row = x_base + iy * w + j_lo * stride + s - pad;
            let g_row = g_base + i * w_out + j_lo;
            let gs = &g[g_row..g_row + len];
            if stride == 1 {
                let xs = &mut dx[x_row..x_row + len];
                for (xv, gv) in xs.iter_mut().zip(gs) {
                    *xv += wgt * gv;
                }
            } else {
                let xs = &mut dx[x_row..];
                for (j, gv) in gs.iter().enumerate() {
                    xs[j * stride] += wgt * gv;
                }
            }
        }
    });
}

/// Gradient w.r.t. the kernel: dk[o,c,r,s] = sum_{n,i,j} x[n,c,...] * g[n,o,i,j].
pub fn conv2d_grad_kernel(x: &[f64], g: &[f64], d: &ConvDims, dk: &mut [f64]) {
    let ConvDims { c_in, h, w, k_out, kh, kw, stride, pad, h_out, w_out, .. } = *d;
    dk.iter_mut().for_each(|v| *v = 0.0);
    for_each_tap(d, |bn, o, c, r, s, (i_lo, i_hi), (j_lo, j_hi)| {
        if j_lo >= j_hi {
            return;
        }
        let x_base = (bn * c_in + c) * h * w;
        let g_base = (bn * k_out + o) * h_out * w_out;
        let len = j_hi - j_lo;
        let mut acc = 0.0;
        for i in i_lo..i_hi {
            let iy = i * stride + r - pad;
            let x_row = x_base + iy * w + j_lo * stride + s - pad;
            let g_row = g_base + i * w_out + j_lo;
            let gs = &g[g_row..g_row + len];
            if stride == 1 {
                let xs = &x[x_row..x_row + len];
                for (xv, gv) in xs.iter().zip(gs) {
                    acc += xv * gv;
                }
            } else {
                let xs = &x[x_row..];
                for (j, gv) in gs.iter().enumerate() {
                    acc += xs[j * stride] * gv;
                }
            }
        }
        dk[((o * c_in + c) * kh + r) * kw + s] += acc;
    });
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    c.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    c.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Non-overlapping k*k average pool over the two trailing axes of [N,C,H,W].
pub fn avgpool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, y: &mut [f64]) {
    let ho = h / k;
    let wo = w / k;
    let inv = 1.0 / (k * k) as f64;
    for plane in 0..n * c {
        let x_base = plane * h * w;
        let y_base = plane * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for r in 0..k {
                    let row = x_base + (i * k + r) * w + j * k;
                    for s in 0..k {
                        acc += x[row + s];
                    }
                }
                y[y_base + i * wo + j] = acc * inv;
            }
        }
    }
}

/// Adjoint of `avgpool_forward`: spread each cell back over its k*k block / k^2.
pub fn avgpool_backward(g: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let ho = h / k;
    let wo = w / k;
    let inv = 1.0 / (k * k) as f64;
    for plane in 0..n * c {
        let g_base = plane * ho * wo;
        let x_base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let v = g[g_base + i * wo + j] * inv;
                for r in 0..k {
                    let row = x_base + (i * k + r) * w + j * k;
                    for s in 0..k {
                        dx[row + s] = v;
                    }
                }
            }
        }
    }
}
