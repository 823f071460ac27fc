//! Dense compute kernels behind the tape ops.
//!
//! All kernels are plain loops over row-major slices, shaped so the inner
//! loop is contiguous and auto-vectorizes. Convolution lowers to im2col plus
//! one of three matmul variants.

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ik * bj;
            }
        }
    }
}

/// c[m,q] += a[m,k] · b[q,k]ᵀ (dot-product form)
pub fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, q: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), q * k);
    debug_assert_eq!(c.len(), m * q);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * q..(i + 1) * q];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *cj += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ik * bj;
            }
        }
    }
}

/// Static dimensions of a conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image [Cin,H,W] into cols [Cin·k·k, OH·OW] with zero padding.
pub fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w) = (d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let s = oh * ow;
    debug_assert_eq!(cols.len(), d.patch_len() * s);
    for c in 0..d.in_ch {
        let x_c = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kernel {
            for kj in 0..d.kernel {
                let row = &mut cols[((c * d.kernel + ki) * d.kernel + kj) * s..][..s];
                for oy in 0..oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add cols gradients back to the image gradient (inverse of im2col).
pub fn col2im_acc(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let (h, w) = (d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let s = oh * ow;
    for c in 0..d.in_ch {
        let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kernel {
            for kj in 0..d.kernel {
                let row = &cols[((c * d.kernel + ki) * d.kernel + kj) * s..][..s];
                for oy in 0..oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv forward. `cols_out` receives the unfolded input for reuse in
/// backward (length batch · patch_len · out_spatial).
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    cols_out: &mut Vec<f64>,
) -> Vec<f64> {
    let ck = d.patch_len();
    let s = d.out_spatial();
    let in_stride = d.in_ch * d.in_h * d.in_w;
    let out_stride = d.out_ch * s;
    let mut y = vec![0.0; d.batch * out_stride];
    cols_out.clear();
    cols_out.resize(d.batch * ck * s, 0.0);
    for n in 0..d.batch {
        let cols = &mut cols_out[n * ck * s..(n + 1) * ck * s];
        im2col(&x[n * in_stride..(n + 1) * in_stride], d, cols);
        let y_n = &mut y[n * out_stride..(n + 1) * out_stride];
        matmul_acc(weight, cols, y_n, d.out_ch, ck, s);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut y_n[co * s..(co + 1) * s] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Conv backward. Accumulates into any of dw/db/dx that are present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dy: &[f64],
    weight: &[f64],
    cols: &[f64],
    d: &ConvDims,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let ck = d.patch_len();
    let s = d.out_spatial();
    let in_stride = d.in_ch * d.in_h * d.in_w;
    let out_stride = d.out_ch * s;
    let mut dcols = if dx.is_some() {
        vec![0.0; ck * s]
    } else {
        Vec::new()
    };
    for n in 0..d.batch {
        let dy_n = &dy[n * out_stride..(n + 1) * out_stride];
        let cols_n = &cols[n * ck * s..(n + 1) * ck * s];
        if let Some(dw) = dw.as_deref_mut() {
            matmul_abt_acc(dy_n, cols_n, dw, d.out_ch, ck, s);
        }
        if let Some(db) = db.as_deref_mut() {
            for co in 0..d.out_ch {
                db[co] += dy_n[co * s..(co + 1) * s].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            matmul_atb_acc(weight, dy_n, &mut dcols, d.out_ch, ck, s);
            col2im_acc(&dcols, d, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
}

/// 2×2 max pool, stride 2, floor semantics on odd dims. Returns (values,
/// argmax indices into the input slice).
pub fn maxpool2_forward(
    x: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; batch * ch * oh * ow];
    let mut arg = vec![0usize; y.len()];
    for nc in 0..batch * ch {
        let base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                y[out_base + oy * ow + ox] = x[best];
                arg[out_base + oy * ow + ox] = best;
            }
        }
    }
    (y, arg)
}

/// Per-channel statistics for batch norm over (batch, spatial) lanes.
/// Returns (mean, biased variance) of each channel.
pub fn channel_stats(x: &[f64], batch: usize, ch: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * spatial) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for b in 0..batch {
        for c in 0..ch {
            let lane = &x[(b * ch + c) * spatial..][..spatial];
            mean[c] += lane.iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for b in 0..batch {
        for c in 0..ch {
            let lane = &x[(b * ch + c) * spatial..][..spatial];
            let mc = mean[c];
            var[c] += lane.iter().map(|v| (v - mc) * (v - mc)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}
