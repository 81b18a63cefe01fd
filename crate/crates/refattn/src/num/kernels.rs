//! Raw forward/backward kernels on plain `f64` slices.
//!
//! These are the only places that touch indices; the tape ops in
//! [`super::ops`] wrap them with shape checks and backward wiring. All
//! spatial kernels treat out-of-bounds reads as zero.

/// `a [m,k] @ b [k,n] -> [m,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ail * bv;
            }
        }
    }
    out
}

/// `[rows, cols] -> [cols, rows]`.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution (floor semantics: rows the stride
/// cannot reach are dropped); `None` when no window fits at all.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Valid output range `[lo, hi)` so that `o*stride + k - pad` stays inside
/// `[0, limit)`.
#[inline]
fn valid_out_range(k: usize, stride: usize, pad: usize, limit: usize, out_len: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // o*stride + k - pad < limit  =>  o <= floor((limit - 1 + pad - k) / stride)
    let hi = match (limit + pad).checked_sub(k + 1) {
        Some(top) => (top / stride + 1).min(out_len),
        None => 0,
    };
    (lo.min(hi), hi)
}

/// Patch matrix for convolution: row `(ci*kh + ky)*kw + kx`, column
/// `oy*wo + ox`, zero padded.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; cin * kh * kw * n];
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, stride, pad, h, ho);
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = valid_out_range(kx, stride, pad, w, wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let x_row = &xc[iy * w..(iy + 1) * w];
                    let d_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        d_row[ox_lo..ox_hi].copy_from_slice(
                            &x_row[(ox_lo as isize + shift) as usize
                                ..(ox_hi as isize + shift) as usize],
                        );
                    } else {
                        for ox in ox_lo..ox_hi {
                            d_row[ox] = x_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the image grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; cin * h * w];
    for ci in 0..cin {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, stride, pad, h, ho);
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = valid_out_range(kx, stride, pad, w, wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let x_row = &mut xc[iy * w..(iy + 1) * w];
                    let s_row = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        for ox in ox_lo..ox_hi {
                            x_row[(ox as isize + shift) as usize] += s_row[ox];
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            x_row[ox * stride + kx - pad] += s_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `a [m,k] @ b[n,k]^T -> [m,n]` (dot products of contiguous rows).
fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += a_row[t] * b_row[t];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Cross-correlation of `x [cin,h,w]` with `wgt [cout,cin,kh,kw]` plus
/// bias, via im2col and a GEMM.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let cols = im2col(x, cin, h, w, kh, kw, stride, pad, ho, wo);
    let mut out = matmul(wgt, &cols, cout, cin * kh * kw, n);
    if let Some(b) = bias {
        for co in 0..cout {
            let bc = b[co];
            for o in &mut out[co * n..(co + 1) * n] {
                *o += bc;
            }
        }
    }
    out
}

/// Gradient of `conv2d_fwd` with respect to its input (the adjoint map).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_igrad(
    g: &[f64],
    cout: usize,
    ho: usize,
    wo: usize,
    wgt: &[f64],
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let d = cin * kh * kw;
    // cols_g = w^T @ g, then scatter back onto the image grid
    let wt = transpose(wgt, cout, d);
    let cols_g = matmul(&wt, g, d, cout, n);
    col2im(&cols_g, cin, h, w, kh, kw, stride, pad, ho, wo)
}

/// Gradient of `conv2d_fwd` with respect to the kernel weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_wgrad(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    g: &[f64],
    cout: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let n = ho * wo;
    // gw = g @ cols^T: dot products over the spatial axis
    let cols = im2col(x, cin, h, w, kh, kw, stride, pad, ho, wo);
    matmul_abt(g, &cols, cout, n, cin * kh * kw)
}

/// Gradient of `conv2d_fwd` with respect to the bias: spatial sum per filter.
pub fn conv2d_bgrad(g: &[f64], cout: usize, ho: usize, wo: usize) -> Vec<f64> {
    (0..cout)
        .map(|co| g[co * ho * wo..(co + 1) * ho * wo].iter().sum())
        .collect()
}

/// Bilinear sampling of `src [c,h,w]` at continuous `(y,x)` positions given
/// as `coords [2,ho,wo]` in source pixel units. Out-of-bounds corners read 0.
pub fn bilinear_fwd(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let y = coords[i];
        let x = coords[n + i];
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let fetch = |ch: usize, yy: isize, xx: isize| -> f64 {
            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                0.0
            } else {
                src[(ch * h + yy as usize) * w + xx as usize]
            }
        };
        for ch in 0..c {
            let v00 = fetch(ch, y0, x0);
            let v01 = fetch(ch, y0, x0 + 1);
            let v10 = fetch(ch, y0 + 1, x0);
            let v11 = fetch(ch, y0 + 1, x0 + 1);
            out[ch * n + i] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Backward of [`bilinear_fwd`]: gradients for the source and the coordinates.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_bwd(
    g: &[f64],
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = ho * wo;
    let mut gsrc = vec![0.0; c * h * w];
    let mut gcoords = vec![0.0; 2 * n];
    for i in 0..n {
        let y = coords[i];
        let x = coords[n + i];
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let inb = |yy: isize, xx: isize| yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize;
        let mut gy = 0.0;
        let mut gx_ = 0.0;
        for ch in 0..c {
            let go = g[ch * n + i];
            if go == 0.0 {
                continue;
            }
            let fetch = |yy: isize, xx: isize| -> f64 {
                if inb(yy, xx) {
                    src[(ch * h + yy as usize) * w + xx as usize]
                } else {
                    0.0
                }
            };
            let v00 = fetch(y0, x0);
            let v01 = fetch(y0, x0 + 1);
            let v10 = fetch(y0 + 1, x0);
            let v11 = fetch(y0 + 1, x0 + 1);
            gy += go * (-(1.0 - fx) * v00 - fx * v01 + (1.0 - fx) * v10 + fx * v11);
            gx_ += go * (-(1.0 - fy) * v00 + (1.0 - fy) * v01 - fy * v10 + fy * v11);
            let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                if inb(yy, xx) {
                    gsrc[(ch * h + yy as usize) * w + xx as usize] += go * wgt;
                }
            };
            scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
            scatter(y0, x0 + 1, (1.0 - fy) * fx);
            scatter(y0 + 1, x0, fy * (1.0 - fx));
            scatter(y0 + 1, x0 + 1, fy * fx);
        }
        gcoords[i] = gy;
        gcoords[n + i] = gx_;
    }
    (gsrc, gcoords)
}

/// Unfolds `x [c,h,w]` into `[c*k*k, ho*wo]` patch columns with zero padding.
/// With `pad == (k-1)/2` the column at position `i` is the k-by-k
/// neighborhood centered there and `ho*wo == h*w`.
pub fn unfold_fwd(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let n = ho * wo;
    let mut out = vec![0.0; c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold_fwd`]: scatter-adds patch columns back into `[c,h,w]`.
pub fn unfold_bwd(g: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let n = ho * wo;
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &g[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    gx
}

/// Row-stable softmax over the trailing axis of a `[rows, cols]` view.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Backward of softmax given its output `s`: `gin = s * (g - sum(g*s))`, rowwise.
pub fn softmax_rows_bwd(g: &[f64], s: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut gin = vec![0.0; rows * cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let sr = &s[r * cols..(r + 1) * cols];
        let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            gin[r * cols + c] = sr[c] * (gr[c] - dot);
        }
    }
    gin
}

pub const NORM_EPS: f64 = 1e-12;

/// L2-normalizes each row of a `[rows, cols]` view with an epsilon floor on
/// the norm, so flat rows map to (near) zero instead of NaN.
pub fn l2_normalize_rows(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        norms[r] = norm;
        for c in 0..cols {
            out[r * cols + c] = row[c] / norm;
        }
    }
    (out, norms)
}

/// Backward of row L2 normalization. `y` is the normalized output, `norms`
/// the per-row (floored) norms saved by the forward pass.
pub fn l2_normalize_rows_bwd(
    g: &[f64],
    y: &[f64],
    norms: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut gin = vec![0.0; rows * cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let yr = &y[r * cols..(r + 1) * cols];
        if norms[r] <= NORM_EPS {
            // Floor active: y = x / eps is linear.
            for c in 0..cols {
                gin[r * cols + c] = gr[c] / NORM_EPS;
            }
            continue;
        }
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            gin[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
        }
    }
    gin
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row layer normalization of `[n, c]` with affine scale and shift.
/// Returns the output plus the saved mean and inverse-std per row.
pub fn layer_norm_rows(
    x: &[f64],
    n: usize,
    c: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * c];
    let mut means = vec![0.0; n];
    let mut inv_stds = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        means[r] = mean;
        inv_stds[r] = inv_std;
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    (out, means, inv_stds)
}

/// Backward of [`layer_norm_rows`]: gradients for x, gamma, beta.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_bwd(
    g: &[f64],
    x: &[f64],
    n: usize,
    c: usize,
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * c];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for r in 0..n {
        let gr = &g[r * c..(r + 1) * c];
        let xr = &x[r * c..(r + 1) * c];
        let inv_std = inv_stds[r];
        let mean = means[r];
        // xhat_j = (x_j - mean) * inv_std; out = xhat*gamma + beta
        let mut sum_gh = 0.0; // sum of g*gamma
        let mut sum_gh_xhat = 0.0; // sum of g*gamma*xhat
        for j in 0..c {
            let xhat = (xr[j] - mean) * inv_std;
            let gh = gr[j] * gamma[j];
            sum_gh += gh;
            sum_gh_xhat += gh * xhat;
            ggamma[j] += gr[j] * xhat;
            gbeta[j] += gr[j];
        }
        let cf = c as f64;
        for j in 0..c {
            let xhat = (xr[j] - mean) * inv_std;
            let gh = gr[j] * gamma[j];
            gx[r * c + j] = inv_std * (gh - sum_gh / cf - xhat * sum_gh_xhat / cf);
        }
    }
    (gx, ggamma, gbeta)
}

/// Per-channel Frobenius norms of `[c, rest]`: `out[ch] = ||x[ch, ..]||_2`.
pub fn channel_l2_norms(x: &[f64], c: usize, rest: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| {
            x[ch * rest..(ch + 1) * rest]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Nearest-neighbor 2x upsampling of `[c,h,w]`.
pub fn nearest2x_fwd(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ch * ho + y) * wo + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn nearest2x_bwd(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_xoshiro::rand_core::RngCore;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        use rand_xoshiro::rand_core::SeedableRng;
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn uniform(r: &mut Xoshiro256PlusPlus) -> f64 {
        (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn randn_vec(r: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
        (0..n).map(|_| uniform(r) * 2.0 - 1.0).collect()
    }

    /// Literal quadruple-loop convolution used as the oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        cout: usize,
        kh: usize,
        kw: usize,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_out_dim(h, kh, stride, pad).unwrap();
        let wo = conv_out_dim(w, kw, stride, pad).unwrap();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                                let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wgt[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut r = rng(11);
        for &(cin, h, w, cout, k, stride, pad) in &[
            (2usize, 5usize, 5usize, 3usize, 3usize, 1usize, 0usize),
            (2, 5, 5, 3, 3, 1, 1),
            (3, 6, 8, 2, 3, 2, 1),
            (1, 7, 7, 4, 1, 1, 0),
        ] {
            let x = randn_vec(&mut r, cin * h * w);
            let wgt = randn_vec(&mut r, cout * cin * k * k);
            let b = randn_vec(&mut r, cout);
            let ho = conv_out_dim(h, k, stride, pad).unwrap();
            let wo = conv_out_dim(w, k, stride, pad).unwrap();
            let got = conv2d_fwd(&x, cin, h, w, &wgt, cout, k, k, Some(&b), stride, pad, ho, wo);
            let want = conv_oracle(&x, cin, h, w, &wgt, cout, k, k, &b, stride, pad);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "conv deviates from oracle: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_pointwise_and_padding_cases() {
        // 1x3x3 ones, 1x1x1x1 weight=2 -> all twos.
        let x = vec![1.0; 9];
        let out = conv2d_fwd(&x, 1, 3, 3, &[2.0], 1, 1, 1, Some(&[0.0]), 1, 0, 3, 3);
        assert_eq!(out, vec![2.0; 9]);
        // 1x1x1 input=5, 3x3 all-ones kernel, pad 1 -> just the center tap.
        let out = conv2d_fwd(&[5.0], 1, 1, 1, &[1.0; 9], 1, 3, 3, Some(&[0.0]), 1, 1, 1, 1);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn conv_adjoint_identity() {
        // <g, conv(x)> == <igrad(g), x> + bias part: the pair must be adjoint.
        let mut r = rng(5);
        let (cin, h, w, cout, k, stride, pad) = (2, 6, 5, 3, 3, 2, 1);
        let ho = conv_out_dim(h, k, stride, pad).unwrap();
        let wo = conv_out_dim(w, k, stride, pad).unwrap();
        let x = randn_vec(&mut r, cin * h * w);
        let wgt = randn_vec(&mut r, cout * cin * k * k);
        let g = randn_vec(&mut r, cout * ho * wo);
        let y = conv2d_fwd(&x, cin, h, w, &wgt, cout, k, k, None, stride, pad, ho, wo);
        let gx = conv2d_igrad(&g, cout, ho, wo, &wgt, cin, k, k, stride, pad, h, w);
        let lhs: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated: {lhs} vs {rhs}");
    }

    #[test]
    fn unfold_matches_index_arithmetic() {
        let mut r = rng(7);
        let (c, h, w, k, pad) = (2, 4, 5, 3, 1);
        let x = randn_vec(&mut r, c * h * w);
        let out = unfold_fwd(&x, c, h, w, k, pad);
        let n = h * w;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    for y in 0..h {
                        for xx in 0..w {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            let want = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                            let row = (ci * k + ky) * k + kx;
                            assert_eq!(out[row * n + y * w + xx], want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_k1_is_reshape_and_center_recovers() {
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        assert_eq!(unfold_fwd(&x, 1, 3, 3, 1, 0), x);
        // k=3 pad=1: the column at the center position carries 1..9 in kernel order.
        let out = unfold_fwd(&x, 1, 3, 3, 3, 1);
        let center = 4; // (1,1) in a 3x3 grid
        let col: Vec<f64> = (0..9).map(|row| out[row * 9 + center]).collect();
        assert_eq!(col, x);
        // center tap row recovers the input exactly
        let center_row = 4; // ky=1,kx=1
        assert_eq!(&out[center_row * 9..center_row * 9 + 9], x.as_slice());
    }

    #[test]
    fn bilinear_integer_coords_and_midpoint() {
        // 2x2 plane {1,2,3,4}: integer coords gather, center gives the mean.
        let src = vec![1.0, 2.0, 3.0, 4.0];
        let coords = vec![0.0, 0.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.5];
        // coords layout [2, 2, 2]: y plane then x plane
        let out = bilinear_fwd(&src, 1, 2, 2, &coords, 2, 2);
        assert_eq!(out[0], 1.0); // (0,0)
        assert_eq!(out[1], 2.0); // (0,1)
        assert_eq!(out[2], 4.0); // (1,1)
        assert_eq!(out[3], 2.5); // (0.5,0.5)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(3);
        let x = randn_vec(&mut r, 6 * 7);
        let s = softmax_rows(&x, 6, 7);
        for row in 0..6 {
            let sum: f64 = s[row * 7..(row + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s[row * 7..(row + 1) * 7].iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(softmax_rows(&[0.0, 0.0], 1, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_345() {
        let (y, _) = l2_normalize_rows(&[3.0, 4.0], 1, 2);
        assert!((y[0] - 0.6).abs() < 1e-15);
        assert!((y[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nearest2x_round_trip_sum() {
        let mut r = rng(9);
        let x = randn_vec(&mut r, 2 * 3 * 4);
        let up = nearest2x_fwd(&x, 2, 3, 4);
        let back = nearest2x_bwd(&up, 2, 3, 4);
        for (b, v) in back.iter().zip(&x) {
            assert!((b - 4.0 * v).abs() < 1e-12);
        }
    }
}
