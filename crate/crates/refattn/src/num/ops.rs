//! Differentiable operations recorded on the tape.
//!
//! Shape preconditions are asserted unless the contract names a recoverable
//! error (convolution and matmul report dimension mismatches as errors).
//! Every backward rule here is covered by the finite-difference harness in
//! `gradcheck`.

use super::kernels as k;
use super::tape::Var;
use super::NdArray;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// elementwise arithmetic

macro_rules! assert_same_shape {
    ($op:literal, $a:expr, $b:expr) => {
        assert_eq!(
            $a.shape(),
            $b.shape(),
            concat!($op, ": operand shapes differ")
        );
    };
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_same_shape!("add", a, b);
    let (va, vb) = (a.value(), b.value());
    let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
    let out = NdArray::new_unchecked(va.shape(), data);
    a.tape().record(
        &[a, b],
        out,
        Box::new(|g, _, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        }),
    )
}

pub fn sub(a: &Var, b: &Var) -> Var {
    assert_same_shape!("sub", a, b);
    let (va, vb) = (a.value(), b.value());
    let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
    let out = NdArray::new_unchecked(va.shape(), data);
    a.tape().record(
        &[a, b],
        out,
        Box::new(|g, _, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        }),
    )
}

pub fn mul(a: &Var, b: &Var) -> Var {
    assert_same_shape!("mul", a, b);
    let (va, vb) = (a.value(), b.value());
    let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
    let out = NdArray::new_unchecked(va.shape(), data);
    a.tape().record(
        &[a, b],
        out,
        Box::new(|g, saved, needs| {
            let (va, vb) = (&saved.parents[0], &saved.parents[1]);
            vec![
                needs[0].then(|| g.iter().zip(vb.data()).map(|(g, y)| g * y).collect()),
                needs[1].then(|| g.iter().zip(va.data()).map(|(g, x)| g * x).collect()),
            ]
        }),
    )
}

pub fn mul_scalar(a: &Var, c: f64) -> Var {
    let va = a.value();
    let out = va.map(|v| v * c);
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * c).collect())]),
    )
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    let va = a.value();
    let out = va.map(|v| v + c);
    a.tape()
        .record(&[a], out, Box::new(|g, _, _| vec![Some(g.to_vec())]))
}

pub fn neg(a: &Var) -> Var {
    mul_scalar(a, -1.0)
}

// ---------------------------------------------------------------------------
// activations

fn unary(a: &Var, fwd: impl Fn(f64) -> f64, dydx: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let va = a.value();
    let out = va.map(fwd);
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, saved, _| {
            let x = saved.parents[0].data();
            let y = saved.output.data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * dydx(x, y))
                    .collect(),
            )]
        }),
    )
}

pub fn tanh(a: &Var) -> Var {
    unary(a, f64::tanh, |_, y| 1.0 - y * y)
}

pub fn sigmoid(a: &Var) -> Var {
    unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
}

pub fn relu(a: &Var) -> Var {
    unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

/// GELU with the tanh approximation.
pub fn gelu(a: &Var) -> Var {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044715;
    unary(
        a,
        |x| 0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh()),
        |x, _| {
            let u = A * (x + B * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
        },
    )
}

pub fn abs(a: &Var) -> Var {
    unary(a, f64::abs, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Elementwise square root; inputs must be non-negative. The derivative is
/// floored near zero to stay finite.
pub fn sqrt(a: &Var) -> Var {
    unary(a, f64::sqrt, |_, y| 0.5 / y.max(1e-12))
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_all(a: &Var) -> Var {
    let va = a.value();
    let out = NdArray::scalar(va.data().iter().sum());
    let n = va.numel();
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.numel();
    mul_scalar(&sum_all(a), 1.0 / n as f64)
}

/// Per-channel Frobenius norms: `[c, ...] -> [c]`. The gradient at an
/// all-zero channel is zero (subgradient), so `norm(0)` is safe to train.
pub fn channel_l2_norms(a: &Var) -> Var {
    let va = a.value();
    let c = va.shape()[0];
    let rest = va.numel() / c.max(1);
    let norms = k::channel_l2_norms(va.data(), c, rest);
    let out = NdArray::new_unchecked(&[c], norms);
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, saved, _| {
            let x = saved.parents[0].data();
            let norms = saved.output.data();
            let mut gx = vec![0.0; x.len()];
            for ch in 0..c {
                let scale = g[ch] / norms[ch].max(1e-12);
                for r in 0..rest {
                    gx[ch * rest + r] = scale * x[ch * rest + r];
                }
            }
            vec![Some(gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// axis helpers

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn for_each_lane(
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&mut dyn FnMut(usize) -> usize),
) {
    for o in 0..outer {
        for i in 0..inner {
            let mut index = |j: usize| (o * len + j) * inner + i;
            f(&mut index);
        }
    }
}

/// Softmax along `axis`. Rows sum to one within 1e-12; entries lie in (0,1).
pub fn softmax(a: &Var, axis: usize) -> Var {
    let va = a.value();
    let (outer, len, inner) = lane_split(va.shape(), axis);
    let x = va.data();
    let mut out = vec![0.0; x.len()];
    for_each_lane(outer, len, inner, |idx| {
        let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..len {
            let e = (x[idx(j)] - max).exp();
            out[idx(j)] = e;
            sum += e;
        }
        for j in 0..len {
            out[idx(j)] /= sum;
        }
    });
    let out = NdArray::new_unchecked(va.shape(), out);
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, saved, _| {
            let s = saved.output.data();
            let mut gin = vec![0.0; g.len()];
            for_each_lane(outer, len, inner, |idx| {
                let dot: f64 = (0..len).map(|j| g[idx(j)] * s[idx(j)]).sum();
                for j in 0..len {
                    gin[idx(j)] = s[idx(j)] * (g[idx(j)] - dot);
                }
            });
            vec![Some(gin)]
        }),
    )
}

/// L2 normalization along `axis` with a 1e-12 floor on the norm.
pub fn l2_normalize(a: &Var, axis: usize) -> Var {
    let va = a.value();
    let (outer, len, inner) = lane_split(va.shape(), axis);
    let x = va.data();
    let mut out = vec![0.0; x.len()];
    let mut norms = vec![0.0; outer * inner];
    let mut lane = 0usize;
    for_each_lane(outer, len, inner, |idx| {
        let norm = (0..len)
            .map(|j| x[idx(j)] * x[idx(j)])
            .sum::<f64>()
            .sqrt()
            .max(k::NORM_EPS);
        norms[lane] = norm;
        lane += 1;
        for j in 0..len {
            out[idx(j)] = x[idx(j)] / norm;
        }
    });
    let out = NdArray::new_unchecked(va.shape(), out);
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, saved, _| {
            let y = saved.output.data();
            let mut gin = vec![0.0; g.len()];
            let mut lane = 0usize;
            for_each_lane(outer, len, inner, |idx| {
                let norm = norms[lane];
                lane += 1;
                if norm <= k::NORM_EPS {
                    for j in 0..len {
                        gin[idx(j)] = g[idx(j)] / k::NORM_EPS;
                    }
                } else {
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        gin[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / norm;
                    }
                }
            });
            vec![Some(gin)]
        }),
    )
}

// ---------------------------------------------------------------------------
// linear algebra

pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let (va, vb) = (a.value(), b.value());
    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(
            "matmul",
            format!("cannot contract {:?} with {:?}", sa, sb),
        ));
    }
    let (m, kk, n) = (sa[0], sa[1], sb[1]);
    let out = NdArray::new_unchecked(&[m, n], k::matmul(va.data(), vb.data(), m, kk, n));
    Ok(a.tape().record(
        &[a, b],
        out,
        Box::new(move |g, saved, needs| {
            let (va, vb) = (&saved.parents[0], &saved.parents[1]);
            let ga = needs[0].then(|| {
                let bt = k::transpose(vb.data(), kk, n);
                k::matmul(g, &bt, m, n, kk)
            });
            let gb = needs[1].then(|| {
                let at = k::transpose(va.data(), m, kk);
                k::matmul(&at, g, kk, m, n)
            });
            vec![ga, gb]
        }),
    ))
}

pub fn transpose2d(a: &Var) -> Var {
    let va = a.value();
    assert_eq!(va.shape().len(), 2, "transpose2d expects a matrix");
    let (r, c) = (va.shape()[0], va.shape()[1]);
    let out = NdArray::new_unchecked(&[c, r], k::transpose(va.data(), r, c));
    a.tape().record(
        &[a],
        out,
        Box::new(move |g, _, _| vec![Some(k::transpose(g, c, r))]),
    )
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let va = a.value();
    let out = va.reshape(shape).expect("reshape: element count mismatch");
    a.tape()
        .record(&[a], out, Box::new(|g, _, _| vec![Some(g.to_vec())]))
}

/// `x [n,c] + bias [c]`, broadcast over rows.
pub fn add_row_bias(x: &Var, b: &Var) -> Var {
    let (vx, vb) = (x.value(), b.value());
    assert_eq!(vx.shape().len(), 2);
    let (n, c) = (vx.shape()[0], vx.shape()[1]);
    assert_eq!(vb.shape(), &[c], "add_row_bias: bias width mismatch");
    let mut data = vx.data().to_vec();
    for r in 0..n {
        for j in 0..c {
            data[r * c + j] += vb.data()[j];
        }
    }
    let out = NdArray::new_unchecked(&[n, c], data);
    x.tape().record(
        &[x, b],
        out,
        Box::new(move |g, _, needs| {
            let gx = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
                gb
            });
            vec![gx, gb]
        }),
    )
}

// ---------------------------------------------------------------------------
// gather / concat / slice

/// Row gather: `out[j, ..] = x[idx[j], ..]`. Backward scatter-adds.
pub fn gather_rows(x: &Var, idx: &[usize]) -> Var {
    let vx = x.value();
    let rows = vx.shape()[0];
    let rest: usize = vx.shape()[1..].iter().product();
    assert!(idx.iter().all(|&i| i < rows), "gather_rows: index out of range");
    let mut data = Vec::with_capacity(idx.len() * rest);
    for &i in idx {
        data.extend_from_slice(&vx.data()[i * rest..(i + 1) * rest]);
    }
    let mut shape = vx.shape().to_vec();
    shape[0] = idx.len();
    let out = NdArray::new_unchecked(&shape, data);
    let idx = idx.to_vec();
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; rows * rest];
            for (j, &i) in idx.iter().enumerate() {
                for r in 0..rest {
                    gx[i * rest + r] += g[j * rest + r];
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Concatenation along axis 0; trailing dims must agree.
pub fn concat_axis0(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let first = parts[0].value();
    let trailing: Vec<usize> = first.shape()[1..].to_vec();
    let rest: usize = trailing.iter().product();
    let mut total = 0;
    let mut data = Vec::new();
    let mut sizes = Vec::new();
    for p in parts {
        let v = p.value();
        assert_eq!(&v.shape()[1..], trailing.as_slice(), "concat_axis0: trailing dims differ");
        total += v.shape()[0];
        sizes.push(v.shape()[0] * rest);
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![total];
    shape.extend_from_slice(&trailing);
    let out = NdArray::new_unchecked(&shape, data);
    parts[0].tape().record(
        parts,
        out,
        Box::new(move |g, _, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &sz)| {
                    let piece = needs[i].then(|| g[offset..offset + sz].to_vec());
                    offset += sz;
                    piece
                })
                .collect()
        }),
    )
}

/// Slice along axis 0: rows `start..start+len`.
pub fn slice_axis0(x: &Var, start: usize, len: usize) -> Var {
    let vx = x.value();
    let rows = vx.shape()[0];
    assert!(start + len <= rows, "slice_axis0 out of range");
    let rest: usize = vx.shape()[1..].iter().product();
    let data = vx.data()[start * rest..(start + len) * rest].to_vec();
    let mut shape = vx.shape().to_vec();
    shape[0] = len;
    let out = NdArray::new_unchecked(&shape, data);
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; rows * rest];
            gx[start * rest..(start + len) * rest].copy_from_slice(g);
            vec![Some(gx)]
        }),
    )
}

/// Slice columns `start..start+len` of a matrix.
pub fn slice_cols(x: &Var, start: usize, len: usize) -> Var {
    let vx = x.value();
    assert_eq!(vx.shape().len(), 2);
    let (n, c) = (vx.shape()[0], vx.shape()[1]);
    assert!(start + len <= c, "slice_cols out of range");
    let mut data = Vec::with_capacity(n * len);
    for r in 0..n {
        data.extend_from_slice(&vx.data()[r * c + start..r * c + start + len]);
    }
    let out = NdArray::new_unchecked(&[n, len], data);
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                gx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(gx)]
        }),
    )
}

/// Concatenate matrices along columns.
pub fn concat_cols(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let n = parts[0].value().shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let v = p.value();
            assert_eq!(v.shape().len(), 2);
            assert_eq!(v.shape()[0], n, "concat_cols: row count differs");
            v.shape()[1]
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; n * total];
    let mut offset = 0;
    for (p, &wdt) in parts.iter().zip(&widths) {
        let v = p.value();
        for r in 0..n {
            data[r * total + offset..r * total + offset + wdt]
                .copy_from_slice(&v.data()[r * wdt..(r + 1) * wdt]);
        }
        offset += wdt;
    }
    let out = NdArray::new_unchecked(&[n, total], data);
    parts[0].tape().record(
        parts,
        out,
        Box::new(move |g, _, needs| {
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &wdt)| {
                    let piece = needs[i].then(|| {
                        let mut gp = vec![0.0; n * wdt];
                        for r in 0..n {
                            gp[r * wdt..(r + 1) * wdt]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + wdt]);
                        }
                        gp
                    });
                    offset += wdt;
                    piece
                })
                .collect()
        }),
    )
}

// ---------------------------------------------------------------------------
// spatial ops

/// Per-position scaling: `x [c, ...] * m [...]` broadcast over the leading axis.
pub fn scale_by_map(x: &Var, m: &Var) -> Var {
    let (vx, vm) = (x.value(), m.value());
    assert_eq!(
        &vx.shape()[1..],
        vm.shape(),
        "scale_by_map: map must match the trailing dims"
    );
    let c = vx.shape()[0];
    let rest = vm.numel();
    let mut data = vec![0.0; vx.numel()];
    for ch in 0..c {
        for r in 0..rest {
            data[ch * rest + r] = vx.data()[ch * rest + r] * vm.data()[r];
        }
    }
    let out = NdArray::new_unchecked(vx.shape(), data);
    x.tape().record(
        &[x, m],
        out,
        Box::new(move |g, saved, needs| {
            let (vx, vm) = (&saved.parents[0], &saved.parents[1]);
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; vx.numel()];
                for ch in 0..c {
                    for r in 0..rest {
                        gx[ch * rest + r] = g[ch * rest + r] * vm.data()[r];
                    }
                }
                gx
            });
            let gm = needs[1].then(|| {
                let mut gm = vec![0.0; rest];
                for ch in 0..c {
                    for r in 0..rest {
                        gm[r] += g[ch * rest + r] * vx.data()[ch * rest + r];
                    }
                }
                gm
            });
            vec![gx, gm]
        }),
    )
}

/// Zero-pads the bottom/right of `[c,h,w]`.
pub fn pad_hw(x: &Var, pad_bottom: usize, pad_right: usize) -> Var {
    let vx = x.value();
    let [c, h, w] = three_dims(&vx, "pad_hw");
    let (ho, wo) = (h + pad_bottom, w + pad_right);
    let mut data = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &vx.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            data[(ch * ho + y) * wo..(ch * ho + y) * wo + w].copy_from_slice(src);
        }
    }
    let out = NdArray::new_unchecked(&[c, ho, wo], data);
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    gx[(ch * h + y) * w..(ch * h + y + 1) * w]
                        .copy_from_slice(&g[(ch * ho + y) * wo..(ch * ho + y) * wo + w]);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Crops `[c,h,w]` down to the top-left `[c,to_h,to_w]`.
pub fn crop_hw(x: &Var, to_h: usize, to_w: usize) -> Var {
    let vx = x.value();
    let [c, h, w] = three_dims(&vx, "crop_hw");
    assert!(to_h <= h && to_w <= w, "crop_hw: target larger than input");
    let mut data = vec![0.0; c * to_h * to_w];
    for ch in 0..c {
        for y in 0..to_h {
            data[(ch * to_h + y) * to_w..(ch * to_h + y + 1) * to_w]
                .copy_from_slice(&vx.data()[(ch * h + y) * w..(ch * h + y) * w + to_w]);
        }
    }
    let out = NdArray::new_unchecked(&[c, to_h, to_w], data);
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..to_h {
                    gx[(ch * h + y) * w..(ch * h + y) * w + to_w]
                        .copy_from_slice(&g[(ch * to_h + y) * to_w..(ch * to_h + y + 1) * to_w]);
                }
            }
            vec![Some(gx)]
        }),
    )
}

pub fn nearest_upsample2x(x: &Var) -> Var {
    let vx = x.value();
    let [c, h, w] = three_dims(&vx, "nearest_upsample2x");
    let out = NdArray::new_unchecked(&[c, 2 * h, 2 * w], k::nearest2x_fwd(vx.data(), c, h, w));
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| vec![Some(k::nearest2x_bwd(g, c, h, w))]),
    )
}

fn three_dims(v: &NdArray, op: &str) -> [usize; 3] {
    assert_eq!(v.shape().len(), 3, "{op}: expected [c,h,w], got {:?}", v.shape());
    [v.shape()[0], v.shape()[1], v.shape()[2]]
}

fn four_dims(v: &NdArray, op: &str) -> [usize; 4] {
    assert_eq!(v.shape().len(), 4, "{op}: expected rank 4, got {:?}", v.shape());
    [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]]
}

/// Cross-correlation `x [cin,h,w] * w [cout,cin,kh,kw] (+ bias [cout])`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
    let vx = x.value();
    let vw = weight.value();
    if vx.shape().len() != 3 || vw.shape().len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, weight {:?}", vx.shape(), vw.shape()),
        ));
    }
    let [cin, h, w] = three_dims(&vx, "conv2d");
    let [cout, wcin, kh, kw] = four_dims(&vw, "conv2d");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd");
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", vx.shape(), vw.shape()),
        ));
    }
    let (Some(ho), Some(wo)) = (k::conv_out_dim(h, kh, stride, pad), k::conv_out_dim(w, kw, stride, pad))
    else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "no window of weight {:?} fits input {:?} with pad {pad}",
                vw.shape(),
                vx.shape()
            ),
        ));
    };
    if let Some(b) = bias {
        let vb = b.value();
        if vb.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} vs weight {:?}", vb.shape(), vw.shape()),
            ));
        }
    }
    let bias_data = bias.map(|b| b.value());
    let data = k::conv2d_fwd(
        vx.data(),
        cin,
        h,
        w,
        vw.data(),
        cout,
        kh,
        kw,
        bias_data.as_ref().map(|b| b.data()),
        stride,
        pad,
        ho,
        wo,
    );
    let out = NdArray::new_unchecked(&[cout, ho, wo], data);
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        &parents,
        out,
        Box::new(move |g, saved, needs| {
            let (vx, vw) = (&saved.parents[0], &saved.parents[1]);
            let gx = needs[0]
                .then(|| k::conv2d_igrad(g, cout, ho, wo, vw.data(), cin, kh, kw, stride, pad, h, w));
            let gw = needs[1]
                .then(|| k::conv2d_wgrad(vx.data(), cin, h, w, g, cout, ho, wo, kh, kw, stride, pad));
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| k::conv2d_bgrad(g, cout, ho, wo)));
            }
            grads
        }),
    ))
}

/// The adjoint of [`conv2d`] as a first-class differentiable op: maps an
/// output-shaped field `g [cout,ho,wo]` back through `weight` to an
/// input-shaped one `[cin,h,w]`. This is what lets a critic's input gradient
/// stay on the tape (its relu masks are piecewise constant) so a gradient
/// penalty can itself be trained through.
pub fn conv2d_input_grad(g: &Var, weight: &Var, stride: usize, pad: usize, h: usize, w: usize) -> Var {
    let vg = g.value();
    let vw = weight.value();
    let [cout, ho, wo] = three_dims(&vg, "conv2d_input_grad");
    let [wcout, cin, kh, kw] = four_dims(&vw, "conv2d_input_grad");
    assert_eq!(cout, wcout, "conv2d_input_grad: channel mismatch");
    assert_eq!(k::conv_out_dim(h, kh, stride, pad), Some(ho));
    assert_eq!(k::conv_out_dim(w, kw, stride, pad), Some(wo));
    let data = k::conv2d_igrad(vg.data(), cout, ho, wo, vw.data(), cin, kh, kw, stride, pad, h, w);
    let out = NdArray::new_unchecked(&[cin, h, w], data);
    g.tape().record(
        &[g, weight],
        out,
        Box::new(move |gg, saved, needs| {
            let (vg, vw) = (&saved.parents[0], &saved.parents[1]);
            // Forward is linear in both arguments; the two backward maps are
            // the forward convolution and the usual weight-gradient kernel
            // with the roles of input and output fields swapped.
            let g_wrt_g = needs[0].then(|| {
                k::conv2d_fwd(gg, cin, h, w, vw.data(), cout, kh, kw, None, stride, pad, ho, wo)
            });
            let g_wrt_w = needs[1]
                .then(|| k::conv2d_wgrad(gg, cin, h, w, vg.data(), cout, ho, wo, kh, kw, stride, pad));
            vec![g_wrt_g, g_wrt_w]
        }),
    )
}

/// Bilinear sampling of `src [c,h,w]` at positions `coords [2,ho,wo]`
/// ((y,x) in source pixels). Out-of-bounds neighbors contribute zero.
pub fn bilinear_sample(src: &Var, coords: &Var) -> Var {
    let vs = src.value();
    let vc = coords.value();
    let [c, h, w] = three_dims(&vs, "bilinear_sample");
    let [two, ho, wo] = three_dims(&vc, "bilinear_sample");
    assert_eq!(two, 2, "bilinear_sample: coords must be [2,h,w]");
    let data = k::bilinear_fwd(vs.data(), c, h, w, vc.data(), ho, wo);
    let out = NdArray::new_unchecked(&[c, ho, wo], data);
    src.tape().record(
        &[src, coords],
        out,
        Box::new(move |g, saved, needs| {
            let (vs, vc) = (&saved.parents[0], &saved.parents[1]);
            let (gsrc, gcoords) = k::bilinear_bwd(g, vs.data(), c, h, w, vc.data(), ho, wo);
            vec![needs[0].then_some(gsrc), needs[1].then_some(gcoords)]
        }),
    )
}

/// Unfolds `[c,h,w]` into zero-padded `k`-by-`k` patch columns.
pub fn unfold(x: &Var, ksize: usize, pad: usize) -> Var {
    assert!(ksize % 2 == 1, "unfold: patch size must be odd");
    let vx = x.value();
    let [c, h, w] = three_dims(&vx, "unfold");
    let ho = h + 2 * pad + 1 - ksize;
    let wo = w + 2 * pad + 1 - ksize;
    let data = k::unfold_fwd(vx.data(), c, h, w, ksize, pad);
    let out = NdArray::new_unchecked(&[c * ksize * ksize, ho * wo], data);
    x.tape().record(
        &[x],
        out,
        Box::new(move |g, _, _| vec![Some(k::unfold_bwd(g, c, h, w, ksize, pad))]),
    )
}

/// Self-attention over consecutive row blocks: rows are split into groups
/// of `block` and each group attends only within itself (the window layout
/// places one window per group). One recorded op covers every block, which
/// keeps the tape small when there are thousands of windows.
pub fn block_attention(q: &Var, k: &Var, v: &Var, block: usize, scale: f64) -> Var {
    let (vq, vk, vv) = (q.value(), k.value(), v.value());
    assert_eq!(vq.shape(), vk.shape(), "block_attention: q/k shapes differ");
    assert_eq!(vq.shape(), vv.shape(), "block_attention: q/v shapes differ");
    assert_eq!(vq.shape().len(), 2);
    let (rows, dh) = (vq.shape()[0], vq.shape()[1]);
    assert!(block > 0 && rows % block == 0, "rows must split into blocks");
    let n_blocks = rows / block;

    let mut out = vec![0.0; rows * dh];
    let mut attn = vec![0.0; n_blocks * block * block];
    for b in 0..n_blocks {
        let q_rows = &vq.data()[b * block * dh..(b + 1) * block * dh];
        let k_rows = &vk.data()[b * block * dh..(b + 1) * block * dh];
        let v_rows = &vv.data()[b * block * dh..(b + 1) * block * dh];
        let scores_block = &mut attn[b * block * block..(b + 1) * block * block];
        for i in 0..block {
            for j in 0..block {
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q_rows[i * dh + t] * k_rows[j * dh + t];
                }
                scores_block[i * block + j] = dot * scale;
            }
        }
        let soft = k::softmax_rows(scores_block, block, block);
        scores_block.copy_from_slice(&soft);
        let o = &mut out[b * block * dh..(b + 1) * block * dh];
        for i in 0..block {
            for j in 0..block {
                let a = soft[i * block + j];
                for t in 0..dh {
                    o[i * dh + t] += a * v_rows[j * dh + t];
                }
            }
        }
    }
    let out = NdArray::new_unchecked(&[rows, dh], out);
    q.tape().record(
        &[q, k, v],
        out,
        Box::new(move |g, saved, needs| {
            let (vq, vk, vv) = (&saved.parents[0], &saved.parents[1], &saved.parents[2]);
            let mut gq = vec![0.0; rows * dh];
            let mut gk = vec![0.0; rows * dh];
            let mut gv = vec![0.0; rows * dh];
            for b in 0..n_blocks {
                let base = b * block * dh;
                let q_rows = &vq.data()[base..base + block * dh];
                let k_rows = &vk.data()[base..base + block * dh];
                let v_rows = &vv.data()[base..base + block * dh];
                let a = &attn[b * block * block..(b + 1) * block * block];
                let g_rows = &g[base..base + block * dh];
                // gv = a^T g
                for j in 0..block {
                    for i in 0..block {
                        let aij = a[i * block + j];
                        for t in 0..dh {
                            gv[base + j * dh + t] += aij * g_rows[i * dh + t];
                        }
                    }
                }
                // ga = g v^T, then back through the softmax and the scores
                let mut ga = vec![0.0; block * block];
                for i in 0..block {
                    for j in 0..block {
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += g_rows[i * dh + t] * v_rows[j * dh + t];
                        }
                        ga[i * block + j] = dot;
                    }
                }
                let gs = k::softmax_rows_bwd(&ga, a, block, block);
                for i in 0..block {
                    for j in 0..block {
                        let gsij = gs[i * block + j] * scale;
                        for t in 0..dh {
                            gq[base + i * dh + t] += gsij * k_rows[j * dh + t];
                            gk[base + j * dh + t] += gsij * q_rows[i * dh + t];
                        }
                    }
                }
            }
            vec![
                needs[0].then_some(gq),
                needs[1].then_some(gk),
                needs[2].then_some(gv),
            ]
        }),
    )
}

/// Per-row layer normalization of `[n,c]` tokens with affine parameters.
pub fn layer_norm_rows(x: &Var, gamma: &Var, beta: &Var) -> Var {
    let vx = x.value();
    assert_eq!(vx.shape().len(), 2);
    let (n, c) = (vx.shape()[0], vx.shape()[1]);
    let (vg, vb) = (gamma.value(), beta.value());
    assert_eq!(vg.shape(), &[c], "layer_norm_rows: gamma width mismatch");
    assert_eq!(vb.shape(), &[c], "layer_norm_rows: beta width mismatch");
    let (data, means, inv_stds) = k::layer_norm_rows(vx.data(), n, c, vg.data(), vb.data());
    let out = NdArray::new_unchecked(&[n, c], data);
    x.tape().record(
        &[x, gamma, beta],
        out,
        Box::new(move |g, saved, needs| {
            let (vx, vg) = (&saved.parents[0], &saved.parents[1]);
            let (gx, ggamma, gbeta) =
                k::layer_norm_rows_bwd(g, vx.data(), n, c, vg.data(), &means, &inv_stds);
            vec![
                needs[0].then_some(gx),
                needs[1].then_some(ggamma),
                needs[2].then_some(gbeta),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::gradcheck::{check_gradients, CheckConfig};
    use crate::num::tape::Tape;
    use crate::num::NdArray;
    use rand_xoshiro::rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn randu(seed: u64, shape: &[usize], lo: f64, hi: f64) -> NdArray {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| lo + (hi - lo) * ((r.next_u64() >> 11) as f64 / (1u64 << 53) as f64))
            .collect();
        NdArray::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let inputs = vec![
            randu(1, &[2, 5, 5], -1.0, 1.0),
            randu(2, &[3, 2, 3, 3], -1.0, 1.0),
            randu(3, &[3], -1.0, 1.0),
        ];
        let report = check_gradients(
            &inputs,
            |_, vars| {
                sum_all(&conv2d(&vars[0], &vars[1], Some(&vars[2]), 1, 1).unwrap())
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "conv2d rel err {}", report.max_rel_err);
    }

    #[test]
    fn strided_conv_gradients() {
        let inputs = vec![randu(4, &[2, 6, 6], -1.0, 1.0), randu(5, &[2, 2, 3, 3], -1.0, 1.0)];
        let report = check_gradients(
            &inputs,
            |_, vars| sum_all(&abs(&conv2d(&vars[0], &vars[1], None, 2, 1).unwrap())),
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        // keep fractional parts away from 0/1 so the h-step stays on one cell
        let src = randu(6, &[2, 4, 4], -1.0, 1.0);
        let coords = randu(7, &[2, 3, 3], 0.2, 2.8);
        let report = check_gradients(
            &[src, coords],
            |_, vars| sum_all(&mul(&bilinear_sample(&vars[0], &vars[1]), &bilinear_sample(&vars[0], &vars[1]))),
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-6, "bilinear rel err {}", report.max_rel_err);
    }

    #[test]
    fn activation_gradients() {
        let x = randu(8, &[17], -2.0, 2.0);
        for (name, f) in [
            ("tanh", tanh as fn(&Var) -> Var),
            ("sigmoid", sigmoid),
            ("gelu", gelu),
        ] {
            let report = check_gradients(
                std::slice::from_ref(&x),
                move |_, vars| sum_all(&mul(&f(&vars[0]), &f(&vars[0]))),
                &CheckConfig::default(),
            );
            assert!(report.max_rel_err < 1e-6, "{name} rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn softmax_and_normalize_gradients() {
        let x = randu(9, &[4, 6], -1.5, 1.5);
        let report = check_gradients(
            std::slice::from_ref(&x),
            |tape, vars| {
                let s = softmax(&vars[0], 1);
                let w = tape.constant(randu(100, &[4, 6], -1.0, 1.0));
                sum_all(&mul(&s, &w))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "softmax rel err {}", report.max_rel_err);

        let report = check_gradients(
            &[x],
            |tape, vars| {
                let y = l2_normalize(&vars[0], 0);
                let w = tape.constant(randu(101, &[4, 6], -1.0, 1.0));
                sum_all(&mul(&y, &w))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "l2_normalize rel err {}", report.max_rel_err);
    }

    #[test]
    fn unfold_center_extraction_recovers_input() {
        let x = randu(10, &[2, 5, 4], -1.0, 1.0);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let u = unfold(&v, 3, 1);
        // center tap rows: ci*9 + 4
        let n = 5 * 4;
        let uv = u.value();
        for ci in 0..2 {
            let row = ci * 9 + 4;
            let got = &uv.data()[row * n..(row + 1) * n];
            assert_eq!(got, &x.data()[ci * n..(ci + 1) * n]);
        }
    }

    #[test]
    fn unfold_and_structural_op_gradients() {
        let x = randu(11, &[2, 4, 4], -1.0, 1.0);
        let report = check_gradients(
            &[x],
            |tape, vars| {
                let u = unfold(&vars[0], 3, 1);
                let w = tape.constant(randu(102, &[18, 16], -1.0, 1.0));
                sum_all(&mul(&u, &w))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-6, "unfold rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(NdArray::zeros(&[2, 3]));
        let b = tape.constant(NdArray::zeros(&[4, 2]));
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "message: {msg}");
    }

    #[test]
    fn conv2d_reports_both_shapes() {
        let tape = Tape::new();
        let x = tape.constant(NdArray::zeros(&[2, 5, 5]));
        let w = tape.constant(NdArray::zeros(&[3, 4, 3, 3]));
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 5, 5]") && msg.contains("[3, 4, 3, 3]"), "message: {msg}");
    }

    #[test]
    fn layer_norm_and_misc_gradients() {
        let inputs = vec![
            randu(12, &[5, 4], -1.0, 1.0),
            randu(13, &[4], 0.5, 1.5),
            randu(14, &[4], -0.5, 0.5),
        ];
        let report = check_gradients(
            &inputs,
            |_, vars| {
                let y = layer_norm_rows(&vars[0], &vars[1], &vars[2]);
                sum_all(&mul(&y, &y))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "layer_norm rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_structural_gradients() {
        // exercise pad/crop/upsample/gather/concat/slice/transpose in one graph
        let x = randu(15, &[2, 3, 3], -1.0, 1.0);
        let report = check_gradients(
            &[x],
            |tape, vars| {
                let p = pad_hw(&vars[0], 1, 1);
                let up = nearest_upsample2x(&p);
                let cr = crop_hw(&up, 6, 6);
                let flat = reshape(&cr, &[2, 36]);
                let t = transpose2d(&flat);
                let g = gather_rows(&t, &[0, 5, 9, 9]);
                let left = slice_cols(&g, 0, 1);
                let right = slice_cols(&g, 1, 1);
                let cat = concat_cols(&[&left, &right]);
                let m = tape.constant(randu(103, &[4, 2], -1.0, 1.0));
                mean_all(&mul(&cat, &m))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-6, "structural rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_input_grad_is_adjoint_and_differentiable() {
        // value check: <g, conv(x,w)> == <conv2d_input_grad(g,w), x>
        let x = randu(16, &[2, 5, 5], -1.0, 1.0);
        let w = randu(17, &[3, 2, 3, 3], -1.0, 1.0);
        let g = randu(18, &[3, 5, 5], -1.0, 1.0);
        let tape = Tape::new();
        let (xv, wv, gv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(g.clone()),
        );
        let y = conv2d(&xv, &wv, None, 1, 1).unwrap();
        let lhs = sum_all(&mul(&y, &gv)).item();
        let back = conv2d_input_grad(&gv, &wv, 1, 1, 5, 5);
        let rhs = sum_all(&mul(&back, &xv)).item();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        let report = check_gradients(
            &[g, w],
            |_, vars| {
                let back = conv2d_input_grad(&vars[0], &vars[1], 1, 1, 5, 5);
                sum_all(&mul(&back, &back))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "conv_input_grad rel err {}", report.max_rel_err);
    }

    #[test]
    fn scale_and_norm_gradients() {
        let inputs = vec![randu(19, &[3, 2, 2], -1.0, 1.0), randu(20, &[2, 2], 0.1, 1.0)];
        let report = check_gradients(
            &inputs,
            |_, vars| {
                let y = scale_by_map(&vars[0], &vars[1]);
                let norms = channel_l2_norms(&y);
                sum_all(&norms)
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "scale/norm rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_rows_in_unit_interval() {
        let x = randu(21, &[6, 5], -3.0, 3.0);
        let tape = Tape::new();
        let s = softmax(&tape.constant(x), 1).value();
        for r in 0..6 {
            let sum: f64 = s.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
