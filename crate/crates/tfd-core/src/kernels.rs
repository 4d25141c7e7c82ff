//! Shared numeric kernels behind the tensor ops. Forward and backward halves
//! live side by side; all loops have a fixed summation order so results are
//! bit-reproducible run to run.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Valid output-column range for one kernel column: ox such that
/// 0 <= ox*stride + kw - pad < input_w.
#[inline]
fn ox_range(ow: usize, input_w: usize, stride: usize, kw: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kw {
        (pad - kw).div_ceil(stride)
    } else {
        0
    };
    let hi = if input_w + pad > kw {
        (((input_w + pad - kw - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_out_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if w.h != w.w {
        return Err(Error::invalid(alloc::format!(
            "conv kernel must be square, got {}x{}",
            w.h,
            w.w
        )));
    }
    if w.h % 2 == 0 {
        return Err(Error::invalid(alloc::format!("conv kernel size {} must be odd", w.h)));
    }
    if w.c != x.c {
        return Err(Error::shape("conv2d channel mismatch (input vs kernel)", &x, &w));
    }
    if x.h + 2 * pad < w.h || x.w + 2 * pad < w.w {
        return Err(Error::invalid(alloc::format!(
            "conv input {x} too small for kernel {}x{} with pad {pad}",
            w.h,
            w.w
        )));
    }
    Ok(Shape::new(
        x.n,
        w.n,
        (x.h + 2 * pad - w.h) / stride + 1,
        (x.w + 2 * pad - w.w) / stride + 1,
    ))
}

/// Cross-correlation (no kernel flip), zero padding.
pub(crate) fn conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_out_shape(xs, ws, stride, pad)?;
    let (cin, k) = (ws.c, ws.h);
    let (oh, ow) = (os.h, os.w);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * oh * ow;
            if let Some(bias) = b {
                let bv = bias.data()[co];
                out[obase..obase + oh * ow].fill(bv);
            }
            for ci in 0..cin {
                let xbase = (n * cin + ci) * xs.h * xs.w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[wbase + kh * k + kw];
                        let (ox0, ox1) = ox_range(ow, xs.w, stride, kw, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let xslice = &xd[xrow + (ox0 + kw - pad)..xrow + (ox1 + kw - pad)];
                                let oslice = &mut out[orow + ox0..orow + ox1];
                                for (o, &xv) in oslice.iter_mut().zip(xslice) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kw - pad;
                                    out[orow + ox] += wv * xd[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

/// Gradient w.r.t. the conv input.
pub(crate) fn conv2d_bwd_x(g: &Tensor, w: &Tensor, xs: Shape, stride: usize, pad: usize) -> Tensor {
    let ws = w.shape();
    let gs = g.shape();
    let (cin, k) = (ws.c, ws.h);
    let (oh, ow) = (gs.h, gs.w);
    let mut gx = vec![0.0; xs.numel()];
    let gd = g.data();
    let wd = w.data();
    for n in 0..xs.n {
        for co in 0..gs.c {
            let obase = (n * gs.c + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * xs.h * xs.w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[wbase + kh * k + kw];
                        let (ox0, ox1) = ox_range(ow, xs.w, stride, kw, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let xslice = &mut gx[xrow + (ox0 + kw - pad)..xrow + (ox1 + kw - pad)];
                                let oslice = &gd[orow + ox0..orow + ox1];
                                for (xg, &gv) in xslice.iter_mut().zip(oslice) {
                                    *xg += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kw - pad;
                                    gx[xrow + ix] += wv * gd[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(xs, gx).expect("gx buffer sized from xs")
}

/// Gradient w.r.t. the conv kernel.
pub(crate) fn conv2d_bwd_w(g: &Tensor, x: &Tensor, ws: Shape, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let gs = g.shape();
    let (cin, k) = (ws.c, ws.h);
    let (oh, ow) = (gs.h, gs.w);
    let mut gw = vec![0.0; ws.numel()];
    let gd = g.data();
    let xd = x.data();
    for n in 0..xs.n {
        for co in 0..gs.c {
            let obase = (n * gs.c + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * xs.h * xs.w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let (ox0, ox1) = ox_range(ow, xs.w, stride, kw, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let xslice = &xd[xrow + (ox0 + kw - pad)..xrow + (ox1 + kw - pad)];
                                let oslice = &gd[orow + ox0..orow + ox1];
                                for (&xv, &gv) in xslice.iter().zip(oslice) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kw - pad;
                                    acc += xd[xrow + ix] * gd[orow + ox];
                                }
                            }
                        }
                        gw[wbase + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(ws, gw).expect("gw buffer sized from ws")
}

/// Gradient w.r.t. the conv bias: sum over batch and space per out channel.
pub(crate) fn conv2d_bwd_b(g: &Tensor) -> Tensor {
    let gs = g.shape();
    let mut gb = vec![0.0; gs.c];
    for n in 0..gs.n {
        for c in 0..gs.c {
            gb[c] += g.plane(n, c).iter().sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, gs.c, 1, 1), gb).expect("bias shape")
}

/// Depthwise conv: channel c sees only kernel c. Kernel shape C x 1 x k x k,
/// stride 1, pad (k-1)/2.
pub(crate) fn depthwise_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::shape("depthwise kernel channel count", &xs, &ws));
    }
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::invalid("depthwise kernel must be square and odd"));
    }
    let k = ws.h;
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; xs.numel()];
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.h * xs.w;
            if let Some(bias) = b {
                out[base..base + xs.h * xs.w].fill(bias.data()[c]);
            }
            let wbase = c * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = wd[wbase + kh * k + kw];
                    let (ox0, ox1) = ox_range(xs.w, xs.w, 1, kw, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..xs.h {
                        let iy = (oy + kh) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let xrow = base + iy as usize * xs.w;
                        let orow = base + oy * xs.w;
                        let xslice = &xd[xrow + (ox0 + kw - pad)..xrow + (ox1 + kw - pad)];
                        for (i, &xv) in xslice.iter().enumerate() {
                            out[orow + ox0 + i] += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(xs, out)
}

pub(crate) fn depthwise_bwd(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let pad = (k - 1) / 2;
    let mut gx = vec![0.0; xs.numel()];
    let mut gw = vec![0.0; ws.numel()];
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.h * xs.w;
            let wbase = c * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = wd[wbase + kh * k + kw];
                    let (ox0, ox1) = ox_range(xs.w, xs.w, 1, kw, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..xs.h {
                        let iy = (oy + kh) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let xrow = base + iy as usize * xs.w;
                        let orow = base + oy * xs.w;
                        let ix_lo = xrow + ox0 + kw - pad;
                        for i in 0..(ox1 - ox0) {
                            let gv = gd[orow + ox0 + i];
                            gx[ix_lo + i] += wv * gv;
                            acc += xd[ix_lo + i] * gv;
                        }
                    }
                    gw[wbase + kh * k + kw] += acc;
                }
            }
        }
    }
    (
        Tensor::from_vec(xs, gx).expect("gx shape"),
        Tensor::from_vec(ws, gw).expect("gw shape"),
    )
}

/// Per-sample normalization over (C,H,W) followed by per-channel affine.
/// Returns (y, per-sample mean, per-sample 1/sqrt(var + eps)).
pub(crate) fn layer_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let m = xs.c * xs.h * xs.w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xs.numel()];
    let mut means = vec![0.0; xs.n];
    let mut invs = vec![0.0; xs.n];
    let hw = xs.h * xs.w;
    for n in 0..xs.n {
        let base = n * m;
        let mean = xd[base..base + m].iter().sum::<f64>() / m as f64;
        let var = xd[base..base + m]
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / m as f64;
        let inv = 1.0 / crate::math::sqrt(var + eps);
        means[n] = mean;
        invs[n] = inv;
        for c in 0..xs.c {
            let (gc, bc) = (gd[c], bd[c]);
            for i in 0..hw {
                let idx = base + c * hw + i;
                out[idx] = gc * (xd[idx] - mean) * inv + bc;
            }
        }
    }
    (
        Tensor::from_vec(xs, out).expect("layer norm shape"),
        means,
        invs,
    )
}

pub(crate) fn layer_norm_bwd(
    g: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    means: &[f64],
    invs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let m = (xs.c * xs.h * xs.w) as f64;
    let hw = xs.h * xs.w;
    let xd = x.data();
    let gd = g.data();
    let gad = gamma.data();
    let mut gx = vec![0.0; xs.numel()];
    let mut ggamma = vec![0.0; xs.c];
    let mut gbeta = vec![0.0; xs.c];
    for n in 0..xs.n {
        let base = n * xs.c * hw;
        let (mean, inv) = (means[n], invs[n]);
        // Accumulate the two per-sample reductions of the LN backward formula.
        let mut sum_gg = 0.0; // sum of gamma*g
        let mut sum_ggx = 0.0; // sum of gamma*g*xhat
        for c in 0..xs.c {
            let gc = gad[c];
            for i in 0..hw {
                let idx = base + c * hw + i;
                let xhat = (xd[idx] - mean) * inv;
                let gg = gc * gd[idx];
                sum_gg += gg;
                sum_ggx += gg * xhat;
                ggamma[c] += gd[idx] * xhat;
                gbeta[c] += gd[idx];
            }
        }
        for c in 0..xs.c {
            let gc = gad[c];
            for i in 0..hw {
                let idx = base + c * hw + i;
                let xhat = (xd[idx] - mean) * inv;
                gx[idx] = (gc * gd[idx] - sum_gg / m - xhat * sum_ggx / m) * inv;
            }
        }
    }
    (
        Tensor::from_vec(xs, gx).expect("gx shape"),
        Tensor::from_vec(Shape::new(1, xs.c, 1, 1), ggamma).expect("ggamma shape"),
        Tensor::from_vec(Shape::new(1, xs.c, 1, 1), gbeta).expect("gbeta shape"),
    )
}

/// Global average pooling to N x C x 1 x 1.
pub(crate) fn gap_fwd(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let hw = (xs.h * xs.w) as f64;
    let mut out = vec![0.0; xs.n * xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            out[n * xs.c + c] = x.plane(n, c).iter().sum::<f64>() / hw;
        }
    }
    Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), out).expect("gap shape")
}

pub(crate) fn gap_bwd(g: &Tensor, xs: Shape) -> Tensor {
    let hw = (xs.h * xs.w) as f64;
    let gd = g.data();
    let mut gx = vec![0.0; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let v = gd[n * xs.c + c] / hw;
            let base = (n * xs.c + c) * xs.h * xs.w;
            gx[base..base + xs.h * xs.w].fill(v);
        }
    }
    Tensor::from_vec(xs, gx).expect("gap bwd shape")
}

/// Multiply each channel plane by a per-(sample, channel) scalar.
pub(crate) fn channel_scale_fwd(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ss = s.shape();
    if ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1 {
        return Err(Error::shape("channel_scale", &xs, &ss));
    }
    let mut out = vec![0.0; xs.numel()];
    let xd = x.data();
    let sd = s.data();
    let hw = xs.h * xs.w;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let k = sd[n * xs.c + c];
            let base = (n * xs.c + c) * hw;
            for i in 0..hw {
                out[base + i] = k * xd[base + i];
            }
        }
    }
    Tensor::from_vec(xs, out)
}

pub(crate) fn channel_scale_bwd(g: &Tensor, x: &Tensor, s: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let hw = xs.h * xs.w;
    let gd = g.data();
    let xd = x.data();
    let sd = s.data();
    let mut gx = vec![0.0; xs.numel()];
    let mut gs = vec![0.0; xs.n * xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let k = sd[n * xs.c + c];
            let base = (n * xs.c + c) * hw;
            let mut acc = 0.0;
            for i in 0..hw {
                gx[base + i] = k * gd[base + i];
                acc += gd[base + i] * xd[base + i];
            }
            gs[n * xs.c + c] = acc;
        }
    }
    (
        Tensor::from_vec(xs, gx).expect("gx shape"),
        Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), gs).expect("gs shape"),
    )
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn nearest_up2_fwd(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let ibase = (n * xs.c + c) * xs.h * xs.w;
            let obase = (n * xs.c + c) * os.h * os.w;
            for y in 0..xs.h {
                for xcol in 0..xs.w {
                    let v = xd[ibase + y * xs.w + xcol];
                    let o = obase + 2 * y * os.w + 2 * xcol;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + os.w] = v;
                    out[o + os.w + 1] = v;
                }
            }
        }
    }
    Tensor::from_vec(os, out).expect("up2 shape")
}

pub(crate) fn nearest_up2_bwd(g: &Tensor, xs: Shape) -> Tensor {
    let gs = g.shape();
    let gd = g.data();
    let mut gx = vec![0.0; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let ibase = (n * xs.c + c) * xs.h * xs.w;
            let obase = (n * xs.c + c) * gs.h * gs.w;
            for y in 0..xs.h {
                for xcol in 0..xs.w {
                    let o = obase + 2 * y * gs.w + 2 * xcol;
                    gx[ibase + y * xs.w + xcol] =
                        gd[o] + gd[o + 1] + gd[o + gs.w] + gd[o + gs.w + 1];
                }
            }
        }
    }
    Tensor::from_vec(xs, gx).expect("up2 bwd shape")
}

/// Channel concatenation [a, b] along C.
pub(crate) fn concat_c_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape("concat channels", &sa, &sb));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = vec![0.0; os.numel()];
    let hw = sa.h * sa.w;
    for n in 0..sa.n {
        for c in 0..sa.c {
            let dst = (n * os.c + c) * hw;
            out[dst..dst + hw].copy_from_slice(a.plane(n, c));
        }
        for c in 0..sb.c {
            let dst = (n * os.c + sa.c + c) * hw;
            out[dst..dst + hw].copy_from_slice(b.plane(n, c));
        }
    }
    Tensor::from_vec(os, out)
}

/// Channel slice [lo, hi).
pub(crate) fn slice_c_fwd(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let xs = x.shape();
    if lo >= hi || hi > xs.c {
        return Err(Error::invalid(alloc::format!(
            "channel slice [{lo}, {hi}) out of range for {} channels",
            xs.c
        )));
    }
    let os = Shape::new(xs.n, hi - lo, xs.h, xs.w);
    let mut out = vec![0.0; os.numel()];
    let hw = xs.h * xs.w;
    for n in 0..xs.n {
        for c in lo..hi {
            let dst = (n * os.c + (c - lo)) * hw;
            out[dst..dst + hw].copy_from_slice(x.plane(n, c));
        }
    }
    Tensor::from_vec(os, out)
}

pub(crate) fn slice_c_bwd(g: &Tensor, xs: Shape, lo: usize) -> Tensor {
    let gs = g.shape();
    let mut gx = vec![0.0; xs.numel()];
    let hw = xs.h * xs.w;
    for n in 0..xs.n {
        for c in 0..gs.c {
            let dst = (n * xs.c + lo + c) * hw;
            gx[dst..dst + hw].copy_from_slice(g.plane(n, c));
        }
    }
    Tensor::from_vec(xs, gx).expect("slice bwd shape")
}

/// Per-channel broadcast add of a 1 x C x 1 x 1 bias.
pub(crate) fn bias_add_fwd(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let bs = b.shape();
    if bs.n != 1 || bs.c != xs.c || bs.h != 1 || bs.w != 1 {
        return Err(Error::shape("bias_add", &xs, &bs));
    }
    let bd = b.data();
    let mut out = x.data().to_vec();
    let hw = xs.h * xs.w;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * hw;
            let bv = bd[c];
            for v in &mut out[base..base + hw] {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(xs, out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub(crate) fn bilinear_resize_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    for oy in 0..dh {
        let fy = (oy as f64 + 0.5) * sh as f64 / dh as f64 - 0.5;
        let y0 = crate::math::floor(fy);
        let ty = fy - y0;
        let y0i = (y0 as isize).clamp(0, sh as isize - 1) as usize;
        let y1i = ((y0 as isize) + 1).clamp(0, sh as isize - 1) as usize;
        for ox in 0..dw {
            let fx = (ox as f64 + 0.5) * sw as f64 / dw as f64 - 0.5;
            let x0 = crate::math::floor(fx);
            let tx = fx - x0;
            let x0i = (x0 as isize).clamp(0, sw as isize - 1) as usize;
            let x1i = ((x0 as isize) + 1).clamp(0, sw as isize - 1) as usize;
            let v00 = src[y0i * sw + x0i];
            let v01 = src[y0i * sw + x1i];
            let v10 = src[y1i * sw + x0i];
            let v11 = src[y1i * sw + x1i];
            out[oy * dw + ox] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    out
}
