//! 2D discrete Fourier transforms with real/imaginary decomposition.
//!
//! Convention: unnormalized forward, 1/(HW) on the inverse, DC at index
//! (0, 0). Power-of-two extents take an iterative radix-2 path; everything
//! else falls back to a table-driven naive transform. Both paths agree to
//! machine precision and the pair is linear, which is what lets degraded
//! spectra split into content plus noise terms.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Paired real/imaginary planes of a 2D DFT, one pair per (sample, channel).
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn shape(&self) -> Shape {
        self.re.shape()
    }

    /// sqrt(re^2 + im^2) per bin.
    pub fn magnitude(&self) -> Tensor {
        self.re
            .zip(&self.im, "magnitude", |r, i| math::sqrt(r * r + i * i))
            .expect("re/im shapes agree")
    }
}

/// Twiddle-factor plan for one axis length and transform sign.
struct FftPlan {
    n: usize,
    pow2: bool,
    /// exp(sign * 2*pi*i * j / n) for j in 0..n.
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
}

impl FftPlan {
    fn new(n: usize, sign: f64) -> Self {
        let mut tw_re = vec![0.0; n];
        let mut tw_im = vec![0.0; n];
        for j in 0..n {
            let angle = sign * 2.0 * math::PI * j as f64 / n as f64;
            tw_re[j] = math::cos(angle);
            tw_im[j] = math::sin(angle);
        }
        FftPlan {
            n,
            pow2: n.is_power_of_two(),
            tw_re,
            tw_im,
        }
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64]) {
        if self.pow2 {
            self.radix2(re, im);
        } else {
            self.naive(re, im);
        }
    }

    fn radix2(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        // Bit-reversal permutation.
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = (self.tw_re[k * step], self.tw_im[k * step]);
                    let (a, b) = (start + k, start + k + half);
                    let tr = wr * re[b] - wi * im[b];
                    let ti = wr * im[b] + wi * re[b];
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }

    fn naive(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for (k, (or, oi)) in out_re.iter_mut().zip(out_im.iter_mut()).enumerate() {
            let mut sr = 0.0;
            let mut si = 0.0;
            for j in 0..n {
                let idx = (j * k) % n;
                let (wr, wi) = (self.tw_re[idx], self.tw_im[idx]);
                sr += re[j] * wr - im[j] * wi;
                si += re[j] * wi + im[j] * wr;
            }
            *or = sr;
            *oi = si;
        }
        re.copy_from_slice(&out_re);
        im.copy_from_slice(&out_im);
    }
}

/// Complex 2D transform of one H x W plane, rows then columns.
fn fft2_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    let row_plan = FftPlan::new(w, sign);
    for y in 0..h {
        row_plan.transform(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
    }
    let col_plan = FftPlan::new(h, sign);
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        col_plan.transform(&mut col_re, &mut col_im);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }
}

/// Unnormalized forward 2D DFT of a real tensor.
pub fn dft2(x: &Tensor) -> Spectrum {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut re_out = Tensor::zeros(s);
    let mut im_out = Tensor::zeros(s);
    {
        let red = re_out.data_mut();
        red.copy_from_slice(x.data());
        let imd = im_out.data_mut();
        for map in 0..s.n * s.c {
            fft2_plane(
                &mut red[map * hw..(map + 1) * hw],
                &mut imd[map * hw..(map + 1) * hw],
                s.h,
                s.w,
                -1.0,
            );
        }
    }
    Spectrum {
        re: re_out,
        im: im_out,
    }
}

/// Inverse 2D DFT with the 1/(HW) factor; returns the real part.
pub fn idft2(spec: &Spectrum) -> Tensor {
    let s = spec.shape();
    let hw = s.h * s.w;
    let norm = 1.0 / hw as f64;
    let mut re = spec.re.data().to_vec();
    let mut im = spec.im.data().to_vec();
    for map in 0..s.n * s.c {
        fft2_plane(
            &mut re[map * hw..(map + 1) * hw],
            &mut im[map * hw..(map + 1) * hw],
            s.h,
            s.w,
            1.0,
        );
    }
    for v in &mut re {
        *v *= norm;
    }
    Tensor::from_vec(s, re).expect("idft2 shape")
}

/// Stacked-layout forward DFT: N x C x H x W -> N x 2C x H x W with the real
/// block in channels [0, C) and the imaginary block in [C, 2C).
pub(crate) fn dft2_stacked(x: &Tensor) -> Tensor {
    let spec = dft2(x);
    kernels::concat_c_fwd(&spec.re, &spec.im).expect("stack shapes agree")
}

pub(crate) fn split_stacked(s: &Tensor) -> Result<Spectrum> {
    let ss = s.shape();
    if ss.c % 2 != 0 {
        return Err(Error::invalid(alloc::format!(
            "stacked spectrum needs even channel count, got {ss}"
        )));
    }
    let c = ss.c / 2;
    Ok(Spectrum {
        re: kernels::slice_c_fwd(s, 0, c)?,
        im: kernels::slice_c_fwd(s, c, 2 * c)?,
    })
}

/// Stacked-layout inverse DFT back to N x C x H x W.
pub(crate) fn idft2_stacked(s: &Tensor) -> Result<Tensor> {
    Ok(idft2(&split_stacked(s)?))
}

/// Adjoint of `dft2_stacked`: cotangent of the stacked spectrum back to the
/// input. Equals the real part of the unnormalized +i transform of the
/// cotangent pair.
pub(crate) fn dft2_adjoint(g: &Tensor) -> Result<Tensor> {
    let spec = split_stacked(g)?;
    let s = spec.shape();
    let hw = s.h * s.w;
    let mut re = spec.re.data().to_vec();
    let mut im = spec.im.data().to_vec();
    for map in 0..s.n * s.c {
        fft2_plane(
            &mut re[map * hw..(map + 1) * hw],
            &mut im[map * hw..(map + 1) * hw],
            s.h,
            s.w,
            1.0,
        );
    }
    Tensor::from_vec(s, re)
}

/// Adjoint of `idft2_stacked`: real cotangent to a stacked spectrum
/// cotangent, carrying the inverse's 1/(HW) factor.
pub(crate) fn idft2_adjoint(g: &Tensor) -> Tensor {
    let s = g.shape();
    let hw = s.h * s.w;
    let norm = 1.0 / hw as f64;
    let mut re = g.data().to_vec();
    let mut im = vec![0.0; g.numel()];
    for map in 0..s.n * s.c {
        fft2_plane(
            &mut re[map * hw..(map + 1) * hw],
            &mut im[map * hw..(map + 1) * hw],
            s.h,
            s.w,
            -1.0,
        );
    }
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v *= norm;
    }
    let re_t = Tensor::from_vec(s, re).expect("adjoint shape");
    let im_t = Tensor::from_vec(s, im).expect("adjoint shape");
    kernels::concat_c_fwd(&re_t, &im_t).expect("stack shapes agree")
}

/// How learnable filters act on a spectrum.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FilterMode {
    /// Per-bin multiplicative weights on each plane.
    Hadamard,
    /// Per-channel 3x3 convolution over each plane followed by ReLU.
    Conv3,
}

/// Apply learnable filters to the real and imaginary planes.
///
/// Hadamard mode: `wr`, `wi` are 1 x C x H x W weights, re' = wr o re,
/// im' = wi o im. Conv3 mode: `wr`, `wi` are C x 1 x 3 x 3 per-channel
/// kernels, re' = relu(conv(re, wr)), im' = relu(conv(im, wi)).
pub fn spectral_filter(s: &Spectrum, wr: &Tensor, wi: &Tensor, mode: FilterMode) -> Result<Spectrum> {
    let ss = s.shape();
    match mode {
        FilterMode::Hadamard => {
            let want = Shape::new(1, ss.c, ss.h, ss.w);
            if wr.shape() != want || wi.shape() != want {
                return Err(Error::shape("hadamard filter", &want, &wr.shape()));
            }
            let apply = |plane: &Tensor, w: &Tensor| -> Tensor {
                let mut out = Tensor::zeros(ss);
                let per = w.numel();
                {
                    let od = out.data_mut();
                    let pd = plane.data();
                    let wd = w.data();
                    for n in 0..ss.n {
                        for i in 0..per {
                            od[n * per + i] = pd[n * per + i] * wd[i];
                        }
                    }
                }
                out
            };
            Ok(Spectrum {
                re: apply(&s.re, wr),
                im: apply(&s.im, wi),
            })
        }
        FilterMode::Conv3 => {
            let re = kernels::depthwise_fwd(&s.re, wr, None)?.map(|v| v.max(0.0));
            let im = kernels::depthwise_fwd(&s.im, wi, None)?.map(|v| v.max(0.0));
            Ok(Spectrum { re, im })
        }
    }
}

/// Mean Fourier magnitude per normalized-radial-frequency bin.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    /// (normalized frequency at the bin's upper edge, mean magnitude).
    pub bins: Vec<(f64, f64)>,
    /// Number of (u, v) sites contributing to each bin.
    pub counts: Vec<usize>,
}

/// Signed normalized frequency for index u of an axis of length n, in
/// [-0.5, 0.5).
fn signed_freq(u: usize, n: usize) -> f64 {
    if u <= (n - 1) / 2 {
        u as f64 / n as f64
    } else {
        u as f64 / n as f64 - 1.0
    }
}

/// Radial index in [0, 1] for one (u, v) site.
pub(crate) fn radial_coord(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fu = signed_freq(u, h);
    let fv = signed_freq(v, w);
    math::sqrt(fu * fu + fv * fv) / math::sqrt(0.5)
}

/// Bin magnitudes by radius. Bin 0 holds exactly the DC term; bins 1..B
/// partition (0, 1] uniformly, so every (u, v) lands in exactly one bin.
pub fn radial_profile(s: &Spectrum, bins: usize) -> Result<RadialProfile> {
    if bins < 2 {
        return Err(Error::invalid("radial profile needs at least 2 bins"));
    }
    let ss = s.shape();
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let red = s.re.data();
    let imd = s.im.data();
    let hw = ss.h * ss.w;
    for map in 0..ss.n * ss.c {
        for u in 0..ss.h {
            for v in 0..ss.w {
                let idx = map * hw + u * ss.w + v;
                let mag = math::sqrt(red[idx] * red[idx] + imd[idx] * imd[idx]);
                let bin = if u == 0 && v == 0 {
                    0
                } else {
                    let r = radial_coord(u, v, ss.h, ss.w);
                    // r in (0, 1]; ceil maps it to 1..=bins-1.
                    (math::ceil(r * (bins - 1) as f64) as usize).clamp(1, bins - 1)
                };
                sums[bin] += mag;
                counts[bin] += 1;
            }
        }
    }
    let bins_out = sums
        .iter()
        .zip(counts.iter())
        .enumerate()
        .map(|(b, (&s, &c))| {
            let freq = b as f64 / (bins - 1) as f64;
            (freq, if c > 0 { s / c as f64 } else { 0.0 })
        })
        .collect();
    Ok(RadialProfile {
        bins: bins_out,
        counts,
    })
}

/// Spatial energy and spectral energy / (HW); equal by Parseval.
pub fn parseval_check(x: &Tensor) -> (f64, f64) {
    let spatial: f64 = x.data().iter().map(|&v| v * v).sum();
    let spec = dft2(x);
    let s = x.shape();
    let spectral: f64 = spec
        .re
        .data()
        .iter()
        .zip(spec.im.data().iter())
        .map(|(&r, &i)| r * r + i * i)
        .sum::<f64>()
        / (s.h * s.w) as f64;
    (spatial, spectral)
}

/// Naive O((HW)^2) double-sum DFT of a single-map tensor; the independent
/// oracle used by tests and the gradcheck command.
pub fn dft2_reference(x: &Tensor) -> Spectrum {
    let s = x.shape();
    let mut re = Tensor::zeros(s);
    let mut im = Tensor::zeros(s);
    let hw = s.h * s.w;
    {
        let red = re.data_mut();
        let imd = im.data_mut();
        let xd = x.data();
        for map in 0..s.n * s.c {
            let base = map * hw;
            for ku in 0..s.h {
                for kv in 0..s.w {
                    let mut sr = 0.0;
                    let mut si = 0.0;
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let angle = -2.0
                                * math::PI
                                * ((ku * y) as f64 / s.h as f64 + (kv * xx) as f64 / s.w as f64);
                            let v = xd[base + y * s.w + xx];
                            sr += v * math::cos(angle);
                            si += v * math::sin(angle);
                        }
                    }
                    red[base + ku * s.w + kv] = sr;
                    imd[base + ku * s.w + kv] = si;
                }
            }
        }
    }
    Spectrum { re, im }
}
