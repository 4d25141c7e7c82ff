//! Second-order degradation synthesis: Gaussian blur, bicubic x4
//! downsampling, additive Gaussian noise, and block-DCT JPEG compression,
//! composed as blur -> downsample -> noise -> jpeg with absent stages as
//! identity. Eight named presets cover every on/off combination around the
//! mandatory downsample.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{self, Image8, LabeledPair, PatchSet};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurParams {
    pub sigma: f64,
    pub ksize: usize,
}

impl BlurParams {
    /// Default blur: sigma 2.0, kernel size 2*ceil(3*sigma)+1.
    pub fn default_paper() -> Self {
        let sigma = 2.0;
        BlurParams {
            sigma,
            ksize: 2 * math::ceil(3.0 * sigma) as usize + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Standard deviation on the 0-255 scale.
    pub sigma255: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JpegParams {
    pub quality: u32,
}

/// Declarative degradation recipe. `noise_label` is true iff the noise stage
/// is present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationConfig {
    pub blur: Option<BlurParams>,
    pub noise: Option<NoiseParams>,
    pub jpeg: Option<JpegParams>,
    pub scale: usize,
}

impl DegradationConfig {
    pub fn noise_label(&self) -> bool {
        self.noise.is_some()
    }

    /// Active stages in application order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        if self.blur.is_some() {
            out.push(Stage::Blur);
        }
        out.push(Stage::Downsample);
        if self.noise.is_some() {
            out.push(Stage::Noise);
        }
        if self.jpeg.is_some() {
            out.push(Stage::Jpeg);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Blur,
    Downsample,
    Noise,
    Jpeg,
}

/// The eight named degradation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Clean,
    Blur,
    Noise,
    Jpeg,
    BlurNoise,
    BlurJpeg,
    NoiseJpeg,
    BlurNoiseJpeg,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Clean,
        Preset::Blur,
        Preset::Noise,
        Preset::Jpeg,
        Preset::BlurNoise,
        Preset::BlurJpeg,
        Preset::NoiseJpeg,
        Preset::BlurNoiseJpeg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Clean => "clean",
            Preset::Blur => "blur",
            Preset::Noise => "noise",
            Preset::Jpeg => "jpeg",
            Preset::BlurNoise => "blur+noise",
            Preset::BlurJpeg => "blur+jpeg",
            Preset::NoiseJpeg => "noise+jpeg",
            Preset::BlurNoiseJpeg => "blur+noise+jpeg",
        }
    }

    pub fn parse(name: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown preset {name:?}; valid presets: {}",
                    Preset::ALL.map(|p| p.name()).join(", ")
                ))
            })
    }

    /// Recipe with the protocol parameters: noise sigma 20 (0-255 scale),
    /// JPEG quality 30, x4 downsampling.
    pub fn config(&self) -> DegradationConfig {
        let blur = BlurParams::default_paper();
        let noise = NoiseParams { sigma255: 20.0 };
        let jpeg = JpegParams { quality: 30 };
        let (b, n, j) = match self {
            Preset::Clean => (false, false, false),
            Preset::Blur => (true, false, false),
            Preset::Noise => (false, true, false),
            Preset::Jpeg => (false, false, true),
            Preset::BlurNoise => (true, true, false),
            Preset::BlurJpeg => (true, false, true),
            Preset::NoiseJpeg => (false, true, true),
            Preset::BlurNoiseJpeg => (true, true, true),
        };
        DegradationConfig {
            blur: b.then_some(blur),
            noise: n.then_some(noise),
            jpeg: j.then_some(jpeg),
            scale: 4,
        }
    }
}

/// Normalized 1D Gaussian kernel, k[i] proportional to
/// exp(-(i-c)^2 / (2 sigma^2)).
pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if ksize % 2 == 0 {
        return Err(Error::invalid(format!("blur ksize {ksize} must be odd")));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("blur sigma must be positive"));
    }
    let c = (ksize / 2) as f64;
    let mut k: Vec<f64> = (0..ksize)
        .map(|i| math::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Mirror index without repeating the edge sample (... 2 1 | 0 1 2 ... ).
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &Tensor, sigma: f64, ksize: usize) -> Result<Tensor> {
    let k = gaussian_kernel(sigma, ksize)?;
    let s = x.shape();
    let r = ksize / 2;
    let mut tmp = vec![0.0; s.numel()];
    let xd = x.data();
    // Horizontal pass.
    for map in 0..s.n * s.c {
        let base = map * s.h * s.w;
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let ix = reflect(xx as isize + t as isize - r as isize, s.w);
                    acc += kv * xd[base + y * s.w + ix];
                }
                tmp[base + y * s.w + xx] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; s.numel()];
    for map in 0..s.n * s.c {
        let base = map * s.h * s.w;
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let iy = reflect(y as isize + t as isize - r as isize, s.h);
                    acc += kv * tmp[base + iy * s.w + xx];
                }
                out[base + y * s.w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Catmull-Rom kernel (bicubic with a = -1/2).
fn catmull_rom(t: f64) -> f64 {
    let t = math::abs(t);
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Separable bicubic resize with half-pixel source mapping
/// x_src = (x_dst + 0.5) * (src / dst) - 0.5 and edge clamping.
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let resample_axis = |src: &[f64], src_len: usize, dst_len: usize, stride: usize,
                         lanes: usize, lane_stride: usize, out: &mut [f64], out_stride: usize| {
        let ratio = src_len as f64 / dst_len as f64;
        for d in 0..dst_len {
            let pos = (d as f64 + 0.5) * ratio - 0.5;
            let i0 = math::floor(pos);
            let t = pos - i0;
            let taps = [
                catmull_rom(t + 1.0),
                catmull_rom(t),
                catmull_rom(1.0 - t),
                catmull_rom(2.0 - t),
            ];
            let idx = [
                ((i0 as isize) - 1).clamp(0, src_len as isize - 1) as usize,
                (i0 as isize).clamp(0, src_len as isize - 1) as usize,
                ((i0 as isize) + 1).clamp(0, src_len as isize - 1) as usize,
                ((i0 as isize) + 2).clamp(0, src_len as isize - 1) as usize,
            ];
            for lane in 0..lanes {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += taps[k] * src[lane * lane_stride + idx[k] * stride];
                }
                out[lane * lane_stride / stride * out_stride + d * out_stride] = acc;
            }
        }
    };
    let _ = resample_axis;

    // Horizontal, then vertical; plain indexing keeps it obvious.
    let mut tmp = vec![0.0; s.n * s.c * s.h * out_w];
    let xd = x.data();
    let ratio_w = s.w as f64 / out_w as f64;
    for map in 0..s.n * s.c {
        for y in 0..s.h {
            let row = map * s.h * s.w + y * s.w;
            let orow = map * s.h * out_w + y * out_w;
            for d in 0..out_w {
                let pos = (d as f64 + 0.5) * ratio_w - 0.5;
                let i0 = math::floor(pos);
                let t = pos - i0;
                let mut acc = 0.0;
                for (k, dt) in [t + 1.0, t, 1.0 - t, 2.0 - t].iter().enumerate() {
                    let ix = ((i0 as isize) + k as isize - 1).clamp(0, s.w as isize - 1) as usize;
                    acc += catmull_rom(*dt) * xd[row + ix];
                }
                tmp[orow + d] = acc;
            }
        }
    }
    let mut out = vec![0.0; s.n * s.c * out_h * out_w];
    let ratio_h = s.h as f64 / out_h as f64;
    for map in 0..s.n * s.c {
        for d in 0..out_h {
            let pos = (d as f64 + 0.5) * ratio_h - 0.5;
            let i0 = math::floor(pos);
            let t = pos - i0;
            for xx in 0..out_w {
                let mut acc = 0.0;
                for (k, dt) in [t + 1.0, t, 1.0 - t, 2.0 - t].iter().enumerate() {
                    let iy = ((i0 as isize) + k as isize - 1).clamp(0, s.h as isize - 1) as usize;
                    acc += catmull_rom(*dt) * tmp[map * s.h * out_w + iy * out_w + xx];
                }
                out[map * out_h * out_w + d * out_w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), out).expect("resize shape")
}

/// Bicubic downsampling by an integer factor; extents must divide evenly.
pub fn bicubic_down(x: &Tensor, scale: usize) -> Result<Tensor> {
    let s = x.shape();
    if scale == 0 || s.h % scale != 0 || s.w % scale != 0 {
        return Err(Error::invalid(format!(
            "dimensions {}x{} not divisible by scale {scale}",
            s.h, s.w
        )));
    }
    Ok(bicubic_resize(x, s.h / scale, s.w / scale))
}

/// Bicubic upsampling by an integer factor (evaluation baseline).
pub fn bicubic_up(x: &Tensor, scale: usize) -> Tensor {
    let s = x.shape();
    bicubic_resize(x, s.h * scale, s.w * scale)
}

/// Add N(0, (sigma255/255)^2) i.i.d. noise, then clamp to [0, 1].
pub fn add_gaussian_noise(x: &Tensor, sigma255: f64, rng: &mut Rng) -> Result<Tensor> {
    if sigma255 < 0.0 {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    if sigma255 == 0.0 {
        return Ok(x.clone());
    }
    let sigma = sigma255 / 255.0;
    Ok(x.map(|v| (v + sigma * rng.normal()).clamp(0.0, 1.0)))
}

/// Standard JPEG luminance quantization table (Annex K), row-major.
const LUMA_QUANT: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled quantizer entries: scale = 5000/q below 50 else 200 - 2q,
/// entry = clamp(floor((Q * scale + 50) / 100), 1, 255).
pub fn scaled_quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality {quality} out of [1, 100]")));
    }
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut out = [0.0; 64];
    for (o, &q) in out.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((q * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// cos((2x+1) u pi / 16) table indexed [u][x].
fn dct_cos_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (u, row) in t.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = math::cos((2.0 * x as f64 + 1.0) * u as f64 * math::PI / 16.0);
        }
    }
    t
}

fn dct_alpha(u: usize) -> f64 {
    if u == 0 {
        core::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// Faithful luminance block codec without entropy coding: samples are staged
/// to the 8-bit grid, each 8x8 block is level-shifted by -128, DCT-II
/// transformed, quantized with the quality-scaled table, dequantized, and
/// inverse transformed. Edge blocks are replicate-padded then cropped.
/// Applied per channel.
pub fn jpeg_codec(x: &Tensor, quality: u32) -> Result<Tensor> {
    let quant = scaled_quant_table(quality)?;
    let cos = dct_cos_table();
    let s = x.shape();
    let (bh, bw) = (s.h.div_ceil(8) * 8, s.w.div_ceil(8) * 8);
    let xd = x.data();
    let mut out = vec![0.0; s.numel()];
    let mut padded = vec![0.0; bh * bw];
    let mut coeffs = [[0.0; 8]; 8];
    let mut block = [[0.0; 8]; 8];
    for map in 0..s.n * s.c {
        let base = map * s.h * s.w;
        // Stage to the 0-255 integer grid with replicate padding.
        for y in 0..bh {
            let sy = y.min(s.h - 1);
            for xx in 0..bw {
                let sx = xx.min(s.w - 1);
                padded[y * bw + xx] = math::round(xd[base + sy * s.w + sx].clamp(0.0, 1.0) * 255.0);
            }
        }
        for by in (0..bh).step_by(8) {
            for bx in (0..bw).step_by(8) {
                for y in 0..8 {
                    for xx in 0..8 {
                        block[y][xx] = padded[(by + y) * bw + bx + xx] - 128.0;
                    }
                }
                // Forward DCT-II, quantize, dequantize.
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for (y, row) in block.iter().enumerate() {
                            for (xx, &val) in row.iter().enumerate() {
                                acc += val * cos[u][y] * cos[v][xx];
                            }
                        }
                        let f = 0.25 * dct_alpha(u) * dct_alpha(v) * acc;
                        let q = quant[u * 8 + v];
                        coeffs[u][v] = math::round(f / q) * q;
                    }
                }
                // Inverse DCT, level shift back, clamp to 8-bit range.
                for y in 0..8 {
                    for xx in 0..8 {
                        let mut acc = 0.0;
                        for (u, crow) in coeffs.iter().enumerate() {
                            for (v, &cv) in crow.iter().enumerate() {
                                acc += dct_alpha(u) * dct_alpha(v) * cv * cos[u][y] * cos[v][xx];
                            }
                        }
                        padded[(by + y) * bw + bx + xx] = (0.25 * acc + 128.0).clamp(0.0, 255.0);
                    }
                }
            }
        }
        for y in 0..s.h {
            for xx in 0..s.w {
                out[base + y * s.w + xx] = padded[y * bw + xx] / 255.0;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Run the full pipeline on one HR image. Stage order is
/// blur -> downsample -> noise -> jpeg; the label is true iff the noise
/// stage ran.
pub fn apply(config: &DegradationConfig, hr: &Image8, rng: &mut Rng) -> Result<(Image8, bool)> {
    let mut t = image::to_tensor(hr);
    if let Some(b) = config.blur {
        t = gaussian_blur(&t, b.sigma, b.ksize)?;
    }
    t = bicubic_down(&t, config.scale)?;
    if let Some(n) = config.noise {
        t = add_gaussian_noise(&t, n.sigma255, rng)?;
    }
    if let Some(j) = config.jpeg {
        t = jpeg_codec(&t, j.quality)?;
    }
    Ok((image::from_tensor(&t)?, config.noise_label()))
}

/// Build labeled training pairs from HR patches: each patch gets a uniformly
/// drawn preset from `presets` (chosen by a dedicated stream of
/// `master_seed`), a per-patch degradation stream, and its clean-preset LR
/// counterpart for the feature-consistency reference.
pub fn build_patch_set(
    hr_patches: &[Image8],
    presets: &[Preset],
    master_seed: u64,
) -> Result<PatchSet> {
    if hr_patches.is_empty() {
        return Err(Error::Data("no HR patches".into()));
    }
    if presets.is_empty() {
        return Err(Error::Data("no degradation presets".into()));
    }
    let mut choice_rng = Rng::stream(master_seed, u64::MAX);
    let clean = Preset::Clean.config();
    let mut pairs = Vec::with_capacity(hr_patches.len());
    let mut scale = 0;
    for (i, hr) in hr_patches.iter().enumerate() {
        let preset = presets[choice_rng.below(presets.len())];
        let cfg = preset.config();
        scale = cfg.scale;
        let mut rng = Rng::stream(master_seed, i as u64);
        let (lr, noisy) = apply(&cfg, hr, &mut rng)?;
        let (lr_clean, _) = apply(&clean, hr, &mut Rng::stream(master_seed, i as u64))?;
        pairs.push(LabeledPair {
            lr,
            lr_clean,
            hr: hr.clone(),
            noisy,
        });
    }
    let set = PatchSet { pairs, scale };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{from_tensor, to_tensor, Image8};

    fn constant_tensor(v: f64, h: usize, w: usize) -> Tensor {
        Tensor::full(Shape::new(1, 1, h, w), v)
    }

    #[test]
    fn blur_kernel_matches_closed_form() {
        let k = gaussian_kernel(1.0, 5).unwrap();
        let expected = [0.05448868, 0.24420134, 0.40261995, 0.24420134, 0.05448868];
        for (a, e) in k.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let t = constant_tensor(0.6, 12, 12);
        let b = gaussian_blur(&t, 1.5, 7).unwrap();
        for &v in b.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_impulse_center_value() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 11, 11));
        t.set(0, 0, 5, 5, 1.0);
        let b = gaussian_blur(&t, 1.0, 5).unwrap();
        let center = b.at(0, 0, 5, 5);
        assert!((center - 0.40261995 * 0.40261995).abs() < 1e-6, "{center}");
        assert!((center - 0.16210282).abs() < 1e-6);
    }

    #[test]
    fn blur_mass_preserved() {
        let t = constant_tensor(0.3, 16, 16);
        let b = gaussian_blur(&t, 2.0, 9).unwrap();
        assert!((b.sum() - t.sum()).abs() / t.sum() < 1e-9);
        let mut rng = Rng::new(3);
        let r = Tensor::random_uniform(Shape::new(1, 1, 32, 32), 0.0, 1.0, &mut rng);
        let br = gaussian_blur(&r, 1.0, 5).unwrap();
        // Interior rows away from the reflected border keep their mass to
        // kernel-normalization accuracy.
        let interior: f64 = (4..28).map(|y| (4..28).map(|x| br.at(0, 0, y, x)).sum::<f64>()).sum();
        let src: f64 = (4..28).map(|y| (4..28).map(|x| r.at(0, 0, y, x)).sum::<f64>()).sum();
        assert!((interior - src).abs() / src < 0.02);
    }

    #[test]
    fn blur_rejects_even_kernel() {
        assert!(gaussian_blur(&constant_tensor(0.0, 8, 8), 1.0, 4).is_err());
    }

    #[test]
    fn bicubic_constant_preserved() {
        let t = constant_tensor(0.42, 16, 16);
        let d = bicubic_down(&t, 4).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 1, 4, 4));
        for &v in d.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramp() {
        // f(x) = x on a 64-wide row; downsample x4 should sample the ramp at
        // the mapped positions exactly (degree-1 reproduction).
        let w = 64;
        let data: Vec<f64> = (0..w).map(|x| x as f64).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 1, w), data).unwrap();
        let d = bicubic_resize(&t, 1, w / 4);
        for i in 2..w / 4 - 2 {
            let expected = (i as f64 + 0.5) * 4.0 - 0.5;
            assert!(
                (d.at(0, 0, 0, i) - expected).abs() < 1e-6,
                "at {i}: {} vs {expected}",
                d.at(0, 0, 0, i)
            );
        }
    }

    #[test]
    fn bicubic_shape_check() {
        let t = constant_tensor(0.0, 64, 64);
        let d = bicubic_down(&t, 4).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 1, 16, 16));
        assert!(bicubic_down(&constant_tensor(0.0, 10, 10), 4).is_err());
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let t = constant_tensor(0.5, 8, 8);
        let mut rng = Rng::new(1);
        let n = add_gaussian_noise(&t, 0.0, &mut rng).unwrap();
        assert_eq!(n, t);
    }

    #[test]
    fn noise_clamps_at_one() {
        let t = constant_tensor(1.0, 32, 32);
        let mut rng = Rng::new(2);
        let n = add_gaussian_noise(&t, 20.0, &mut rng).unwrap();
        assert!(n.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn noise_sigma20_std_within_band() {
        // 1e5 samples at mid-gray: measured std of (out - in) within
        // [19/255 * 0.97, 21/255 * 1.03].
        let t = constant_tensor(0.5, 400, 250);
        let mut rng = Rng::new(7);
        let n = add_gaussian_noise(&t, 20.0, &mut rng).unwrap();
        let diffs: Vec<f64> = n.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let std = math::sqrt(var);
        assert!(std >= 19.0 / 255.0 * 0.97 && std <= 21.0 / 255.0 * 1.03, "std {std}");
    }

    #[test]
    fn quant_table_scaling_arithmetic() {
        // quality 30 < 50: scale = 5000/30 = 166, entry = (16*166 + 50)/100 = 27.
        let q30 = scaled_quant_table(30).unwrap();
        assert_eq!(q30[0], 27.0);
        // quality 60 >= 50: scale = 200 - 120 = 80, entry = (16*80 + 50)/100 = 13.
        let q60 = scaled_quant_table(60).unwrap();
        assert_eq!(q60[0], 13.0);
        // quality 1: scale = 5000, every entry clamps to 255 at the corner.
        let q1 = scaled_quant_table(1).unwrap();
        assert_eq!(q1[0], 255.0);
    }

    #[test]
    fn quant_rejects_out_of_range_quality() {
        assert!(scaled_quant_table(0).is_err());
        assert!(scaled_quant_table(101).is_err());
        assert!(jpeg_codec(&constant_tensor(0.5, 8, 8), 0).is_err());
    }

    #[test]
    fn jpeg_constant_128_roundtrips_exactly() {
        let v = 128.0 / 255.0;
        for quality in [10, 30, 60, 90] {
            let t = constant_tensor(v, 16, 16);
            let j = jpeg_codec(&t, quality).unwrap();
            let img = from_tensor(&j).unwrap();
            assert!(img.data.iter().all(|&s| s == 128), "quality {quality}");
        }
    }

    #[test]
    fn jpeg_psnr_monotone_in_quality() {
        let mut rng = Rng::new(11);
        // Textured image: smooth gradients plus structure.
        let mut img = Image8::zeros(32, 32, 1);
        for y in 0..32 {
            for x in 0..32 {
                let v = 96.0
                    + 64.0 * math::sin(x as f64 * 0.7)
                    + 48.0 * math::cos(y as f64 * 0.5)
                    + 16.0 * rng.uniform();
                img.data[y * 32 + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
        let t = to_tensor(&img);
        let mse = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.numel() as f64
        };
        let errs: Vec<f64> = [90, 60, 30, 10]
            .iter()
            .map(|&q| mse(&t, &jpeg_codec(&t, q).unwrap()))
            .collect();
        for w in errs.windows(2) {
            assert!(w[0] < w[1], "mse not monotone: {errs:?}");
        }
    }

    #[test]
    fn presets_distinct_stage_traces() {
        let traces: Vec<Vec<Stage>> = Preset::ALL.iter().map(|p| p.config().stages()).collect();
        for i in 0..traces.len() {
            for j in i + 1..traces.len() {
                assert_ne!(traces[i], traces[j], "{i} vs {j}");
            }
        }
        assert_eq!(
            Preset::BlurNoiseJpeg.config().stages(),
            vec![Stage::Blur, Stage::Downsample, Stage::Noise, Stage::Jpeg]
        );
        assert_eq!(Preset::Clean.config().stages(), vec![Stage::Downsample]);
    }

    #[test]
    fn preset_labels() {
        for p in Preset::ALL {
            let want = matches!(
                p,
                Preset::Noise | Preset::BlurNoise | Preset::NoiseJpeg | Preset::BlurNoiseJpeg
            );
            assert_eq!(p.config().noise_label(), want, "{}", p.name());
        }
    }

    #[test]
    fn preset_parse_roundtrip_and_rejection() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(Preset::parse("bogus").is_err());
    }

    fn test_hr_image(seed: u64, size: usize) -> Image8 {
        let mut rng = Rng::new(seed);
        let mut img = Image8::zeros(size, size, 1);
        for y in 0..size {
            for x in 0..size {
                let v = 128.0
                    + 80.0 * math::sin(x as f64 * 0.3 + rng.seed() as f64)
                    + 40.0 * math::cos(y as f64 * 0.2)
                    + 8.0 * rng.uniform();
                img.data[y * size + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
        img
    }

    #[test]
    fn clean_preset_is_pure_bicubic() {
        let hr = test_hr_image(5, 32);
        let mut rng = Rng::new(9);
        let (lr, label) = apply(&Preset::Clean.config(), &hr, &mut rng).unwrap();
        assert!(!label);
        let direct = from_tensor(&bicubic_down(&to_tensor(&hr), 4).unwrap()).unwrap();
        assert_eq!(lr, direct);
    }

    #[test]
    fn apply_is_deterministic_under_seed() {
        let hr = test_hr_image(6, 32);
        let cfg = Preset::BlurNoiseJpeg.config();
        let (a, _) = apply(&cfg, &hr, &mut Rng::new(77)).unwrap();
        let (b, _) = apply(&cfg, &hr, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_residual_dominates_blur_in_high_bins() {
        use crate::spectral::{dft2, radial_profile};
        let hr = test_hr_image(8, 64);
        let clean = apply(&Preset::Clean.config(), &hr, &mut Rng::new(1)).unwrap().0;
        let noise = apply(&Preset::Noise.config(), &hr, &mut Rng::new(1)).unwrap().0;
        let blur = apply(&Preset::Blur.config(), &hr, &mut Rng::new(1)).unwrap().0;
        let bins = 12;
        let profile = |img: &Image8| {
            let d = to_tensor(img).sub(&to_tensor(&clean)).unwrap();
            radial_profile(&dft2(&d), bins).unwrap()
        };
        let pn = profile(&noise);
        let pb = profile(&blur);
        let top_third: Vec<usize> = (bins - bins / 3..bins).collect();
        let mean = |p: &crate::spectral::RadialProfile| {
            top_third.iter().map(|&b| p.bins[b].1).sum::<f64>() / top_third.len() as f64
        };
        assert!(mean(&pn) > mean(&pb), "noise {} vs blur {}", mean(&pn), mean(&pb));
    }

    #[test]
    fn build_patch_set_labels_and_determinism() {
        let hr = test_hr_image(10, 64);
        let patches = crate::image::extract_patches(&hr, 32, 32, usize::MAX).unwrap();
        let presets = [Preset::Clean, Preset::Noise];
        let a = build_patch_set(&patches, &presets, 42).unwrap();
        let b = build_patch_set(&patches, &presets, 42).unwrap();
        assert_eq!(a.pairs.len(), b.pairs.len());
        for (x, y) in a.pairs.iter().zip(b.pairs.iter()) {
            assert_eq!(x.lr, y.lr);
            assert_eq!(x.noisy, y.noisy);
        }
        assert_eq!(a.scale, 4);
    }
}
