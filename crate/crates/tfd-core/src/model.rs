//! The TFD network: a small residual SR backbone with a noise-detection head
//! and a frequency-spatial denoising module hooked into the trunk, each
//! toggleable for ablations.
//!
//! Forward layout: head conv -> residual blocks up to `insert_at` (producing
//! the hooked feature h_n) -> confidence-gated denoising -> remaining blocks
//! -> two nearest-neighbour x2 upsampling stages with convs -> tail conv.
//! Routing is a hard per-sample gate: no gradient flows through the decision,
//! and samples at or below the threshold pass through untouched.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{channel_attention, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Fusion {
    Multiplication,
    Addition,
    Concatenation,
}

impl Fusion {
    pub fn name(&self) -> &'static str {
        match self {
            Fusion::Multiplication => "multiplication",
            Fusion::Addition => "addition",
            Fusion::Concatenation => "concatenation",
        }
    }

    pub fn parse(s: &str) -> Result<Fusion> {
        match s {
            "multiplication" => Ok(Fusion::Multiplication),
            "addition" => Ok(Fusion::Addition),
            "concatenation" => Ok(Fusion::Concatenation),
            other => Err(Error::invalid(format!(
                "unknown fusion {other:?}; expected multiplication, addition or concatenation"
            ))),
        }
    }
}

/// Architecture description; parameter count is a pure function of this plus
/// the input channel count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub blocks: usize,
    pub channels: usize,
    pub insert_at: usize,
    pub nd: bool,
    pub sd: bool,
    pub fd: bool,
    pub fusion: Fusion,
    pub reduction_ratio: usize,
    /// Internal width of the denoiser's encoder/decoder.
    pub denoise_channels: usize,
    /// Native resolution of the learnable spectral filters; other feature
    /// resolutions use bilinear resampling in centered-frequency layout.
    pub filter_size: usize,
    pub scale: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            blocks: 8,
            channels: 16,
            insert_at: 4,
            nd: true,
            sd: true,
            fd: true,
            fusion: Fusion::Multiplication,
            reduction_ratio: 4,
            denoise_channels: 4,
            filter_size: 8,
            scale: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.insert_at > self.blocks {
            return Err(Error::invalid(format!(
                "insert_at {} exceeds block count {}",
                self.insert_at, self.blocks
            )));
        }
        if self.channels % self.reduction_ratio != 0 {
            return Err(Error::invalid(format!(
                "reduction ratio {} must divide channels {}",
                self.reduction_ratio, self.channels
            )));
        }
        if self.denoise_channels % self.reduction_ratio != 0 {
            return Err(Error::invalid(format!(
                "reduction ratio {} must divide denoise channels {}",
                self.reduction_ratio, self.denoise_channels
            )));
        }
        if self.scale != 4 {
            return Err(Error::invalid("only x4 upsampling is supported"));
        }
        if self.filter_size == 0 || self.blocks == 0 || self.channels == 0 {
            return Err(Error::invalid("zero-sized architecture field"));
        }
        Ok(())
    }

    fn has_denoiser(&self) -> bool {
        self.sd || self.fd
    }
}

#[derive(Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct Rau {
    ln_g: ParamId,
    ln_b: ParamId,
    pre: Conv,
    dw: Conv,
    ca_w1: ParamId,
    ca_w2: ParamId,
    post: Conv,
}

struct Detector {
    wr: ParamId,
    wi: ParamId,
    cls1: Conv,
    cls2: Conv,
}

struct Denoiser {
    had_re: Option<ParamId>,
    had_im: Option<ParamId>,
    mask_bias: Option<ParamId>,
    spatial: Option<SpatialBranch>,
    fuse_cat: Option<Conv>,
}

struct SpatialBranch {
    enc1: Conv,
    enc1_rau: Rau,
    enc2: Conv,
    enc2_rau: Rau,
    mid_rau: Rau,
    dec1: Conv,
    dec1_rau: Rau,
    dec2: Conv,
    dec2_rau: Rau,
    exit: Conv,
    fuse_in: Conv,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<Conv> {
        let w = self.store.register(
            format!("{name}.w"),
            Tensor::he_uniform(Shape::new(cout, cin, k, k), cin * k * k, self.rng),
        )?;
        let b = self
            .store
            .register(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)))?;
        Ok(Conv { w, b })
    }

    fn rau(&mut self, name: &str, c: usize, r: usize) -> Result<Rau> {
        let ln_g = self
            .store
            .register(format!("{name}.ln.g"), Tensor::full(Shape::new(1, c, 1, 1), 1.0))?;
        let ln_b = self
            .store
            .register(format!("{name}.ln.b"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
        let pre = self.conv(&format!("{name}.pre"), c, c, 1)?;
        let dw_w = self.store.register(
            format!("{name}.dw.w"),
            Tensor::he_uniform(Shape::new(c, 1, 3, 3), 9, self.rng),
        )?;
        let dw_b = self
            .store
            .register(format!("{name}.dw.b"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
        let hidden = c / r;
        let ca_w1 = self.store.register(
            format!("{name}.ca.w1"),
            Tensor::he_uniform(Shape::new(hidden, c, 1, 1), c, self.rng),
        )?;
        let ca_w2 = self.store.register(
            format!("{name}.ca.w2"),
            Tensor::he_uniform(Shape::new(c, hidden, 1, 1), hidden, self.rng),
        )?;
        let post = self.conv(&format!("{name}.post"), c, c, 1)?;
        Ok(Rau {
            ln_g,
            ln_b,
            pre,
            dw: Conv { w: dw_w, b: dw_b },
            ca_w1,
            ca_w2,
            post,
        })
    }
}

/// The assembled network with its flat parameter store.
pub struct TfdNet {
    pub arch: ArchConfig,
    pub in_channels: usize,
    pub store: ParamStore,
    head: Conv,
    blocks: Vec<(Conv, Conv)>,
    up1: Conv,
    up2: Conv,
    tail: Conv,
    detector: Option<Detector>,
    denoiser: Option<Denoiser>,
}

/// Everything a forward pass produces besides the SR image.
pub struct ForwardOut {
    pub sr: Var,
    /// Feature at the hook point, before any denoising.
    pub h_n: Var,
    pub logits: Option<Var>,
    /// Per-sample predicted noise probability (empty without a detector).
    pub confidence: Vec<f64>,
    /// Per-sample routing decision actually taken.
    pub routed: Vec<bool>,
    /// Denoiser output for the whole batch, when the denoiser ran.
    pub h_denoised: Option<Var>,
}

impl TfdNet {
    pub fn new(arch: ArchConfig, in_channels: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::invalid("input channels must be 1 or 3"));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let c = arch.channels;
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let head = b.conv("head", c, in_channels, 3)?;
        let mut blocks = Vec::with_capacity(arch.blocks);
        for i in 0..arch.blocks {
            let c1 = b.conv(&format!("block{i}.c1"), c, c, 3)?;
            let c2 = b.conv(&format!("block{i}.c2"), c, c, 3)?;
            blocks.push((c1, c2));
        }
        let up1 = b.conv("up1", c, c, 3)?;
        let up2 = b.conv("up2", c, c, 3)?;
        let tail = b.conv("tail", in_channels, c, 3)?;

        let detector = if arch.nd {
            let wr = b.store.register(
                "det.wr",
                Tensor::he_uniform(Shape::new(c, 1, 3, 3), 9, b.rng),
            )?;
            let wi = b.store.register(
                "det.wi",
                Tensor::he_uniform(Shape::new(c, 1, 3, 3), 9, b.rng),
            )?;
            let cls1 = b.conv("det.cls1", c, c, 1)?;
            let cls2 = b.conv("det.cls2", 2, c, 1)?;
            Some(Detector { wr, wi, cls1, cls2 })
        } else {
            None
        };

        let denoiser = if arch.has_denoiser() {
            let (had_re, had_im, mask_bias) = if arch.fd {
                let f = arch.filter_size;
                let had_re = b
                    .store
                    .register("den.had_re", Tensor::full(Shape::new(1, c, f, f), 1.0))?;
                let had_im = b
                    .store
                    .register("den.had_im", Tensor::full(Shape::new(1, c, f, f), 1.0))?;
                // +2 pre-sigmoid offset so the initial mask is near pass-through.
                let mask_bias = b
                    .store
                    .register("den.mask_bias", Tensor::full(Shape::new(1, c, 1, 1), 2.0))?;
                (Some(had_re), Some(had_im), Some(mask_bias))
            } else {
                (None, None, None)
            };
            let spatial = if arch.sd {
                let cd = arch.denoise_channels;
                let r = arch.reduction_ratio;
                Some(SpatialBranch {
                    enc1: b.conv("den.enc1", cd, c, 3)?,
                    enc1_rau: b.rau("den.enc1.rau", cd, r)?,
                    enc2: b.conv("den.enc2", cd, cd, 3)?,
                    enc2_rau: b.rau("den.enc2.rau", cd, r)?,
                    mid_rau: b.rau("den.mid.rau", cd, r)?,
                    dec1: b.conv("den.dec1", cd, cd, 3)?,
                    dec1_rau: b.rau("den.dec1.rau", cd, r)?,
                    dec2: b.conv("den.dec2", cd, cd, 3)?,
                    dec2_rau: b.rau("den.dec2.rau", cd, r)?,
                    exit: b.conv("den.exit", c, cd, 1)?,
                    fuse_in: b.conv("den.fuse_in", c, 2 * c, 1)?,
                })
            } else {
                None
            };
            let fuse_cat = if arch.sd && arch.fd && arch.fusion == Fusion::Concatenation {
                Some(b.conv("den.fuse_cat", c, 2 * c, 1)?)
            } else {
                None
            };
            Some(Denoiser {
                had_re,
                had_im,
                mask_bias,
                spatial,
                fuse_cat,
            })
        } else {
            None
        };

        Ok(TfdNet {
            arch,
            in_channels,
            store,
            head,
            blocks,
            up1,
            up2,
            tail,
            detector,
            denoiser,
        })
    }

    fn conv_var(&self, tape: &Tape, x: &Var, conv: &Conv, stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param(&self.store, conv.w);
        let b = tape.param(&self.store, conv.b);
        x.conv2d(&w, Some(&b), stride, pad)
    }

    fn res_block(&self, tape: &Tape, x: &Var, block: &(Conv, Conv)) -> Result<Var> {
        let t = self.conv_var(tape, x, &block.0, 1, 1)?.relu();
        let t = self.conv_var(tape, &t, &block.1, 1, 1)?;
        t.add(x)
    }

    /// Residual attention unit: 1x1(CA(dw3x3(1x1(LN(h))))) + h.
    fn rau(&self, tape: &Tape, x: &Var, rau: &Rau) -> Result<Var> {
        let g = tape.param(&self.store, rau.ln_g);
        let bb = tape.param(&self.store, rau.ln_b);
        let t = x.layer_norm(&g, &bb, LN_EPS)?;
        let t = self.conv_var(tape, &t, &rau.pre, 1, 0)?;
        let dw_w = tape.param(&self.store, rau.dw.w);
        let dw_b = tape.param(&self.store, rau.dw.b);
        let t = t.depthwise_conv2d(&dw_w, Some(&dw_b))?;
        let w1 = tape.param(&self.store, rau.ca_w1);
        let w2 = tape.param(&self.store, rau.ca_w2);
        let t = channel_attention(&t, &w1, &w2)?;
        let t = self.conv_var(tape, &t, &rau.post, 1, 0)?;
        t.add(x)
    }

    /// Backbone prefix up to the hook point; the feature the TFD stage sees.
    pub fn prefix(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let mut h = self.conv_var(tape, x, &self.head, 1, 1)?.relu();
        for block in &self.blocks[..self.arch.insert_at] {
            h = self.res_block(tape, &h, block)?;
        }
        Ok(h)
    }

    /// Spectral filters at the requested resolution: the raw parameter at
    /// native size, or an untracked bilinear resample in centered-frequency
    /// layout otherwise.
    fn spectral_weight(&self, tape: &Tape, id: ParamId, h: usize, w: usize) -> Var {
        let t = self.store.value(id);
        let s = t.shape();
        if s.h == h && s.w == w {
            tape.param(&self.store, id)
        } else {
            let mut out = Tensor::zeros(Shape::new(1, s.c, h, w));
            for c in 0..s.c {
                let centered = fftshift(t.plane(0, c), s.h, s.w);
                let resized = kernels::bilinear_resize_plane(&centered, s.h, s.w, h, w);
                let plane = ifftshift(&resized, h, w);
                let base = c * h * w;
                out.data_mut()[base..base + h * w].copy_from_slice(&plane);
            }
            tape.constant(out)
        }
    }

    /// Noise-detection head on an arbitrary feature map: DFT, per-channel
    /// 3x3 spectral convs with ReLU, inverse DFT, global pooling, and a
    /// two-stage 1x1 classifier. Returns logits and per-sample noise
    /// probability.
    pub fn detect_on(&self, tape: &Tape, h: &Var) -> Result<(Var, Vec<f64>)> {
        let det = self
            .detector
            .as_ref()
            .ok_or_else(|| Error::invalid("noise detection is disabled"))?;
        let c = h.shape().c;
        let spec = h.dft2();
        self.detect_from_spectrum(tape, &spec, c, det)
    }

    fn detect_from_spectrum(
        &self,
        tape: &Tape,
        spec: &Var,
        c: usize,
        det: &Detector,
    ) -> Result<(Var, Vec<f64>)> {
        let re = spec.slice_c(0, c)?;
        let im = spec.slice_c(c, 2 * c)?;
        let wr = tape.param(&self.store, det.wr);
        let wi = tape.param(&self.store, det.wi);
        let fre = re.depthwise_conv2d(&wr, None)?.relu();
        let fim = im.depthwise_conv2d(&wi, None)?.relu();
        let filtered = fre.concat_c(&fim)?;
        let back = filtered.idft2()?;
        let pooled = back.gap();
        let hidden = self.conv_var(tape, &pooled, &det.cls1, 1, 0)?.relu();
        let logits = self.conv_var(tape, &hidden, &det.cls2, 1, 0)?;
        let confidence = noisy_probabilities(logits.value());
        Ok((logits, confidence))
    }

    /// Frequency-spatial denoiser. `spec` reuses an already-computed
    /// spectrum of `h_n` when available.
    pub fn denoise_on(&self, tape: &Tape, h_n: &Var, spec: Option<&Var>) -> Result<Var> {
        let den = self
            .denoiser
            .as_ref()
            .ok_or_else(|| Error::invalid("denoiser is disabled"))?;
        let s = h_n.shape();
        let h_freq = if self.arch.fd {
            let spec_owned;
            let spec = match spec {
                Some(v) => v,
                None => {
                    spec_owned = h_n.dft2();
                    &spec_owned
                }
            };
            let re = spec.slice_c(0, s.c)?;
            let im = spec.slice_c(s.c, 2 * s.c)?;
            let wr = self.spectral_weight(tape, den.had_re.expect("fd filters"), s.h, s.w);
            let wi = self.spectral_weight(tape, den.had_im.expect("fd filters"), s.h, s.w);
            let mre = re.broadcast_mul_chw(&wr)?;
            let mim = im.broadcast_mul_chw(&wi)?;
            let bias = tape.param(&self.store, den.mask_bias.expect("fd bias"));
            let pre = mre.concat_c(&mim)?.idft2()?.bias_add(&bias)?;
            Some(pre.sigmoid())
        } else {
            None
        };

        let h_spatial = if self.arch.sd {
            let sp = den.spatial.as_ref().expect("sd branch");
            if s.h % 4 != 0 || s.w % 4 != 0 {
                return Err(Error::invalid(format!(
                    "spatial denoiser needs feature extents divisible by 4, got {s}"
                )));
            }
            let e1 = self.conv_var(tape, h_n, &sp.enc1, 2, 1)?.relu();
            let e1 = self.rau(tape, &e1, &sp.enc1_rau)?;
            let e2 = self.conv_var(tape, &e1, &sp.enc2, 2, 1)?.relu();
            let e2 = self.rau(tape, &e2, &sp.enc2_rau)?;
            let mid = self.rau(tape, &e2, &sp.mid_rau)?;
            let d1 = mid.add(&e2)?.nearest_up2();
            let d1 = self.conv_var(tape, &d1, &sp.dec1, 1, 1)?.relu();
            let d1 = self.rau(tape, &d1.add(&e1)?, &sp.dec1_rau)?;
            let d2 = d1.nearest_up2();
            let d2 = self.conv_var(tape, &d2, &sp.dec2, 1, 1)?.relu();
            let d2 = self.rau(tape, &d2, &sp.dec2_rau)?;
            let h_up = self.conv_var(tape, &d2, &sp.exit, 1, 0)?;
            Some(self.conv_var(tape, &h_up.concat_c(h_n)?, &sp.fuse_in, 1, 0)?)
        } else {
            None
        };

        match (h_freq, h_spatial) {
            (Some(f), Some(sp)) => match self.arch.fusion {
                Fusion::Multiplication => f.mul(&sp),
                Fusion::Addition => f.add(&sp),
                Fusion::Concatenation => {
                    let cat = den.fuse_cat.as_ref().expect("concatenation fusion conv");
                    self.conv_var(tape, &f.concat_c(&sp)?, cat, 1, 0)
                }
            },
            (Some(f), None) => f.mul(h_n),
            (None, Some(sp)) => Ok(sp),
            (None, None) => unreachable!("denoiser exists only when sd or fd is on"),
        }
    }

    /// Full forward pass. When gating applies, each sample independently
    /// routes through the denoiser iff its predicted noise confidence
    /// strictly exceeds `gate_threshold`; ties take the identity path.
    pub fn forward_var(
        &self,
        tape: &Tape,
        x: &Var,
        gate_enabled: bool,
        gate_threshold: f64,
    ) -> Result<ForwardOut> {
        let h_n = self.prefix(tape, x)?;
        let n = h_n.shape().n;
        let c = h_n.shape().c;

        let mut spec = None;
        let (logits, confidence) = if let Some(det) = &self.detector {
            let sp = h_n.dft2();
            let out = self.detect_from_spectrum(tape, &sp, c, det)?;
            spec = Some(sp);
            (Some(out.0), out.1)
        } else {
            (None, Vec::new())
        };

        let routed: Vec<bool> = if self.denoiser.is_some() {
            if !self.arch.nd {
                // Ablation without detection: every sample is denoised.
                vec![true; n]
            } else if gate_enabled {
                confidence.iter().map(|&p| p > gate_threshold).collect()
            } else {
                vec![false; n]
            }
        } else {
            vec![false; n]
        };

        let (h_routed, h_denoised) = if routed.iter().any(|&r| r) {
            let denoised = self.denoise_on(tape, &h_n, spec.as_ref())?;
            let combined = if routed.iter().all(|&r| r) {
                denoised.clone()
            } else {
                let mask = row_mask(h_n.shape(), &routed, 1.0, 0.0);
                let inv = row_mask(h_n.shape(), &routed, 0.0, 1.0);
                denoised.mask_mul(&mask)?.add(&h_n.mask_mul(&inv)?)?
            };
            (combined, Some(denoised))
        } else {
            (h_n.clone(), None)
        };

        let mut h = h_routed;
        for block in &self.blocks[self.arch.insert_at..] {
            h = self.res_block(tape, &h, block)?;
        }
        let h = self.conv_var(tape, &h.nearest_up2(), &self.up1, 1, 1)?.relu();
        let h = self.conv_var(tape, &h.nearest_up2(), &self.up2, 1, 1)?.relu();
        let sr = self.conv_var(tape, &h, &self.tail, 1, 1)?;

        Ok(ForwardOut {
            sr,
            h_n,
            logits,
            confidence,
            routed,
            h_denoised,
        })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        lr: &Tensor,
        gate_enabled: bool,
        gate_threshold: f64,
    ) -> Result<ForwardOut> {
        let x = tape.constant(lr.clone());
        self.forward_var(tape, &x, gate_enabled, gate_threshold)
    }

    /// Inference on a throwaway tape (gate always enabled).
    pub fn infer_sr(&self, lr: &Tensor, gate_threshold: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward(&tape, lr, true, gate_threshold)?;
        Ok(out.sr.value().clone())
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Backbone-only parameter count.
    pub fn backbone_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(name, _, _)| !name.starts_with("det.") && !name.starts_with("den."))
            .map(|(_, v, _)| v.numel())
            .sum()
    }

    /// TFD add-on (detector + denoiser) parameter count.
    pub fn addon_param_count(&self) -> usize {
        self.param_count() - self.backbone_param_count()
    }
}

/// Softmax probability of the "noisy" class (index 1) per row of N x 2
/// logits.
pub fn noisy_probabilities(logits: &Tensor) -> Vec<f64> {
    let s = logits.shape();
    debug_assert_eq!(s.c, 2);
    let d = logits.data();
    (0..s.n)
        .map(|n| {
            let (l0, l1) = (d[2 * n], d[2 * n + 1]);
            let m = l0.max(l1);
            let (e0, e1) = (math::exp(l0 - m), math::exp(l1 - m));
            e1 / (e0 + e1)
        })
        .collect()
}

/// Full-shape mask that is `on` for routed samples and `off` otherwise.
fn row_mask(shape: Shape, routed: &[bool], on: f64, off: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let per = shape.c * shape.h * shape.w;
    {
        let d = t.data_mut();
        for (n, &r) in routed.iter().enumerate() {
            d[n * per..(n + 1) * per].fill(if r { on } else { off });
        }
    }
    t
}

/// Center the DC bin: roll by (h/2, w/2).
fn fftshift(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = plane[y * w + x];
        }
    }
    out
}

/// Inverse of `fftshift`.
fn ifftshift(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = plane[((y + h / 2) % h) * w + (x + w / 2) % w];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            blocks: 4,
            channels: 8,
            insert_at: 2,
            filter_size: 16,
            ..ArchConfig::default()
        }
    }

    fn random_input(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::random_uniform(Shape::new(n, c, hw, hw), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let net = TfdNet::new(toy_arch(), 1, 7).unwrap();
        let x = random_input(2, 1, 16, 3);
        let tape = Tape::new();
        let out = net.forward(&tape, &x, true, 0.75).unwrap();
        assert_eq!(out.sr.shape(), Shape::new(2, 1, 64, 64));
        assert!(out.sr.value().all_finite());
        assert_eq!(out.confidence.len(), 2);
        let logits = out.logits.unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 2, 1, 1));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(9);
        let logits = Tensor::random_uniform(Shape::new(5, 2, 1, 1), -3.0, 3.0, &mut rng);
        let p = noisy_probabilities(&logits);
        let d = logits.data();
        for (n, &p1) in p.iter().enumerate() {
            let (l0, l1) = (d[2 * n], d[2 * n + 1]);
            let m = l0.max(l1);
            let p0 = math::exp(l0 - m) / (math::exp(l0 - m) + math::exp(l1 - m));
            assert!((p0 + p1 - 1.0).abs() < 1e-12);
        }
        // Symmetric logits give exactly 0.5.
        let z = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert_eq!(noisy_probabilities(&z), vec![0.5]);
    }

    #[test]
    fn all_toggles_off_is_plain_backbone() {
        let mut arch = toy_arch();
        arch.nd = false;
        arch.sd = false;
        arch.fd = false;
        let net = TfdNet::new(arch, 1, 11).unwrap();
        assert_eq!(net.addon_param_count(), 0);

        let x = random_input(1, 1, 16, 5);
        let tape = Tape::new();
        let out = net.forward(&tape, &x, true, 0.75).unwrap();
        assert!(out.logits.is_none());
        assert!(out.h_denoised.is_none());
        assert!(out.routed.iter().all(|&r| !r));

        // Gate flag is irrelevant without TFD parts: bit-identical output.
        let tape2 = Tape::new();
        let out2 = net.forward(&tape2, &x, false, 0.75).unwrap();
        assert_eq!(out.sr.value(), out2.sr.value());
    }

    #[test]
    fn gate_disabled_means_identity_route() {
        let net = TfdNet::new(toy_arch(), 1, 13).unwrap();
        let x = random_input(2, 1, 16, 8);
        let tape = Tape::new();
        let out = net.forward(&tape, &x, false, 0.75).unwrap();
        assert!(out.routed.iter().all(|&r| !r));
        assert!(out.h_denoised.is_none());
    }

    #[test]
    fn mask_near_one_reduces_to_spatial_branch() {
        let mut net = TfdNet::new(toy_arch(), 1, 17).unwrap();
        // Force the frequency mask to ~1: zero filters, saturating bias.
        let zero = Tensor::zeros(Shape::new(1, 8, 16, 16));
        net.store
            .set_value(net.store.id_of("den.had_re").unwrap(), zero.clone());
        net.store
            .set_value(net.store.id_of("den.had_im").unwrap(), zero);
        net.store.set_value(
            net.store.id_of("den.mask_bias").unwrap(),
            Tensor::full(Shape::new(1, 8, 1, 1), 30.0),
        );

        let x = random_input(1, 1, 16, 21);
        let tape = Tape::new();
        let h_n = net.prefix(&tape, &tape.constant(x.clone())).unwrap();
        let denoised = net.denoise_on(&tape, &h_n, None).unwrap();

        // Spatial branch alone: FD off on an identically-seeded net, shared
        // parameter names copied over.
        let mut arch2 = toy_arch();
        arch2.fd = false;
        let mut net2 = TfdNet::new(arch2, 1, 17).unwrap();
        for (name, value, _) in net.store.iter() {
            if let Some(id) = net2.store.id_of(name) {
                net2.store.set_value(id, value.clone());
            }
        }
        let tape2 = Tape::new();
        let h_n2 = net2.prefix(&tape2, &tape2.constant(x)).unwrap();
        let spatial = net2.denoise_on(&tape2, &h_n2, None).unwrap();
        let diff = crate::tensor::max_abs_diff(denoised.value(), spatial.value());
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn mask_near_zero_kills_multiplication_output() {
        let mut net = TfdNet::new(toy_arch(), 1, 19).unwrap();
        let zero = Tensor::zeros(Shape::new(1, 8, 16, 16));
        net.store
            .set_value(net.store.id_of("den.had_re").unwrap(), zero.clone());
        net.store
            .set_value(net.store.id_of("den.had_im").unwrap(), zero);
        net.store.set_value(
            net.store.id_of("den.mask_bias").unwrap(),
            Tensor::full(Shape::new(1, 8, 1, 1), -30.0),
        );
        let x = random_input(1, 1, 16, 23);
        let tape = Tape::new();
        let h_n = net.prefix(&tape, &tape.constant(x)).unwrap();
        let denoised = net.denoise_on(&tape, &h_n, None).unwrap();
        let max = denoised
            .value()
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(math::abs(v)));
        assert!(max < 1e-6, "max {max}");
    }

    #[test]
    fn denoise_preserves_shape_across_sizes() {
        for c in [8usize, 16] {
            for hw in [8usize, 16] {
                let arch = ArchConfig {
                    blocks: 2,
                    channels: c,
                    insert_at: 1,
                    filter_size: 8,
                    ..ArchConfig::default()
                };
                let net = TfdNet::new(arch, 1, 29).unwrap();
                let tape = Tape::new();
                let h = tape.constant(random_input(1, c, hw, 31));
                let d = net.denoise_on(&tape, &h, None).unwrap();
                assert_eq!(d.shape(), Shape::new(1, c, hw, hw));
            }
        }
    }

    /// Net whose detector produces one confident-noisy and one
    /// confident-clean decision for the two inputs used below.
    fn build_forced_net() -> TfdNet {
        let mut net = TfdNet::new(toy_arch(), 1, 47).unwrap();
        let w_id = net.store.id_of("det.cls2.w").unwrap();
        let shape = net.store.value(w_id).shape();
        let mut w = Tensor::zeros(shape);
        {
            let d = w.data_mut();
            let c = shape.c;
            for i in 0..c {
                d[i] = -4.0; // logit 0 row
                d[c + i] = 4.0; // logit 1 row
            }
        }
        net.store.set_value(w_id, w);
        let mut b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        b.data_mut()[0] = 1.0;
        b.data_mut()[1] = -1.0;
        net.store
            .set_value(net.store.id_of("det.cls2.b").unwrap(), b);
        net
    }

    #[test]
    fn per_sample_routing_matches_singletons() {
        let net = build_forced_net();
        let a = random_input(1, 1, 16, 41);
        let b = random_input(1, 1, 16, 43).map(|v| v * 0.2);
        let mut both = Tensor::zeros(Shape::new(2, 1, 16, 16));
        both.data_mut()[..256].copy_from_slice(a.data());
        both.data_mut()[256..].copy_from_slice(b.data());

        let tape = Tape::new();
        let out = net.forward(&tape, &both, true, 0.75).unwrap();
        let tape_a = Tape::new();
        let out_a = net.forward(&tape_a, &a, true, 0.75).unwrap();
        let tape_b = Tape::new();
        let out_b = net.forward(&tape_b, &b, true, 0.75).unwrap();

        assert_eq!(out.routed, vec![out_a.routed[0], out_b.routed[0]]);
        let sr = out.sr.value().data();
        let half = sr.len() / 2;
        let d = sr[..half]
            .iter()
            .zip(out_a.sr.value().data())
            .chain(sr[half..].iter().zip(out_b.sr.value().data()))
            .map(|(&x, &y)| math::abs(x - y))
            .fold(0.0f64, f64::max);
        assert!(d < 1e-12, "per-sample routing mismatch {d}");
    }

    #[test]
    fn boundary_confidence_takes_identity_path() {
        // Strict inequality at the threshold: 0.75 exactly routes identity.
        let routed: Vec<bool> = [0.80, 0.75, 0.7499, 0.7501]
            .iter()
            .map(|&p| p > 0.75)
            .collect();
        assert_eq!(routed, vec![true, false, false, true]);
    }

    #[test]
    fn toy_param_count_formula() {
        // Single 3x3 conv 8 -> 8 with bias: 8*8*9 + 8 = 584.
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        b.conv("probe", 8, 8, 3).unwrap();
        assert_eq!(store.param_count(), 584);
    }

    #[test]
    fn default_config_addon_within_budget() {
        for in_ch in [1usize, 3] {
            let net = TfdNet::new(ArchConfig::default(), in_ch, 3).unwrap();
            let backbone = net.backbone_param_count();
            let addon = net.addon_param_count();
            assert!(
                (addon as f64) <= 0.15 * backbone as f64,
                "in_ch {in_ch}: addon {addon} vs backbone {backbone}"
            );
        }
    }

    #[test]
    fn filter_resampling_keeps_shape_and_range() {
        // Native 8x8 filters evaluated on 12x12 features resample without
        // touching parameter storage.
        let arch = ArchConfig {
            blocks: 2,
            channels: 8,
            insert_at: 1,
            filter_size: 8,
            ..ArchConfig::default()
        };
        let net = TfdNet::new(arch, 1, 53).unwrap();
        let tape = Tape::new();
        let h = tape.constant(random_input(1, 8, 12, 55));
        let d = net.denoise_on(&tape, &h, None).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 8, 12, 12));
        assert!(d.value().all_finite());
    }
}
