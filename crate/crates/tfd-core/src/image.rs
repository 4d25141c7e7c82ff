//! 8-bit images, the binary PGM/PPM codec, and tensor conversion.
//!
//! Only binary "P5" (grayscale) and "P6" (RGB) with maxval 255 are accepted.
//! Parsing is strict: header tokens are whitespace separated, `#` comments
//! are allowed in the header, exactly one whitespace byte separates the
//! maxval from the sample body, and the body length must match the declared
//! dimensions exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major samples, interleaved channels.
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image8 {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `#` comments (comment runs to end of line).
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        let mut value: usize = 0;
        for &b in &self.bytes[start..self.pos] {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| Error::Parse {
                    offset: start,
                    message: format!("{what} out of range"),
                })?;
        }
        Ok(value)
    }
}

/// Decode a binary PGM ("P5") or PPM ("P6") buffer.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image8> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("file too short for magic"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(cur.err("bad magic, expected P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte between maxval and the body.
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace before sample body")),
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    let want = width * height * channels;
    let got = bytes.len() - cur.pos;
    if got < want {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated body: have {got} bytes, need {want}"),
        });
    }
    if got > want {
        return Err(Error::Parse {
            offset: cur.pos + want,
            message: format!("trailing bytes: have {got}, declared size needs {want}"),
        });
    }
    Image8::new(width, height, channels, bytes[cur.pos..].to_vec())
}

/// Encode to binary PGM/PPM with maxval 255.
pub fn encode_ppm(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Image to a 1 x C x H x W tensor with values in [0, 1].
pub fn to_tensor(img: &Image8) -> Tensor {
    let shape = Shape::new(1, img.channels, img.height, img.width);
    let mut data = vec![0.0; shape.numel()];
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                data[(c * img.height + y) * img.width + x] =
                    img.sample(x, y, c) as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(shape, data).expect("image tensor shape")
}

/// Tensor back to 8 bits: clamp to [0, 1], scale by 255, round half away
/// from zero.
pub fn from_tensor(t: &Tensor) -> Result<Image8> {
    let s = t.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::invalid(format!(
            "from_tensor expects 1x{{1|3}}xHxW, got {s}"
        )));
    }
    let d = t.data();
    let mut data = vec![0u8; s.c * s.h * s.w];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                let v = d[(c * s.h + y) * s.w + x].clamp(0.0, 1.0) * 255.0;
                data[(y * s.w + x) * s.c + c] = math::round(v) as u8;
            }
        }
    }
    Image8::new(s.w, s.h, s.c, data)
}

/// Deterministic raster-order patch grid, truncated to `limit`; partial
/// patches are dropped.
pub fn extract_patches(img: &Image8, patch: usize, stride: usize, limit: usize) -> Result<Vec<Image8>> {
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch and stride must be positive"));
    }
    if patch > img.width || patch > img.height {
        return Err(Error::invalid(format!(
            "patch {patch} exceeds image {}x{}",
            img.width, img.height
        )));
    }
    let mut out = Vec::new();
    let mut y = 0;
    'grid: while y + patch <= img.height {
        let mut x = 0;
        while x + patch <= img.width {
            if out.len() >= limit {
                break 'grid;
            }
            let mut data = Vec::with_capacity(patch * patch * img.channels);
            for py in 0..patch {
                let row = ((y + py) * img.width + x) * img.channels;
                data.extend_from_slice(&img.data[row..row + patch * img.channels]);
            }
            out.push(Image8::new(patch, patch, img.channels, data)?);
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

/// One training example: a degraded LR patch, its clean-preset LR
/// counterpart (reference for the feature-consistency loss), the HR target,
/// and the noise label.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub lr: Image8,
    pub lr_clean: Image8,
    pub hr: Image8,
    /// True iff the generating degradation included additive noise.
    pub noisy: bool,
}

/// Ordered training pairs plus the upsampling factor between them.
#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    pub pairs: Vec<LabeledPair>,
    pub scale: usize,
}

impl PatchSet {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.hr.width != p.lr.width * self.scale || p.hr.height != p.lr.height * self.scale {
                return Err(Error::Data(format!(
                    "pair {i}: hr {}x{} is not lr {}x{} times scale {}",
                    p.hr.width, p.hr.height, p.lr.width, p.lr.height, self.scale
                )));
            }
            if p.lr_clean.width != p.lr.width || p.lr_clean.height != p.lr.height {
                return Err(Error::Data(format!("pair {i}: clean LR size mismatch")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_p6_direct_bytes() {
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.data, vec![255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn decode_p5_single_pixel() {
        let img = decode_ppm(b"P5\n1 1\n255\n\x80").unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 1));
        assert_eq!(img.data, vec![128]);
    }

    #[test]
    fn decode_rejects_wide_maxval() {
        let err = decode_ppm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(format!("{err}").contains("unsupported maxval"));
    }

    #[test]
    fn decode_rejects_truncated_and_trailing_bodies() {
        assert!(decode_ppm(b"P5\n2 2\n255\n\x00\x01\x02").is_err());
        assert!(decode_ppm(b"P5\n2 2\n255\n\x00\x01\x02\x03\x04").is_err());
    }

    #[test]
    fn decode_rejects_bad_magic_at_offset_zero() {
        match decode_ppm(b"P7\n1 1\n255\n\x00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn decode_skips_header_comments() {
        let img = decode_ppm(b"P5\n# a comment\n2 1\n# more\n255\n\x01\x02").unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn encode_decode_roundtrip_is_exact() {
        let img = Image8::new(2, 2, 3, (0..12).map(|i| (i * 21) as u8).collect()).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn checkerboard_body_layout() {
        // 2x2 RGB checkerboard: white, black / black, white, row-major
        // interleaved = 12 bytes.
        let img = Image8::new(
            2,
            2,
            3,
            vec![255, 255, 255, 0, 0, 0, 0, 0, 0, 255, 255, 255],
        )
        .unwrap();
        let bytes = encode_ppm(&img);
        let body = &bytes[bytes.len() - 12..];
        assert_eq!(body, &[255, 255, 255, 0, 0, 0, 0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn grayscale_zero_body_is_single_zero_byte() {
        let img = Image8::new(1, 1, 1, vec![0]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(bytes[bytes.len() - 1], 0x00);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn tensor_conversion_values() {
        let img = Image8::new(3, 1, 1, vec![255, 0, 128]).unwrap();
        let t = to_tensor(&img);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn eight_bit_roundtrip_all_values() {
        let img = Image8::new(256, 1, 1, (0..=255).collect()).unwrap();
        let back = from_tensor(&to_tensor(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn from_tensor_clamps_and_rounds_half_away() {
        let t = Tensor::from_vec(
            Shape::new(1, 1, 1, 4),
            vec![-0.5, 1.5, 0.5 / 255.0, 1.5 / 255.0],
        )
        .unwrap();
        let img = from_tensor(&t).unwrap();
        assert_eq!(img.data, vec![0, 255, 1, 2]);
    }

    #[test]
    fn patch_grid_counts() {
        let img = Image8::zeros(64, 64, 1);
        assert_eq!(extract_patches(&img, 32, 32, usize::MAX).unwrap().len(), 4);
        let img = Image8::zeros(32, 32, 1);
        let patches = extract_patches(&img, 32, 32, usize::MAX).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], img);
    }

    #[test]
    fn patch_grid_offsets_48_by_48() {
        let mut img = Image8::zeros(48, 48, 1);
        for y in 0..48 {
            for x in 0..48 {
                img.data[y * 48 + x] = (x + y) as u8;
            }
        }
        let patches = extract_patches(&img, 32, 16, usize::MAX).unwrap();
        assert_eq!(patches.len(), 4);
        // Raster order: (0,0), (0,16), (16,0), (16,16) as (row, col) offsets.
        for (i, (oy, ox)) in [(0, 0), (0, 16), (16, 0), (16, 16)].iter().enumerate() {
            assert_eq!(patches[i].sample(0, 0, 0), (ox + oy) as u8);
        }
    }

    #[test]
    fn patch_limit_caps_output() {
        let img = Image8::zeros(64, 64, 1);
        assert_eq!(extract_patches(&img, 16, 16, 5).unwrap().len(), 5);
    }

    #[test]
    fn patch_larger_than_image_errors() {
        let img = Image8::zeros(16, 16, 1);
        assert!(extract_patches(&img, 32, 8, usize::MAX).is_err());
    }
}
