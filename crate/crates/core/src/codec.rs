//! Exact image <-> latent codec and horizontal latent canvases.
//!
//! The codec is a space-to-depth rearrangement followed by the affine map
//! `z = 2x - 1`. Pixels are kept on a 24-bit fixed-point lattice, which makes
//! that map and its inverse exact in `f32`.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{io_err, Error, Result};

/// Default patch size.
pub const DEFAULT_PATCH: usize = 8;

const LATTICE: f32 = 16_777_216.0; // 2^24

fn snap(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * LATTICE).round() / LATTICE
}

/// RGB image, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping to `[0, 1]` and snapping to the pixel lattice.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image must be non-empty".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel value {v}")));
        }
        Ok(Self { height, width, pixels: pixels.into_iter().map(snap).collect() })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(height, width, pixels)
    }

    pub fn from_rgb8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (k, v) in rgb.iter().enumerate() {
            self.pixels[i + k] = snap(*v);
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Per-pixel inverse `1 - x`.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| snap(1.0 - v)).collect(),
        }
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("image sizes differ".into()));
        }
        let n = self.pixels.len() as f64;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n)
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Stacks images of equal size into a `(B, 3, H, W)` tensor.
    pub fn batch_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
        let ts = images.iter().map(|im| im.to_tensor(device)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Reads a `(3, H, W)` tensor back into an image.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "{}: expected 8-bit RGB, got {:?}/{:?}",
                path.display(),
                info.color_type,
                info.bit_depth
            )));
        }
        Self::from_rgb8(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
    }
}

/// Latent grid, row-major `h x w x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f32>,
}

impl Latent {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::Shape(format!("latent {h}x{w}x{c} needs {} values, got {}", h * w * c, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent values".into()));
        }
        Ok(Self { h, w, c, values })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, values: vec![0.0; h * w * c] }
    }

    /// `(h*w, c)` token matrix.
    pub fn to_tokens(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.h * self.w, self.c), device)?)
    }

    pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, c) = t.dims2()?;
        if n != h * w {
            return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
        }
        let values = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, c, values)
    }
}

pub fn latent_channels(p: usize) -> usize {
    3 * p * p
}

/// Space-to-depth then `[0,1] -> [-1,1]`. Channel index is `(dy * p + dx) * 3 + rgb`.
pub fn encode_image(img: &Image, p: usize) -> Result<Latent> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is not divisible by patch size {p}",
            img.height, img.width
        )));
    }
    let (h, w, c) = (img.height / p, img.width / p, latent_channels(p));
    let mut values = vec![0f32; h * w * c];
    for y in 0..img.height {
        for x in 0..img.width {
            let (ty, dy, tx, dx) = (y / p, y % p, x / p, x % p);
            let base = (ty * w + tx) * c + (dy * p + dx) * 3;
            let src = (y * img.width + x) * 3;
            for k in 0..3 {
                values[base + k] = 2.0 * img.pixels[src + k] - 1.0;
            }
        }
    }
    Ok(Latent { h, w, c, values })
}

/// Inverse of [`encode_image`]; values outside `[-1, 1]` clamp to the pixel range.
pub fn decode_latent(z: &Latent, p: usize) -> Result<Image> {
    if p == 0 || z.c != latent_channels(p) {
        return Err(Error::InvalidInput(format!(
            "latent has {} channels but patch size {p} needs {}",
            z.c,
            latent_channels(p)
        )));
    }
    let (height, width) = (z.h * p, z.w * p);
    let mut pixels = vec![0f32; height * width * 3];
    for ty in 0..z.h {
        for tx in 0..z.w {
            for dy in 0..p {
                for dx in 0..p {
                    let base = (ty * z.w + tx) * z.c + (dy * p + dx) * 3;
                    let dst = ((ty * p + dy) * width + tx * p + dx) * 3;
                    for k in 0..3 {
                        pixels[dst + k] = (z.values[base + k] + 1.0) / 2.0;
                    }
                }
            }
        }
    }
    Image::new(height, width, pixels)
}

/// Differentiable decode of `(B, h*w, c)` latent tokens to `(B, 3, H, W)` images.
pub fn decode_tokens(tokens: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n != h * w || c != latent_channels(p) {
        return Err(Error::Shape(format!("tokens ({b},{n},{c}) do not match grid {h}x{w} with p={p}")));
    }
    let img = tokens
        .reshape((b, h, w, p, p, 3))?
        .permute((0, 5, 1, 3, 2, 4))?
        .reshape((b, 3, h * p, w * p))?;
    Ok(((img + 1.0)? / 2.0)?.clamp(0.0, 1.0)?)
}

/// Differentiable encode of `(B, 3, H, W)` images into `(B, h*w, c)` tokens.
pub fn encode_tensor(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, ch, hh, ww) = images.dims4()?;
    if ch != 3 || hh % p != 0 || ww % p != 0 {
        return Err(Error::InvalidInput(format!("image batch {hh}x{ww}x{ch} incompatible with p={p}")));
    }
    let (h, w) = (hh / p, ww / p);
    let t = images
        .reshape((b, 3, h, p, w, p))?
        .permute((0, 2, 4, 3, 5, 1))?
        .reshape((b, h * w, latent_channels(p)))?;
    Ok(((t * 2.0)? - 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentRole {
    Reference,
    Target,
}

/// Latents placed side by side along the width axis, references first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCanvas {
    pub h: usize,
    pub c: usize,
    pub values: Vec<f32>,
    pub segment_widths: Vec<usize>,
    pub segment_roles: Vec<SegmentRole>,
}

impl LatentCanvas {
    pub fn width(&self) -> usize {
        self.segment_widths.iter().sum()
    }

    pub fn reference_width(&self) -> usize {
        self.segment_widths
            .iter()
            .zip(&self.segment_roles)
            .filter(|(_, r)| **r == SegmentRole::Reference)
            .map(|(w, _)| w)
            .sum()
    }

    pub fn target_width(&self) -> Option<usize> {
        self.segment_widths
            .iter()
            .zip(&self.segment_roles)
            .find(|(_, r)| **r == SegmentRole::Target)
            .map(|(w, _)| *w)
    }

    pub fn num_references(&self) -> usize {
        self.segment_roles.iter().filter(|r| **r == SegmentRole::Reference).count()
    }

    /// Column offset of each segment.
    pub fn segment_offsets(&self) -> Vec<usize> {
        self.segment_widths
            .iter()
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w;
                Some(start)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_widths.is_empty() || self.segment_widths.len() != self.segment_roles.len() {
            return Err(Error::CorruptCanvas("segment metadata lengths disagree".into()));
        }
        if self.segment_widths.contains(&0) {
            return Err(Error::CorruptCanvas("zero-width segment".into()));
        }
        let targets = self.segment_roles.iter().filter(|r| **r == SegmentRole::Target).count();
        if targets > 1 {
            return Err(Error::CorruptCanvas(format!("{targets} target segments")));
        }
        if targets == 1 && self.segment_roles.last() != Some(&SegmentRole::Target) {
            return Err(Error::CorruptCanvas("target segment must be last".into()));
        }
        if self.values.len() != self.h * self.width() * self.c {
            return Err(Error::CorruptCanvas(format!(
                "{} values do not fill {}x{}x{}",
                self.values.len(),
                self.h,
                self.width(),
                self.c
            )));
        }
        Ok(())
    }

    /// `(h*W, c)` token matrix in row-major canvas order.
    pub fn to_tokens(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.h * self.width(), self.c), device)?)
    }

    /// Same layout, new values from a `(h*W, c)` token matrix.
    pub fn with_tokens(&self, t: &Tensor) -> Result<Self> {
        let (n, c) = t.dims2()?;
        if n != self.h * self.width() || c != self.c {
            return Err(Error::Shape(format!("tokens ({n},{c}) do not fit canvas {}x{}x{}", self.h, self.width(), self.c)));
        }
        let values = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("canvas values".into()));
        }
        Ok(Self { values, ..self.clone() })
    }
}

pub fn concat_canvas(refs: &[Latent], target: Option<&Latent>) -> Result<LatentCanvas> {
    let all: Vec<&Latent> = refs.iter().chain(target).collect();
    let first = all.first().ok_or_else(|| Error::InvalidInput("canvas needs at least one latent".into()))?;
    let (h, c) = (first.h, first.c);
    if let Some(bad) = all.iter().find(|z| z.h != h || z.c != c) {
        return Err(Error::InvalidInput(format!(
            "latent {}x{}x{} does not share height/channels with {h}x_x{c}",
            bad.h, bad.w, bad.c
        )));
    }
    let total_w: usize = all.iter().map(|z| z.w).sum();
    let mut values = Vec::with_capacity(h * total_w * c);
    for y in 0..h {
        for z in &all {
            values.extend_from_slice(&z.values[y * z.w * c..(y + 1) * z.w * c]);
        }
    }
    let mut segment_roles = vec![SegmentRole::Reference; refs.len()];
    if target.is_some() {
        segment_roles.push(SegmentRole::Target);
    }
    Ok(LatentCanvas { h, c, values, segment_widths: all.iter().map(|z| z.w).collect(), segment_roles })
}

pub fn split_canvas(canvas: &LatentCanvas) -> Result<(Vec<Latent>, Option<Latent>)> {
    canvas.validate()?;
    let (h, c, total_w) = (canvas.h, canvas.c, canvas.width());
    let mut refs = Vec::new();
    let mut target = None;
    for ((&w, &role), start) in canvas.segment_widths.iter().zip(&canvas.segment_roles).zip(canvas.segment_offsets()) {
        let mut values = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let row = (y * total_w + start) * c;
            values.extend_from_slice(&canvas.values[row..row + w * c]);
        }
        let z = Latent { h, w, c, values };
        match role {
            SegmentRole::Reference => refs.push(z),
            SegmentRole::Target => target = Some(z),
        }
    }
    Ok((refs, target))
}
