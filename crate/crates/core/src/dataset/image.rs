//! In-memory images, PPM IO, resampling and the augmentation pipeline.
//!
//! Pixels are f32 in [0,1], row-major HWC. Resampling uses half-pixel
//! centers (src = (dst + 0.5) * in/out - 0.5) in all modes, so mapping an
//! image onto its own size is the identity.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Bicubic,
    Area,
    Nearest,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 4] = [
        ResizeMode::Bilinear,
        ResizeMode::Bicubic,
        ResizeMode::Area,
        ResizeMode::Nearest,
    ];
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Image {
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Paint an axis-aligned rectangle; the rect must lie inside the image.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, rh: usize, rw: usize, color: &[f32]) {
        debug_assert_eq!(color.len(), self.c);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for ch in 0..self.c {
                    self.set(y, x, ch, color[ch]);
                }
            }
        }
    }

    /// Copy out a sub-rectangle; the rect must lie inside the image.
    pub fn crop(&self, y0: usize, x0: usize, ch_: usize, cw: usize) -> Image {
        debug_assert!(y0 + ch_ <= self.h && x0 + cw <= self.w);
        let mut out = Image::zeros(ch_, cw, self.c);
        for y in 0..ch_ {
            let src = self.idx(y0 + y, x0, 0);
            let dst = out.idx(y, 0, 0);
            out.data[dst..dst + cw * self.c]
                .copy_from_slice(&self.data[src..src + cw * self.c]);
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Flatten to an HxWxC tensor (the model's input layout).
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let vals = self.data.iter().map(|v| S::from_f64(*v as f64)).collect();
        Tensor::from_vec(&[self.h, self.w, self.c], vals).expect("image dims consistent")
    }

    /// Lossy byte quantization used by the PPM container.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(h: usize, w: usize, c: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != h * w * c {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} bytes, dims need {}",
                bytes.len(),
                h * w * c
            )));
        }
        let data = bytes.iter().map(|b| *b as f32 / 255.0).collect();
        Ok(Image { h, w, c, data })
    }

    /// Binary PPM (P6, maxval 255). Requires 3 channels.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.c != 3 {
            return Err(Error::invalid(format!("PPM needs 3 channels, image has {}", self.c)));
        }
        let mut buf = Vec::with_capacity(self.h * self.w * 3 + 32);
        write!(buf, "P6\n{} {}\n255\n", self.w, self.h).expect("vec write");
        buf.extend_from_slice(&self.to_bytes());
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        // Header: "P6", width, height, maxval as whitespace-separated tokens,
        // '#' comments allowed, then a single whitespace byte before pixels.
        let mut pos = 0usize;
        let mut token = |raw: &[u8]| -> Option<String> {
            while pos < raw.len() {
                if raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                } else if raw[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos > start {
                pos += 1; // consume the single delimiter after the token
                Some(String::from_utf8_lossy(&raw[start..pos - 1]).into_owned())
            } else {
                None
            }
        };
        let magic = token(&raw).ok_or_else(|| bad("missing magic"))?;
        if magic != "P6" {
            return Err(bad("not a P6 file"));
        }
        let w: usize = token(&raw).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad width"))?;
        let h: usize = token(&raw).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad height"))?;
        let maxval: usize =
            token(&raw).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        let need = h * w * 3;
        if raw.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Image::from_bytes(h, w, 3, &raw[pos..pos + need])
    }

    pub fn resize(&self, new_h: usize, new_w: usize, mode: ResizeMode) -> Image {
        let horiz = resample_axis(self, new_w, mode, true);
        resample_axis(&horiz, new_h, mode, false)
    }

    /// Separable Gaussian blur with edge replication. sigma <= 0 is a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();

        let mut tmp = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = 0.0f32;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sx = (x as i64 + ki as i64 - radius).clamp(0, self.w as i64 - 1);
                        acc += k * self.get(y, sx as usize, ch);
                    }
                    tmp.set(y, x, ch, acc);
                }
            }
        }
        let mut out = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = 0.0f32;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sy = (y as i64 + ki as i64 - radius).clamp(0, self.h as i64 - 1);
                        acc += k * tmp.get(sy as usize, x, ch);
                    }
                    out.set(y, x, ch, acc);
                }
            }
        }
        out
    }
}

/// Resample one axis. `horizontal` picks which dimension changes; the other
/// passes through, which makes every mode (box averaging included) separable.
fn resample_axis(img: &Image, new_len: usize, mode: ResizeMode, horizontal: bool) -> Image {
    let (old_len, other) = if horizontal { (img.w, img.h) } else { (img.h, img.w) };
    let mut out = if horizontal {
        Image::zeros(img.h, new_len, img.c)
    } else {
        Image::zeros(new_len, img.w, img.c)
    };
    let scale = old_len as f64 / new_len as f64;
    let fetch = |line: usize, i: i64, ch: usize| -> f32 {
        let i = i.clamp(0, old_len as i64 - 1) as usize;
        if horizontal {
            img.get(line, i, ch)
        } else {
            img.get(i, line, ch)
        }
    };
    let put = |o: &mut Image, line: usize, i: usize, ch: usize, v: f32| {
        if horizontal {
            o.set(line, i, ch, v);
        } else {
            o.set(i, line, ch, v);
        }
    };
    for line in 0..other {
        for i in 0..new_len {
            for ch in 0..img.c {
                let v = match mode {
                    ResizeMode::Nearest => {
                        let src = ((i as f64 + 0.5) * scale).floor() as i64;
                        fetch(line, src, ch)
                    }
                    ResizeMode::Bilinear => {
                        let src = (i as f64 + 0.5) * scale - 0.5;
                        let i0 = src.floor();
                        let t = (src - i0) as f32;
                        let a = fetch(line, i0 as i64, ch);
                        let b = fetch(line, i0 as i64 + 1, ch);
                        a + (b - a) * t
                    }
                    ResizeMode::Bicubic => {
                        let src = (i as f64 + 0.5) * scale - 0.5;
                        let i0 = src.floor();
                        let t = src - i0;
                        let mut acc = 0.0f64;
                        for off in -1i64..=2 {
                            let wgt = catmull_rom(t - off as f64);
                            acc += wgt * fetch(line, i0 as i64 + off, ch) as f64;
                        }
                        acc as f32
                    }
                    ResizeMode::Area => {
                        // Box filter over the covered source span [i*s, (i+1)*s).
                        let lo = i as f64 * scale;
                        let hi = (i as f64 + 1.0) * scale;
                        let mut acc = 0.0f64;
                        let first = lo.floor() as i64;
                        let last = (hi - 1e-9).floor() as i64;
                        for s in first..=last {
                            let cover = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                            acc += cover * fetch(line, s, ch) as f64;
                        }
                        (acc / (hi - lo)) as f32
                    }
                };
                put(&mut out, line, i, ch, v);
            }
        }
    }
    out
}

/// Catmull-Rom cubic kernel (a = -0.5); support (-2, 2), exact 1 at 0.
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// RGB in [0,1] to HSV with hue in [0,1) turns.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Photometric jitter: brightness delta +-0.125, contrast factor [0.5,1.5]
/// about the per-channel mean, saturation factor [0.5,1.5], hue rotation
/// +-0.1 turns, in that fixed order, then a [0,1] clamp.
pub fn photometric_distort(img: &mut Image, rng: &mut Rng) {
    let brightness = rng.uniform(-0.125, 0.125) as f32;
    let contrast = rng.uniform(0.5, 1.5) as f32;
    let saturation = rng.uniform(0.5, 1.5) as f32;
    let hue = rng.uniform(-0.1, 0.1) as f32;

    for v in &mut img.data {
        *v += brightness;
    }
    let n = (img.h * img.w) as f32;
    let mut mean = vec![0.0f32; img.c];
    for (i, v) in img.data.iter().enumerate() {
        mean[i % img.c] += *v;
    }
    for m in &mut mean {
        *m /= n;
    }
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = (*v - mean[i % img.c]) * contrast + mean[i % img.c];
    }
    if img.c == 3 {
        for px in img.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(
                px[0].clamp(0.0, 1.0),
                px[1].clamp(0.0, 1.0),
                px[2].clamp(0.0, 1.0),
            );
            let (r, g, b) = hsv_to_rgb(h + hue, (s * saturation).clamp(0.0, 1.0), v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }
    img.clamp01();
}

/// Sample a crop rectangle (y0, x0, h, w) keeping at least 4/5 of the input
/// area and changing the frame's aspect ratio by a factor within [4/5, 6/5]
/// (for square frames that is the crop's own width:height ratio; the
/// relative form stays feasible on any frame). Constraints are checked in
/// exact integer arithmetic; rejection sampling falls back to the full frame
/// if nothing lands, which keeps termination unconditional.
pub fn sample_crop(h: usize, w: usize, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let min_h = (4 * h).div_ceil(5).max(1);
    let min_w = (4 * w).div_ceil(5).max(1);
    let mut pick = (h, w);
    for _ in 0..10_000 {
        let ch = rng.range(min_h, h);
        let cw = rng.range(min_w, w);
        let aspect_ok = 5 * cw * h >= 4 * ch * w && 5 * cw * h <= 6 * ch * w;
        let area_ok = 5 * cw * ch >= 4 * w * h;
        if aspect_ok && area_ok {
            pick = (ch, cw);
            break;
        }
    }
    let (ch, cw) = pick;
    let y0 = rng.range(0, h - ch);
    let x0 = rng.range(0, w - cw);
    (y0, x0, ch, cw)
}

/// Training-time view augmentation: constrained random crop, resize back to
/// the original size with one of four interpolators, then photometric jitter.
pub fn augment_view(view: &Image, rng: &mut Rng) -> Image {
    let (y0, x0, ch, cw) = sample_crop(view.h, view.w, rng);
    let cropped = view.crop(y0, x0, ch, cw);
    let mode = ResizeMode::ALL[rng.below(4)];
    let mut out = cropped.resize(view.h, view.w, mode);
    photometric_distort(&mut out, rng);
    out
}
