//! Small float images and the photometric/geometric transforms applied to them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Luma weights for RGB to grayscale.
pub const LUMA: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// `height x width x channels` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return shape_err(format!("images have 1 or 3 channels, got {channels}"));
        }
        if pixels.len() != height * width * channels {
            return shape_err(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }

    fn luma_at(&self, y: usize, x: usize) -> f64 {
        if self.channels == 1 {
            self.get(y, x, 0)
        } else {
            (0..3).map(|c| LUMA[c] * self.get(y, x, c)).sum()
        }
    }

    fn mean_luma(&self) -> f64 {
        let mut s = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                s += self.luma_at(y, x);
            }
        }
        s / (self.height * self.width) as f64
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(img: &Image) -> Self {
        Self {
            top: 0,
            left: 0,
            height: img.height,
            width: img.width,
        }
    }
}

/// Draws a crop with area fraction uniform in `scale` and aspect ratio
/// log-uniform in `ratio`. Falls back to a centered crop after 10 misses.
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
) -> CropBox {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    // fallback: largest centered crop with aspect ratio inside the bounds
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (
            width,
            ((width as f64 / ratio.0).round() as usize).clamp(1, height),
        )
    } else if in_ratio > ratio.1 {
        (
            ((height as f64 * ratio.1).round() as usize).clamp(1, width),
            height,
        )
    } else {
        (width, height)
    };
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Crops `bx` out of `img` and resizes it to `out x out` with bicubic
/// interpolation. Samples outside the crop are clamped to its border.
pub fn resized_crop(img: &Image, bx: CropBox, out: usize) -> Image {
    let ch = img.channels;
    let mut dst = Image::constant(out, out, ch, 0.0);
    let sy = bx.height as f64 / out as f64;
    let sx = bx.width as f64 / out as f64;
    let taps = |pos: f64, len: usize| -> [(usize, f64); 4] {
        let base = pos.floor();
        let frac = pos - base;
        let mut t = [(0usize, 0.0); 4];
        for (k, slot) in t.iter_mut().enumerate() {
            let off = k as f64 - 1.0;
            let idx = (base + off).clamp(0.0, (len - 1) as f64) as usize;
            *slot = (idx, cubic_weight(frac - off));
        }
        t
    };
    for oy in 0..out {
        let ty = taps((oy as f64 + 0.5) * sy - 0.5, bx.height);
        for ox in 0..out {
            let tx = taps((ox as f64 + 0.5) * sx - 0.5, bx.width);
            for c in 0..ch {
                let mut v = 0.0;
                for &(yy, wy) in &ty {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(xx, wx) in &tx {
                        if wx == 0.0 {
                            continue;
                        }
                        v += wy * wx * img.get(bx.top + yy, bx.left + xx, c);
                    }
                }
                dst.set(oy, ox, c, v);
            }
        }
    }
    dst.clamp01();
    dst
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    out: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
) -> Image {
    let bx = sample_crop(rng, img.height, img.width, scale, ratio);
    resized_crop(img, bx, out)
}

pub fn horizontal_flip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Luma conversion; RGB inputs keep three (equal) channels.
pub fn grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = img.luma_at(y, x);
            for c in 0..3 {
                out.set(y, x, c, l);
            }
        }
    }
    out
}

/// `x` below 0.5 is kept, otherwise mapped to `1 - x`.
pub fn solarize_value(x: f64) -> f64 {
    if x < 0.5 {
        x
    } else {
        1.0 - x
    }
}

pub fn solarize(img: &Image) -> Image {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|p| *p = solarize_value(*p));
    out
}

/// Odd kernel side for a given image side: nearest odd integer to a tenth
/// of the side, at least 3.
pub fn blur_kernel_side(image_side: usize) -> usize {
    let target = image_side as f64 * 0.1;
    let k = 2.0 * ((target - 1.0) / 2.0).round() + 1.0;
    (k.max(3.0)) as usize
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur_sigma(img: &Image, sigma: f64) -> Image {
    let side = blur_kernel_side(img.height.max(img.width));
    let r = (side / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);

    let (h, w, ch) = (img.height as isize, img.width as isize, img.channels);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v: f64 = (-r..=r)
                    .map(|i| {
                        kernel[(i + r) as usize]
                            * img.get(y as usize, (x + i).clamp(0, w - 1) as usize, c)
                    })
                    .sum();
                tmp.set(y as usize, x as usize, c, v);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v: f64 = (-r..=r)
                    .map(|i| {
                        kernel[(i + r) as usize]
                            * tmp.get((y + i).clamp(0, h - 1) as usize, x as usize, c)
                    })
                    .sum();
                out.set(y as usize, x as usize, c, v);
            }
        }
    }
    out.clamp01();
    out
}

pub fn gaussian_blur<R: Rng + ?Sized>(img: &Image, rng: &mut R, sigma_range: (f64, f64)) -> Image {
    let sigma = uniform(rng, sigma_range.0, sigma_range.1);
    gaussian_blur_sigma(img, sigma)
}

fn adjust_brightness(img: &mut Image, f: f64) {
    img.pixels.iter_mut().for_each(|p| *p *= f);
    img.clamp01();
}

fn adjust_contrast(img: &mut Image, f: f64) {
    let m = img.mean_luma();
    img.pixels.iter_mut().for_each(|p| *p = (*p - m) * f + m);
    img.clamp01();
}

fn adjust_saturation(img: &mut Image, f: f64) {
    let gray = grayscale(img);
    for (p, g) in img.pixels.iter_mut().zip(&gray.pixels) {
        *p = g + f * (*p - g);
    }
    img.clamp01();
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx == 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut Image, shift: f64) {
    for px in img.pixels.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    img.clamp01();
}

/// Random brightness, contrast, saturation and hue shifts in random order.
/// Single-channel images only get brightness and contrast.
pub fn color_jitter<R: Rng + ?Sized>(img: &Image, rng: &mut R, strength: f64) -> Image {
    let mut out = img.clone();
    let mut ops: Vec<u8> = if img.channels == 3 {
        vec![0, 1, 2, 3]
    } else {
        vec![0, 1]
    };
    ops.shuffle(rng);
    for op in ops {
        match op {
            0 => {
                let f = uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength);
                adjust_brightness(&mut out, f);
            }
            1 => {
                let f = uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength);
                adjust_contrast(&mut out, f);
            }
            2 => {
                let f = uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength);
                adjust_saturation(&mut out, f);
            }
            _ => {
                let h = strength / 4.0;
                let shift = uniform(rng, -h, h);
                adjust_hue(&mut out, shift);
            }
        }
    }
    out
}

/// Center crop to `floor(7/8 * side)` then bicubic resize to `out`.
pub fn eval_transform(img: &Image, out: usize) -> Image {
    let h = img.height * 7 / 8;
    let w = img.width * 7 / 8;
    let bx = CropBox {
        top: (img.height - h) / 2,
        left: (img.width - w) / 2,
        height: h.max(1),
        width: w.max(1),
    };
    resized_crop(img, bx, out)
}
