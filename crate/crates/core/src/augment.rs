//! Training-set augmentation: rotation, horizontal flip, HSV jitter,
//! brightness/contrast and shift/scale, plus five-fold dataset expansion.
//!
//! All transforms take and return `[H, W, 3]` pixels in `[0, 1]`.
//! Geometric transforms resample bilinearly and fill out-of-bounds samples
//! by reflecting about the edge pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Augmented copies added per original sample (expansion factor 5).
pub const AUGMENTED_COPIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_max_degrees: f64,
    pub hflip_probability: f64,
    pub hsv_enabled: bool,
    pub hue_shift_max: f64,
    pub saturation_shift_max: f64,
    pub brightness_delta_max: f64,
    pub contrast_factor_range: [f64; 2],
    pub shift_max_fraction: f64,
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_max_degrees: 30.0,
            hflip_probability: 0.5,
            hsv_enabled: true,
            hue_shift_max: 0.05,
            saturation_shift_max: 0.1,
            brightness_delta_max: 0.2,
            contrast_factor_range: [0.8, 1.25],
            shift_max_fraction: 0.1,
            scale_range: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("rotation_max_degrees", self.rotation_max_degrees),
            ("hue_shift_max", self.hue_shift_max),
            ("saturation_shift_max", self.saturation_shift_max),
            ("brightness_delta_max", self.brightness_delta_max),
            ("shift_max_fraction", self.shift_max_fraction),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{name} must be a finite non-negative value, got {v}"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config(format!(
                "hflip_probability {} must be in [0, 1]",
                self.hflip_probability
            )));
        }
        for (name, [lo, hi]) in [
            ("contrast_factor_range", self.contrast_factor_range),
            ("scale_range", self.scale_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} [{lo}, {hi}] must satisfy 0 < lo <= hi"
                )));
            }
        }
        Ok(())
    }
}

/// One concrete draw of transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub degrees: f64,
    pub flip: bool,
    pub hue_shift: f64,
    pub saturation_shift: f64,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub fn neutral() -> Self {
        Self {
            degrees: 0.0,
            flip: false,
            hue_shift: 0.0,
            saturation_shift: 0.0,
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(spec: &AugmentSpec, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, max: f64| {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        };
        let range = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let degrees = sym(rng, spec.rotation_max_degrees);
        let flip = rng.random_bool(spec.hflip_probability);
        let (hue_shift, saturation_shift) = if spec.hsv_enabled {
            (
                sym(rng, spec.hue_shift_max),
                sym(rng, spec.saturation_shift_max),
            )
        } else {
            (0.0, 0.0)
        };
        Self {
            degrees,
            flip,
            hue_shift,
            saturation_shift,
            brightness_delta: sym(rng, spec.brightness_delta_max),
            contrast_factor: range(rng, spec.contrast_factor_range),
            shift_x: sym(rng, spec.shift_max_fraction),
            shift_y: sym(rng, spec.shift_max_fraction),
            scale: range(rng, spec.scale_range),
        }
    }

    /// Rotation, shift/scale, flip, HSV jitter, then brightness/contrast.
    pub fn apply(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        let x = rotate(pixels, self.degrees);
        let x = shift_scale(&x, self.shift_x, self.shift_y, self.scale);
        let x = if self.flip { hflip(&x) } else { x };
        let x = hsv_jitter(&x, self.hue_shift, self.saturation_shift);
        brightness_contrast(&x, self.brightness_delta, self.contrast_factor)
    }
}

/// Reflects an integer index into `[0, n)` without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Resamples through `inverse`, which maps an output pixel (x, y) to the
/// source coordinate to read. Pixel centres sit on integer coordinates.
fn warp(pixels: &Tensor<f32>, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let s = pixels.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = pixels.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let xa = reflect(x0 as isize, w);
            let xb = reflect(x0 as isize + 1, w);
            let ya = reflect(y0 as isize, h);
            let yb = reflect(y0 as isize + 1, h);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

fn centre(pixels: &Tensor<f32>) -> (f64, f64) {
    let s = pixels.shape();
    ((s[1] as f64 - 1.0) / 2.0, (s[0] as f64 - 1.0) / 2.0)
}

/// Rotates counter-clockwise (as displayed) about the image centre.
pub fn rotate(pixels: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    if degrees == 0.0 {
        return pixels.clone();
    }
    let (cx, cy) = centre(pixels);
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(pixels, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    })
}

/// Reverses column order.
pub fn hflip(pixels: &Tensor<f32>) -> Tensor<f32> {
    let s = pixels.shape();
    let (w, c) = (s[1], s[2]);
    let mut out = Vec::with_capacity(pixels.numel());
    for row in pixels.data().chunks(w * c) {
        for px in row.chunks(c).rev() {
            out.extend_from_slice(px);
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

/// Translates by fractions of width/height and scales about the centre.
pub fn shift_scale(pixels: &Tensor<f32>, dx_frac: f64, dy_frac: f64, scale: f64) -> Tensor<f32> {
    if dx_frac == 0.0 && dy_frac == 0.0 && scale == 1.0 {
        return pixels.clone();
    }
    let s = pixels.shape();
    let (tx, ty) = (dx_frac * s[1] as f64, dy_frac * s[0] as f64);
    let (cx, cy) = centre(pixels);
    warp(pixels, |x, y| {
        (cx + (x - cx - tx) / scale, cy + (y - cy - ty) / scale)
    })
}

fn rgb_to_hsv_px(r: f64, g: f64, b: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = h / 6.0;
    [if h >= 1.0 { h - 1.0 } else { h }, s, max]
}

fn hsv_to_rgb_px(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map_pixels(pixels: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> [f64; 3]) -> Tensor<f32> {
    let mut out = Vec::with_capacity(pixels.numel());
    for px in pixels.data().chunks(3) {
        out.extend(f(px[0] as f64, px[1] as f64, px[2] as f64).map(|v| v as f32));
    }
    Tensor::new(pixels.shape().to_vec(), out).expect("shape preserved")
}

/// Hexcone RGB → HSV with hue in `[0, 1)`; achromatic pixels get hue 0.
pub fn rgb_to_hsv(pixels: &Tensor<f32>) -> Tensor<f32> {
    map_pixels(pixels, rgb_to_hsv_px)
}

pub fn hsv_to_rgb(pixels: &Tensor<f32>) -> Tensor<f32> {
    map_pixels(pixels, hsv_to_rgb_px)
}

/// Shifts hue (wrapping) and saturation (clamped) in HSV space.
pub fn hsv_jitter(pixels: &Tensor<f32>, hue_shift: f64, saturation_shift: f64) -> Tensor<f32> {
    if hue_shift == 0.0 && saturation_shift == 0.0 {
        return pixels.clone();
    }
    map_pixels(pixels, |r, g, b| {
        let [h, s, v] = rgb_to_hsv_px(r, g, b);
        let rgb = hsv_to_rgb_px(
            (h + hue_shift).rem_euclid(1.0),
            (s + saturation_shift).clamp(0.0, 1.0),
            v,
        );
        rgb.map(|c| c.clamp(0.0, 1.0))
    })
}

/// `clamp(factor·(x − 0.5) + 0.5 + delta, 0, 1)`.
pub fn brightness_contrast(pixels: &Tensor<f32>, delta: f64, factor: f64) -> Tensor<f32> {
    if delta == 0.0 && factor == 1.0 {
        return pixels.clone();
    }
    pixels.map(|x| (factor * (x as f64 - 0.5) + 0.5 + delta).clamp(0.0, 1.0) as f32)
}

/// Five-fold expansion: each original followed by four augmented copies.
/// Copy `v` of sample `i` draws its parameters from substream `(seed, i, v)`.
pub fn augment_dataset(samples: &[Sample], spec: &AugmentSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let groups = parallel::map(samples, |i, sample| {
        let mut group = Vec::with_capacity(AUGMENTED_COPIES + 1);
        group.push(sample.clone());
        for v in 0..AUGMENTED_COPIES {
            let mut rng = rng_for(spec.seed, &[i as u64, v as u64]);
            let params = AugmentParams::sample(spec, &mut rng);
            group.push(Sample {
                pixels: params.apply(&sample.pixels),
                label: sample.label,
                source_path: format!("{}#aug{}", sample.source_path, v + 1),
            });
        }
        group
    });
    Ok(groups.into_iter().flatten().collect())
}
