use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound on the standard deviation used by [`standardize`].
pub const STD_FLOOR: f64 = 1e-6;

/// Bilinear resize of an `[H, W, C]` image to `out × out` with half-pixel
/// centred sampling (source edges are clamped).
pub fn resize_bilinear<T: Scalar>(pixels: &Tensor<T>, out: usize) -> Result<Tensor<T>> {
    resize_bilinear_to(pixels, out, out)
}

pub fn resize_bilinear_to<T: Scalar>(
    pixels: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = pixels.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!(
            "cannot resize {s:?} to {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return Ok(pixels.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = pixels.data();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch].to_f64_lossy();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], data)
}

/// Per-sample standardisation over all pixels and channels jointly:
/// `(x − μ) / max(σ, 1e-6)` with population σ.
pub fn standardize<T: Scalar>(pixels: &Tensor<T>) -> Tensor<T> {
    let n = pixels.numel() as f64;
    let mean = pixels.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = pixels
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy() - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(STD_FLOOR);
    pixels.map(|v| T::from_f64_lossy((v.to_f64_lossy() - mean) / std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(t: &Tensor<f32>) -> (f64, f64) {
        let n = t.numel() as f64;
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = t
            .data()
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / n;
        (m, v.sqrt())
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::<f32>::from_fn(&[224, 224, 3], |i| (i % 17) as f32 / 17.0);
        assert_eq!(resize_bilinear(&img, 224).unwrap(), img);
        let c = Tensor::<f32>::full(&[37, 51, 3], 0.3);
        let r = resize_bilinear(&c, 224).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn checkerboard_upsample_matches_hand_weights() {
        // 2x2 {0,1} checkerboard -> 4x4. Source coordinates of output
        // indices 0..4 are clamp(-0.25), 0.25, 0.75, clamp(1.25).
        let img = Tensor::<f64>::new(vec![2, 2, 1], vec![0., 1., 1., 0.]).unwrap();
        let r = resize_bilinear(&img, 4).unwrap();
        let bil = |fy: f64, fx: f64| {
            let p = [[0.0, 1.0], [1.0, 0.0]];
            (1. - fy) * (1. - fx) * p[0][0]
                + (1. - fy) * fx * p[0][1]
                + fy * (1. - fx) * p[1][0]
                + fy * fx * p[1][1]
        };
        assert!((r.at(&[1, 1, 0]) - bil(0.25, 0.25)).abs() < 1e-12);
        assert!((r.at(&[1, 2, 0]) - bil(0.25, 0.75)).abs() < 1e-12);
        assert!((r.at(&[2, 1, 0]) - bil(0.75, 0.25)).abs() < 1e-12);
        assert!((r.at(&[2, 2, 0]) - bil(0.75, 0.75)).abs() < 1e-12);
        assert_eq!(r.at(&[1, 1, 0]), 0.375);
        assert_eq!(r.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn resize_stays_in_range() {
        let img = Tensor::<f32>::from_fn(&[13, 7, 3], |i| ((i * 31) % 11) as f32 / 10.0 - 0.2);
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let r = resize_bilinear(&img, 40).unwrap();
        assert!(r.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn standardize_cases() {
        let c = Tensor::<f32>::full(&[4, 4, 3], 0.7);
        assert!(standardize(&c).data().iter().all(|&v| v == 0.0));

        let two = Tensor::<f32>::from_fn(&[2, 2, 1], |i| (i % 2) as f32);
        assert_eq!(standardize(&two).data(), &[-1.0, 1.0, -1.0, 1.0]);

        let img = Tensor::<f32>::from_fn(&[16, 16, 3], |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let s = standardize(&img);
        let (m, sd) = stats(&s);
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4, "{m} {sd}");
        assert!(standardize(&s).max_abs_diff(&s) < 1e-5);
    }
}
