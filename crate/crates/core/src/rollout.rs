//! Attention rollout: head-averaged, identity-augmented attention matrices
//! multiplied through the layers, rendered as a heatmap over the input.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::data::resize_bilinear_to;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::AttentionTrace;

/// Square matrix stored row-major in 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("attention matrix must be square".into()));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (d, &b) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Matrix { n, data }
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Unweighted mean over the head axis of a `[heads, S, S]` tensor.
pub fn average_heads<T: Scalar>(layer: &Tensor<T>) -> Result<Matrix> {
    let &[heads, s, s2] = layer.shape() else {
        return Err(Error::shape("average_heads", layer.shape(), &[0, 0, 0]));
    };
    if s != s2 {
        return Err(Error::shape("average_heads", layer.shape(), &[heads, s, s]));
    }
    let mut data = vec![0.0; s * s];
    for h in layer.data().chunks(s * s) {
        for (d, &v) in data.iter_mut().zip(h) {
            *d += v.to_f64_lossy();
        }
    }
    for d in &mut data {
        *d /= heads as f64;
    }
    Ok(Matrix { n: s, data })
}

/// `(A + I) / 2`.
pub fn add_identity_normalize(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.n {
        for j in 0..a.n {
            let id = if i == j { 1.0 } else { 0.0 };
            out.data[i * a.n + j] = (a.get(i, j) + id) / 2.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// `R = Ã_L · … · Ã_1`.
    pub relevance: Matrix,
    /// Row 0 of `relevance`.
    pub class_row: Vec<f64>,
    /// Class-token row without its self entry, reshaped to the patch grid
    /// and min-max rescaled to `[0, 1]`.
    pub grid: Vec<f64>,
    pub grid_size: usize,
}

/// Product of the augmented per-layer matrices with the deepest layer as
/// the leftmost factor.
pub fn rollout_matrices(layers: &[Matrix]) -> Result<Matrix> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Contract("attention trace has no layers".into()))?;
    let mut r = Matrix::identity(first.n);
    for a in layers {
        if a.n != first.n {
            return Err(Error::Contract(format!(
                "attention layers disagree on sequence length ({} vs {})",
                a.n, first.n
            )));
        }
        r = add_identity_normalize(a).matmul(&r);
    }
    Ok(r)
}

pub fn rollout<T: Scalar>(trace: &AttentionTrace<T>) -> Result<RolloutMap> {
    let layers = trace
        .per_layer
        .iter()
        .map(average_heads)
        .collect::<Result<Vec<_>>>()?;
    let relevance = rollout_matrices(&layers)?;
    let class_row = relevance.row(0).to_vec();
    let n = relevance.n - 1;
    let grid_size = (n as f64).sqrt().round() as usize;
    if grid_size * grid_size != n {
        return Err(Error::Contract(format!(
            "{n} patch tokens do not form a square grid"
        )));
    }
    Ok(RolloutMap {
        grid: rescale(&class_row[1..]),
        relevance,
        class_row,
        grid_size,
    })
}

/// Min-max rescale to `[0, 1]`; a constant input maps to 0.5 everywhere.
pub fn rescale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Raw class-token relevance per patch, one grid row per line.
pub fn grid_csv(map: &RolloutMap) -> String {
    let raw = &map.class_row[1..];
    let mut out = String::new();
    for row in raw.chunks(map.grid_size) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Colour for `t ∈ [0, 1]`, quantised to 256 levels of a jet-style
/// blue-cyan-yellow-red ramp.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let level = (t.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let channel = |centre: f64| {
        let v = (1.5 - (4.0 * level - centre).abs()).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    };
    [channel(3.0), channel(2.0), channel(1.0)]
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Upsamples the grid to the image size, colours it and blends it over
/// `image` (`[H, W, 3]`, values in `[0, 1]`).
pub fn render_overlay(grid: &[f64], grid_size: usize, image: &Tensor<f32>) -> Result<RgbImage> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("overlay", image.shape(), &[0, 0, 3]));
    };
    if grid.len() != grid_size * grid_size {
        return Err(Error::Contract(format!(
            "grid has {} cells, expected {}",
            grid.len(),
            grid_size * grid_size
        )));
    }
    let field = Tensor::<f64>::new(vec![grid_size, grid_size, 1], grid.to_vec())?;
    let up = resize_bilinear_to(&field, h, w)?;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (idx, px) in out.pixels_mut().enumerate() {
        let color = ramp_color(up.data()[idx]);
        for c in 0..3 {
            let base = (image.data()[idx * 3 + c] as f64).clamp(0.0, 1.0) * 255.0;
            let v = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * color[c] as f64;
            px.0[c] = v.round() as u8;
        }
    }
    Ok(out)
}

pub fn overlay(grid: &[f64], grid_size: usize, image: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = render_overlay(grid, grid_size, image)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
