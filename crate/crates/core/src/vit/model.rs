use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::params::layer_key;
use super::{ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Post-softmax attention of every layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T: Scalar = f32> {
    /// One `[heads, S, S]` tensor per encoder layer.
    pub per_layer: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.per_layer
            .iter()
            .flat_map(|t| {
                let s = *t.shape().last().unwrap();
                t.data()
                    .chunks(s)
                    .map(|row| (row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Splits an `[H, W, C]` image into non-overlapping `P×P` patches in
/// row-major patch order, each flattened over (row, column, channel).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!(
            "patchify expects [H, W, C], got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..patch {
                let start = ((py * patch + r) * w + px * patch) * c;
                data.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, plen], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (height / patch, width / patch);
    if patches.shape() != [gh * gw, patch * patch * channels]
        || !height.is_multiple_of(patch)
        || !width.is_multiple_of(patch)
    {
        return Err(Error::shape(
            "unpatchify",
            patches.shape(),
            &[height, width, channels],
        ));
    }
    let mut out = vec![T::zero(); height * width * channels];
    let src = patches.data();
    let row = patch * channels;
    for py in 0..gh {
        for px in 0..gw {
            let base = (py * gw + px) * patch * row;
            for r in 0..patch {
                let dst = ((py * patch + r) * width + px * patch) * channels;
                out[dst..dst + row].copy_from_slice(&src[base + r * row..base + (r + 1) * row]);
            }
        }
    }
    Tensor::new(vec![height, width, channels], out)
}

/// Graph handles for every parameter tensor.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Records every tensor of `params` as a borrowed leaf; tensors for
    /// which `trainable(name)` holds request gradients.
    pub fn register<'a, T: Scalar>(
        g: &mut Graph<'a, T>,
        params: &'a ModelParams<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t, trainable(name))))
            .collect();
        Self { vars }
    }

    /// Uses existing graph nodes, for example when checking gradients with
    /// respect to the parameters.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Inventory(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Parameter handles of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2: (Var, Var),
    pub mlp1: (Var, Var),
    pub mlp2: (Var, Var),
}

impl LayerVars {
    pub fn lookup(vars: &ParamVars, layer: usize) -> Result<Self> {
        let v = |s: &str| vars.get(&layer_key(layer, s));
        Ok(Self {
            ln1: (v("ln1.gamma")?, v("ln1.beta")?),
            wq: v("attn.wq")?,
            bq: v("attn.bq")?,
            wk: v("attn.wk")?,
            bk: v("attn.bk")?,
            wv: v("attn.wv")?,
            bv: v("attn.bv")?,
            wo: v("attn.wo")?,
            bo: v("attn.bo")?,
            ln2: (v("ln2.gamma")?, v("ln2.beta")?),
            mlp1: (v("mlp1.weight")?, v("mlp1.bias")?),
            mlp2: (v("mlp2.weight")?, v("mlp2.bias")?),
        })
    }
}

/// Optional stochastic regularisation for training passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(
        this: &mut Option<Dropout<'_>>,
        g: &mut Graph<'_, T>,
        x: Var,
    ) -> Result<Var> {
        match this {
            Some(d) if d.rate > 0.0 => g.dropout(x, d.rate, d.rng),
            _ => Ok(x),
        }
    }
}

fn eps<T: Scalar>() -> T {
    T::from_f64_lossy(LN_EPS)
}

/// Patch projection, class-token prepend and positional embedding.
/// `patches: [B, N, P²C]` → `[B, N+1, D]`.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, vars: &ParamVars, patches: Var) -> Result<Var> {
    let s = g.shape(patches).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!(
            "embed expects [B, N, P²C], got {s:?}"
        )));
    }
    let proj = g.linear(
        patches,
        vars.get("patch_embed.weight")?,
        vars.get("patch_embed.bias")?,
    )?;
    let cls = g.expand_leading(vars.get("cls_token")?, s[0])?;
    let tokens = g.concat(&[cls, proj], 1)?;
    g.add_broadcast(tokens, vars.get("pos_embed")?)
}

/// Multi-head self-attention over `x: [B, S, D]` (or `[S, D]`).
/// Returns the projected output and, when `capture`, the attention
/// weights `[B, heads, S, S]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &LayerVars,
    x: Var,
    heads: usize,
    capture: bool,
) -> Result<(Var, Option<Var>)> {
    let shape = g.shape(x).to_vec();
    let (x3, squeeze) = match shape.len() {
        2 => (g.reshape(x, &[1, shape[0], shape[1]])?, true),
        3 => (x, false),
        _ => {
            return Err(Error::Contract(format!(
                "attention expects [B, S, D], got {shape:?}"
            )))
        }
    };
    let s3 = g.shape(x3).to_vec();
    let (b, s, d) = (s3[0], s3[1], s3[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    let split = |g: &mut Graph<'_, T>, w: Var, bias: Var| -> Result<Var> {
        let y = g.linear(x3, w, bias)?;
        let y = g.reshape(y, &[b, s, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, layer.wq, layer.bq)?;
    let k = split(g, layer.wk, layer.bk)?;
    let v = split(g, layer.wv, layer.bv)?;

    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()))?;
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, s, d])?;
    let mut out = g.linear(ctx, layer.wo, layer.bo)?;
    if squeeze {
        out = g.reshape(out, &[s, d])?;
    }
    Ok((out, capture.then_some(attn)))
}

/// Pre-norm encoder block: `x + MSA(LN(x))` followed by `x + MLP(LN(x))`.
pub fn encoder_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &LayerVars,
    x: Var,
    heads: usize,
    capture: bool,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Option<Var>)> {
    let h = g.layer_norm(x, layer.ln1.0, layer.ln1.1, eps())?;
    let (a, attn) = multi_head_attention(g, layer, h, heads, capture)?;
    let a = Dropout::apply(dropout, g, a)?;
    let x = g.add(x, a)?;

    let h = g.layer_norm(x, layer.ln2.0, layer.ln2.1, eps())?;
    let h = g.linear(h, layer.mlp1.0, layer.mlp1.1)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, layer.mlp2.0, layer.mlp2.1)?;
    let h = Dropout::apply(dropout, g, h)?;
    Ok((g.add(x, h)?, attn))
}

/// Handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, num_classes]`
    pub logits: Var,
    /// Normalised class-token representation `[B, D]`.
    pub features: Var,
    /// Per-layer `[B, heads, S, S]`, empty unless captured.
    pub attention: Vec<Var>,
}

/// Full forward pass on a batch of patch sequences `[B, N, P²C]`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    vars: &ParamVars,
    config: &ViTConfig,
    patches: Var,
    capture: bool,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardVars> {
    let mut x = embed(g, vars, patches)?;
    x = Dropout::apply(&mut dropout, g, x)?;
    let mut attention = Vec::new();
    for l in 0..config.layers {
        let layer = LayerVars::lookup(vars, l)?;
        let (y, attn) = encoder_block(g, &layer, x, config.heads, capture, &mut dropout)?;
        x = y;
        attention.extend(attn);
    }
    let x = g.layer_norm(
        x,
        vars.get("final_norm.gamma")?,
        vars.get("final_norm.beta")?,
        eps(),
    )?;
    let features = g.select(x, 1, 0)?;
    let logits = g.linear(features, vars.get("head.weight")?, vars.get("head.bias")?)?;
    Ok(ForwardVars {
        logits,
        features,
        attention,
    })
}

/// Checks image geometry and converts a batch of images to `[B, N, P²C]`.
pub fn batch_patches<T: Scalar>(config: &ViTConfig, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let expected = [config.image_size, config.image_size, config.channels];
    let patches = images
        .iter()
        .map(|img| {
            if img.shape() != expected {
                return Err(Error::Contract(format!(
                    "image has shape {:?}; preprocess to {:?} first",
                    img.shape(),
                    expected
                )));
            }
            patchify(img, config.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&patches)
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[B, num_classes]`
    pub logits: Tensor<T>,
    /// `[B, D]`
    pub features: Tensor<T>,
    /// One trace per image when capture was requested.
    pub traces: Option<Vec<AttentionTrace<T>>>,
}

/// Inference on a batch of preprocessed `[H, W, C]` images.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Tensor<T>],
    capture: bool,
) -> Result<ForwardOutput<T>> {
    let config = params.config();
    let batch = batch_patches(config, images)?;
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, |_| false);
    let input = g.constant(batch);
    let out = forward_graph(&mut g, &vars, config, input, capture, None)?;
    let traces = capture.then(|| {
        (0..images.len())
            .map(|i| AttentionTrace {
                per_layer: out
                    .attention
                    .iter()
                    .map(|&a| g.value(a).index_first(i))
                    .collect(),
            })
            .collect()
    });
    Ok(ForwardOutput {
        logits: g.value(out.logits).clone(),
        features: g.value(out.features).clone(),
        traces,
    })
}

/// Single-image convenience wrapper returning logits of length `num_classes`.
pub fn forward_image<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    capture: bool,
) -> Result<(Vec<T>, Option<AttentionTrace<T>>)> {
    let out = forward(params, &[image], capture)?;
    let trace = out.traces.and_then(|mut t| t.pop());
    Ok((out.logits.into_data(), trace))
}

/// Logits for many images, split into batches evaluated concurrently.
pub fn forward_batched<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Tensor<T>],
    batch_size: usize,
) -> Result<Vec<Vec<T>>> {
    let batch_size = batch_size.max(1);
    let chunks: Vec<&[&Tensor<T>]> = images.chunks(batch_size).collect();
    let results = parallel::map(&chunks, |_, chunk| forward(params, chunk, false));
    let k = params.config().num_classes;
    let mut out = Vec::with_capacity(images.len());
    for r in results {
        out.extend(r?.logits.data().chunks(k).map(<[T]>::to_vec));
    }
    Ok(out)
}
