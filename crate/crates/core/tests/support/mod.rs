//! Fixtures and independent oracles shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use std::path::Path;

use cookstate::rng::rng_for;
use cookstate::tensor::{grad_check_many, GradCheckReport, Graph, Var};
use cookstate::train::{loss_and_grads, trainable_names, LabeledImages, Sgd, TrainConfig};
use cookstate::vit::{batch_patches, forward_graph, ParamVars};
use cookstate::{ModelParams, Result, Tensor, ViTConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;

pub fn normal_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0x7E57]);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output coordinate carries a
/// distinct weight in the gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = normal_tensor(g.shape(y), seed ^ 0xA5A5, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Finite-difference checks of every differentiable primitive, in f64.
pub fn primitive_grad_checks() -> Result<Vec<(&'static str, f64)>> {
    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>,
    );
    let cases: Vec<Case> = vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 3)
            }),
        ),
        (
            "add_broadcast",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|g, v| {
                let y = g.add_broadcast(v[0], v[1])?;
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "matmul_batched",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "matmul_shared_rhs",
            vec![vec![2, 3, 4], vec![4, 2]],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "transpose_last",
            vec![vec![2, 3, 4]],
            Box::new(|g, v| {
                let y = g.transpose_last(v[0])?;
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "permute",
            vec![vec![2, 3, 4]],
            Box::new(|g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                weighted_sum(g, y, 11)
            }),
        ),
        (
            "softmax_last",
            vec![vec![3, 5]],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y, 12)
            }),
        ),
        (
            "softmax_axis0",
            vec![vec![4, 3]],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 0)?;
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "gelu",
            vec![vec![7]],
            Box::new(|g, v| {
                let y = g.gelu(v[0])?;
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "concat",
            vec![vec![2, 1, 3], vec![2, 4, 3]],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                weighted_sum(g, y, 16)
            }),
        ),
        (
            "select",
            vec![vec![2, 4, 3]],
            Box::new(|g, v| {
                let y = g.select(v[0], 1, 2)?;
                weighted_sum(g, y, 17)
            }),
        ),
        (
            "expand_leading",
            vec![vec![1, 3]],
            Box::new(|g, v| {
                let y = g.expand_leading(v[0], 4)?;
                weighted_sum(g, y, 18)
            }),
        ),
        (
            "sum",
            vec![vec![3, 2]],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            }),
        ),
        (
            "mean",
            vec![vec![3, 2]],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            }),
        ),
        (
            "cross_entropy",
            vec![vec![4, 7]],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 6, 2])),
        ),
        (
            "dropout",
            vec![vec![4, 5]],
            Box::new(|g, v| {
                let mut rng = rng_for(3, &[]);
                let y = g.dropout(v[0], 0.3, &mut rng)?;
                weighted_sum(g, y, 19)
            }),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| normal_tensor(s, (i * 16 + j) as u64, 1.0))
            .collect();
        let report = grad_check_many(|g, v| f(g, v), &inputs, H, None)?;
        out.push((name, report.max_rel_error));
    }
    Ok(out)
}

/// Miniature model with every tensor perturbed away from its structured
/// initial value, so that no gradient vanishes by symmetry.
pub fn perturbed_tiny(k: usize, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(&ViTConfig::tiny(k), seed).unwrap();
    let mut rng = rng_for(seed, &[0xBEEF]);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
    }
    p
}

/// Gradient check of the full cross-entropy loss of the 2-layer miniature
/// model on two 32×32 images, with respect to every parameter tensor.
pub fn full_model_grad_check(max_coords_per_tensor: Option<usize>) -> Result<GradCheckReport> {
    let params = perturbed_tiny(3, 5);
    let cfg = params.config().clone();
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|i| normal_tensor(&[32, 32, 3], 100 + i, 1.0))
        .collect();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let patches = batch_patches(&cfg, &refs)?;
    let names: Vec<String> = params.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_check_many(
        |g, vars| {
            let pv = ParamVars::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let x = g.constant(patches.clone());
            let out = forward_graph(g, &pv, &cfg, x, false, None)?;
            g.cross_entropy(out.logits, &[2, 0])
        },
        &inputs,
        H,
        max_coords_per_tensor,
    )
}

/// Independent closed-form parameter count.
pub fn closed_form_param_count(cfg: &ViTConfig) -> usize {
    let (d, m, k, l) = (cfg.hidden_d, cfg.mlp_size, cfg.num_classes, cfg.layers);
    let p2c = cfg.patch_size * cfg.patch_size * cfg.channels;
    let n = (cfg.image_size / cfg.patch_size).pow(2);
    let embedding = p2c * d + d + d + (n + 1) * d;
    let attention = 4 * (d * d + d);
    let mlp = d * m + m + m * d + d;
    let norms = 2 * 2 * d;
    embedding + l * (attention + mlp + norms) + 2 * d + d * k + k
}

/// `n` standard-normal 32×32 images with labels `i mod k`.
pub fn memorisation_set(seed: u64, n: usize, k: usize) -> LabeledImages {
    let mut rng = rng_for(seed, &[1]);
    LabeledImages {
        images: (0..n)
            .map(|_| Tensor::from_fn(&[32, 32, 3], |_| StandardNormal.sample(&mut rng)))
            .collect(),
        labels: (0..n).map(|i| i % k).collect(),
    }
}

pub fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: 300,
        batch_size: 16,
        eval_interval_steps: 50,
        early_stop_patience_evals: 100,
        seed,
        ..TrainConfig::default()
    }
}

/// Losses of the first `steps + 1` full-batch updates of the trainer's
/// optimiser on the memorisation set.
pub fn full_batch_losses(seed: u64, cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    let data = memorisation_set(seed, 16, 4);
    let mut params = ModelParams::init(&ViTConfig::tiny(4), seed)?;
    let names = trainable_names(&params, cfg);
    let mut opt = Sgd::new(cfg.momentum);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, mut grads) =
            loss_and_grads(&params, &data.refs(&idx), &data.labels, &names, None)?;
        losses.push(loss);
        if step < steps {
            opt.step(&mut params, &mut grads, &names, cfg.lr_at(step))?;
        }
    }
    Ok(losses)
}

/// Writes `root/<class>/img_<i>.png` images whose colour depends on the
/// class, with per-image noise.
pub fn write_png_dataset(root: &Path, classes: &[&str], per_class: usize, size: u32, seed: u64) {
    let mut rng = rng_for(seed, &[0xDA7A]);
    for (k, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        let base = [
            (k * 97 % 256) as f64,
            (k * 181 % 256) as f64,
            (255 - k * 53 % 256) as f64,
        ];
        for i in 0..per_class {
            let img = image::RgbImage::from_fn(size, size, |x, y| {
                let stripe = if (x / 4 + y / 4 + k as u32).is_multiple_of(2) {
                    30.0
                } else {
                    -30.0
                };
                let mut px = |c: usize| {
                    (base[c] + stripe + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0) as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            img.save(dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }
}

/// Per-class metrics computed directly from label pairs.
pub struct BruteMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub accuracy: f64,
}

pub fn brute_metrics(truth: &[usize], pred: &[usize], k: usize) -> BruteMetrics {
    let mut out = BruteMetrics {
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        f1: vec![0.0; k],
        support: vec![0; k],
        accuracy: 0.0,
    };
    for c in 0..k {
        let mut tp = 0u64;
        let mut predicted = 0u64;
        let mut actual = 0u64;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == c && p == c {
                tp += 1;
            }
            if p == c {
                predicted += 1;
            }
            if t == c {
                actual += 1;
            }
        }
        let prec = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let rec = if actual == 0 {
            0.0
        } else {
            tp as f64 / actual as f64
        };
        out.precision[c] = prec;
        out.recall[c] = rec;
        out.f1[c] = if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        out.support[c] = actual;
    }
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    out.accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    out
}

/// Random row-stochastic `[heads, s, s]` attention tensor.
pub fn random_attention(heads: usize, s: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0xA77]);
    let mut data = Vec::with_capacity(heads * s * s);
    for _ in 0..heads * s {
        let row: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / total));
    }
    Tensor::new(vec![heads, s, s], data).unwrap()
}

/// Rollout computed with plain nested loops: average heads, form
/// `(A + I) / 2`, then left-multiply layer by layer.
pub fn brute_rollout(layers: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let s = layers[0].shape()[1];
    let heads = layers[0].shape()[0];
    let mut r: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for layer in layers {
        let mut a = vec![vec![0.0; s]; s];
        for h in 0..heads {
            for i in 0..s {
                for j in 0..s {
                    a[i][j] += layer.at(&[h, i, j]) / heads as f64;
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + if i == j { 1.0 } else { 0.0 }) / 2.0;
            }
        }
        let mut next = vec![vec![0.0; s]; s];
        for i in 0..s {
            for j in 0..s {
                for m in 0..s {
                    next[i][j] += a[i][m] * r[m][j];
                }
            }
        }
        r = next;
    }
    r
}

pub const CLASSES: [&str; 3] = ["raw", "cooking", "done"];

pub fn cookstate(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_cookstate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(out: &std::process::Output, what: &str) -> Result<(), String> {
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{what} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Files the pipeline promises to write, relative to its work directory.
pub const PIPELINE_OUTPUTS: [&str; 16] = [
    "split.txt",
    "split.txt.run.json",
    "aug/split.txt",
    "aug/run.json",
    "run/model.vitc",
    "run/history.csv",
    "run/run.json",
    "eval/report.txt",
    "eval/report.kv",
    "eval/confusion.csv",
    "eval/confusion_normalized.csv",
    "eval/run.json",
    "attend/img_000.rollout.png",
    "attend/img_000.rollout.csv",
    "attend/img_000-2.rollout.png",
    "attend/run.json",
];

/// split, augment, train (tiny, 50 steps), eval and attend on a synthetic
/// PNG dataset under `work`. Returns the stdout of `eval`.
pub fn run_pipeline(work: &Path) -> Result<String, String> {
    let data = work.join("data");
    write_png_dataset(&data, &CLASSES, 12, 40, 7);
    let s = |p: &str| work.join(p).to_string_lossy().into_owned();
    let data_s = data.to_string_lossy().into_owned();

    let out = cookstate(&[
        "split",
        "--root",
        &data_s,
        "--fractions",
        "0.75,0.25",
        "--val-from-train",
        "0.2",
        "--stratified",
        "--out",
        &s("split.txt"),
    ]);
    expect_ok(&out, "split")?;
    let out = cookstate(&[
        "augment",
        "--root",
        &data_s,
        "--manifest",
        &s("split.txt"),
        "--out",
        &s("aug"),
    ]);
    expect_ok(&out, "augment")?;
    let out = cookstate(&[
        "train",
        "--root",
        &s("aug"),
        "--manifest",
        &s("aug/split.txt"),
        "--out",
        &s("run"),
        "--preset",
        "tiny",
        "--steps",
        "50",
        "--batch",
        "8",
        "--eval-interval",
        "10",
        "--lr",
        "0.01",
    ]);
    expect_ok(&out, "train")?;
    let out = cookstate(&[
        "eval",
        "--root",
        &s("aug"),
        "--manifest",
        &s("aug/split.txt"),
        "--checkpoint",
        &s("run/model.vitc"),
        "--out",
        &s("eval"),
    ]);
    expect_ok(&out, "eval")?;
    let eval_stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let img_a = data.join("raw/img_000.png").to_string_lossy().into_owned();
    let img_b = data.join("done/img_000.png").to_string_lossy().into_owned();
    let out = cookstate(&[
        "attend",
        "--checkpoint",
        &s("run/model.vitc"),
        "--out",
        &s("attend"),
        &img_a,
        &img_b,
    ]);
    expect_ok(&out, "attend")?;

    for f in PIPELINE_OUTPUTS {
        if !work.join(f).is_file() {
            return Err(format!("missing output {f}"));
        }
    }
    Ok(eval_stdout)
}
