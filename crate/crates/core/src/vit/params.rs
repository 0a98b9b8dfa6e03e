use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// How a tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    TruncatedNormal,
    Zeros,
    Ones,
}

/// One entry of the parameter inventory implied by a [`ViTConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

pub fn layer_key(layer: usize, suffix: &str) -> String {
    format!("encoder.{layer}.{suffix}")
}

/// Ordered inventory of every tensor the model needs.
pub fn inventory(config: &ViTConfig) -> Vec<ParamSpec> {
    use InitKind::*;
    let (d, m, k) = (config.hidden_d, config.mlp_size, config.num_classes);
    let mut out = Vec::with_capacity(8 + 16 * config.layers);
    let mut push =
        |name: String, shape: Vec<usize>, init| out.push(ParamSpec { name, shape, init });
    push(
        "patch_embed.weight".into(),
        vec![config.patch_dim(), d],
        TruncatedNormal,
    );
    push("patch_embed.bias".into(), vec![d], Zeros);
    push("cls_token".into(), vec![1, d], Zeros);
    push(
        "pos_embed".into(),
        vec![config.seq_len(), d],
        TruncatedNormal,
    );
    for l in 0..config.layers {
        push(layer_key(l, "ln1.gamma"), vec![d], Ones);
        push(layer_key(l, "ln1.beta"), vec![d], Zeros);
        for proj in ["q", "k", "v", "o"] {
            push(
                layer_key(l, &format!("attn.w{proj}")),
                vec![d, d],
                TruncatedNormal,
            );
            push(layer_key(l, &format!("attn.b{proj}")), vec![d], Zeros);
        }
        push(layer_key(l, "ln2.gamma"), vec![d], Ones);
        push(layer_key(l, "ln2.beta"), vec![d], Zeros);
        push(layer_key(l, "mlp1.weight"), vec![d, m], TruncatedNormal);
        push(layer_key(l, "mlp1.bias"), vec![m], Zeros);
        push(layer_key(l, "mlp2.weight"), vec![m, d], TruncatedNormal);
        push(layer_key(l, "mlp2.bias"), vec![d], Zeros);
    }
    push("final_norm.gamma".into(), vec![d], Ones);
    push("final_norm.beta".into(), vec![d], Zeros);
    push(HEAD_WEIGHT.into(), vec![d, k], TruncatedNormal);
    push(HEAD_BIAS.into(), vec![k], Zeros);
    out
}

pub fn is_head(name: &str) -> bool {
    name == HEAD_WEIGHT || name == HEAD_BIAS
}

/// Exact parameter total implied by `config`.
pub fn count_params(config: &ViTConfig) -> usize {
    inventory(config)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Named weights of a model together with the configuration they implement.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: ViTConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds params from a tensor map, checking it against the inventory.
    pub fn from_tensors(config: ViTConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let params = Self { config, tensors };
        params.validate()?;
        Ok(params)
    }

    /// Deterministic initialisation: truncated normal (σ = 0.02, cut at 2σ)
    /// for weight matrices and the positional embedding, zeros for biases
    /// and the class token, ones for layer-norm scales.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (i, spec) in inventory(config).into_iter().enumerate() {
            let t = match spec.init {
                InitKind::Zeros => Tensor::zeros(&spec.shape),
                InitKind::Ones => Tensor::ones(&spec.shape),
                InitKind::TruncatedNormal => {
                    let mut rng = rng_for(seed, &[i as u64]);
                    truncated_normal(&spec.shape, 0.02, &mut rng)
                }
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Inventory(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Inventory(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_tensors(self) -> (ViTConfig, BTreeMap<String, Tensor<T>>) {
        (self.config, self.tensors)
    }

    /// Checks that the tensor set matches the inventory exactly.
    pub fn validate(&self) -> Result<()> {
        let specs = inventory(&self.config);
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Inventory(format!("missing tensor {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Inventory(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !specs.iter().any(|s| &s.name == *k))
                .collect();
            return Err(Error::Inventory(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    /// Replaces the classification head with a zero-initialised one for
    /// `num_classes` outputs; every other tensor is left untouched.
    pub fn adapt_head(mut self, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let d = self.config.hidden_d;
        self.config.num_classes = num_classes;
        self.tensors
            .insert(HEAD_WEIGHT.into(), Tensor::zeros(&[d, num_classes]));
        self.tensors
            .insert(HEAD_BIAS.into(), Tensor::zeros(&[num_classes]));
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64_lossy(v);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ViTConfig::tiny(5);
        let a = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let c = ModelParams::<f32>::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert_eq!(a.len(), 8 + 16 * cfg.layers);
        assert_eq!(a.num_values(), count_params(&cfg));
    }

    #[test]
    fn init_constants() {
        let cfg = ViTConfig::tiny(5);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("beta") || name.ends_with("bias") || name == "cls_token" {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with("weight") || name.contains(".attn.w") || name == "pos_embed" {
                assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
            }
        }
    }

    #[test]
    fn weight_means_are_small() {
        let cfg = ViTConfig {
            hidden_d: 128,
            mlp_size: 256,
            heads: 4,
            ..ViTConfig::tiny(3)
        };
        let p = ModelParams::<f64>::init(&cfg, 11).unwrap();
        for (name, t) in p.iter().filter(|(_, t)| t.numel() >= 10_000) {
            let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
            assert!(mean.abs() < 0.01, "{name}: {mean}");
        }
    }

    #[test]
    fn head_only_depends_on_classes() {
        let a = count_params(&ViTConfig::b16(7));
        let b = count_params(&ViTConfig::b16(14));
        assert_eq!(b - a, 768 * 7 + 7);
    }

    #[test]
    fn adapt_head_keeps_backbone() {
        let p = ModelParams::<f32>::init(&ViTConfig::tiny(10), 1).unwrap();
        let q = p.clone().adapt_head(7).unwrap();
        q.validate().unwrap();
        assert_eq!(q.get(HEAD_WEIGHT).unwrap().shape(), &[32, 7]);
        for (name, t) in p.iter().filter(|(n, _)| !is_head(n)) {
            assert_eq!(q.get(name).unwrap(), t);
        }
    }

    #[test]
    fn validate_reports_missing_and_extra() {
        let (cfg, mut tensors) = ModelParams::<f32>::init(&ViTConfig::tiny(2), 0)
            .unwrap()
            .into_tensors();
        let removed = tensors.remove("encoder.1.ln1.gamma").unwrap();
        let err = ModelParams::from_tensors(cfg.clone(), tensors.clone()).unwrap_err();
        assert!(err.to_string().contains("encoder.1.ln1.gamma"));
        tensors.insert("encoder.1.ln1.gamma".into(), removed);
        tensors.insert("bogus".into(), Tensor::zeros(&[1]));
        let err = ModelParams::from_tensors(cfg, tensors).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
