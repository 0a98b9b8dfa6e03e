//! SGD fine-tuning loop: cross-entropy loss, momentum SGD, cosine learning
//! rate decay and early stopping on validation accuracy.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{standardize, Sample};
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::vit::{batch_patches, forward_graph, is_head, Dropout, ModelParams, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub eval_interval_steps: usize,
    pub early_stop_patience_evals: usize,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: usize,
    pub dropout: f64,
    /// Train only the classification head.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 10_000,
            batch_size: 32,
            base_lr: 0.03,
            momentum: 0.9,
            eval_interval_steps: 100,
            early_stop_patience_evals: 10,
            warmup_steps: 0,
            dropout: 0.0,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if self.eval_interval_steps == 0 {
            return Err(Error::Config("eval_interval_steps must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps && self.warmup_steps > 0 {
            return Err(Error::Config("warmup must be shorter than training".into()));
        }
        Ok(())
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let offset = self.warmup_steps;
        cosine_lr(step - offset, self.total_steps - offset, self.base_lr)
    }
}

/// `0.5 · base · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    0.5 * base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Momentum SGD: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every tensor named in `trainable` in place and clears `grads`.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &mut GradMap<T>,
        trainable: &[String],
        lr: f64,
    ) -> Result<()> {
        if let Some(missing) = trainable.iter().find(|n| !grads.contains_key(*n)) {
            return Err(Error::Contract(format!(
                "no gradient for trainable tensor {missing}"
            )));
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        for name in trainable {
            let g = grads.remove(name).expect("checked above");
            let w = params.get_mut(name)?;
            if g.shape() != w.shape() {
                return Err(Error::shape("sgd_step", w.shape(), g.shape()));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *wv = *wv - lr * *vv;
            }
        }
        grads.clear();
        Ok(())
    }
}

/// Preprocessed images with labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    /// Standardises each sample's pixels.
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            images: samples.iter().map(|s| standardize(&s.pixels)).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn refs(&self, idx: &[usize]) -> Vec<&Tensor<f32>> {
        idx.iter().map(|&i| &self.images[i]).collect()
    }
}

/// Supplies the validation accuracy used for model selection.
pub trait ValidationSource {
    fn accuracy(&mut self, params: &ModelParams<f32>) -> Result<f64>;
}

/// Validation on a held-out labelled set.
pub struct HeldOut<'d> {
    pub data: &'d LabeledImages,
    pub batch_size: usize,
}

impl ValidationSource for HeldOut<'_> {
    fn accuracy(&mut self, params: &ModelParams<f32>) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let refs: Vec<&Tensor<f32>> = self.data.images.iter().collect();
        let pred = predict(params, &refs, self.batch_size)?;
        let correct = pred
            .labels
            .iter()
            .zip(&self.data.labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(correct as f64 / self.data.len() as f64)
    }
}

/// Shuffled batch indices, reshuffled every epoch. The stream is fully
/// determined by `(seed, epoch, position)`.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut s = Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut rng_for(self.seed, &[0xBA7C, self.epoch]));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// 0-based index of the update.
    pub step: usize,
    /// Learning rate used by that update.
    pub lr: f64,
    pub train_loss: f64,
    /// Present on steps followed by a validation pass.
    pub val_accuracy: Option<f64>,
}

/// Mutable loop state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub current_lr: f64,
    pub best_val_accuracy: f64,
    pub best_step: Option<usize>,
    pub evals_since_best: usize,
    pub optimizer: Sgd<f32>,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub best_params: ModelParams<f32>,
    pub final_params: ModelParams<f32>,
    pub best_val_accuracy: f64,
    pub best_step: Option<usize>,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
    pub steps_run: usize,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,lr,train_loss,val_accuracy\n");
    for r in history {
        let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.train_loss, val);
    }
    out
}

/// Names of the tensors updated under `cfg`.
pub fn trainable_names(params: &ModelParams<f32>, cfg: &TrainConfig) -> Vec<String> {
    params
        .names()
        .filter(|n| !cfg.freeze_encoder || is_head(n))
        .cloned()
        .collect()
}

/// One forward/backward pass on a batch. Returns the mean loss and the
/// gradients of the trainable tensors.
pub fn loss_and_grads(
    params: &ModelParams<f32>,
    images: &[&Tensor<f32>],
    labels: &[usize],
    trainable: &[String],
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, GradMap<f32>)> {
    let patches = batch_patches(params.config(), images)?;
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, |n| trainable.iter().any(|t| t == n));
    let input = g.constant(patches);
    let out = forward_graph(&mut g, &vars, params.config(), input, false, dropout)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let loss_value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss)?;
    let mut map = GradMap::new();
    for name in trainable {
        let var = vars.get(name)?;
        if let Some(t) = grads.take(var) {
            map.insert(name.clone(), t);
        }
    }
    Ok((loss_value, map))
}

/// Mean cross-entropy of the model on a labelled set (no gradients).
pub fn mean_loss(
    params: &ModelParams<f32>,
    data: &LabeledImages,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (imgs, labels) in data
        .images
        .chunks(batch_size.max(1))
        .zip(data.labels.chunks(batch_size.max(1)))
    {
        let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
        let patches = batch_patches(params.config(), &refs)?;
        let mut g = Graph::new();
        let vars = ParamVars::register(&mut g, params, |_| false);
        let input = g.constant(patches);
        let out = forward_graph(&mut g, &vars, params.config(), input, false, None)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        total += g.value(loss).item() as f64 * labels.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs the training loop and keeps the parameters with the best
/// validation accuracy.
pub fn train(
    mut params: ModelParams<f32>,
    train_data: &LabeledImages,
    validation: &mut dyn ValidationSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.labels.len() != train_data.len() {
        return Err(Error::Data(
            "training images and labels differ in length".into(),
        ));
    }
    let mut stream = BatchStream::new(train_data.len(), cfg.batch_size, cfg.seed)?;
    let trainable = trainable_names(&params, cfg);
    let mut state = TrainState {
        step: 0,
        current_lr: cfg.lr_at(0),
        best_val_accuracy: f64::NEG_INFINITY,
        best_step: None,
        evals_since_best: 0,
        optimizer: Sgd::new(cfg.momentum),
        history: Vec::with_capacity(cfg.total_steps),
    };
    let mut best_params = params.clone();
    let mut stopped_early = false;

    while state.step < cfg.total_steps {
        let step = state.step;
        let lr = cfg.lr_at(step);
        state.current_lr = lr;
        let idx = stream.next_batch();
        let labels: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
        let mut rng = rng_for(derive_seed(cfg.seed, &[0xD80F]), &[step as u64]);
        let dropout = (cfg.dropout > 0.0).then_some(Dropout {
            rate: cfg.dropout,
            rng: &mut rng,
        });
        let (loss, mut grads) = match loss_and_grads(
            &params,
            &train_data.refs(&idx),
            &labels,
            &trainable,
            dropout,
        ) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Divergence {
                    step,
                    lr,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, lr, loss });
        }
        state
            .optimizer
            .step(&mut params, &mut grads, &trainable, lr)?;
        state.step += 1;

        let mut row = HistoryRow {
            step,
            lr,
            train_loss: loss,
            val_accuracy: None,
        };
        let is_eval =
            state.step.is_multiple_of(cfg.eval_interval_steps) || state.step == cfg.total_steps;
        if is_eval {
            let acc = validation.accuracy(&params)?;
            row.val_accuracy = Some(acc);
            if acc > state.best_val_accuracy {
                state.best_val_accuracy = acc;
                state.best_step = Some(step);
                state.evals_since_best = 0;
                best_params = params.clone();
            } else {
                state.evals_since_best += 1;
            }
        }
        log::debug!("step {step} lr {lr:.6} loss {loss:.6}");
        state.history.push(row);
        if is_eval && state.evals_since_best >= cfg.early_stop_patience_evals.max(1) {
            stopped_early = state.step < cfg.total_steps;
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        final_params: params,
        best_val_accuracy: state.best_val_accuracy,
        best_step: state.best_step,
        history: state.history,
        stopped_early,
        steps_run: state.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10_000, 0.03), 0.03);
        assert!(cosine_lr(10_000, 10_000, 0.03).abs() < 1e-18);
        assert!((cosine_lr(5_000, 10_000, 0.03) - 0.015).abs() < 1e-17);
    }

    #[test]
    fn warmup_is_off_by_default() {
        let cfg = TrainConfig::default();
        for s in [0, 1, 77, 9_999] {
            assert_eq!(cfg.lr_at(s), cosine_lr(s, 10_000, 0.03));
        }
        let warm = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((warm.lr_at(4) - 0.015).abs() < 1e-15);
        assert_eq!(warm.lr_at(10), 0.03);
    }

    fn scalar_params(w: f64) -> ModelParams<f64> {
        let cfg = ViTConfig::tiny(2);
        let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        p.get_mut("head.bias").unwrap().data_mut()[0] = w;
        p
    }

    fn grad(v: f64) -> GradMap<f64> {
        let mut t = Tensor::zeros(&[2]);
        t.data_mut()[0] = v;
        GradMap::from([("head.bias".to_string(), t)])
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut p = scalar_params(1.0);
        let names = vec!["head.bias".to_string()];
        let mut g = grad(0.5);
        Sgd::new(0.0).step(&mut p, &mut g, &names, 0.1).unwrap();
        assert!((p.get("head.bias").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert!(g.is_empty());
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = scalar_params(0.0);
        let names = vec!["head.bias".to_string()];
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &mut grad(1.0), &names, 0.1).unwrap();
        let w1 = p.get("head.bias").unwrap().data()[0];
        opt.step(&mut p, &mut grad(1.0), &names, 0.1).unwrap();
        let w2 = p.get("head.bias").unwrap().data()[0];
        assert!((w1 + 0.1).abs() < 1e-15);
        assert!((w1 - w2 - 0.19).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_params(0.3);
        let before = p.clone();
        let names = vec!["head.bias".to_string()];
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &mut grad(0.0), &names, 0.1).unwrap();
        assert_eq!(p, before);
        assert!(opt.velocity["head.bias"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar_params(0.0);
        let names = vec!["head.bias".to_string(), "head.weight".to_string()];
        assert!(Sgd::new(0.9)
            .step(&mut p, &mut grad(1.0), &names, 0.1)
            .is_err());
    }

    #[test]
    fn batch_stream_is_deterministic_and_covers_epochs() {
        let mut a = BatchStream::new(10, 4, 3).unwrap();
        let mut b = BatchStream::new(10, 4, 3).unwrap();
        let xs: Vec<Vec<usize>> = (0..5).map(|_| a.next_batch()).collect();
        let ys: Vec<Vec<usize>> = (0..5).map(|_| b.next_batch()).collect();
        assert_eq!(xs, ys);
        let mut first_epoch: Vec<usize> = xs.concat()[..10].to_vec();
        first_epoch.sort();
        assert_eq!(first_epoch, (0..10).collect::<Vec<_>>());
        assert!(BatchStream::new(0, 4, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                total_steps: 0,
                ..Default::default()
            },
            TrainConfig {
                base_lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn history_csv_layout() {
        let rows = [
            HistoryRow {
                step: 0,
                lr: 0.03,
                train_loss: 1.5,
                val_accuracy: None,
            },
            HistoryRow {
                step: 1,
                lr: 0.02,
                train_loss: 1.25,
                val_accuracy: Some(0.5),
            },
        ];
        assert_eq!(
            history_csv(&rows),
            "step,lr,train_loss,val_accuracy\n0,0.03,1.5,\n1,0.02,1.25,0.5\n"
        );
    }
}
