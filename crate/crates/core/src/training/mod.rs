//! Losses, optimizers and the training loops.

pub mod loss;
pub mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, DatasetSplit, FeatureMatrix, LabelVector, Task};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::evaluate;
use crate::model::Model;
use crate::params::flatten_grads;
use crate::tensor::Tensor;

pub use loss::{mse_loss, weighted_cross_entropy};
pub use optim::{minimize, AdamW, AdamWConfig, Lbfgs, LbfgsConfig, LbfgsStatus, MinimizeResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Lbfgs,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::Adamw),
            "lbfgs" => Ok(OptimizerKind::Lbfgs),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (expected adamw or lbfgs)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Lbfgs => "lbfgs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    WeightedCrossEntropy,
    Mse,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `B / (C · count_c)` on the training split.
    #[default]
    Balanced,
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Chosen from the task when absent.
    pub loss: Option<LossKind>,
    pub seed: u64,
    pub class_weights: ClassWeighting,
    pub adamw: AdamWConfig,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            loss: None,
            seed: 0,
            class_weights: ClassWeighting::Balanced,
            adamw: AdamWConfig::default(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lr) {
            return Err(Error::Config(format!("train.lr ({}) must lie in [0, 1)", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_for(&self, task: Task) -> LossKind {
        self.loss.unwrap_or(match task {
            Task::Classification { .. } => LossKind::WeightedCrossEntropy,
            Task::Regression => LossKind::Mse,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").expect("writing to a Vec cannot fail");
        }
        Ok(String::from_utf8(out).expect("JSON is UTF-8"))
    }
}

/// Loss function bound to a task and class weights.
#[derive(Clone, Debug)]
pub struct Objective {
    pub kind: LossKind,
    pub weights: Vec<f64>,
}

impl Objective {
    pub fn new(cfg: &TrainConfig, train_labels: &LabelVector) -> Result<Objective> {
        let kind = cfg.loss_for(train_labels.task());
        let weights = match (kind, train_labels) {
            (LossKind::Mse, LabelVector::Regression { .. }) => Vec::new(),
            (LossKind::WeightedCrossEntropy, LabelVector::Classification { num_classes, .. }) => {
                match &cfg.class_weights {
                    ClassWeighting::Balanced => class_weights(train_labels)?,
                    ClassWeighting::Uniform => vec![1.0; *num_classes],
                    ClassWeighting::Explicit(w) => {
                        if w.len() != *num_classes || w.iter().any(|v| !(*v > 0.0)) {
                            return Err(Error::Config(format!(
                                "train.class_weights needs {num_classes} positive values"
                            )));
                        }
                        w.clone()
                    }
                }
            }
            _ => return Err(Error::Config("loss kind does not match the task".into())),
        };
        Ok(Objective { kind, weights })
    }

    pub fn loss(&self, outputs: &Tensor, labels: &LabelVector) -> Result<(f64, Tensor)> {
        match (self.kind, labels) {
            (LossKind::WeightedCrossEntropy, LabelVector::Classification { labels, .. }) => {
                weighted_cross_entropy(outputs, labels, &self.weights)
            }
            (LossKind::Mse, LabelVector::Regression { targets }) => mse_loss(outputs, targets),
            _ => Err(Error::Config("loss kind does not match the labels".into())),
        }
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, x: &Tensor, y: &LabelVector, obj: &Objective) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::with_params(&model.params);
    let xv = g.input(x.clone());
    let vars = model.forward_graph(&mut g, xv, &Default::default());
    let (loss, dlogits) = obj.loss(g.value(vars.logits), y)?;
    let grads = g.backward(vars.logits, dlogits);
    Ok((loss, g.param_grads(&grads)))
}

/// Loss and primary metric without gradient tracking.
pub fn evaluate_loss(model: &Model, x: &FeatureMatrix, y: &LabelVector, obj: &Objective) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Ok((0.0, 0.0));
    }
    let logits = model.predict(&x.to_tensor());
    if !logits.all_finite() {
        return Ok((f64::NAN, 0.0));
    }
    let (loss, _) = obj.loss(&logits, y)?;
    let metric = evaluate(&logits, y)?.primary(y.task());
    Ok((loss, metric))
}

/// Early-stopping bookkeeping shared by both optimizers.
struct EarlyStop {
    best_loss: f64,
    best_params: Vec<f64>,
    wait: usize,
    history: TrainHistory,
}

impl EarlyStop {
    fn new(model: &Model) -> Self {
        EarlyStop {
            best_loss: f64::INFINITY,
            best_params: model.params.flatten(),
            wait: 0,
            history: TrainHistory::default(),
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn record(&mut self, model: &Model, rec: EpochRecord, patience: usize) -> bool {
        let epoch = rec.epoch;
        let val = rec.val_loss;
        self.history.epochs.push(rec);
        if val < self.best_loss {
            self.best_loss = val;
            self.best_params = model.params.flatten();
            self.history.best_epoch = epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= patience {
            self.history.stopped_early = true;
            return true;
        }
        false
    }

    fn finish(self, model: &mut Model) -> Result<TrainHistory> {
        if self.history.best_epoch > 0 {
            model.params.load_flat(&self.best_params)?;
        }
        Ok(self.history)
    }
}

/// Trains with the optimizer named in `cfg`, restoring the parameters of the
/// epoch with the lowest validation loss.
pub fn train(model: &mut Model, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainHistory> {
    match cfg.optimizer {
        OptimizerKind::Adamw => fit(model, data, cfg),
        OptimizerKind::Lbfgs => fit_lbfgs(model, data, cfg),
    }
}

/// Mini-batch AdamW with seeded shuffling and early stopping.
pub fn fit(model: &mut Model, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let (xtr, ytr) = &data.train;
    let (xva, yva) = &data.val;
    let obj = Objective::new(cfg, ytr)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xtr.n_rows()).collect();
    let mut stop = EarlyStop::new(model);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = loss_and_grads(model, &xtr.batch(rows), &ytr.select_rows(rows), &obj)
                .map_err(|e| match e {
                    Error::Data(_) => Error::NonFiniteLoss { epoch, batch: bi },
                    other => other,
                })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            total += loss * rows.len() as f64;
            opt.step(&mut model.params, &grads);
        }
        let train_loss = total / xtr.n_rows().max(1) as f64;
        let (val_loss, val_metric) = evaluate_loss(model, xva, yva, &obj)?;
        let rec = EpochRecord { epoch, train_loss, val_loss, val_metric };
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} metric {val_metric:.4}");
        if stop.record(model, rec, cfg.patience) {
            break;
        }
    }
    stop.finish(model)
}

/// Full-batch L-BFGS; each iteration counts as one epoch for early stopping.
pub fn fit_lbfgs(model: &mut Model, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let (xtr, ytr) = &data.train;
    let (xva, yva) = &data.val;
    let obj = Objective::new(cfg, ytr)?;
    let xt = xtr.to_tensor();
    let mut scratch = model.clone();
    let mut eval = |flat: &[f64]| -> (f64, Vec<f64>) {
        if scratch.params.load_flat(flat).is_err() {
            return (f64::NAN, vec![0.0; flat.len()]);
        }
        match loss_and_grads(&scratch, &xt, ytr, &obj) {
            Ok((l, g)) => (l, flatten_grads(&g)),
            Err(_) => (f64::NAN, vec![0.0; flat.len()]),
        }
    };
    let mut opt = Lbfgs::new(cfg.lbfgs);
    let mut x = model.params.flatten();
    let (mut fx, mut gx) = eval(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let mut stop = EarlyStop::new(model);
    for epoch in 1..=cfg.max_epochs {
        let status = opt.iterate(&mut x, &mut fx, &mut gx, &mut eval);
        if status != LbfgsStatus::Progress {
            log::info!("L-BFGS stopped at iteration {epoch}: {status:?}");
            break;
        }
        model.params.load_flat(&x)?;
        let (val_loss, val_metric) = evaluate_loss(model, xva, yva, &obj)?;
        let rec = EpochRecord { epoch, train_loss: fx, val_loss, val_metric };
        if stop.record(model, rec, cfg.patience) {
            break;
        }
    }
    stop.finish(model)
}
