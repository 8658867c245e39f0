//! Training loop with SGD or AdamW, warmup plus cosine schedule, optional
//! EMA, JSONL history and best/last checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{AugmentPolicy, Dataset, GroundTruthSet, Loader};
use crate::error::{Error, Result};
use crate::eval::{detect_loader, EvalConfig, Metrics};
use crate::loss::{total_loss, LossConfig, LossValues};
use crate::network::{Model, ModelConfig};
use crate::nn::{Ctx, ParamEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine decay.
    pub final_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Applied to convolution and linear weights only.
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            final_lr: 1e-4,
            momentum: 0.937,
            nesterov: true,
            weight_decay: 5e-4,
            warmup_epochs: 3.0,
            beta2: 0.999,
            max_grad_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub use_ema: bool,
    pub ema_decay: f64,
    /// Evaluate every n epochs (and always after the last); 0 = last only.
    pub eval_every: usize,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            use_ema: false,
            ema_decay: 0.9999,
            eval_every: 10,
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        let bad = |lr: f64| lr.is_nan() || lr < 0.0;
        if bad(self.optimizer.lr) || bad(self.optimizer.final_lr) {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Learning rate at fractional epoch `t`: linear warmup from zero,
    /// cosine decay from `lr` to `final_lr` over all epochs.
    pub fn lr_at(&self, t: f64) -> f64 {
        let o = &self.optimizer;
        let progress = (t / self.epochs as f64).clamp(0.0, 1.0);
        let cosine = o.final_lr + (o.lr - o.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        if o.warmup_epochs > 0.0 && t < o.warmup_epochs {
            cosine * (t / o.warmup_epochs)
        } else {
            cosine
        }
    }
}

/// SGD with (optionally Nesterov) momentum and L2 decay on flagged tensors.
struct Sgd {
    params: Vec<(Var, bool)>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
}

impl Sgd {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for ((var, decay), vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Detached throughout: the parameter is a tracked variable, and a
            // tracked velocity would keep every previous step's graph alive.
            let mut g = g.detach();
            if *decay && self.weight_decay > 0.0 {
                g = (g + (var.as_tensor().detach() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(v) => ((v * self.momentum)? + &g)?,
                None => g.clone(),
            };
            let update = if self.nesterov {
                (&g + (&v * self.momentum)?)?
            } else {
                v.clone()
            };
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

enum Opt {
    Sgd(Sgd),
    /// Decayed and non-decayed groups.
    Adamw(candle_nn::AdamW, candle_nn::AdamW),
}

impl Opt {
    fn new(entries: &[ParamEntry], cfg: &OptimizerConfig) -> Result<Self> {
        Ok(match cfg.kind {
            OptimizerKind::Sgd => Opt::Sgd(Sgd {
                params: entries.iter().map(|e| (e.var.clone(), e.decay)).collect(),
                velocity: vec![None; entries.len()],
                momentum: cfg.momentum,
                nesterov: cfg.nesterov,
                weight_decay: cfg.weight_decay,
            }),
            OptimizerKind::Adamw => {
                let group = |decay: bool, wd: f64| -> Result<candle_nn::AdamW> {
                    let vars = entries
                        .iter()
                        .filter(|e| e.decay == decay)
                        .map(|e| e.var.clone())
                        .collect();
                    Ok(candle_nn::AdamW::new(
                        vars,
                        candle_nn::ParamsAdamW {
                            lr: cfg.lr,
                            beta1: cfg.momentum,
                            beta2: cfg.beta2,
                            eps: 1e-8,
                            weight_decay: wd,
                        },
                    )?)
                };
                Opt::Adamw(group(true, cfg.weight_decay)?, group(false, 0.0)?)
            }
        })
    }

    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        match self {
            Opt::Sgd(s) => s.step(grads, lr),
            Opt::Adamw(a, b) => {
                a.set_learning_rate(lr);
                b.set_learning_rate(lr);
                a.step(grads)?;
                b.step(grads)?;
                Ok(())
            }
        }
    }
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * k)?);
            }
        }
    }
    Ok(norm)
}

/// Exponential moving average of every parameter and buffer.
struct Ema {
    shadow: Vec<Tensor>,
    decay: f64,
    updates: usize,
}

impl Ema {
    fn new(model: &Model, decay: f64) -> Self {
        Self {
            shadow: model.store().entries().iter().map(|e| e.var.as_tensor().detach().copy().expect("copy")).collect(),
            decay,
            updates: 0,
        }
    }

    fn update(&mut self, model: &Model) -> Result<()> {
        self.updates += 1;
        let d = self.decay * (1.0 - (-(self.updates as f64) / 2000.0).exp());
        for (s, e) in self.shadow.iter_mut().zip(model.store().entries()) {
            *s = ((&*s * d)? + (e.var.as_tensor().detach() * (1.0 - d))?)?;
        }
        Ok(())
    }

    /// Swaps the averaged values into the model; call again to swap back.
    fn swap(&mut self, model: &Model) -> Result<()> {
        for (s, e) in self.shadow.iter_mut().zip(model.store().entries()) {
            let current = e.var.as_tensor().detach().copy()?;
            e.var.set(s)?;
            *s = current;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub val: Option<Metrics>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_ap: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Parses a history file, skipping a torn final line.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

/// Trains `model` in place. `val` defaults to the training set when absent.
pub fn train_model(
    model: &Model,
    cfg: &TrainConfig,
    train: &GroundTruthSet,
    val: Option<&GroundTruthSet>,
    files: Option<&RunFiles>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let size = model.config().input_size;
    let loader = Loader::new(train, size, cfg.batch_size, cfg.augment.clone(), cfg.seed)?;
    let val_set = val.unwrap_or(train);
    let val_loader = Loader::new(val_set, size, cfg.eval.batch_size, AugmentPolicy::identity(), 0)?;
    if let Some(f) = files {
        std::fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        let h = f.history();
        if h.exists() {
            std::fs::remove_file(&h).map_err(|e| Error::io(&h, e))?;
        }
    }
    let entries = model.store().learnable();
    let vars: Vec<Var> = entries.iter().map(|e| e.var.clone()).collect();
    let mut opt = Opt::new(&entries, &cfg.optimizer)?;
    let mut ema = cfg.use_ema.then(|| Ema::new(model, cfg.ema_decay));
    let meta = CheckpointMeta {
        class_names: train.class_names.clone(),
        epoch: None,
    };
    let per_epoch = loader.batches_per_epoch();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let mut lr = 0.0;
        for (bi, batch) in loader.epoch(epoch, true)?.into_iter().enumerate() {
            lr = cfg.lr_at(epoch as f64 + bi as f64 / per_epoch as f64);
            let raw = model.forward(&batch.images, &Ctx::train())?;
            let out = total_loss(&raw, &batch.targets, &cfg.loss)?;
            let v = out.values()?;
            if ![v.total, v.bce, v.dfl, v.siou].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let mut grads = out.total.backward()?;
            clip_gradients(&mut grads, &vars, cfg.optimizer.max_grad_norm)?;
            opt.step(&grads, lr)?;
            if let Some(e) = ema.as_mut() {
                e.update(model)?;
            }
            let n = batch.targets.len();
            for (s, x) in sums.iter_mut().zip([v.total, v.bce, v.dfl, v.siou]) {
                *s += x * n as f64;
            }
            seen += n;
        }
        let k = seen.max(1) as f64;
        let loss = LossValues {
            total: sums[0] / k,
            bce: sums[1] / k,
            dfl: sums[2] / k,
            siou: sums[3] / k,
        };
        let last = epoch + 1 == cfg.epochs;
        let do_eval = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let val_metrics = if do_eval {
            if let Some(e) = ema.as_mut() {
                e.swap(model)?;
            }
            let dets = detect_loader(model, val_set, &val_loader, &cfg.eval)?;
            let gts: Vec<_> = val_set.images.iter().map(|r| r.targets()).collect();
            let m = Metrics::compute(&dets, &gts, &val_set.class_names, cfg.eval.max_dets);
            if let Some(ap) = m.ap {
                if best.is_none_or(|(b, _)| ap > b) {
                    best = Some((ap, epoch));
                    if let Some(f) = files {
                        let meta = CheckpointMeta { epoch: Some(epoch), ..meta.clone() };
                        checkpoint::save(model, &meta, &f.best())?;
                    }
                }
            }
            if let Some(e) = ema.as_mut() {
                e.swap(model)?;
            }
            Some(m)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.4} (bce {:.4} dfl {:.4} siou {:.4}){}",
            loss.total,
            loss.bce,
            loss.dfl,
            loss.siou,
            val_metrics
                .as_ref()
                .and_then(|m| m.ap50)
                .map_or(String::new(), |a| format!(" val AP50 {a:.4}"))
        );
        let record = EpochRecord {
            epoch,
            lr,
            loss,
            val: val_metrics,
        };
        if let Some(f) = files {
            let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
            append_line(&f.history(), &line)?;
            if let Some(e) = ema.as_mut() {
                e.swap(model)?;
                checkpoint::save(model, &CheckpointMeta { epoch: Some(epoch), ..meta.clone() }, &f.last())?;
                e.swap(model)?;
            } else {
                checkpoint::save(model, &CheckpointMeta { epoch: Some(epoch), ..meta.clone() }, &f.last())?;
            }
        }
        history.push(record);
    }
    if let Some(e) = ema.as_mut() {
        // leave the averaged weights in the model
        e.swap(model)?;
    }
    Ok(TrainOutcome {
        history,
        best_ap: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
    })
}

/// Builds a model from `model_cfg`, trains on `dataset.train` and evaluates
/// on `dataset.val`, writing artifacts under `out_dir`.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<(Model, TrainOutcome)> {
    if model_cfg.num_classes != dataset.train.class_names.len() {
        return Err(Error::ConfigMismatch(format!(
            "model has {} classes, dataset has {}",
            model_cfg.num_classes,
            dataset.train.class_names.len()
        )));
    }
    let model = Model::build(model_cfg, cfg.seed, DType::F32)?;
    let files = RunFiles {
        dir: out_dir.to_path_buf(),
    };
    let val = (!dataset.val.is_empty()).then_some(&dataset.val);
    let outcome = train_model(&model, cfg, &dataset.train, val, Some(&files))?;
    Ok((model, outcome))
}
