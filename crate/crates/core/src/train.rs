//! Deterministic training loop: seeded batch shuffling, schedule-driven
//! learning rates, validation-loss early stopping, and best-epoch
//! checkpointing.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimizerSnapshot, RngState};
use crate::data::{to_batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, batch_loss_grad, LossKind};
use crate::model::ModelSpec;
use crate::nn::Mode;
use crate::param::{HasParams, ParamKind, ParameterStore};
use crate::schedule::ScheduleSpec;
use crate::transunet::TransUNetConfig;
use crate::unet::ImprovedUNetConfig;

/// RNG stream id of the batch-shuffling generator.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }
}

struct Slot {
    m: ArrayD<f32>,
    v: Option<ArrayD<f32>>,
}

/// First-order optimizer over a model's named parameters.
pub struct Optimizer {
    kind: OptimizerKind,
    step_count: u64,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl HasParams<f32>, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let kind = self.kind;
        let slots = &mut self.slots;
        model.visit_mut("", &mut |name, p| {
            if p.kind != ParamKind::Trainable {
                return;
            }
            let Some(grad) = p.grad.as_ref() else {
                return;
            };
            match kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = slots.entry(name.to_string()).or_insert_with(|| Slot {
                        m: ArrayD::zeros(p.value.shape().to_vec()),
                        v: Some(ArrayD::zeros(p.value.shape().to_vec())),
                    });
                    let b1 = beta1 as f32;
                    let b2 = beta2 as f32;
                    let bc1 = 1.0 - (beta1 as f32).powi(t);
                    let bc2 = 1.0 - (beta2 as f32).powi(t);
                    let lr = lr as f32;
                    let eps = eps as f32;
                    let v = slot.v.as_mut().unwrap();
                    ndarray::Zip::from(&mut p.value)
                        .and(&mut slot.m)
                        .and(v)
                        .and(grad)
                        .for_each(|w, m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
                OptimizerKind::Sgd { momentum } => {
                    let slot = slots.entry(name.to_string()).or_insert_with(|| Slot {
                        m: ArrayD::zeros(p.value.shape().to_vec()),
                        v: None,
                    });
                    let mu = momentum as f32;
                    let lr = lr as f32;
                    ndarray::Zip::from(&mut p.value)
                        .and(&mut slot.m)
                        .and(grad)
                        .for_each(|w, vel, &g| {
                            *vel = mu * *vel + g;
                            *w -= lr * *vel;
                        });
                }
            }
        });
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        let mut entries = Vec::new();
        for (name, slot) in &self.slots {
            entries.push((format!("m.{name}"), slot.m.clone()));
            if let Some(v) = &slot.v {
                entries.push((format!("v.{name}"), v.clone()));
            }
        }
        OptimizerSnapshot {
            step: self.step_count,
            entries,
        }
    }

    pub fn from_snapshot(kind: OptimizerKind, snap: &OptimizerSnapshot) -> Self {
        let mut slots: BTreeMap<String, Slot> = BTreeMap::new();
        for (name, value) in &snap.entries {
            if let Some(pname) = name.strip_prefix("m.") {
                slots
                    .entry(pname.to_string())
                    .or_insert_with(|| Slot {
                        m: value.clone(),
                        v: None,
                    })
                    .m = value.clone();
            } else if let Some(pname) = name.strip_prefix("v.") {
                slots
                    .entry(pname.to_string())
                    .or_insert_with(|| Slot {
                        m: ArrayD::zeros(value.shape().to_vec()),
                        v: None,
                    })
                    .v = Some(value.clone());
            }
        }
        Optimizer {
            kind,
            step_count: snap.step,
            slots,
        }
    }
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub max_epochs: usize,
    /// `None` disables early stopping; `Some(p)` stops after `p` epochs
    /// without validation improvement.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub dice_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::config("dice_eps must be > 0"));
        }
        self.schedule.validate()
    }

    /// Named presets; the three full-scale ones mirror the published
    /// training setups, the `_desk` variants shrink model and epochs for
    /// laptop-scale runs.
    pub fn preset(name: &str) -> Result<TrainConfig> {
        let base = |model: ModelSpec| TrainConfig {
            model,
            max_epochs: 1,
            patience: None,
            batch_size: 8,
            schedule: ScheduleSpec::StepHalving {
                initial_lr: 0.001,
                halve_every: 16,
            },
            loss: LossKind::Dice,
            optimizer: OptimizerKind::adam(),
            dice_eps: 1.0,
            seed: 0,
        };
        Ok(match name {
            "basic_unet" => TrainConfig {
                max_epochs: 500,
                patience: Some(50),
                ..base(ModelSpec::Basic { base_channels: 16 })
            },
            "improved_unet" => TrainConfig {
                max_epochs: 100,
                ..base(ModelSpec::Improved(ImprovedUNetConfig::default()))
            },
            "transunet" => TrainConfig {
                max_epochs: 150,
                schedule: ScheduleSpec::Poly {
                    base_lr: 0.01,
                    max_epoch: 150,
                    power: 0.9,
                },
                loss: LossKind::Combined,
                optimizer: OptimizerKind::sgd_momentum(),
                ..base(ModelSpec::Trans(TransUNetConfig::full()))
            },
            "basic_unet_desk" => TrainConfig {
                max_epochs: 50,
                patience: Some(10),
                batch_size: 2,
                ..base(ModelSpec::Basic { base_channels: 8 })
            },
            "improved_unet_desk" => TrainConfig {
                max_epochs: 30,
                batch_size: 2,
                ..base(ModelSpec::Improved(ImprovedUNetConfig::desk()))
            },
            "transunet_desk" => TrainConfig {
                max_epochs: 30,
                batch_size: 2,
                schedule: ScheduleSpec::Poly {
                    base_lr: 0.01,
                    max_epoch: 30,
                    power: 0.9,
                },
                loss: LossKind::Combined,
                optimizer: OptimizerKind::sgd_momentum(),
                ..base(ModelSpec::Trans(TransUNetConfig::desk()))
            },
            other => return Err(Error::config(format!("unknown preset `{other}`"))),
        })
    }

    pub fn preset_names() -> [&'static str; 6] {
        [
            "basic_unet",
            "improved_unet",
            "transunet",
            "basic_unet_desk",
            "improved_unet_desk",
            "transunet_desk",
        ]
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
}

struct BestState {
    params: ParameterStore<f32>,
    optimizer: OptimizerSnapshot,
    rng: RngState,
    epoch: u32,
    val_loss: f64,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
        stream: rng.get_stream(),
    }
}

fn restore_rng(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Train from scratch.
pub fn train(
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::domain("train and validation sets must be nonempty"));
    }
    let mut model = config.model.build::<f32>(config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    run_epochs(
        config, &mut model, &mut optimizer, &mut rng, 0, None, train_set, val_set,
    )
}

/// Continue a run from a saved checkpoint (epoch `ckpt.epoch + 1` onward).
pub fn resume(
    config: &TrainConfig,
    ckpt: &Checkpoint,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if ckpt.model != config.model {
        return Err(Error::config(
            "checkpoint model spec differs from training config".to_string(),
        ));
    }
    let mut model = ckpt.build_model()?;
    let mut optimizer = Optimizer::from_snapshot(config.optimizer, &ckpt.optimizer);
    let mut rng = restore_rng(&ckpt.rng);
    let best = BestState {
        params: ckpt.params.clone(),
        optimizer: ckpt.optimizer.clone(),
        rng: ckpt.rng.clone(),
        epoch: ckpt.epoch,
        val_loss: ckpt.best_val_loss,
    };
    run_epochs(
        config,
        &mut model,
        &mut optimizer,
        &mut rng,
        ckpt.epoch as usize + 1,
        Some(best),
        train_set,
        val_set,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    config: &TrainConfig,
    model: &mut crate::model::AnyModel<f32>,
    optimizer: &mut Optimizer,
    rng: &mut ChaCha8Rng,
    start_epoch: usize,
    best: Option<BestState>,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    let mut logs = Vec::new();
    let mut best = best;
    let mut stale = 0usize;

    for epoch in start_epoch..config.max_epochs {
        let start = Instant::now();
        let lr = config.schedule.lr_at(epoch)?;

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = to_batch::<f32>(&batch)?;
            let pred = model.forward(&x, Mode::Train)?;
            let (loss, grad) = batch_loss_grad(config.loss, &pred, &y, config.dice_eps)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            model.zero_grads();
            model.backward(&grad);
            optimizer.step(model, lr);
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        let mut val_sum = 0.0f64;
        for chunk in (0..val_set.len())
            .collect::<Vec<_>>()
            .chunks(config.batch_size)
        {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &val_set[i]).collect();
            let (x, y) = to_batch::<f32>(&batch)?;
            let pred = model.forward(&x, Mode::Eval)?;
            let loss = batch_loss(config.loss, &pred, &y, config.dice_eps)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: 0 });
            }
            val_sum += loss as f64 * chunk.len() as f64;
        }
        let val_loss = val_sum / val_set.len() as f64;

        logs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        let improved = best
            .as_ref()
            .map(|b| val_loss < b.val_loss)
            .unwrap_or(true);
        if improved {
            best = Some(BestState {
                params: ParameterStore::from_model(model),
                optimizer: optimizer.snapshot(),
                rng: rng_state(rng),
                epoch: epoch as u32,
                val_loss,
            });
            stale = 0;
        } else {
            stale += 1;
            if let Some(patience) = config.patience {
                if stale > patience {
                    break;
                }
            }
        }
    }

    let best = best.ok_or_else(|| Error::config("no epochs were run"))?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: config.model.clone(),
            params: best.params,
            optimizer: best.optimizer,
            best_val_loss: best.val_loss,
            epoch: best.epoch,
            rng: best.rng,
        },
        logs,
    })
}

/// Write the epoch log as CSV. Wall times are deliberately excluded so the
/// artifact is byte-identical across reruns with the same seed.
pub fn write_train_log(path: &std::path::Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Shape(format!("csv: {e}")))?;
    w.write_record(["epoch", "lr", "train_loss", "val_loss"])
        .map_err(|e| Error::Shape(format!("csv: {e}")))?;
    for log in logs {
        w.write_record([
            log.epoch.to_string(),
            log.lr.to_string(),
            log.train_loss.to_string(),
            log.val_loss.to_string(),
        ])
        .map_err(|e| Error::Shape(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_scene, SynthSceneConfig};

    fn tiny_dataset(n: usize, seed0: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                generate_synthetic_scene(&SynthSceneConfig {
                    size: 32,
                    seed: seed0 + i as u64,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    fn tiny_config(max_epochs: usize, patience: Option<usize>) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Basic { base_channels: 2 },
            max_epochs,
            patience,
            batch_size: 2,
            schedule: ScheduleSpec::StepHalving {
                initial_lr: 0.001,
                halve_every: 16,
            },
            loss: LossKind::Dice,
            optimizer: OptimizerKind::adam(),
            dice_eps: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let train_set = tiny_dataset(4, 0);
        let val_set = tiny_dataset(2, 100);
        let config = tiny_config(3, None);
        let a = train(&config, &train_set, &val_set).unwrap();
        let b = train(&config, &train_set, &val_set).unwrap();
        // wall times differ between runs; everything else is bit-exact
        assert_eq!(a.logs.len(), b.logs.len());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!((la.epoch, la.lr, la.train_loss, la.val_loss),
                       (lb.epoch, lb.lr, lb.train_loss, lb.val_loss));
        }
        for ((n1, v1, _), (n2, v2, _)) in a
            .checkpoint
            .params
            .entries()
            .iter()
            .zip(b.checkpoint.params.entries())
        {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn logged_lr_matches_schedule_exactly() {
        let train_set = tiny_dataset(2, 0);
        let val_set = tiny_dataset(1, 50);
        let config = tiny_config(2, None);
        let out = train(&config, &train_set, &val_set).unwrap();
        for log in &out.logs {
            assert_eq!(log.lr, config.schedule.lr_at(log.epoch).unwrap());
        }
    }

    #[test]
    fn checkpoint_is_best_epoch_not_last() {
        let train_set = tiny_dataset(4, 0);
        let val_set = tiny_dataset(2, 60);
        let config = tiny_config(5, None);
        let out = train(&config, &train_set, &val_set).unwrap();
        let best = out
            .logs
            .iter()
            .map(|l| l.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.best_val_loss, best);
        let first_best = out
            .logs
            .iter()
            .find(|l| l.val_loss == best)
            .unwrap()
            .epoch;
        assert_eq!(out.checkpoint.epoch as usize, first_best);
    }

    #[test]
    fn patience_zero_stops_at_first_stall() {
        let train_set = tiny_dataset(4, 0);
        let val_set = tiny_dataset(2, 70);
        let config = tiny_config(30, Some(0));
        let out = train(&config, &train_set, &val_set).unwrap();
        // must stop the first time an epoch fails to improve
        if out.logs.len() < 30 {
            let last = out.logs.last().unwrap();
            assert!(last.val_loss >= out.checkpoint.best_val_loss);
        }
    }
}
