//! Run-configuration files: line-oriented `key = value` with `[model]`,
//! `[train]`, `[data]` and `[eval]` sections. A top-level `preset = NAME`
//! line expands to one of the named training setups before explicit keys
//! are applied; unknown keys are rejected. Serialization always writes the
//! expanded form, so parse -> serialize -> parse is a fixed point.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use tilemark_core::losses::LossKind;
use tilemark_core::model::ModelSpec;
use tilemark_core::schedule::ScheduleSpec;
use tilemark_core::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub val_dir: Option<PathBuf>,
    /// Fraction of samples (by id order, from the end) held out when no
    /// validation directory is given.
    pub val_split: f64,
    /// Expansion factor applied to the training set before the run.
    pub augment_factor: usize,
    pub augment_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            val_dir: None,
            val_split: 0.2,
            augment_factor: 1,
            augment_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub pixel_threshold: f64,
    pub grade_thresholds: Option<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pixel_threshold: 0.5,
            grade_thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            train: TrainConfig::preset(name)?,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut preset: Option<String> = None;
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        let mut current: Option<usize> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim().to_string();
                if !["model", "train", "data", "eval"].contains(&name.as_str()) {
                    bail!("line {}: unknown section [{name}]", lineno + 1);
                }
                current = Some(
                    sections
                        .iter()
                        .position(|(n, _)| *n == name)
                        .unwrap_or_else(|| {
                            sections.push((name.clone(), Vec::new()));
                            sections.len() - 1
                        }),
                );
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match current {
                None => {
                    if k == "preset" {
                        preset = Some(v);
                    } else {
                        bail!("line {}: key `{k}` outside any section", lineno + 1);
                    }
                }
                Some(idx) => sections[idx].1.push((k, v)),
            }
        }

        let mut config = match &preset {
            Some(name) => RunConfig::from_preset(name)?,
            None => RunConfig {
                train: TrainConfig::preset("improved_unet_desk")?,
                data: DataConfig::default(),
                eval: EvalConfig::default(),
            },
        };

        for (section, keys) in sections {
            match section.as_str() {
                "model" => {
                    let text: String = keys
                        .iter()
                        .map(|(k, v)| format!("{k} = {v}\n"))
                        .collect();
                    if !text.is_empty() {
                        config.train.model = ModelSpec::from_text(&text)
                            .map_err(|e| anyhow!("[model]: {e}"))?;
                    }
                }
                "train" => apply_train_keys(&mut config.train, keys)?,
                "data" => apply_data_keys(&mut config.data, keys)?,
                "eval" => apply_eval_keys(&mut config.eval, keys)?,
                _ => unreachable!(),
            }
        }
        config.train.validate()?;
        Ok(config)
    }

    /// Canonical expanded form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("[model]\n");
        out.push_str(&self.train.model.to_text());

        out.push_str("\n[train]\n");
        out.push_str(&format!("epochs = {}\n", self.train.max_epochs));
        match self.train.patience {
            Some(p) => out.push_str(&format!("patience = {p}\n")),
            None => out.push_str("patience = none\n"),
        }
        out.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("loss = {}\n", self.train.loss.name()));
        match self.train.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                out.push_str("optimizer = adam\n");
                out.push_str(&format!("beta1 = {beta1}\nbeta2 = {beta2}\neps = {eps}\n"));
            }
            OptimizerKind::Sgd { momentum } => {
                out.push_str("optimizer = sgd\n");
                out.push_str(&format!("momentum = {momentum}\n"));
            }
        }
        match &self.train.schedule {
            ScheduleSpec::StepHalving {
                initial_lr,
                halve_every,
            } => {
                out.push_str("schedule = step\n");
                out.push_str(&format!(
                    "initial_lr = {initial_lr}\nhalve_every = {halve_every}\n"
                ));
            }
            ScheduleSpec::Poly {
                base_lr,
                max_epoch,
                power,
            } => {
                out.push_str("schedule = poly\n");
                out.push_str(&format!(
                    "base_lr = {base_lr}\nmax_epoch = {max_epoch}\npower = {power}\n"
                ));
            }
        }
        out.push_str(&format!("dice_eps = {}\n", self.train.dice_eps));
        out.push_str(&format!("seed = {}\n", self.train.seed));

        out.push_str("\n[data]\n");
        if let Some(dir) = &self.data.val_dir {
            out.push_str(&format!("val_dir = {}\n", dir.display()));
        }
        out.push_str(&format!("val_split = {}\n", self.data.val_split));
        out.push_str(&format!("augment_factor = {}\n", self.data.augment_factor));
        out.push_str(&format!("augment_seed = {}\n", self.data.augment_seed));

        out.push_str("\n[eval]\n");
        out.push_str(&format!(
            "pixel_threshold = {}\n",
            self.eval.pixel_threshold
        ));
        if let Some((t1, t2)) = self.eval.grade_thresholds {
            out.push_str(&format!("grade_t1 = {t1}\ngrade_t2 = {t2}\n"));
        }
        out
    }
}

fn apply_train_keys(train: &mut TrainConfig, keys: Vec<(String, String)>) -> Result<()> {
    // schedule/optimizer parameters arrive in file order; collect them first
    let mut schedule_kind: Option<String> = None;
    let mut optimizer_kind: Option<String> = None;
    let mut scalars: Vec<(String, String)> = Vec::new();
    for (k, v) in keys {
        match k.as_str() {
            "schedule" => schedule_kind = Some(v),
            "optimizer" => optimizer_kind = Some(v),
            _ => scalars.push((k, v)),
        }
    }
    if let Some(kind) = optimizer_kind {
        train.optimizer = match kind.as_str() {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::sgd_momentum(),
            other => bail!("unknown optimizer `{other}`"),
        };
    }
    if let Some(kind) = schedule_kind {
        train.schedule = match kind.as_str() {
            "step" => ScheduleSpec::StepHalving {
                initial_lr: 0.001,
                halve_every: 16,
            },
            "poly" => ScheduleSpec::Poly {
                base_lr: 0.01,
                max_epoch: train.max_epochs,
                power: 0.9,
            },
            other => bail!("unknown schedule `{other}`"),
        };
    }
    for (k, v) in scalars {
        match k.as_str() {
            "epochs" => train.max_epochs = parse(&k, &v)?,
            "patience" => {
                train.patience = if v == "none" {
                    None
                } else {
                    Some(parse(&k, &v)?)
                }
            }
            "batch_size" => train.batch_size = parse(&k, &v)?,
            "seed" => train.seed = parse(&k, &v)?,
            "dice_eps" => train.dice_eps = parse(&k, &v)?,
            "loss" => {
                train.loss = match v.as_str() {
                    "dice" => LossKind::Dice,
                    "combined" => LossKind::Combined,
                    other => bail!("unknown loss `{other}`"),
                }
            }
            "momentum" => match &mut train.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = parse(&k, &v)?,
                _ => bail!("`momentum` requires optimizer = sgd"),
            },
            "beta1" => match &mut train.optimizer {
                OptimizerKind::Adam { beta1, .. } => *beta1 = parse(&k, &v)?,
                _ => bail!("`beta1` requires optimizer = adam"),
            },
            "beta2" => match &mut train.optimizer {
                OptimizerKind::Adam { beta2, .. } => *beta2 = parse(&k, &v)?,
                _ => bail!("`beta2` requires optimizer = adam"),
            },
            "eps" => match &mut train.optimizer {
                OptimizerKind::Adam { eps, .. } => *eps = parse(&k, &v)?,
                _ => bail!("`eps` requires optimizer = adam"),
            },
            "initial_lr" => match &mut train.schedule {
                ScheduleSpec::StepHalving { initial_lr, .. } => *initial_lr = parse(&k, &v)?,
                _ => bail!("`initial_lr` requires schedule = step"),
            },
            "halve_every" => match &mut train.schedule {
                ScheduleSpec::StepHalving { halve_every, .. } => *halve_every = parse(&k, &v)?,
                _ => bail!("`halve_every` requires schedule = step"),
            },
            "base_lr" => match &mut train.schedule {
                ScheduleSpec::Poly { base_lr, .. } => *base_lr = parse(&k, &v)?,
                _ => bail!("`base_lr` requires schedule = poly"),
            },
            "max_epoch" => match &mut train.schedule {
                ScheduleSpec::Poly { max_epoch, .. } => *max_epoch = parse(&k, &v)?,
                _ => bail!("`max_epoch` requires schedule = poly"),
            },
            "power" => match &mut train.schedule {
                ScheduleSpec::Poly { power, .. } => *power = parse(&k, &v)?,
                _ => bail!("`power` requires schedule = poly"),
            },
            other => bail!("unknown [train] key `{other}`"),
        }
    }
    Ok(())
}

fn apply_data_keys(data: &mut DataConfig, keys: Vec<(String, String)>) -> Result<()> {
    for (k, v) in keys {
        match k.as_str() {
            "val_dir" => data.val_dir = Some(PathBuf::from(v)),
            "val_split" => data.val_split = parse(&k, &v)?,
            "augment_factor" => data.augment_factor = parse(&k, &v)?,
            "augment_seed" => data.augment_seed = parse(&k, &v)?,
            other => bail!("unknown [data] key `{other}`"),
        }
    }
    if !(0.0..1.0).contains(&data.val_split) {
        bail!("val_split must lie in [0, 1)");
    }
    if data.augment_factor < 1 {
        bail!("augment_factor must be >= 1");
    }
    Ok(())
}

fn apply_eval_keys(eval: &mut EvalConfig, keys: Vec<(String, String)>) -> Result<()> {
    let mut t1: Option<f64> = None;
    let mut t2: Option<f64> = None;
    for (k, v) in keys {
        match k.as_str() {
            "pixel_threshold" => eval.pixel_threshold = parse(&k, &v)?,
            "grade_t1" => t1 = Some(parse(&k, &v)?),
            "grade_t2" => t2 = Some(parse(&k, &v)?),
            other => bail!("unknown [eval] key `{other}`"),
        }
    }
    eval.grade_thresholds = match (t1, t2) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => eval.grade_thresholds,
        _ => bail!("grade_t1 and grade_t2 must be given together"),
    };
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| anyhow!("invalid value `{v}` for `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_serialize_parse_is_stable() {
        let text = "preset = improved_unet_desk\n[train]\nepochs = 7\nseed = 5\n";
        let a = RunConfig::parse(text).unwrap();
        let ser = a.serialize();
        let b = RunConfig::parse(&ser).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.serialize(), ser);
        assert_eq!(a.train.max_epochs, 7);
        assert_eq!(a.train.seed, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::parse("stray = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nkind = improved_unet\nwat = 2\n").is_err());
    }

    #[test]
    fn presets_map_to_published_setups() {
        let basic = RunConfig::from_preset("basic_unet").unwrap();
        assert_eq!(basic.train.max_epochs, 500);
        assert_eq!(basic.train.patience, Some(50));
        assert_eq!(basic.train.loss, LossKind::Dice);

        let improved = RunConfig::from_preset("improved_unet").unwrap();
        assert_eq!(improved.train.max_epochs, 100);
        assert_eq!(
            improved.train.schedule,
            ScheduleSpec::StepHalving {
                initial_lr: 0.001,
                halve_every: 16
            }
        );

        let trans = RunConfig::from_preset("transunet").unwrap();
        assert_eq!(trans.train.max_epochs, 150);
        assert_eq!(trans.train.loss, LossKind::Combined);
        assert_eq!(
            trans.train.schedule,
            ScheduleSpec::Poly {
                base_lr: 0.01,
                max_epoch: 150,
                power: 0.9
            }
        );
    }

    #[test]
    fn schedule_override_after_kind_switch() {
        let text = "preset = transunet_desk\n[train]\nschedule = step\ninitial_lr = 0.002\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(
            cfg.train.schedule,
            ScheduleSpec::StepHalving {
                initial_lr: 0.002,
                halve_every: 16
            }
        );
    }
}
