//! Training configuration, read from TOML.
//!
//! Every key has a default and unknown keys are rejected, so a typo in an
//! ablation grid fails loudly instead of silently running the default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{AuxVariant, MdOptions, PdOptions};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::matching::CostWeights;
use crate::network::ModelConfig;
use crate::synthdata::DataConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdVariant {
    /// IoU-valued targets for every matched class.
    Qfl,
    /// Teacher-derived targets kept only above IoU 0.5, with hard `t = 1`.
    Conditional,
    /// Teacher-derived targets kept only above IoU 0.5, IoU-valued.
    QflConditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdVariant {
    /// Re-weighted teacher scores plus the IoU gate on the box term.
    ToodListen2stu,
    /// Re-weighted teacher scores, box term always on.
    Tood,
    /// Raw teacher outputs as targets for every query.
    Naive,
    /// Teacher queries decoded by the student and matched to the GTs.
    QueryPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub md: bool,
    pub pd: bool,
    pub aux: bool,
    pub md_variant: Option<MdVariant>,
    pub pd_variant: Option<PdVariant>,
    pub aux_variant: Option<AuxVariant>,
    /// Teacher-only matches also supervise regression.
    pub reg_md: bool,
    pub reg_downweight: bool,
    pub cls_downweight: bool,
    pub pd_alpha: f64,
    pub pd_beta: f64,
    /// Distill only the matched class entry instead of the full score vector.
    pub pd_single_entry: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            md: false,
            pd: false,
            aux: false,
            md_variant: None,
            pd_variant: None,
            aux_variant: None,
            reg_md: true,
            reg_downweight: true,
            cls_downweight: false,
            pd_alpha: 0.25,
            pd_beta: 0.75,
            pd_single_entry: false,
        }
    }
}

impl DistillConfig {
    pub fn md_options(&self) -> MdOptions {
        let variant = self.md_variant.unwrap_or(MdVariant::Qfl);
        MdOptions {
            iou_threshold: if variant == MdVariant::Qfl { 0.0 } else { 0.5 },
            hard_teacher_targets: variant == MdVariant::Conditional,
            regression: self.reg_md,
            reg_downweight: self.reg_downweight,
            cls_downweight: self.cls_downweight,
        }
    }

    pub fn pd_variant(&self) -> PdVariant {
        self.pd_variant.unwrap_or(PdVariant::ToodListen2stu)
    }

    pub fn pd_options(&self) -> PdOptions {
        let v = self.pd_variant();
        PdOptions {
            tood_weight: matches!(v, PdVariant::Tood | PdVariant::ToodListen2stu),
            listen2stu: v == PdVariant::ToodListen2stu,
            alpha: self.pd_alpha,
            beta: self.pd_beta,
            single_entry: self.pd_single_entry,
        }
    }

    pub fn aux_variant(&self) -> AuxVariant {
        self.aux_variant.unwrap_or(AuxVariant::Md)
    }

    /// Whether any step needs the teacher's outputs.
    pub fn uses_teacher(&self) -> bool {
        self.md || self.pd || self.aux
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub decay: f64,
    /// Freeze the teacher from `schedule.lr_decay_epoch` on.
    pub stop_update: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { decay: 0.99, stop_update: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// SGD with heavy-ball momentum.
    Sgd,
    /// Adam with bias correction; `momentum` is beta1, beta2 is 0.999.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            epochs: 20,
            lr: 1e-3,
            lr_decay_epoch: 16,
            decay_factor: 0.1,
            momentum: 0.9,
            batch_size: 8,
            grad_clip: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl ScheduleConfig {
    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    EveryEpoch,
    Final,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label used to group runs in reports.
    pub name: String,
    /// Seeds parameter init and batch order. The dataset has its own seed.
    pub seed: u64,
    /// Where metrics and checkpoints go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub checkpoints: CheckpointPolicy,
    /// Sequential, bitwise-reproducible execution.
    pub reference: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { name: "run".into(), seed: 0, out_dir: None, checkpoints: CheckpointPolicy::EveryEpoch, reference: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
    pub cost: CostWeights,
    pub distill: DistillConfig,
    pub ema: EmaConfig,
    pub schedule: ScheduleConfig,
    pub run: RunConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.distill;
        if d.md_variant.is_some() && !d.md {
            return bad("distill.md_variant requires distill.md = true");
        }
        if d.pd_variant.is_some() && !d.pd {
            return bad("distill.pd_variant requires distill.pd = true");
        }
        if d.aux_variant.is_some() && !d.aux {
            return bad("distill.aux_variant requires distill.aux = true");
        }
        if d.aux && 2 * self.data.max_objects > self.model.num_queries {
            return bad("distill.aux needs model.num_queries >= 2 * data.max_objects");
        }
        if !(0.0..1.0).contains(&self.ema.decay) {
            return bad("ema.decay must lie in [0, 1)");
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 {
            return bad("schedule.epochs and schedule.batch_size must be positive");
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) || !(0.0..1.0).contains(&s.momentum) {
            return bad("schedule.lr must be positive and schedule.momentum in [0, 1)");
        }
        if s.grad_clip < 0.0 || s.weight_decay < 0.0 {
            return bad("schedule.grad_clip and schedule.weight_decay must be >= 0");
        }
        if self.data.num_train == 0 || self.data.num_val == 0 {
            return bad("data.num_train and data.num_val must be positive");
        }
        Ok(())
    }

    /// EMA stop epoch implied by the config.
    pub fn ema_stop_epoch(&self) -> Option<usize> {
        self.ema.stop_update.then_some(self.schedule.lr_decay_epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(TrainConfig::from_toml("[schedule]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("[distil]\nmd = true\n"), Err(Error::Config(_))));
    }

    #[test]
    fn variant_without_toggle_is_rejected() {
        let err = TrainConfig::from_toml("[distill]\npd_variant = \"naive\"\n");
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("pd_variant")));
        let ok = TrainConfig::from_toml("[distill]\npd = true\npd_variant = \"naive\"\n").unwrap();
        assert_eq!(ok.distill.pd_variant(), PdVariant::Naive);
    }

    #[test]
    fn lr_decays_exactly_once() {
        let s = ScheduleConfig { lr: 1e-3, lr_decay_epoch: 3, decay_factor: 0.1, epochs: 6, ..Default::default() };
        let lrs: Vec<f64> = (0..6).map(|e| s.lr_at(e)).collect();
        assert_eq!(&lrs[..3], &[1e-3; 3]);
        assert!(lrs[3..].iter().all(|&l| l == 1e-3 * 0.1));
    }

    #[test]
    fn variant_options() {
        let d = DistillConfig { md: true, md_variant: Some(MdVariant::Conditional), ..Default::default() };
        let o = d.md_options();
        assert_eq!(o.iou_threshold, 0.5);
        assert!(o.hard_teacher_targets);
        let d = DistillConfig { pd: true, pd_variant: Some(PdVariant::Tood), ..Default::default() };
        assert!(d.pd_options().tood_weight && !d.pd_options().listen2stu);
    }
}
