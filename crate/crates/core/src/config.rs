//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and unparsable values are configuration errors.
//! [`RunConfig::render`] prints every key in a fixed order, so the echo of
//! a resolved config parses back to an equal value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, STAGES};
use crate::dataset::{Domain, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::semisup::AugmentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full fine-tuning of the backbone, no adapters, supervised only.
    Baseline,
    /// Frozen backbone, trainable adapters, supervised only.
    Fw,
    /// Frozen backbone, trainable adapters, mean-teacher consistency.
    FwUats,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Fw, Mode::FwUats];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Fw => "fw",
            Mode::FwUats => "fw+uats",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (baseline, fw, fw+uats)")))
    }
}

impl Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_dir: PathBuf,
    pub data_scenes: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_classes: usize,
    pub data_labeled_fraction: f64,
    pub data_test_fraction: f64,
    pub data_domain: Domain,

    pub pretrain_checkpoint: Option<PathBuf>,
    pub pretrain_scenes: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_domain: Domain,
    pub pretrain_augment: bool,

    pub backbone_stage_channels: [usize; STAGES],
    pub backbone_convs_per_stage: usize,

    pub adapter_stages: BTreeSet<usize>,
    /// `None` means a quarter of the shorter side at each site.
    pub adapter_rho: Option<f64>,
    pub adapter_rho_stage: [Option<f64>; STAGES],
    pub adapter_reduction: usize,

    pub train_mode: Mode,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_alpha: f64,
    pub train_lambda: f64,

    pub aug: AugmentConfig,

    pub eval_checkpoint: Option<PathBuf>,
    pub eval_oracle: bool,

    pub decompose_input: Option<PathBuf>,

    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            data_scenes: 60,
            data_height: 64,
            data_width: 64,
            data_classes: 9,
            data_labeled_fraction: 0.2,
            data_test_fraction: DEFAULT_TEST_FRACTION,
            data_domain: Domain::Target,
            pretrain_checkpoint: None,
            pretrain_scenes: 24,
            pretrain_epochs: 15,
            pretrain_lr: 2e-3,
            pretrain_domain: Domain::Source,
            pretrain_augment: false,
            backbone_stage_channels: b.stage_channels,
            backbone_convs_per_stage: b.convs_per_stage,
            adapter_stages: b.adapter_stages,
            adapter_rho: None,
            adapter_rho_stage: [None; STAGES],
            adapter_reduction: b.reduction,
            train_mode: Mode::FwUats,
            train_epochs: 50,
            train_lr: 5e-4,
            train_batch: 2,
            train_alpha: crate::semisup::DEFAULT_ALPHA,
            train_lambda: crate::semisup::DEFAULT_LAMBDA,
            aug: AugmentConfig::default(),
            eval_checkpoint: None,
            eval_oracle: false,
            decompose_input: None,
            ablate_seeds: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse {key} = {v:?} as a boolean"
        ))),
    }
}

fn join(list: impl IntoIterator<Item = usize>) -> String {
    let v: Vec<String> = list.into_iter().map(|x| x.to_string()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".into(), |x| x.to_string())
}

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref()
        .map_or_else(String::new, |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.scenes" => self.data_scenes = parse(key, v)?,
            "data.height" => self.data_height = parse(key, v)?,
            "data.width" => self.data_width = parse(key, v)?,
            "data.classes" => self.data_classes = parse(key, v)?,
            "data.labeled_fraction" => self.data_labeled_fraction = parse(key, v)?,
            "data.test_fraction" => self.data_test_fraction = parse(key, v)?,
            "data.domain" => self.data_domain = v.parse()?,
            "pretrain.checkpoint" => self.pretrain_checkpoint = parse_opt_path(v),
            "pretrain.scenes" => self.pretrain_scenes = parse(key, v)?,
            "pretrain.epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain.domain" => self.pretrain_domain = v.parse()?,
            "pretrain.augment" => self.pretrain_augment = parse_bool(key, v)?,
            "backbone.stage_channels" => {
                let list = parse_list(key, v)?;
                self.backbone_stage_channels = list
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs exactly {STAGES} values")))?;
            }
            "backbone.convs_per_stage" => self.backbone_convs_per_stage = parse(key, v)?,
            "adapter.stages" => self.adapter_stages = parse_list(key, v)?.into_iter().collect(),
            "adapter.rho" => self.adapter_rho = parse_opt_f64(key, v)?,
            "adapter.reduction" => self.adapter_reduction = parse(key, v)?,
            "train.mode" => self.train_mode = v.parse()?,
            "train.epochs" => self.train_epochs = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            "train.batch" => self.train_batch = parse(key, v)?,
            "train.alpha" => self.train_alpha = parse(key, v)?,
            "train.lambda" => self.train_lambda = parse(key, v)?,
            "aug.flip_prob" => self.aug.flip_prob = parse(key, v)?,
            "aug.weak_sigma" => self.aug.weak_sigma = parse(key, v)?,
            "aug.strong_sigma" => self.aug.strong_sigma = parse(key, v)?,
            "aug.jitter" => self.aug.jitter = parse_bool(key, v)?,
            "aug.cutout" => self.aug.cutout = parse_bool(key, v)?,
            "eval.checkpoint" => self.eval_checkpoint = parse_opt_path(v),
            "eval.oracle" => self.eval_oracle = parse_bool(key, v)?,
            "decompose.input" => self.decompose_input = parse_opt_path(v),
            "ablate.seeds" => self.ablate_seeds = parse(key, v)?,
            _ => {
                let stage = key
                    .strip_prefix("adapter.rho.stage")
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|s| (1..=STAGES).contains(s));
                match stage {
                    Some(s) => self.adapter_rho_stage[s - 1] = parse_opt_f64(key, v)?,
                    None => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.dir".into(), self.data_dir.display().to_string()),
            ("data.scenes".into(), self.data_scenes.to_string()),
            ("data.height".into(), self.data_height.to_string()),
            ("data.width".into(), self.data_width.to_string()),
            ("data.classes".into(), self.data_classes.to_string()),
            (
                "data.labeled_fraction".into(),
                self.data_labeled_fraction.to_string(),
            ),
            (
                "data.test_fraction".into(),
                self.data_test_fraction.to_string(),
            ),
            ("data.domain".into(), self.data_domain.to_string()),
            (
                "pretrain.checkpoint".into(),
                opt_path(&self.pretrain_checkpoint),
            ),
            ("pretrain.scenes".into(), self.pretrain_scenes.to_string()),
            ("pretrain.epochs".into(), self.pretrain_epochs.to_string()),
            ("pretrain.lr".into(), self.pretrain_lr.to_string()),
            ("pretrain.domain".into(), self.pretrain_domain.to_string()),
            ("pretrain.augment".into(), self.pretrain_augment.to_string()),
            (
                "backbone.stage_channels".into(),
                join(self.backbone_stage_channels),
            ),
            (
                "backbone.convs_per_stage".into(),
                self.backbone_convs_per_stage.to_string(),
            ),
            (
                "adapter.stages".into(),
                join(self.adapter_stages.iter().copied()),
            ),
            ("adapter.rho".into(), opt_f64(self.adapter_rho)),
        ];
        for (i, r) in self.adapter_rho_stage.iter().enumerate() {
            kv.push((format!("adapter.rho.stage{}", i + 1), opt_f64(*r)));
        }
        kv.extend([
            (
                "adapter.reduction".into(),
                self.adapter_reduction.to_string(),
            ),
            ("train.mode".into(), self.train_mode.to_string()),
            ("train.epochs".into(), self.train_epochs.to_string()),
            ("train.lr".into(), self.train_lr.to_string()),
            ("train.batch".into(), self.train_batch.to_string()),
            ("train.alpha".into(), self.train_alpha.to_string()),
            ("train.lambda".into(), self.train_lambda.to_string()),
            ("aug.flip_prob".into(), self.aug.flip_prob.to_string()),
            ("aug.weak_sigma".into(), self.aug.weak_sigma.to_string()),
            ("aug.strong_sigma".into(), self.aug.strong_sigma.to_string()),
            ("aug.jitter".into(), self.aug.jitter.to_string()),
            ("aug.cutout".into(), self.aug.cutout.to_string()),
            ("eval.checkpoint".into(), opt_path(&self.eval_checkpoint)),
            ("eval.oracle".into(), self.eval_oracle.to_string()),
            ("decompose.input".into(), opt_path(&self.decompose_input)),
            ("ablate.seeds".into(), self.ablate_seeds.to_string()),
        ]);
        kv.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data_scenes == 0 || self.pretrain_scenes == 0 {
            return bad("scene counts must be positive".into());
        }
        if self.train_batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if !(self.train_lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train_alpha) {
            return bad(format!("train.alpha {} outside [0, 1)", self.train_alpha));
        }
        if !(self.train_lambda >= 0.0) {
            return bad(format!("train.lambda {} must be >= 0", self.train_lambda));
        }
        if self.adapter_reduction == 0 {
            return bad("adapter.reduction must be positive".into());
        }
        if self.ablate_seeds == 0 {
            return bad("ablate.seeds must be positive".into());
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut cutoffs = BTreeMap::new();
        for s in 1..=STAGES {
            if let Some(r) = self.adapter_rho_stage[s - 1].or(self.adapter_rho) {
                cutoffs.insert(s, r);
            }
        }
        BackboneConfig {
            in_channels: 3,
            stage_channels: self.backbone_stage_channels,
            num_classes: self.data_classes,
            adapter_stages: self.adapter_stages.clone(),
            cutoffs,
            input_size: (self.data_height, self.data_width),
            convs_per_stage: self.backbone_convs_per_stage,
            reduction: self.adapter_reduction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut c = RunConfig::default();
        c.set("adapter.rho.stage3", "1.5").unwrap();
        c.set("train.mode", "fw").unwrap();
        c.set("adapter.stages", "2,3,4").unwrap();
        assert_eq!(RunConfig::parse_str(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse_str("train.speed = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_str("adapter.rho.stage5 = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_str("train.epochs = many"),
            Err(Error::Config(_))
        ));
    }
}
