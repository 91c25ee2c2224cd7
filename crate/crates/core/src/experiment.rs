//! End-to-end runs: data generation, backbone pretraining, the three
//! training modes, evaluation and the ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::{self, freeze_backbone, Model, PretrainOptions, PretrainReport};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Mode, RunConfig};
use crate::dataset::{self, class_name, class_slug, Sample, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Report};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::semisup::{self, TeacherStudentState, TrainOptions};

const DATA_STREAM: u64 = 0xDA7A;
const SPLIT_STREAM: u64 = 0x5917;
const PRETRAIN_DATA_STREAM: u64 = 0x9DA7;
pub const MANIFEST: &str = "dataset.txt";

fn stream_seed(seed: u64, stream: u64) -> u64 {
    SplitMix64::derive(seed, stream).next_u64()
}

/// Target-domain scenes split into labeled / unlabeled / test.
pub fn generate_split(cfg: &RunConfig) -> Result<Split> {
    let spec = SceneSpec::new(
        cfg.data_height,
        cfg.data_width,
        cfg.data_classes,
        cfg.data_domain,
        stream_seed(cfg.seed, DATA_STREAM),
    )?;
    let scenes = dataset::generate(&spec, cfg.data_scenes)?;
    dataset::split(
        scenes,
        cfg.data_labeled_fraction,
        cfg.data_test_fraction,
        stream_seed(cfg.seed, SPLIT_STREAM),
    )
}

pub fn manifest_text(cfg: &RunConfig, split: &Split) -> String {
    format!(
        "classes = {}\nheight = {}\nwidth = {}\ndomain = {}\nlabeled = {}\nunlabeled = {}\ntest = {}\n",
        cfg.data_classes,
        cfg.data_height,
        cfg.data_width,
        cfg.data_domain,
        split.labeled.len(),
        split.unlabeled.len(),
        split.test.len()
    )
}

pub fn write_data_dir(dir: &Path, cfg: &RunConfig, split: &Split) -> Result<()> {
    dataset::save_split(dir, split)?;
    fs::write(dir.join(MANIFEST), manifest_text(cfg, split))?;
    Ok(())
}

/// Class count recorded by `write_data_dir`.
pub fn data_classes(dir: &Path) -> Result<usize> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "classes")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| Error::Data(format!("{} has no class count", path.display())))
}

/// Histogram table over every scene of a split.
pub fn histogram_text(split: &Split, classes: usize) -> String {
    let all: Vec<Sample> = split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .chain(&split.test)
        .cloned()
        .collect();
    let counts = dataset::class_histogram(&all, classes);
    let total: u64 = counts.iter().sum();
    let mut s = String::from("class\tpixels\tshare\n");
    for (c, n) in counts.iter().enumerate() {
        let _ = writeln!(
            s,
            "{}\t{n}\t{:.4}",
            class_name(c, classes),
            *n as f64 / total.max(1) as f64
        );
    }
    s
}

/// Source-domain supervised pretraining. The scenes depend on `cfg.seed`
/// only; `init_seed` drives initialisation and batch order.
pub fn pretrain(cfg: &RunConfig, init_seed: u64) -> Result<(ParamSet, PretrainReport)> {
    let spec = SceneSpec::new(
        cfg.data_height,
        cfg.data_width,
        cfg.data_classes,
        cfg.pretrain_domain,
        stream_seed(cfg.seed, PRETRAIN_DATA_STREAM),
    )?;
    let scenes = dataset::generate(&spec, cfg.pretrain_scenes)?;
    backbone::pretrain_backbone(
        &cfg.backbone(),
        &scenes,
        &PretrainOptions {
            epochs: cfg.pretrain_epochs,
            lr: cfg.pretrain_lr,
            batch: cfg.train_batch,
            seed: init_seed,
            augment: cfg.pretrain_augment.then(|| cfg.aug.clone()),
        },
    )
}

/// Backbone buffers from `pretrain.checkpoint` if set, else pretrained now.
pub fn backbone_params(cfg: &RunConfig) -> Result<ParamSet> {
    match &cfg.pretrain_checkpoint {
        Some(path) => {
            let mut p = checkpoint::load(path)?.student;
            for name in p.names().map(str::to_string).collect::<Vec<_>>() {
                if !name.starts_with(backbone::BACKBONE_PREFIX) {
                    p.remove(&name);
                }
            }
            Ok(p)
        }
        None => Ok(pretrain(cfg, cfg.seed)?.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamReport {
    pub fn of(params: &ParamSet) -> Self {
        let trainable = params.count(true);
        Self {
            trainable,
            frozen: params.count(false) - trainable,
        }
    }

    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// Trainable share of all parameters; 0 for an empty model.
    pub fn ratio(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total() as f64
        }
    }

    pub fn render(&self) -> String {
        format!(
            "trainable = {}\nfrozen = {}\ntotal = {}\nratio = {}\n# ratio is measured on this desk-scale model; the 5.96% figure quoted for\n# a SAM2-scale backbone is context only and is not reproduced here.\n",
            self.trainable,
            self.frozen,
            self.total(),
            self.ratio()
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub state: TeacherStudentState,
    /// Tab-separated per-step log including the header line.
    pub log: String,
    pub params: ParamReport,
}

impl RunOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
            step: self.state.step,
        }
    }
}

/// Model and initial parameters for a mode, before any training.
pub fn assemble(
    cfg: &RunConfig,
    backbone_params: &ParamSet,
    seed: u64,
) -> Result<(Model, ParamSet)> {
    let mut bcfg = cfg.backbone();
    if cfg.train_mode == Mode::Baseline {
        bcfg.adapter_stages.clear();
    }
    let model = Model::new(bcfg)?;
    let mut params = backbone_params.clone();
    let expected = model.init_backbone(0);
    if !params.same_names(&expected)
        || params
            .iter()
            .zip(expected.iter())
            .any(|((_, a), (_, b))| a.shape() != b.shape())
    {
        return Err(Error::State(
            "backbone parameters do not match the configured architecture".into(),
        ));
    }
    params.extend_from(&model.init_adapters(seed));
    if cfg.train_mode == Mode::Baseline {
        params.set_trainable_prefix("", true);
    } else {
        freeze_backbone(&mut params);
    }
    Ok((model, params))
}

/// Trains one run of `cfg.train_mode` from `backbone_params`.
pub fn train_run(
    cfg: &RunConfig,
    backbone_params: &ParamSet,
    split: &Split,
    seed: u64,
) -> Result<RunOutcome> {
    let (model, params) = assemble(cfg, backbone_params, seed)?;
    let (lambda, unlabeled): (f64, &[Sample]) = match cfg.train_mode {
        Mode::FwUats => (cfg.train_lambda, &split.unlabeled),
        Mode::Baseline | Mode::Fw => (0.0, &[]),
    };
    let report = ParamReport::of(&params);
    let mut state = TeacherStudentState::new(params, cfg.train_alpha, lambda)?;
    let mut log = String::from(semisup::LOG_HEADER);
    log.push('\n');
    let opts = TrainOptions {
        epochs: cfg.train_epochs,
        batch: cfg.train_batch,
        lr: cfg.train_lr,
        seed,
        aug: cfg.aug.clone(),
    };
    semisup::train(
        &model,
        &mut state,
        &split.labeled,
        unlabeled,
        &opts,
        |step, stats| {
            let mut line = Vec::new();
            semisup::write_log_line(&mut line, step, stats)?;
            log.push_str(&String::from_utf8_lossy(&line));
            Ok(())
        },
    )?;
    Ok(RunOutcome {
        model,
        state,
        log,
        params: report,
    })
}

pub fn evaluate(model: &Model, params: &ParamSet, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        let (x, truth) = backbone::stack(&[s])?;
        let pred = model.predict(params, &x)?;
        cm.accumulate(&pred, &truth)?;
    }
    Ok(cm)
}

/// Ground truth scored against itself.
pub fn oracle_matrix(samples: &[Sample], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        let truth: Vec<usize> = s.label.indices().collect();
        cm.accumulate(&truth, &truth)?;
    }
    Ok(cm)
}

pub fn report(cm: &ConfusionMatrix) -> Result<Report> {
    let c = cm.classes();
    Report::from_matrix(
        cm,
        (0..c).map(|k| class_name(k, c)).collect(),
        (0..c).map(|k| class_slug(k, c)).collect(),
    )
}

/// Everything a run directory holds.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    run: &RunOutcome,
    metrics: &Report,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    fs::write(dir.join("train_log.tsv"), &run.log)?;
    checkpoint::save(&dir.join("checkpoint.fwck"), &run.checkpoint())?;
    fs::write(dir.join("params.txt"), run.params.render())?;
    fs::write(dir.join("metrics.txt"), metrics.key_values())?;
    Ok(())
}

/// Infers the architecture from checkpoint buffer shapes, taking spectral
/// cutoffs, reduction and input size from `base`.
pub fn infer_backbone(
    params: &ParamSet,
    base: &crate::backbone::BackboneConfig,
) -> Result<crate::backbone::BackboneConfig> {
    let mut cfg = base.clone();
    let shape = |name: &str| -> Result<Vec<usize>> { Ok(params.get(name)?.shape().to_vec()) };
    for s in 1..=backbone::STAGES {
        let w = shape(&format!("backbone.enc{s}.down.w"))?;
        cfg.stage_channels[s - 1] = w[0];
        if s == 1 {
            cfg.in_channels = w[1];
        }
    }
    cfg.num_classes = shape("backbone.head.w")?[0];
    cfg.convs_per_stage = (0..)
        .take_while(|j| params.contains(&format!("backbone.enc1.conv{j}.w")))
        .count();
    cfg.adapter_stages = (1..=backbone::STAGES)
        .filter(|s| params.contains(&format!("{}.lf_kernel", backbone::adapter_prefix(*s))))
        .collect();
    let model = Model::new(cfg.clone())?;
    let expected = model.init_params(0);
    if !expected.same_names(params)
        || expected
            .iter()
            .zip(params.iter())
            .any(|((_, a), (_, b))| a.shape() != b.shape())
    {
        return Err(Error::State(
            "checkpoint does not describe a supported model".into(),
        ));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Half the range across seeds.
fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo) / 2.0
}

impl AblationRow {
    pub fn mean_iou(&self) -> f64 {
        mean(&self.iou)
    }

    pub fn mean_dice(&self) -> f64 {
        mean(&self.dice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// baseline, fw, fw+uats.
    pub modes: Vec<AblationRow>,
    /// Adapter placements {4}, {3,4}, {2,3,4}, {1,2,3,4} with fw training.
    pub placements: Vec<AblationRow>,
}

pub const PLACEMENTS: [&[usize]; 4] = [&[4], &[3, 4], &[2, 3, 4], &[1, 2, 3, 4]];

fn placement_label(stages: &[usize]) -> String {
    let s: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
    format!("stages {{{}}}", s.join(","))
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.modes
            .iter()
            .chain(&self.placements)
            .find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut section = |title: &str, rows: &[AblationRow]| {
            let _ = writeln!(s, "{title}");
            let _ = writeln!(s, "{:<18}  {:>17}  {:>17}", "Setting", "IoU", "Dice");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<18}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}",
                    r.label,
                    r.mean_iou(),
                    spread(&r.iou),
                    r.mean_dice(),
                    spread(&r.dice)
                );
            }
            let _ = writeln!(s);
        };
        section(
            "Training scheme (mean ± half-range over seeds)",
            &self.modes,
        );
        section(
            "Adapter placement, fw training (mean ± half-range over seeds)",
            &self.placements,
        );
        s
    }
}

/// Seed of ablation repeat `i`: drives pretraining initialisation, adapter
/// initialisation, batch order and augmentation. The data stay fixed.
pub fn repeat_seed(cfg: &RunConfig, i: usize) -> u64 {
    stream_seed(cfg.seed, 0xAB1A7E00 + i as u64)
}

/// Runs both grids. `progress` receives one line per finished run.
pub fn ablate(
    cfg: &RunConfig,
    split: &Split,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut modes: Vec<AblationRow> = Mode::ALL
        .iter()
        .map(|m| AblationRow {
            label: m.to_string(),
            iou: vec![],
            dice: vec![],
        })
        .collect();
    let mut placements: Vec<AblationRow> = PLACEMENTS
        .iter()
        .map(|p| AblationRow {
            label: placement_label(p),
            iou: vec![],
            dice: vec![],
        })
        .collect();
    let default_stages: Vec<usize> = cfg.adapter_stages.iter().copied().collect();
    for i in 0..cfg.ablate_seeds {
        let seed = repeat_seed(cfg, i);
        let (backbone, _) = pretrain(cfg, seed)?;
        let score = |run_cfg: &RunConfig| -> Result<(f64, f64)> {
            let run = train_run(run_cfg, &backbone, split, seed)?;
            let r = report(&evaluate(&run.model, &run.state.student, &split.test)?)?;
            Ok((r.iou_dice.mean_iou, r.iou_dice.mean_dice))
        };
        for (m, row) in Mode::ALL.iter().zip(modes.iter_mut()) {
            let mut c = cfg.clone();
            c.train_mode = *m;
            let (iou, dice) = score(&c)?;
            progress(&format!(
                "seed {i} {}: iou {iou:.4} dice {dice:.4}",
                row.label
            ));
            row.iou.push(iou);
            row.dice.push(dice);
        }
        for (p, row) in PLACEMENTS.iter().zip(placements.iter_mut()) {
            let (iou, dice) = if *p == default_stages.as_slice() {
                let fw = &modes[1];
                (fw.iou[i], fw.dice[i])
            } else {
                let mut c = cfg.clone();
                c.train_mode = Mode::Fw;
                c.adapter_stages = p.iter().copied().collect();
                score(&c)?
            };
            progress(&format!(
                "seed {i} {}: iou {iou:.4} dice {dice:.4}",
                row.label
            ));
            row.iou.push(iou);
            row.dice.push(dice);
        }
    }
    Ok(AblationTable { modes, placements })
}
