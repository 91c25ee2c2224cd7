use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqweaver::backbone::Model;
use freqweaver::checkpoint::{self, Checkpoint};
use freqweaver::config::RunConfig;
use freqweaver::dataset::{load_split, load_tensor, save_tensor};
use freqweaver::experiment::{
    ablate, assemble, backbone_params, data_classes, evaluate, generate_split, histogram_text,
    infer_backbone, oracle_matrix, pretrain, report, train_run, write_data_dir, write_run_dir,
    ParamReport,
};
use freqweaver::spectral::{decompose, default_cutoff};
use freqweaver::{Error, Result};

#[derive(Parser)]
#[command(
    name = "freqweaver",
    version,
    about = "Frequency-split adapters with mean-teacher training on synthetic scenes"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key = value configuration file; unset keys keep their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory
    #[arg(long, global = true)]
    force: bool,
    /// Extra configuration overrides, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split synthetic target-domain scenes
    Generate {
        /// Overrides `data.classes`
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Pretrain the backbone on source-domain scenes
    Pretrain,
    /// Train one mode (`train.mode`) on a data directory
    Train {
        /// Data directory (defaults to `data.dir`)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a data directory
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the ground truth against itself
        #[arg(long)]
        oracle: bool,
    },
    /// Split one image file into low- and high-frequency bands
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// Radial cutoff; defaults to a quarter of the shorter side
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Run the mode and placement ablation grids
    Ablate {
        /// Data directory; generated from the configuration when omitted
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Parameter accounting for the configured adapter model
    Params,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &g.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn out_dir(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    match cli.command {
        Command::Generate { classes } => {
            if let Some(c) = classes {
                cfg.data_classes = c;
                cfg.validate()?;
            }
            let out = g.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            prepare_out(&out, g.force)?;
            let split = generate_split(&cfg)?;
            write_data_dir(&out, &cfg, &split)?;
            println!(
                "wrote {}: labeled {}, unlabeled {}, test {}",
                out.display(),
                split.labeled.len(),
                split.unlabeled.len(),
                split.test.len()
            );
            print!("{}", histogram_text(&split, cfg.data_classes));
        }
        Command::Pretrain => {
            let out = out_dir(g, "runs/pretrain");
            prepare_out(&out, g.force)?;
            let (params, rep) = pretrain(&cfg, cfg.seed)?;
            let ck = Checkpoint {
                teacher: params.clone(),
                student: params,
                step: 0,
            };
            checkpoint::save(&out.join("backbone.fwck"), &ck)?;
            fs::write(out.join("config.txt"), cfg.render())?;
            let mut log = format!("epoch\tloss\n0\t{}\n", rep.initial_loss);
            for (i, l) in rep.epoch_losses.iter().enumerate() {
                log.push_str(&format!("{}\t{l}\n", i + 1));
            }
            fs::write(out.join("pretrain_log.tsv"), &log)?;
            print!("{log}");
            println!("wrote {}", out.join("backbone.fwck").display());
        }
        Command::Train { data } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let split = load_split(&data)?;
            let classes = data_classes(&data)?;
            if classes != cfg.data_classes {
                return Err(Error::Data(format!(
                    "data directory has {classes} classes, configuration has {}",
                    cfg.data_classes
                )));
            }
            let out = out_dir(g, "runs/train");
            prepare_out(&out, g.force)?;
            let backbone = backbone_params(&cfg)?;
            let run = train_run(&cfg, &backbone, &split, cfg.seed)?;
            let metrics = report(&evaluate(&run.model, &run.state.student, &split.test)?)?;
            write_run_dir(&out, &cfg, &run, &metrics)?;
            print!("{}", run.params.render());
            print!("{}", metrics.table());
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            oracle,
        } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let split = load_split(&data)?;
            let classes = data_classes(&data)?;
            let cm = if oracle {
                oracle_matrix(&split.test, classes)?
            } else {
                let path = checkpoint.expect("clap requires --checkpoint without --oracle");
                let ck = checkpoint::load(&path)?;
                let model = Model::new(infer_backbone(&ck.student, &cfg.backbone())?)?;
                let k = model.config().num_classes;
                if k != classes {
                    return Err(Error::Data(format!(
                        "checkpoint predicts {k} classes, data directory has {classes}"
                    )));
                }
                evaluate(&model, &ck.student, &split.test)?
            };
            let rep = report(&cm)?;
            print!("{}", rep.table());
            if let Some(out) = &g.out {
                prepare_out(out, g.force)?;
                fs::write(out.join("metrics.txt"), rep.key_values())?;
            }
        }
        Command::Decompose { input, rho } => {
            let image = load_tensor(&input)?;
            let x = match *image.shape() {
                [c, h, w] => image.reshape(&[1, c, h, w])?,
                [_, _, _, _] => image,
                _ => {
                    return Err(Error::Data(format!(
                        "expected a [C, H, W] image, got {:?}",
                        image.shape()
                    )))
                }
            };
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let rho = rho.unwrap_or_else(|| default_cutoff(h, w));
            let pair = decompose(&x, rho)?;
            let out = out_dir(g, "runs/decompose");
            prepare_out(&out, g.force)?;
            save_tensor(out.join("low.fwtn"), &pair.low)?;
            save_tensor(out.join("high.fwtn"), &pair.high)?;
            let total = pair.low_energy + pair.high_energy;
            println!("rho = {rho}");
            println!("low_energy = {}", pair.low_energy);
            println!("high_energy = {}", pair.high_energy);
            println!("low_fraction = {}", pair.low_fraction());
            println!(
                "high_fraction = {}",
                if total == 0.0 {
                    0.0
                } else {
                    pair.high_energy / total
                }
            );
            println!("max_imag_residue = {:e}", pair.max_imag_residue);
        }
        Command::Ablate { data } => {
            let split = match data {
                Some(dir) => load_split(&dir)?,
                None => generate_split(&cfg)?,
            };
            let out = out_dir(g, "runs/ablate");
            prepare_out(&out, g.force)?;
            let mut progress = String::new();
            let table = ablate(&cfg, &split, |line| {
                eprintln!("{line}");
                progress.push_str(line);
                progress.push('\n');
            })?;
            let text = table.render();
            fs::write(out.join("config.txt"), cfg.render())?;
            fs::write(out.join("ablation.txt"), &text)?;
            fs::write(out.join("runs.txt"), progress)?;
            print!("{text}");
        }
        Command::Params => {
            let backbone = Model::new(cfg.backbone())?.init_backbone(0);
            let (_, params) = assemble(&cfg, &backbone, 0)?;
            print!("{}", ParamReport::of(&params).render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
