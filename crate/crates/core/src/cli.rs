//! Command-line front end. Every command takes explicit paths and a config
//! file; nothing is read from the environment.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::captioner::{Checkpoint, DecodeStrategy};
use crate::causal::Variant;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, render_table, EvalConfig};
use crate::experiment::{
    generate_data, prepare_from, run_name, run_pipeline, run_variant, sweep_alpha, ExperimentConfig, ExperimentDir,
};
use crate::explain::interpretability_accuracy;
use crate::scenegen::{read_dataset, write_dataset, Manifest};

#[derive(Debug, Parser)]
#[command(name = "causalcap", version, about = "Counterfactually regularized captioning on synthetic scene grids")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Te,
    Nde,
}

impl VariantArg {
    fn variant(self) -> Option<Variant> {
        match self {
            VariantArg::Baseline => None,
            VariantArg::Te => Some(Variant::Te),
            VariantArg::Nde => Some(Variant::Nde),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Shortcut,
    Biased,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a complete default config.
    InitConfig {
        #[arg(long, value_enum, default_value = "shortcut")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the dataset splits and manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1, decode counterfactual captions, and optionally run
    /// stage 2 with one variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        variant: VariantArg,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Test scenes probed for interpretability; 0 skips it.
        #[arg(long, default_value_t = 0)]
        interp_samples: usize,
    },
    /// Region-ranking interpretability probes on the test split.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        probes_per_sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-probe report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2 for both variants over a list of alphas.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.99,0.999,0.9999,1.0")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data, stage 1, and one run end to end in a single experiment directory.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        variant: VariantArg,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint_for(path: &Path, manifest: &Manifest) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.params.config();
    if cfg.vocab_size != manifest.vocabulary.size()
        || cfg.grid_height != manifest.grid_height
        || cfg.grid_width != manifest.grid_width
    {
        return Err(Error::input("checkpoint was trained for a different vocabulary or grid"));
    }
    Ok(ck)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { preset, seed } => {
            let cfg = match preset {
                Preset::Shortcut => ExperimentConfig::shortcut(seed),
                Preset::Biased => ExperimentConfig::biased(seed),
            };
            print!("{}", cfg.to_toml());
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, manifest, data) = generate_data(&cfg)?;
            write_dataset(&out, &manifest, &data)?;
            println!(
                "wrote {} train, {} valid, {} test scenes to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            variant,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let world = cfg.validate()?;
            let (manifest, dataset) = read_dataset(&data)?;
            if manifest.config_hash != cfg.world.hash() || manifest.bias != cfg.bias {
                return Err(Error::config("world", "dataset was generated from a different world config"));
            }
            let dir = ExperimentDir::new(&out);
            let prep = prepare_from(&dir, &cfg, world, &manifest, dataset)?;
            let s = run_variant(&dir, &cfg, &prep, variant.variant(), run_name(variant.variant()), cfg.regularization.alpha)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializes"));
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            beam,
            interp_samples,
        } => {
            let (manifest, dataset) = read_dataset(&data)?;
            let ck = load_checkpoint_for(&checkpoint, &manifest)?;
            let decoding = DecodeStrategy::Beam { width: beam };
            decoding.validate()?;
            let eval = EvalConfig {
                interp_samples,
                ..EvalConfig::default()
            };
            let report = evaluate(
                &ck.params,
                &dataset.test,
                &manifest.vocabulary,
                manifest.bias.as_ref(),
                decoding,
                &eval,
            )?;
            let name = match (ck.stage.number(), ck.variant) {
                (1, _) => "baseline".to_string(),
                (_, Some(v)) => v.name().to_string(),
                _ => "stage2".to_string(),
            };
            let json = serde_json::to_string_pretty(&report).expect("serializes") + "\n";
            let table = render_table(&[(&name, &report)]);
            if let Some(dir) = out {
                write(&dir.join("metrics.json"), &json)?;
                write(&dir.join("metrics.txt"), &table)?;
            }
            print!("{json}");
            eprint!("{table}");
        }
        Command::Interpret {
            checkpoint,
            data,
            samples,
            probes_per_sample,
            seed,
            out,
        } => {
            let (manifest, dataset) = read_dataset(&data)?;
            let ck = load_checkpoint_for(&checkpoint, &manifest)?;
            let items: Vec<_> = dataset.test.iter().take(samples).map(|e| (&e.image, &e.caption)).collect();
            let report = interpretability_accuracy(&ck.params, &items, probes_per_sample, seed)?;
            let json = serde_json::to_string_pretty(&report).expect("serializes") + "\n";
            match out {
                Some(path) => write(&path, &json)?,
                None => print!("{json}"),
            }
            eprintln!("accuracy {:.4} over {} probes", report.accuracy, report.probes.len());
        }
        Command::SweepAlpha { config, alphas, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = sweep_alpha(&ExperimentDir::new(&out), &cfg, &alphas)?;
            println!("variant  alpha     CHAIR_s  BLEU-4");
            for r in &report.rows {
                let v = r.variant.map_or("vanilla", Variant::name);
                println!("{v:<8} {:<9} {:.4}   {:.4}", r.alpha, r.chair_s, r.bleu4);
            }
            println!("vanilla  1         {:.4}   {:.4}", report.vanilla.chair_s, report.vanilla.bleu4);
            if !report.alpha_one_matches_vanilla {
                return Err(Error::Divergence("alpha = 1 runs do not reproduce vanilla training".into()));
            }
        }
        Command::Pipeline { config, out, variant } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_pipeline(&ExperimentDir::new(&out), &cfg, variant.variant())?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializes"));
        }
    }
    Ok(())
}
