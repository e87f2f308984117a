use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use purify_core::diffusion::{load_checkpoint, save_checkpoint, IdentityRecord};
use purify_core::harness::{generate_toy_dataset, load_set_dir, render_report, DefenseKind, ExperimentConfig, ExperimentReport, Pipeline, Table, ToyDatasetSpec};
use purify_core::image::export_set_dir;
use purify_core::personalization::{finetune, generate, FinetuneConfig, InstanceSet};
use purify_core::purification::{purify_set, PurifierConfig};

#[derive(Parser)]
#[command(name = "purify", version, about = "Protect, purify, personalize and score images on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; the built-in desk preset when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set budget.eta=0.03`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=...`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

impl ConfigArgs {
    fn load(&self) -> purify_core::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides),
            None => ExperimentConfig::desk().with_overrides(&overrides),
        }
    }

    fn pipeline(&self) -> purify_core::Result<Pipeline> {
        let mut p = Pipeline::new(self.load()?)?;
        p.progress = !self.quiet;
        Ok(p)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic data.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Print a preset config as TOML.
    Config {
        #[arg(long, default_value = "desk", value_parser = ["desk", "smoke"])]
        preset: String,
    },
    /// Protect the target identity's instance images.
    Defend {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// none, aspl, aspl+hf-mask, aspl+greedy-timesteps or aspl+hf+greedy.
        #[arg(long, default_value = "aspl")]
        defense: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Purify a set directory.
    Purify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding `images.pimg`.
        #[arg(long)]
        input: PathBuf,
        /// none, cascade, diffpure or gridpure, with the config's parameters.
        #[arg(long)]
        purifier: String,
        /// Purification model checkpoint; the config's base model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Personalize the base model on a set directory.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a fine-tuned checkpoint and score the samples.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 77)]
        seed: u64,
        /// Metrics JSON; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the samples as a set directory.
        #[arg(long)]
        samples_dir: Option<PathBuf>,
    },
    /// Run the full defense × purifier matrix.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a results file (or a bare table JSON) as a Markdown table and figures.
    Report {
        /// `results.json` from a run.
        #[arg(long, conflicts_with = "table")]
        results: Option<PathBuf>,
        /// A table JSON with literal values.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where `report.md` and `figures/` go; next to the results by default.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write a toy face dataset.
    Generate {
        #[arg(long, default_value_t = 8)]
        identities: usize,
        #[arg(long, default_value_t = 48)]
        per_identity: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn purifier_from_config(cfg: &ExperimentConfig, name: &str) -> purify_core::Result<PurifierConfig> {
    match cfg.purifiers.iter().find(|p| p.name() == name) {
        Some(p) => Ok(p.clone()),
        None => PurifierConfig::by_name(name, cfg.image_size()),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> purify_core::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> purify_core::Result<bool> {
    match cli.command {
        Command::Dataset { command: DatasetCommand::Generate { identities, per_identity, size, channels, seed, out } } => {
            let d = generate_toy_dataset(&ToyDatasetSpec { identities, images_per_identity: per_identity, size, channels, seed })?;
            d.save(&out)?;
            println!("wrote {} identities x {} images to {}", identities, per_identity, out.display());
        }
        Command::Config { preset } => {
            let c = if preset == "smoke" { ExperimentConfig::smoke() } else { ExperimentConfig::desk() };
            print!("{}", c.to_toml()?);
        }
        Command::Defend { cfg, defense, out } => {
            let mut p = cfg.pipeline()?;
            let kind = DefenseKind::parse(&defense)?;
            let (set, _, rel) = p.protected(kind)?;
            copy_dir(&p.config.output_dir.join(rel), &out)?;
            let worst = set.max_abs_delta().into_iter().fold(0.0f32, f32::max);
            println!("protected {} images, max |delta| = {worst:.6}, written to {}", set.originals.len(), out.display());
        }
        Command::Purify { cfg, input, purifier, model, out } => {
            let mut p = cfg.pipeline()?;
            let pc = purifier_from_config(&p.config, &purifier)?;
            let m = match (&model, pc.needs_model()) {
                (Some(path), _) => Some(load_checkpoint(path)?.model),
                (None, true) => Some(p.base_model()?.0),
                (None, false) => None,
            };
            let set = purify_set(&pc, m.as_ref(), &load_set_dir(&input)?, &p.schedule, p.config.seeds.purification)?;
            set.export(&out)?;
            println!("purified {} images with {}, written to {}", set.images.len(), pc.name(), out.display());
        }
        Command::Finetune { cfg, input, seed, out } => {
            let mut p = cfg.pipeline()?;
            let base = p.base_model()?.0;
            let id = format!("identity-{}", p.config.split.target_identity);
            let set = InstanceSet::new(load_set_dir(&input)?, p.sks_token(), id.clone())?;
            let f = &p.config.finetune;
            let fc = FinetuneConfig { learning_rate: f.learning_rate, steps: f.steps, prior_weight: 0.0, prior_images: vec![], seed, batch_size: f.batch_size };
            let tuned = finetune(&base, &set, &fc, &p.schedule)?;
            save_checkpoint(&out, &tuned, &p.schedule, Some(IdentityRecord { token: set.token, identity_id: id }))?;
            println!("fine-tuned {} steps on {} images, written to {}", fc.steps, set.images.len(), out.display());
        }
        Command::Evaluate { cfg, model, seed, out, samples_dir } => {
            let mut p = cfg.pipeline()?;
            let ck = load_checkpoint(&model)?;
            let mut results = Vec::new();
            for (i, cond) in p.config.evaluation.conditions.clone().iter().enumerate() {
                let samples = generate(&ck.model, p.condition_token(cond), p.config.evaluation.samples, purify_core::rng::derive(seed, i as u64), &ck.schedule)?;
                if let Some(d) = &samples_dir {
                    export_set_dir(&d.join(cond), &samples)?;
                }
                results.push(p.score(cond, &samples)?);
            }
            write_json(out.as_deref(), &results)?;
        }
        Command::Run { cfg } => {
            let config = cfg.load()?;
            let outcome = purify_core::harness::run_experiment(&config, !cfg.quiet)?;
            println!("{}", outcome.table);
            println!("results: {}", config.output_dir.join("results.json").display());
            for c in outcome.report.cells.iter().filter(|c| c.failed()) {
                eprintln!("cell {} / {} failed: {}", c.defense.name(), c.purifier, c.error.as_deref().unwrap_or(""));
            }
            return Ok(!outcome.report.any_failed());
        }
        Command::Report { results, table, out_dir } => {
            if let Some(t) = table {
                let table: Table = serde_json::from_slice(&std::fs::read(&t)?)?;
                let text = table.render();
                if let Some(d) = out_dir {
                    std::fs::create_dir_all(&d)?;
                    std::fs::write(d.join("report.md"), &text)?;
                }
                print!("{text}");
                return Ok(true);
            }
            let path = results.ok_or_else(|| purify_core::Error::Config("pass --results or --table".into()))?;
            let report = ExperimentReport::load(&path)?;
            let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let out = out_dir.unwrap_or_else(|| root.clone());
            std::fs::create_dir_all(&out)?;
            let r = render_report(&report, &root, &out.join("figures"))?;
            std::fs::write(out.join("report.md"), &r.table)?;
            print!("{}", r.table);
            println!("{} figures in {}", r.figures.len(), out.join("figures").display());
            return Ok(!report.any_failed());
        }
    }
    Ok(true)
}

fn copy_dir(from: &Path, to: &Path) -> purify_core::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        std::fs::copy(e.path(), to.join(e.file_name()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
