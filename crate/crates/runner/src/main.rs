use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use p2d_core::detection::decode;
use p2d_core::scene::{export_episodes, import_episodes, Episode};
use p2d_runner::ablation::{aggregate, run_variants, suite_variants, AblationTable, Suite, SweepOptions};
use p2d_runner::data::{generate_split, Split};
use p2d_runner::eval::{collect_records, report_records};
use p2d_runner::metrics::records_to_jsonl;
use p2d_runner::report::{markdown_table, svg_bar_chart, write_json, write_table_outputs, JsonlWriter};
use p2d_runner::train::train;
use p2d_runner::visualize::{panels, render, save_png};
use p2d_runner::{Checkpoint, ExperimentConfig, Result, RunError};

#[derive(Parser)]
#[command(name = "p2d", version, about = "Prediction-guided temporal BEV detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic episodes to a directory, one JSON file each.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Number of episodes; defaults to the split's configured size.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and step log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Train on exported episodes instead of generating them.
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metric records and a summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on exported episodes instead of generating them.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Override an `eval.*` key. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a config sweep over several seeds and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "modes")]
        suite: Suite,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also evaluate on noise-free episodes.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render observation, prediction, query and detection panels as PNG.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an ablation summary into a markdown table and an SVG chart.
    Plot {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn eval_episodes(config: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<Episode>> {
    match dir {
        Some(d) => Ok(import_episodes(d)?),
        None => generate_split(&config.scene, config.eval.data_seed, Split::Eval, config.eval.eval_episodes),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, split, count, out } => {
            let config = config.load()?;
            let (split, seed, default) = match split {
                SplitArg::Train => (Split::Train, config.train.data_seed, config.train.train_episodes),
                SplitArg::Eval => (Split::Eval, config.eval.data_seed, config.eval.eval_episodes),
            };
            std::fs::create_dir_all(&out)?;
            let episodes = generate_split(&config.scene, seed, split, count.unwrap_or(default))?;
            let paths = export_episodes(&out, &episodes)?;
            eprintln!("wrote {} episodes to {}", paths.len(), out.display());
        }
        Command::Train { config, episodes, out } => {
            let config = config.load()?;
            let episodes = match episodes {
                Some(d) => import_episodes(&d)?,
                None => generate_split(&config.scene, config.train.data_seed, Split::Train, config.train.train_episodes)?,
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), config.to_toml_string()?)?;
            let mut log = JsonlWriter::new(BufWriter::new(File::create(out.join("train_log.jsonl"))?));
            let mut failure = None;
            let outcome = train(&config, &episodes, |step| {
                if failure.is_none() {
                    failure = log.write(step).err();
                }
                if step.step % 100 == 0 {
                    eprintln!("step {} epoch {} loss {:.4}", step.step, step.epoch, step.loss.total);
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            let ckpt = Checkpoint::new(config, outcome.model)?;
            ckpt.save(&out.join("checkpoint.bin"))?;
            eprintln!("checkpoint {} (config {})", out.join("checkpoint.bin").display(), ckpt.hash());
        }
        Command::Eval { checkpoint, episodes, overrides, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut config = ckpt.config.clone();
            if !overrides.is_empty() {
                if let Some(bad) = overrides.iter().find(|o| !o.trim_start().starts_with("eval.")) {
                    return Err(RunError::Config(format!("only eval.* keys can be overridden at evaluation, got `{bad}`")));
                }
                let mut doc = toml::Table::try_from(&config).map_err(|e| RunError::Config(e.to_string()))?;
                for o in &overrides {
                    p2d_runner::config::apply_override(&mut doc, o)?;
                }
                config = doc.try_into()?;
                config.validate()?;
            }
            let episodes = eval_episodes(&config, episodes.as_deref())?;
            if episodes.is_empty() {
                return Err(RunError::EmptyDataset);
            }
            let records = collect_records(&ckpt.model, &episodes, &config.eval)?;
            let report = report_records(&records, &config.eval, config.model.num_classes)?;
            std::fs::create_dir_all(&out)?;
            let mut metrics = JsonlWriter::new(BufWriter::new(File::create(out.join("metrics.jsonl"))?));
            for (source, r) in [("detection", Some(&report.all)), ("detection", Some(&report.moving)), ("prediction_only", report.prediction_only.as_ref()), ("prediction_only", report.prediction_only_moving.as_ref())] {
                if let Some(r) = r {
                    metrics.write(&serde_json::json!({ "source": source, "report": r }))?;
                }
            }
            std::fs::write(out.join("records.jsonl"), records_to_jsonl(&records.detection)?)?;
            write_json(&out.join("summary.json"), &report)?;
            println!(
                "mAP {:.4} mATE {:.4} mAVE {:.4} mAOE {:.4} | moving mAP {:.4} mATE {:.4} mAVE {:.4}",
                report.all.map, report.all.mate, report.all.mave, report.all.maoe, report.moving.map, report.moving.mate, report.moving.mave
            );
            if let Some(p) = &report.prediction_only {
                println!("prediction-only mAP {:.4} mAVE {:.4}", p.map, p.mave);
            }
        }
        Command::Ablate { config, suite, seeds, noiseless, out } => {
            let base = config.load()?;
            std::fs::create_dir_all(&out)?;
            let mut runs_log = JsonlWriter::new(BufWriter::new(File::create(out.join("runs.jsonl"))?));
            let options = SweepOptions { seeds, noiseless_eval: noiseless };
            let runs = run_variants(&suite_variants(&base, suite), &options, |r, _, _| {
                eprintln!("{} seed {}: mAP {:.4} mAVE {:.4}", r.variant, r.seed, r.report.all.map, r.report.all.mave);
                runs_log.write(r)
            })?;
            let table = AblationTable {
                suite: Some(suite),
                rows: aggregate(&runs),
                runs,
            };
            write_table_outputs(&out, &table)?;
            print!("{}", markdown_table(&table.rows));
        }
        Command::Visualize { checkpoint, episodes, count, scale, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = &ckpt.config;
            let episodes = eval_episodes(config, episodes.as_deref())?;
            std::fs::create_dir_all(&out)?;
            for (n, episode) in episodes.iter().take(count).enumerate() {
                let ep = episode.newest(config.model.frames());
                let observations: Vec<_> = ep.frames.iter().map(|f| f.observation.clone()).collect();
                let output = ckpt.model.forward(&observations, &ep.poses())?;
                let detections = decode(&output.detection, &config.model.grid, config.eval.score_threshold, config.eval.max_detections);
                let frame = ep.current();
                let img = render(&config.model.grid, &panels(frame, config.model.num_classes, &output), &frame.objects, &detections, scale);
                let path = out.join(format!("episode_{n:04}.png"));
                save_png(&path, &img)?;
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Plot { summary, out } => {
            let table: AblationTable = serde_json::from_slice(&std::fs::read(&summary)?)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("table.md"), markdown_table(&table.rows))?;
            std::fs::write(out.join("map.svg"), svg_bar_chart("mAP by variant", &table.rows))?;
            print!("{}", markdown_table(&table.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
