//! Experiment runner: dataset generation, corruption suites, ablation
//! training arms, evaluation and cross-run reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdgod_core::data::{
    category_names, dataset_checksum, load_dataset, save_dataset, save_detections, write_json,
};
use sdgod_core::{DetectionSample, ToyDetector};

use sdgod_lab::config::{Mode, RunConfig};
use sdgod_lab::evalrun::{build_suite, evaluate_snapshot, suite_seed_for};
use sdgod_lab::report::{comparison_csv, comparison_markdown, per_corruption_csv, RunSummary};
use sdgod_lab::train::{test_split, train_split, TrainState};
use sdgod_lab::{LabError, Result};

#[derive(Parser)]
#[command(
    name = "sdgod-lab",
    about = "Desk-scale lab for single-domain generalized object detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's training mode.
    #[arg(long)]
    mode: Option<Mode>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source domain (train/ and test/ splits).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize the corruption suite over a dataset's test split.
    Corrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Suite directory to create (one subdirectory per cell).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one ablation arm and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run's checkpoint over the corruption suite.
    Eval {
        /// Override the run's persisted config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory from train.
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare evaluated runs; first run is the reference row.
    Report {
        /// Evaluated run directories, in table order.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for comparison.csv/.md and per_corruption.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_split(data: &Path, split: &str) -> Result<Vec<DetectionSample>> {
    let dir = data.join(split);
    if !dir.join("dataset.json").is_file() {
        return Err(LabError::Io(format!(
            "no {split} split at {}; run gen-data first",
            dir.display()
        )));
    }
    Ok(load_dataset(&dir)?.0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(cfg: RunConfig, out: &Path) -> Result<()> {
    let categories = category_names(cfg.data.categories);
    let train = train_split(&cfg)?;
    let test = test_split(&cfg)?;
    save_dataset(&out.join("train"), &train, &categories)?;
    save_dataset(&out.join("test"), &test, &categories)?;
    write_json(
        &out.join("checksums.json"),
        &serde_json::json!({
            "train": dataset_checksum(&train),
            "test": dataset_checksum(&test),
        }),
    )?;
    println!(
        "wrote {} train / {} test images to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_corrupt(cfg: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (test, categories) = {
        let dir = data.join("test");
        if !dir.join("dataset.json").is_file() {
            return Err(LabError::Io(format!(
                "no test split at {}; run gen-data first",
                dir.display()
            )));
        }
        load_dataset::<f64>(&dir)?
    };
    let types = cfg.eval.corruption_types()?;
    let severities = cfg.eval.severity_levels()?;
    // Same suite seed as eval, so the persisted cells are the pixels the
    // evaluation actually scores.
    let suite = build_suite(&test, &types, &severities, suite_seed_for(&cfg));
    let mut cells = Vec::new();
    for (c, s, samples) in &suite {
        let name = format!("{}_s{}", c.name(), s.level());
        save_dataset(&out.join(&name), samples, &categories)?;
        cells.push(serde_json::json!({
            "cell": name,
            "checksum": dataset_checksum(samples),
        }));
    }
    write_json(&out.join("suite.json"), &cells)?;
    println!("wrote {} suite cells to {}", suite.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let samples = load_split(data, "train")?;
    let mut state = TrainState::new(cfg.clone(), samples)?;
    state.run()?;
    cfg.save(&out.join("config.toml"))?;
    state.detector.save_checkpoint(out.join("checkpoint.json"))?;
    write_text(&out.join("loss_log.csv"), &state.log_csv())?;
    let last = state.log.last().expect("nonzero iteration budget");
    println!(
        "trained {} for {} iterations (final loss {:.4}); artifacts in {}",
        cfg.train.mode,
        state.iterations_done(),
        last.total,
        out.display()
    );
    Ok(())
}

fn cmd_eval(config: Option<&Path>, run: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::load(&run.join("config.toml"))?,
    };
    cfg.validate()?;
    let test = load_split(data, "test")?;
    let detector = ToyDetector::load_checkpoint(run.join("checkpoint.json"))?;
    let outcome = evaluate_snapshot(&detector.snapshot(), &test, &cfg, suite_seed_for(&cfg))?;
    let out = out.unwrap_or(run);

    write_json(&out.join("mpc_report.json"), &outcome.mpc_report)?;
    write_text(&out.join("mpc_report.csv"), &outcome.mpc_report.to_csv())?;
    write_json(&out.join("cosine_report.json"), &outcome.cosine)?;
    write_text(&out.join("cosine_report.csv"), &outcome.cosine.to_csv())?;
    save_detections(&out.join("detections").join("clean.json"), &outcome.clean_detections)?;
    for (cell, dets) in &outcome.cell_detections {
        save_detections(&out.join("detections").join(format!("{cell}.json")), dets)?;
    }
    println!(
        "clean mAP {:.2}, mPC {:.2}; reports in {}",
        outcome.mpc_report.clean_map,
        outcome.mpc_report.mpc()?,
        out.display()
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let summaries: Vec<RunSummary> = runs
        .iter()
        .map(|dir| {
            let report = sdgod_core::data::read_json(&dir.join("mpc_report.json"))?;
            let cfg = RunConfig::load(&dir.join("config.toml"))?;
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string());
            RunSummary::from_report(&name, &cfg.train.mode.to_string(), &report)
        })
        .collect::<Result<_>>()?;
    let md = comparison_markdown(&summaries)?;
    print!("{md}");
    if let Some(out) = out {
        write_text(&out.join("comparison.csv"), &comparison_csv(&summaries)?)?;
        write_text(&out.join("comparison.md"), &md)?;
        write_text(&out.join("per_corruption.csv"), &per_corruption_csv(&summaries)?)?;
        println!("tables written to {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { cfg, out } => cmd_gen_data(cfg.load()?, &out),
        Cmd::Corrupt { cfg, data, out } => cmd_corrupt(cfg.load()?, &data, &out),
        Cmd::Train { cfg, data, out } => cmd_train(cfg.load()?, &data, &out),
        Cmd::Eval { config, run, data, out } => {
            cmd_eval(config.as_deref(), &run, &data, out.as_deref())
        }
        Cmd::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
