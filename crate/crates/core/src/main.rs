use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cohd_core::config::Config;
use cohd_core::harness::{self, Axis, Checkpoint, DataShape, Model, ModelPredictor};
use cohd_core::metrics::MetricReport;
use cohd_core::synthgres::{self, Dataset};

#[derive(Parser)]
#[command(name = "cohd", about = "Toy GRES decoder: data generation, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (dataset.json + vocab.json).
    GenData(Common),
    /// Train on `data.path`; writes checkpoint.bin and train_log.jsonl.
    Train(Common),
    /// Evaluate a checkpoint on `data.eval_path` (or `data.path`); writes metrics.json and predictions.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the baseline plus one variant per axis; writes ablation.json and ablation.txt.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated axes, e.g. `hsd_off,inter_off,sdm_layers=2`; `full` for the whole matrix.
        #[arg(long, default_value = "")]
        axes: String,
    },
    /// Recompute metrics.json from a predictions.jsonl dump.
    Metrics {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn dataset(path: Option<&String>) -> anyhow::Result<Dataset> {
    let Some(p) = path else { bail!("config has no data.path") };
    Dataset::load(Path::new(p)).with_context(|| format!("loading dataset {p}"))
}

fn write_report(report: &MetricReport, out: &Path) -> anyhow::Result<()> {
    std::fs::write(out.join("metrics.json"), report.to_json() + "\n")?;
    println!("{}", report.to_json());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = load_config(&c)?;
            let ds = synthgres::generate(&cfg.gen, cfg.seed)?;
            let path = ds.write(&c.out)?;
            println!("wrote {} samples to {}", ds.samples.len(), path.display());
        }
        Cmd::Train(c) => {
            let cfg = load_config(&c)?;
            let ds = dataset(cfg.data.path.as_ref())?;
            let log = BufWriter::new(File::create(c.out.join("train_log.jsonl"))?);
            let trained = harness::train(&cfg, DataShape::of(&ds)?, &ds.decode()?, log)?;
            trained.checkpoint(&cfg).save(&c.out.join("checkpoint.bin"))?;
            if let Some(last) = trained.log.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ds = dataset(cfg.data.eval_path.as_ref().or(cfg.data.path.as_ref()))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let shape = DataShape::of(&ds)?;
            if ck.header.data.n_categories != shape.n_categories {
                bail!("dataset has {} categories, checkpoint {}", shape.n_categories, ck.header.data.n_categories);
            }
            let model = Model::new(&ck.header.model, ck.header.data)?;
            let ev = harness::evaluate(&ModelPredictor { model: &model, params: &ck.params }, &ds.decode()?)?;
            harness::write_dump(&ev.dump, BufWriter::new(File::create(common.out.join("predictions.jsonl"))?))?;
            write_report(&ev.report, &common.out)?;
        }
        Cmd::Ablate { common, axes } => {
            let cfg = load_config(&common)?;
            let axes: Vec<Axis> = match axes.trim() {
                "" => vec![],
                "full" => Axis::full_matrix(),
                list => list.split(',').map(|a| a.trim().parse()).collect::<Result<_, _>>()?,
            };
            let train_ds = dataset(cfg.data.path.as_ref())?;
            let eval_ds = match &cfg.data.eval_path {
                Some(_) => dataset(cfg.data.eval_path.as_ref())?,
                None => train_ds.clone(),
            };
            let table = harness::ablate(&cfg, &axes, DataShape::of(&train_ds)?, &train_ds.decode()?, &eval_ds.decode()?)?;
            table.validate()?;
            std::fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            let text = table.to_text();
            std::fs::write(common.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Cmd::Metrics { dump, out } => {
            std::fs::create_dir_all(&out)?;
            let records = harness::read_records(BufReader::new(File::open(&dump).with_context(|| format!("opening {}", dump.display()))?))?;
            write_report(&MetricReport::compute(&records)?, &out)?;
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
