use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{parse_ratios, DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    load_model, load_raw, mia_json, report_json, rounds_csv, run_experiment, save_model, summary_csv, write_atomic,
    write_dataset, Session,
};

#[derive(Debug, Parser)]
#[command(name = "gnn-unlearn", version, about = "Node unlearning experiments for graph neural networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Threads for shadow training (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Unlearning ratio; a comma-separated list sweeps ratios in `experiment`.
    #[arg(long, global = true)]
    pub ratio: Option<String>,
    /// Skip neighborhood reconstruction.
    #[arg(long, global = true)]
    pub no_reconstruction: bool,
    /// Keep the forgotten nodes' edges when retraining.
    #[arg(long, global = true)]
    pub retain_structure: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw Planetoid files into a dataset directory.
    Ingest {
        #[arg(long)]
        content: Option<PathBuf>,
        #[arg(long)]
        cites: Option<PathBuf>,
    },
    /// Train the original model.
    Train,
    /// Train the reference model without the forgotten nodes.
    Retrain,
    /// Unlearn the forgotten nodes from a trained model.
    Unlearn {
        /// Defaults to `<out>/original.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on every node role.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Membership inference against a checkpoint.
    Mia {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train, unlearn, retrain, evaluate and attack over the ratio sweep.
    Experiment,
}

impl GlobalArgs {
    /// Loads the config file (or defaults) and applies command-line overrides.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(r) = &self.ratio {
            let ratios = parse_ratios(r)?;
            cfg.split.unlearn_fraction = ratios[0];
            cfg.ratios = ratios;
        }
        if self.no_reconstruction {
            cfg.unlearn.reconstruction = false;
        }
        if self.retain_structure {
            cfg.retain_structure = true;
        }
        Ok(cfg)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn single_ratio(cfg: &ExperimentConfig) -> CliResult<f64> {
    match cfg.ratios.as_slice() {
        [] => Ok(cfg.split.unlearn_fraction),
        [r] => Ok(*r),
        _ => Err(CliError::Usage("only `experiment` accepts a list of ratios".into())),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = cli.global.resolve()?;
    if let Command::Ingest { content, cites } = &cli.command {
        if let (Some(c), Some(t)) = (content, cites) {
            cfg.data = DataSource::Raw {
                content: c.clone(),
                cites: t.clone(),
            };
        } else if content.is_some() || cites.is_some() {
            return Err(CliError::Usage("--content and --cites go together".into()));
        }
        let DataSource::Raw { content, cites } = &cfg.data else {
            return Err(CliError::Usage("ingest needs raw `content` and `cites` files".into()));
        };
        let (graph, manifest) = load_raw(content, cites)?;
        write_dataset(&cfg.out, &graph, &manifest)?;
        info!(
            "ingested {} nodes, {} features, {} classes into {}",
            manifest.num_nodes,
            manifest.feature_dim,
            manifest.num_classes,
            cfg.out.display()
        );
        return Ok(());
    }

    let session = Session::open(cfg)?;
    let out = session.cfg.out.clone();
    match cli.command {
        Command::Ingest { .. } => unreachable!("handled above"),
        Command::Train => {
            let partition = session.partition(single_ratio(&session.cfg)?)?;
            let (model, log) = session.train(&partition)?;
            save_model(&out.join("original.ckpt"), &model)?;
            write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
            info!("best epoch {} eval acc {:.4}", log.best_epoch, log.best_eval_acc);
        }
        Command::Retrain => {
            let partition = session.partition(single_ratio(&session.cfg)?)?;
            let (model, log) = session.retrain(&partition)?;
            save_model(&out.join("retrain.ckpt"), &model)?;
            write_atomic(&out.join("retrain_log.csv"), log.to_csv().as_bytes())?;
        }
        Command::Unlearn { model } => {
            let partition = session.partition(single_ratio(&session.cfg)?)?;
            let path = model.unwrap_or_else(|| out.join("original.ckpt"));
            let original = load_model(&path)?;
            let (unlearned, report) = session.unlearn(&original, &partition)?;
            save_model(&out.join("unlearned.ckpt"), &unlearned)?;
            write_atomic(&out.join("unlearn_report.json"), report_json(&report)?.as_bytes())?;
            write_atomic(&out.join("unlearn_rounds.csv"), rounds_csv(&report).as_bytes())?;
            info!("{} rounds, termination {:?}", report.rounds, report.termination);
        }
        Command::Eval { model } => {
            let partition = session.partition(single_ratio(&session.cfg)?)?;
            let eval = session.evaluate(&load_model(&model)?, &partition)?;
            write_atomic(&out.join(format!("eval_{}.csv", stem(&model))), eval.to_csv().as_bytes())?;
            info!("test acc {:.4}, unlearn score {:.2}", eval.test, eval.unlearn_score());
        }
        Command::Mia { model } => {
            let partition = session.partition(single_ratio(&session.cfg)?)?;
            let target = load_model(&model)?;
            let (nodes, conf) = session.shadows(&partition)?;
            let result = session.attack(&target, &nodes, &conf)?;
            let name = stem(&model);
            write_atomic(&out.join(format!("mia_{name}.json")), mia_json(&result)?.as_bytes())?;
            write_atomic(&out.join(format!("roc_{name}.csv")), result.roc_csv().as_bytes())?;
            info!("AUC {:.4}", result.auc);
        }
        Command::Experiment => {
            let rows = run_experiment(&session)?;
            print!("{}", summary_csv(&rows));
        }
    }
    Ok(())
}
