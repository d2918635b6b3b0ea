use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use protoens::config::{DatasetSource, RunConfig};
use protoens::ensemble::ModelPredictions;
use protoens::io::report::{self, ModelSection, ReportKind, RunReport};
use protoens::io::synth::{gen_synthetic, SyntheticSpec};
use protoens::io::{checkpoint, manifest};
use protoens::pipeline::{self, Member};
use protoens::AnyModel;

#[derive(Parser)]
#[command(name = "protoens", version, about = "Few-shot prototypical network ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest.json + payload.fsrt) to --out
    GenSynth(Common),
    /// Train one encoder from the config; writes a checkpoint and a report
    Train(Common),
    /// Evaluate a checkpoint; writes a report and a predictions file
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Hard and soft voting over prediction files, checkpoints, or freshly trained members
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., conflicts_with = "checkpoints")]
        predictions: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Paired runs with and without the class-aware loss
    Ablate(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; missing fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (for gen-synth: the generator seed)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Train with cross-entropy only
    #[arg(long)]
    no_cal: bool,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    q_query: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Index into the config's encoder list
    #[arg(long, default_value_t = 0)]
    encoder: usize,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Config file merged with flag overrides, plus a record of the flags used.
    fn resolve(&self) -> Result<(RunConfig, Vec<String>)> {
        let mut config = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let mut applied = Vec::new();
        let mut note = |flag: &str, value: String| applied.push(format!("--{flag}={value}"));
        if let Some(s) = self.seed {
            config.train.seed = Some(s);
            note("seed", s.to_string());
        }
        if let Some(m) = self.margin {
            config.train.margin = m;
            note("margin", m.to_string());
        }
        if self.no_cal {
            config.train.use_cal = false;
            note("no-cal", "true".into());
        }
        if let Some(v) = self.n_way {
            config.train.episode.n_way = v;
            config.eval.episode.n_way = v;
            note("n-way", v.to_string());
        }
        if let Some(v) = self.k_shot {
            config.train.episode.k_shot = v;
            config.eval.episode.k_shot = v;
            note("k-shot", v.to_string());
        }
        if let Some(v) = self.q_query {
            config.train.episode.q_query = v;
            config.eval.episode.q_query = v;
            note("q-query", v.to_string());
        }
        if let Some(v) = self.epochs {
            config.train.epochs = v;
            note("epochs", v.to_string());
        }
        if let Some(lr) = self.lr {
            config.train.lr = lr;
            note("lr", lr.to_string());
        }
        if self.encoder != 0 {
            note("encoder", self.encoder.to_string());
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
            note("out", out.display().to_string());
        }
        Ok((config, applied))
    }
}

fn out_dir(config: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&config.out)
        .with_context(|| format!("cannot create output directory {}", config.out.display()))?;
    Ok(&config.out)
}

fn save(report: &RunReport, path: &Path) -> Result<()> {
    report::write_report(path, report).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    checkpoint::read(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn gen_synth(common: &Common) -> Result<()> {
    let (config, overrides) = common.resolve()?;
    let mut spec = match &config.dataset {
        DatasetSource::Synthetic(s) => s.clone(),
        DatasetSource::Manifest { .. } => SyntheticSpec::imbalanced_four(16, 6.0, 0),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let data = gen_synthetic(&spec)?;
    let dir = out_dir(&config)?;
    let path = manifest::write_dataset(dir, &data.manifest, &data.payload)?;
    log::info!("synthetic spec {spec:?}, overrides {overrides:?}");
    println!("wrote {}", path.display());
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let (config, overrides) = common.resolve()?;
    if config.train.seed.is_none() {
        bail!("train requires a seed (--seed or train.seed in the config)");
    }
    config.validate()?;
    let (train_set, _) = pipeline::load_split(&config)?;
    let (model, train_report) = pipeline::train_member(&config, common.encoder, &train_set)?;
    let dir = out_dir(&config)?;
    let ck = dir.join(format!("{}.fsck", model.id()));
    checkpoint::write(&ck, &model).with_context(|| format!("cannot write {}", ck.display()))?;
    println!("wrote {}", ck.display());

    let mut report = RunReport::new(ReportKind::Train, config.clone());
    report.overrides = overrides;
    report.models.push(ModelSection {
        model_id: model.id().to_string(),
        encoder: model.spec().clone(),
        precision: model.precision(),
        param_checksum: model.checksum(),
        train: Some(train_report),
        eval: None,
        compactness: None,
    });
    save(&report, &dir.join(format!("{}.train.json", model.id())))
}

fn eval(common: &Common, checkpoint_path: &Path) -> Result<()> {
    let (config, overrides) = common.resolve()?;
    let model = load_checkpoint(checkpoint_path)?;
    let (_, test) = pipeline::load_split(&config)?;
    let evaluation = pipeline::evaluate(&config, &model, &test)?;
    let dir = out_dir(&config)?;
    let pred_path = dir.join(format!("{}.predictions.json", model.id()));
    report::write_predictions(&pred_path, &evaluation.predictions)
        .with_context(|| format!("cannot write {}", pred_path.display()))?;
    println!("wrote {}", pred_path.display());
    println!(
        "{}: accuracy {:.4}, macro F1 {:.4}",
        model.id(),
        evaluation.metrics.accuracy,
        evaluation.metrics.macro_f1
    );

    let member = Member {
        model,
        train: None,
        eval: evaluation,
    };
    let mut report = RunReport::new(ReportKind::Eval, config.clone());
    report.overrides = overrides;
    report.models.push(member.section());
    save(&report, &dir.join(format!("{}.eval.json", member.model.id())))
}

fn ensemble(common: &Common, predictions: &[PathBuf], checkpoints: &[PathBuf]) -> Result<()> {
    let (config, overrides) = common.resolve()?;
    let mut report = if !predictions.is_empty() {
        let sets = predictions
            .iter()
            .map(|p| report::read_predictions(p).with_context(|| format!("cannot load predictions {}", p.display())))
            .collect::<Result<Vec<ModelPredictions>>>()?;
        pipeline::ensemble_predictions(&config, sets)?.0
    } else if !checkpoints.is_empty() {
        let (_, test) = pipeline::load_split(&config)?;
        let members = checkpoints
            .par_iter()
            .map(|p| {
                let model = load_checkpoint(p)?;
                let eval = pipeline::evaluate(&config, &model, &test)?;
                Ok(Member {
                    model,
                    train: None,
                    eval,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pipeline::ensemble_run(&config, members)?
    } else {
        if config.train.seed.is_none() {
            bail!("training ensemble members requires a seed (--seed or train.seed in the config)");
        }
        config.validate()?;
        let (train_set, test) = pipeline::load_split(&config)?;
        let members = (0..config.encoders.len())
            .into_par_iter()
            .map(|i| pipeline::run_member(&config, i, &train_set, &test))
            .collect::<protoens::Result<Vec<_>>>()?;
        pipeline::ensemble_run(&config, members)?
    };
    report.overrides = overrides;
    if let Some(e) = &report.ensemble {
        println!(
            "{} model(s): hard vote {:.4}, soft vote {:.4}, {} hard-vote tie(s)",
            e.models.len(),
            e.hard.accuracy,
            e.soft.accuracy,
            e.hard_ties
        );
    }
    save(&report, &out_dir(&config)?.join("ensemble.json"))
}

fn ablate(common: &Common) -> Result<()> {
    let (config, overrides) = common.resolve()?;
    config.validate()?;
    let (train_set, test) = pipeline::load_split(&config)?;
    let pairs = config
        .ablation
        .seeds
        .par_iter()
        .map(|&s| pipeline::ablation_pair(&config, s, &train_set, &test))
        .collect::<protoens::Result<Vec<_>>>()?;
    let summary = pipeline::summarize_ablation(pairs)?;
    println!(
        "compactness ratio {:.4} with CAL vs {:.4} without; accuracy {:.4} vs {:.4}",
        summary.mean_ratio_with_cal,
        summary.mean_ratio_without_cal,
        summary.mean_accuracy_with_cal,
        summary.mean_accuracy_without_cal
    );
    let mut report = RunReport::new(ReportKind::Ablate, config.clone());
    report.overrides = overrides;
    report.ablation = Some(summary);
    save(&report, &out_dir(&config)?.join("ablation.json"))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(c) => gen_synth(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval(common, checkpoint),
        Command::Ensemble {
            common,
            predictions,
            checkpoints,
        } => ensemble(common, predictions, checkpoints),
        Command::Ablate(c) => ablate(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FSL_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
