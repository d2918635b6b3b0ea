//! End-to-end steps: load, split, train members, evaluate, vote, ablate.
//!
//! Each step is a plain function over a [`RunConfig`]; callers decide how to
//! schedule members.

use serde::{Deserialize, Serialize};

use crate::cal::LossBreakdown;
use crate::config::{DatasetSource, RunConfig};
use crate::encoder::EncoderSpec;
use crate::ensemble::{ensemble_from_models, EnsembleReport, ModelPredictions};
use crate::episodes::{stratified_split, DatasetIndex};
use crate::error::{Error, Result};
use crate::io::manifest::load_dataset;
use crate::io::report::{ModelSection, ReportKind, RunReport};
use crate::io::synth::gen_synthetic;
use crate::trainer::{AnyModel, Compactness, Evaluation, TrainConfig, TrainReport};

pub fn load(source: &DatasetSource) -> Result<DatasetIndex> {
    match source {
        DatasetSource::Manifest { path } => load_dataset(path),
        DatasetSource::Synthetic(spec) => gen_synthetic(spec)?.index(),
    }
}

/// `(train, test)` per the config's split section.
pub fn load_split(config: &RunConfig) -> Result<(DatasetIndex, DatasetIndex)> {
    let index = load(&config.dataset)?;
    stratified_split(&index, config.split.train_fraction, config.split.seed)
}

pub fn member_id(i: usize, spec: &EncoderSpec) -> String {
    format!("m{i}-{}-s{}", spec.kind_name(), spec.seed)
}

pub fn train_member(config: &RunConfig, i: usize, train: &DatasetIndex) -> Result<(AnyModel, TrainReport)> {
    let spec = config.encoder(i)?;
    let tc = config.member_train(i)?;
    let model = AnyModel::from_spec(&member_id(i, spec), spec, tc.lr, tc.precision)?;
    model.train(train, &tc)
}

pub fn evaluate(config: &RunConfig, model: &AnyModel, test: &DatasetIndex) -> Result<Evaluation> {
    model.evaluate(test, &config.eval.episode, config.eval.n_episodes, config.eval.seed)
}

/// A trained and evaluated ensemble member.
#[derive(Debug, Clone)]
pub struct Member {
    pub model: AnyModel,
    pub train: Option<TrainReport>,
    pub eval: Evaluation,
}

impl Member {
    pub fn section(&self) -> ModelSection {
        ModelSection {
            model_id: self.model.id().to_string(),
            encoder: self.model.spec().clone(),
            precision: self.model.precision(),
            param_checksum: self.model.checksum(),
            train: self.train.clone(),
            eval: Some(self.eval.metrics.clone()),
            compactness: Some(self.eval.compactness),
        }
    }
}

pub fn run_member(config: &RunConfig, i: usize, train: &DatasetIndex, test: &DatasetIndex) -> Result<Member> {
    let (model, report) = train_member(config, i, train)?;
    let eval = evaluate(config, &model, test)?;
    Ok(Member {
        model,
        train: Some(report),
        eval,
    })
}

/// HV / SV over members, which must share the evaluation stream. Members
/// are ordered by model id.
pub fn ensemble_run(config: &RunConfig, mut members: Vec<Member>) -> Result<RunReport> {
    members.sort_by(|a, b| a.model.id().cmp(b.model.id()));
    let predictions: Vec<ModelPredictions> = members.iter().map(|m| m.eval.predictions.clone()).collect();
    let mut report = RunReport::new(ReportKind::Ensemble, config.clone());
    report.ensemble = Some(ensemble_from_models(&predictions)?);
    report.models = members.iter().map(Member::section).collect();
    Ok(report)
}

/// Trains and evaluates every configured member in order, then votes.
pub fn run_ensemble(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let (train, test) = load_split(config)?;
    let members = (0..config.encoders.len())
        .map(|i| run_member(config, i, &train, &test))
        .collect::<Result<Vec<_>>>()?;
    ensemble_run(config, members)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub use_cal: bool,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub compactness: Compactness,
    pub final_loss: Option<LossBreakdown>,
    pub param_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub seed: u64,
    pub with_cal: AblationArm,
    pub without_cal: AblationArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub pairs: Vec<AblationPair>,
    pub mean_ratio_with_cal: f64,
    pub mean_ratio_without_cal: f64,
    pub mean_accuracy_with_cal: f64,
    pub mean_accuracy_without_cal: f64,
    /// Mean compactness ratio strictly lower with the class-aware loss.
    pub cal_lowers_ratio: bool,
}

fn arm(
    config: &RunConfig,
    spec: &EncoderSpec,
    tc: &TrainConfig,
    train: &DatasetIndex,
    test: &DatasetIndex,
) -> Result<AblationArm> {
    let id = format!(
        "ablate-{}-s{}-{}",
        spec.kind_name(),
        spec.seed,
        if tc.use_cal { "cal" } else { "ce" }
    );
    let model = AnyModel::from_spec(&id, spec, tc.lr, tc.precision)?;
    let (model, report) = model.train(train, tc)?;
    let eval = evaluate(config, &model, test)?;
    Ok(AblationArm {
        use_cal: tc.use_cal,
        accuracy: eval.metrics.accuracy,
        macro_f1: eval.metrics.macro_f1,
        compactness: eval.compactness,
        final_loss: report.epochs.last().map(|r| r.loss),
        param_checksum: model.checksum(),
    })
}

/// Same encoder init, training seed and evaluation stream; only the loss
/// differs between the two arms.
pub fn ablation_pair(config: &RunConfig, seed: u64, train: &DatasetIndex, test: &DatasetIndex) -> Result<AblationPair> {
    let mut spec = config.encoder(0)?.clone();
    spec.seed = seed;
    let mut tc = config.train.clone();
    tc.seed = Some(seed);
    tc.use_cal = true;
    let with_cal = arm(config, &spec, &tc, train, test)?;
    tc.use_cal = false;
    let without_cal = arm(config, &spec, &tc, train, test)?;
    Ok(AblationPair {
        seed,
        with_cal,
        without_cal,
    })
}

pub fn summarize_ablation(pairs: Vec<AblationPair>) -> Result<AblationReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("ablation needs at least one seed".into()));
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&AblationPair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let with = mean(&|p| p.with_cal.compactness.ratio);
    let without = mean(&|p| p.without_cal.compactness.ratio);
    Ok(AblationReport {
        mean_ratio_with_cal: with,
        mean_ratio_without_cal: without,
        mean_accuracy_with_cal: mean(&|p| p.with_cal.accuracy),
        mean_accuracy_without_cal: mean(&|p| p.without_cal.accuracy),
        cal_lowers_ratio: with < without,
        pairs,
    })
}

pub fn run_ablation(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let (train, test) = load_split(config)?;
    let pairs = config
        .ablation
        .seeds
        .iter()
        .map(|&s| ablation_pair(config, s, &train, &test))
        .collect::<Result<Vec<_>>>()?;
    let mut report = RunReport::new(ReportKind::Ablate, config.clone());
    report.ablation = Some(summarize_ablation(pairs)?);
    Ok(report)
}

/// HV / SV over prediction sets produced elsewhere.
pub fn ensemble_predictions(
    config: &RunConfig,
    mut predictions: Vec<ModelPredictions>,
) -> Result<(RunReport, EnsembleReport)> {
    predictions.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    let ens = ensemble_from_models(&predictions)?;
    let mut report = RunReport::new(ReportKind::Ensemble, config.clone());
    report.ensemble = Some(ens.clone());
    Ok((report, ens))
}
