//! Episodic training and evaluation of a single prototypical network.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cal::{self, LossBreakdown, DEFAULT_MARGIN};
use crate::encoder::{init_encoder, Encoder, EncoderSpec};
use crate::ensemble::{EpisodePredictions, ModelPredictions, QueryRecord};
use crate::episodes::{episode_stream, sample_episode, DatasetIndex, Episode, EpisodeSpec, SampleRef};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numeric::adam::DEFAULT_LR;
use crate::numeric::{argmax, AdamHyper, AdamState, Precision, Real, Tape, Var};
use crate::protonet::{self, head_on_tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Episodes per epoch; one optimizer step per episode.
    pub episodes_per_epoch: usize,
    pub episode: EpisodeSpec,
    pub lr: f64,
    pub margin: f64,
    pub use_cal: bool,
    /// Required; training refuses to run without an explicit seed.
    pub seed: Option<u64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            episodes_per_epoch: 32,
            episode: EpisodeSpec::default(),
            lr: DEFAULT_LR,
            margin: DEFAULT_MARGIN,
            use_cal: true,
            seed: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<u64> {
        if self.episodes_per_epoch == 0 {
            return Err(Error::Invalid("episodes_per_epoch must be >= 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        self.episode.validate()?;
        self.seed
            .ok_or_else(|| Error::Invalid("training requires an explicit seed".into()))
    }
}

/// An encoder together with its optimizer state.
#[derive(Debug, Clone)]
pub struct ProtoModel<F> {
    pub id: String,
    pub encoder: Encoder<F>,
    pub adam: AdamState<F>,
}

impl<F: Real> ProtoModel<F> {
    pub fn new(id: impl Into<String>, encoder: Encoder<F>, lr: f64) -> Result<Self> {
        let adam = AdamState::new(encoder.params(), AdamHyper::with_lr(lr))?;
        Ok(Self {
            id: id.into(),
            encoder,
            adam,
        })
    }

    pub fn from_spec(id: impl Into<String>, spec: &EncoderSpec, lr: f64) -> Result<Self> {
        Self::new(id, init_encoder(spec)?, lr)
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.encoder.params() {
            buf.clear();
            for &v in p.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's episodes; `l_comb` is `ce + l_ca` of those means.
    pub loss: LossBreakdown,
    /// Query accuracy over the epoch's training episodes.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_id: String,
    pub epochs: Vec<EpochRecord>,
    pub wall_time_secs: f64,
    pub param_checksum: String,
}

/// Tape nodes for one episode's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeVars {
    pub support: Var,
    pub query: Var,
    pub prototypes: Var,
    pub probs: Var,
    pub ce: Var,
    pub l_ca: Option<Var>,
    pub loss: Var,
}

/// Support rows are laid out class by class; returns the row groups and the
/// query labels (positions in the episode's class order).
pub fn episode_layout(episode: &Episode) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut groups = Vec::with_capacity(episode.n_way());
    let mut row = 0;
    for s in &episode.support {
        groups.push((row..row + s.len()).collect());
        row += s.len();
    }
    let labels = episode
        .query
        .iter()
        .enumerate()
        .flat_map(|(pos, q)| std::iter::repeat_n(pos, q.len()))
        .collect();
    (groups, labels)
}

fn refs<'a>(index: &'a DatasetIndex, rows: &[Vec<usize>]) -> Vec<SampleRef<'a>> {
    rows.iter().flatten().map(|&i| index.sample(i)).collect()
}

/// Builds the combined loss of one episode on `tape`.
pub fn episode_forward<F: Real>(
    tape: &mut Tape<F>,
    encoder: &Encoder<F>,
    params: &[Var],
    index: &DatasetIndex,
    episode: &Episode,
    margin: f64,
    use_cal: bool,
) -> Result<EpisodeVars> {
    let (groups, labels) = episode_layout(episode);
    let support = encoder.embed_on_tape(tape, params, &refs(index, &episode.support))?;
    let query = encoder.embed_on_tape(tape, params, &refs(index, &episode.query))?;
    let head = head_on_tape(tape, support, &groups, query, &labels)?;
    let (l_ca, loss) = if use_cal {
        let l = cal::cal_on_tape(tape, support, head.prototypes, &groups, margin)?;
        (Some(l), tape.add(head.ce, l)?)
    } else {
        (None, head.ce)
    };
    Ok(EpisodeVars {
        support,
        query,
        prototypes: head.prototypes,
        probs: head.probs,
        ce: head.ce,
        l_ca,
        loss,
    })
}

fn query_hits<F: Real>(tape: &Tape<F>, probs: Var, labels: &[usize]) -> usize {
    let p = tape.value(probs);
    labels
        .iter()
        .enumerate()
        .filter(|(q, &y)| argmax(p.row(*q)) == y)
        .count()
}

/// Trains `model` for `config.epochs` epochs. With zero epochs the model is
/// returned unchanged.
pub fn train_model<F: Real>(
    mut model: ProtoModel<F>,
    index: &DatasetIndex,
    config: &TrainConfig,
) -> Result<(ProtoModel<F>, TrainReport)> {
    let seed = config.validate()?;
    if config.epochs > 0 {
        // fail fast on unusable data
        episode_stream(index, &config.episode, 0, seed)?;
    }
    model.adam.hyper.lr = config.lr;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let (mut ce_sum, mut lca_sum) = (0.0, 0.0);
        let (mut hits, mut seen) = (0usize, 0usize);
        for step in 0..config.episodes_per_epoch {
            let episode = sample_episode(index, &config.episode, &mut rng)?;
            let mut tape = Tape::new();
            let params = model.encoder.register(&mut tape)?;
            let vars = episode_forward(
                &mut tape,
                &model.encoder,
                &params,
                index,
                &episode,
                config.margin,
                config.use_cal,
            )?;
            let loss = tape.value(vars.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, episode: step });
            }
            ce_sum += tape.value(vars.ce).item().to_f64_lossy();
            if let Some(l) = vars.l_ca {
                lca_sum += tape.value(l).item().to_f64_lossy();
            }
            let (_, labels) = episode_layout(&episode);
            hits += query_hits(&tape, vars.probs, &labels);
            seen += labels.len();

            let grads = tape.param_grads(vars.loss)?;
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { epoch, episode: step });
            }
            model.adam.step(model.encoder.params_mut(), &grads)?;
        }
        let n = config.episodes_per_epoch as f64;
        let loss = cal::combined_loss(ce_sum / n, lca_sum / n, config.margin)?;
        let accuracy = hits as f64 / seen as f64;
        log::info!(
            "{} epoch {epoch}: ce {:.4} cal {:.4} acc {:.4}",
            model.id,
            loss.ce,
            loss.l_ca,
            accuracy
        );
        records.push(EpochRecord { epoch, loss, accuracy });
    }

    let report = TrainReport {
        model_id: model.id.clone(),
        epochs: records,
        wall_time_secs: start.elapsed().as_secs_f64(),
        param_checksum: model.checksum(),
    };
    Ok((model, report))
}

/// `mean(max positive distance) / mean(min negative distance)` over every
/// class of every evaluation episode; lower means tighter, better separated
/// clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub mean_max_pos: f64,
    pub mean_min_neg: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub predictions: ModelPredictions,
    pub compactness: Compactness,
}

fn rows_f64<F: Real>(t: &crate::numeric::Tensor<F>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

/// Scores `n_episodes` episodes drawn from `index` with `seed`. Models
/// evaluated with the same index, spec and seed see identical queries.
pub fn evaluate_model<F: Real>(
    model: &ProtoModel<F>,
    index: &DatasetIndex,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<Evaluation> {
    if n_episodes == 0 {
        return Err(Error::NoEpisodes);
    }
    let episodes = episode_stream(index, spec, n_episodes, seed)?;
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    let mut out = Vec::with_capacity(episodes.len());
    let (mut max_pos, mut min_neg, mut n_terms) = (0.0, 0.0, 0usize);

    for episode in &episodes {
        let (groups, labels) = episode_layout(episode);
        let support = model.encoder.embed(&refs(index, &episode.support))?;
        let query = model.encoder.embed(&refs(index, &episode.query))?;
        let group_tensors = groups
            .iter()
            .map(|g| {
                let rows: Vec<Vec<F>> = g.iter().map(|&r| support.row(r).to_vec()).collect();
                crate::numeric::Tensor::from_rows(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = protonet::compute_prototypes(&episode.classes, &group_tensors)?;
        let preds = protonet::classify(&query, &prototypes)?;

        let query_ids: Vec<usize> = episode.query.iter().flatten().copied().collect();
        let mut queries = Vec::with_capacity(preds.len());
        for ((p, &pos), &sample) in preds.iter().zip(&labels).zip(&query_ids) {
            // softmax redone at 64-bit from the distances
            let neg: Vec<f64> = p.distances.iter().map(|d| -d.to_f64_lossy()).collect();
            let probs = crate::numeric::Tensor::new(vec![1, neg.len()], neg)?
                .softmax_rows()?
                .into_data();
            truth.push(episode.classes[pos]);
            predicted.push(episode.classes[argmax(&probs)]);
            queries.push(QueryRecord {
                sample_id: index.records()[sample].id.clone(),
                true_class: episode.classes[pos],
                probs,
            });
        }
        out.push(EpisodePredictions {
            classes: episode.classes.clone(),
            queries,
        });

        let terms = cal::episode_terms(&rows_f64(&support), &groups, &rows_f64(&prototypes.matrix))?;
        for t in terms {
            max_pos += t.max_pos;
            min_neg += t.min_neg;
            n_terms += 1;
        }
    }

    let mean_max_pos = max_pos / n_terms as f64;
    let mean_min_neg = min_neg / n_terms as f64;
    Ok(Evaluation {
        metrics: metrics::evaluate_labels(&truth, &predicted, index.classes())?,
        predictions: ModelPredictions {
            model_id: model.id.clone(),
            classes: index.classes().to_vec(),
            episodes: out,
        },
        compactness: Compactness {
            mean_max_pos,
            mean_min_neg,
            ratio: mean_max_pos / mean_min_neg,
        },
    })
}

/// A model at either precision, as restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(ProtoModel<f32>),
    F64(ProtoModel<f64>),
}

impl AnyModel {
    pub fn from_spec(id: &str, spec: &EncoderSpec, lr: f64, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => AnyModel::F32(ProtoModel::from_spec(id, spec, lr)?),
            Precision::F64 => AnyModel::F64(ProtoModel::from_spec(id, spec, lr)?),
        })
    }

    pub fn id(&self) -> &str {
        match self {
            AnyModel::F32(m) => &m.id,
            AnyModel::F64(m) => &m.id,
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        match self {
            AnyModel::F32(m) => m.encoder.spec(),
            AnyModel::F64(m) => m.encoder.spec(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            AnyModel::F32(m) => m.checksum(),
            AnyModel::F64(m) => m.checksum(),
        }
    }

    pub fn train(self, index: &DatasetIndex, config: &TrainConfig) -> Result<(AnyModel, TrainReport)> {
        Ok(match self {
            AnyModel::F32(m) => {
                let (m, r) = train_model(m, index, config)?;
                (AnyModel::F32(m), r)
            }
            AnyModel::F64(m) => {
                let (m, r) = train_model(m, index, config)?;
                (AnyModel::F64(m), r)
            }
        })
    }

    pub fn evaluate(
        &self,
        index: &DatasetIndex,
        spec: &EpisodeSpec,
        n_episodes: usize,
        seed: u64,
    ) -> Result<Evaluation> {
        match self {
            AnyModel::F32(m) => evaluate_model(m, index, spec, n_episodes, seed),
            AnyModel::F64(m) => evaluate_model(m, index, spec, n_episodes, seed),
        }
    }
}
