//! Embedding networks.
//!
//! Three kinds are provided:
//!
//! - `mlp`: fully trainable dense network with relu hidden layers.
//! - `conv-toy`: blocks of `[conv 3x3, relu, 2x2 max-pool]` followed by a
//!   linear map to the embedding size.
//! - `frozen-projection`: looks samples up by id in a precomputed
//!   [`FrozenEmbeddingStore`] and applies a trainable linear head. Only the
//!   head receives gradients; the store is never modified.
//!
//! Weights use uniform He initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
//! drawn from a ChaCha8 stream seeded by the spec. Biases start at zero.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::SampleRef;
use crate::error::{shape_err, Error, FormatError, Result};
use crate::numeric::{Real, Tape, Tensor, Var};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp {
        hidden: Vec<usize>,
    },
    /// `input_shape` is `[height, width, channels]`; one block per entry.
    ConvToy {
        channels: Vec<usize>,
    },
    FrozenProjection {
        store: PathBuf,
        /// Start from the identity map (requires source dim == embedding dim).
        #[serde(default)]
        identity_init: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(flatten)]
    pub kind: EncoderKind,
    pub input_shape: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, embedding_dim: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Mlp { hidden },
            input_shape: vec![input_dim],
            embedding_dim,
            seed,
        }
    }

    /// The 4-block, 64-channel reference backbone.
    pub fn conv_reference(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::ConvToy { channels: vec![64; 4] },
            input_shape: vec![height, width, channels],
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            seed,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            EncoderKind::Mlp { .. } => "mlp",
            EncoderKind::ConvToy { .. } => "conv-toy",
            EncoderKind::FrozenProjection { .. } => "frozen-projection",
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shapes of every parameter tensor, in registration order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.embedding_dim < 2 {
            return Err(Error::Invalid(format!(
                "embedding dim must be >= 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Invalid(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = Vec::new();
        match &self.kind {
            EncoderKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Invalid("hidden layer of width 0".into()));
                }
                let mut fan_in = self.input_len();
                for &h in hidden.iter().chain(std::iter::once(&self.embedding_dim)) {
                    shapes.push(vec![fan_in, h]);
                    shapes.push(vec![h]);
                    fan_in = h;
                }
            }
            EncoderKind::ConvToy { channels } => {
                let [mut h, mut w, mut c] = <[usize; 3]>::try_from(self.input_shape.as_slice()).map_err(|_| {
                    Error::Invalid(format!(
                        "conv-toy input shape must be [height, width, channels], got {:?}",
                        self.input_shape
                    ))
                })?;
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Invalid(
                        "conv-toy needs at least one block with channels > 0".into(),
                    ));
                }
                for (b, &out) in channels.iter().enumerate() {
                    if h < 2 || w < 2 {
                        return Err(Error::Invalid(format!(
                            "input {:?} too small for {} pooling blocks (block {b} sees {h}x{w})",
                            self.input_shape,
                            channels.len()
                        )));
                    }
                    shapes.push(vec![3, 3, c, out]);
                    shapes.push(vec![out]);
                    (h, w, c) = (h / 2, w / 2, out);
                }
                shapes.push(vec![h * w * c, self.embedding_dim]);
                shapes.push(vec![self.embedding_dim]);
            }
            EncoderKind::FrozenProjection { identity_init, .. } => {
                let [src] = <[usize; 1]>::try_from(self.input_shape.as_slice())
                    .map_err(|_| Error::Invalid("frozen-projection input shape must be [source_dim]".into()))?;
                if *identity_init && src != self.embedding_dim {
                    return Err(Error::Invalid(format!(
                        "identity init needs source dim {src} == embedding dim {}",
                        self.embedding_dim
                    )));
                }
                shapes.push(vec![src, self.embedding_dim]);
                shapes.push(vec![self.embedding_dim]);
            }
        }
        Ok(shapes)
    }
}

/// Precomputed embeddings keyed by sample id, kept in insertion order.
#[derive(Debug, Clone)]
pub struct FrozenEmbeddingStore {
    provenance: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    lookup: HashMap<String, usize>,
}

impl PartialEq for FrozenEmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.provenance == other.provenance
            && self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FrozenEmbeddingStore {
    pub fn from_parts(
        provenance: String,
        dim: usize,
        ids: Vec<String>,
        data: Vec<f32>,
    ) -> std::result::Result<Self, FormatError> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(FormatError::DimensionMismatch(format!(
                "{} values for {} vectors of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(FormatError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            provenance,
            dim,
            ids,
            data,
            lookup,
        })
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.lookup
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }
}

pub fn load_frozen(path: impl AsRef<Path>) -> Result<FrozenEmbeddingStore> {
    crate::io::fseb::read(path)
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    spec: EncoderSpec,
    params: Vec<Tensor<F>>,
    store: Option<Arc<FrozenEmbeddingStore>>,
}

/// Builds an encoder with freshly initialized parameters. Frozen-projection
/// specs load their store from the path in the spec.
pub fn init_encoder<F: Real>(spec: &EncoderSpec) -> Result<Encoder<F>> {
    let store = match &spec.kind {
        EncoderKind::FrozenProjection { store, .. } => Some(Arc::new(load_frozen(store)?)),
        _ => None,
    };
    Encoder::with_store(spec, store)
}

impl<F: Real> Encoder<F> {
    pub fn with_store(spec: &EncoderSpec, store: Option<Arc<FrozenEmbeddingStore>>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let identity = matches!(
            spec.kind,
            EncoderKind::FrozenProjection {
                identity_init: true,
                ..
            }
        );
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if identity {
                let n = shape[0];
                let mut t = Tensor::zeros(&shape);
                for i in 0..n {
                    t.data_mut()[i * n + i] = F::one();
                }
                t
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.push(t);
        }
        let encoder = Self {
            spec: spec.clone(),
            params,
            store,
        };
        encoder.check_store()?;
        Ok(encoder)
    }

    fn check_store(&self) -> Result<()> {
        match (&self.spec.kind, &self.store) {
            (EncoderKind::FrozenProjection { .. }, None) => Err(Error::Invalid(
                "frozen-projection encoder needs an embedding store".into(),
            )),
            (EncoderKind::FrozenProjection { .. }, Some(s)) if s.dim() != self.spec.input_shape[0] => Err(shape_err(
                "frozen-projection",
                format!("store dim {} vs input shape {:?}", s.dim(), self.spec.input_shape),
            )),
            _ => Ok(()),
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn store(&self) -> Option<&Arc<FrozenEmbeddingStore>> {
        self.store.as_ref()
    }

    /// Replaces every parameter tensor; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(shape_err("set_params", "parameter shapes differ from the spec"));
        }
        self.params = params;
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    /// Pushes the parameters onto `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape<F>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Stacks the raw inputs of `samples` into one batch tensor.
    fn batch_input(&self, samples: &[SampleRef<'_>]) -> Result<Tensor<F>> {
        if samples.is_empty() {
            return Err(Error::NoSamples);
        }
        let len = self.spec.input_len();
        let mut data = Vec::with_capacity(samples.len() * len);
        for s in samples {
            let features = match &self.store {
                Some(store) => store.get(s.id).ok_or_else(|| Error::UnknownSample(s.id.to_string()))?,
                None => s.features,
            };
            if features.len() != len {
                return Err(shape_err(
                    "embed",
                    format!(
                        "sample `{}` has {} values, encoder expects {:?}",
                        s.id,
                        features.len(),
                        self.spec.input_shape
                    ),
                ));
            }
            data.extend(features.iter().map(|&v| F::from_f64_lossy(v as f64)));
        }
        let mut shape = vec![samples.len()];
        if matches!(self.spec.kind, EncoderKind::ConvToy { .. }) {
            shape.extend_from_slice(&self.spec.input_shape);
        } else {
            shape.push(len);
        }
        Tensor::new(shape, data)
    }

    /// Embeds `samples` on `tape`, giving a `[batch, embedding_dim]` node.
    pub fn embed_on_tape(&self, tape: &mut Tape<F>, params: &[Var], samples: &[SampleRef<'_>]) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(shape_err("embed", "parameter handles do not match the encoder"));
        }
        let input = tape.input(self.batch_input(samples)?)?;
        match &self.spec.kind {
            EncoderKind::Mlp { .. } => {
                let layers = params.len() / 2;
                let mut h = input;
                for (l, pair) in params.chunks(2).enumerate() {
                    h = tape.matmul(h, pair[0])?;
                    h = tape.add_row_bias(h, pair[1])?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            EncoderKind::ConvToy { channels } => {
                let mut h = input;
                for b in 0..channels.len() {
                    h = tape.conv3x3(h, params[2 * b], params[2 * b + 1])?;
                    h = tape.relu(h)?;
                    h = tape.max_pool2(h)?;
                }
                let flat = tape.value(h).cols();
                h = tape.reshape(h, vec![samples.len(), flat])?;
                let n = params.len();
                h = tape.matmul(h, params[n - 2])?;
                tape.add_row_bias(h, params[n - 1])
            }
            EncoderKind::FrozenProjection { .. } => {
                let h = tape.matmul(input, params[0])?;
                tape.add_row_bias(h, params[1])
            }
        }
    }

    /// Forward pass only.
    pub fn embed(&self, samples: &[SampleRef<'_>]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape)?;
        let out = self.embed_on_tape(&mut tape, &params, samples)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(features: &[Vec<f32>]) -> Vec<SampleRef<'_>> {
        features
            .iter()
            .map(|f| SampleRef {
                id: "x",
                class: 0,
                features: f,
            })
            .collect()
    }

    #[test]
    fn mlp_batch_of_three_gives_128_wide_rows() {
        let enc = init_encoder::<f32>(&EncoderSpec::mlp(16, vec![64], 128, 1)).unwrap();
        let data = vec![vec![0.5f32; 16]; 3];
        let out = enc.embed(&refs(&data)).unwrap();
        assert_eq!(out.shape(), &[3, 128]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_encoder::<f64>(&EncoderSpec::mlp(4, vec![8], 4, 7)).unwrap();
        let b = init_encoder::<f64>(&EncoderSpec::mlp(4, vec![8], 4, 7)).unwrap();
        let c = init_encoder::<f64>(&EncoderSpec::mlp(4, vec![8], 4, 8)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn embedding_is_bitwise_repeatable() {
        let enc = init_encoder::<f32>(&EncoderSpec::mlp(5, vec![7], 3, 2)).unwrap();
        let data: Vec<Vec<f32>> = (0..4).map(|i| (0..5).map(|j| (i * j) as f32 * 0.1).collect()).collect();
        let a = enc.embed(&refs(&data)).unwrap();
        let b = enc.embed(&refs(&data)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn reference_conv_backbone_shapes() {
        // 28 -> 14 -> 7 -> 3 -> 1 spatial, 64 channels flattened, then 128
        let spec = EncoderSpec::conv_reference(28, 28, 1, 0);
        let shapes = spec.param_shapes().unwrap();
        assert_eq!(shapes.len(), 10);
        assert_eq!(shapes[0], vec![3, 3, 1, 64]);
        assert_eq!(shapes[6], vec![3, 3, 64, 64]);
        assert_eq!(shapes[8], vec![64, 128]);
        let enc = init_encoder::<f32>(&spec).unwrap();
        let img = vec![vec![0.1f32; 28 * 28]; 2];
        assert_eq!(enc.embed(&refs(&img)).unwrap().shape(), &[2, 128]);
    }

    #[test]
    fn embedding_dim_below_two_rejected() {
        assert!(init_encoder::<f32>(&EncoderSpec::mlp(4, vec![], 1, 0)).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let enc = init_encoder::<f32>(&EncoderSpec::mlp(4, vec![], 2, 0)).unwrap();
        let data = vec![vec![0.0f32; 3]];
        assert!(matches!(enc.embed(&refs(&data)), Err(Error::Shape { .. })));
    }

    fn store() -> Arc<FrozenEmbeddingStore> {
        Arc::new(
            FrozenEmbeddingStore::from_parts(
                "test".into(),
                3,
                vec!["a".into(), "b".into()],
                vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25],
            )
            .unwrap(),
        )
    }

    fn frozen_spec(identity: bool) -> EncoderSpec {
        EncoderSpec {
            kind: EncoderKind::FrozenProjection {
                store: "unused.fseb".into(),
                identity_init: identity,
            },
            input_shape: vec![3],
            embedding_dim: 3,
            seed: 0,
        }
    }

    #[test]
    fn identity_projection_returns_stored_vectors() {
        let enc = Encoder::<f64>::with_store(&frozen_spec(true), Some(store())).unwrap();
        let samples = [
            SampleRef {
                id: "b",
                class: 0,
                features: &[],
            },
            SampleRef {
                id: "a",
                class: 0,
                features: &[],
            },
        ];
        let out = enc.embed(&samples).unwrap();
        assert_eq!(out.data(), &[-1.0, 0.5, 0.25, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unknown_sample_id_rejected() {
        let enc = Encoder::<f64>::with_store(&frozen_spec(false), Some(store())).unwrap();
        let samples = [SampleRef {
            id: "zzz",
            class: 0,
            features: &[],
        }];
        assert!(matches!(enc.embed(&samples), Err(Error::UnknownSample(id)) if id == "zzz"));
    }

    #[test]
    fn spec_json_shape() {
        let spec = EncoderSpec::mlp(16, vec![64], 128, 3);
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["kind"], "mlp");
        let back: EncoderSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }
}
