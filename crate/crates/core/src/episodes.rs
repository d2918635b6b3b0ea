//! Dataset indexing, stratified splits and the N-way K-shot episode sampler.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample: its id, class index and the slice of the shared payload
/// holding its raw features. `len == 0` means the sample has no raw payload
/// (its features live in a frozen embedding store).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub id: &'a str,
    pub class: usize,
    pub features: &'a [f32],
}

/// Immutable view over labelled samples. Subsets share the payload.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    classes: Vec<String>,
    samples: Vec<SampleRecord>,
    payload: Arc<Vec<f32>>,
    by_class: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(classes: Vec<String>, samples: Vec<SampleRecord>, payload: Arc<Vec<f32>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut by_class = vec![Vec::new(); classes.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.class >= classes.len() {
                return Err(Error::Invalid(format!(
                    "sample `{}` has class {} but only {} classes exist",
                    s.id,
                    s.class,
                    classes.len()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id `{}`", s.id)));
            }
            if s.offset.checked_add(s.len).is_none_or(|end| end > payload.len()) {
                return Err(Error::Invalid(format!(
                    "sample `{}` payload range {}+{} exceeds {} values",
                    s.id,
                    s.offset,
                    s.len,
                    payload.len()
                )));
            }
            by_class[s.class].push(i);
        }
        Ok(Self {
            classes,
            samples,
            payload,
            by_class,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn payload(&self) -> &Arc<Vec<f32>> {
        &self.payload
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// Sample indices belonging to `class`, in index order.
    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn sample(&self, i: usize) -> SampleRef<'_> {
        let s = &self.samples[i];
        SampleRef {
            id: &s.id,
            class: s.class,
            features: &self.payload[s.offset..s.offset + s.len],
        }
    }

    /// A new index holding the listed samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(self.classes.clone(), samples, Arc::clone(&self.payload))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 4,
            k_shot: 10,
            q_query: 15,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_query < 1 {
            return Err(Error::Invalid(format!(
                "episode needs n_way >= 2, k_shot >= 1, q_query >= 1; got {}-way {}-shot {}-query",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.q_query
    }
}

/// One N-way K-shot task. `support[i]` and `query[i]` hold sample indices of
/// class `classes[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn query_len(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    /// Support then query indices, class by class.
    pub fn all_samples(&self) -> Vec<usize> {
        self.support
            .iter()
            .flatten()
            .chain(self.query.iter().flatten())
            .copied()
            .collect()
    }

    /// Checks the episode invariants against `index`.
    pub fn check(&self, index: &DatasetIndex, spec: &EpisodeSpec) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(msg));
        if self.classes.len() != spec.n_way || self.support.len() != spec.n_way || self.query.len() != spec.n_way {
            return fail(format!("expected {} classes", spec.n_way));
        }
        let distinct: HashSet<_> = self.classes.iter().collect();
        if distinct.len() != self.classes.len() {
            return fail("repeated class in episode".into());
        }
        let mut seen = HashSet::new();
        for (pos, &class) in self.classes.iter().enumerate() {
            if self.support[pos].len() != spec.k_shot || self.query[pos].len() != spec.q_query {
                return fail(format!("class {class} has wrong support/query counts"));
            }
            for &s in self.support[pos].iter().chain(&self.query[pos]) {
                if index.records()[s].class != class {
                    return fail(format!("sample {s} is not of class {class}"));
                }
                if !seen.insert(s) {
                    return fail(format!("sample {s} appears twice"));
                }
            }
        }
        Ok(())
    }
}

/// Per-class proportional split into `(train, test)`. Every class keeps at
/// least one sample on each side.
pub fn stratified_split(index: &DatasetIndex, train_fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..index.n_classes() {
        let mut members = index.class_members(class).to_vec();
        let n = members.len();
        if n < 2 {
            return Err(Error::ClassTooSmall {
                class: index.classes()[class].clone(),
                detail: format!("{n} sample(s); at least 2 are needed to populate both splits"),
            });
        }
        members.shuffle(&mut rng);
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((index.subset(&train)?, index.subset(&test)?))
}

/// Draws one episode: classes uniformly without replacement among the
/// classes holding at least `k_shot + q_query` samples, then samples
/// uniformly without replacement inside each chosen class.
pub fn sample_episode<R: Rng + ?Sized>(index: &DatasetIndex, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    let eligible = eligible_classes(index, spec)?;
    let picked = index::sample(rng, eligible.len(), spec.n_way);
    let mut classes = Vec::with_capacity(spec.n_way);
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way);
    for pos in picked.iter() {
        let class = eligible[pos];
        let members = index.class_members(class);
        let chosen = index::sample(rng, members.len(), spec.per_class());
        let chosen: Vec<usize> = chosen.iter().map(|i| members[i]).collect();
        classes.push(class);
        support.push(chosen[..spec.k_shot].to_vec());
        query.push(chosen[spec.k_shot..].to_vec());
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

fn eligible_classes(index: &DatasetIndex, spec: &EpisodeSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let need = spec.per_class();
    let counts = index.class_counts();
    let eligible: Vec<usize> = (0..index.n_classes()).filter(|&c| counts[c] >= need).collect();
    if eligible.len() < spec.n_way {
        let short: Vec<String> = (0..index.n_classes())
            .filter(|&c| counts[c] < need)
            .map(|c| format!("{} has {}", index.classes()[c], counts[c]))
            .collect();
        return Err(Error::InsufficientData(format!(
            "{}-way episodes need {} classes with >= {} samples each, found {} of {} classes eligible{}",
            spec.n_way,
            spec.n_way,
            need,
            eligible.len(),
            index.n_classes(),
            if short.is_empty() {
                String::new()
            } else {
                format!(" (short: {})", short.join(", "))
            }
        )));
    }
    Ok(eligible)
}

/// A replayable sequence of `count` episodes.
pub fn episode_stream(index: &DatasetIndex, spec: &EpisodeSpec, count: usize, seed: u64) -> Result<Vec<Episode>> {
    eligible_classes(index, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_episode(index, spec, &mut rng)).collect()
}
