//! Synthetic long-behavior-sequence data with a planted topic signal.
//!
//! Items are partitioned into topics. Each user draws a few topics and
//! spreads their history over them with Zipf-skewed weights. The click
//! probability of a candidate is `σ(β·(affinity − θ))`, where affinity is
//! the fraction of the user's behaviors in the candidate's topic and `θ`
//! is the population median affinity.
//!
//! Instances are generated lazily: user `u` is a pure function of
//! `(spec, u)`, so a dataset of 50k users with 1k-event histories never
//! has to be held in memory.

use std::borrow::Cow;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_jsonl, BehaviorEvent, Candidate, EventType, InstanceSource, Subset, TrainingInstance};
use crate::error::{Error, Result};
use crate::seed::derive;

const STREAM_USER: u64 = 1;
const STREAM_LABEL: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const BASE_TS: i64 = 1_600_000_000;
const EVENT_TYPE_WEIGHTS: [f64; 4] = [0.6, 0.2, 0.05, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_topics: usize,
    pub items_per_topic: usize,
    pub categories_per_topic: usize,
    pub users: usize,
    pub topics_per_user: usize,
    pub sequence_length: usize,
    pub zipf_exponent: f64,
    /// Probability that the candidate's topic is drawn from the user's own
    /// topics rather than uniformly from all topics.
    pub in_profile_rate: f64,
    /// Signal strength β of the click model.
    pub beta: f64,
    /// Probability of flipping each drawn label.
    pub noise_rate: f64,
    pub user_fields: usize,
    pub context_fields: usize,
    pub user_feature_vocab: u64,
    pub context_feature_vocab: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_topics: 32,
            items_per_topic: 200,
            categories_per_topic: 4,
            users: 1000,
            topics_per_user: 2,
            sequence_length: 1024,
            zipf_exponent: 1.0,
            in_profile_rate: 0.5,
            beta: 8.0,
            noise_rate: 0.0,
            user_fields: 2,
            context_fields: 1,
            user_feature_vocab: 100,
            context_feature_vocab: 24,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("synthetic spec: {m}")));
        if self.num_topics < 2 {
            return fail("num_topics must be at least 2");
        }
        if self.items_per_topic == 0 {
            return fail("items_per_topic must be positive");
        }
        if self.categories_per_topic == 0 {
            return fail("categories_per_topic must be positive");
        }
        if self.topics_per_user == 0 || self.topics_per_user > self.num_topics {
            return fail("topics_per_user must be in 1..=num_topics");
        }
        if self.sequence_length < self.topics_per_user {
            return fail("sequence_length must be at least topics_per_user");
        }
        for (name, p) in [("in_profile_rate", self.in_profile_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !self.beta.is_finite() || !self.zipf_exponent.is_finite() {
            return fail("beta and zipf_exponent must be finite");
        }
        if self.user_feature_vocab == 0 || self.context_feature_vocab == 0 {
            return fail("feature vocabularies must be positive");
        }
        Ok(())
    }

    pub fn num_items(&self) -> u64 {
        (self.num_topics * self.items_per_topic) as u64
    }

    pub fn num_categories(&self) -> u64 {
        (self.num_topics * self.categories_per_topic) as u64
    }

    /// Topic of a generated item id.
    pub fn topic_of(&self, item_id: u64) -> usize {
        ((item_id - 1) / self.items_per_topic as u64) as usize
    }

    fn item(&self, topic: usize, j: usize) -> (u64, u64) {
        let item = 1 + (topic * self.items_per_topic + j) as u64;
        let cat = 1 + (topic * self.categories_per_topic + j % self.categories_per_topic) as u64;
        (item, cat)
    }
}

struct DrawnUser {
    behaviors: Vec<BehaviorEvent>,
    candidate: Candidate,
    user_feats: Vec<u64>,
    context_feats: Vec<u64>,
    affinity: f64,
}

/// Lazily materialized synthetic dataset, one instance per user.
pub struct SyntheticDataset {
    spec: SyntheticSpec,
    topic_weights: WeightedIndex<f64>,
    type_weights: WeightedIndex<f64>,
    threshold: f64,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let weights: Vec<f64> = (0..spec.topics_per_user)
            .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
            .collect();
        let mut ds = Self {
            topic_weights: WeightedIndex::new(&weights).expect("positive weights"),
            type_weights: WeightedIndex::new(EVENT_TYPE_WEIGHTS).expect("positive weights"),
            threshold: 0.0,
            spec,
        };
        let mut affinities: Vec<f64> = (0..ds.spec.users).map(|u| ds.draw_user(u).affinity).collect();
        ds.threshold = median(&mut affinities);
        Ok(ds)
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Population median affinity θ.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn draw_user(&self, u: usize) -> DrawnUser {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, STREAM_USER, u as u64));
        let topics: Vec<usize> = index::sample(&mut rng, spec.num_topics, spec.topics_per_user).into_vec();
        let mut ts = BASE_TS + rng.random_range(0..86_400);
        let mut counts = vec![0usize; spec.num_topics];
        let behaviors = (0..spec.sequence_length)
            .map(|_| {
                let topic = topics[self.topic_weights.sample(&mut rng)];
                counts[topic] += 1;
                let (item_id, category_id) = spec.item(topic, rng.random_range(0..spec.items_per_topic));
                ts += rng.random_range(1..=3600);
                BehaviorEvent {
                    item_id,
                    category_id,
                    event_type: EventType::ALL[self.type_weights.sample(&mut rng)],
                    ts,
                }
            })
            .collect();
        let cand_topic = if rng.random_bool(spec.in_profile_rate) {
            topics[rng.random_range(0..topics.len())]
        } else {
            rng.random_range(0..spec.num_topics)
        };
        let (item_id, category_id) = spec.item(cand_topic, rng.random_range(0..spec.items_per_topic));
        let user_feats = (0..spec.user_fields)
            .map(|_| 1 + rng.random_range(0..spec.user_feature_vocab))
            .collect();
        let context_feats = (0..spec.context_fields)
            .map(|_| 1 + rng.random_range(0..spec.context_feature_vocab))
            .collect();
        DrawnUser {
            behaviors,
            candidate: Candidate { item_id, category_id },
            user_feats,
            context_feats,
            affinity: counts[cand_topic] as f64 / spec.sequence_length as f64,
        }
    }

    /// Click probability `σ(β·(affinity − θ))` for a given affinity.
    pub fn click_probability(&self, affinity: f64) -> f64 {
        1.0 / (1.0 + (-self.spec.beta * (affinity - self.threshold)).exp())
    }

    /// Affinity of user `u` to their candidate.
    pub fn affinity(&self, u: usize) -> f64 {
        self.draw_user(u).affinity
    }

    /// Deterministic 80/10/10-style split over user indices.
    pub fn split(&self, split: &SplitSpec) -> Splits {
        split.apply(self.spec.users, derive(self.spec.seed, STREAM_SPLIT, 0))
    }

    /// Writes the three splits as JSONL files.
    pub fn write_splits(&self, split: &SplitSpec, train: &Path, valid: &Path, test: &Path) -> Result<()> {
        let splits = self.split(split);
        for (path, idx) in [(train, &splits.train), (valid, &splits.valid), (test, &splits.test)] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let file = BufWriter::new(File::create(path)?);
            write_jsonl(&Subset::new(self, idx), file)?;
        }
        Ok(())
    }
}

impl InstanceSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.spec.users
    }

    fn instance(&self, u: usize) -> Cow<'_, TrainingInstance> {
        let drawn = self.draw_user(u);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.spec.seed, STREAM_LABEL, u as u64));
        let mut label = rng.random_bool(self.click_probability(drawn.affinity));
        if rng.random_bool(self.spec.noise_rate) {
            label = !label;
        }
        Cow::Owned(TrainingInstance {
            user_id: u as u64 + 1,
            behaviors: drawn.behaviors,
            candidate: drawn.candidate,
            user_feats: drawn.user_feats,
            context_feats: drawn.context_feats,
            label: label as u8,
        })
    }
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Train and validation fractions; the test split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Seeded permutation of `0..n` cut into contiguous train/valid/test runs.
    pub fn apply(&self, n: usize, seed: u64) -> Splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = index::sample(&mut rng, n, n).into_vec();
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_valid = (((n as f64) * self.valid).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        Splits {
            train: perm[..n_train].to_vec(),
            valid: perm[n_train..n_train + n_valid].to_vec(),
            test: perm[n_train + n_valid..].to_vec(),
        }
    }
}
