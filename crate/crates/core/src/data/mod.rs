//! Labeled impressions, JSONL ingestion and the synthetic generator.

mod jsonl;
mod synthetic;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use jsonl::{load_jsonl, parse_line, write_jsonl, JsonlLoad, JsonlStream};
pub use synthetic::{SplitSpec, Splits, SyntheticDataset, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventType {
    View,
    Click,
    AddToCart,
    Browse,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::View,
        EventType::Click,
        EventType::AddToCart,
        EventType::Browse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::View => "view",
            EventType::Click => "click",
            EventType::AddToCart => "add_to_cart",
            EventType::Browse => "browse",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let allowed: Vec<_> = EventType::ALL.iter().map(|t| t.as_str()).collect();
                format!("unknown event type `{s}` (allowed: {})", allowed.join(", "))
            })
    }
}

impl Serialize for EventType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EventType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    #[serde(rename = "item")]
    pub item_id: u64,
    #[serde(rename = "cat")]
    pub category_id: u64,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "item")]
    pub item_id: u64,
    #[serde(rename = "cat")]
    pub category_id: u64,
}

/// One impression: user features, behavior history, candidate, context and
/// click label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user_id: u64,
    pub behaviors: Vec<BehaviorEvent>,
    pub candidate: Candidate,
    #[serde(default)]
    pub user_feats: Vec<u64>,
    #[serde(default)]
    pub context_feats: Vec<u64>,
    pub label: u8,
}

impl TrainingInstance {
    /// Checks label range and chronological order of behaviors.
    pub fn validate(&self) -> Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if let Some(w) = self.behaviors.windows(2).position(|w| w[1].ts < w[0].ts) {
            return Err(format!("behaviors not sorted by ts at index {}", w + 1));
        }
        Ok(())
    }
}

/// Random access to a collection of instances.
pub trait InstanceSource: Sync {
    fn len(&self) -> usize;

    fn instance(&self, i: usize) -> Cow<'_, TrainingInstance>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InstanceSource for [TrainingInstance] {
    fn len(&self) -> usize {
        <[TrainingInstance]>::len(self)
    }

    fn instance(&self, i: usize) -> Cow<'_, TrainingInstance> {
        Cow::Borrowed(&self[i])
    }
}

impl InstanceSource for Vec<TrainingInstance> {
    fn len(&self) -> usize {
        <[TrainingInstance]>::len(self)
    }

    fn instance(&self, i: usize) -> Cow<'_, TrainingInstance> {
        Cow::Borrowed(&self[i])
    }
}

/// The instances of `source` at `indices`, in that order.
pub struct Subset<'a, S: ?Sized> {
    source: &'a S,
    indices: &'a [usize],
}

impl<'a, S: InstanceSource + ?Sized> Subset<'a, S> {
    pub fn new(source: &'a S, indices: &'a [usize]) -> Self {
        Self { source, indices }
    }
}

impl<S: InstanceSource + ?Sized> InstanceSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn instance(&self, i: usize) -> Cow<'_, TrainingInstance> {
        self.source.instance(self.indices[i])
    }
}

/// Fraction of positive labels, 0 for an empty source.
pub fn positive_rate<S: InstanceSource + ?Sized>(source: &S) -> f64 {
    if source.is_empty() {
        return 0.0;
    }
    let pos = (0..source.len())
        .filter(|&i| source.instance(i).label == 1)
        .count();
    pos as f64 / source.len() as f64
}
