//! Candidate scoring against the interest cache with an online fallback.

use serde::{Deserialize, Serialize};

use crate::cache::InterestCache;
use crate::data::{BehaviorEvent, Candidate, TrainingInstance};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;

/// A scoring request: the dataset schema without the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub user_id: u64,
    #[serde(default)]
    pub behaviors: Vec<BehaviorEvent>,
    pub candidate: Candidate,
    #[serde(default)]
    pub user_feats: Vec<u64>,
    #[serde(default)]
    pub context_feats: Vec<u64>,
}

impl ScoreRequest {
    pub fn to_instance(&self) -> Result<TrainingInstance> {
        let inst = TrainingInstance {
            user_id: self.user_id,
            behaviors: self.behaviors.clone(),
            candidate: self.candidate,
            user_feats: self.user_feats.clone(),
            context_feats: self.context_feats.clone(),
            label: 0,
        };
        inst.validate().map_err(Error::contract)?;
        Ok(inst)
    }
}

impl From<&TrainingInstance> for ScoreRequest {
    fn from(inst: &TrainingInstance) -> Self {
        Self {
            user_id: inst.user_id,
            behaviors: inst.behaviors.clone(),
            candidate: inst.candidate,
            user_feats: inst.user_feats.clone(),
            context_feats: inst.context_feats.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub p: f32,
    pub cached: bool,
}

/// Model plus optional cache, shared read-only between requests.
pub struct Scorer {
    pub model: Model,
    pub cache: Option<InterestCache>,
}

impl Scorer {
    pub fn new(model: Model, cache: Option<InterestCache>) -> Result<Self> {
        if let Some(c) = &cache {
            let dims = crate::cache::CacheDims::of(&model);
            if model.dmqn.is_none() || c.dims() != dims {
                return Err(Error::config(format!(
                    "cache dims {:?} do not fit the model ({dims:?})",
                    c.dims()
                )));
            }
        }
        Ok(Self { model, cache })
    }

    /// Cached head path on a hit, full computation otherwise.
    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let inst = req.to_instance()?;
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lookup(req.user_id)? {
                let clusters = hit.to_clusters(cache.dims())?;
                return Ok(ScoreResponse {
                    p: self.model.predict_cached(&inst, &clusters)?,
                    cached: true,
                });
            }
        }
        self.score_online(req)
    }

    pub fn score_online(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        Ok(ScoreResponse {
            p: self.model.predict(&req.to_instance()?)?,
            cached: false,
        })
    }

    /// Scores every request, keeping request order; each entry succeeds or
    /// fails independently.
    pub fn score_batch(&self, reqs: &[ScoreRequest], exec: Exec) -> Vec<Result<ScoreResponse>> {
        exec.map(reqs.len(), |i| self.score(&reqs[i]))
    }
}
