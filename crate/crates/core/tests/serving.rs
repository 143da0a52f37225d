use dmqn::cache::{precompute, InterestCache};
use dmqn::data::{InstanceSource, SyntheticDataset, SyntheticSpec, TrainingInstance};
use dmqn::serving::{ScoreRequest, Scorer};
use dmqn::{Exec, Model, ModelConfig};

fn users(n: usize) -> Vec<TrainingInstance> {
    let ds = SyntheticDataset::new(SyntheticSpec {
        users: n,
        sequence_length: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    (0..n).map(|u| ds.instance(u).into_owned()).collect()
}

fn scorer(data: &[TrainingInstance], dir: &tempfile::TempDir) -> Scorer {
    let model = Model::new(ModelConfig::tiny(), 8).unwrap();
    let path = dir.path().join("c.bin");
    precompute(&model, data, &path, Exec::Parallel).unwrap();
    Scorer::new(model, Some(InterestCache::open(&path).unwrap())).unwrap()
}

#[test]
fn absent_user_without_behaviors_uses_side_features_only() {
    let data = users(20);
    let dir = tempfile::tempdir().unwrap();
    let s = scorer(&data, &dir);
    let mut req = ScoreRequest::from(&data[0]);
    req.user_id = 10_000;
    req.behaviors.clear();
    let a = s.score(&req).unwrap();
    assert!(!a.cached && a.p > 0.0 && a.p < 1.0);
    req.user_id = 10_001;
    assert_eq!(s.score(&req).unwrap().p.to_bits(), a.p.to_bits());
    req.user_feats = vec![7, 7];
    assert_ne!(s.score(&req).unwrap().p.to_bits(), a.p.to_bits());
}

#[test]
fn batch_responses_keep_request_order() {
    let data = users(20);
    let dir = tempfile::tempdir().unwrap();
    let s = scorer(&data, &dir);
    let reqs = [ScoreRequest::from(&data[5]), ScoreRequest::from(&data[2])];
    let out = s.score_batch(&reqs, Exec::Parallel);
    assert_eq!(out.len(), 2);
    for (req, got) in reqs.iter().zip(&out) {
        assert_eq!(got.as_ref().unwrap().p, s.score(req).unwrap().p);
    }
}

#[test]
fn concurrent_lookups_match_serial_lookups() {
    let data = users(200);
    let dir = tempfile::tempdir().unwrap();
    let s = scorer(&data, &dir);
    let cache = s.cache.as_ref().unwrap();
    let ids: Vec<u64> = (0..260).collect();
    let serial: Vec<_> = ids.iter().map(|&u| cache.lookup(u).unwrap()).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..4)
            .map(|_| scope.spawn(|| ids.iter().map(|&u| cache.lookup(u).unwrap()).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), serial);
        }
    });
    assert_eq!(serial.iter().filter(|r| r.is_some()).count(), 200);
}

#[test]
fn cache_with_wrong_dimensions_is_refused() {
    let data = users(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    precompute(&Model::new(ModelConfig::tiny(), 1).unwrap(), &data, &path, Exec::Sequential).unwrap();
    let other = Model::new(ModelConfig { codebook_size: 6, ..ModelConfig::tiny() }, 1).unwrap();
    assert!(Scorer::new(other, Some(InterestCache::open(&path).unwrap())).is_err());
}
