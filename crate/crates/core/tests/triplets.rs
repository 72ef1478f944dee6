mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use mots_refine::pipeline::{run_videos, VideoData};
use mots_refine::synth::{generate, Scenario, ScenarioConfig};
use mots_refine::triplets::{
    check_triplet, plan_batches, sample_inter_tracklet, sample_intra_frame, validate_triplets, FrameKeys, LabeledTrack,
    Manifest, Origin, Positive, SampleRef, TripletSample,
};
use mots_refine::{ObservationKey, Settings, Tracklet};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn scene(seed: u64) -> Scenario {
    generate(&ScenarioConfig {
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn frame_keys(s: &Scenario) -> Vec<FrameKeys> {
    s.frames
        .iter()
        .map(|f| FrameKeys {
            video_id: 0,
            frame_id: f.frame_id,
            object_keys: f.detections.iter().map(|d| d.object_key).collect(),
        })
        .collect()
}

fn gt_tracks(s: &Scenario, video_id: u32) -> Vec<LabeledTrack> {
    let mut by_id: BTreeMap<u32, Vec<ObservationKey>> = BTreeMap::new();
    for l in s.gt_labels() {
        by_id.entry(l.identity).or_default().push(l.key());
    }
    by_id
        .into_iter()
        .map(|(identity, observations)| LabeledTrack {
            video_id,
            identity,
            observations,
        })
        .collect()
}

fn tracklets(s: &Scenario) -> Vec<Tracklet> {
    let mut v = VideoData::new(0, vec![s.detections()], s.embeddings());
    v.flows = Box::new(s.flow_map());
    run_videos(vec![v], &Settings::default()).unwrap().remove(0).tracklets
}

#[test]
fn intra_frame_triplets_respect_constraints_and_context() {
    let s = scene(1);
    let frames = frame_keys(&s);
    let gt = gt_tracks(&scene(2), 9);
    let out = sample_intra_frame(&frames, &gt, 1000, 4).unwrap();
    assert_eq!(out.target.len(), 1000);
    assert_eq!(out.train.len(), 1000);
    assert!(validate_triplets(&out.target).is_empty());
    assert!(validate_triplets(&out.train).is_empty());

    let present: HashMap<u32, BTreeSet<u32>> = frames
        .iter()
        .map(|f| (f.frame_id, f.object_keys.iter().copied().collect()))
        .collect();
    for t in &out.target {
        assert!(common::recheck(t).is_empty());
        assert!(present[&t.anchor.frame_id].contains(&t.anchor.object_key));
        assert!(present[&t.negative.frame_id].contains(&t.negative.object_key));
    }
    let identity: HashMap<ObservationKey, u32> = gt
        .iter()
        .flat_map(|t| t.observations.iter().map(move |k| (*k, t.identity)))
        .collect();
    for t in &out.train {
        assert!(common::recheck(t).is_empty());
        let Positive::Sample(p) = t.positive else {
            panic!("augmented train positive")
        };
        assert_eq!(identity[&t.anchor.key()], t.anchor.label.unwrap());
        assert_eq!(identity[&p.key()], t.anchor.label.unwrap());
        assert_eq!(identity[&t.negative.key()], t.negative.label.unwrap());
        assert_ne!(p.key(), t.anchor.key());
    }
}

#[test]
fn inter_tracklet_triplets_respect_constraints_and_context() {
    let ts = tracklets(&scene(3));
    let out = sample_inter_tracklet(&ts, 1000, 5, 1000).unwrap();
    assert_eq!(out.len(), 1000);
    assert!(validate_triplets(&out).is_empty());
    let by_id: HashMap<u32, &Tracklet> = ts.iter().map(|t| (t.tracklet_id, t)).collect();
    for t in &out {
        assert!(common::recheck(t).is_empty());
        let Positive::Sample(p) = t.positive else {
            panic!("augmented inter positive")
        };
        let anchor_t = by_id[&t.anchor.label.unwrap()];
        let negative_t = by_id[&t.negative.label.unwrap()];
        assert_ne!(anchor_t.tracklet_id, negative_t.tracklet_id);
        assert_eq!(anchor_t.observation_at(t.anchor.frame_id), Some(t.anchor.key()));
        assert_eq!(anchor_t.observation_at(p.frame_id), Some(p.key()));
        assert_eq!(negative_t.observation_at(t.negative.frame_id), Some(t.negative.key()));
        assert_eq!(t.anchor.frame_id, t.negative.frame_id);
    }
}

#[test]
fn intra_anchor_frames_are_uniform() {
    let frames = frame_keys(&scene(6));
    let eligible: Vec<u32> = frames
        .iter()
        .filter(|f| f.object_keys.len() >= 2)
        .map(|f| f.frame_id)
        .collect();
    let n = 50 * eligible.len();
    let out = sample_intra_frame(&frames, &[], n, 7).unwrap();
    let mut counts: HashMap<u32, f64> = eligible.iter().map(|&f| (f, 0.0)).collect();
    for t in &out.target {
        *counts.get_mut(&t.anchor.frame_id).expect("eligible frame") += 1.0;
    }
    let expected = n as f64 / eligible.len() as f64;
    let stat: f64 = counts.values().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((eligible.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn batches_mix_pools_one_to_one() {
    let s = scene(8);
    let intra = sample_intra_frame(&frame_keys(&s), &gt_tracks(&scene(9), 1), 300, 10).unwrap();
    let target = &intra.target[..250];
    for reuse in [false, true] {
        for batch_size in [2, 4, 32, 64] {
            let plan = plan_batches(&intra.train, target, batch_size, 11, reuse).unwrap();
            assert!(!plan.batches.is_empty());
            for b in &plan.batches {
                assert_eq!(b.len(), batch_size);
                let train = b.iter().filter(|t| t.origin == Origin::TrainGt).count();
                assert_eq!(train * 2, batch_size);
            }
        }
    }
}

#[test]
fn batch_counts_for_uneven_pools() {
    let intra = sample_intra_frame(&frame_keys(&scene(8)), &gt_tracks(&scene(9), 1), 10, 10).unwrap();
    let (train, target) = (&intra.train[..10], &intra.target[..3]);
    assert_eq!(plan_batches(train, target, 4, 0, false).unwrap().batches.len(), 1);
    assert_eq!(plan_batches(train, target, 4, 0, true).unwrap().batches.len(), 5);
    assert!(plan_batches(train, target, 3, 0, false).is_err());
    assert!(plan_batches(train, &[], 4, 0, false).is_err());
}

#[test]
fn same_seed_manifests_are_byte_identical() {
    let s = scene(12);
    let ts = tracklets(&s);
    let text = |seed| {
        let intra = sample_intra_frame(&frame_keys(&s), &gt_tracks(&scene(13), 1), 200, seed).unwrap();
        let inter = sample_inter_tracklet(&ts, 200, seed, 1000).unwrap();
        let plan = plan_batches(&intra.train, &intra.target, 32, seed, false).unwrap();
        let m = |triplets| Manifest { seed, triplets }.to_text();
        (m(intra.target), m(inter), plan.to_manifest_text(seed))
    };
    assert_eq!(text(3), text(3));
    assert_ne!(text(3).0, text(4).0);
}

fn random_ref(rng: &mut rand_chacha::ChaCha8Rng) -> SampleRef {
    SampleRef {
        frame_id: rng.random_range(0..3),
        object_key: rng.random_range(0..3),
        label: rng.random_bool(0.8).then(|| rng.random_range(0..3)),
    }
}

#[test]
fn validator_agrees_with_independent_recheck_on_fuzzed_manifests() {
    let mut rng = common::rng(16);
    let mut flagged = 0;
    let mut triplets = Vec::new();
    for _ in 0..5000 {
        let origin = [Origin::TrainGt, Origin::TargetIntra, Origin::TargetInter][rng.random_range(0..3)];
        let positive = if rng.random_bool(0.3) {
            Positive::Augment { seed: rng.random() }
        } else {
            Positive::Sample(random_ref(&mut rng))
        };
        let t = TripletSample {
            origin,
            video_id: rng.random_range(0..2),
            anchor: random_ref(&mut rng),
            positive,
            negative: random_ref(&mut rng),
        };
        let got: BTreeSet<_> = check_triplet(&t).into_iter().collect();
        assert_eq!(got, common::recheck(&t), "{t}");
        flagged += usize::from(!got.is_empty());
        triplets.push(t);
    }
    assert!(flagged > 1000 && flagged < 5000, "{flagged}");
    let text = Manifest {
        seed: 1,
        triplets: triplets.clone(),
    }
    .to_text();
    let parsed = Manifest::parse(&text, "fuzz").unwrap();
    assert_eq!(parsed.triplets, triplets);
}

#[test]
fn sampler_failures_are_reported() {
    let lonely = vec![FrameKeys {
        video_id: 0,
        frame_id: 0,
        object_keys: vec![1],
    }];
    assert!(sample_intra_frame(&lonely, &[], 10, 0).is_err());
    let single = vec![Tracklet {
        tracklet_id: 1,
        video_id: 0,
        observations: vec![ObservationKey::new(0, 1), ObservationKey::new(1, 1)],
    }];
    assert!(sample_inter_tracklet(&single, 10, 0, 100).is_err());
    // two co-occurring tracklets of length 1 never yield a positive
    let short = vec![
        Tracklet {
            tracklet_id: 1,
            video_id: 0,
            observations: vec![ObservationKey::new(0, 1)],
        },
        Tracklet {
            tracklet_id: 2,
            video_id: 0,
            observations: vec![ObservationKey::new(0, 2)],
        },
    ];
    let err = sample_inter_tracklet(&short, 10, 0, 50).unwrap_err();
    assert!(err.to_string().contains("50 retries"), "{err}");
}
