//! Triplet manifests for retraining an external appearance encoder.
//!
//! Two target-video samplers are provided. Intra-frame sampling relies on
//! fused masks being exclusive within a frame: two observations of one
//! frame are always different objects, and the positive is an augmented
//! copy of the anchor. Inter-tracklet sampling treats short-term tracklets
//! as pseudo identities but only contrasts tracklets that are visible in
//! the same frame, since tracklets apart in time may still be one identity.
//! Ground-truth triplets from a labelled training set are mixed 1:1 with
//! target triplets in every batch.
//!
//! Manifest lines look like
//!
//! ```text
//! target_intra 0 12:3 AUG:8812736 12:5
//! target_inter 0 40:2@7 52:2@7 40:9@11
//! train_gt 1 5:1@3 9:4@3 5:2@8
//! ```
//!
//! with `frame:key` references and an optional `@label` holding the
//! tracklet id (inter) or ground-truth identity (train).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{ObservationKey, Tracklet};

pub const MANIFEST_MAGIC: &str = "# triplet-manifest v1";
pub const DEFAULT_RETRY_BUDGET: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    TrainGt,
    TargetIntra,
    TargetInter,
}

impl Origin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::TrainGt => "train_gt",
            Origin::TargetIntra => "target_intra",
            Origin::TargetInter => "target_inter",
        }
    }

    pub fn is_target(&self) -> bool {
        !matches!(self, Origin::TrainGt)
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train_gt" => Ok(Origin::TrainGt),
            "target_intra" => Ok(Origin::TargetIntra),
            "target_inter" => Ok(Origin::TargetInter),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub frame_id: u32,
    pub object_key: u32,
    /// Tracklet id or ground-truth identity, depending on the origin.
    pub label: Option<u32>,
}

impl SampleRef {
    pub fn new(key: ObservationKey, label: Option<u32>) -> Self {
        Self {
            frame_id: key.frame_id,
            object_key: key.object_key,
            label,
        }
    }

    pub fn key(&self) -> ObservationKey {
        ObservationKey::new(self.frame_id, self.object_key)
    }
}

impl fmt::Display for SampleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.frame_id, self.object_key)?;
        if let Some(l) = self.label {
            write!(f, "@{l}")?;
        }
        Ok(())
    }
}

impl FromStr for SampleRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (body, label) = match s.split_once('@') {
            Some((b, l)) => (
                b,
                Some(l.parse::<u32>().map_err(|e| format!("bad label in {s:?}: {e}"))?),
            ),
            None => (s, None),
        };
        let (f, k) = body
            .split_once(':')
            .ok_or_else(|| format!("expected frame:key, got {s:?}"))?;
        Ok(Self {
            frame_id: f.parse().map_err(|e| format!("bad frame in {s:?}: {e}"))?,
            object_key: k.parse().map_err(|e| format!("bad key in {s:?}: {e}"))?,
            label,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Positive {
    Sample(SampleRef),
    /// Augmented copy of the anchor, reproducible from `seed`.
    Augment {
        seed: u64,
    },
}

impl fmt::Display for Positive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Positive::Sample(r) => r.fmt(f),
            Positive::Augment { seed } => write!(f, "AUG:{seed}"),
        }
    }
}

impl FromStr for Positive {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.strip_prefix("AUG:") {
            Some(seed) => Ok(Positive::Augment {
                seed: seed.parse().map_err(|e| format!("bad augmentation seed {s:?}: {e}"))?,
            }),
            None => s.parse().map(Positive::Sample),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletSample {
    pub origin: Origin,
    pub video_id: u32,
    pub anchor: SampleRef,
    pub positive: Positive,
    pub negative: SampleRef,
}

impl fmt::Display for TripletSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.origin.as_str(),
            self.video_id,
            self.anchor,
            self.positive,
            self.negative
        )
    }
}

impl FromStr for TripletSample {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        }
        Ok(Self {
            origin: fields[0].parse()?,
            video_id: fields[1].parse().map_err(|e| format!("bad video id: {e}"))?,
            anchor: fields[2].parse()?,
            positive: fields[3].parse()?,
            negative: fields[4].parse()?,
        })
    }
}

/// Object keys present in one frame of a target video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameKeys {
    pub video_id: u32,
    pub frame_id: u32,
    pub object_keys: Vec<u32>,
}

/// Ground-truth labelled track from a training video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledTrack {
    pub video_id: u32,
    pub identity: u32,
    pub observations: Vec<ObservationKey>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntraFrameTriplets {
    pub target: Vec<TripletSample>,
    pub train: Vec<TripletSample>,
}

/// Samples `count` target triplets (anchor, augmented anchor, same-frame
/// negative) and, when `gt_tracks` is non-empty, `count` ground-truth
/// triplets.
pub fn sample_intra_frame(
    target_frames: &[FrameKeys],
    gt_tracks: &[LabeledTrack],
    count: usize,
    seed: u64,
) -> Result<IntraFrameTriplets> {
    if count == 0 {
        return Err(Error::Sampling("triplet count must be at least 1".into()));
    }
    let eligible: Vec<&FrameKeys> = target_frames.iter().filter(|f| f.object_keys.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(
            "no frame has two or more observations, so no intra-frame negatives exist".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = Vec::with_capacity(count);
    for _ in 0..count {
        let frame = eligible[rng.random_range(0..eligible.len())];
        let n = frame.object_keys.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let aug_seed: u64 = rng.random();
        target.push(TripletSample {
            origin: Origin::TargetIntra,
            video_id: frame.video_id,
            anchor: SampleRef::new(ObservationKey::new(frame.frame_id, frame.object_keys[a]), None),
            positive: Positive::Augment { seed: aug_seed },
            negative: SampleRef::new(ObservationKey::new(frame.frame_id, frame.object_keys[b]), None),
        });
    }
    let train = if gt_tracks.is_empty() {
        Vec::new()
    } else {
        sample_ground_truth(gt_tracks, count, &mut rng)?
    };
    Ok(IntraFrameTriplets { target, train })
}

fn sample_ground_truth(tracks: &[LabeledTrack], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TripletSample>> {
    let anchors: Vec<&LabeledTrack> = tracks.iter().filter(|t| t.observations.len() >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::Sampling("no ground-truth track has two observations".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = anchors[rng.random_range(0..anchors.len())];
        let negatives: Vec<&LabeledTrack> = tracks
            .iter()
            .filter(|t| t.video_id == a.video_id && t.identity != a.identity && !t.observations.is_empty())
            .collect();
        if negatives.is_empty() {
            return Err(Error::Sampling(format!(
                "video {} has a single ground-truth identity; cannot form negatives",
                a.video_id
            )));
        }
        let m = a.observations.len();
        let i = rng.random_range(0..m);
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let nt = negatives[rng.random_range(0..negatives.len())];
        let nk = nt.observations[rng.random_range(0..nt.observations.len())];
        out.push(TripletSample {
            origin: Origin::TrainGt,
            video_id: a.video_id,
            anchor: SampleRef::new(a.observations[i], Some(a.identity)),
            positive: Positive::Sample(SampleRef::new(a.observations[j], Some(a.identity))),
            negative: SampleRef::new(nk, Some(nt.identity)),
        });
    }
    Ok(out)
}

/// Samples `count` triplets from temporally co-occurring short-term
/// tracklets: a frame with two or more active tracklets is drawn uniformly,
/// then an ordered (anchor, negative) pair of tracklets active there, then
/// another frame of the anchor tracklet for the positive.
pub fn sample_inter_tracklet(
    tracklets: &[Tracklet],
    count: usize,
    seed: u64,
    retry_budget: usize,
) -> Result<Vec<TripletSample>> {
    if count == 0 {
        return Err(Error::Sampling("triplet count must be at least 1".into()));
    }
    let mut active: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..tracklets.len()).collect();
    order.sort_by_key(|&i| (tracklets[i].video_id, tracklets[i].tracklet_id));
    for i in order {
        let t = &tracklets[i];
        for o in &t.observations {
            active.entry((t.video_id, o.frame_id)).or_default().push(i);
        }
    }
    let eligible: Vec<((u32, u32), Vec<usize>)> = active.into_iter().filter(|(_, v)| v.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Sampling("no two tracklets co-occur in any frame".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0usize;
        let triplet = loop {
            if attempts > retry_budget {
                return Err(Error::Sampling(format!(
                    "no usable anchor tracklet after {retry_budget} retries; tracklets are too short"
                )));
            }
            attempts += 1;
            let ((video_id, frame_id), ids) = &eligible[rng.random_range(0..eligible.len())];
            let a = rng.random_range(0..ids.len());
            let mut b = rng.random_range(0..ids.len() - 1);
            if b >= a {
                b += 1;
            }
            let (anchor_t, negative_t) = (&tracklets[ids[a]], &tracklets[ids[b]]);
            if anchor_t.len() < 2 {
                continue;
            }
            let others: Vec<&ObservationKey> = anchor_t
                .observations
                .iter()
                .filter(|o| o.frame_id != *frame_id)
                .collect();
            let pos = *others[rng.random_range(0..others.len())];
            let anchor = anchor_t.observation_at(*frame_id).expect("active at frame");
            let negative = negative_t.observation_at(*frame_id).expect("active at frame");
            break TripletSample {
                origin: Origin::TargetInter,
                video_id: *video_id,
                anchor: SampleRef::new(anchor, Some(anchor_t.tracklet_id)),
                positive: Positive::Sample(SampleRef::new(pos, Some(anchor_t.tracklet_id))),
                negative: SampleRef::new(negative, Some(negative_t.tracklet_id)),
            };
        };
        out.push(triplet);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Vec<TripletSample>>,
}

impl BatchPlan {
    /// Manifest text with a `# batch <i>` comment before each batch.
    pub fn to_manifest_text(&self, seed: u64) -> String {
        let mut out = manifest_header(seed);
        for (i, b) in self.batches.iter().enumerate() {
            out.push_str(&format!("# batch {i}\n"));
            for t in b {
                out.push_str(&format!("{t}\n"));
            }
        }
        out
    }
}

/// Shuffles both pools by seed and emits batches holding exactly
/// `batch_size / 2` triplets from each. Without `reuse_smaller_pool`,
/// planning stops when either pool runs out; with it, the smaller pool is
/// drawn with replacement until the larger one is exhausted.
pub fn plan_batches(
    train: &[TripletSample],
    target: &[TripletSample],
    batch_size: usize,
    seed: u64,
    reuse_smaller_pool: bool,
) -> Result<BatchPlan> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidValue(format!(
            "batch size {batch_size} must be even and positive"
        )));
    }
    if train.is_empty() || target.is_empty() {
        return Err(Error::InvalidValue("both triplet pools must be non-empty".into()));
    }
    let half = batch_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<TripletSample> = train.to_vec();
    let mut target: Vec<TripletSample> = target.to_vec();
    train.shuffle(&mut rng);
    target.shuffle(&mut rng);

    let (full_train, full_target) = (train.len() / half, target.len() / half);
    let n_batches = if reuse_smaller_pool {
        full_train.max(full_target)
    } else {
        full_train.min(full_target)
    };
    let draw = |pool: &[TripletSample], b: usize, rng: &mut ChaCha8Rng| -> Vec<TripletSample> {
        if (b + 1) * half <= pool.len() {
            pool[b * half..(b + 1) * half].to_vec()
        } else {
            (0..half).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = draw(&train, b, &mut rng);
        batch.extend(draw(&target, b, &mut rng));
        batches.push(batch);
    }
    Ok(BatchPlan { batch_size, batches })
}

/// A parsed or to-be-written manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub triplets: Vec<TripletSample>,
}

fn manifest_header(seed: u64) -> String {
    format!(
        "{MANIFEST_MAGIC}\n# tool {} {}\n# seed {seed}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    )
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = manifest_header(self.seed);
        for t in &self.triplets {
            out.push_str(&format!("{t}\n"));
        }
        out
    }

    /// Parses manifest text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut seed = None;
        let mut triplets = Vec::new();
        let mut saw_magic = false;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if line == MANIFEST_MAGIC {
                    saw_magic = true;
                } else if let Some(s) = comment.trim().strip_prefix("seed ") {
                    seed = Some(
                        s.trim()
                            .parse()
                            .map_err(|e| Error::parse(origin, line_no, format!("bad seed: {e}")))?,
                    );
                }
                continue;
            }
            let t: TripletSample = line.parse().map_err(|e: String| Error::parse(origin, line_no, e))?;
            triplets.push(t);
        }
        if !saw_magic {
            return Err(Error::parse(origin, 1, "missing manifest header"));
        }
        Ok(Self {
            seed: seed.ok_or_else(|| Error::parse(origin, 1, "missing seed header"))?,
            triplets,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    /// Intra-frame target positive must be an augmentation of the anchor.
    PositiveNotAugmented,
    /// Inter-tracklet and ground-truth positives must be real observations.
    PositiveAugmented,
    MissingLabel,
    /// Anchor and negative must share a frame.
    FrameMismatch,
    /// Negative is the anchor itself or shares its tracklet/identity.
    NegativeSameAsAnchor,
    /// Positive does not share the anchor's tracklet/identity.
    PositiveLabelMismatch,
    /// Positive must come from a different frame than the anchor.
    PositiveSameFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    /// Index of the triplet in the manifest, 0-based.
    pub index: usize,
    pub kind: ViolationKind,
}

pub fn check_triplet(t: &TripletSample) -> Vec<ViolationKind> {
    use ViolationKind::*;
    let mut v = Vec::new();
    match t.origin {
        Origin::TargetIntra => {
            if !matches!(t.positive, Positive::Augment { .. }) {
                v.push(PositiveNotAugmented);
            }
            if t.anchor.frame_id != t.negative.frame_id {
                v.push(FrameMismatch);
            }
            if t.anchor.object_key == t.negative.object_key {
                v.push(NegativeSameAsAnchor);
            }
        }
        Origin::TargetInter | Origin::TrainGt => {
            let Positive::Sample(pos) = t.positive else {
                v.push(PositiveAugmented);
                return v;
            };
            let (Some(la), Some(lp), Some(ln)) = (t.anchor.label, pos.label, t.negative.label) else {
                v.push(MissingLabel);
                return v;
            };
            if lp != la {
                v.push(PositiveLabelMismatch);
            }
            if ln == la || t.negative.key() == t.anchor.key() {
                v.push(NegativeSameAsAnchor);
            }
            if t.origin == Origin::TargetInter {
                if pos.frame_id == t.anchor.frame_id {
                    v.push(PositiveSameFrame);
                }
                if t.anchor.frame_id != t.negative.frame_id {
                    v.push(FrameMismatch);
                }
            } else if pos.key() == t.anchor.key() {
                v.push(PositiveSameFrame);
            }
        }
    }
    v
}

pub fn validate_triplets(triplets: &[TripletSample]) -> Vec<Violation> {
    triplets
        .iter()
        .enumerate()
        .flat_map(|(index, t)| check_triplet(t).into_iter().map(move |kind| Violation { index, kind }))
        .collect()
}

/// Parses and checks a manifest; an empty report means it is valid.
pub fn validate_manifest(text: &str, origin: &str) -> Result<Vec<Violation>> {
    Ok(validate_triplets(&Manifest::parse(text, origin)?.triplets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(keys: &[&[u32]]) -> Vec<FrameKeys> {
        keys.iter()
            .enumerate()
            .map(|(i, k)| FrameKeys {
                video_id: 0,
                frame_id: i as u32 + 1,
                object_keys: k.to_vec(),
            })
            .collect()
    }

    fn tracklet(id: u32, r: std::ops::RangeInclusive<u32>) -> Tracklet {
        Tracklet {
            tracklet_id: id,
            video_id: 0,
            observations: r.map(|f| ObservationKey::new(f, id)).collect(),
        }
    }

    #[test]
    fn single_object_frames_cannot_form_negatives() {
        let f = frames(&[&[1], &[1], &[2]]);
        assert!(matches!(sample_intra_frame(&f, &[], 10, 1), Err(Error::Sampling(_))));
    }

    #[test]
    fn two_object_frame_pairs() {
        let f = frames(&[&[4, 9]]);
        let out = sample_intra_frame(&f, &[], 200, 3).unwrap();
        let mut pairs: Vec<(u32, u32)> = out
            .target
            .iter()
            .map(|t| (t.anchor.object_key, t.negative.object_key))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs, vec![(4, 9), (9, 4)]);
        assert!(out.train.is_empty());
    }

    #[test]
    fn disjoint_tracklets_do_not_cooccur() {
        let t = [tracklet(1, 1..=5), tracklet(2, 7..=9)];
        assert!(matches!(sample_inter_tracklet(&t, 5, 0, 10), Err(Error::Sampling(_))));
    }

    #[test]
    fn overlapping_tracklets_sample_in_intersection() {
        let t = [tracklet(1, 1..=10), tracklet(2, 5..=15)];
        let out = sample_inter_tracklet(&t, 500, 9, 100).unwrap();
        let mut frames: Vec<u32> = out.iter().map(|t| t.anchor.frame_id).collect();
        frames.sort();
        frames.dedup();
        assert_eq!(frames, (5..=10).collect::<Vec<_>>());
        assert!(validate_triplets(&out).is_empty());
    }

    #[test]
    fn length_one_anchors_exhaust_retries() {
        let t = [tracklet(1, 3..=3), tracklet(2, 3..=3)];
        assert!(matches!(sample_inter_tracklet(&t, 1, 0, 50), Err(Error::Sampling(_))));
    }

    #[test]
    fn batch_arithmetic() {
        let f = frames(&[&[1, 2, 3]]);
        let pool = sample_intra_frame(&f, &[], 10, 0).unwrap().target;
        let mut train = pool.clone();
        train.iter_mut().for_each(|t| t.origin = Origin::TrainGt);
        let plan = plan_batches(&train, &pool, 4, 1, false).unwrap();
        assert_eq!(plan.batches.len(), 5);
        let plan = plan_batches(&train, &pool[..3], 4, 1, false).unwrap();
        assert_eq!(plan.batches.len(), 1);
        let plan = plan_batches(&train, &pool[..3], 4, 1, true).unwrap();
        assert_eq!(plan.batches.len(), 5);
        for b in &plan.batches {
            assert_eq!(b.iter().filter(|t| t.origin.is_target()).count(), 2);
        }
        assert!(plan_batches(&train, &pool, 3, 1, false).is_err());
        assert!(plan_batches(&train, &[], 4, 1, false).is_err());
    }

    #[test]
    fn manifest_round_trip_and_violation() {
        let f = frames(&[&[1, 2], &[3, 4, 5]]);
        let m = Manifest {
            seed: 77,
            triplets: sample_intra_frame(&f, &[], 20, 77).unwrap().target,
        };
        let text = m.to_text();
        assert_eq!(Manifest::parse(&text, "m").unwrap(), m);
        assert!(validate_manifest(&text, "m").unwrap().is_empty());

        let bad = format!("{}target_intra 0 1:1 AUG:5 1:1\n", manifest_header(1));
        let report = validate_manifest(&bad, "m").unwrap();
        assert_eq!(
            report,
            vec![Violation {
                index: 0,
                kind: ViolationKind::NegativeSameAsAnchor
            }]
        );
    }

    #[test]
    fn manifest_parse_errors_carry_line_numbers() {
        let text = format!("{}target_intra 0 1:1 AUG:5\n", manifest_header(1));
        match Manifest::parse(&text, "m.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Manifest::parse("target_intra 0 1:1 AUG:5 1:2\n", "m").is_err());
    }
}
