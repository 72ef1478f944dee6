//! Merging of short-term tracklets into long-term tracks by constrained
//! agglomerative clustering.
//!
//! Two tracklets may only end up together if they never share a frame and
//! are at most `theta_t` frames apart. Initial distances are the mean
//! pairwise cosine distance between their observations; once a cluster has
//! more than one member its distance to others is the cosine distance
//! between mean embeddings (centroid linkage). Merging stops when no
//! feasible pair is closer than the cut.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::features::{cosine_f64, cosine_similarity, EmbeddingStore};
use crate::types::{FrameRange, ObservationKey, Tracklet};

/// Symmetric matrix of tracklet distances; `None` is infeasible.
#[derive(Clone, Debug, PartialEq)]
pub struct LongDistanceMatrix {
    pub keys: Vec<u32>,
    entries: Vec<Option<f64>>,
}

impl LongDistanceMatrix {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.keys.len() + j]
    }
}

/// Mean pairwise cosine distance between two tracklets, or `None` when the
/// pair is excluded: same id, temporal overlap, or a gap above `theta_t`.
pub fn tracklet_distance(a: &Tracklet, b: &Tracklet, store: &EmbeddingStore, theta_t: u32) -> Result<Option<f64>> {
    if a.tracklet_id == b.tracklet_id {
        return Ok(None);
    }
    let (ra, rb) = (a.range(), b.range());
    if ra.overlaps(&rb) || ra.gap(&rb) > theta_t {
        return Ok(None);
    }
    // Fixed operand order keeps the value bit-identical for (a, b) and (b, a).
    let (a, b) = if a.tracklet_id < b.tracklet_id { (a, b) } else { (b, a) };
    let fa = a
        .observations
        .iter()
        .map(|k| store.require(k))
        .collect::<Result<Vec<_>>>()?;
    let fb = b
        .observations
        .iter()
        .map(|k| store.require(k))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for x in &fa {
        for y in &fb {
            sum += 1.0 - cosine_similarity(x, y)?;
        }
    }
    Ok(Some(sum / (fa.len() * fb.len()) as f64))
}

pub fn build_long_matrix(tracklets: &[Tracklet], store: &EmbeddingStore, theta_t: u32) -> Result<LongDistanceMatrix> {
    let n = tracklets.len();
    let mut entries = vec![None; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = tracklet_distance(&tracklets[i], &tracklets[j], store, theta_t)?;
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(LongDistanceMatrix {
        keys: tracklets.iter().map(|t| t.tracklet_id).collect(),
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterOptions {
    /// Merging stops once the closest feasible pair is at least this far.
    pub cut: f64,
    pub theta_t: u32,
    /// Average unit-normalized embeddings instead of raw ones.
    pub normalize_centroid: bool,
}

impl ClusterOptions {
    pub fn new(theta_long: f64, theta_t: u32) -> Self {
        Self {
            cut: 1.0 - theta_long,
            theta_t,
            normalize_centroid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackCluster {
    /// Sorted member tracklet ids.
    pub members: Vec<u32>,
    /// Sorted, pairwise disjoint member ranges.
    pub ranges: Vec<FrameRange>,
    pub centroid: Vec<f64>,
}

impl TrackCluster {
    fn key(&self) -> u32 {
        self.members[0]
    }
}

/// Whether two sorted range sets may be merged: no overlapping intervals and
/// a minimum gap of at most `theta_t`.
pub fn ranges_compatible(a: &[FrameRange], b: &[FrameRange], theta_t: u32) -> bool {
    let mut min_gap = u32::MAX;
    for x in a {
        for y in b {
            if x.overlaps(y) {
                return false;
            }
            min_gap = min_gap.min(x.gap(y));
        }
    }
    min_gap <= theta_t
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeStep {
    pub step: usize,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub distance: f64,
    pub ranges: Vec<FrameRange>,
}

impl fmt::Display for MergeStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let ranges = self
            .ranges
            .iter()
            .map(FrameRange::to_string)
            .collect::<Vec<_>>()
            .join(",");
        write!(
            f,
            "step {} merge [{}] + [{}] distance {:.6} ranges {}",
            self.step,
            ids(&self.left),
            ids(&self.right),
            self.distance,
            ranges
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub clusters: Vec<TrackCluster>,
    pub log: Vec<MergeStep>,
}

impl ClusterResult {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|s| format!("{s}\n")).collect()
    }
}

/// Per-tracklet embedding sum and observation count.
struct MemberSum {
    sum: Vec<f64>,
    count: usize,
}

fn member_sums(tracklets: &[Tracklet], store: &EmbeddingStore, normalize: bool) -> Result<BTreeMap<u32, MemberSum>> {
    let mut out = BTreeMap::new();
    for t in tracklets {
        let mut sum = vec![0.0f64; store.dim()];
        for k in &t.observations {
            let e = store.require(k)?;
            let scale = if normalize { 1.0 / e.norm() } else { 1.0 };
            for (s, &v) in sum.iter_mut().zip(e.values()) {
                *s += v as f64 * scale;
            }
        }
        out.insert(
            t.tracklet_id,
            MemberSum {
                sum,
                count: t.observations.len(),
            },
        );
    }
    Ok(out)
}

fn centroid_of(members: &[u32], sums: &BTreeMap<u32, MemberSum>, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; dim];
    let mut count = 0usize;
    for id in members {
        let m = &sums[id];
        for (a, b) in c.iter_mut().zip(&m.sum) {
            *a += b;
        }
        count += m.count;
    }
    let n = count.max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

fn merge_ranges(a: &[FrameRange], b: &[FrameRange]) -> Vec<FrameRange> {
    let mut out: Vec<FrameRange> = a.iter().chain(b).copied().collect();
    out.sort();
    out
}

/// Constrained agglomerative clustering. `matrix` must have been built from
/// `tracklets` in the same order.
pub fn cluster(
    matrix: &LongDistanceMatrix,
    tracklets: &[Tracklet],
    store: &EmbeddingStore,
    options: &ClusterOptions,
) -> Result<ClusterResult> {
    let n = tracklets.len();
    if matrix.len() != n || matrix.keys.iter().zip(tracklets).any(|(k, t)| *k != t.tracklet_id) {
        return Err(Error::InvalidValue("distance matrix does not match tracklets".into()));
    }
    let ids: BTreeSet<u32> = tracklets.iter().map(|t| t.tracklet_id).collect();
    if ids.len() != n {
        return Err(Error::InvalidValue("duplicate tracklet ids".into()));
    }
    let sums = member_sums(tracklets, store, options.normalize_centroid)?;
    let dim = store.dim();

    let mut slots: Vec<Option<TrackCluster>> = tracklets
        .iter()
        .map(|t| {
            let members = vec![t.tracklet_id];
            Some(TrackCluster {
                centroid: centroid_of(&members, &sums, dim),
                members,
                ranges: vec![t.range()],
            })
        })
        .collect();
    let mut dist: Vec<Option<f64>> = (0..n * n).map(|i| matrix.get(i / n, i % n)).collect();
    let mut log = Vec::new();

    loop {
        let mut best: Option<(f64, (u32, u32), usize, usize)> = None;
        for i in 0..n {
            let Some(ci) = &slots[i] else { continue };
            for j in i + 1..n {
                let Some(cj) = &slots[j] else { continue };
                let Some(d) = dist[i * n + j] else { continue };
                if d >= options.cut {
                    continue;
                }
                let key = (ci.key().min(cj.key()), ci.key().max(cj.key()));
                let better = match &best {
                    None => true,
                    Some((bd, bk, _, _)) => d < *bd || (d == *bd && key < *bk),
                };
                if better {
                    best = Some((d, key, i, j));
                }
            }
        }
        let Some((d, _, i, j)) = best else { break };

        let a = slots[i].take().expect("active slot");
        let b = slots[j].take().expect("active slot");
        let (left, right) = if a.key() < b.key() { (a, b) } else { (b, a) };
        let mut members: Vec<u32> = left.members.iter().chain(&right.members).copied().collect();
        members.sort_unstable();
        let merged = TrackCluster {
            centroid: centroid_of(&members, &sums, dim),
            ranges: merge_ranges(&left.ranges, &right.ranges),
            members,
        };
        log.push(MergeStep {
            step: log.len() + 1,
            left: left.members,
            right: right.members,
            distance: d,
            ranges: merged.ranges.clone(),
        });

        for k in 0..n {
            dist[j * n + k] = None;
            dist[k * n + j] = None;
        }
        for k in 0..n {
            if k == i {
                continue;
            }
            let entry = match &slots[k] {
                Some(other) if ranges_compatible(&merged.ranges, &other.ranges, options.theta_t) => {
                    let s = cosine_f64(
                        merged.centroid.iter().copied(),
                        other.centroid.iter().copied(),
                        dim,
                        dim,
                    )?;
                    Some(1.0 - s)
                }
                _ => None,
            };
            dist[i * n + k] = entry;
            dist[k * n + i] = entry;
        }
        slots[i] = Some(merged);
    }

    let mut clusters: Vec<TrackCluster> = slots.into_iter().flatten().collect();
    clusters.sort_by_key(TrackCluster::key);
    Ok(ClusterResult { clusters, log })
}

/// A final long-term track.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalTrack {
    pub track_id: u32,
    pub tracklet_ids: Vec<u32>,
    pub observations: Vec<ObservationKey>,
}

/// Assigns one id per cluster in order of first appearance, starting at
/// `first_id`. Fails if a cluster would hold two observations of one frame.
pub fn relabel(tracklets: &[Tracklet], clusters: &[TrackCluster], first_id: u32) -> Result<Vec<FinalTrack>> {
    let by_id: BTreeMap<u32, &Tracklet> = tracklets.iter().map(|t| (t.tracklet_id, t)).collect();
    let mut seen = BTreeSet::new();
    let mut tracks = Vec::with_capacity(clusters.len());
    for c in clusters {
        let mut observations = Vec::new();
        for id in &c.members {
            let t = by_id
                .get(id)
                .ok_or_else(|| Error::Clustering(format!("cluster references unknown tracklet {id}")))?;
            if !seen.insert(*id) {
                return Err(Error::Clustering(format!("tracklet {id} appears in two clusters")));
            }
            observations.extend_from_slice(&t.observations);
        }
        observations.sort();
        if let Some(w) = observations.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(Error::Clustering(format!(
                "cluster {:?} holds two observations in frame {}",
                c.members, w[0].frame_id
            )));
        }
        tracks.push(FinalTrack {
            track_id: 0,
            tracklet_ids: c.members.clone(),
            observations,
        });
    }
    if seen.len() != tracklets.len() {
        return Err(Error::Clustering("clusters do not cover every tracklet".into()));
    }
    tracks.sort_by_key(|t| {
        (
            t.observations.first().map(|o| o.frame_id),
            t.tracklet_ids.first().copied(),
        )
    });
    for (i, t) in tracks.iter_mut().enumerate() {
        t.track_id = first_id + i as u32;
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Embedding;

    fn tracklet(id: u32, frames: std::ops::RangeInclusive<u32>) -> Tracklet {
        Tracklet {
            tracklet_id: id,
            video_id: 0,
            observations: frames.map(|f| ObservationKey::new(f, id)).collect(),
        }
    }

    fn store_for(tracklets: &[Tracklet], emb: impl Fn(u32) -> Vec<f32>) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(0);
        for t in tracklets {
            for k in &t.observations {
                s.insert(*k, Embedding::new(emb(t.tracklet_id)).unwrap()).unwrap();
            }
        }
        s
    }

    #[test]
    fn infeasibility_branches() {
        let a = tracklet(1, 1..=10);
        let overlap = tracklet(2, 5..=20);
        let far = tracklet(3, 30..=40);
        let near = tracklet(4, 15..=16);
        let ts = [a.clone(), overlap.clone(), far.clone(), near.clone()];
        let s = store_for(&ts, |_| vec![1.0, 0.0]);
        assert_eq!(tracklet_distance(&a, &a, &s, 15).unwrap(), None);
        assert_eq!(tracklet_distance(&a, &overlap, &s, 15).unwrap(), None);
        assert_eq!(tracklet_distance(&a, &far, &s, 15).unwrap(), None);
        assert_eq!(tracklet_distance(&a, &near, &s, 15).unwrap(), Some(0.0));
    }

    #[test]
    fn single_tracklet_matrix() {
        let ts = [tracklet(1, 1..=3)];
        let s = store_for(&ts, |_| vec![1.0]);
        let m = build_long_matrix(&ts, &s, 15).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0, 0), None);
    }

    #[test]
    fn two_close_tracklets_merge() {
        let ts = [tracklet(1, 1..=5), tracklet(2, 8..=9)];
        let s = store_for(&ts, |id| if id == 1 { vec![1.0, 0.0] } else { vec![0.9, 0.1] });
        let m = build_long_matrix(&ts, &s, 15).unwrap();
        let r = cluster(&m, &ts, &s, &ClusterOptions::new(0.6, 15)).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].members, vec![1, 2]);
        assert_eq!(r.log.len(), 1);
        assert!(r.log_text().starts_with("step 1 merge [1] + [2] distance"));
    }

    #[test]
    fn chain_merges_across_time() {
        let ts = [tracklet(1, 1..=5), tracklet(2, 10..=15), tracklet(3, 25..=30)];
        let s = store_for(&ts, |id| vec![1.0, 0.001 * id as f32]);
        let m = build_long_matrix(&ts, &s, 15).unwrap();
        assert_eq!(m.get(0, 2), None, "A and C are directly too far apart");
        let r = cluster(&m, &ts, &s, &ClusterOptions::new(0.6, 15)).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].ranges.len(), 3);
    }

    #[test]
    fn relabel_orders_by_first_appearance() {
        let ts = [tracklet(5, 10..=12), tracklet(2, 1..=3), tracklet(9, 4..=6)];
        let clusters = vec![
            TrackCluster {
                members: vec![2, 9],
                ranges: vec![],
                centroid: vec![],
            },
            TrackCluster {
                members: vec![5],
                ranges: vec![],
                centroid: vec![],
            },
        ];
        let tracks = relabel(&ts, &clusters, 2001).unwrap();
        assert_eq!(tracks[0].track_id, 2001);
        assert_eq!(tracks[0].tracklet_ids, vec![2, 9]);
        assert_eq!(tracks[0].observations.len(), 6);
        assert_eq!(tracks[1].track_id, 2002);
    }

    #[test]
    fn relabel_rejects_overlapping_cluster() {
        let ts = [tracklet(1, 1..=3), tracklet(2, 3..=5)];
        let bad = vec![TrackCluster {
            members: vec![1, 2],
            ranges: vec![],
            centroid: vec![],
        }];
        assert!(matches!(relabel(&ts, &bad, 1), Err(Error::Clustering(_))));
    }
}
