//! Two-frame association into short-term tracklets.
//!
//! For each adjacent frame pair, a previous-frame mask is warped forward by
//! the optical flow and compared with every current-frame mask. Pairs whose
//! warped masks do not overlap at all are forbidden; the rest get the
//! cosine distance of their embeddings, and distances above
//! `1 - theta_short` are forbidden too. A linear assignment over the
//! remaining pairs extends tracklets; everything unmatched starts a new one.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::assignment::{self, CostMatrix};
use crate::error::{Error, Result};
use crate::features::cosine_similarity;
use crate::mask::{iou, warp_mask, FlowField};
use crate::types::{FrameObservations, ObservationKey, Tracklet};

/// Distances between the observations of two adjacent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortDistanceMatrix {
    pub rows: Vec<ObservationKey>,
    pub cols: Vec<ObservationKey>,
    pub costs: CostMatrix,
}

impl ShortDistanceMatrix {
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.costs.get(r, c)
    }
}

/// Source of flow fields mapping frame `from_frame` onto `from_frame + 1`.
pub trait FlowProvider {
    fn flow(&self, from_frame: u32) -> Result<Option<Cow<'_, FlowField>>>;
}

impl FlowProvider for BTreeMap<u32, FlowField> {
    fn flow(&self, from_frame: u32) -> Result<Option<Cow<'_, FlowField>>> {
        Ok(self.get(&from_frame).map(Cow::Borrowed))
    }
}

impl FlowProvider for HashMap<u32, FlowField> {
    fn flow(&self, from_frame: u32) -> Result<Option<Cow<'_, FlowField>>> {
        Ok(self.get(&from_frame).map(Cow::Borrowed))
    }
}

/// Provider that never has a flow; combine with the identity fallback.
pub struct NoFlow;

impl FlowProvider for NoFlow {
    fn flow(&self, _from_frame: u32) -> Result<Option<Cow<'_, FlowField>>> {
        Ok(None)
    }
}

fn bboxes_touch(a: Option<(usize, usize, usize, usize)>, b: Option<(usize, usize, usize, usize)>) -> bool {
    match (a, b) {
        (Some((t1, l1, b1, r1)), Some((t2, l2, b2, r2))) => t1 <= b2 && t2 <= b1 && l1 <= r2 && l2 <= r1,
        _ => false,
    }
}

pub fn build_short_matrix(
    prev: &FrameObservations,
    curr: &FrameObservations,
    flow: &FlowField,
    theta_short: f64,
) -> Result<ShortDistanceMatrix> {
    let warped = prev
        .observations
        .iter()
        .map(|o| warp_mask(&o.mask, flow))
        .collect::<Result<Vec<_>>>()?;
    let warped_boxes: Vec<_> = warped.iter().map(|m| m.bbox()).collect();
    let curr_boxes: Vec<_> = curr.observations.iter().map(|o| o.mask.bbox()).collect();
    let max_distance = 1.0 - theta_short;

    let mut costs = CostMatrix::new(prev.observations.len(), curr.observations.len());
    for (i, p) in prev.observations.iter().enumerate() {
        for (j, c) in curr.observations.iter().enumerate() {
            if !bboxes_touch(warped_boxes[i], curr_boxes[j]) {
                warped[i].check_dims(c.mask.height(), c.mask.width())?;
                continue;
            }
            if iou(&warped[i], &c.mask)? == 0.0 {
                continue;
            }
            let d = 1.0 - cosine_similarity(&p.embedding, &c.embedding)?;
            if d <= max_distance {
                costs.set(i, j, Some(d));
            }
        }
    }
    Ok(ShortDistanceMatrix {
        rows: prev
            .observations
            .iter()
            .map(|o| ObservationKey::new(prev.frame_id, o.object_key))
            .collect(),
        cols: curr
            .observations
            .iter()
            .map(|o| ObservationKey::new(curr.frame_id, o.object_key))
            .collect(),
        costs,
    })
}

/// Minimum-distance matching over feasible entries, as index pairs.
pub fn solve_assignment(matrix: &ShortDistanceMatrix) -> Vec<(usize, usize)> {
    assignment::solve(&matrix.costs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerOptions {
    pub theta_short: f64,
    /// Use zero flow when the provider has none for a frame pair.
    pub identity_flow_fallback: bool,
    /// First tracklet id handed out.
    pub first_tracklet_id: u32,
}

impl TrackerOptions {
    pub fn new(theta_short: f64) -> Self {
        Self {
            theta_short,
            identity_flow_fallback: false,
            first_tracklet_id: 1,
        }
    }
}

/// Runs the two-frame tracker over one video. Frames must have strictly
/// increasing ids; a missing frame id breaks every tracklet.
pub fn track_video(
    video_id: u32,
    frames: &[FrameObservations],
    flows: &dyn FlowProvider,
    options: &TrackerOptions,
) -> Result<Vec<Tracklet>> {
    for w in frames.windows(2) {
        if w[1].frame_id <= w[0].frame_id {
            return Err(Error::FrameOrder {
                prev: w[0].frame_id,
                next: w[1].frame_id,
            });
        }
    }
    let mut tracklets: Vec<Tracklet> = Vec::new();
    // object_key in the previous frame -> index into `tracklets`
    let mut active: HashMap<u32, usize> = HashMap::new();
    let mut prev: Option<&FrameObservations> = None;

    for frame in frames {
        let mut next_active = HashMap::with_capacity(frame.observations.len());
        let mut matched = vec![false; frame.observations.len()];

        if let Some(p) = prev.filter(|p| p.frame_id + 1 == frame.frame_id) {
            if !p.observations.is_empty() && !frame.observations.is_empty() {
                let flow = match flows.flow(p.frame_id)? {
                    Some(f) => f,
                    None if options.identity_flow_fallback => {
                        let m = &p.observations[0].mask;
                        Cow::Owned(FlowField::zeros(m.height(), m.width()))
                    }
                    None => {
                        return Err(Error::InvalidValue(format!(
                            "no flow field for frames {} -> {} and identity fallback is disabled",
                            p.frame_id, frame.frame_id
                        )))
                    }
                };
                let matrix = build_short_matrix(p, frame, &flow, options.theta_short)?;
                for (i, j) in solve_assignment(&matrix) {
                    let t = active[&p.observations[i].object_key];
                    tracklets[t].observations.push(matrix.cols[j]);
                    next_active.insert(frame.observations[j].object_key, t);
                    matched[j] = true;
                }
            }
        }

        for (j, o) in frame.observations.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let id = options.first_tracklet_id + tracklets.len() as u32;
            tracklets.push(Tracklet {
                tracklet_id: id,
                video_id,
                observations: vec![ObservationKey::new(frame.frame_id, o.object_key)],
            });
            next_active.insert(o.object_key, tracklets.len() - 1);
        }
        active = next_active;
        prev = Some(frame);
    }
    Ok(tracklets)
}
