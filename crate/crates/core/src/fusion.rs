//! Fusion of per-frame detections from several sources into mutually
//! exclusive masks: greedy suppression on intersection-over-minimum,
//! followed by pixel-level reassignment of contested areas to the highest
//! scoring mask.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{iom, BinaryMask};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frame_id: u32,
    pub object_key: u32,
    pub source_id: u32,
    pub score: f64,
    pub mask: BinaryMask,
}

impl Detection {
    pub fn new(frame_id: u32, object_key: u32, source_id: u32, score: f64, mask: BinaryMask) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidValue(format!("detection score {score} outside [0, 1]")));
        }
        if mask.is_empty() {
            return Err(Error::InvalidValue(format!(
                "detection {object_key} in frame {frame_id} has an empty mask"
            )));
        }
        Ok(Self {
            frame_id,
            object_key,
            source_id,
            score,
            mask,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub iom_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { iom_threshold: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iom_threshold > 0.0 && self.iom_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iom_threshold {} must be in (0, 1]",
                self.iom_threshold
            )));
        }
        Ok(())
    }
}

/// Indices in priority order: score descending, then source id, then
/// input position.
fn priority_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(Ordering::Equal)
            .then(da.source_id.cmp(&db.source_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression using intersection over minimum.
pub fn nms_iom(detections: &[Detection], config: &FusionConfig) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    for i in priority_order(detections) {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| iom(&k.mask, &d.mask).unwrap_or(0.0) >= config.iom_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Gives every contested pixel to the highest-priority claimant and drops
/// masks that end up empty. Output is in priority order and pairwise
/// disjoint.
pub fn resolve_overlaps(detections: Vec<Detection>) -> Vec<Detection> {
    let order = priority_order(&detections);
    let mut slots: Vec<Option<Detection>> = detections.into_iter().map(Some).collect();
    let mut out: Vec<Detection> = Vec::with_capacity(slots.len());
    let mut claimed: Option<BinaryMask> = None;
    for i in order {
        let mut d = slots[i].take().expect("each index visited once");
        match &mut claimed {
            None => claimed = Some(d.mask.clone()),
            Some(c) => {
                if d.mask.subtract(c).is_err() {
                    continue;
                }
                let _ = c.union_with(&d.mask);
            }
        }
        if !d.mask.is_empty() {
            out.push(d);
        }
    }
    out
}

/// Suppression followed by overlap resolution for one frame.
pub fn fuse_frame(detections: &[Detection], config: &FusionConfig) -> Vec<Detection> {
    resolve_overlaps(nms_iom(detections, config))
}

/// Pools detections from all sources, checks per-frame key uniqueness, and
/// fuses each frame independently. Output is keyed by frame id.
pub fn fuse_sources(sources: &[Vec<Detection>], config: &FusionConfig) -> Result<BTreeMap<u32, Vec<Detection>>> {
    config.validate()?;
    let mut frames: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in sources.iter().flatten() {
        let frame = frames.entry(d.frame_id).or_default();
        if frame.iter().any(|o| o.object_key == d.object_key) {
            return Err(Error::InvalidValue(format!(
                "object key {} appears twice in frame {}",
                d.object_key, d.frame_id
            )));
        }
        frame.push(d.clone());
    }
    Ok(frames
        .into_iter()
        .map(|(f, dets)| (f, fuse_frame(&dets, config)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(key: u32, score: f64, mask: BinaryMask) -> Detection {
        Detection::new(1, key, 0, score, mask).unwrap()
    }

    #[test]
    fn identical_masks_keep_best() {
        let m = BinaryMask::rect(10, 10, 2, 2, 4, 4);
        let out = nms_iom(&[det(1, 0.8, m.clone()), det(2, 0.9, m)], &FusionConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].object_key, 2);
    }

    #[test]
    fn disjoint_masks_survive() {
        let a = det(1, 0.8, BinaryMask::rect(10, 10, 0, 0, 3, 3));
        let b = det(2, 0.9, BinaryMask::rect(10, 10, 5, 5, 3, 3));
        let out = nms_iom(&[a.clone(), b.clone()], &FusionConfig::default());
        assert_eq!(out, vec![b.clone(), a.clone()]);
        assert_eq!(resolve_overlaps(vec![a.clone(), b.clone()]), vec![b, a]);
    }

    #[test]
    fn contained_lower_score_mask_is_dropped() {
        let a = det(1, 0.9, BinaryMask::rect(10, 10, 0, 0, 8, 8));
        let b = det(2, 0.5, BinaryMask::rect(10, 10, 2, 2, 3, 3));
        let out = resolve_overlaps(vec![a.clone(), b]);
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn partial_overlap_goes_to_higher_score() {
        let a = det(1, 0.9, BinaryMask::rect(10, 10, 0, 0, 4, 6));
        let b = det(2, 0.7, BinaryMask::rect(10, 10, 0, 4, 4, 6));
        let out = resolve_overlaps(vec![b, a.clone()]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], a);
        assert_eq!(out[1].mask, BinaryMask::rect(10, 10, 0, 6, 4, 4));
    }

    #[test]
    fn ties_broken_by_source_then_position() {
        let m = BinaryMask::rect(6, 6, 0, 0, 3, 3);
        let mut a = det(1, 0.5, m.clone());
        a.source_id = 1;
        let b = det(2, 0.5, m.clone());
        let c = det(3, 0.5, m);
        let out = nms_iom(&[a, b, c], &FusionConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].object_key, 2);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let m = BinaryMask::rect(6, 6, 0, 0, 3, 3);
        let a = det(1, 0.5, m.clone());
        let b = det(1, 0.6, m);
        assert!(fuse_sources(&[vec![a], vec![b]], &FusionConfig::default()).is_err());
    }

    #[test]
    fn invalid_detections_rejected() {
        assert!(Detection::new(1, 1, 0, 1.5, BinaryMask::full(2, 2)).is_err());
        assert!(Detection::new(1, 1, 0, 0.5, BinaryMask::empty(2, 2)).is_err());
        assert!(FusionConfig { iom_threshold: 0.0 }.validate().is_err());
    }
}
