use std::fmt;

use crate::features::Embedding;
use crate::mask::BinaryMask;

/// Identifies one detected instance: its frame and its per-frame key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObservationKey {
    pub frame_id: u32,
    pub object_key: u32,
}

impl ObservationKey {
    pub fn new(frame_id: u32, object_key: u32) -> Self {
        Self { frame_id, object_key }
    }
}

impl fmt::Display for ObservationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.frame_id, self.object_key)
    }
}

/// One instance in one frame, ready for association.
#[derive(Clone, Debug)]
pub struct Observation {
    pub object_key: u32,
    pub score: f64,
    pub mask: BinaryMask,
    pub embedding: Embedding,
}

#[derive(Clone, Debug)]
pub struct FrameObservations {
    pub frame_id: u32,
    pub observations: Vec<Observation>,
}

impl FrameObservations {
    pub fn new(frame_id: u32, mut observations: Vec<Observation>) -> Self {
        observations.sort_by_key(|o| o.object_key);
        Self { frame_id, observations }
    }
}

/// Identity-consistent, frame-ordered sequence of observations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tracklet {
    pub tracklet_id: u32,
    pub video_id: u32,
    pub observations: Vec<ObservationKey>,
}

impl Tracklet {
    pub fn first_frame(&self) -> u32 {
        self.observations.first().map_or(0, |o| o.frame_id)
    }

    pub fn last_frame(&self) -> u32 {
        self.observations.last().map_or(0, |o| o.frame_id)
    }

    /// Inclusive temporal range.
    pub fn range(&self) -> FrameRange {
        FrameRange::new(self.first_frame(), self.last_frame())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observation_at(&self, frame_id: u32) -> Option<ObservationKey> {
        self.observations
            .binary_search_by_key(&frame_id, |o| o.frame_id)
            .ok()
            .map(|i| self.observations[i])
    }
}

/// Inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameRange {
    pub start: u32,
    pub end: u32,
}

impl FrameRange {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn overlaps(&self, other: &FrameRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// `max(other.start - self.end, self.start - other.end)`, floored at 0
    /// for touching or overlapping ranges.
    pub fn gap(&self, other: &FrameRange) -> u32 {
        let a = other.start as i64 - self.end as i64;
        let b = self.start as i64 - other.end as i64;
        a.max(b).max(0) as u32
    }

    pub fn contains(&self, frame: u32) -> bool {
        self.start <= frame && frame <= self.end
    }

    pub fn len(&self) -> u32 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for FrameRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_gap_and_overlap() {
        let a = FrameRange::new(1, 10);
        assert_eq!(a.gap(&FrameRange::new(30, 40)), 20);
        assert_eq!(FrameRange::new(30, 40).gap(&a), 20);
        assert_eq!(a.gap(&FrameRange::new(11, 12)), 1);
        assert_eq!(a.gap(&FrameRange::new(5, 20)), 0);
        assert!(a.overlaps(&FrameRange::new(10, 12)));
        assert!(!a.overlaps(&FrameRange::new(11, 12)));
    }
}
