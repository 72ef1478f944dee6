//! Association-quality metrics against ground-truth labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};
use crate::io::{Assignment, GtLabel};
use crate::types::ObservationKey;

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationReport {
    pub id_switches: usize,
    pub identity_f1: f64,
    pub track_purity: f64,
    pub constraint_violations: usize,
    pub num_tracks: usize,
    pub num_identities: usize,
}

impl fmt::Display for AssociationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "identity_f1 {:.6}", self.identity_f1)?;
        writeln!(f, "id_switches {}", self.id_switches)?;
        writeln!(f, "track_purity {:.6}", self.track_purity)?;
        writeln!(f, "constraint_violations {}", self.constraint_violations)?;
        writeln!(f, "num_tracks {}", self.num_tracks)?;
        write!(f, "num_identities {}", self.num_identities)
    }
}

pub fn evaluate_association(result: &[Assignment], gt: &[GtLabel]) -> Result<AssociationReport> {
    let labels: HashMap<ObservationKey, &GtLabel> = gt.iter().map(|l| (l.key(), l)).collect();
    let gt_frames: BTreeSet<u32> = gt.iter().map(|l| l.frame_id).collect();

    let mut predicted: HashMap<ObservationKey, u32> = HashMap::with_capacity(result.len());
    let mut per_frame_ids: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut violations = 0usize;
    for a in result {
        let key = ObservationKey::new(a.frame_id, a.object_key);
        if !gt_frames.contains(&a.frame_id) {
            return Err(Error::Evaluation(format!(
                "result frame {} is not covered by the ground truth",
                a.frame_id
            )));
        }
        if !labels.contains_key(&key) {
            return Err(Error::Evaluation(format!(
                "observation {key} has no ground-truth label"
            )));
        }
        if predicted.insert(key, a.track_id).is_some() {
            return Err(Error::Evaluation(format!("observation {key} assigned twice")));
        }
        if !per_frame_ids.insert((a.frame_id, a.track_id)) {
            violations += 1;
        }
    }

    // identity -> frame-ordered ground-truth observations
    let mut identities: BTreeMap<u32, Vec<ObservationKey>> = BTreeMap::new();
    for l in gt.iter().filter(|l| !l.is_false_positive) {
        identities.entry(l.identity).or_default().push(l.key());
    }
    let mut id_switches = 0usize;
    for keys in identities.values_mut() {
        keys.sort();
        let ids: Vec<u32> = keys.iter().filter_map(|k| predicted.get(k).copied()).collect();
        id_switches += ids.windows(2).filter(|w| w[0] != w[1]).count();
    }

    // track -> identity -> count; false positives are counted under `None`
    let mut overlap: BTreeMap<u32, BTreeMap<Option<u32>, usize>> = BTreeMap::new();
    for (key, track) in &predicted {
        let l = labels[key];
        let identity = (!l.is_false_positive).then_some(l.identity);
        *overlap.entry(*track).or_default().entry(identity).or_default() += 1;
    }
    let tracks: Vec<u32> = overlap.keys().copied().collect();
    let idents: Vec<u32> = identities.keys().copied().collect();
    let weights: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| {
            idents
                .iter()
                .map(|i| overlap[t].get(&Some(*i)).copied().unwrap_or(0) as f64)
                .collect()
        })
        .collect();
    let idtp: f64 = if tracks.is_empty() || idents.is_empty() {
        0.0
    } else {
        max_weight_assignment(&weights)
            .iter()
            .map(|&(r, c)| weights[r][c])
            .sum()
    };
    let gt_total: usize = identities.values().map(Vec::len).sum();
    let pred_total = predicted.len();
    let identity_f1 = if gt_total + pred_total == 0 {
        1.0
    } else {
        2.0 * idtp / (gt_total + pred_total) as f64
    };
    let track_purity = if pred_total == 0 {
        1.0
    } else {
        overlap
            .values()
            .map(|m| m.values().copied().max().unwrap_or(0))
            .sum::<usize>() as f64
            / pred_total as f64
    };

    Ok(AssociationReport {
        id_switches,
        identity_f1,
        track_purity,
        constraint_violations: violations,
        num_tracks: tracks.len(),
        num_identities: idents.len(),
    })
}
