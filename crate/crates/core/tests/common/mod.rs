//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the library code it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mots_refine::triplets::{Origin, Positive, TripletSample, ViolationKind};
use mots_refine::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random::<f64>() < density)
}

/// Union of a few random rectangles; closer to real instance masks than
/// salt-and-pepper noise and guaranteed non-empty.
pub fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..rng.random_range(1..=3) {
        let (bh, bw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let (top, left) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
        for y in top..top + bh {
            for x in left..left + bw {
                m.set(y, x, true);
            }
        }
    }
    m
}

pub fn pixel_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize, usize) {
    let (mut inter, mut union, mut area_a, mut area_b) = (0, 0, 0, 0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += (p && q) as usize;
            union += (p || q) as usize;
            area_a += p as usize;
            area_b += q as usize;
        }
    }
    (inter, union, area_a, area_b)
}

pub fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, u, _, _) = pixel_counts(a, b);
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn pixel_iom(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, _, x, y) = pixel_counts(a, b);
    let m = x.min(y);
    if m == 0 {
        0.0
    } else {
        i as f64 / m as f64
    }
}

/// `(height, width, column-major bits, reference counts string)` produced by
/// the COCO mask API.
pub fn coco_fixture() -> Vec<(usize, usize, BinaryMask, String)> {
    include_str!("../data/coco_reference.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let (h, w): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
            let bits: Vec<bool> = f[2].bytes().map(|b| b == b'1').collect();
            let mask = BinaryMask::from_column_major(h, w, bits).unwrap();
            (h, w, mask, f[3].to_string())
        })
        .collect()
}

/// Best `(cardinality, cost)` over every partial injective matching, with
/// larger cardinality preferred and lower cost breaking ties.
pub fn brute_force_assignment(costs: &[Vec<Option<f64>>]) -> (usize, f64) {
    fn go(
        costs: &[Vec<Option<f64>>],
        row: usize,
        used: &mut Vec<bool>,
        card: usize,
        cost: f64,
        best: &mut (usize, f64),
    ) {
        if row == costs.len() {
            if card > best.0 || (card == best.0 && cost < best.1) {
                *best = (card, cost);
            }
            return;
        }
        go(costs, row + 1, used, card, cost, best);
        for c in 0..used.len() {
            if let (false, Some(v)) = (used[c], costs[row][c]) {
                used[c] = true;
                go(costs, row + 1, used, card + 1, cost + v, best);
                used[c] = false;
            }
        }
    }
    let cols = costs.first().map_or(0, Vec::len);
    let mut best = (0, 0.0);
    go(costs, 0, &mut vec![false; cols], 0, 0.0, &mut best);
    best
}

/// Greedy IoM suppression over `(score, source_id, mask)`; returns kept input
/// indices in priority order.
pub fn nms_oracle(dets: &[(f64, u32, BinaryMask)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .0
            .partial_cmp(&dets[i].0)
            .unwrap()
            .then(dets[i].1.cmp(&dets[j].1))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| pixel_iom(&dets[i].2, &dets[k].2) < threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Average pairwise cosine distance, written as the plain double sum.
pub fn average_distance_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += 1.0 - cos(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// One tracklet as the clustering oracle sees it.
#[derive(Clone, Debug)]
pub struct OracleTracklet {
    pub id: u32,
    pub start: u32,
    pub end: u32,
    pub embeddings: Vec<Vec<f64>>,
}

fn gap(a: (u32, u32), b: (u32, u32)) -> Option<u32> {
    if a.0 <= b.1 && b.0 <= a.1 {
        None
    } else {
        Some(if a.1 < b.0 { b.0 - a.1 } else { a.0 - b.1 })
    }
}

/// Re-scans every pair of current clusters from raw data at each step and
/// merges the closest feasible pair below `cut`. Pairs of single tracklets
/// use the average pairwise distance; any pair involving a merged cluster
/// uses the cosine distance between the means of all member embeddings.
pub fn greedy_merge_oracle(tracklets: &[OracleTracklet], cut: f64, theta_t: u32) -> Vec<Vec<u32>> {
    let by_id: BTreeMap<u32, &OracleTracklet> = tracklets.iter().map(|t| (t.id, t)).collect();
    let mut clusters: Vec<BTreeSet<u32>> = tracklets.iter().map(|t| BTreeSet::from([t.id])).collect();
    loop {
        let mut best: Option<(f64, (u32, u32), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let (a, b) = (&clusters[i], &clusters[j]);
                let mut feasible = true;
                let mut min_gap = u32::MAX;
                for x in a {
                    for y in b {
                        let (tx, ty) = (by_id[x], by_id[y]);
                        match gap((tx.start, tx.end), (ty.start, ty.end)) {
                            None => feasible = false,
                            Some(g) => min_gap = min_gap.min(g),
                        }
                    }
                }
                if !feasible || min_gap > theta_t {
                    continue;
                }
                let d = if a.len() == 1 && b.len() == 1 {
                    let (x, y) = (by_id[a.first().unwrap()], by_id[b.first().unwrap()]);
                    let (x, y) = if x.id < y.id { (x, y) } else { (y, x) };
                    average_distance_oracle(&x.embeddings, &y.embeddings)
                } else {
                    1.0 - cos(&mean_embedding(a, &by_id), &mean_embedding(b, &by_id))
                };
                if d >= cut {
                    continue;
                }
                let (ka, kb) = (*a.first().unwrap(), *b.first().unwrap());
                let key = (ka.min(kb), ka.max(kb));
                if best.is_none_or(|(bd, bk, _, _)| d < bd || (d == bd && key < bk)) {
                    best = Some((d, key, i, j));
                }
            }
        }
        let Some((_, _, i, j)) = best else { break };
        let b = clusters.remove(j);
        clusters[i].extend(b);
    }
    let mut out: Vec<Vec<u32>> = clusters.into_iter().map(|c| c.into_iter().collect()).collect();
    out.sort();
    out
}

fn mean_embedding(members: &BTreeSet<u32>, by_id: &BTreeMap<u32, &OracleTracklet>) -> Vec<f64> {
    let dim = by_id.values().next().unwrap().embeddings[0].len();
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for id in members {
        for e in &by_id[id].embeddings {
            sum.iter_mut().zip(e).for_each(|(s, v)| *s += v);
            n += 1;
        }
    }
    sum.iter().map(|s| s / n as f64).collect()
}

/// A second, independently written triplet validator.
pub fn recheck(t: &TripletSample) -> BTreeSet<ViolationKind> {
    use ViolationKind as V;
    let mut out = BTreeSet::new();
    let same_frame = t.anchor.frame_id == t.negative.frame_id;
    match (t.origin, &t.positive) {
        (Origin::TargetIntra, p) => {
            if let Positive::Sample(_) = p {
                out.insert(V::PositiveNotAugmented);
            }
            if !same_frame {
                out.insert(V::FrameMismatch);
            }
            if t.anchor.object_key == t.negative.object_key {
                out.insert(V::NegativeSameAsAnchor);
            }
        }
        (_, Positive::Augment { .. }) => {
            out.insert(V::PositiveAugmented);
        }
        (origin, Positive::Sample(p)) => {
            if t.anchor.label.is_none() || p.label.is_none() || t.negative.label.is_none() {
                out.insert(V::MissingLabel);
                return out;
            }
            if p.label != t.anchor.label {
                out.insert(V::PositiveLabelMismatch);
            }
            let identical = (t.anchor.frame_id, t.anchor.object_key) == (t.negative.frame_id, t.negative.object_key);
            if t.negative.label == t.anchor.label || identical {
                out.insert(V::NegativeSameAsAnchor);
            }
            let pos_is_anchor = (p.frame_id, p.object_key) == (t.anchor.frame_id, t.anchor.object_key);
            match origin {
                Origin::TargetInter => {
                    if p.frame_id == t.anchor.frame_id {
                        out.insert(V::PositiveSameFrame);
                    }
                    if !same_frame {
                        out.insert(V::FrameMismatch);
                    }
                }
                _ => {
                    if pos_is_anchor {
                        out.insert(V::PositiveSameFrame);
                    }
                }
            }
        }
    }
    out
}

/// Highest total overlap over every injective map from tracks to
/// identities, by exhaustive search.
pub fn brute_force_idtp(weights: &[Vec<usize>]) -> usize {
    fn go(w: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == w.len() {
            return 0;
        }
        let mut best = go(w, row + 1, used);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = weights.first().map_or(0, Vec::len);
    go(weights, 0, &mut vec![false; cols])
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut ra: BTreeMap<u32, f64> = BTreeMap::new();
    let mut rb: BTreeMap<u32, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}
