//! Appearance embeddings, cosine similarity, and the data-driven estimation
//! of the short-term gate and the long-term cutting threshold.
//!
//! The short-term gate comes from the intra-frame similarity distribution
//! alone: two masks in the same frame are never the same object, so their
//! similarities describe chance agreement between different identities, and
//! `mean + 3 * std` bounds it from above.
//!
//! The long-term threshold separates that negative distribution from the
//! positive distribution of similarities inside short-term tracklets. Each
//! is fitted with a normal density and the crossing point between the two
//! means is returned.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::types::{ObservationKey, Tracklet};

pub const MIN_SAMPLES: usize = 30;
pub const DEFAULT_THETA_SHORT: f64 = 0.5;
pub const DEFAULT_THETA_LONG: f64 = 0.6;
pub const DEFAULT_THETA_T: u32 = 15;

/// Appearance feature vector. Cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Arc<[f32]>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateEmbedding);
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Self(values.into()))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_f64(
        a.values().iter().map(|&v| v as f64),
        b.values().iter().map(|&v| v as f64),
        a.dim(),
        b.dim(),
    )
}

pub(crate) fn cosine_f64(
    a: impl Iterator<Item = f64>,
    b: impl Iterator<Item = f64>,
    dim_a: usize,
    dim_b: usize,
) -> Result<f64> {
    if dim_a != dim_b {
        return Err(Error::EmbeddingDimension(dim_a, dim_b));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Embeddings keyed by observation, all of one dimension.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore {
    dim: usize,
    map: BTreeMap<ObservationKey, Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            map: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, key: ObservationKey, embedding: Embedding) -> Result<()> {
        if self.map.is_empty() && self.dim == 0 {
            self.dim = embedding.dim();
        }
        if embedding.dim() != self.dim {
            return Err(Error::EmbeddingDimension(self.dim, embedding.dim()));
        }
        self.map.insert(key, embedding);
        Ok(())
    }

    pub fn get(&self, key: &ObservationKey) -> Option<&Embedding> {
        self.map.get(key)
    }

    pub fn require(&self, key: &ObservationKey) -> Result<&Embedding> {
        self.map.get(key).ok_or(Error::MissingData {
            what: "embedding",
            frame_id: key.frame_id,
            object_key: key.object_key,
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ObservationKey, &Embedding)> {
        self.map.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    IntraFrameNegative,
    IntraTrackletPositive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySampleSet {
    pub kind: SampleKind,
    pub values: Vec<f64>,
}

impl SimilaritySampleSet {
    pub fn new(kind: SampleKind, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(Self { kind, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fit(&self) -> NormalFit {
        NormalFit::from_samples(&self.values)
    }
}

/// One similarity per unordered pair of distinct observations within each
/// frame, pooled over all frames.
pub fn collect_intra_frame_similarities<'a, F, I>(frames: F) -> Result<SimilaritySampleSet>
where
    F: IntoIterator<Item = I>,
    I: IntoIterator<Item = &'a Embedding>,
{
    let mut values = Vec::new();
    for frame in frames {
        let embs: Vec<&Embedding> = frame.into_iter().collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                values.push(cosine_similarity(embs[i], embs[j])?);
            }
        }
    }
    SimilaritySampleSet::new(SampleKind::IntraFrameNegative, values)
}

/// One similarity per unordered pair of observations taken from different
/// frames of the same tracklet.
pub fn collect_intra_tracklet_similarities(
    tracklets: &[Tracklet],
    store: &EmbeddingStore,
) -> Result<SimilaritySampleSet> {
    let mut values = Vec::new();
    for t in tracklets {
        let embs = t
            .observations
            .iter()
            .map(|k| store.require(k))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                values.push(cosine_similarity(embs[i], embs[j])?);
            }
        }
    }
    SimilaritySampleSet::new(SampleKind::IntraTrackletPositive, values)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalFit {
    pub mean: f64,
    pub std: f64,
}

impl NormalFit {
    pub fn from_samples(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// `mean + 3 * std` of intra-frame negatives, clamped to at most 1.
pub fn estimate_theta_short(samples: &SimilaritySampleSet) -> Result<f64> {
    if samples.kind != SampleKind::IntraFrameNegative {
        return Err(Error::InvalidValue(
            "short-term gate needs intra-frame negative samples".into(),
        ));
    }
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Estimation(format!(
            "{} intra-frame samples, need at least {MIN_SAMPLES}; use a fallback threshold from the configuration",
            samples.len()
        )));
    }
    let fit = samples.fit();
    Ok((fit.mean + 3.0 * fit.std).min(1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaLongMode {
    #[default]
    GaussianCrossing,
    Otsu,
}

fn check_long_inputs(
    negatives: &SimilaritySampleSet,
    positives: &SimilaritySampleSet,
) -> Result<(NormalFit, NormalFit)> {
    if negatives.kind != SampleKind::IntraFrameNegative || positives.kind != SampleKind::IntraTrackletPositive {
        return Err(Error::InvalidValue(
            "long-term threshold needs intra-frame negatives and intra-tracklet positives".into(),
        ));
    }
    for (name, s) in [("negative", negatives), ("positive", positives)] {
        if s.len() < MIN_SAMPLES {
            return Err(Error::Estimation(format!(
                "{} {name} samples, need at least {MIN_SAMPLES}; use a fallback threshold from the configuration",
                s.len()
            )));
        }
    }
    let (neg, pos) = (negatives.fit(), positives.fit());
    if pos.mean <= neg.mean {
        return Err(Error::Estimation(format!(
            "positive mean {:.4} does not exceed negative mean {:.4}; distributions are not separated",
            pos.mean, neg.mean
        )));
    }
    Ok((neg, pos))
}

pub fn estimate_theta_long(negatives: &SimilaritySampleSet, positives: &SimilaritySampleSet) -> Result<f64> {
    let (neg, pos) = check_long_inputs(negatives, positives)?;
    Ok(gaussian_crossing(neg, pos))
}

pub fn estimate_theta_long_with(
    mode: ThetaLongMode,
    negatives: &SimilaritySampleSet,
    positives: &SimilaritySampleSet,
) -> Result<f64> {
    match mode {
        ThetaLongMode::GaussianCrossing => estimate_theta_long(negatives, positives),
        ThetaLongMode::Otsu => {
            check_long_inputs(negatives, positives)?;
            Ok(otsu_threshold(&negatives.values, &positives.values, 256))
        }
    }
}

/// Point between the two means where the fitted densities are equal.
/// `neg.mean < pos.mean` is assumed.
pub fn gaussian_crossing(neg: NormalFit, pos: NormalFit) -> f64 {
    let (mn, sn, mp, sp) = (neg.mean, neg.std, pos.mean, pos.std);
    let midpoint = (mn + mp) / 2.0;
    if sn == sp || sn == 0.0 || sp == 0.0 {
        return midpoint;
    }
    let (vn, vp) = (sn * sn, sp * sp);
    let a = 1.0 / vn - 1.0 / vp;
    let b = -2.0 * (mn / vn - mp / vp);
    let c = mn * mn / vn - mp * mp / vp + 2.0 * (sn / sp).ln();
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let mut roots = Vec::with_capacity(2);
        if q != 0.0 {
            roots.push(c / q);
        }
        if a != 0.0 {
            roots.push(q / a);
        }
        if let Some(r) = roots.into_iter().find(|r| *r > mn && *r < mp) {
            return r;
        }
    }
    (mn * sp + mp * sn) / (sn + sp)
}

/// Otsu-style split of the pooled samples: the histogram bin edge that
/// maximizes the between-class variance.
pub fn otsu_threshold(negatives: &[f64], positives: &[f64], bins: usize) -> f64 {
    let hist = Histogram::from_values(negatives.iter().chain(positives).copied(), -1.0, 1.0, bins);
    let total: u64 = hist.counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let centers: Vec<f64> = (0..bins).map(|i| hist.bin_center(i)).collect();
    let sum_all: f64 = hist.counts.iter().zip(&centers).map(|(&c, &x)| c as f64 * x).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_edge) = (-1.0f64, 0.0f64);
    for (i, (&count, &center)) in hist.counts.iter().zip(&centers).enumerate().take(bins - 1) {
        w0 += count as f64;
        sum0 += count as f64 * center;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_edge = hist.edge(i + 1);
        }
    }
    best_edge
}

/// Association gates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub theta_short: f64,
    pub theta_long: f64,
    pub theta_t: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_short: DEFAULT_THETA_SHORT,
            theta_long: DEFAULT_THETA_LONG,
            theta_t: DEFAULT_THETA_T,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.theta_t < 1 {
            return Err(Error::InvalidValue("theta_t must be at least 1".into()));
        }
        for (name, v) in [("theta_short", self.theta_short), ("theta_long", self.theta_long)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidValue(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let i = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1);
            counts[i as usize] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.bins() as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.edge(i) + self.edge(i + 1))
    }

    /// `lower upper count` per line.
    pub fn to_data(&self) -> String {
        let mut out = String::from("# lower upper count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.6} {:.6} {}\n", self.edge(i), self.edge(i + 1), c));
        }
        out
    }

    /// Horizontal bar chart with an optional marker line at `threshold`.
    pub fn to_text_chart(&self, title: &str, threshold: Option<f64>, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = format!("{title}\n");
        let marker_bin = threshold.map(|t| {
            let w = (self.hi - self.lo) / self.bins() as f64;
            (((t - self.lo) / w).floor() as i64).clamp(0, self.bins() as i64 - 1) as usize
        });
        for (i, &c) in self.counts.iter().enumerate() {
            let bar = (c as f64 / max as f64 * width as f64).round() as usize;
            let mark = if Some(i) == marker_bin { " <- threshold" } else { "" };
            out.push_str(&format!(
                "{:>7.3} | {:<width$} {}{}\n",
                self.bin_center(i),
                "#".repeat(bar),
                c,
                mark,
                width = width
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn negatives(values: Vec<f64>) -> SimilaritySampleSet {
        SimilaritySampleSet::new(SampleKind::IntraFrameNegative, values).unwrap()
    }

    fn positives(values: Vec<f64>) -> SimilaritySampleSet {
        SimilaritySampleSet::new(SampleKind::IntraTrackletPositive, values).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = emb(&[1.0, 1.0, 0.0]);
        let b = emb(&[1.0, 0.0, 0.0]);
        assert!((cosine_similarity(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&b, &emb(&[0.0, 3.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
        assert!(Embedding::new(vec![f32::NAN]).is_err());
        assert!(matches!(
            cosine_similarity(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(Error::EmbeddingDimension(1, 2))
        ));
    }

    #[test]
    fn intra_frame_pair_counts() {
        let e = emb(&[1.0, 0.5]);
        let one_per_frame: Vec<Vec<&Embedding>> = vec![vec![&e]; 10];
        assert!(collect_intra_frame_similarities(one_per_frame).unwrap().is_empty());
        let three = vec![vec![&e, &e, &e]];
        assert_eq!(collect_intra_frame_similarities(three).unwrap().len(), 3);
    }

    #[test]
    fn theta_short_degenerate_and_hand_computed() {
        assert!((estimate_theta_short(&negatives(vec![0.3; 40])).unwrap() - 0.3).abs() < 1e-12);
        let mut v = vec![0.0; 20];
        v.extend(vec![0.2; 20]);
        // mean 0.1, population std 0.1
        assert!((estimate_theta_short(&negatives(v)).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn theta_short_needs_enough_samples() {
        let err = estimate_theta_short(&negatives(vec![0.1; 29])).unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
        assert!(estimate_theta_short(&positives(vec![0.1; 40])).is_err());
    }

    #[test]
    fn theta_short_clamped_to_one() {
        let mut v = vec![-1.0; 20];
        v.extend(vec![1.0; 20]);
        assert_eq!(estimate_theta_short(&negatives(v)).unwrap(), 1.0);
    }

    #[test]
    fn crossing_equal_variance_is_midpoint() {
        let neg = NormalFit { mean: 0.13, std: 0.07 };
        let pos = NormalFit { mean: 0.71, std: 0.07 };
        assert_eq!(gaussian_crossing(neg, pos), (0.13 + 0.71) / 2.0);
    }

    #[test]
    fn crossing_equal_sample_variance_is_exact_midpoint() {
        // Dyadic values give exactly representable moments.
        let n: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.125 } else { 0.375 }).collect();
        let p: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.625 } else { 0.875 }).collect();
        assert_eq!(estimate_theta_long(&negatives(n), &positives(p)).unwrap(), 0.5);
    }

    #[test]
    fn crossing_matches_density_scan() {
        let neg = NormalFit { mean: 0.2, std: 0.10 };
        let pos = NormalFit { mean: 0.8, std: 0.05 };
        let x = gaussian_crossing(neg, pos);
        // Independent scan for the sign change of the log-density gap.
        let mut prev = neg.log_density(0.2) - pos.log_density(0.2);
        let mut found = None;
        let mut t = 0.2;
        while t < 0.8 {
            t += 1e-4;
            let cur = neg.log_density(t) - pos.log_density(t);
            if prev > 0.0 && cur <= 0.0 {
                found = Some(t);
                break;
            }
            prev = cur;
        }
        assert!((x - found.unwrap()).abs() < 1e-4, "{x} vs {found:?}");
        assert!(x > 0.2 && x < 0.8);
    }

    #[test]
    fn separation_failure() {
        let err = estimate_theta_long(&negatives(vec![0.5; 40]), &positives(vec![0.4; 40])).unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
    }

    #[test]
    fn otsu_splits_two_clusters() {
        let n: Vec<f64> = (0..100).map(|i| 0.05 + 0.001 * i as f64).collect();
        let p: Vec<f64> = (0..100).map(|i| 0.85 + 0.001 * i as f64).collect();
        let t = otsu_threshold(&n, &p, 256);
        assert!(t > 0.15 && t < 0.85, "{t}");
        let viaconfig = estimate_theta_long_with(ThetaLongMode::Otsu, &negatives(n), &positives(p)).unwrap();
        assert_eq!(viaconfig, t);
    }

    #[test]
    fn histogram_counts_and_chart() {
        let h = Histogram::from_values([-1.0, -0.99, 0.0, 0.5, 1.0], -1.0, 1.0, 4);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        let chart = h.to_text_chart("t", Some(0.6), 10);
        assert!(chart.lines().nth(4).unwrap().ends_with("<- threshold"));
        assert_eq!(h.to_data().lines().count(), 5);
    }
}
