//! Deterministic synthetic scenes with full ground truth.
//!
//! Each identity lives in its own horizontal lane and moves on a smooth
//! sinusoidal path, so ground-truth masks of different identities are
//! disjoint except during occlusion events, when the back identity is pulled
//! towards the front one and the masks overlap. Object centres are rounded
//! to whole pixels and the exported flow is the exact per-pixel displacement
//! of the visible identity, so warping a ground-truth mask reproduces the
//! next frame's mask.
//!
//! Appearance: identity means are `sqrt(s) * c + sqrt(1 - s) * u_k` with
//! orthonormal `c, u_1..u_K`, so every pair of means has cosine exactly
//! `s = 1 - sigma_between` (clamped to `[0, 0.99]`). Each observation adds
//! isotropic Gaussian noise with per-coordinate deviation `sigma_within`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Embedding, EmbeddingStore};
use crate::fusion::Detection;
use crate::io::{self, GtLabel, PEDESTRIAN_CLASS};
use crate::mask::{BinaryMask, FlowField};
use crate::types::ObservationKey;

const MIN_LANE_HEIGHT: usize = 8;
const MIN_FRAME_WIDTH: usize = 32;
const OCCLUSION_LENGTH: u32 = 24;
const OCCLUSION_PEAK: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_identities: usize,
    pub num_frames: u32,
    pub frame_height: usize,
    pub frame_width: usize,
    pub embedding_dim: usize,
    /// Per-coordinate noise added to the identity mean embedding.
    pub sigma_within: f64,
    /// Cosine distance between identity mean embeddings.
    pub sigma_between: f64,
    pub misdetection_rate: f64,
    pub occlusion_events: usize,
    /// Expected number of false-positive blobs per frame.
    pub false_positive_rate: f64,
    pub video_id: u32,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_identities: 5,
            num_frames: 200,
            frame_height: 120,
            frame_width: 160,
            embedding_dim: 32,
            sigma_within: 0.05,
            sigma_between: 1.0,
            misdetection_rate: 0.1,
            occlusion_events: 3,
            false_positive_rate: 0.0,
            video_id: 0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("misdetection_rate", self.misdetection_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must be in [0, 1]")));
            }
        }
        if self.num_frames == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("num_frames and embedding_dim must be positive".into()));
        }
        if self.sigma_within < 0.0 || self.sigma_between < 0.0 {
            return Err(Error::Config("similarity spreads must be non-negative".into()));
        }
        if self.num_identities > 0 && self.frame_height / self.num_identities < MIN_LANE_HEIGHT {
            return Err(Error::Config(format!(
                "{} identities do not fit in a frame of height {} (need {MIN_LANE_HEIGHT} rows each)",
                self.num_identities, self.frame_height
            )));
        }
        if self.frame_width < MIN_FRAME_WIDTH {
            return Err(Error::Config(format!("frame width must be at least {MIN_FRAME_WIDTH}")));
        }
        if self.embedding_dim < self.num_identities + 1 {
            return Err(Error::Config(format!(
                "embedding_dim {} must exceed num_identities {}",
                self.embedding_dim, self.num_identities
            )));
        }
        if self.occlusion_events > 0 && self.num_identities < 2 {
            return Err(Error::Config("occlusion events need at least two identities".into()));
        }
        Ok(())
    }

    /// Cosine similarity between identity means.
    pub fn mean_similarity(&self) -> f64 {
        (1.0 - self.sigma_between).clamp(0.0, 0.99)
    }

    /// Expected cosine between two observations of one identity.
    pub fn expected_within_similarity(&self) -> f64 {
        1.0 / (1.0 + self.embedding_dim as f64 * self.sigma_within * self.sigma_within)
    }

    /// Expected cosine between observations of two different identities.
    pub fn expected_between_similarity(&self) -> f64 {
        self.mean_similarity() * self.expected_within_similarity()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectShape {
    pub kind: ShapeKind,
    pub half_h: i64,
    pub half_w: i64,
}

impl ObjectShape {
    pub fn rasterize(&self, height: usize, width: usize, cy: i64, cx: i64) -> BinaryMask {
        let mut m = BinaryMask::empty(height, width);
        let (ry, rx) = (self.half_h as f64 + 0.5, self.half_w as f64 + 0.5);
        for y in (cy - self.half_h).max(0)..=(cy + self.half_h).min(height as i64 - 1) {
            for x in (cx - self.half_w).max(0)..=(cx + self.half_w).min(width as i64 - 1) {
                let inside = match self.kind {
                    ShapeKind::Rect => true,
                    ShapeKind::Ellipse => {
                        let (dy, dx) = ((y - cy) as f64 / ry, (x - cx) as f64 / rx);
                        dy * dy + dx * dx <= 1.0
                    }
                };
                if inside {
                    m.set(y as usize, x as usize, true);
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionEvent {
    pub front: u32,
    pub back: u32,
    pub start: u32,
    pub end: u32,
}

/// Ground-truth state of one identity in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtState {
    pub frame_id: u32,
    pub cy: i64,
    pub cx: i64,
    pub detected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub identity: u32,
    pub shape: ObjectShape,
    pub states: Vec<GtState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDetection {
    pub object_key: u32,
    /// `None` for false positives.
    pub identity: Option<u32>,
    pub score: f64,
    pub mask: BinaryMask,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub frame_id: u32,
    pub detections: Vec<SynthDetection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub tracks: Vec<GtTrack>,
    pub frames: Vec<SynthFrame>,
    /// `flows[i]` maps frame `i + 1` onto frame `i + 2`.
    pub flows: Vec<FlowField>,
    pub occlusions: Vec<OcclusionEvent>,
    pub identity_means: Vec<Vec<f64>>,
}

fn orthonormal_basis(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn triangle(t: u32, start: u32, end: u32) -> f64 {
    if t < start || t > end || end == start {
        return 0.0;
    }
    let mid = (start + end) as f64 / 2.0;
    let half = (end - start) as f64 / 2.0;
    1.0 - ((t as f64 - mid).abs() / half)
}

pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w) = (config.frame_height, config.frame_width);
    let k = config.num_identities;
    let frames_n = config.num_frames;

    // appearance
    let basis = orthonormal_basis(k + 1, config.embedding_dim, &mut rng);
    let s = config.mean_similarity();
    let identity_means: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            basis[0]
                .iter()
                .zip(&basis[i + 1])
                .map(|(c, u)| s.sqrt() * c + (1.0 - s).sqrt() * u)
                .collect()
        })
        .collect();

    // motion
    let lane_h = h.checked_div(k).unwrap_or(h);
    let half_h = ((lane_h as f64 * 0.35).floor() as i64).max(2);
    struct Path {
        cx: f64,
        ax: f64,
        px: f64,
        phx: f64,
        cy: f64,
        ay: f64,
        py: f64,
        phy: f64,
    }
    let mut shapes = Vec::with_capacity(k);
    let mut paths = Vec::with_capacity(k);
    for i in 0..k {
        let max_half_w = ((w as i64) / 8).max(3);
        let half_w = rng.random_range(3.max(max_half_w / 2)..=max_half_w);
        let kind = if i % 2 == 0 {
            ShapeKind::Rect
        } else {
            ShapeKind::Ellipse
        };
        shapes.push(ObjectShape { kind, half_h, half_w });
        let room_x = (w as f64 / 2.0 - half_w as f64 - 2.0).max(0.0);
        let room_y = ((lane_h as f64 / 2.0) - half_h as f64 - 1.0).max(0.0);
        paths.push(Path {
            cx: w as f64 / 2.0,
            ax: rng.random_range(0.3..1.0) * room_x,
            px: rng.random_range(60.0..140.0),
            phx: rng.random_range(0.0..2.0 * PI),
            cy: (i * lane_h) as f64 + lane_h as f64 / 2.0,
            ay: 0.5 * room_y,
            py: rng.random_range(40.0..90.0),
            phy: rng.random_range(0.0..2.0 * PI),
        });
    }

    let mut occlusions = Vec::with_capacity(config.occlusion_events);
    for _ in 0..config.occlusion_events {
        let front = rng.random_range(0..k as u32 - 1);
        let len = OCCLUSION_LENGTH.min(frames_n.saturating_sub(1));
        let start = rng.random_range(1..=frames_n - len);
        occlusions.push(OcclusionEvent {
            front,
            back: front + 1,
            start,
            end: start + len,
        });
    }

    // rounded centres per identity and frame
    let mut centres = vec![Vec::with_capacity(frames_n as usize); k];
    for t in 1..=frames_n {
        let raw: Vec<(f64, f64)> = paths
            .iter()
            .map(|p| {
                let tf = t as f64;
                (
                    p.cy + p.ay * (2.0 * PI * tf / p.py + p.phy).sin(),
                    p.cx + p.ax * (2.0 * PI * tf / p.px + p.phx).sin(),
                )
            })
            .collect();
        let mut pos = raw.clone();
        for ev in &occlusions {
            let beta = OCCLUSION_PEAK * triangle(t, ev.start, ev.end);
            if beta > 0.0 {
                let (f, b) = (raw[ev.front as usize], pos[ev.back as usize]);
                pos[ev.back as usize] = ((1.0 - beta) * b.0 + beta * f.0, (1.0 - beta) * b.1 + beta * f.1);
            }
        }
        for (i, (cy, cx)) in pos.into_iter().enumerate() {
            centres[i].push((cy.round() as i64, cx.round() as i64));
        }
    }

    // detections
    let within = Normal::new(0.0, config.sigma_within).map_err(|e| Error::Config(e.to_string()))?;
    let score_jitter = Normal::new(0.0, 0.01).expect("valid");
    let mut tracks: Vec<GtTrack> = (0..k)
        .map(|i| GtTrack {
            identity: i as u32 + 1,
            shape: shapes[i],
            states: Vec::with_capacity(frames_n as usize),
        })
        .collect();
    let mut frames = Vec::with_capacity(frames_n as usize);
    for t in 1..=frames_n {
        let mut dets: Vec<(Option<u32>, f64, BinaryMask, Embedding)> = Vec::new();
        for i in 0..k {
            let (cy, cx) = centres[i][(t - 1) as usize];
            let detected = rng.random::<f64>() >= config.misdetection_rate;
            tracks[i].states.push(GtState {
                frame_id: t,
                cy,
                cx,
                detected,
            });
            if !detected {
                continue;
            }
            let base = 0.9 - 0.3 * i as f64 / k as f64;
            let score = (base + score_jitter.sample(&mut rng)).clamp(0.05, 1.0);
            let emb: Vec<f32> = identity_means[i]
                .iter()
                .map(|m| (m + within.sample(&mut rng)) as f32)
                .collect();
            let mask = shapes[i].rasterize(h, w, cy, cx);
            dets.push((Some(i as u32 + 1), score, mask, Embedding::new(emb)?));
        }
        if config.false_positive_rate > 0.0 && rng.random::<f64>() < config.false_positive_rate {
            let (cy, cx) = (rng.random_range(3..h as i64 - 3), rng.random_range(3..w as i64 - 3));
            let shape = ObjectShape {
                kind: ShapeKind::Rect,
                half_h: 2,
                half_w: 2,
            };
            let emb = orthonormal_basis(1, config.embedding_dim, &mut rng).remove(0);
            let score = rng.random_range(0.2..0.5);
            dets.push((
                None,
                score,
                shape.rasterize(h, w, cy, cx),
                Embedding::new(emb.into_iter().map(|v| v as f32).collect())?,
            ));
        }
        let mut keys: Vec<u32> = (1..=dets.len() as u32).collect();
        keys.shuffle(&mut rng);
        let mut detections: Vec<SynthDetection> = dets
            .into_iter()
            .zip(keys)
            .map(|((identity, score, mask, embedding), object_key)| SynthDetection {
                object_key,
                identity,
                score,
                mask,
                embedding,
            })
            .collect();
        detections.sort_by_key(|d| d.object_key);
        frames.push(SynthFrame {
            frame_id: t,
            detections,
        });
    }

    // flows: back identities painted first so the front one wins
    let mut flows = Vec::with_capacity(frames_n.saturating_sub(1) as usize);
    for t in 1..frames_n {
        let mut flow = FlowField::zeros(h, w);
        for i in (0..k).rev() {
            let (cy0, cx0) = centres[i][(t - 1) as usize];
            let (cy1, cx1) = centres[i][t as usize];
            let (dy, dx) = ((cy1 - cy0) as f32, (cx1 - cx0) as f32);
            let m = shapes[i].rasterize(h, w, cy0, cx0);
            for x in 0..w {
                for y in 0..h {
                    if m.get(y, x) {
                        flow.set(y, x, dx, dy);
                    }
                }
            }
        }
        flows.push(flow);
    }

    Ok(Scenario {
        config: config.clone(),
        tracks,
        frames,
        flows,
        occlusions,
        identity_means,
    })
}

impl Scenario {
    pub fn gt_mask(&self, identity: u32, frame_id: u32) -> Option<BinaryMask> {
        let track = self.tracks.iter().find(|t| t.identity == identity)?;
        let st = track.states.iter().find(|s| s.frame_id == frame_id)?;
        Some(
            track
                .shape
                .rasterize(self.config.frame_height, self.config.frame_width, st.cy, st.cx),
        )
    }

    pub fn in_occlusion(&self, identity: u32, frame_id: u32) -> bool {
        self.occlusions
            .iter()
            .any(|e| (e.front + 1 == identity || e.back + 1 == identity) && (e.start..=e.end).contains(&frame_id))
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.detections.iter().map(move |d| Detection {
                    frame_id: f.frame_id,
                    object_key: d.object_key,
                    source_id: 0,
                    score: d.score,
                    mask: d.mask.clone(),
                })
            })
            .collect()
    }

    pub fn embeddings(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(self.config.embedding_dim);
        for f in &self.frames {
            for d in &f.detections {
                store
                    .insert(ObservationKey::new(f.frame_id, d.object_key), d.embedding.clone())
                    .expect("uniform dimension");
            }
        }
        store
    }

    pub fn flow_map(&self) -> BTreeMap<u32, FlowField> {
        self.flows
            .iter()
            .enumerate()
            .map(|(i, f)| (i as u32 + 1, f.clone()))
            .collect()
    }

    pub fn gt_labels(&self) -> Vec<GtLabel> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.detections.iter().map(move |d| GtLabel {
                    frame_id: f.frame_id,
                    object_key: d.object_key,
                    identity: d.identity.unwrap_or(0),
                    is_false_positive: d.identity.is_none(),
                })
            })
            .collect()
    }

    /// Identities with at least one detection.
    pub fn detected_identities(&self) -> usize {
        self.tracks
            .iter()
            .filter(|t| t.states.iter().any(|s| s.detected))
            .count()
    }
}

pub const DETECTIONS_FILE: &str = "detections.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.remb";
pub const FLOWS_DIR: &str = "flows";
pub const GT_LABELS_FILE: &str = "gt_labels.txt";
pub const PIPELINE_CONFIG_FILE: &str = "pipeline.toml";

/// Writes detections, embeddings, flows, ground-truth labels and a
/// ready-to-run pipeline configuration into `out_dir`.
pub fn export(scenario: &Scenario, out_dir: &Path) -> Result<()> {
    io::write_atomic(
        &out_dir.join(DETECTIONS_FILE),
        io::format_detections(&scenario.detections(), PEDESTRIAN_CLASS).as_bytes(),
    )?;
    io::write_embeddings(&out_dir.join(EMBEDDINGS_FILE), &scenario.embeddings())?;
    let flow_dir = out_dir.join(FLOWS_DIR);
    for (i, f) in scenario.flows.iter().enumerate() {
        io::write_flow(&flow_dir.join(io::flow_file_name(i as u32 + 1)), f)?;
    }
    io::write_atomic(
        &out_dir.join(GT_LABELS_FILE),
        io::format_gt_labels(&scenario.gt_labels()).as_bytes(),
    )?;
    let cfg = format!(
        "output_dir = \"results\"\n\n[[videos]]\nid = {}\nname = \"synth\"\ndetections = [\"{DETECTIONS_FILE}\"]\nembeddings = \"{EMBEDDINGS_FILE}\"\nflows = \"{FLOWS_DIR}\"\n\n[sampler]\nseed = {}\n",
        scenario.config.video_id, scenario.config.seed
    );
    io::write_atomic(&out_dir.join(PIPELINE_CONFIG_FILE), cfg.as_bytes())
}

/// Everything `export` wrote, read back through the regular readers.
#[derive(Clone, Debug)]
pub struct ExportedScenario {
    pub detections: Vec<Detection>,
    pub embeddings: EmbeddingStore,
    pub flows: BTreeMap<u32, FlowField>,
    pub labels: Vec<GtLabel>,
}

pub fn load_exported(dir: &Path) -> Result<ExportedScenario> {
    let detections = io::read_detections(&dir.join(DETECTIONS_FILE), 0)?;
    let embeddings = io::read_embeddings(&dir.join(EMBEDDINGS_FILE))?;
    let labels = io::read_gt_labels(&dir.join(GT_LABELS_FILE))?;
    let mut flows = BTreeMap::new();
    let frames: Vec<u32> = detections.iter().map(|d| d.frame_id).collect();
    let last = frames.iter().copied().max().unwrap_or(0);
    for f in 1..last {
        let p = dir.join(FLOWS_DIR).join(io::flow_file_name(f));
        if p.exists() {
            flows.insert(f, io::read_flow(&p)?);
        }
    }
    Ok(ExportedScenario {
        detections,
        embeddings,
        flows,
        labels,
    })
}
