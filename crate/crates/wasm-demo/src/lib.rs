//! Browser front end: generate a synthetic scene and refine it, re-merge
//! tracklets at a chosen appearance cut, and fuse hand-placed masks.
//!
//! The logic lives in plain functions so it can be tested natively; the
//! `wasm_bindgen` wrappers only convert errors and return JSON text.

use std::collections::BTreeMap;

use mots_refine::eval::{evaluate_association, AssociationReport};
use mots_refine::features::Histogram;
use mots_refine::fusion::fuse_frame;
use mots_refine::io::Assignment;
use mots_refine::merger::{build_long_matrix, cluster, relabel, ClusterOptions};
use mots_refine::pipeline::{run_videos, VideoData, VideoOutcome};
use mots_refine::synth::{generate, Scenario, ScenarioConfig};
use mots_refine::{decode_rle, BinaryMask, Detection, FusionConfig, Settings};
use serde::Deserialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

const HIST_BINS: usize = 40;

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

fn color(track_id: u32) -> [u8; 3] {
    PALETTE[track_id as usize % PALETTE.len()]
}

fn report_json(r: &AssociationReport) -> serde_json::Value {
    json!({
        "identity_f1": r.identity_f1,
        "id_switches": r.id_switches,
        "track_purity": r.track_purity,
        "constraint_violations": r.constraint_violations,
        "num_tracks": r.num_tracks,
        "num_identities": r.num_identities,
    })
}

/// A refined synthetic scene that can be re-merged at other cuts.
pub struct Session {
    scenario: Scenario,
    outcome: VideoOutcome,
    masks: BTreeMap<(u32, u32), BinaryMask>,
    assignments: Vec<Assignment>,
    theta_long: f64,
}

impl Session {
    pub fn run(config: &ScenarioConfig) -> mots_refine::Result<Self> {
        let scenario = generate(config)?;
        let mut video = VideoData::new(config.video_id, vec![scenario.detections()], scenario.embeddings());
        video.flows = Box::new(scenario.flow_map());
        let outcome = run_videos(vec![video], &Settings::default())?.remove(0);
        let by_track: BTreeMap<(u32, u32), u32> = outcome
            .assignments
            .iter()
            .map(|a| ((a.frame_id, a.track_id), a.object_key))
            .collect();
        let mut masks = BTreeMap::new();
        for line in &outcome.mots {
            let key = by_track[&(line.frame_id, line.track_id)];
            masks.insert((line.frame_id, key), decode_rle(&line.rle)?);
        }
        Ok(Self {
            theta_long: outcome.report.thresholds.theta_long,
            assignments: outcome.assignments.clone(),
            scenario,
            outcome,
            masks,
        })
    }

    pub fn num_frames(&self) -> u32 {
        self.scenario.config.num_frames
    }

    pub fn report(&self) -> mots_refine::Result<AssociationReport> {
        evaluate_association(&self.assignments, &self.scenario.gt_labels())
    }

    pub fn summary(&self) -> mots_refine::Result<serde_json::Value> {
        let r = &self.outcome.report;
        Ok(json!({
            "theta_short": r.thresholds.theta_short,
            "theta_long_estimated": r.thresholds.theta_long,
            "theta_long": self.theta_long,
            "theta_t": r.thresholds.theta_t,
            "theta_short_source": r.theta_short_source.to_string(),
            "theta_long_source": r.theta_long_source.to_string(),
            "tracklets": self.outcome.tracklets.len(),
            "report": report_json(&self.report()?),
            "warnings": self.outcome.warnings,
            "timings_ms": self.outcome.timings.iter()
                .map(|(s, d)| json!([s, d.as_secs_f64() * 1000.0]))
                .collect::<Vec<_>>(),
        }))
    }

    pub fn histograms(&self) -> serde_json::Value {
        let h = |v: &[f64]| Histogram::from_values(v.iter().copied(), -1.0, 1.0, HIST_BINS).counts;
        json!({
            "lo": -1.0,
            "hi": 1.0,
            "negatives": h(&self.outcome.negatives),
            "positives": h(&self.outcome.positives),
        })
    }

    /// Re-clusters the short-term tracklets with `theta_long` as the cut.
    pub fn remerge(&mut self, theta_long: f64) -> mots_refine::Result<AssociationReport> {
        let store = self.scenario.embeddings();
        let theta_t = self.outcome.report.thresholds.theta_t;
        let tracklets = &self.outcome.tracklets;
        let matrix = build_long_matrix(tracklets, &store, theta_t)?;
        let result = cluster(&matrix, tracklets, &store, &ClusterOptions::new(theta_long, theta_t))?;
        let first_id = self.outcome.tracks.iter().map(|t| t.track_id).min().unwrap_or(1);
        let tracks = relabel(tracklets, &result.clusters, first_id)?;
        let mut assignments: Vec<Assignment> = tracks
            .iter()
            .flat_map(|t| {
                t.observations.iter().map(|k| Assignment {
                    frame_id: k.frame_id,
                    object_key: k.object_key,
                    track_id: t.track_id,
                })
            })
            .collect();
        assignments.sort();
        self.assignments = assignments;
        self.theta_long = theta_long;
        self.report()
    }

    /// (frame, track, ground-truth identity) for every assigned observation.
    pub fn timeline(&self) -> serde_json::Value {
        let identity: BTreeMap<(u32, u32), Option<u32>> = self
            .scenario
            .frames
            .iter()
            .flat_map(|f| {
                f.detections
                    .iter()
                    .map(move |d| ((f.frame_id, d.object_key), d.identity))
            })
            .collect();
        let rows: Vec<_> = self
            .assignments
            .iter()
            .map(|a| {
                json!([
                    a.frame_id,
                    a.track_id,
                    identity.get(&(a.frame_id, a.object_key)).copied().flatten()
                ])
            })
            .collect();
        json!({ "frames": self.num_frames(), "rows": rows })
    }

    /// RGBA pixels of one frame, each mask colored by its current track.
    pub fn render_frame(&self, frame_id: u32) -> Vec<u8> {
        let (h, w) = (self.scenario.config.frame_height, self.scenario.config.frame_width);
        let mut rgba = vec![0u8; h * w * 4];
        for px in rgba.chunks_exact_mut(4) {
            px.copy_from_slice(&[24, 24, 28, 255]);
        }
        for a in self.assignments.iter().filter(|a| a.frame_id == frame_id) {
            let Some(mask) = self.masks.get(&(a.frame_id, a.object_key)) else {
                continue;
            };
            let c = color(a.track_id);
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) {
                        let i = (y * w + x) * 4;
                        rgba[i..i + 3].copy_from_slice(&c);
                    }
                }
            }
        }
        rgba
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct BoxInput {
    pub top: i64,
    pub left: i64,
    pub height: i64,
    pub width: i64,
    pub score: f64,
}

/// Fuses rectangles on an `h` x `w` canvas. Returns, per pixel, the index
/// of the box that owns it after fusion (-1 for background), and the kept
/// box indices.
pub fn fuse_boxes(
    boxes: &[BoxInput],
    iom_threshold: f64,
    h: usize,
    w: usize,
) -> mots_refine::Result<serde_json::Value> {
    let dets = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Detection::new(
                1,
                i as u32,
                0,
                b.score,
                BinaryMask::rect(h, w, b.top, b.left, b.height, b.width),
            )
        })
        .collect::<mots_refine::Result<Vec<_>>>()?;
    let fused = fuse_frame(&dets, &FusionConfig { iom_threshold });
    let mut owner = vec![-1i32; h * w];
    for d in &fused {
        for y in 0..h {
            for x in 0..w {
                if d.mask.get(y, x) {
                    owner[y * w + x] = d.object_key as i32;
                }
            }
        }
    }
    let kept: Vec<u32> = fused.iter().map(|d| d.object_key).collect();
    Ok(json!({ "kept": kept, "owner": owner }))
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, identities: u32, misdetection_rate: f64, sigma_within: f64) -> Result<Demo, JsError> {
        let config = ScenarioConfig {
            seed: seed as u64,
            num_identities: identities as usize,
            misdetection_rate,
            sigma_within,
            occlusion_events: if identities > 1 { 3 } else { 0 },
            ..Default::default()
        };
        Session::run(&config).map(Demo).map_err(js_err)
    }

    pub fn width(&self) -> u32 {
        self.0.scenario.config.frame_width as u32
    }

    pub fn height(&self) -> u32 {
        self.0.scenario.config.frame_height as u32
    }

    pub fn frames(&self) -> u32 {
        self.0.num_frames()
    }

    pub fn summary(&self) -> Result<String, JsError> {
        self.0.summary().map(|v| v.to_string()).map_err(js_err)
    }

    pub fn histograms(&self) -> String {
        self.0.histograms().to_string()
    }

    pub fn timeline(&self) -> String {
        self.0.timeline().to_string()
    }

    pub fn remerge(&mut self, theta_long: f64) -> Result<String, JsError> {
        self.0
            .remerge(theta_long)
            .map(|r| report_json(&r).to_string())
            .map_err(js_err)
    }

    #[wasm_bindgen(js_name = renderFrame)]
    pub fn render_frame(&self, frame_id: u32) -> Vec<u8> {
        self.0.render_frame(frame_id)
    }
}

#[wasm_bindgen(js_name = fuseBoxes)]
pub fn fuse_boxes_js(boxes_json: &str, iom_threshold: f64, height: u32, width: u32) -> Result<String, JsError> {
    let boxes: Vec<BoxInput> = serde_json::from_str(boxes_json).map_err(js_err)?;
    fuse_boxes(&boxes, iom_threshold, height as usize, width as usize)
        .map(|v| v.to_string())
        .map_err(js_err)
}
