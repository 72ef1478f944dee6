//! End-to-end refinement: fuse, calibrate, track, sample triplets, merge,
//! write. Videos are independent unless thresholds are pooled, in which
//! case each estimation step waits for every video.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use log::{info, warn};
use web_time::Instant;

use crate::config::{PipelineConfig, Settings, VideoInput};
use crate::error::{Error, Result};
use crate::features::{
    collect_intra_frame_similarities, collect_intra_tracklet_similarities, estimate_theta_long_with,
    estimate_theta_short, EmbeddingStore, Histogram, NormalFit, SampleKind, SimilaritySampleSet, Thresholds,
};
use crate::fusion::{fuse_sources, Detection};
use crate::io::{self, Assignment, GtLabel, MotsResultLine};
use crate::mask::encode_rle;
use crate::merger::{build_long_matrix, cluster, relabel, ClusterOptions, FinalTrack};
use crate::short_tracker::{track_video, FlowProvider, NoFlow, TrackerOptions};
use crate::triplets::{
    plan_batches, sample_inter_tracklet, sample_intra_frame, BatchPlan, FrameKeys, LabeledTrack, Manifest,
    TripletSample,
};
use crate::types::{FrameObservations, Observation, ObservationKey, Tracklet};

/// Everything one video needs, already in memory.
pub struct VideoData {
    pub video_id: u32,
    pub name: String,
    pub sources: Vec<Vec<Detection>>,
    pub embeddings: EmbeddingStore,
    pub merge_embeddings: Option<EmbeddingStore>,
    pub flows: Box<dyn FlowProvider + Send + Sync>,
    pub train_labels: Vec<GtLabel>,
}

impl VideoData {
    pub fn new(video_id: u32, sources: Vec<Vec<Detection>>, embeddings: EmbeddingStore) -> Self {
        Self {
            video_id,
            name: format!("{video_id:04}"),
            sources,
            embeddings,
            merge_embeddings: None,
            flows: Box::new(NoFlow),
            train_labels: Vec::new(),
        }
    }
}

pub fn load_video(input: &VideoInput) -> Result<VideoData> {
    let sources = input
        .detections
        .iter()
        .enumerate()
        .map(|(i, p)| io::read_detections(p, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = io::read_embeddings(&input.embeddings)?;
    let merge_embeddings = input.merge_embeddings.as_deref().map(io::read_embeddings).transpose()?;
    let flows: Box<dyn FlowProvider + Send + Sync> = match &input.flows {
        Some(dir) => Box::new(io::FlowDir { dir: dir.clone() }),
        None => Box::new(NoFlow),
    };
    let train_labels = match &input.train_labels {
        Some(p) => io::read_gt_labels(p)?,
        None => Vec::new(),
    };
    Ok(VideoData {
        video_id: input.video_id(),
        name: input.display_name(),
        sources,
        embeddings,
        merge_embeddings,
        flows,
        train_labels,
    })
}

impl VideoInput {
    fn video_id(&self) -> u32 {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdSource {
    Estimated,
    Configured,
    Fallback,
}

impl fmt::Display for ThresholdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdSource::Estimated => "estimated",
            ThresholdSource::Configured => "configured",
            ThresholdSource::Fallback => "fallback",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdReport {
    pub thresholds: Thresholds,
    pub theta_short_source: ThresholdSource,
    pub theta_long_source: ThresholdSource,
    pub negatives: usize,
    pub positives: usize,
    pub negative_fit: Option<NormalFit>,
    pub positive_fit: Option<NormalFit>,
}

impl fmt::Display for ThresholdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.thresholds;
        writeln!(f, "theta_short {:.6} {}", t.theta_short, self.theta_short_source)?;
        writeln!(f, "theta_long {:.6} {}", t.theta_long, self.theta_long_source)?;
        writeln!(f, "theta_t {}", t.theta_t)?;
        for (name, n, fit) in [
            ("negatives", self.negatives, self.negative_fit),
            ("positives", self.positives, self.positive_fit),
        ] {
            match fit {
                Some(fit) => writeln!(f, "{name} {n} mean {:.6} std {:.6}", fit.mean, fit.std)?,
                None => writeln!(f, "{name} {n}")?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletOutput {
    pub intra_target: Vec<TripletSample>,
    pub intra_train: Vec<TripletSample>,
    pub inter: Vec<TripletSample>,
    pub batches: Option<BatchPlan>,
}

#[derive(Clone, Debug)]
pub struct VideoOutcome {
    pub video_id: u32,
    pub name: String,
    pub report: ThresholdReport,
    pub tracklets: Vec<Tracklet>,
    pub tracks: Vec<FinalTrack>,
    pub assignments: Vec<Assignment>,
    pub mots: Vec<MotsResultLine>,
    pub merge_log: String,
    pub triplets: TripletOutput,
    pub negatives: Vec<f64>,
    pub positives: Vec<f64>,
    pub warnings: Vec<String>,
    pub timings: Vec<(&'static str, Duration)>,
}

struct VideoState {
    data: VideoData,
    fused: BTreeMap<u32, Vec<Detection>>,
    frames: Vec<FrameObservations>,
    negatives: SimilaritySampleSet,
    positives: SimilaritySampleSet,
    tracklets: Vec<Tracklet>,
    warnings: Vec<String>,
    timings: Vec<(&'static str, Duration)>,
}

impl VideoState {
    fn warn(&mut self, msg: String) {
        warn!("video {}: {msg}", self.data.name);
        self.warnings.push(msg);
    }

    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        let elapsed = start.elapsed();
        info!("video {}: {stage} took {:.3}s", self.data.name, elapsed.as_secs_f64());
        self.timings.push((stage, elapsed));
        out
    }
}

/// Pairs each fused detection with its embedding, one entry per frame.
pub fn build_frames(
    fused: &BTreeMap<u32, Vec<Detection>>,
    embeddings: &EmbeddingStore,
) -> Result<Vec<FrameObservations>> {
    let mut frames = Vec::with_capacity(fused.len());
    for (&frame_id, dets) in fused {
        let observations = dets
            .iter()
            .map(|d| {
                let key = ObservationKey::new(frame_id, d.object_key);
                let embedding = embeddings.get(&key).cloned().ok_or(Error::MissingData {
                    what: "embedding",
                    frame_id,
                    object_key: d.object_key,
                })?;
                Ok(Observation {
                    object_key: d.object_key,
                    score: d.score,
                    mask: d.mask.clone(),
                    embedding,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameObservations::new(frame_id, observations));
    }
    Ok(frames)
}

fn fuse_stage(data: VideoData, settings: &Settings) -> Result<VideoState> {
    let mut state = VideoState {
        data,
        fused: BTreeMap::new(),
        frames: Vec::new(),
        negatives: SimilaritySampleSet::new(SampleKind::IntraFrameNegative, Vec::new())?,
        positives: SimilaritySampleSet::new(SampleKind::IntraTrackletPositive, Vec::new())?,
        tracklets: Vec::new(),
        warnings: Vec::new(),
        timings: Vec::new(),
    };
    state.timed("fuse", |s| {
        s.fused = fuse_sources(&s.data.sources, &settings.fusion)?;
        s.frames = build_frames(&s.fused, &s.data.embeddings)?;
        Ok(())
    })?;
    state.timed("intra-frame similarities", |s| {
        s.negatives =
            collect_intra_frame_similarities(s.frames.iter().map(|f| f.observations.iter().map(|o| &o.embedding)))?;
        Ok(())
    })?;
    Ok(state)
}

fn pooled(kind: SampleKind, sets: &[&SimilaritySampleSet]) -> Result<SimilaritySampleSet> {
    SimilaritySampleSet::new(kind, sets.iter().flat_map(|s| s.values.iter().copied()).collect())
}

/// Returns the short-term threshold and how it was obtained, plus a warning
/// when the fallback was used.
pub fn choose_theta_short(
    negatives: &SimilaritySampleSet,
    settings: &Settings,
) -> (f64, ThresholdSource, Option<String>) {
    let t = &settings.thresholds;
    if let Some(v) = t.theta_short {
        return (v, ThresholdSource::Configured, None);
    }
    match estimate_theta_short(negatives) {
        Ok(v) => (v, ThresholdSource::Estimated, None),
        Err(e) => (
            t.fallback_theta_short,
            ThresholdSource::Fallback,
            Some(format!(
                "theta_short could not be estimated ({e}); using fallback {}",
                t.fallback_theta_short
            )),
        ),
    }
}

pub fn choose_theta_long(
    negatives: &SimilaritySampleSet,
    positives: &SimilaritySampleSet,
    settings: &Settings,
) -> (f64, ThresholdSource, Option<String>) {
    let t = &settings.thresholds;
    if let Some(v) = t.theta_long {
        return (v, ThresholdSource::Configured, None);
    }
    match estimate_theta_long_with(t.theta_long_mode, negatives, positives) {
        Ok(v) => (v, ThresholdSource::Estimated, None),
        Err(e) => (
            t.fallback_theta_long,
            ThresholdSource::Fallback,
            Some(format!(
                "theta_long could not be estimated ({e}); using fallback {}",
                t.fallback_theta_long
            )),
        ),
    }
}

fn track_stage(state: &mut VideoState, theta_short: f64, settings: &Settings) -> Result<()> {
    state.timed("short-term tracking", |s| {
        let options = TrackerOptions {
            identity_flow_fallback: settings.flags.identity_flow_fallback,
            ..TrackerOptions::new(theta_short)
        };
        s.tracklets = track_video(s.data.video_id, &s.frames, s.data.flows.as_ref(), &options)?;
        Ok(())
    })?;
    state.timed("intra-tracklet similarities", |s| {
        s.positives = collect_intra_tracklet_similarities(&s.tracklets, &s.data.embeddings)?;
        Ok(())
    })
}

pub fn labeled_tracks(video_id: u32, labels: &[GtLabel]) -> Vec<LabeledTrack> {
    let mut by_id: BTreeMap<u32, Vec<ObservationKey>> = BTreeMap::new();
    for l in labels.iter().filter(|l| !l.is_false_positive) {
        by_id.entry(l.identity).or_default().push(l.key());
    }
    by_id
        .into_iter()
        .map(|(identity, mut observations)| {
            observations.sort();
            LabeledTrack {
                video_id,
                identity,
                observations,
            }
        })
        .collect()
}

fn triplet_stage(state: &mut VideoState, settings: &Settings) -> Result<TripletOutput> {
    state.timed("triplet sampling", |s| {
        let sampler = &settings.sampler;
        let mut out = TripletOutput::default();
        let keys: Vec<FrameKeys> = s
            .frames
            .iter()
            .map(|f| FrameKeys {
                video_id: s.data.video_id,
                frame_id: f.frame_id,
                object_keys: f.observations.iter().map(|o| o.object_key).collect(),
            })
            .collect();
        let train = labeled_tracks(s.data.video_id, &s.data.train_labels);
        match sample_intra_frame(&keys, &train, sampler.intra_count, sampler.seed) {
            Ok(t) => {
                out.intra_target = t.target;
                out.intra_train = t.train;
            }
            Err(e @ Error::Sampling(_)) => s.warn(format!("intra-frame triplets skipped: {e}")),
            Err(e) => return Err(e),
        }
        match sample_inter_tracklet(&s.tracklets, sampler.inter_count, sampler.seed, sampler.retry_budget) {
            Ok(t) => out.inter = t,
            Err(e @ Error::Sampling(_)) => s.warn(format!("inter-tracklet triplets skipped: {e}")),
            Err(e) => return Err(e),
        }
        if !out.intra_train.is_empty() {
            let target: Vec<TripletSample> = out.intra_target.iter().chain(&out.inter).cloned().collect();
            if !target.is_empty() {
                out.batches = Some(plan_batches(
                    &out.intra_train,
                    &target,
                    sampler.batch_size,
                    sampler.seed,
                    sampler.reuse_smaller_pool,
                )?);
            }
        }
        Ok(out)
    })
}

fn merge_stage(
    mut state: VideoState,
    report: ThresholdReport,
    triplets: TripletOutput,
    settings: &Settings,
) -> Result<VideoOutcome> {
    let thresholds = report.thresholds;
    let class_id = settings.class_id();
    let (tracks, merge_log) = state.timed("tracklet merging", |s| {
        let store = s.data.merge_embeddings.as_ref().unwrap_or(&s.data.embeddings);
        let matrix = build_long_matrix(&s.tracklets, store, thresholds.theta_t)?;
        let options = ClusterOptions {
            normalize_centroid: settings.flags.normalize_centroid,
            ..ClusterOptions::new(thresholds.theta_long, thresholds.theta_t)
        };
        let result = cluster(&matrix, &s.tracklets, store, &options)?;
        let tracks = relabel(&s.tracklets, &result.clusters, class_id * 1000 + 1)?;
        Ok((tracks, result.log_text()))
    })?;
    let (assignments, mots) = state.timed("result assembly", |s| {
        let mut assignments = Vec::new();
        let mut mots = Vec::new();
        for t in &tracks {
            for key in &t.observations {
                let det = s
                    .fused
                    .get(&key.frame_id)
                    .and_then(|ds| ds.iter().find(|d| d.object_key == key.object_key))
                    .ok_or(Error::MissingData {
                        what: "fused detection",
                        frame_id: key.frame_id,
                        object_key: key.object_key,
                    })?;
                assignments.push(Assignment {
                    frame_id: key.frame_id,
                    object_key: key.object_key,
                    track_id: t.track_id,
                });
                mots.push(MotsResultLine {
                    frame_id: key.frame_id,
                    track_id: t.track_id,
                    class_id,
                    rle: encode_rle(&det.mask),
                });
            }
        }
        assignments.sort();
        mots.sort_by_key(|l| (l.frame_id, l.track_id));
        Ok((assignments, mots))
    })?;
    Ok(VideoOutcome {
        video_id: state.data.video_id,
        name: state.data.name,
        report,
        tracklets: state.tracklets,
        tracks,
        assignments,
        mots,
        merge_log,
        triplets,
        negatives: state.negatives.values,
        positives: state.positives.values,
        warnings: state.warnings,
        timings: state.timings,
    })
}

/// Runs `f` over every item, on scoped threads where threads exist.
fn par_map<T: Send, U: Send>(items: Vec<T>, f: impl Fn(T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if cfg!(target_arch = "wasm32") || items.len() < 2 {
        return items.into_iter().map(f).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.into_iter().map(|item| scope.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("video worker panicked"))
            .collect()
    })
}

/// Runs every stage on in-memory inputs. Nothing is written.
pub fn run_videos(videos: Vec<VideoData>, settings: &Settings) -> Result<Vec<VideoOutcome>> {
    settings.validate()?;
    let pooled_mode = settings.thresholds.pooled;
    let mut states = par_map(videos, |v| fuse_stage(v, settings))?;

    let mut short: Vec<(f64, ThresholdSource)> = Vec::with_capacity(states.len());
    if pooled_mode {
        let negs = pooled(
            SampleKind::IntraFrameNegative,
            &states.iter().map(|s| &s.negatives).collect::<Vec<_>>(),
        )?;
        let (v, src, msg) = choose_theta_short(&negs, settings);
        for s in &mut states {
            if let Some(m) = &msg {
                s.warn(m.clone());
            }
            short.push((v, src));
        }
    } else {
        for s in &mut states {
            let (v, src, msg) = choose_theta_short(&s.negatives, settings);
            if let Some(m) = msg {
                s.warn(m);
            }
            short.push((v, src));
        }
    }
    for (s, (v, _)) in states.iter().zip(&short) {
        info!("video {}: theta_short {v:.4}", s.data.name);
    }

    let states = par_map(
        states.into_iter().zip(short.iter().copied()).collect(),
        |(mut s, (v, _))| {
            track_stage(&mut s, v, settings)?;
            Ok(s)
        },
    )?;

    let mut states = states;
    let mut long: Vec<(f64, ThresholdSource)> = Vec::with_capacity(states.len());
    if pooled_mode {
        let negs = pooled(
            SampleKind::IntraFrameNegative,
            &states.iter().map(|s| &s.negatives).collect::<Vec<_>>(),
        )?;
        let pos = pooled(
            SampleKind::IntraTrackletPositive,
            &states.iter().map(|s| &s.positives).collect::<Vec<_>>(),
        )?;
        let (v, src, msg) = choose_theta_long(&negs, &pos, settings);
        for s in &mut states {
            if let Some(m) = &msg {
                s.warn(m.clone());
            }
            long.push((v, src));
        }
    } else {
        for s in &mut states {
            let (v, src, msg) = choose_theta_long(&s.negatives, &s.positives, settings);
            if let Some(m) = msg {
                s.warn(m);
            }
            long.push((v, src));
        }
    }

    let work: Vec<_> = states
        .into_iter()
        .zip(short)
        .zip(long)
        .map(|((s, a), b)| (s, a, b))
        .collect();
    par_map(work, |(mut s, (ts, ts_src), (tl, tl_src))| {
        let fit = |set: &SimilaritySampleSet| (!set.is_empty()).then(|| set.fit());
        let report = ThresholdReport {
            thresholds: Thresholds {
                theta_short: ts,
                theta_long: tl,
                theta_t: settings.thresholds.theta_t,
            },
            theta_short_source: ts_src,
            theta_long_source: tl_src,
            negatives: s.negatives.len(),
            positives: s.positives.len(),
            negative_fit: fit(&s.negatives),
            positive_fit: fit(&s.positives),
        };
        info!("video {}: theta_long {tl:.4}", s.data.name);
        let triplets = triplet_stage(&mut s, settings)?;
        merge_stage(s, report, triplets, settings)
    })
}

pub const HISTOGRAM_BINS: usize = 40;

/// Writes all artifacts of one video: `<out>/<name>.txt` holds the result in
/// the MOTS text format, `<out>/<name>/` everything else.
pub fn write_outcome(outcome: &VideoOutcome, out_dir: &Path, settings: &Settings) -> Result<()> {
    let dir = out_dir.join(&outcome.name);
    let write = |name: &str, text: String| io::write_atomic(&dir.join(name), text.as_bytes());
    io::write_mots(&out_dir.join(format!("{}.txt", outcome.name)), &outcome.mots)?;
    write("assignments.txt", io::format_assignments(&outcome.assignments))?;
    write("tracklets.txt", io::format_tracklets(&outcome.tracklets))?;
    write("thresholds.txt", outcome.report.to_string())?;
    write("merge_log.txt", outcome.merge_log.clone())?;
    let seed = settings.sampler.seed;
    let manifest = |triplets: &[TripletSample]| {
        Manifest {
            seed,
            triplets: triplets.to_vec(),
        }
        .to_text()
    };
    write("triplets_intra_target.txt", manifest(&outcome.triplets.intra_target))?;
    write("triplets_inter.txt", manifest(&outcome.triplets.inter))?;
    if !outcome.triplets.intra_train.is_empty() {
        write("triplets_intra_train.txt", manifest(&outcome.triplets.intra_train))?;
    }
    if let Some(plan) = &outcome.triplets.batches {
        write("batches.txt", plan.to_manifest_text(seed))?;
    }
    if settings.flags.histograms {
        let t = &outcome.report.thresholds;
        let neg = Histogram::from_values(outcome.negatives.iter().copied(), -1.0, 1.0, HISTOGRAM_BINS);
        let pos = Histogram::from_values(outcome.positives.iter().copied(), -1.0, 1.0, HISTOGRAM_BINS);
        write("hist_intra_frame.txt", neg.to_data())?;
        write("hist_intra_tracklet.txt", pos.to_data())?;
        let mut chart = neg.to_text_chart("intra-frame similarity (theta_short)", Some(t.theta_short), 50);
        chart.push('\n');
        chart.push_str(&neg.to_text_chart("intra-frame similarity (theta_long)", Some(t.theta_long), 50));
        chart.push('\n');
        chart.push_str(&pos.to_text_chart("intra-tracklet similarity (theta_long)", Some(t.theta_long), 50));
        write("hist_chart.txt", chart)?;
    }
    if !outcome.warnings.is_empty() {
        write(
            "warnings.txt",
            outcome.warnings.iter().map(|w| format!("{w}\n")).collect(),
        )?;
    }
    Ok(())
}

/// Loads every configured video, runs all stages and writes the results.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Vec<VideoOutcome>> {
    config.validate()?;
    let settings = config.settings();
    let videos = config
        .videos
        .iter()
        .map(|v| load_video(v).map_err(|e| e.in_stage("load")))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = run_videos(videos, &settings)?;
    for o in &outcomes {
        write_outcome(o, &config.output_dir, &settings).map_err(|e| e.in_stage("write"))?;
        info!(
            "video {}: {} tracklets merged into {} tracks",
            o.name,
            o.tracklets.len(),
            o.tracks.len()
        );
    }
    Ok(outcomes)
}
