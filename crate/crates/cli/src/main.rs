use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mots_refine::config::{PipelineConfig, Settings};
use mots_refine::eval::evaluate_association;
use mots_refine::features::{
    collect_intra_frame_similarities, collect_intra_tracklet_similarities, EmbeddingStore, Histogram, ThetaLongMode,
};
use mots_refine::fusion::{fuse_sources, Detection};
use mots_refine::io::{self, Assignment, MotsResultLine};
use mots_refine::merger::{build_long_matrix, cluster, relabel, ClusterOptions};
use mots_refine::pipeline::{build_frames, choose_theta_long, choose_theta_short, labeled_tracks, HISTOGRAM_BINS};
use mots_refine::short_tracker::{track_video, FlowProvider, NoFlow, TrackerOptions};
use mots_refine::synth::{self, ScenarioConfig};
use mots_refine::triplets::{
    plan_batches, sample_inter_tracklet, sample_intra_frame, validate_manifest, FrameKeys, Manifest,
};
use mots_refine::Error;

#[derive(Parser)]
#[command(
    name = "mots-refine",
    version,
    about = "Refine multi-object tracking and segmentation results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse detections from one or more sources into disjoint masks.
    Fuse(FuseArgs),
    /// Link fused detections into tracklets.
    Track(TrackArgs),
    /// Estimate both appearance thresholds and write histograms.
    Thresholds(ThresholdsArgs),
    /// Sample triplet manifests for appearance-model fine-tuning.
    Triplets(TripletsArgs),
    /// Merge tracklets into final tracks.
    Merge(MergeArgs),
    /// Score an assignments file against ground-truth labels.
    Eval(EvalArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Run every stage as described by a configuration file.
    Pipeline(PipelineArgs),
}

/// Overrides for values that can also come from a pipeline config.
#[derive(Args, Default)]
struct SettingsArgs {
    /// Pipeline configuration to take defaults from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iom_threshold: Option<f64>,
    #[arg(long)]
    theta_t: Option<u32>,
    #[arg(long)]
    fallback_theta_short: Option<f64>,
    #[arg(long)]
    fallback_theta_long: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    theta_long_mode: Option<ThetaLongMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    intra_count: Option<usize>,
    #[arg(long)]
    inter_count: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    retry_budget: Option<usize>,
    #[arg(long)]
    reuse_smaller_pool: bool,
    #[arg(long)]
    identity_flow_fallback: bool,
    #[arg(long)]
    normalize_centroid: bool,
    #[arg(long)]
    pooled_thresholds: bool,
    #[arg(long)]
    no_histograms: bool,
}

fn parse_mode(s: &str) -> Result<ThetaLongMode, String> {
    match s {
        "gaussian_crossing" | "gaussian" => Ok(ThetaLongMode::GaussianCrossing),
        "otsu" => Ok(ThetaLongMode::Otsu),
        _ => Err(format!("unknown mode {s:?}; expected gaussian_crossing or otsu")),
    }
}

impl SettingsArgs {
    fn base_config(&self) -> anyhow::Result<Option<PipelineConfig>> {
        self.config
            .as_deref()
            .map(PipelineConfig::load)
            .transpose()
            .map_err(Into::into)
    }

    fn apply(&self, mut s: Settings) -> mots_refine::Result<Settings> {
        if let Some(v) = self.iom_threshold {
            s.fusion.iom_threshold = v;
        }
        let t = &mut s.thresholds;
        t.theta_t = self.theta_t.unwrap_or(t.theta_t);
        t.fallback_theta_short = self.fallback_theta_short.unwrap_or(t.fallback_theta_short);
        t.fallback_theta_long = self.fallback_theta_long.unwrap_or(t.fallback_theta_long);
        t.theta_long_mode = self.theta_long_mode.unwrap_or(t.theta_long_mode);
        t.pooled |= self.pooled_thresholds;
        let p = &mut s.sampler;
        p.seed = self.seed.unwrap_or(p.seed);
        p.intra_count = self.intra_count.unwrap_or(p.intra_count);
        p.inter_count = self.inter_count.unwrap_or(p.inter_count);
        p.batch_size = self.batch_size.unwrap_or(p.batch_size);
        p.retry_budget = self.retry_budget.unwrap_or(p.retry_budget);
        p.reuse_smaller_pool |= self.reuse_smaller_pool;
        s.flags.identity_flow_fallback |= self.identity_flow_fallback;
        s.flags.normalize_centroid |= self.normalize_centroid;
        if self.no_histograms {
            s.flags.histograms = false;
        }
        s.validate()?;
        Ok(s)
    }

    fn settings(&self) -> anyhow::Result<Settings> {
        let base = self.base_config()?.map(|c| c.settings()).unwrap_or_default();
        Ok(self.apply(base)?)
    }
}

#[derive(Args)]
struct FuseArgs {
    /// Detection file; repeat once per source.
    #[arg(long = "detections", required = true)]
    detections: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct InputArgs {
    /// Detection file; repeat once per source. Sources are fused first.
    #[arg(long = "detections", required = true)]
    detections: Vec<PathBuf>,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    video_id: u32,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Directory of `<f>_<f+1>.flo` files.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Appearance gate; estimated from the input when omitted.
    #[arg(long)]
    theta_short: Option<f64>,
    /// Tracklets file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct ThresholdsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    tracklets: PathBuf,
    /// Output directory for the report and histograms.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct TripletsArgs {
    /// Detection file; repeat once per source.
    #[arg(long = "detections", required_unless_present = "check")]
    detections: Vec<PathBuf>,
    #[arg(long, required_unless_present = "check")]
    tracklets: Option<PathBuf>,
    /// Ground-truth labels of a training video; enables batch planning.
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    video_id: u32,
    /// Output directory for manifests.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate an existing manifest instead of sampling.
    #[arg(long, conflicts_with = "out")]
    check: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long)]
    theta_long: f64,
    /// MOTS result file to write; assignments and merge log go next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario parameters in TOML; flags below override them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    sigma_within: Option<f64>,
    #[arg(long)]
    sigma_between: Option<f64>,
    #[arg(long)]
    misdetection_rate: Option<f64>,
    #[arg(long)]
    occlusions: Option<usize>,
    #[arg(long)]
    false_positive_rate: Option<f64>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Output directory; overrides the one in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

fn read_sources(paths: &[PathBuf]) -> mots_refine::Result<Vec<Vec<Detection>>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| io::read_detections(p, i as u32))
        .collect()
}

fn fused_input(
    input: &InputArgs,
    settings: &Settings,
) -> mots_refine::Result<(BTreeMap<u32, Vec<Detection>>, EmbeddingStore)> {
    let fused = fuse_sources(&read_sources(&input.detections)?, &settings.fusion)?;
    let store = io::read_embeddings(&input.embeddings)?;
    Ok((fused, store))
}

fn read_text(path: &Path) -> mots_refine::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_tracklets(path: &Path) -> mots_refine::Result<Vec<mots_refine::Tracklet>> {
    io::parse_tracklets(&read_text(path)?, &path.display().to_string())
}

fn write_text(path: &Path, text: &str) -> mots_refine::Result<()> {
    io::write_atomic(path, text.as_bytes())
}

fn cmd_fuse(a: FuseArgs) -> anyhow::Result<()> {
    let settings = a.settings.settings()?;
    let fused = fuse_sources(&read_sources(&a.detections)?, &settings.fusion)?;
    let all: Vec<Detection> = fused.into_values().flatten().collect();
    info!("{} detections after fusion", all.len());
    write_text(&a.out, &io::format_detections(&all, settings.class_id()))?;
    Ok(())
}

fn cmd_track(a: TrackArgs) -> anyhow::Result<()> {
    let settings = a.settings.settings()?;
    let (fused, store) = fused_input(&a.input, &settings)?;
    let frames = build_frames(&fused, &store)?;
    let theta_short = match a.theta_short {
        Some(v) => v,
        None => {
            let negs =
                collect_intra_frame_similarities(frames.iter().map(|f| f.observations.iter().map(|o| &o.embedding)))?;
            let (v, src, msg) = choose_theta_short(&negs, &settings);
            if let Some(m) = msg {
                warn!("{m}");
            }
            info!("theta_short {v:.6} ({src})");
            v
        }
    };
    let flows: Box<dyn FlowProvider> = match &a.flows {
        Some(dir) => Box::new(io::FlowDir { dir: dir.clone() }),
        None => Box::new(NoFlow),
    };
    let options = TrackerOptions {
        identity_flow_fallback: settings.flags.identity_flow_fallback,
        ..TrackerOptions::new(theta_short)
    };
    let tracklets = track_video(a.input.video_id, &frames, flows.as_ref(), &options)?;
    info!("{} tracklets", tracklets.len());
    write_text(&a.out, &io::format_tracklets(&tracklets))?;
    Ok(())
}

fn cmd_thresholds(a: ThresholdsArgs) -> anyhow::Result<()> {
    let settings = a.settings.settings()?;
    let (fused, store) = fused_input(&a.input, &settings)?;
    let frames = build_frames(&fused, &store)?;
    let tracklets = read_tracklets(&a.tracklets)?;
    let negs = collect_intra_frame_similarities(frames.iter().map(|f| f.observations.iter().map(|o| &o.embedding)))?;
    let pos = collect_intra_tracklet_similarities(&tracklets, &store)?;
    let (ts, ts_src, m1) = choose_theta_short(&negs, &settings);
    let (tl, tl_src, m2) = choose_theta_long(&negs, &pos, &settings);
    for m in [m1, m2].into_iter().flatten() {
        warn!("{m}");
    }
    let report = format!(
        "theta_short {ts:.6} {ts_src}\ntheta_long {tl:.6} {tl_src}\ntheta_t {}\nnegatives {}\npositives {}\n",
        settings.thresholds.theta_t,
        negs.len(),
        pos.len()
    );
    print!("{report}");
    write_text(&a.out.join("thresholds.txt"), &report)?;
    let hn = Histogram::from_values(negs.values.iter().copied(), -1.0, 1.0, HISTOGRAM_BINS);
    let hp = Histogram::from_values(pos.values.iter().copied(), -1.0, 1.0, HISTOGRAM_BINS);
    write_text(&a.out.join("hist_intra_frame.txt"), &hn.to_data())?;
    write_text(&a.out.join("hist_intra_tracklet.txt"), &hp.to_data())?;
    let chart = format!(
        "{}\n{}",
        hn.to_text_chart("intra-frame similarity (theta_short)", Some(ts), 50),
        hp.to_text_chart("intra-tracklet similarity (theta_long)", Some(tl), 50)
    );
    write_text(&a.out.join("hist_chart.txt"), &chart)?;
    Ok(())
}

fn cmd_triplets(a: TripletsArgs) -> anyhow::Result<()> {
    if let Some(path) = &a.check {
        let text = read_text(path)?;
        let violations = validate_manifest(&text, &path.display().to_string())?;
        for v in &violations {
            println!("triplet {}: {:?}", v.index, v.kind);
        }
        if !violations.is_empty() {
            return Err(Error::InvalidValue(format!("{} constraint violations", violations.len())).into());
        }
        println!("manifest ok");
        return Ok(());
    }
    let (Some(out), Some(tracklets)) = (&a.out, &a.tracklets) else {
        bail!(Error::Config("sampling needs --out and --tracklets".into()));
    };
    let settings = a.settings.settings()?;
    let sampler = settings.sampler;
    let fused = fuse_sources(&read_sources(&a.detections)?, &settings.fusion)?;
    let tracklets = read_tracklets(tracklets)?;
    let keys: Vec<FrameKeys> = fused
        .iter()
        .map(|(&frame_id, dets)| FrameKeys {
            video_id: a.video_id,
            frame_id,
            object_keys: dets.iter().map(|d| d.object_key).collect(),
        })
        .collect();
    let train = match &a.train_labels {
        Some(p) => labeled_tracks(a.video_id, &io::read_gt_labels(p)?),
        None => Vec::new(),
    };
    let intra = sample_intra_frame(&keys, &train, sampler.intra_count, sampler.seed)?;
    let inter = sample_inter_tracklet(&tracklets, sampler.inter_count, sampler.seed, sampler.retry_budget)?;
    let manifest = |triplets: &[_]| {
        Manifest {
            seed: sampler.seed,
            triplets: triplets.to_vec(),
        }
        .to_text()
    };
    write_text(&out.join("triplets_intra_target.txt"), &manifest(&intra.target))?;
    write_text(&out.join("triplets_inter.txt"), &manifest(&inter))?;
    if !intra.train.is_empty() {
        write_text(&out.join("triplets_intra_train.txt"), &manifest(&intra.train))?;
        let target: Vec<_> = intra.target.iter().chain(&inter).cloned().collect();
        let plan = plan_batches(
            &intra.train,
            &target,
            sampler.batch_size,
            sampler.seed,
            sampler.reuse_smaller_pool,
        )?;
        info!("{} batches of {}", plan.batches.len(), plan.batch_size);
        write_text(&out.join("batches.txt"), &plan.to_manifest_text(sampler.seed))?;
    }
    // every manifest is checked before the command reports success
    for name in ["triplets_intra_target.txt", "triplets_inter.txt"] {
        let text = read_text(&out.join(name))?;
        let violations = validate_manifest(&text, name)?;
        if !violations.is_empty() {
            return Err(Error::Sampling(format!("{name}: {} constraint violations", violations.len())).into());
        }
    }
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> anyhow::Result<()> {
    let settings = a.settings.settings()?;
    if !(-1.0..=1.0).contains(&a.theta_long) {
        bail!(Error::Config(format!("--theta-long {} outside [-1, 1]", a.theta_long)));
    }
    let (fused, store) = fused_input(&a.input, &settings)?;
    let tracklets = read_tracklets(&a.tracklets)?;
    let theta_t = settings.thresholds.theta_t;
    let matrix = build_long_matrix(&tracklets, &store, theta_t)?;
    let options = ClusterOptions {
        normalize_centroid: settings.flags.normalize_centroid,
        ..ClusterOptions::new(a.theta_long, theta_t)
    };
    let result = cluster(&matrix, &tracklets, &store, &options)?;
    let class_id = settings.class_id();
    let tracks = relabel(&tracklets, &result.clusters, class_id * 1000 + 1)?;
    let mut lines = Vec::new();
    let mut assignments = Vec::new();
    for t in &tracks {
        for k in &t.observations {
            let det = fused
                .get(&k.frame_id)
                .and_then(|ds| ds.iter().find(|d| d.object_key == k.object_key))
                .ok_or(Error::MissingData {
                    what: "fused detection",
                    frame_id: k.frame_id,
                    object_key: k.object_key,
                })?;
            lines.push(MotsResultLine {
                frame_id: k.frame_id,
                track_id: t.track_id,
                class_id,
                rle: mots_refine::encode_rle(&det.mask),
            });
            assignments.push(Assignment {
                frame_id: k.frame_id,
                object_key: k.object_key,
                track_id: t.track_id,
            });
        }
    }
    assignments.sort();
    info!("{} tracklets merged into {} tracks", tracklets.len(), tracks.len());
    io::write_mots(&a.out, &lines)?;
    write_text(
        &a.out.with_extension("assignments.txt"),
        &io::format_assignments(&assignments),
    )?;
    write_text(&a.out.with_extension("merge_log.txt"), &result.log_text())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let text = read_text(&a.assignments)?;
    let assignments = io::parse_assignments(&text, &a.assignments.display().to_string())?;
    let gt = io::read_gt_labels(&a.gt)?;
    let report = evaluate_association(&assignments, &gt)?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_text(out, &format!("{report}\n"))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str::<ScenarioConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ScenarioConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.num_identities = a.identities.unwrap_or(cfg.num_identities);
    cfg.num_frames = a.frames.unwrap_or(cfg.num_frames);
    cfg.frame_height = a.height.unwrap_or(cfg.frame_height);
    cfg.frame_width = a.width.unwrap_or(cfg.frame_width);
    cfg.embedding_dim = a.embedding_dim.unwrap_or(cfg.embedding_dim);
    cfg.sigma_within = a.sigma_within.unwrap_or(cfg.sigma_within);
    cfg.sigma_between = a.sigma_between.unwrap_or(cfg.sigma_between);
    cfg.misdetection_rate = a.misdetection_rate.unwrap_or(cfg.misdetection_rate);
    cfg.occlusion_events = a.occlusions.unwrap_or(cfg.occlusion_events);
    cfg.false_positive_rate = a.false_positive_rate.unwrap_or(cfg.false_positive_rate);
    let scenario = synth::generate(&cfg)?;
    synth::export(&scenario, &a.out)?;
    info!(
        "{} frames, {} detections written to {}",
        scenario.frames.len(),
        scenario.frames.iter().map(|f| f.detections.len()).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> anyhow::Result<()> {
    let Some(mut config) = a.settings.base_config()? else {
        bail!(Error::Config("pipeline needs --config".into()));
    };
    let settings = a.settings.apply(config.settings())?;
    config = PipelineConfig::new(a.out.unwrap_or(config.output_dir.clone()), config.videos, settings);
    let outcomes = mots_refine::run_pipeline(&config)?;
    for o in &outcomes {
        println!(
            "{}: theta_short {:.4} ({}), theta_long {:.4} ({}), {} tracklets, {} tracks",
            o.name,
            o.report.thresholds.theta_short,
            o.report.theta_short_source,
            o.report.thresholds.theta_long,
            o.report.theta_long_source,
            o.tracklets.len(),
            o.tracks.len()
        );
    }
    Ok(())
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        Some(_) => EXIT_STAGE,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_STAGE,
        None => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fuse(a) => cmd_fuse(a),
        Command::Track(a) => cmd_track(a),
        Command::Thresholds(a) => cmd_thresholds(a),
        Command::Triplets(a) => cmd_triplets(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
