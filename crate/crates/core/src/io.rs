//! Text and binary file formats.
//!
//! | file               | line / layout                                          |
//! |--------------------|--------------------------------------------------------|
//! | MOTS results       | `frame track_id class height width rle`                |
//! | detections         | `frame object_key class score height width rle`        |
//! | embeddings (bin)   | `REMB`, u16 version, u32 dim, u64 count, records of    |
//! |                    | u32 frame, u32 key, dim x f32 (all little-endian)      |
//! | embeddings (text)  | `frame object_key v0 v1 ...`                           |
//! | flow (bin)         | `RFLW`, u16 version, u32 height, u32 width, row-major  |
//! |                    | (dx, dy) f32 pairs; named `<frame>_<frame+1>.flo`       |
//! | ground truth       | `frame object_key identity is_false_positive`          |
//! | tracklets          | `video tracklet_id frame object_key`                   |
//! | assignments        | `frame object_key track_id`                            |
//!
//! Blank lines and lines starting with `#` are ignored by every text reader.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{Embedding, EmbeddingStore};
use crate::fusion::Detection;
use crate::mask::{decode_rle, encode_rle, FlowField, RleMask};
use crate::types::{ObservationKey, Tracklet};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"REMB";
pub const FLOW_MAGIC: &[u8; 4] = b"RFLW";
pub const FORMAT_VERSION: u16 = 1;
pub const PEDESTRIAN_CLASS: u32 = 2;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn field<T: std::str::FromStr>(fields: &[&str], i: usize, name: &str, origin: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    fields[i]
        .parse()
        .map_err(|e| Error::parse(origin, line, format!("bad {name} {:?}: {e}", fields[i])))
}

fn expect_fields(fields: &[&str], n: usize, origin: &str, line: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::parse(
            origin,
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotsResultLine {
    pub frame_id: u32,
    pub track_id: u32,
    pub class_id: u32,
    pub rle: RleMask,
}

pub fn parse_mots(text: &str, origin: &str) -> Result<Vec<MotsResultLine>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, f) in content_lines(text) {
        expect_fields(&f, 6, origin, line)?;
        let rec = MotsResultLine {
            frame_id: field(&f, 0, "frame", origin, line)?,
            track_id: field(&f, 1, "track id", origin, line)?,
            class_id: field(&f, 2, "class", origin, line)?,
            rle: RleMask::new(
                field(&f, 3, "height", origin, line)?,
                field(&f, 4, "width", origin, line)?,
                f[5],
            ),
        };
        if !seen.insert((rec.frame_id, rec.track_id)) {
            return Err(Error::parse(
                origin,
                line,
                format!("duplicate track {} in frame {}", rec.track_id, rec.frame_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Renders lines sorted by frame, then track id.
pub fn format_mots(lines: &[MotsResultLine]) -> String {
    let mut sorted: Vec<&MotsResultLine> = lines.iter().collect();
    sorted.sort_by_key(|l| (l.frame_id, l.track_id));
    sorted
        .iter()
        .map(|l| {
            format!(
                "{} {} {} {} {} {}\n",
                l.frame_id, l.track_id, l.class_id, l.rle.height, l.rle.width, l.rle.counts
            )
        })
        .collect()
}

pub fn read_mots(path: &Path) -> Result<Vec<MotsResultLine>> {
    parse_mots(&read_text(path)?, &path.display().to_string())
}

pub fn write_mots(path: &Path, lines: &[MotsResultLine]) -> Result<()> {
    write_atomic(path, format_mots(lines).as_bytes())
}

pub fn parse_detections(text: &str, source_id: u32, origin: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (line, f) in content_lines(text) {
        expect_fields(&f, 7, origin, line)?;
        let rle = RleMask::new(
            field(&f, 4, "height", origin, line)?,
            field(&f, 5, "width", origin, line)?,
            f[6],
        );
        let mask = decode_rle(&rle).map_err(|e| Error::parse(origin, line, e.to_string()))?;
        let d = Detection::new(
            field(&f, 0, "frame", origin, line)?,
            field(&f, 1, "object key", origin, line)?,
            source_id,
            field(&f, 3, "score", origin, line)?,
            mask,
        )
        .map_err(|e| Error::parse(origin, line, e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

pub fn format_detections(detections: &[Detection], class_id: u32) -> String {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by_key(|d| (d.frame_id, d.object_key));
    sorted
        .iter()
        .map(|d| {
            let rle = encode_rle(&d.mask);
            format!(
                "{} {} {} {} {} {} {}\n",
                d.frame_id, d.object_key, class_id, d.score, rle.height, rle.width, rle.counts
            )
        })
        .collect()
}

pub fn read_detections(path: &Path, source_id: u32) -> Result<Vec<Detection>> {
    parse_detections(&read_text(path)?, source_id, &path.display().to_string())
}

pub fn encode_embeddings(store: &EmbeddingStore) -> Vec<u8> {
    let dim = store.dim();
    let mut out = Vec::with_capacity(18 + store.len() * (8 + 4 * dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (k, e) in store.iter() {
        out.extend_from_slice(&k.frame_id.to_le_bytes());
        out.extend_from_slice(&k.object_key.to_le_bytes());
        for v in e.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::parse(self.origin, 0, format!("unexpected end of data at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

pub fn decode_embeddings(bytes: &[u8], origin: &str) -> Result<EmbeddingStore> {
    let mut r = Reader { bytes, pos: 0, origin };
    if &r.take::<4>()? != EMBEDDING_MAGIC {
        return Err(Error::parse(origin, 0, "not an embedding file (bad magic)"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            origin,
            0,
            format!("unsupported embedding version {version}"),
        ));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut store = EmbeddingStore::new(dim);
    for _ in 0..count {
        let key = ObservationKey::new(r.u32()?, r.u32()?);
        let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let e = Embedding::new(values).map_err(|e| Error::parse(origin, 0, format!("record {key}: {e}")))?;
        store.insert(key, e)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(origin, 0, "trailing bytes after embedding records"));
    }
    Ok(store)
}

pub fn parse_embeddings_text(text: &str, origin: &str) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(0);
    for (line, f) in content_lines(text) {
        if f.len() < 3 {
            return Err(Error::parse(origin, line, "expected frame, key and at least one value"));
        }
        let key = ObservationKey::new(field(&f, 0, "frame", origin, line)?, field(&f, 1, "key", origin, line)?);
        let values = (2..f.len())
            .map(|i| field::<f32>(&f, i, "value", origin, line))
            .collect::<Result<Vec<_>>>()?;
        let e = Embedding::new(values).map_err(|e| Error::parse(origin, line, e.to_string()))?;
        store
            .insert(key, e)
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
    }
    Ok(store)
}

pub fn format_embeddings_text(store: &EmbeddingStore) -> String {
    let mut out = String::new();
    for (k, e) in store.iter() {
        out.push_str(&format!("{} {}", k.frame_id, k.object_key));
        for v in e.values() {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

/// Reads either the binary or the text embedding format.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if bytes.starts_with(EMBEDDING_MAGIC) {
        decode_embeddings(&bytes, &origin)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(&origin, 0, "neither binary nor UTF-8 text"))?;
        parse_embeddings_text(&text, &origin)
    }
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    write_atomic(path, &encode_embeddings(store))
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + flow.dx().len() * 8);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for (dx, dy) in flow.dx().iter().zip(flow.dy()) {
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8], origin: &str) -> Result<FlowField> {
    let mut r = Reader { bytes, pos: 0, origin };
    if &r.take::<4>()? != FLOW_MAGIC {
        return Err(Error::parse(origin, 0, "not a flow file (bad magic)"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(origin, 0, format!("unsupported flow version {version}")));
    }
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let mut dx = Vec::with_capacity(h * w);
    let mut dy = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        dx.push(r.f32()?);
        dy.push(r.f32()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(origin, 0, "trailing bytes after flow data"));
    }
    FlowField::from_parts(h, w, dx, dy).map_err(|e| Error::parse(origin, 0, e.to_string()))
}

pub fn flow_file_name(from_frame: u32) -> String {
    format!("{}_{}.flo", from_frame, from_frame + 1)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes, &path.display().to_string())
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flow(flow))
}

/// Lazily loads `<dir>/<frame>_<frame+1>.flo`; absent files yield `None`.
pub struct FlowDir {
    pub dir: PathBuf,
}

impl crate::short_tracker::FlowProvider for FlowDir {
    fn flow(&self, from_frame: u32) -> Result<Option<std::borrow::Cow<'_, FlowField>>> {
        let path = self.dir.join(flow_file_name(from_frame));
        if !path.exists() {
            return Ok(None);
        }
        read_flow(&path).map(|f| Some(std::borrow::Cow::Owned(f)))
    }
}

/// One row of the ground-truth labels file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GtLabel {
    pub frame_id: u32,
    pub object_key: u32,
    pub identity: u32,
    pub is_false_positive: bool,
}

impl GtLabel {
    pub fn key(&self) -> ObservationKey {
        ObservationKey::new(self.frame_id, self.object_key)
    }
}

pub fn parse_gt_labels(text: &str, origin: &str) -> Result<Vec<GtLabel>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, f) in content_lines(text) {
        expect_fields(&f, 4, origin, line)?;
        let fp: u8 = field(&f, 3, "false-positive flag", origin, line)?;
        if fp > 1 {
            return Err(Error::parse(origin, line, "false-positive flag must be 0 or 1"));
        }
        let label = GtLabel {
            frame_id: field(&f, 0, "frame", origin, line)?,
            object_key: field(&f, 1, "object key", origin, line)?,
            identity: field(&f, 2, "identity", origin, line)?,
            is_false_positive: fp == 1,
        };
        if !seen.insert(label.key()) {
            return Err(Error::parse(
                origin,
                line,
                format!("duplicate observation {}", label.key()),
            ));
        }
        out.push(label);
    }
    Ok(out)
}

pub fn format_gt_labels(labels: &[GtLabel]) -> String {
    let mut out = String::from("# frame object_key identity is_false_positive\n");
    for l in labels {
        out.push_str(&format!(
            "{} {} {} {}\n",
            l.frame_id, l.object_key, l.identity, l.is_false_positive as u8
        ));
    }
    out
}

pub fn read_gt_labels(path: &Path) -> Result<Vec<GtLabel>> {
    parse_gt_labels(&read_text(path)?, &path.display().to_string())
}

pub fn parse_tracklets(text: &str, origin: &str) -> Result<Vec<Tracklet>> {
    let mut map: BTreeMap<(u32, u32), Vec<ObservationKey>> = BTreeMap::new();
    for (line, f) in content_lines(text) {
        expect_fields(&f, 4, origin, line)?;
        let video: u32 = field(&f, 0, "video", origin, line)?;
        let id: u32 = field(&f, 1, "tracklet id", origin, line)?;
        let key = ObservationKey::new(field(&f, 2, "frame", origin, line)?, field(&f, 3, "key", origin, line)?);
        map.entry((video, id)).or_default().push(key);
    }
    let mut out = Vec::with_capacity(map.len());
    for ((video_id, tracklet_id), mut observations) in map {
        observations.sort();
        if observations.windows(2).any(|w| w[0].frame_id == w[1].frame_id) {
            return Err(Error::parse(
                origin,
                0,
                format!("tracklet {tracklet_id} has two observations in one frame"),
            ));
        }
        out.push(Tracklet {
            tracklet_id,
            video_id,
            observations,
        });
    }
    Ok(out)
}

pub fn format_tracklets(tracklets: &[Tracklet]) -> String {
    let mut out = String::from("# video tracklet_id frame object_key\n");
    for t in tracklets {
        for o in &t.observations {
            out.push_str(&format!(
                "{} {} {} {}\n",
                t.video_id, t.tracklet_id, o.frame_id, o.object_key
            ));
        }
    }
    out
}

/// `(frame, object_key) -> track_id` as produced by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Assignment {
    pub frame_id: u32,
    pub object_key: u32,
    pub track_id: u32,
}

pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<Assignment>> {
    content_lines(text)
        .map(|(line, f)| {
            expect_fields(&f, 3, origin, line)?;
            Ok(Assignment {
                frame_id: field(&f, 0, "frame", origin, line)?,
                object_key: field(&f, 1, "object key", origin, line)?,
                track_id: field(&f, 2, "track id", origin, line)?,
            })
        })
        .collect()
}

pub fn format_assignments(assignments: &[Assignment]) -> String {
    let mut sorted = assignments.to_vec();
    sorted.sort();
    let mut out = String::from("# frame object_key track_id\n");
    for a in sorted {
        out.push_str(&format!("{} {} {}\n", a.frame_id, a.object_key, a.track_id));
    }
    out
}
