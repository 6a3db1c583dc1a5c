//! Embedding files, dataset manifests, batch assembly and synthetic data.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::SequenceMask;
use crate::error::{Error, Result};
use crate::graph::RowSegment;
use crate::model::{parse_kv, Modality, ModelConfig, StreamInput};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"AVTE";
pub const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER: usize = 16;

/// Frame embeddings of one modality of one clip, stored at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeq {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FrameSeq {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::dim(format!("{rows} × {cols} frames with {} values", data.len())));
        }
        Ok(FrameSeq { rows, cols, data })
    }

    /// Rounds a tensor to storage precision.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.matrix_dims();
        if !t.is_finite() {
            return Err(Error::data("embedding contains non-finite values"));
        }
        FrameSeq::new(rows, cols, t.data().iter().map(|v| *v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.rows, self.cols],
            self.data.iter().map(|v| f64::from(*v)).collect(),
        )
        .expect("validated extents")
    }
}

/// Serializes frames into the AVTE container.
pub fn encode_embedding(frames: &FrameSeq) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER + frames.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols as u32).to_le_bytes());
    for v in &frames.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<FrameSeq> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file too short for the AVTE magic"));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < EMBEDDING_HEADER {
        return Err(Error::format(bytes.len() as u64, "truncated AVTE header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::format(4, format!("unsupported AVTE version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    if rows == 0 {
        return Err(Error::format(8, "embedding has zero frames"));
    }
    if cols == 0 {
        return Err(Error::format(12, "embedding has zero width"));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(8, "header extents overflow"))?;
    let payload = &bytes[EMBEDDING_HEADER..];
    if payload.len() != expected {
        return Err(Error::format(
            (EMBEDDING_HEADER + payload.len().min(expected)) as u64,
            format!(
                "header promises {rows} × {cols} values ({expected} bytes), payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FrameSeq::new(rows, cols, data)
}

pub fn write_embedding(path: &Path, frames: &FrameSeq) -> Result<()> {
    write_atomic(path, &encode_embedding(frames))
}

pub fn read_embedding(path: &Path) -> Result<FrameSeq> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split {other:?}"))),
        }
    }
}

/// One weakly labeled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub audio: FrameSeq,
    pub video: FrameSeq,
    pub labels: Vec<u8>,
}

impl Clip {
    pub fn stream(&self, modality: Modality) -> &FrameSeq {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn has_class(&self, c: usize) -> bool {
        self.labels[c] == 1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[Clip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, id: &str) -> Option<(Split, &Clip)> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find_map(|s| self.split(s).iter().find(|c| c.id == id).map(|c| (s, c)))
    }

    /// `B × n_classes` label matrix of a split.
    pub fn label_matrix(&self, split: Split) -> Vec<Vec<u8>> {
        self.split(split).iter().map(|c| c.labels.clone()).collect()
    }

    /// Checks label widths, embedding widths, id uniqueness and that each
    /// class has a positive training example.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for clip in self.split(split) {
                if !seen.insert(clip.id.as_str()) {
                    return Err(Error::data(format!("duplicate clip id {}", clip.id)));
                }
                if clip.labels.len() != self.n_classes() {
                    return Err(Error::data(format!(
                        "clip {}: {} labels for {} classes",
                        clip.id,
                        clip.labels.len(),
                        self.n_classes()
                    )));
                }
                if clip.labels.iter().any(|l| *l > 1) {
                    return Err(Error::data(format!("clip {}: labels must be 0 or 1", clip.id)));
                }
                if clip.audio.cols() != self.audio_dim || clip.video.cols() != self.video_dim {
                    return Err(Error::data(format!(
                        "clip {}: embedding widths {}/{} differ from header {}/{}",
                        clip.id,
                        clip.audio.cols(),
                        clip.video.cols(),
                        self.audio_dim,
                        self.video_dim
                    )));
                }
            }
        }
        for (c, name) in self.classes.iter().enumerate() {
            if !self.train.iter().any(|clip| clip.has_class(c)) {
                return Err(Error::data(format!(
                    "class {c} ({name}) has no positive training example"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
    audio_dim: usize,
    video_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    audio: String,
    video: String,
    labels: Vec<u8>,
    split: Split,
}

/// Loads a JSON-lines manifest: a header object, then one object per clip.
/// Embedding paths are relative to the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty manifest", manifest.display())))?;
    let header: ManifestHeader =
        serde_json::from_str(head).map_err(|e| Error::data(format!("manifest header: {e}")))?;
    let mut ds = Dataset {
        classes: header.classes,
        audio_dim: header.audio_dim,
        video_dim: header.video_dim,
        ..Dataset::default()
    };
    let mut seen = HashSet::new();
    for (n, line) in lines {
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::data(format!("manifest line {}: {e}", n + 1)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::data(format!("duplicate clip id {}", rec.id)));
        }
        if rec.labels.len() != ds.classes.len() {
            return Err(Error::data(format!(
                "clip {}: {} labels for {} classes",
                rec.id,
                rec.labels.len(),
                ds.classes.len()
            )));
        }
        let load = |rel: &str| {
            let path = base.join(rel);
            read_embedding(&path).map_err(|e| Error::data(format!("clip {}: {e}", rec.id)))
        };
        let clip = Clip {
            audio: load(&rec.audio)?,
            video: load(&rec.video)?,
            id: rec.id,
            labels: rec.labels,
        };
        match rec.split {
            Split::Train => ds.train.push(clip),
            Split::Val => ds.val.push(clip),
            Split::Test => ds.test.push(clip),
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes `audio/<id>.avte`, `video/<id>.avte` and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    let header = ManifestHeader {
        classes: ds.classes.clone(),
        audio_dim: ds.audio_dim,
        video_dim: ds.video_dim,
    };
    let mut manifest = serde_json::to_string(&header).expect("serializable header");
    manifest.push('\n');
    for split in [Split::Train, Split::Val, Split::Test] {
        for clip in ds.split(split) {
            let audio = format!("audio/{}.avte", clip.id);
            let video = format!("video/{}.avte", clip.id);
            write_embedding(&dir.join(&audio), &clip.audio)?;
            write_embedding(&dir.join(&video), &clip.video)?;
            let rec = ManifestRecord {
                id: clip.id.clone(),
                audio,
                video,
                labels: clip.labels.clone(),
                split,
            };
            manifest.push_str(&serde_json::to_string(&rec).expect("serializable record"));
            manifest.push('\n');
        }
    }
    let path = dir.join("manifest.jsonl");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Padded two-stream batch routed per the model's modality order.
#[derive(Clone, Debug)]
pub struct BatchTensors {
    pub first: StreamInput,
    pub second: StreamInput,
    /// `B × n_classes` with entries 0 or 1.
    pub labels: Tensor,
}

impl BatchTensors {
    pub fn len(&self) -> usize {
        self.first.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.segments.is_empty()
    }

    pub fn first_masks(&self) -> Vec<SequenceMask> {
        masks(&self.first.segments)
    }

    pub fn second_masks(&self) -> Vec<SequenceMask> {
        masks(&self.second.segments)
    }
}

fn masks(segments: &[RowSegment]) -> Vec<SequenceMask> {
    segments
        .iter()
        .map(|s| SequenceMask::new(s.len, s.valid).expect("valid segment"))
        .collect()
}

fn stack(clips: &[&Clip], modality: Modality) -> StreamInput {
    let t_max = clips.iter().map(|c| c.stream(modality).rows()).max().unwrap_or(1);
    let d = clips[0].stream(modality).cols();
    let mut data = vec![0.0; clips.len() * t_max * d];
    let mut segments = Vec::with_capacity(clips.len());
    for (b, clip) in clips.iter().enumerate() {
        let seq = clip.stream(modality);
        let base = b * t_max * d;
        for (dst, src) in data[base..base + seq.data().len()].iter_mut().zip(seq.data()) {
            *dst = f64::from(*src);
        }
        segments.push(RowSegment {
            start: b * t_max,
            len: t_max,
            valid: seq.rows(),
        });
    }
    StreamInput {
        frames: Tensor::new(&[clips.len() * t_max, d], data).expect("batch extents"),
        segments,
    }
}

/// Pads each stream to the longest clip in the batch and builds prefix masks.
pub fn assemble_batch(clips: &[&Clip], config: &ModelConfig) -> Result<BatchTensors> {
    if clips.is_empty() {
        return Err(Error::contract("cannot assemble an empty batch"));
    }
    let c = clips[0].labels.len();
    let mut labels = Vec::with_capacity(clips.len() * c);
    for clip in clips {
        if clip.labels.len() != c {
            return Err(Error::data(format!(
                "clip {} has {} labels, expected {c}",
                clip.id,
                clip.labels.len()
            )));
        }
        labels.extend(clip.labels.iter().map(|l| f64::from(*l)));
    }
    Ok(BatchTensors {
        first: stack(clips, config.first_modality),
        second: stack(clips, config.second_modality),
        labels: Tensor::new(&[clips.len(), c], labels)?,
    })
}

/// Which stream carries a class's planted signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    AudioOnly,
    VideoOnly,
    Both,
}

impl Visibility {
    pub fn shows(self, modality: Modality) -> bool {
        matches!(
            (self, modality),
            (Visibility::Both, _) | (Visibility::AudioOnly, Modality::Audio) | (Visibility::VideoOnly, Modality::Video)
        )
    }

    /// Parses `both`, `audio`, `video`, `split:K` (first K classes audio-only,
    /// the rest video-only) or a comma list of `a`/`v`/`b` per class.
    pub fn parse_list(s: &str, n_classes: usize) -> Result<Vec<Visibility>> {
        let all = |v| Ok(vec![v; n_classes]);
        match s.trim() {
            "both" => return all(Visibility::Both),
            "audio" => return all(Visibility::AudioOnly),
            "video" => return all(Visibility::VideoOnly),
            _ => {}
        }
        if let Some(k) = s.trim().strip_prefix("split:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::param(format!("bad visibility split {s:?}")))?;
            if k > n_classes {
                return Err(Error::param(format!(
                    "visibility split {k} exceeds {n_classes} classes"
                )));
            }
            return Ok((0..n_classes)
                .map(|c| {
                    if c < k {
                        Visibility::AudioOnly
                    } else {
                        Visibility::VideoOnly
                    }
                })
                .collect());
        }
        let list = s
            .split(',')
            .map(|t| match t.trim() {
                "a" | "audio" => Ok(Visibility::AudioOnly),
                "v" | "video" => Ok(Visibility::VideoOnly),
                "b" | "both" => Ok(Visibility::Both),
                other => Err(Error::param(format!("unknown visibility {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if list.len() != n_classes {
            return Err(Error::param(format!(
                "{} visibility entries for {n_classes} classes",
                list.len()
            )));
        }
        Ok(list)
    }
}

/// Parameters of the planted-signature generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub frames: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub magnitude: f64,
    pub noise_std: f64,
    pub span_min: usize,
    pub span_max: usize,
    pub visibility: Vec<Visibility>,
    /// Independent per-class inclusion probability.
    pub class_prior: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let n = 17;
        SyntheticSpec {
            n_classes: n,
            audio_dim: 128,
            video_dim: 4096,
            frames: 10,
            train_clips: 2000,
            val_clips: 200,
            test_clips: 200,
            magnitude: 1.0,
            noise_std: 0.1,
            span_min: 2,
            span_max: 5,
            visibility: vec![Visibility::Both; n],
            class_prior: vec![0.1; n],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Default spec resized to `n_classes` classes.
    pub fn with_classes(n_classes: usize) -> Self {
        SyntheticSpec {
            n_classes,
            visibility: vec![Visibility::Both; n_classes],
            class_prior: vec![0.1; n_classes],
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.audio_dim == 0 || self.video_dim == 0 || self.frames == 0 {
            return Err(Error::param("classes, dims and frames must be positive"));
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(Error::param(format!(
                "span range {}..={} is empty",
                self.span_min, self.span_max
            )));
        }
        if self.span_max > self.frames {
            return Err(Error::param(format!(
                "span length {} exceeds {} frames",
                self.span_max, self.frames
            )));
        }
        if !(self.magnitude > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::param("magnitude must be positive and noise non-negative"));
        }
        if self.visibility.len() != self.n_classes || self.class_prior.len() != self.n_classes {
            return Err(Error::param("visibility and prior need one entry per class"));
        }
        if self.class_prior.iter().any(|p| !(0.0..=1.0).contains(p)) || self.class_prior.iter().all(|p| *p == 0.0) {
            return Err(Error::param("class priors must lie in [0, 1] and not all be 0"));
        }
        if self.train_clips == 0 {
            return Err(Error::param("at least one training clip is required"));
        }
        Ok(())
    }

    /// Applies `key=value` settings (same keys as the `synth` flags).
    pub fn apply_pairs(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        let num =
            |k: &str, v: &str| -> Result<f64> { v.parse().map_err(|_| Error::param(format!("{k}: bad number {v:?}"))) };
        let count = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::param(format!("{k}: bad count {v:?}")))
        };
        if let Some(v) = map.get("classes") {
            let n = count("classes", v)?;
            if n != self.n_classes {
                self.n_classes = n;
                self.visibility = vec![Visibility::Both; n];
                let p = self.class_prior.first().copied().unwrap_or(0.1);
                self.class_prior = vec![p; n];
            }
        }
        for (k, v) in map {
            match k.as_str() {
                "classes" => {}
                "audio-dim" => self.audio_dim = count(k, v)?,
                "video-dim" => self.video_dim = count(k, v)?,
                "frames" => self.frames = count(k, v)?,
                "train" => self.train_clips = count(k, v)?,
                "val" => self.val_clips = count(k, v)?,
                "test" => self.test_clips = count(k, v)?,
                "magnitude" => self.magnitude = num(k, v)?,
                "noise" => self.noise_std = num(k, v)?,
                "span-min" => self.span_min = count(k, v)?,
                "span-max" => self.span_max = count(k, v)?,
                "span-length" => {
                    self.span_min = count(k, v)?;
                    self.span_max = self.span_min;
                }
                "visibility" => self.visibility = Visibility::parse_list(v, self.n_classes)?,
                "prior" => {
                    let parts: Vec<f64> = v.split(',').map(|p| num(k, p.trim())).collect::<Result<_>>()?;
                    self.class_prior = match parts.as_slice() {
                        [p] => vec![*p; self.n_classes],
                        _ => parts,
                    };
                }
                "seed" => self.seed = v.parse().map_err(|_| Error::param(format!("seed: bad value {v:?}")))?,
                other => return Err(Error::param(format!("unknown synthetic setting {other:?}"))),
            }
        }
        Ok(())
    }

    /// Flat key/value view accepted back by [`SyntheticSpec::apply_pairs`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: Vec<String>| v.join(",");
        vec![
            ("classes", self.n_classes.to_string()),
            ("audio-dim", self.audio_dim.to_string()),
            ("video-dim", self.video_dim.to_string()),
            ("frames", self.frames.to_string()),
            ("train", self.train_clips.to_string()),
            ("val", self.val_clips.to_string()),
            ("test", self.test_clips.to_string()),
            ("magnitude", format!("{:?}", self.magnitude)),
            ("noise", format!("{:?}", self.noise_std)),
            ("span-min", self.span_min.to_string()),
            ("span-max", self.span_max.to_string()),
            (
                "visibility",
                join(
                    self.visibility
                        .iter()
                        .map(|v| match v {
                            Visibility::AudioOnly => "a".to_string(),
                            Visibility::VideoOnly => "v".to_string(),
                            Visibility::Both => "b".to_string(),
                        })
                        .collect(),
                ),
            ),
            (
                "prior",
                join(self.class_prior.iter().map(|p| format!("{p:?}")).collect()),
            ),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        spec.apply_pairs(&parse_kv(text)?)?;
        Ok(spec)
    }
}

/// Ground-truth placement of one planted event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub class: usize,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.len
    }
}

/// A generated dataset plus the hidden event placements.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub spans: BTreeMap<String, Vec<Span>>,
    /// Per class, the planted audio and video signature vectors.
    pub signatures: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Generates clips whose events are fixed per-class signature vectors added
/// over contiguous frame spans on top of Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = RandomSource::new(spec.seed);
    let signatures: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_classes)
        .map(|_| {
            let a = (0..spec.audio_dim).map(|_| spec.magnitude * rng.normal()).collect();
            let v = (0..spec.video_dim).map(|_| spec.magnitude * rng.normal()).collect();
            (a, v)
        })
        .collect();
    let mut ds = Dataset {
        classes: (0..spec.n_classes).map(|c| format!("class{c:02}")).collect(),
        audio_dim: spec.audio_dim,
        video_dim: spec.video_dim,
        ..Dataset::default()
    };
    let mut spans = BTreeMap::new();
    for (split, count) in [
        (Split::Train, spec.train_clips),
        (Split::Val, spec.val_clips),
        (Split::Test, spec.test_clips),
    ] {
        for i in 0..count {
            let id = format!("{split}-{i:05}");
            let labels = loop {
                let l: Vec<u8> = spec.class_prior.iter().map(|p| u8::from(rng.bernoulli(*p))).collect();
                if l.contains(&1) {
                    break l;
                }
            };
            let clip_spans: Vec<Span> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == 1)
                .map(|(class, _)| {
                    let len = rng.range_inclusive(spec.span_min, spec.span_max);
                    let start = rng.range_inclusive(0, spec.frames - len);
                    Span { class, start, len }
                })
                .collect();
            let mut make = |modality: Modality, dim: usize| -> Result<FrameSeq> {
                let mut data: Vec<f64> = (0..spec.frames * dim).map(|_| spec.noise_std * rng.normal()).collect();
                for span in &clip_spans {
                    if !spec.visibility[span.class].shows(modality) {
                        continue;
                    }
                    let sig = match modality {
                        Modality::Audio => &signatures[span.class].0,
                        Modality::Video => &signatures[span.class].1,
                    };
                    for f in span.start..span.start + span.len {
                        for (d, s) in data[f * dim..(f + 1) * dim].iter_mut().zip(sig) {
                            *d += s;
                        }
                    }
                }
                FrameSeq::new(spec.frames, dim, data.into_iter().map(|v| v as f32).collect())
            };
            let audio = make(Modality::Audio, spec.audio_dim)?;
            let video = make(Modality::Video, spec.video_dim)?;
            spans.insert(id.clone(), clip_spans);
            let clip = Clip {
                id,
                audio,
                video,
                labels,
            };
            match split {
                Split::Train => ds.train.push(clip),
                Split::Val => ds.val.push(clip),
                Split::Test => ds.test.push(clip),
            }
        }
    }
    Ok(SyntheticData {
        dataset: ds,
        spans,
        signatures,
    })
}

/// Writes the spans as JSON lines `{"id":…,"spans":[…]}`.
pub fn write_spans(path: &Path, spans: &BTreeMap<String, Vec<Span>>) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        spans: &'a [Span],
    }
    let mut text = String::new();
    for (id, s) in spans {
        text.push_str(&serde_json::to_string(&Row { id, spans: s }).expect("serializable"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_spans(path: &Path) -> Result<BTreeMap<String, Vec<Span>>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        spans: Vec<Span>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Row = serde_json::from_str(l).map_err(|e| Error::data(format!("spans: {e}")))?;
            Ok((row.id, row.spans))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: usize, cols: usize, seed: u64) -> FrameSeq {
        let mut rng = RandomSource::new(seed);
        FrameSeq::new(rows, cols, (0..rows * cols).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let f = frames(10, 128, 1);
        let back = decode_embedding(&encode_embedding(&f)).unwrap();
        assert_eq!(back.rows(), 10);
        assert!(back
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn embedding_corruptions_are_positioned() {
        let mut bytes = encode_embedding(&frames(3, 4, 2));
        match decode_embedding(&[]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embedding(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_embedding(&bad), Err(Error::Format { offset: 4, .. })));
        // rows field claims 4 frames, payload holds 3
        bytes[8] = 4;
        match decode_embedding(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 16 + 48);
                assert!(message.contains("payload"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_embedding(&bytes[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
    }

    fn clip(id: &str, t_audio: usize, t_video: usize, labels: Vec<u8>) -> Clip {
        Clip {
            id: id.into(),
            audio: frames(t_audio, 3, 5),
            video: frames(t_video, 2, 6),
            labels,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            audio_dim: 3,
            video_dim: 2,
            n_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_of_one_is_unpadded() {
        let c = clip("a", 4, 4, vec![1, 0]);
        let b = assemble_batch(&[&c], &small_config()).unwrap();
        assert_eq!(b.first.frames, c.audio.to_tensor());
        assert_eq!(b.second.frames, c.video.to_tensor());
        assert_eq!(b.first_masks(), vec![SequenceMask::all_valid(4)]);
    }

    #[test]
    fn batch_pads_to_longest_with_zero_fill() {
        let a = clip("a", 8, 8, vec![1, 0]);
        let b = clip("b", 10, 10, vec![0, 1]);
        let batch = assemble_batch(&[&a, &b], &small_config()).unwrap();
        let m = batch.first_masks();
        assert_eq!((m[0].len(), m[0].valid()), (10, 8));
        assert_eq!((m[1].len(), m[1].valid()), (10, 10));
        assert_eq!(batch.first.frames.rows(), 20);
        assert!(batch.first.frames.row(8).iter().all(|v| *v == 0.0));
        assert!(batch.first.frames.row(9).iter().all(|v| *v == 0.0));
        assert_eq!(batch.labels.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unimodal_routing_uses_the_same_stream() {
        let a = clip("a", 5, 3, vec![1, 0]);
        let cfg = ModelConfig {
            second_modality: Modality::Audio,
            ..small_config()
        };
        let batch = assemble_batch(&[&a], &cfg).unwrap();
        assert_eq!(batch.first.frames, batch.second.frames);
        assert_eq!(batch.first.segments, batch.second.segments);
    }

    #[test]
    fn noiseless_single_class_planting() {
        let spec = SyntheticSpec {
            n_classes: 1,
            audio_dim: 4,
            video_dim: 3,
            train_clips: 5,
            val_clips: 0,
            test_clips: 0,
            noise_std: 0.0,
            visibility: vec![Visibility::Both],
            class_prior: vec![1.0],
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for clip in &data.dataset.train {
            let span = data.spans[&clip.id][0];
            for f in 0..spec.frames {
                let row = clip.audio.row(f);
                if span.contains(f) {
                    for (a, s) in row.iter().zip(&data.signatures[0].0) {
                        assert_eq!(*a, *s as f32);
                    }
                } else {
                    assert!(row.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let spec = SyntheticSpec {
            video_dim: 8,
            train_clips: 60,
            val_clips: 5,
            test_clips: 5,
            ..SyntheticSpec::with_classes(3)
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.spans, b.spans);
        assert!(a.dataset.train.iter().all(|c| c.labels.contains(&1)));

        let bad = SyntheticSpec { span_max: 11, ..spec };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn spec_pairs_round_trip() {
        let spec = SyntheticSpec {
            visibility: Visibility::parse_list("split:1", 3).unwrap(),
            class_prior: vec![0.2, 0.3, 0.5],
            noise_std: 0.25,
            ..SyntheticSpec::with_classes(3)
        };
        let text: String = spec.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        assert_eq!(SyntheticSpec::from_kv_text(&text).unwrap(), spec);
    }

    #[test]
    fn visibility_lists() {
        let v = Visibility::parse_list("split:2", 4).unwrap();
        assert_eq!(
            v,
            vec![
                Visibility::AudioOnly,
                Visibility::AudioOnly,
                Visibility::VideoOnly,
                Visibility::VideoOnly
            ]
        );
        assert_eq!(Visibility::parse_list("a,v,b", 3).unwrap()[2], Visibility::Both);
        assert!(Visibility::parse_list("a,v", 3).is_err());
    }
}
