//! Deterministic synthetic video clips.
//!
//! Two families of classes:
//!
//! * **static** classes show a class-specific pattern (bars, a cross, ...)
//!   that stays put for the whole clip, so one frame is enough to classify;
//! * **motion** classes all show the same bright square drifting across a
//!   toroidal canvas; only the direction differs. Start positions are
//!   uniform over the torus, so every individual frame has the same
//!   distribution for every motion class and temporal information is
//!   required to tell them apart.
//!
//! Pixels are generated as f32 values so that the on-disk format (f32
//! payload) round-trips exactly.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! magic     b"VGDS"
//! version   u32 (= 1)
//! hdr_len   u32
//! header    hdr_len bytes of JSON: {"spec":..,"seed":..,"split":..,"num_clips":..}
//! index     num_clips × { clip_id u64, label u32, tag u8, offset u64 }
//! payload   f32 values; clip i occupies T·C·H·W values starting at `offset`
//!           (counted in f32 elements from the payload start), laid out
//!           [T, C, H, W] row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"VGDS";
const VERSION: u32 = 1;

const SQUARE: usize = 4;
const BAR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionTag {
    Static,
    Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub static_classes: usize,
    pub motion_classes: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Amplitude of additive uniform noise in `[-noise, noise]`.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            static_classes: 2,
            motion_classes: 2,
            frames: 8,
            channels: 1,
            height: 16,
            width: 16,
            train_per_class: 500,
            test_per_class: 200,
            noise: 0.05,
        }
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.static_classes + self.motion_classes
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("dataset spec: {m}")));
        if self.static_classes > 4 || self.motion_classes > 4 {
            return bad("at most 4 static and 4 motion classes");
        }
        if self.num_classes() < 2 {
            return bad("need at least 2 classes");
        }
        if self.frames == 0 || self.channels == 0 {
            return bad("frames and channels must be positive");
        }
        if self.height < 2 * SQUARE || self.width < 2 * SQUARE {
            return bad("canvas must be at least 8x8");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class clip counts must be positive");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5]");
        }
        Ok(())
    }

    pub fn tag_of(&self, label: usize) -> MotionTag {
        if label < self.static_classes {
            MotionTag::Static
        } else {
            MotionTag::Motion
        }
    }
}

/// A set of clips held in memory. Frames are `[B, T, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<u64>,
    /// Generator-side ground truth; evaluation only, never a model input.
    pub motion_tags: Vec<MotionTag>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames_per_clip(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Per-clip shape `[T, C, H, W]`.
    pub fn clip_shape(&self) -> [usize; 4] {
        let s = self.frames.shape();
        [s[1], s[2], s[3], s[4]]
    }

    pub fn clip(&self, i: usize) -> &[f64] {
        let n: usize = self.clip_shape().iter().product();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Copies the clips at `idx` into a new batch.
    pub fn select(&self, idx: &[usize]) -> ClipBatch {
        let [t, c, h, w] = self.clip_shape();
        let mut data = Vec::with_capacity(idx.len() * t * c * h * w);
        for &i in idx {
            data.extend_from_slice(self.clip(i));
        }
        ClipBatch {
            frames: Tensor::new(vec![idx.len(), t, c, h, w], data).expect("consistent shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            clip_ids: idx.iter().map(|&i| self.clip_ids[i]).collect(),
            motion_tags: idx.iter().map(|&i| self.motion_tags[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: ClipBatch,
    pub test: ClipBatch,
}

pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train: generate_split(spec, seed, Split::Train),
        test: generate_split(spec, seed, Split::Test),
    })
}

pub fn generate_split(spec: &DatasetSpec, seed: u64, split: Split) -> ClipBatch {
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let n = per_class * spec.num_classes();
    let mut data = Vec::with_capacity(n * spec.clip_len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes();
        data.extend(generate_clip(spec, seed, split, i as u64, label));
        labels.push(label);
    }
    ClipBatch {
        frames: Tensor::new(
            vec![n, spec.frames, spec.channels, spec.height, spec.width],
            data,
        )
        .expect("consistent shape"),
        motion_tags: labels.iter().map(|&l| spec.tag_of(l)).collect(),
        labels,
        clip_ids: (0..n as u64).collect(),
    }
}

/// Renders one clip `[T, C, H, W]`; a pure function of its arguments.
pub fn generate_clip(
    spec: &DatasetSpec,
    seed: u64,
    split: Split,
    index: u64,
    label: usize,
) -> Vec<f64> {
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = rng::stream(seed, &[tag::DATA, split_tag, index]);
    let (h, w) = (spec.height, spec.width);
    let brightness: f64 = rng.gen_range(0.6..0.9);
    let mut canvas = vec![0.0f64; spec.frames * h * w];
    match spec.tag_of(label) {
        MotionTag::Static => {
            let py = rng.gen_range(0..h);
            let px = rng.gen_range(0..w);
            for t in 0..spec.frames {
                let frame = &mut canvas[t * h * w..(t + 1) * h * w];
                draw_static(frame, h, w, label, py, px, brightness);
            }
        }
        MotionTag::Motion => {
            let m = label - spec.static_classes;
            // (dy, dx) per frame: right, left, down, up
            let (dy, dx): (isize, isize) = [(0, 1), (0, -1), (1, 0), (-1, 0)][m];
            let y0 = rng.gen_range(0..h) as isize;
            let x0 = rng.gen_range(0..w) as isize;
            for t in 0..spec.frames {
                let y = (y0 + dy * t as isize).rem_euclid(h as isize) as usize;
                let x = (x0 + dx * t as isize).rem_euclid(w as isize) as usize;
                let frame = &mut canvas[t * h * w..(t + 1) * h * w];
                for sy in 0..SQUARE {
                    for sx in 0..SQUARE {
                        frame[((y + sy) % h) * w + (x + sx) % w] = brightness;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(spec.clip_len());
    for t in 0..spec.frames {
        for _c in 0..spec.channels {
            for p in 0..h * w {
                let noise = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                let v = (canvas[t * h * w + p] + noise).clamp(0.0, 1.0);
                out.push(v as f32 as f64);
            }
        }
    }
    out
}

/// Static patterns anchored at (py, px), wrapping around the canvas.
fn draw_static(
    frame: &mut [f64],
    h: usize,
    w: usize,
    label: usize,
    py: usize,
    px: usize,
    value: f64,
) {
    let mut set = |y: usize, x: usize| frame[(y % h) * w + x % w] = value;
    match label {
        // horizontal bar
        0 => (0..BAR).for_each(|dy| (0..w).for_each(|x| set(py + dy, x))),
        // vertical bar
        1 => (0..h).for_each(|y| (0..BAR).for_each(|dx| set(y, px + dx))),
        // diagonal stripe
        2 => (0..h).for_each(|y| (0..2).for_each(|d| set(y, px + y + d))),
        // hollow 6x6 box
        _ => {
            for i in 0..6 {
                set(py, px + i);
                set(py + 5, px + i);
                set(py + i, px);
                set(py + i, px + 5);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    spec: DatasetSpec,
    seed: u64,
    split: Split,
    num_clips: u64,
}

pub fn save_split(
    path: &Path,
    spec: &DatasetSpec,
    seed: u64,
    split: Split,
    batch: &ClipBatch,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&FileHeader {
        spec: spec.clone(),
        seed,
        split,
        num_clips: batch.len() as u64,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let clip_len = spec.clip_len() as u64;
    for i in 0..batch.len() {
        w.write_all(&batch.clip_ids[i].to_le_bytes())?;
        w.write_all(&(batch.labels[i] as u32).to_le_bytes())?;
        w.write_all(&[match batch.motion_tags[i] {
            MotionTag::Static => 0u8,
            MotionTag::Motion => 1u8,
        }])?;
        w.write_all(&(i as u64 * clip_len).to_le_bytes())?;
    }
    for v in batch.frames.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<(DatasetSpec, u64, Split, ClipBatch)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let hdr_len = read_u32(&mut r)? as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)?;
    let header: FileHeader =
        serde_json::from_slice(&hdr).map_err(|e| Error::Format(e.to_string()))?;
    header.spec.validate()?;
    let n = header.num_clips as usize;
    let clip_len = header.spec.clip_len();
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(read_u64(&mut r)?);
        let label = read_u32(&mut r)? as usize;
        if label >= header.spec.num_classes() {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        labels.push(label);
        let mut t = [0u8; 1];
        r.read_exact(&mut t)?;
        tags.push(match t[0] {
            0 => MotionTag::Static,
            1 => MotionTag::Motion,
            other => return Err(Error::Format(format!("bad motion tag {other}"))),
        });
        offsets.push(read_u64(&mut r)? as usize);
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * clip_len * 4 {
        return Err(Error::Format("payload length does not match index".into()));
    }
    let mut data = Vec::with_capacity(n * clip_len);
    for &off in &offsets {
        if off + clip_len > n * clip_len {
            return Err(Error::Format(format!("clip offset {off} out of range")));
        }
        let bytes = &payload[off * 4..(off + clip_len) * 4];
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        );
    }
    let s = &header.spec;
    let frames = Tensor::new(vec![n, s.frames, s.channels, s.height, s.width], data)?;
    Ok((
        header.spec,
        header.seed,
        header.split,
        ClipBatch {
            frames,
            labels,
            clip_ids: ids,
            motion_tags: tags,
        },
    ))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
