//! On-disk capture container and construction of capture sets and frames.
//!
//! A dataset directory holds one `.iq` file per (device, day) recording plus
//! a `metadata.json` index. Each `.iq` file is a flat sequence of
//! little-endian `f32` values, interleaved `I0 Q0 I1 Q1 ...`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthrf::RawCapture;

pub const METADATA_FILE: &str = "metadata.json";
pub const DEFAULT_WINDOW: usize = 1000;
pub const DEFAULT_FRAMES_PER_CAPTURE: usize = 2500;
pub const DEFAULT_NUM_DEVICES: usize = 15;

/// A 2×W block of IQ samples. `data` is row-major: the I row followed by
/// the Q row.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    data: Vec<f32>,
    width: usize,
    pub frame_index: usize,
}

impl IqFrame {
    pub fn new(data: Vec<f32>, width: usize, frame_index: usize) -> Result<Self> {
        if width == 0 || data.len() != 2 * width {
            return Err(Error::invalid(format!(
                "frame data has {} values, expected 2x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "frame {frame_index} contains non-finite values"
            )));
        }
        Ok(IqFrame {
            data,
            width,
            frame_index,
        })
    }

    /// Splits complex samples into the I and Q rows.
    pub fn from_complex(samples: &[Complex32], frame_index: usize) -> Result<Self> {
        let w = samples.len();
        let mut data = Vec::with_capacity(2 * w);
        data.extend(samples.iter().map(|c| c.re));
        data.extend(samples.iter().map(|c| c.im));
        IqFrame::new(data, w, frame_index)
    }

    pub(crate) fn from_parts_unchecked(data: Vec<f32>, width: usize, frame_index: usize) -> Self {
        debug_assert_eq!(data.len(), 2 * width);
        IqFrame {
            data,
            width,
            frame_index,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn i(&self) -> &[f32] {
        &self.data[..self.width]
    }

    pub fn q(&self) -> &[f32] {
        &self.data[self.width..]
    }

    pub fn to_complex(&self) -> Vec<Complex32> {
        self.i()
            .iter()
            .zip(self.q())
            .map(|(&re, &im)| Complex32::new(re, im))
            .collect()
    }

    /// Mean and standard deviation over both rows jointly.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// Zero mean, unit variance over both rows jointly. A constant frame
    /// maps to all zeros.
    pub fn standardized(&self) -> IqFrame {
        let (mean, std) = self.moments();
        let inv = if std > 0.0 { 1.0 / std } else { 0.0 };
        let data = self
            .data
            .iter()
            .map(|&v| ((v as f64 - mean) * inv) as f32)
            .collect();
        IqFrame::from_parts_unchecked(data, self.width, self.frame_index)
    }
}

/// Identifies a capture set by day and set index, rendered `D{day}S{set}`
/// with 1-based numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetId {
    pub day: usize,
    pub set: usize,
}

impl SetId {
    pub fn new(day: usize, set: usize) -> Self {
        SetId { day, set }
    }
}

impl std::fmt::Display for SetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "D{}S{}", self.day + 1, self.set + 1)
    }
}

impl std::str::FromStr for SetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("set id must look like D1S1, got {s:?}"));
        let rest = s.strip_prefix(['D', 'd']).ok_or_else(bad)?;
        let (day, set) = rest.split_once(['S', 's']).ok_or_else(bad)?;
        let day: usize = day.parse().map_err(|_| bad())?;
        let set: usize = set.parse().map_err(|_| bad())?;
        if day == 0 || set == 0 {
            return Err(bad());
        }
        Ok(SetId::new(day - 1, set - 1))
    }
}

impl Serialize for SetId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SetId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Frames from one device's transmission within one set.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub device_id: usize,
    pub day_id: usize,
    pub set_index: usize,
    pub transmission_id: u64,
    pub frames: Vec<IqFrame>,
}

/// One capture per device, all at the same offset within one day.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub day_id: usize,
    pub set_index: usize,
    pub captures: Vec<Capture>,
}

impl CaptureSet {
    pub fn id(&self) -> SetId {
        SetId::new(self.day_id, self.set_index)
    }

    pub fn num_devices(&self) -> usize {
        self.captures.len()
    }

    pub fn total_frames(&self) -> usize {
        self.captures.iter().map(|c| c.frames.len()).sum()
    }

    pub fn device_ids(&self) -> Vec<usize> {
        self.captures.iter().map(|c| c.device_id).collect()
    }

    /// Every frame with its device label, in capture order.
    pub fn labeled_frames(&self) -> Vec<LabeledFrame> {
        self.captures
            .iter()
            .flat_map(|c| {
                c.frames.iter().map(move |f| LabeledFrame {
                    frame: f.clone(),
                    device_label: c.device_id,
                    transmission_id: c.transmission_id,
                })
            })
            .collect()
    }

    /// Every frame with only its transmission id.
    pub fn unlabeled_frames(&self) -> Vec<UnlabeledFrame> {
        self.captures
            .iter()
            .flat_map(|c| {
                c.frames.iter().map(move |f| UnlabeledFrame {
                    frame: f.clone(),
                    transmission_id: c.transmission_id,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: IqFrame,
    pub device_label: usize,
    pub transmission_id: u64,
}

impl LabeledFrame {
    pub fn unlabeled(&self) -> UnlabeledFrame {
        UnlabeledFrame {
            frame: self.frame.clone(),
            transmission_id: self.transmission_id,
        }
    }
}

/// A frame whose device is unknown; only its transmission is.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledFrame {
    pub frame: IqFrame,
    pub transmission_id: u64,
}

/// Hands out experiment-wide unique transmission ids.
#[derive(Debug, Default, Clone)]
pub struct TransmissionIdAllocator {
    next: u64,
}

impl TransmissionIdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// First frame of set `set_index` when sets are laid out back to back.
pub fn set_offset_frames(set_index: usize, frames_per_capture: usize) -> usize {
    set_index * frames_per_capture
}

/// Slices `frames_per_capture` windows of `window` samples from each raw
/// capture, starting at frame `offset_frames`.
pub fn build_capture_set(
    raw_captures: &[RawCapture],
    set_index: usize,
    offset_frames: usize,
    frames_per_capture: usize,
    window: usize,
    ids: &mut TransmissionIdAllocator,
) -> Result<CaptureSet> {
    if window == 0 || frames_per_capture == 0 {
        return Err(Error::invalid("window and frames_per_capture must be positive"));
    }
    let first = raw_captures
        .first()
        .ok_or_else(|| Error::invalid("no raw captures supplied"))?;
    let day_id = first.day_id;
    let mut seen = BTreeSet::new();
    let start = offset_frames * window;
    let end = (offset_frames + frames_per_capture) * window;
    for raw in raw_captures {
        if !seen.insert(raw.device_id) {
            return Err(Error::invalid(format!(
                "duplicate capture for device {}",
                raw.device_id
            )));
        }
        if raw.day_id != day_id {
            return Err(Error::invalid(format!(
                "device {} recorded on day {}, expected day {day_id}",
                raw.device_id, raw.day_id
            )));
        }
        if raw.samples.len() < end {
            return Err(Error::invalid(format!(
                "device {}: capture has {} samples, set {set_index} needs {end}",
                raw.device_id,
                raw.samples.len()
            )));
        }
    }

    let captures = raw_captures
        .iter()
        .map(|raw| {
            let frames = raw.samples[start..end]
                .chunks_exact(window)
                .enumerate()
                .map(|(i, chunk)| IqFrame::from_complex(chunk, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(Capture {
                device_id: raw.device_id,
                day_id,
                set_index,
                transmission_id: ids.next_id(),
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CaptureSet {
        day_id,
        set_index,
        captures,
    })
}

/// Source frames keep their device labels; target frames only keep their
/// transmission ids.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_id: SetId,
    pub target_id: SetId,
    pub labeled_source: Vec<LabeledFrame>,
    pub unlabeled_target: Vec<UnlabeledFrame>,
}

pub fn make_domain_pair(source: &CaptureSet, target: &CaptureSet) -> Result<DomainPair> {
    if source.day_id == target.day_id {
        return Err(Error::invalid(format!(
            "source {} and target {} come from the same day",
            source.id(),
            target.id()
        )));
    }
    let src_ids: BTreeSet<u64> = source.captures.iter().map(|c| c.transmission_id).collect();
    if let Some(c) = target
        .captures
        .iter()
        .find(|c| src_ids.contains(&c.transmission_id))
    {
        return Err(Error::invalid(format!(
            "transmission id {} appears in both source and target",
            c.transmission_id
        )));
    }
    Ok(DomainPair {
        source_id: source.id(),
        target_id: target.id(),
        labeled_source: source.labeled_frames(),
        unlabeled_target: target.unlabeled_frames(),
    })
}

/// Index entry for one `.iq` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub device_id: usize,
    pub day_id: usize,
    /// `None` for a full-session recording that has not been cut into sets.
    pub set_index: Option<usize>,
    pub sample_rate_hz: f64,
    pub num_samples: usize,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub captures: Vec<CaptureMeta>,
}

pub fn capture_file_name(device_id: usize, day_id: usize) -> String {
    format!("dev{device_id:03}_day{day_id:02}.iq")
}

pub fn encode_samples(samples: &[Complex32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        out.extend_from_slice(&s.re.to_le_bytes());
        out.extend_from_slice(&s.im.to_le_bytes());
    }
    out
}

/// Writes the interleaved sample file for one capture.
pub fn write_capture(capture: &RawCapture, path: &Path) -> Result<()> {
    fs::write(path, encode_samples(&capture.samples)).map_err(|e| Error::io(path, e))
}

/// Reads one sample file, checking its length against `meta`.
pub fn read_capture(path: &Path, meta: &CaptureMeta) -> Result<RawCapture> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of f32 values", bytes.len()),
        ));
    }
    let floats = bytes.len() / 4;
    if floats != 2 * meta.num_samples {
        return Err(Error::format(
            path,
            format!(
                "metadata says {} samples ({} floats), file holds {floats} floats",
                meta.num_samples,
                2 * meta.num_samples
            ),
        ));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    Ok(RawCapture {
        device_id: meta.device_id,
        day_id: meta.day_id,
        samples,
        sample_rate_hz: meta.sample_rate_hz,
    })
}

/// Writes every capture plus `metadata.json` into `dir`, creating it.
pub fn write_dataset(dir: &Path, captures: &[RawCapture]) -> Result<DatasetMetadata> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metas = Vec::with_capacity(captures.len());
    for cap in captures {
        let file_name = capture_file_name(cap.device_id, cap.day_id);
        write_capture(cap, &dir.join(&file_name))?;
        metas.push(CaptureMeta {
            device_id: cap.device_id,
            day_id: cap.day_id,
            set_index: None,
            sample_rate_hz: cap.sample_rate_hz,
            num_samples: cap.samples.len(),
            file_name,
        });
    }
    let meta = DatasetMetadata { captures: metas };
    let path = dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_metadata(dir: &Path) -> Result<DatasetMetadata> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&path, "dataset metadata file is missing"),
        _ => Error::io(&path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads every capture listed in `metadata.json`.
pub fn read_dataset(dir: &Path) -> Result<Vec<RawCapture>> {
    let meta = read_metadata(dir)?;
    meta.captures
        .iter()
        .map(|m| read_capture(&dir.join(&m.file_name), m))
        .collect()
}

/// Files that make up a dataset, in metadata order.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let meta = read_metadata(dir)?;
    let mut files = vec![dir.join(METADATA_FILE)];
    files.extend(meta.captures.iter().map(|m| dir.join(&m.file_name)));
    Ok(files)
}
