//! Grayscale video containers, manifests and rescaling.
//!
//! Two on-disk containers are understood: a directory of numerically named
//! binary PGM (`P5`) or PPM (`P6`) frames, and the raw `.dtv` container
//! (`"DTV1"`, u32 LE height, width, length, then `height·width·length` bytes
//! frame-major, each frame row-major).

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTV_MAGIC: &[u8; 4] = b"DTV1";
pub const DEFAULT_MAX_FRAMES: usize = 256;

/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A single-channel video. Frames are stored one after another, each frame
/// row-major, so sample `(t, y, x)` lives at `(t·height + y)·width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraySequence {
    height: usize,
    width: usize,
    length: usize,
    samples: Vec<f32>,
    pub source_id: String,
}

impl GraySequence {
    pub fn new(
        height: usize,
        width: usize,
        length: usize,
        samples: Vec<f32>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DegenerateSize);
        }
        if length == 0 {
            return Err(Error::EmptyVideo(PathBuf::from(source_id.into())));
        }
        let expected = height * width * length;
        if samples.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: samples.len(),
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            height,
            width,
            length,
            samples,
            source_id: source_id.into(),
        })
    }

    /// Builds a sequence from a generator `f(t, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        length: usize,
        source_id: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(height * width * length);
        for t in 0..length {
            for y in 0..height {
                for x in 0..width {
                    samples.push(f(t, y, x));
                }
            }
        }
        Self::new(height, width, length, samples, source_id)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.samples[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize) -> f32 {
        self.samples[(t * self.height + y) * self.width + x]
    }

    /// Keeps at most `max_frames` leading frames.
    pub fn truncated(mut self, max_frames: usize) -> Self {
        if max_frames > 0 && self.length > max_frames {
            self.samples.truncate(max_frames * self.height * self.width);
            self.length = max_frames;
        }
        self
    }
}

/// How [`load_video`] should interpret a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FormatHint {
    /// `.dtv` files by extension, directories as frame sequences.
    #[default]
    Auto,
    Dtv,
    FrameDir,
}

/// Loads a video, converting color frames to luma and keeping at most
/// `max_frames` frames (`0` keeps everything).
pub fn load_video(path: &Path, hint: FormatHint, max_frames: usize) -> Result<GraySequence> {
    let kind = match hint {
        FormatHint::Auto if path.is_dir() => FormatHint::FrameDir,
        FormatHint::Auto => match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("dtv") => FormatHint::Dtv,
            other => {
                return Err(Error::UnsupportedFormat(format!(
                    "{} (extension {:?})",
                    path.display(),
                    other
                )))
            }
        },
        h => h,
    };
    let seq = match kind {
        FormatHint::Dtv => read_dtv(path, max_frames)?,
        FormatHint::FrameDir => read_frame_dir(path, max_frames)?,
        FormatHint::Auto => unreachable!(),
    };
    Ok(seq.truncated(max_frames))
}

fn read_dtv(path: &Path, max_frames: usize) -> Result<GraySequence> {
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[0..4] != DTV_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, len) = (word(0), word(1), word(2));
    if h == 0 || w == 0 {
        return Err(corrupt("zero frame size"));
    }
    if len == 0 {
        return Err(Error::EmptyVideo(path.to_path_buf()));
    }
    let payload = &bytes[16..];
    let need = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(len))
        .ok_or_else(|| corrupt("size overflow"))?;
    if payload.len() < need {
        return Err(corrupt("payload shorter than header dimensions"));
    }
    let keep = if max_frames > 0 { len.min(max_frames) } else { len };
    let samples = payload[..h * w * keep].iter().map(|&b| b as f32).collect();
    GraySequence::new(h, w, keep, samples, path.display().to_string())
}

/// Writes `seq` as `.dtv`, rounding samples to the nearest byte.
pub fn write_dtv(path: &Path, seq: &GraySequence) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(DTV_MAGIC)?;
    for v in [seq.height, seq.width, seq.length] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let bytes: Vec<u8> = seq.samples.iter().map(|&v| to_byte(v as f64)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[inline]
pub(crate) fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// A decoded PNM frame: `channels` is 1 for PGM, 3 for PPM.
struct PnmFrame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<PnmFrame> {
    let corrupt = |reason: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token().ok_or_else(|| corrupt("missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: PNM variant {other}",
                path.display()
            )))
        }
    };
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(corrupt("zero frame size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: maxval {maxval} (only 8-bit supported)",
            path.display()
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(corrupt("raster shorter than header dimensions"));
    }
    Ok(PnmFrame {
        height,
        width,
        channels,
        data: bytes[start..start + need].to_vec(),
    })
}

/// BT.601 luma of one 8-bit RGB pixel, always within `[0, 255]`.
pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    if r == g && g == b {
        return r as f32;
    }
    let v = LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64;
    v.clamp(0.0, 255.0) as f32
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    let key = |p: &Path| -> (u64, String) {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        (digits.parse().unwrap_or(u64::MAX), stem.to_string())
    };
    files.sort_by_key(|a| key(a));
    Ok(files)
}

fn read_frame_dir(dir: &Path, max_frames: usize) -> Result<GraySequence> {
    let mut files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyVideo(dir.to_path_buf()));
    }
    if max_frames > 0 {
        files.truncate(max_frames);
    }
    let mut dims = None;
    let mut samples = Vec::new();
    for f in &files {
        let frame = parse_pnm(f, &fs::read(f)?)?;
        match dims {
            None => dims = Some((frame.height, frame.width)),
            Some(d) if d != (frame.height, frame.width) => {
                return Err(Error::CorruptHeader {
                    path: f.clone(),
                    reason: format!("frame size {}x{} differs from {}x{}", frame.height, frame.width, d.0, d.1),
                })
            }
            Some(_) => {}
        }
        if frame.channels == 1 {
            samples.extend(frame.data.iter().map(|&b| b as f32));
        } else {
            samples.extend(frame.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])));
        }
    }
    let (h, w) = dims.unwrap();
    GraySequence::new(h, w, files.len(), samples, dir.display().to_string())
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::DimMismatch {
            expected: height * width,
            got: pixels.len(),
        });
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Bilinear rescale with half-pixel sample centers (align-corners = false).
///
/// Output sides are `round(scale · side)`; a scale of exactly one returns a
/// copy. The frame count never changes.
pub fn rescale(seq: &GraySequence, scale: f64) -> Result<GraySequence> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::DegenerateSize);
    }
    if scale == 1.0 {
        return Ok(seq.clone());
    }
    let out_h = (scale * seq.height as f64).round() as usize;
    let out_w = (scale * seq.width as f64).round() as usize;
    if out_h < 1 || out_w < 1 {
        return Err(Error::DegenerateSize);
    }
    let ys = axis_taps(seq.height, out_h);
    let xs = axis_taps(seq.width, out_w);
    let mut samples = Vec::with_capacity(out_h * out_w * seq.length);
    for t in 0..seq.length {
        let frame = seq.frame(t);
        for &(y0, y1, fy) in &ys {
            let r0 = &frame[y0 * seq.width..(y0 + 1) * seq.width];
            let r1 = &frame[y1 * seq.width..(y1 + 1) * seq.width];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
                let bottom = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
                samples.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    GraySequence::new(out_h, out_w, seq.length, samples, seq.source_id.clone())
}

/// Source taps `(i0, i1, frac)` for every output index along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// One row of a dataset index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VideoManifest {
    pub entries: Vec<ManifestEntry>,
}

/// How a dataset directory is organised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestLayout {
    /// `root/<label>/<video>`, where a video is a `.dtv` file or a frame directory.
    ClassSubdirs,
    /// `root/manifest.csv` with columns `path,label[,split]`.
    CsvIndex,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl VideoManifest {
    /// Sorts entries by path and validates uniqueness and labels.
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut seen = HashSet::new();
        for e in &entries {
            if e.label.trim().is_empty() {
                return Err(Error::InvalidManifest(format!(
                    "empty label for {}",
                    e.path.display()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(Error::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.entries.iter().map(|e| e.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    /// Writes the index as CSV, storing paths relative to `base` when possible.
    pub fn write_csv(&self, path: &Path, base: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "label", "split"])?;
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.write_record([
                p.to_string_lossy().as_ref(),
                e.label.as_str(),
                e.split.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `path,label[,split]` CSV; relative paths resolve against the CSV's
/// directory. A header row is recognised by its first field being `path`.
pub fn read_manifest_csv(path: &Path) -> Result<VideoManifest> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && rec.get(0) == Some("path") {
            continue;
        }
        if rec.len() < 2 {
            return Err(Error::InvalidManifest(format!(
                "row {} has {} columns, need path,label[,split]",
                i + 1,
                rec.len()
            )));
        }
        let p = PathBuf::from(&rec[0]);
        let split = rec.get(2).filter(|s| !s.is_empty()).map(str::to_string);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            label: rec[1].to_string(),
            split,
        });
    }
    VideoManifest::new(entries)
}

/// Indexes a dataset directory. Entries come back sorted by path.
pub fn scan_manifest(root: &Path, layout: ManifestLayout) -> Result<VideoManifest> {
    if !root.is_dir() {
        return Err(Error::InvalidManifest(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    match layout {
        ManifestLayout::CsvIndex => read_manifest_csv(&root.join(MANIFEST_FILE)),
        ManifestLayout::ClassSubdirs => {
            let mut entries = Vec::new();
            let mut classes: Vec<PathBuf> = fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            classes.sort();
            for class_dir in classes {
                let label = class_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for item in fs::read_dir(&class_dir)? {
                    let p = item?.path();
                    let is_dtv = p.is_file()
                        && p.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| e.eq_ignore_ascii_case("dtv"));
                    let is_frames = p.is_dir() && !frame_files(&p)?.is_empty();
                    if is_dtv || is_frames {
                        entries.push(ManifestEntry {
                            path: p,
                            label: label.clone(),
                            split: None,
                        });
                    }
                }
            }
            VideoManifest::new(entries)
        }
    }
}
