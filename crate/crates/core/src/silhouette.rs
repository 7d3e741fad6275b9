//! Canonical frame and sequence types, frame normalization, and on-disk I/O.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
}

impl FrameGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame geometry must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub(crate) fn check(&self, other: FrameGeometry) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                expected: self.to_string(),
                actual: other.to_string(),
            })
        }
    }
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
        }
    }
}

impl fmt::Display for FrameGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A binary mask at its raw capture resolution, before normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl RawMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Inclusive bounding box `(top, bottom, left, right)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bbox = Some(match bbox {
                        None => (y, y, x, x),
                        Some((t, b, l, r)) => (t.min(y), b.max(y), l.min(x), r.max(x)),
                    });
                }
            }
        }
        bbox
    }
}

/// A normalized frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteFrame {
    geometry: FrameGeometry,
    pixels: Vec<f64>,
    placeholder: bool,
}

impl SilhouetteFrame {
    pub fn from_pixels(geometry: FrameGeometry, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != geometry.pixels() {
            return Err(Error::LengthMismatch {
                expected: geometry.pixels(),
                actual: pixels.len(),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            geometry,
            pixels,
            placeholder: false,
        })
    }

    /// All-zero frame flagged as missing.
    pub fn placeholder(geometry: FrameGeometry) -> Self {
        Self {
            geometry,
            pixels: vec![0.0; geometry.pixels()],
            placeholder: true,
        }
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.geometry.width + x]
    }

    pub fn is_placeholder(&self) -> bool {
        self.placeholder
    }

    pub fn foreground_area(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Binarizes at 0.5 into a raw mask of the same size.
    pub fn to_mask(&self) -> RawMask {
        RawMask {
            width: self.geometry.width,
            height: self.geometry.height,
            data: self.pixels.iter().map(|v| *v >= 0.5).collect(),
        }
    }
}

/// Maps output index `i` to the half-open source range `[start, end)` for a
/// `num/den` scale. Consecutive ranges tile `[0, extent)` without gaps.
fn source_span(i: usize, num: usize, den: usize, extent: usize) -> (usize, usize) {
    let start = (i * num / den).min(extent - 1);
    let end = ((i + 1) * num).div_ceil(den).max(start + 1).min(extent);
    (start, end)
}

/// Crops the foreground bounding box, rescales it to `geometry` preserving
/// aspect (by height unless the silhouette is too wide to fit), and centers
/// it horizontally on the foreground centroid.
///
/// Every computation is relative to the bounding box, so the result does not
/// depend on where the silhouette sits in the raw mask. An output pixel is
/// foreground when any source pixel in its footprint is, which keeps the
/// extreme rows and columns populated and makes the operation idempotent.
pub fn normalize_frame(raw: &RawMask, geometry: FrameGeometry) -> Result<SilhouetteFrame> {
    let (top, bottom, left, right) = raw.bounding_box().ok_or(Error::EmptyFrame)?;
    let (bh, bw) = (bottom - top + 1, right - left + 1);
    let (gh, gw) = (geometry.height, geometry.width);

    let height_limited = bh * gw >= bw * gh;
    let (num, den, th, tw) = if height_limited {
        (bh, gh, gh, (bw * gh).div_ceil(bh))
    } else {
        (bw, gw, (bh * gw).div_ceil(bw), gw)
    };

    let mut temp = vec![false; th * tw];
    for ty in 0..th {
        let (r0, r1) = source_span(ty, num, den, bh);
        for tx in 0..tw {
            let (c0, c1) = source_span(tx, num, den, bw);
            temp[ty * tw + tx] =
                (r0..r1).any(|r| (c0..c1).any(|c| raw.get(top + r, left + c)));
        }
    }

    let (row_off, col_off) = if height_limited {
        let (mut sum, mut count) = (0usize, 0usize);
        for (i, v) in temp.iter().enumerate() {
            if *v {
                sum += i % tw;
                count += 1;
            }
        }
        let centroid = sum as f64 / count as f64 + 0.5;
        let off = (gw as f64 / 2.0 - centroid).round();
        let off = off.clamp(0.0, (gw - tw) as f64) as usize;
        (0, off)
    } else {
        ((gh - th) / 2, 0)
    };

    let mut pixels = vec![0.0; geometry.pixels()];
    for ty in 0..th {
        for tx in 0..tw {
            if temp[ty * tw + tx] {
                pixels[(ty + row_off) * gw + tx + col_off] = 1.0;
            }
        }
    }
    Ok(SilhouetteFrame {
        geometry,
        pixels,
        placeholder: false,
    })
}

/// An ordered sequence of frames sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence {
    id: String,
    subject: Option<String>,
    frames: Vec<SilhouetteFrame>,
    phases: Option<Vec<f64>>,
}

impl GaitSequence {
    pub fn new(id: impl Into<String>, subject: Option<String>, frames: Vec<SilhouetteFrame>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?.geometry();
        for f in &frames {
            first.check(f.geometry())?;
        }
        Ok(Self {
            id: id.into(),
            subject,
            frames,
            phases: None,
        })
    }

    /// Attaches per-frame gait-cycle phase annotations in `[0, 1)`.
    pub fn with_phases(mut self, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != self.frames.len() {
            return Err(Error::LengthMismatch {
                expected: self.frames.len(),
                actual: phases.len(),
            });
        }
        if let Some(p) = phases.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("phase {p} outside [0, 1)")));
        }
        self.phases = Some(phases);
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn subject(&self) -> Option<&str> {
        self.subject.as_deref()
    }

    pub fn frames(&self) -> &[SilhouetteFrame] {
        &self.frames
    }

    pub fn phases(&self) -> Option<&[f64]> {
        self.phases.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.frames[0].geometry()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub(crate) fn replace_frames(&self, frames: Vec<SilhouetteFrame>) -> Self {
        debug_assert_eq!(frames.len(), self.frames.len());
        Self {
            id: self.id.clone(),
            subject: self.subject.clone(),
            frames,
            phases: self.phases.clone(),
        }
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "pbm", "pnm", "bmp"];
const META_FILE: &str = "meta.txt";
const PHASE_FILE: &str = "phases.txt";

fn read_raw_mask(path: &Path) -> Result<RawMask> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    // Intensity / 255 >= 0.5.
    let data = img.as_raw().iter().map(|v| *v >= 128).collect();
    RawMask::new(w as usize, h as usize, data)
}

/// Loads a sequence directory: image files in lexicographic order, each
/// binarized at 0.5 and normalized. Frames with no foreground load as
/// placeholders. `meta.txt` (`subject=<label>`) and `phases.txt` are read
/// when present.
pub fn load_sequence(dir: &Path, geometry: FrameGeometry) -> Result<GaitSequence> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no image files in {}",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let raw = read_raw_mask(f)?;
        frames.push(match normalize_frame(&raw, geometry) {
            Ok(frame) => frame,
            Err(Error::EmptyFrame) => SilhouetteFrame::placeholder(geometry),
            Err(e) => return Err(e),
        });
    }
    let subject = read_meta_subject(&dir.join(META_FILE))?;
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = GaitSequence::new(id, subject, frames)?;
    let phase_path = dir.join(PHASE_FILE);
    if phase_path.is_file() {
        let text = fs::read_to_string(&phase_path)
            .map_err(|e| Error::io(format!("reading {}", phase_path.display()), e))?;
        let phases = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad phase value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        return seq.with_phases(phases);
    }
    Ok(seq)
}

fn read_meta_subject(path: &Path) -> Result<Option<String>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text
        .lines()
        .find_map(|l| l.trim().strip_prefix("subject="))
        .map(|s| s.trim().to_string()))
}

/// Writes a sequence as `frame_%05d.png` 8-bit grayscale files plus sidecars.
pub fn save_sequence(seq: &GaitSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.png"));
        save_frame_png(frame, &path)?;
    }
    if let Some(subject) = seq.subject() {
        write_text(&dir.join(META_FILE), &format!("subject={subject}\n"))?;
    }
    if let Some(phases) = seq.phases() {
        let text: String = phases.iter().map(|p| format!("{p:.17}\n")).collect();
        write_text(&dir.join(PHASE_FILE), &text)?;
    }
    Ok(())
}

pub fn save_frame_png(frame: &SilhouetteFrame, path: &Path) -> Result<()> {
    let g = frame.geometry();
    let bytes: Vec<u8> = frame
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(g.width as u32, g.height as u32, bytes)
        .expect("buffer matches geometry");
    img.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One line of a dataset manifest: `<sequence_id> <subject_label> <path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub subject_label: String,
    pub path: PathBuf,
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: expected `<sequence_id> <subject_label> <path>`",
                path.display(),
                n + 1
            )));
        }
        let p = PathBuf::from(parts[2]);
        entries.push(ManifestEntry {
            sequence_id: parts[0].to_string(),
            subject_label: parts[1].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.sequence_id, e.subject_label, e.path.display()))
        .collect();
    write_text(path, &text)
}

/// Loads every sequence of a manifest; the manifest's label overrides `meta.txt`.
pub fn load_manifest(path: &Path, geometry: FrameGeometry) -> Result<Vec<GaitSequence>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let seq = load_sequence(&e.path, geometry)?;
            let subject = (e.subject_label != "-").then(|| e.subject_label.clone());
            let mut seq = GaitSequence {
                subject: subject.or(seq.subject.clone()),
                ..seq
            };
            seq.id = e.sequence_id;
            Ok(seq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect_mask(w: usize, h: usize, top: usize, left: usize, rh: usize, rw: usize) -> RawMask {
        let mut m = RawMask::empty(w, h);
        for y in top..top + rh {
            for x in left..left + rw {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = RawMask::empty(100, 100);
        assert!(matches!(
            normalize_frame(&m, FrameGeometry::default()),
            Err(Error::EmptyFrame)
        ));
    }

    #[test]
    fn full_mask_normalizes_to_full_frame() {
        let m = RawMask::new(100, 100, vec![true; 10_000]).unwrap();
        let f = normalize_frame(&m, FrameGeometry::new(64, 64).unwrap()).unwrap();
        assert!(f.pixels().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rectangle_position_does_not_matter() {
        let g = FrameGeometry::default();
        let a = normalize_frame(&rect_mask(200, 200, 0, 0, 20, 10), g).unwrap();
        let b = normalize_frame(&rect_mask(200, 200, 57, 133, 20, 10), g).unwrap();
        let c = normalize_frame(&rect_mask(200, 200, 180, 190, 20, 10), g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        // 20 tall, 10 wide -> 64 tall, 32 wide, centered.
        assert_eq!(a.foreground_area(), 64.0 * 32.0);
        assert_eq!(a.get(10, 16), 1.0);
        assert_eq!(a.get(10, 15), 0.0);
        assert_eq!(a.get(10, 47), 1.0);
        assert_eq!(a.get(10, 48), 0.0);
    }

    #[test]
    fn wide_shapes_are_fit_by_width() {
        let g = FrameGeometry::new(32, 32).unwrap();
        let f = normalize_frame(&rect_mask(100, 100, 10, 10, 5, 40), g).unwrap();
        let twice = normalize_frame(&f.to_mask(), g).unwrap();
        assert_eq!(f, twice);
        assert_eq!(f.get(16, 0), 1.0);
        assert_eq!(f.get(16, 31), 1.0);
    }

    #[test]
    fn geometry_rejects_zero() {
        assert!(FrameGeometry::new(0, 10).is_err());
    }

    #[test]
    fn frame_rejects_out_of_range_pixels() {
        let g = FrameGeometry::new(2, 1).unwrap();
        assert!(SilhouetteFrame::from_pixels(g, vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn sequence_rejects_mixed_geometry() {
        let a = SilhouetteFrame::placeholder(FrameGeometry::new(4, 4).unwrap());
        let b = SilhouetteFrame::placeholder(FrameGeometry::new(8, 4).unwrap());
        assert!(matches!(
            GaitSequence::new("s", None, vec![a, b]),
            Err(Error::GeometryMismatch { .. })
        ));
        assert!(matches!(GaitSequence::new("s", None, vec![]), Err(Error::EmptySequence)));
    }

    fn arb_mask() -> impl Strategy<Value = RawMask> {
        (4usize..40, 4usize..40).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), w * h)
                .prop_map(move |d| RawMask::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(mask in arb_mask(), gw in 4usize..24, gh in 4usize..24) {
            let g = FrameGeometry::new(gw, gh).unwrap();
            if let Ok(once) = normalize_frame(&mask, g) {
                let twice = normalize_frame(&once.to_mask(), g).unwrap();
                prop_assert_eq!(once.pixels(), twice.pixels());
                prop_assert!(once.pixels().iter().all(|v| *v == 0.0 || *v == 1.0));
            }
        }

        #[test]
        fn normalize_is_translation_invariant(mask in arb_mask(), dy in 0usize..7, dx in 0usize..9) {
            let g = FrameGeometry::new(16, 16).unwrap();
            let mut shifted = RawMask::empty(mask.width() + dx, mask.height() + dy);
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    shifted.set(y + dy, x + dx, mask.get(y, x));
                }
            }
            match (normalize_frame(&mask, g), normalize_frame(&shifted, g)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(Error::EmptyFrame), Err(Error::EmptyFrame)) => {}
                other => prop_assert!(false, "mismatch: {:?}", other.0.is_ok()),
            }
        }
    }
}
