//! Middlebury `.flo` files, grayscale raster ingestion and dataset manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{CaseLabel, Frame, ImagePair, Split, TypeError, VelocityField, FlowSample};

/// Sentinel stored in the first four bytes of every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Error)]
pub enum FlowIoError {
    #[error("{path}: not a flow file (magic {found})")]
    MagicMismatch { path: PathBuf, found: f32 },
    #[error("{path}: truncated, expected {expected} payload bytes, found {found}")]
    TruncatedFile { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingData { path: PathBuf, extra: usize },
    #[error("{path}: invalid dimensions {width}x{height}")]
    BadDimensions { path: PathBuf, width: i32, height: i32 },
    #[error("flow files store native-resolution fields, got coordinate scale {0}")]
    CoordinateScale(f32),
    #[error("{path}: unsupported image format ({reason})")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: multi-channel image ({channels} channels) where grayscale is required")]
    MultiChannelInput { path: PathBuf, channels: u8 },
    #[error("orphan file {0}: partner image missing")]
    OrphanFile(PathBuf),
    #[error("no samples found under {0}")]
    EmptyDataset(PathBuf),
    #[error("manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Type(#[from] TypeError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FlowIoError + '_ {
    move |source| FlowIoError::Io { path: path.to_path_buf(), source }
}

/// Decodes `.flo` bytes. `path` is used for error messages only.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<VelocityField, FlowIoError> {
    if bytes.len() < 12 {
        return Err(FlowIoError::TruncatedFile { path: path.into(), expected: 12, found: bytes.len() });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(FlowIoError::MagicMismatch { path: path.into(), found: magic });
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(FlowIoError::BadDimensions { path: path.into(), width, height });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or(FlowIoError::BadDimensions { path: path.into(), width, height })?;
    let payload = &bytes[12..];
    if payload.len() < expected {
        return Err(FlowIoError::TruncatedFile { path: path.into(), expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(FlowIoError::TrailingData { path: path.into(), extra: payload.len() - expected });
    }
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let (y, x) = (i / w, i % w);
        u[[y, x]] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        v[[y, x]] = f32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
    }
    Ok(VelocityField::new(u, v, 1.0)?)
}

/// Encodes a native-resolution field into `.flo` bytes.
pub fn encode_flo(field: &VelocityField) -> Result<Vec<u8>, FlowIoError> {
    if field.coordinate_scale() != 1.0 {
        return Err(FlowIoError::CoordinateScale(field.coordinate_scale()));
    }
    let (h, w) = field.shape();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (a, b) in field.u().iter().zip(field.v().iter()) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

/// Reads a Middlebury flow file. Unknown-flow markers (|value| > 1e9) and
/// non-finite values are kept verbatim; [`VelocityField::valid_mask`] flags them.
pub fn read_flo(path: impl AsRef<Path>) -> Result<VelocityField, FlowIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_flo(&bytes, path)
}

pub fn write_flo(field: &VelocityField, path: impl AsRef<Path>) -> Result<(), FlowIoError> {
    let path = path.as_ref();
    let bytes = encode_flo(field)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an 8- or 16-bit single-channel PNG/TIFF and normalizes to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Frame, FlowIoError> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Tiff) => {}
        other => {
            return Err(FlowIoError::UnsupportedFormat {
                path: path.into(),
                reason: format!("container {other:?}"),
            })
        }
    }
    let img = reader
        .decode()
        .map_err(|e| FlowIoError::UnsupportedFormat { path: path.into(), reason: e.to_string() })?;
    let channels = img.color().channel_count();
    if channels > 1 {
        return Err(FlowIoError::MultiChannelInput { path: path.into(), channels });
    }
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            }))
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
            }))
        }
        other => Err(FlowIoError::UnsupportedFormat {
            path: path.into(),
            reason: format!("pixel type {:?}", other.color()),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Writes a `[0, 1]` frame as a grayscale PNG, rounding to the bit depth.
pub fn write_image(frame: &Frame, path: impl AsRef<Path>, depth: BitDepth) -> Result<(), FlowIoError> {
    let path = path.as_ref();
    let (h, w) = frame.dim();
    let result = match depth {
        BitDepth::Eight => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(frame[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            buf.save_with_format(path, ImageFormat::Png)
        }
        BitDepth::Sixteen => {
            let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(frame[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
            });
            buf.save_with_format(path, ImageFormat::Png)
        }
    };
    result.map_err(|e| FlowIoError::Io { path: path.into(), source: io::Error::other(e.to_string()) })
}

/// Filename convention inside each case directory:
/// `<name><img1_suffix>.<ext>`, `<name><img2_suffix>.<ext>`, `<name><flow_suffix>`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilePattern {
    pub img1_suffix: String,
    pub img2_suffix: String,
    pub flow_suffix: String,
    pub image_extensions: Vec<String>,
}

impl Default for FilePattern {
    fn default() -> Self {
        Self {
            img1_suffix: "_img1".into(),
            img2_suffix: "_img2".into(),
            flow_suffix: "_flow.flo".into(),
            image_extensions: vec!["png".into(), "tif".into(), "tiff".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// `<case_dir>/<name>`, unique within the manifest.
    pub id: String,
    pub img1: PathBuf,
    pub img2: PathBuf,
    pub flow: Option<PathBuf>,
    pub case_label: CaseLabel,
    pub split: Split,
}

/// Dataset index; paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "# pivdiff manifest v1: id\timg1\timg2\tflow\tcase\tsplit";

#[derive(Default)]
struct Partial {
    img1: Option<PathBuf>,
    img2: Option<PathBuf>,
    flow: Option<PathBuf>,
}

/// Position of `name` in the seeded hash order, as a 64-bit key.
fn split_key(name: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Assigns 8:1:1 by rank in the seeded hash order: rank/n below 0.8 is train,
/// below 0.9 validation, the rest test.
fn assign_splits(names: &[&str], seed: u64) -> Vec<Split> {
    let n = names.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_key(names[i], seed), names[i]));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if 10 * rank < 8 * n {
            Split::Train
        } else if 10 * rank < 9 * n {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn build_manifest(root: impl AsRef<Path>, split_seed: u64) -> Result<DatasetManifest, FlowIoError> {
    build_manifest_with(root, split_seed, &FilePattern::default())
}

/// Scans `<root>/<case>/...` and splits each case 8:1:1 deterministically.
pub fn build_manifest_with(
    root: impl AsRef<Path>,
    split_seed: u64,
    pattern: &FilePattern,
) -> Result<DatasetManifest, FlowIoError> {
    let root = root.as_ref();
    let mut case_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    case_dirs.sort();

    let mut entries = Vec::new();
    for dir in case_dirs {
        let case_name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let label = CaseLabel::from_dir_name(&case_name);
        let mut groups: BTreeMap<String, Partial> = BTreeMap::new();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let fname = file.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rel = PathBuf::from(&case_name).join(&fname);
            if let Some(name) = fname.strip_suffix(pattern.flow_suffix.as_str()) {
                groups.entry(name.to_string()).or_default().flow = Some(rel);
                continue;
            }
            let Some((stem, ext)) = fname.rsplit_once('.') else { continue };
            if !pattern.image_extensions.iter().any(|e| e.eq_ignore_ascii_case(ext)) {
                continue;
            }
            if let Some(name) = stem.strip_suffix(pattern.img1_suffix.as_str()) {
                groups.entry(name.to_string()).or_default().img1 = Some(rel);
            } else if let Some(name) = stem.strip_suffix(pattern.img2_suffix.as_str()) {
                groups.entry(name.to_string()).or_default().img2 = Some(rel);
            }
        }
        let names: Vec<&str> = groups.keys().map(String::as_str).collect();
        let splits = assign_splits(&names, split_seed);
        for ((name, part), split) in groups.iter().zip(splits) {
            let (img1, img2) = match (&part.img1, &part.img2) {
                (Some(a), Some(b)) => (a.clone(), b.clone()),
                (Some(p), None) | (None, Some(p)) => return Err(FlowIoError::OrphanFile(root.join(p))),
                (None, None) => {
                    let flow = part.flow.as_ref().expect("group created by some file");
                    return Err(FlowIoError::OrphanFile(root.join(flow)));
                }
            };
            entries.push(ManifestEntry {
                id: format!("{case_name}/{name}"),
                img1,
                img2,
                flow: part.flow.clone(),
                case_label: label,
                split,
            });
        }
    }
    if entries.is_empty() {
        return Err(FlowIoError::EmptyDataset(root.to_path_buf()));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), entries })
}

fn path_str(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl DatasetManifest {
    /// Line-oriented text form, one entry per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let flow = e.flow.as_deref().map(path_str).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                path_str(&e.img1),
                path_str(&e.img2),
                flow,
                e.case_label,
                e.split
            ));
        }
        out
    }

    pub fn from_text(root: impl Into<PathBuf>, text: &str) -> Result<Self, FlowIoError> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |reason: String| FlowIoError::MalformedManifest { line: line_no, reason };
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated columns, found {}", cols.len())));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(bad(format!("duplicate id {}", cols[0])));
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                img1: PathBuf::from(cols[1]),
                img2: PathBuf::from(cols[2]),
                flow: (cols[3] != "-").then(|| PathBuf::from(cols[3])),
                case_label: cols[4].parse().map_err(|e: TypeError| bad(e.to_string()))?,
                split: cols[5].parse().map_err(|e: TypeError| bad(e.to_string()))?,
            });
        }
        Ok(Self { root: root.into(), entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FlowIoError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_text().as_bytes()).map_err(io_err(path))
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, FlowIoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(root, &text)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<FlowSample, FlowIoError> {
        let a = read_image(self.root.join(&entry.img1))?;
        let b = read_image(self.root.join(&entry.img2))?;
        let pair = ImagePair::new(a, b, entry.id.clone())?;
        let gt = entry.flow.as_ref().map(|p| read_flo(self.root.join(p))).transpose()?;
        Ok(FlowSample { id: entry.id.clone(), pair, gt, case_label: entry.case_label, split: entry.split })
    }
}
