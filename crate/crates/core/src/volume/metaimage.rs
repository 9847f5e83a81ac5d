//! MetaImage (`.mhd` header + `.raw` payload) subset reader and writer.
//!
//! Supported element types and the volume kind they map to:
//!
//! | ElementType | NDims | kind |
//! |-------------|-------|------|
//! | `MET_SHORT` | 3 | [`Volume3D`] (HU) |
//! | `MET_FLOAT` | 3 | [`Volume3D`] (reals) |
//! | `MET_UCHAR` | 3 | [`LabelVolume`] |
//! | `MET_FLOAT` | 4 | [`ProbVolume`], class axis last |
//!
//! Payloads are uncompressed little-endian, x fastest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{normalize_planes, Grid, LabelVolume, ProbVolume, Scalars, Volume3D};
use crate::error::{Error, Result};

/// Row sums further than this from 1 are rejected on load; smaller
/// deviations are renormalised.
const LOAD_SUM_TOLERANCE: f64 = 1e-3;

/// A volume of any supported kind, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(Volume3D),
    Prob(ProbVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn grid(&self) -> &Grid {
        match self {
            AnyVolume::Scalar(v) => v.grid(),
            AnyVolume::Prob(v) => v.grid(),
            AnyVolume::Label(v) => v.grid(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            AnyVolume::Scalar(_) => "scalar volume",
            AnyVolume::Prob(_) => "probability volume",
            AnyVolume::Label(_) => "label volume",
        }
    }
}

impl From<Volume3D> for AnyVolume {
    fn from(v: Volume3D) -> Self {
        AnyVolume::Scalar(v)
    }
}

impl From<ProbVolume> for AnyVolume {
    fn from(v: ProbVolume) -> Self {
        AnyVolume::Prob(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Label(v)
    }
}

/// Borrowed view accepted by [`save_volume`].
#[derive(Clone, Copy, Debug)]
pub enum VolumeRef<'a> {
    Scalar(&'a Volume3D),
    Prob(&'a ProbVolume),
    Label(&'a LabelVolume),
}

impl<'a> From<&'a Volume3D> for VolumeRef<'a> {
    fn from(v: &'a Volume3D) -> Self {
        VolumeRef::Scalar(v)
    }
}

impl<'a> From<&'a ProbVolume> for VolumeRef<'a> {
    fn from(v: &'a ProbVolume) -> Self {
        VolumeRef::Prob(v)
    }
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Label(v)
    }
}

impl<'a> From<&'a AnyVolume> for VolumeRef<'a> {
    fn from(v: &'a AnyVolume) -> Self {
        match v {
            AnyVolume::Scalar(v) => VolumeRef::Scalar(v),
            AnyVolume::Prob(v) => VolumeRef::Prob(v),
            AnyVolume::Label(v) => VolumeRef::Label(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElementType {
    Short,
    UChar,
    Float,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::UChar => 1,
            ElementType::Float => 4,
        }
    }
}

struct Header {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    element: ElementType,
    data_file: PathBuf,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut keys: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("line without '=': {line:?}")))?;
        keys.insert(k.trim(), v.trim());
    }
    let get = |k: &str| keys.get(k).copied();
    let require = |k: &str| get(k).ok_or_else(|| malformed(path, format!("missing {k}")));

    if let Some(t) = get("ObjectType") {
        if t != "Image" {
            return Err(malformed(path, format!("ObjectType {t} is not Image")));
        }
    }
    for key in ["ElementByteOrderMSB", "BinaryDataByteOrderMSB"] {
        if let Some(v) = get(key) {
            if !v.eq_ignore_ascii_case("false") {
                return Err(Error::UnsupportedElementType(format!(
                    "big-endian payload ({key} = {v})"
                )));
            }
        }
    }
    if let Some(v) = get("CompressedData") {
        if !v.eq_ignore_ascii_case("false") {
            return Err(Error::UnsupportedElementType("compressed payload".into()));
        }
    }
    if let Some(v) = get("ElementNumberOfChannels") {
        if v != "1" {
            return Err(Error::UnsupportedElementType(format!(
                "ElementNumberOfChannels = {v}"
            )));
        }
    }

    let ndims: usize = require("NDims")?
        .parse()
        .map_err(|_| malformed(path, "NDims is not an integer"))?;
    if !(ndims == 3 || ndims == 4) {
        return Err(malformed(path, format!("NDims = {ndims}, expected 3 or 4")));
    }
    let dims = require("DimSize")?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| malformed(path, "DimSize has a non-integer entry"))?;
    if dims.len() != ndims || dims.iter().any(|&d| d == 0) {
        return Err(malformed(
            path,
            format!("DimSize {dims:?} must hold {ndims} positive integers"),
        ));
    }
    let spacing = match get("ElementSpacing").or_else(|| get("ElementSize")) {
        Some(s) => s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| malformed(path, "ElementSpacing has a non-numeric entry"))?,
        None => vec![1.0; ndims],
    };
    if spacing.len() < 3 || spacing.len() > ndims {
        return Err(malformed(
            path,
            format!("ElementSpacing holds {} entries for NDims {ndims}", spacing.len()),
        ));
    }
    let element = ElementType::parse(require("ElementType")?)?;
    let data_file = require("ElementDataFile")?;
    if data_file.eq_ignore_ascii_case("LOCAL") || data_file.starts_with("LIST") {
        return Err(Error::UnsupportedElementType(format!(
            "ElementDataFile = {data_file}"
        )));
    }
    let data_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file);
    Ok(Header {
        dims,
        spacing,
        element,
        data_file,
    })
}

/// Loads any supported MetaImage volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &text)?;
    let spacing = [header.spacing[0], header.spacing[1], header.spacing[2]];
    let grid = Grid::new([header.dims[0], header.dims[1], header.dims[2]], spacing)?;
    let channels = header.dims.get(3).copied().unwrap_or(1);
    let expected = grid.len() * channels;

    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let size = header.element.size();
    if bytes.len() != expected * size {
        return Err(Error::ElementCountMismatch {
            expected,
            found: bytes.len() / size,
        });
    }

    match (header.element, header.dims.len()) {
        (ElementType::Short, 3) => {
            let data = bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            Ok(AnyVolume::Scalar(Volume3D::new(grid, Scalars::Short(data))?))
        }
        (ElementType::Float, 3) => Ok(AnyVolume::Scalar(Volume3D::new(
            grid,
            Scalars::Float(decode_f32(&bytes)),
        )?)),
        (ElementType::UChar, 3) => Ok(AnyVolume::Label(LabelVolume::new(grid, bytes)?)),
        (ElementType::Float, 4) => {
            let mut probs = decode_f32(&bytes);
            check_distribution(&probs, grid.len(), channels)?;
            let n = grid.len();
            let off = (0..n).any(|i| {
                let s: f64 = (0..channels).map(|c| probs[c * n + i] as f64).sum();
                (s - 1.0).abs() > super::PROB_SUM_TOLERANCE as f64
            });
            if off {
                normalize_planes(&mut probs, n, channels);
            }
            Ok(AnyVolume::Prob(ProbVolume::new(grid, channels, probs)?))
        }
        (e, n) => Err(Error::UnsupportedElementType(format!(
            "{} with NDims = {n}",
            e.name()
        ))),
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn check_distribution(probs: &[f32], n: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidProbabilities(format!(
            "channel axis holds {classes} classes"
        )));
    }
    for i in 0..n {
        let mut s = 0.0f64;
        for c in 0..classes {
            let p = probs[c * n + i];
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::InvalidProbabilities(format!(
                    "voxel {i} class {c} holds {p}"
                )));
            }
            s += p as f64;
        }
        if (s - 1.0).abs() > LOAD_SUM_TOLERANCE {
            return Err(Error::InvalidProbabilities(format!("voxel {i} sums to {s}")));
        }
    }
    Ok(())
}

fn unexpected(path: &Path, want: &str, got: &AnyVolume) -> Error {
    Error::ShapeMismatch(format!(
        "{} holds a {}, expected a {want}",
        path.display(),
        got.kind()
    ))
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    match load_volume(path)? {
        AnyVolume::Scalar(v) => Ok(v),
        other => Err(unexpected(path, "scalar volume", &other)),
    }
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<ProbVolume> {
    let path = path.as_ref();
    match load_volume(path)? {
        AnyVolume::Prob(v) => Ok(v),
        other => Err(unexpected(path, "probability volume", &other)),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match load_volume(path)? {
        AnyVolume::Label(v) => Ok(v),
        other => Err(unexpected(path, "label volume", &other)),
    }
}

/// Writes `path` (header) and a sibling `.raw` payload.
pub fn save_volume<'a>(vol: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let vol = vol.into();
    let (grid, element, channels, payload) = match vol {
        VolumeRef::Scalar(v) => {
            let (element, payload) = match v.data() {
                Scalars::Short(d) => (
                    ElementType::Short,
                    d.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>(),
                ),
                Scalars::Float(d) => (
                    ElementType::Float,
                    d.iter().flat_map(|x| x.to_le_bytes()).collect(),
                ),
            };
            (*v.grid(), element, None, payload)
        }
        VolumeRef::Prob(v) => (
            *v.grid(),
            ElementType::Float,
            Some(v.classes()),
            v.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        VolumeRef::Label(v) => (*v.grid(), ElementType::UChar, None, v.labels().to_vec()),
    };

    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("no file name in {}", path.display())))?
        .to_string_lossy()
        .into_owned();

    let [nx, ny, nz] = grid.dims();
    let [sx, sy, sz] = grid.spacing();
    let (ndims, dim_size, spacing) = match channels {
        Some(c) => (4, format!("{nx} {ny} {nz} {c}"), format!("{sx} {sy} {sz} 1")),
        None => (3, format!("{nx} {ny} {nz}"), format!("{sx} {sy} {sz}")),
    };
    let header = format!(
        "ObjectType = Image\n\
         NDims = {ndims}\n\
         DimSize = {dim_size}\n\
         ElementSpacing = {spacing}\n\
         ElementType = {}\n\
         ElementByteOrderMSB = False\n\
         ElementDataFile = {raw_name}\n",
        element.name()
    );
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}
