//! MetaImage-style volumes: an ASCII `.mhd` header next to a raw payload.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::posthoc::FeatureTensor;
use crate::volgrid::{BinaryMask, ClassTable, Dims, LabelVolume, ProbVolume, VoxelSpacing};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UInt8,
    Float64,
}

impl ElementType {
    pub fn met_name(&self) -> &'static str {
        match self {
            ElementType::UInt8 => "MET_UCHAR",
            ElementType::Float64 => "MET_DOUBLE",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ElementType::UInt8 => 1,
            ElementType::Float64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(ElementType::UInt8),
            "MET_DOUBLE" => Some(ElementType::Float64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContentKind {
    Labels,
    Probabilities,
    Tensor,
}

impl ContentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ContentKind::Labels => "labels",
            ContentKind::Probabilities => "probabilities",
            ContentKind::Tensor => "tensor",
        }
    }
}

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub element_type: ElementType,
    pub channels: usize,
    pub content: ContentKind,
    pub big_endian: bool,
    /// Raw payload path, resolved against the header's directory.
    pub data_file: PathBuf,
    pub class_names: Option<Vec<String>>,
    pub normalized: Option<bool>,
}

impl VolumeHeader {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.voxel_count() * self.channels * self.element_type.size()) as u64
    }
}

/// Any volume the format can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Labels(LabelVolume),
    Probabilities(ProbVolume<f64>),
    Tensor(FeatureTensor<f64>),
}

impl VolumeData {
    pub fn kind(&self) -> ContentKind {
        match self {
            VolumeData::Labels(_) => ContentKind::Labels,
            VolumeData::Probabilities(_) => ContentKind::Probabilities,
            VolumeData::Tensor(_) => ContentKind::Tensor,
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

/// Parses header text. `path` is only used for error messages and to resolve
/// the data file.
pub fn parse_header(text: &str, path: &Path) -> Result<VolumeHeader> {
    let err = |line: usize, field: &str, message: String| Error::Header {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message,
    };
    let mut ndims: Option<(usize, usize)> = None;
    let mut dims: Option<(usize, Vec<usize>)> = None;
    let mut spacing: Option<(usize, Vec<f64>)> = None;
    let mut element_type = None;
    let mut channels = 1usize;
    let mut content = None;
    let mut big_endian = false;
    let mut data_file = None;
    let mut class_names = None;
    let mut normalized = None;
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(err(line, trimmed, "expected `Key = Value`".into()));
        };
        let (key, value) = (key.trim(), value.trim());
        let numbers = |v: &str| -> Result<Vec<f64>> {
            v.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(line, key, format!("`{t}` is not a number")))
                })
                .collect()
        };
        let counts = |v: &str| -> Result<Vec<usize>> {
            v.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| err(line, key, format!("`{t}` is not a non-negative integer")))
                })
                .collect()
        };
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(err(line, key, format!("unsupported object type `{value}`")));
                }
            }
            "NDims" => {
                let n = counts(value)?;
                if n.len() != 1 || !(2..=3).contains(&n[0]) {
                    return Err(err(line, key, format!("`{value}` must be 2 or 3")));
                }
                ndims = Some((n[0], line));
            }
            "DimSize" => dims = Some((line, counts(value)?)),
            "ElementSpacing" | "ElementSize" => {
                let s = numbers(value)?;
                if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(err(line, key, format!("`{value}` must be finite and positive")));
                }
                spacing = Some((line, s));
            }
            "ElementType" => {
                element_type = Some(ElementType::parse(value).ok_or_else(|| Error::ElementType(value.to_string()))?)
            }
            "ElementNumberOfChannels" => {
                let c = counts(value)?;
                if c.len() != 1 || c[0] == 0 {
                    return Err(err(line, key, format!("`{value}` must be a positive integer")));
                }
                channels = c[0];
            }
            "ContentKind" => {
                content = Some(match value {
                    "labels" => ContentKind::Labels,
                    "probabilities" => ContentKind::Probabilities,
                    "tensor" => ContentKind::Tensor,
                    _ => return Err(err(line, key, format!("unknown content kind `{value}`"))),
                })
            }
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                big_endian = parse_bool(value).ok_or_else(|| err(line, key, format!("`{value}` is not True/False")))?
            }
            "BinaryData" => {
                if parse_bool(value) != Some(true) {
                    return Err(err(line, key, "only binary payloads are supported".into()));
                }
            }
            "CompressedData" => {
                if parse_bool(value) != Some(false) {
                    return Err(err(line, key, "compressed payloads are not supported".into()));
                }
            }
            "ClassNames" => class_names = Some(value.split(';').map(|s| s.trim().to_string()).collect::<Vec<_>>()),
            "ProbabilityNormalized" => {
                normalized = Some(parse_bool(value).ok_or_else(|| err(line, key, format!("`{value}` is not True/False")))?)
            }
            "ElementDataFile" => {
                if value.is_empty() || value == "LOCAL" || value.starts_with("LIST") || value.contains('%') {
                    return Err(err(line, key, format!("only a single detached data file is supported, got `{value}`")));
                }
                let dir = path.parent().unwrap_or(Path::new(""));
                data_file = Some(dir.join(value));
            }
            _ => {}
        }
    }

    let missing = |field: &str| err(last_line, field, "required field missing".into());
    let (n, ndims_line) = ndims.ok_or_else(|| missing("NDims"))?;
    let (dims_line, dims) = dims.ok_or_else(|| missing("DimSize"))?;
    if dims.len() != n {
        return Err(err(dims_line, "DimSize", format!("{} sizes for NDims = {n}", dims.len())));
    }
    let spacing = match spacing {
        Some((line, s)) => {
            if s.len() != n {
                return Err(err(line, "ElementSpacing", format!("{} values for NDims = {n}", s.len())));
            }
            s
        }
        None => vec![1.0; n],
    };
    let element_type = element_type.ok_or_else(|| missing("ElementType"))?;
    let data_file = data_file.ok_or_else(|| missing("ElementDataFile"))?;
    let content = content.unwrap_or(match (element_type, n) {
        (ElementType::UInt8, _) => ContentKind::Labels,
        (ElementType::Float64, 3) => ContentKind::Probabilities,
        (ElementType::Float64, _) => ContentKind::Tensor,
    });
    let expected_type = match content {
        ContentKind::Labels => ElementType::UInt8,
        _ => ElementType::Float64,
    };
    if element_type != expected_type {
        return Err(Error::ElementType(format!(
            "{} for {} content",
            element_type.met_name(),
            content.name()
        )));
    }
    if content != ContentKind::Tensor && n != 3 {
        return Err(err(ndims_line, "NDims", format!("{} volumes must be 3-D", content.name())));
    }
    if content == ContentKind::Labels && channels != 1 {
        return Err(err(last_line, "ElementNumberOfChannels", "label volumes have one channel".into()));
    }
    Ok(VolumeHeader {
        dims,
        spacing,
        element_type,
        channels,
        content,
        big_endian,
        data_file,
        class_names,
        normalized,
    })
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_header(&text, path)
}

fn read_payload(h: &VolumeHeader) -> Result<Vec<u8>> {
    let bytes = fs::read(&h.data_file).map_err(|e| Error::io(&h.data_file, e))?;
    if bytes.len() as u64 != h.payload_bytes() {
        return Err(Error::SizeMismatch {
            path: h.data_file.clone(),
            expected: h.payload_bytes(),
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Decodes interleaved f64 samples (`channels` per voxel) into channel-major order.
fn decode_f64(bytes: &[u8], channels: usize, big_endian: bool) -> Vec<f64> {
    let n = bytes.len() / 8 / channels;
    let mut out = vec![0.0; n * channels];
    for (j, chunk) in bytes.chunks_exact(8).enumerate() {
        let arr: [u8; 8] = chunk.try_into().expect("8-byte chunk");
        let v = if big_endian { f64::from_be_bytes(arr) } else { f64::from_le_bytes(arr) };
        let (voxel, c) = (j / channels, j % channels);
        out[c * n + voxel] = v;
    }
    out
}

fn encode_f64(data: &[f64], channels: usize) -> Vec<u8> {
    let n = data.len() / channels;
    let mut out = Vec::with_capacity(data.len() * 8);
    for voxel in 0..n {
        for c in 0..channels {
            out.extend_from_slice(&data[c * n + voxel].to_le_bytes());
        }
    }
    out
}

fn dims3(h: &VolumeHeader) -> Dims {
    Dims::new(h.dims[0], h.dims[1], h.dims[2])
}

/// Reads any supported volume. Label volumes use the class names stored in
/// the header, or the default lesion table when there are none.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeData> {
    read_volume_with_classes(path, None)
}

/// Like [`read_volume`], with `classes` overriding the table for label volumes.
pub fn read_volume_with_classes(path: impl AsRef<Path>, classes: Option<&ClassTable>) -> Result<VolumeData> {
    let path = path.as_ref();
    let h = read_header(path)?;
    let bytes = read_payload(&h)?;
    let invalid = |e: Error| match e {
        Error::InvalidData(m) => Error::InvalidData(format!("{}: {m}", path.display())),
        other => other,
    };
    match h.content {
        ContentKind::Labels => {
            let spacing = VoxelSpacing::new(h.spacing[0], h.spacing[1], h.spacing[2])?;
            let table = match (classes, &h.class_names) {
                (Some(t), _) => t.clone(),
                (None, Some(names)) => ClassTable::new(names.iter().cloned())?,
                (None, None) => ClassTable::default(),
            };
            LabelVolume::new(dims3(&h), spacing, bytes, table)
                .map(VolumeData::Labels)
                .map_err(invalid)
        }
        ContentKind::Probabilities => {
            let spacing = VoxelSpacing::new(h.spacing[0], h.spacing[1], h.spacing[2])?;
            let data = decode_f64(&bytes, h.channels, h.big_endian);
            let dims = dims3(&h);
            let p = match h.normalized {
                Some(flag) => ProbVolume::new(dims, spacing, h.channels, data, flag),
                None => ProbVolume::new(dims, spacing, h.channels, data.clone(), true)
                    .or_else(|_| ProbVolume::new(dims, spacing, h.channels, data, false)),
            };
            p.map(VolumeData::Probabilities).map_err(invalid)
        }
        ContentKind::Tensor => {
            let data = decode_f64(&bytes, h.channels, h.big_endian);
            FeatureTensor::new(h.channels, h.dims.clone(), h.spacing.clone(), data)
                .map(VolumeData::Tensor)
                .map_err(invalid)
        }
    }
}

fn wrong_kind(path: &Path, want: ContentKind, got: ContentKind) -> Error {
    Error::InvalidData(format!(
        "{}: expected {} content, found {}",
        path.display(),
        want.name(),
        got.name()
    ))
}

pub fn read_labels(path: impl AsRef<Path>, classes: Option<&ClassTable>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match read_volume_with_classes(path, classes)? {
        VolumeData::Labels(v) => Ok(v),
        other => Err(wrong_kind(path, ContentKind::Labels, other.kind())),
    }
}

pub fn read_probabilities(path: impl AsRef<Path>) -> Result<ProbVolume<f64>> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeData::Probabilities(p) => Ok(p),
        other => Err(wrong_kind(path, ContentKind::Probabilities, other.kind())),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor<f64>> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeData::Tensor(t) => Ok(t),
        other => Err(wrong_kind(path, ContentKind::Tensor, other.kind())),
    }
}

/// Reads a uint8 label-style volume as a mask: nonzero voxels are inside.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let h = read_header(path)?;
    if h.content != ContentKind::Labels {
        return Err(wrong_kind(path, ContentKind::Labels, h.content));
    }
    let bytes = read_payload(&h)?;
    let spacing = VoxelSpacing::new(h.spacing[0], h.spacing[1], h.spacing[2])?;
    BinaryMask::new(dims3(&h), spacing, bytes.into_iter().map(|b| b != 0).collect())
}

/// Raw payload path written next to `header`: same stem, `.raw` extension.
pub fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `<path>` (header) and the `.raw` payload beside it.
pub fn write_volume(v: &VolumeData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = raw_path_for(path);
    if raw == path {
        return Err(Error::InvalidData(format!(
            "{}: header path must not end in .raw",
            path.display()
        )));
    }
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidData(format!("{}: unusable file name", path.display())))?
        .to_string();

    let (dims, spacing, element_type, channels, payload): (Vec<usize>, Vec<f64>, ElementType, usize, Vec<u8>) = match v {
        VolumeData::Labels(l) => (
            l.dims().as_array().to_vec(),
            l.spacing().as_array().to_vec(),
            ElementType::UInt8,
            1,
            l.data().to_vec(),
        ),
        VolumeData::Probabilities(p) => (
            p.dims().as_array().to_vec(),
            p.spacing().as_array().to_vec(),
            ElementType::Float64,
            p.num_classes(),
            encode_f64(p.data(), p.num_classes()),
        ),
        VolumeData::Tensor(t) => (
            t.spatial().to_vec(),
            t.spacing().to_vec(),
            ElementType::Float64,
            t.channels(),
            encode_f64(t.data(), t.channels()),
        ),
    };

    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = {}", dims.len());
    let _ = writeln!(header, "BinaryData = True");
    let _ = writeln!(header, "BinaryDataByteOrderMSB = False");
    let _ = writeln!(header, "CompressedData = False");
    let _ = writeln!(header, "DimSize = {}", join(&dims));
    let _ = writeln!(header, "ElementSpacing = {}", join(&spacing));
    if channels > 1 || element_type == ElementType::Float64 {
        let _ = writeln!(header, "ElementNumberOfChannels = {channels}");
    }
    let _ = writeln!(header, "ContentKind = {}", v.kind().name());
    match v {
        VolumeData::Labels(l) => {
            let _ = writeln!(header, "ClassNames = {}", l.classes().names().join(";"));
        }
        VolumeData::Probabilities(p) => {
            let flag = if p.is_normalized() { "True" } else { "False" };
            let _ = writeln!(header, "ProbabilityNormalized = {flag}");
        }
        VolumeData::Tensor(_) => {}
    }
    let _ = writeln!(header, "ElementType = {}", element_type.met_name());
    let _ = writeln!(header, "ElementDataFile = {raw_name}");

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&VolumeData::Labels(v.clone()), path)
}

pub fn write_probabilities(p: &ProbVolume<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&VolumeData::Probabilities(p.clone()), path)
}

pub fn write_tensor(t: &FeatureTensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&VolumeData::Tensor(t.clone()), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(lines: &[&str]) -> Result<VolumeHeader> {
        parse_header(&lines.join("\n"), Path::new("/tmp/x.mhd"))
    }

    const MINIMAL: [&str; 4] = [
        "NDims = 3",
        "DimSize = 2 2 2",
        "ElementType = MET_UCHAR",
        "ElementDataFile = x.raw",
    ];

    #[test]
    fn minimal_header_defaults() {
        let h = header(&MINIMAL).unwrap();
        assert_eq!(h.dims, vec![2, 2, 2]);
        assert_eq!(h.spacing, vec![1.0; 3]);
        assert_eq!(h.content, ContentKind::Labels);
        assert_eq!(h.data_file, PathBuf::from("/tmp/x.raw"));
        assert_eq!(h.payload_bytes(), 8);
    }

    fn header_error(lines: &[&str]) -> (usize, String) {
        match header(lines) {
            Err(Error::Header { line, field, .. }) => (line, field),
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_name_line_and_field() {
        assert_eq!(header_error(&["NDims = 3", "DimSize = 2 x 2"]), (2, "DimSize".into()));
        assert_eq!(header_error(&["NDims = 4"]), (1, "NDims".into()));
        assert_eq!(header_error(&["NDims = 3", "garbage"]), (2, "garbage".into()));
        assert_eq!(header_error(&["NDims = 3", "DimSize = 2 2"]), (2, "DimSize".into()));
        assert_eq!(
            header_error(&["NDims = 3", "DimSize = 2 2 2", "ElementSpacing = 1 0 1"]),
            (3, "ElementSpacing".into())
        );
        assert_eq!(header_error(&MINIMAL[..3]), (3, "ElementDataFile".into()));
        assert_eq!(
            header_error(&["NDims = 3", "DimSize = 2 2 2", "ElementType = MET_UCHAR", "ElementDataFile = LOCAL"]),
            (4, "ElementDataFile".into())
        );
    }

    #[test]
    fn unknown_element_type() {
        let e = header(&["NDims = 3", "DimSize = 1 1 1", "ElementType = MET_FLOAT"]).unwrap_err();
        assert!(matches!(e, Error::ElementType(t) if t == "MET_FLOAT"));
    }

    #[test]
    fn interleave_roundtrip() {
        let data = vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7];
        let bytes = encode_f64(&data, 2);
        assert_eq!(&bytes[..8], &0.1f64.to_le_bytes());
        assert_eq!(&bytes[8..16], &0.9f64.to_le_bytes());
        assert_eq!(decode_f64(&bytes, 2, false), data);
    }
}
