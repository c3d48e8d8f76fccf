//! MetaImage (`.mhd` + `.raw`) subset: 3D, uncompressed, little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Geometry, LabelVolume, Volume, Volume3D};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    /// Signed 16-bit HU.
    Short,
    /// Unsigned 8-bit labels.
    UChar,
    /// IEEE-754 binary32, used for probability maps.
    Float,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(CoreError::Format(format!("unsupported element type `{}`", other))),
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

/// A volume as stored on disk; the element type selects the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Hu(Volume3D),
    Labels(LabelVolume),
    Float(Volume<f32>),
}

impl AnyVolume {
    pub fn into_hu(self) -> Result<Volume3D> {
        match self {
            AnyVolume::Hu(v) => Ok(v),
            _ => Err(CoreError::Format("expected a MET_SHORT image".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Labels(v) => Ok(v),
            _ => Err(CoreError::Format("expected a MET_UCHAR label map".into())),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        match self {
            AnyVolume::Hu(v) => v.geometry(),
            AnyVolume::Labels(v) => v.geometry(),
            AnyVolume::Float(v) => v.geometry(),
        }
    }
}

impl From<Volume3D> for AnyVolume {
    fn from(v: Volume3D) -> Self {
        AnyVolume::Hu(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Labels(v)
    }
}

impl From<Volume<f32>> for AnyVolume {
    fn from(v: Volume<f32>) -> Self {
        AnyVolume::Float(v)
    }
}

fn fmt3<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Header text in the fixed key order.
pub(crate) fn header_text(g: &Geometry, et: ElementType, data_file: &str) -> String {
    format!(
        "ObjectType = Image\nNDims = 3\nDimSize = {}\nElementSpacing = {}\nOffset = {}\nElementType = {}\nElementByteOrderMSB = False\nElementDataFile = {}\n",
        fmt3(&g.dims),
        fmt3(&g.spacing),
        fmt3(&g.origin),
        et.tag(),
        data_file
    )
}

/// Writes `<path>` (header) and the sibling `.raw` payload. HU voxels are
/// rounded to the nearest integer and saturated to the signed 16-bit range.
pub fn write_volume(v: &AnyVolume, path: &Path) -> Result<()> {
    let raw = raw_path(path);
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CoreError::Format(format!("bad output path {}", path.display())))?
        .to_string();
    let (et, payload): (ElementType, Vec<u8>) = match v {
        AnyVolume::Hu(v) => (
            ElementType::Short,
            v.voxels()
                .iter()
                .flat_map(|&x| (x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes())
                .collect(),
        ),
        AnyVolume::Labels(v) => (ElementType::UChar, v.voxels().to_vec()),
        AnyVolume::Float(v) => (ElementType::Float, v.voxels().iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    fs::write(path, header_text(v.geometry(), et, &name)).map_err(|e| CoreError::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| CoreError::io(&raw, e))?;
    Ok(())
}

fn parse_triple<T: std::str::FromStr>(key: &str, s: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(CoreError::Format(format!("`{}` needs three values, got `{}`", key, s)));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| CoreError::Format(format!("bad value `{}` for `{}`", p, key)))?);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Reads a header and its payload. The element type decides the variant.
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut keys: HashMap<String, String> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Format(format!("malformed header line `{}`", line)))?;
        if keys.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(CoreError::Format(format!("duplicate header key `{}`", k.trim())));
        }
    }
    let get = |k: &str| keys.get(k).map(String::as_str).ok_or_else(|| CoreError::Format(format!("missing header key `{}`", k)));
    if get("ObjectType")? != "Image" {
        return Err(CoreError::Format("ObjectType must be Image".into()));
    }
    if get("NDims")? != "3" {
        return Err(CoreError::Format("only NDims = 3 is supported".into()));
    }
    if !get("ElementByteOrderMSB")?.eq_ignore_ascii_case("false") {
        return Err(CoreError::Format("only little-endian payloads are supported".into()));
    }
    if keys.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(CoreError::Format("compressed payloads are not supported".into()));
    }
    let dims: [usize; 3] = parse_triple("DimSize", get("DimSize")?)?;
    let spacing: [f64; 3] = parse_triple("ElementSpacing", get("ElementSpacing")?)?;
    let origin: [f64; 3] = parse_triple("Offset", get("Offset")?)?;
    let et = ElementType::parse(get("ElementType")?)?;
    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| CoreError::Format(e.to_string()))?;
    let data_file = path.with_file_name(get("ElementDataFile")?);
    let payload = fs::read(&data_file).map_err(|e| CoreError::io(&data_file, e))?;
    let expected = geometry.len() * et.size();
    if payload.len() != expected {
        return Err(CoreError::Format(format!(
            "DimSize {:?} needs {} payload bytes, {} has {}",
            dims,
            expected,
            data_file.display(),
            payload.len()
        )));
    }
    Ok(match et {
        ElementType::Short => AnyVolume::Hu(Volume::new(
            geometry,
            payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        )?),
        ElementType::UChar => {
            let labels = Volume::new(geometry, payload)?;
            labels.validate_labels().map_err(|e| CoreError::Format(e.to_string()))?;
            AnyVolume::Labels(labels)
        }
        ElementType::Float => AnyVolume::Float(Volume::new(
            geometry,
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_file_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("c.mhd");
        fs::write(
            &hdr,
            "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_SHORT\nElementByteOrderMSB = False\nElementDataFile = c.raw\n",
        )
        .unwrap();
        // 100 = 0x0064, little-endian
        fs::write(dir.path().join("c.raw"), [0x64u8, 0x00].repeat(8)).unwrap();
        let v = read_volume(&hdr).unwrap().into_hu().unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.voxels().iter().all(|&x| x == 100.0));
    }

    #[test]
    fn payload_bytes_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::isotropic([1, 1, 1], 1.0).unwrap();
        let hdr = dir.path().join("a.mhd");
        write_volume(&Volume::new(g, vec![-1024.0]).unwrap().into(), &hdr).unwrap();
        assert_eq!(fs::read(dir.path().join("a.raw")).unwrap(), vec![0x00, 0xFC]);
        let lab = dir.path().join("l.mhd");
        write_volume(&Volume::new(g, vec![7u8]).unwrap().into(), &lab).unwrap();
        assert_eq!(fs::read(dir.path().join("l.raw")).unwrap(), vec![0x07]);
    }

    #[test]
    fn size_mismatch_and_duplicate_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("s.mhd");
        let body = "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_SHORT\nElementByteOrderMSB = False\nElementDataFile = s.raw\n";
        fs::write(&hdr, body).unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 14]).unwrap();
        assert!(matches!(read_volume(&hdr), Err(CoreError::Format(_))));
        fs::write(&hdr, format!("{}NDims = 3\n", body)).unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 16]).unwrap();
        let err = read_volume(&hdr).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{}", err);
        fs::write(&hdr, body.replace("MET_SHORT", "MET_DOUBLE")).unwrap();
        assert!(read_volume(&hdr).is_err());
        fs::write(&hdr, body.replace("Offset = 0 0 0\n", "")).unwrap();
        assert!(read_volume(&hdr).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn header_key_order() {
        let g = Geometry::new([3, 2, 1], [0.5, 0.75, 2.0], [-1.5, 0.0, 10.0]).unwrap();
        let text = header_text(&g, ElementType::UChar, "x.raw");
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(
            keys,
            ["ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementByteOrderMSB", "ElementDataFile"]
        );
        assert!(text.contains("ElementSpacing = 0.5 0.75 2\n"));
    }
}
