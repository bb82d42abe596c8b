//! Single-file MetaImage (`.mha`) reader and writer.
//!
//! Only the subset needed by the pipeline is supported: three dimensions, an
//! uncompressed little-endian payload stored after the header
//! (`ElementDataFile = LOCAL`), and element types `MET_SHORT` (intensity
//! images) or `MET_UCHAR` (label maps). See `docs/formats.md` for the exact
//! header layout.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Geometry, LabelMap3, Result, Volume3, VolumeError};

/// A volume read from disk; the kind is decided by the element type.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaVolume {
    Image(Volume3),
    Labels(LabelMap3),
}

impl MetaVolume {
    fn kind(&self) -> &'static str {
        match self {
            MetaVolume::Image(_) => "image",
            MetaVolume::Labels(_) => "label",
        }
    }
}

fn fmt_triplet<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn header(geometry: &Geometry, element_type: &str) -> String {
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {}\n\
         ElementSpacing = {}\n\
         Offset = {}\n\
         ElementType = {}\n\
         ElementDataFile = LOCAL\n",
        fmt_triplet(&geometry.dims),
        fmt_triplet(&geometry.spacing),
        fmt_triplet(&geometry.origin),
        element_type
    )
}

/// Writes an intensity image as `MET_SHORT`. Every voxel must be an integer
/// in the `i16` range so that the file round-trips exactly.
pub fn write_volume(volume: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    volume.geometry().validate()?;
    let mut payload = Vec::with_capacity(volume.voxels().len() * 2);
    for (index, &value) in volume.voxels().iter().enumerate() {
        if !value.is_finite() {
            return Err(VolumeError::NonFinite(index));
        }
        if value.fract() != 0.0 || value < i16::MIN as f32 || value > i16::MAX as f32 {
            return Err(VolumeError::NotRepresentable { index, value });
        }
        payload.extend_from_slice(&(value as i16).to_le_bytes());
    }
    write_file(path.as_ref(), header(volume.geometry(), "MET_SHORT"), &payload)
}

/// Writes a label map as `MET_UCHAR`.
pub fn write_labels(labels: &LabelMap3, path: impl AsRef<Path>) -> Result<()> {
    labels.geometry().validate()?;
    write_file(
        path.as_ref(),
        header(labels.geometry(), "MET_UCHAR"),
        labels.labels(),
    )
}

fn write_file(path: &Path, header: String, payload: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(header.as_bytes())?;
    f.write_all(payload)?;
    f.flush()?;
    Ok(())
}

fn parse_triplet<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(VolumeError::MalformedHeader(format!(
            "{key} needs 3 values, got `{value}`"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| VolumeError::MalformedHeader(format!("bad {key} value `{p}`")))?,
        );
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Reads either kind of volume, dispatching on `ElementType`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<MetaVolume> {
    let bytes = fs::read(path)?;
    parse(&bytes)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Volume3> {
    match read_volume(path)? {
        MetaVolume::Image(v) => Ok(v),
        other => Err(VolumeError::WrongKind {
            expected: "image",
            found: other.kind(),
        }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap3> {
    match read_volume(path)? {
        MetaVolume::Labels(l) => Ok(l),
        other => Err(VolumeError::WrongKind {
            expected: "label",
            found: other.kind(),
        }),
    }
}

fn parse(bytes: &[u8]) -> Result<MetaVolume> {
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut pos = 0;
    let mut payload_start = None;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| {
                VolumeError::MalformedHeader("header ended before ElementDataFile".into())
            })?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| VolumeError::MalformedHeader("non-UTF-8 header line".into()))?
            .trim_end_matches('\r');
        pos = end + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| VolumeError::MalformedHeader(format!("line without `=`: `{line}`")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let last = key == "ElementDataFile";
        fields.insert(key, value);
        if last {
            payload_start = Some(pos);
            break;
        }
    }
    let payload_start = payload_start
        .ok_or_else(|| VolumeError::MalformedHeader("missing ElementDataFile".into()))?;
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| VolumeError::MalformedHeader(format!("missing key {k}")))
    };

    if get("ObjectType")? != "Image" {
        return Err(VolumeError::MalformedHeader("ObjectType must be Image".into()));
    }
    if get("NDims")? != "3" {
        return Err(VolumeError::MalformedHeader("NDims must be 3".into()));
    }
    if get("ElementDataFile")? != "LOCAL" {
        return Err(VolumeError::MalformedHeader(
            "only ElementDataFile = LOCAL is supported".into(),
        ));
    }
    for (flag, allowed) in [("BinaryDataByteOrderMSB", "False"), ("CompressedData", "False")] {
        if let Some(v) = fields.get(flag) {
            if v != allowed {
                return Err(VolumeError::MalformedHeader(format!("{flag} must be {allowed}")));
            }
        }
    }
    let dims: [usize; 3] = parse_triplet("DimSize", get("DimSize")?)?;
    let spacing: [f64; 3] = parse_triplet("ElementSpacing", get("ElementSpacing")?)?;
    let origin: [f64; 3] = parse_triplet("Offset", get("Offset")?)?;
    let element_type = get("ElementType")?;
    let geometry = Geometry::new(dims, spacing, origin)?;
    let payload = &bytes[payload_start..];
    let expected = geometry.len();

    match element_type {
        "MET_SHORT" => {
            if payload.len() != expected * 2 {
                return Err(VolumeError::ElementCountMismatch {
                    expected,
                    found: payload.len() / 2,
                });
            }
            let voxels = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect();
            Ok(MetaVolume::Image(Volume3::new(geometry, voxels)?))
        }
        "MET_UCHAR" => {
            if payload.len() != expected {
                return Err(VolumeError::ElementCountMismatch {
                    expected,
                    found: payload.len(),
                });
            }
            Ok(MetaVolume::Labels(LabelMap3::new(geometry, payload.to_vec())?))
        }
        other => Err(VolumeError::UnsupportedElementType(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::new([4, 4, 4], [0.9, 0.9, 3.0], [-12.5, 3.25, 100.0]).unwrap()
    }

    #[test]
    fn constant_volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mha");
        let v = Volume3::filled(geom(), 50.0).unwrap();
        write_volume(&v, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.geometry().spacing, [0.9, 0.9, 3.0]);
    }

    #[test]
    fn short_payload_is_count_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mha");
        let mut bytes = header(&geom(), "MET_SHORT").into_bytes();
        bytes.extend(std::iter::repeat_n(0u8, 63 * 2));
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(VolumeError::ElementCountMismatch { expected: 64, found: 63 })
        ));
    }

    #[test]
    fn label_seven_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mha");
        let mut bytes = header(&geom(), "MET_UCHAR").into_bytes();
        let mut payload = vec![0u8; 64];
        payload[10] = 7;
        bytes.extend(payload);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(VolumeError::InvalidLabel { index: 10, value: 7 })
        ));
    }

    #[test]
    fn unsupported_type_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mha");
        let mut bytes = header(&geom(), "MET_FLOAT").into_bytes();
        bytes.extend(vec![0u8; 256]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(VolumeError::UnsupportedElementType(t)) if t == "MET_FLOAT"
        ));

        fs::write(&path, b"ObjectType = Image\nNDims = 2\nElementDataFile = LOCAL\n").unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn labels_roundtrip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mha");
        let l = LabelMap3::new(geom(), (0..64).map(|i| (i % 5) as u8).collect()).unwrap();
        write_labels(&l, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), l);
        assert!(matches!(read_image(&path), Err(VolumeError::WrongKind { .. })));
    }

    #[test]
    fn unrepresentable_intensity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut vox = vec![0.0; 64];
        vox[3] = 0.5;
        let v = Volume3::new(geom(), vox).unwrap();
        assert!(matches!(
            write_volume(&v, dir.path().join("x.mha")),
            Err(VolumeError::NotRepresentable { index: 3, .. })
        ));
    }
}
