//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "FADAPTCK"
//! version    u32 LE   (currently 1)
//! meta_len   u32 LE
//! meta       meta_len bytes of UTF-8 `key=value` lines
//! n_params   u32 LE
//! per parameter:
//!   name_len u16 LE, name bytes
//!   ndim u8, dims as u32 LE
//!   trainable u8
//!   values, little-endian, width given by the `dtype` meta key
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, NetworkSpec, Result, SegnetError};
use crate::autodiff::{ParamTensor, Real, Tensor};

const MAGIC: &[u8; 8] = b"FADAPTCK";
const VERSION: u32 = 1;

/// Provenance of a model. `parent_id` and `fraction` are `None` for a base model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub parent_id: Option<String>,
    pub fraction: Option<usize>,
    /// Optimisation steps spent producing this model from its parent.
    pub iterations: u64,
    pub seed: u64,
    /// Creation time in seconds since the Unix epoch, supplied by the caller
    /// so that reruns can produce identical files.
    pub created: u64,
}

impl CheckpointMeta {
    pub fn base(model_id: impl Into<String>, iterations: u64, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            parent_id: None,
            fraction: None,
            iterations,
            seed,
            created: 0,
        }
    }
}

/// A model together with its provenance record.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn id(&self) -> &str {
        &self.meta.model_id
    }

    /// True when every parameter value is bitwise equal to `other`'s.
    pub fn same_parameters(&self, other: &ModelCheckpoint) -> bool {
        self.model.params().len() == other.model.params().len()
            && self
                .model
                .params()
                .iter()
                .zip(other.model.params())
                .all(|(a, b)| a.name == b.name && bitwise_eq(a.value.data(), b.value.data()))
    }
}

pub(crate) fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn meta_text<T: Real>(spec: &NetworkSpec, meta: &CheckpointMeta) -> String {
    let c = spec.channels;
    let opt = |o: Option<String>| o.unwrap_or_else(|| "-".into());
    format!(
        "model_id={}\nparent_id={}\nfraction={}\niterations={}\nseed={}\ncreated={}\n\
         channels={},{},{},{}\nfc_layers={}\nfc_width={}\nn_classes={}\npatch_size={}\ndtype=f{}\n",
        meta.model_id,
        opt(meta.parent_id.clone()),
        opt(meta.fraction.map(|f| f.to_string())),
        meta.iterations,
        meta.seed,
        meta.created,
        c[0],
        c[1],
        c[2],
        c[3],
        spec.n_fc_layers,
        spec.fc_width,
        spec.n_classes,
        spec.patch_size,
        T::BYTES * 8,
    )
}

pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = meta_text::<T>(model.spec(), meta);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(p.trainable as u8);
        buf.extend_from_slice(&T::to_le_bytes_vec(p.value.data()));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SegnetError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn parse_meta(text: &str) -> Result<(NetworkSpec, CheckpointMeta, String)> {
    let map: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| SegnetError::Format(format!("bad metadata line `{l}`")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| SegnetError::Format(format!("metadata key `{k}` missing")))
    };
    fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
        v.parse()
            .map_err(|_| SegnetError::Format(format!("metadata `{k}` has bad value `{v}`")))
    }
    let channels: Vec<usize> = get("channels")?
        .split(',')
        .map(|v| num("channels", v))
        .collect::<Result<_>>()?;
    let channels: [usize; 4] = channels
        .try_into()
        .map_err(|_| SegnetError::Format("channels needs 4 entries".into()))?;
    let spec = NetworkSpec {
        channels,
        n_fc_layers: num("fc_layers", get("fc_layers")?)?,
        fc_width: num("fc_width", get("fc_width")?)?,
        n_classes: num("n_classes", get("n_classes")?)?,
        patch_size: num("patch_size", get("patch_size")?)?,
    };
    let optional = |k: &str| -> Result<Option<&str>> {
        let v = get(k)?;
        Ok((v != "-").then_some(v))
    };
    let meta = CheckpointMeta {
        model_id: get("model_id")?.to_string(),
        parent_id: optional("parent_id")?.map(str::to_string),
        fraction: optional("fraction")?
            .map(|v| num("fraction", v))
            .transpose()?,
        iterations: num("iterations", get("iterations")?)?,
        seed: num("seed", get("seed")?)?,
        created: num("created", get("created")?)?,
    };
    Ok((spec, meta, get("dtype")?.to_string()))
}

/// Loads a checkpoint stored with element type `T`.
pub fn load_checkpoint_as<T: Real>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(SegnetError::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SegnetError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let meta_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| SegnetError::Format("metadata is not UTF-8".into()))?;
    let (spec, meta, dtype) = parse_meta(text)?;
    if dtype != format!("f{}", T::BYTES * 8) {
        return Err(SegnetError::Format(format!("stored dtype {dtype} does not match")));
    }
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SegnetError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let trainable = r.u8()? != 0;
        let count: usize = shape.iter().product();
        let raw = r.take(count * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::from_le_chunk).collect();
        params.push(ParamTensor {
            name,
            value: Tensor::from_vec(shape, data)?,
            trainable,
        });
    }
    if r.pos != bytes.len() {
        return Err(SegnetError::Format("trailing bytes after parameters".into()));
    }
    Ok((Model::from_parts(spec, params)?, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let (model, meta) = load_checkpoint_as::<f32>(path)?;
    Ok(ModelCheckpoint { model, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::Variant;

    fn sample() -> ModelCheckpoint {
        let mut model = Model::build(NetworkSpec::new(Variant::BaseB), 5).unwrap();
        model.freeze_backbone();
        ModelCheckpoint {
            model,
            meta: CheckpointMeta {
                model_id: "base_b:200:M3".into(),
                parent_id: Some("base_b:200:M2".into()),
                fraction: Some(3),
                iterations: 200,
                seed: 77,
                created: 1_700_000_000,
            },
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&ck.model, &ck.meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.same_parameters(&ck));
        assert_eq!(back.meta.parent_id.as_deref(), Some("base_b:200:M2"));
        // and the bytes are stable
        let again = dir.path().join("m2.ckpt");
        save_checkpoint(&back.model, &back.meta, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn corrupted_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&ck.model, &ck.meta, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SegnetError::Format(_))));
        bytes[0] = b'F';
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(SegnetError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn shape_mismatch_against_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&ck.model, &ck.meta, &path).unwrap();
        let text = fs::read(&path).unwrap();
        // claim a different fc width in the metadata; the stored head no longer fits
        let mut bytes = text.clone();
        let at = text.windows(11).position(|w| w == b"fc_width=64").unwrap();
        bytes[at..at + 11].copy_from_slice(b"fc_width=32");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(SegnetError::ShapeMismatch { .. })
        ));
    }
}
