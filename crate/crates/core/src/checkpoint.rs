//! Tensor archive (`GAGB`) plus a `key=value` metadata sidecar.
//!
//! Archive layout, little-endian throughout:
//!
//! ```text
//! "GAGB" | u32 version = 1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | payload
//! ```
//!
//! `dtype` is 0 for `f32` and 1 for `f64`; the payload is row-major.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GAGB";
pub const VERSION: u32 = 1;

/// Ordered `key=value` pairs; keys are unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `key`, keeping the original position on replace.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(!key.contains('=') && !key.contains('\n') && !value.contains('\n'), "bad metadata entry {key:?}");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Checkpoint(format!("metadata key {key:?} missing")))
    }

    /// Parses a required value with `FromStr`.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| Error::Checkpoint(format!("metadata {key}={raw:?}: {e}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str, what: &str) -> Result<Self> {
        let mut meta = Metadata::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches('\n');
            if !body.is_empty() {
                let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                    what: what.to_string(),
                    offset,
                    detail: format!("expected key=value, got {body:?}"),
                })?;
                if meta.get(k).is_some() {
                    return Err(Error::Parse {
                        what: what.to_string(),
                        offset,
                        detail: format!("duplicate key {k:?}"),
                    });
                }
                meta.entries.push((k.to_string(), v.to_string()));
            }
            offset += line.len();
        }
        Ok(meta)
    }
}

pub fn encode_archive<T: Scalar>(params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: extent too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            match T::DTYPE {
                0 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                what: self.what.to_string(),
                offset: self.bytes.len(),
                detail: format!("truncated while reading {field}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn err(&self, at: usize, detail: String) -> Error {
        Error::Parse {
            what: self.what.to_string(),
            offset: at,
            detail,
        }
    }
}

/// Decodes an archive; `f32` and `f64` payloads are both accepted and cast to `T`.
pub fn decode_archive<T: Scalar>(bytes: &[u8], what: &str) -> Result<ParamSet<T>> {
    let mut rd = Reader { bytes, pos: 0, what };
    if rd.take(4, "magic")? != MAGIC {
        return Err(rd.err(0, "bad magic, expected GAGB".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(rd.err(4, format!("unsupported version {version}")));
    }
    let count = rd.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = rd.u16("name length")? as usize;
        let at = rd.pos;
        let name = std::str::from_utf8(rd.take(len, "name")?).map_err(|_| rd.err(at, "name is not UTF-8".into()))?;
        let at = rd.pos;
        let dtype = rd.u8("dtype")?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(rd.err(at, format!("{name}: unknown dtype {other}"))),
        };
        let rank = rd.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(rd.u32("dims")? as usize);
        }
        let numel = dims.iter().product::<usize>();
        let payload = rd.take(numel * width, "payload")?;
        let data: Vec<T> = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect()
        };
        let tensor = Tensor::new(dims, data).map_err(|e| rd.err(at, format!("{name}: {e}")))?;
        params.push(name, tensor).map_err(|e| rd.err(at, e.to_string()))?;
    }
    if rd.pos != bytes.len() {
        return Err(rd.err(rd.pos, format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(params)
}

/// Sidecar path: the archive path with its extension replaced by `meta`.
pub fn meta_path(archive: &Path) -> PathBuf {
    archive.with_extension("meta")
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamSet<T>, meta: &Metadata) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, encode_archive(params)?).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    std::fs::write(&mp, meta.to_text()).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_archive(&bytes, &path.display().to_string())?;
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok((params, Metadata::from_text(&text, &mp.display().to_string())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("b.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2)).unwrap();
        p.push("a.bias", Tensor::full(&[1], f32::MIN_POSITIVE)).unwrap();
        p
    }

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let p = sample();
        let bytes = encode_archive(&p).unwrap();
        let q: ParamSet<f32> = decode_archive(&bytes, "t").unwrap();
        assert_eq!(q.name(0), "b.weight");
        assert_eq!(q.name(1), "a.bias");
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            assert_eq!(a.dims(), b.dims());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn layout_prefix() {
        let bytes = encode_archive(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"GAGB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &8u16.to_le_bytes());
        assert_eq!(&bytes[14..22], b"b.weight");
        assert_eq!(bytes[22], 0);
        assert_eq!(bytes[23], 2);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let good = encode_archive(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_archive::<f32>(&bad, "t"), Err(Error::Parse { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_archive::<f32>(&bad, "t").is_err());
        assert!(decode_archive::<f32>(&good[..good.len() - 1], "t").is_err());
        let mut bad = good.clone();
        bad.push(0);
        assert!(decode_archive::<f32>(&bad, "t").is_err());
    }

    #[test]
    fn metadata_text() {
        let mut m = Metadata::new();
        m.set("profile", "desk");
        m.set("tau", 0.3);
        m.set("profile", "full");
        assert_eq!(m.to_text(), "profile=full\ntau=0.3\n");
        let back = Metadata::from_text(&m.to_text(), "t").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse::<f64>("tau").unwrap(), 0.3);
        assert!(back.parse::<f64>("kappa").is_err());
        assert!(Metadata::from_text("a=1\nnoequals\n", "t").is_err());
        assert!(Metadata::from_text("a=1\na=2\n", "t").is_err());
    }
}
