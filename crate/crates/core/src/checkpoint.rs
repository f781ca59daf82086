//! Binary tensor archive: magic `IFRP`, a little-endian `u32` format version,
//! then records `{u32 name length, name bytes, u32 rank, u32 extents.., f32
//! payload}` until end of file. All integers and floats are little-endian.
//! The last record, `checksum`, holds the CRC-32 of every byte before it,
//! split into two 16-bit halves so the f32 payload stays exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::params::{ModelParams, Side};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IFRP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM: &str = "checksum";

/// Tensors are held in f64 but stored as f32; values that are not f32-exact
/// are rounded on save.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    records: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name == CHECKSUM {
            return Err(Error::InvalidArgument(format!("record name {CHECKSUM} is reserved")));
        }
        if self.records.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("duplicate record {name}")));
        }
        self.records.push((name, t));
        Ok(())
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no record {name}")))
    }

    /// Stores an unsigned counter; exact up to 2^24.
    pub fn push_counter(&mut self, name: &str, v: u64) -> Result<()> {
        if v > 1 << 24 {
            return Err(Error::InvalidArgument(format!("counter {name} = {v} exceeds f32 range")));
        }
        self.push(name, Tensor::scalar(v as f64))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        let v = self.require(name)?.item().map_err(|_| Error::Corrupt(format!("{name} is not a scalar")))?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Corrupt(format!("{name} = {v} is not a counter")));
        }
        Ok(v as u64)
    }

    /// Stores raw bytes, one value per byte.
    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let t = Tensor::new(&[bytes.len().max(1)], pad_bytes(bytes))?;
        self.push(name, t)
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let t = self.require(name)?;
        let mut out = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if !(0.0..=256.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Corrupt(format!("{name} holds a non-byte value {v}")));
            }
            // 256 marks the padding of an empty byte string
            if v < 256.0 {
                out.push(v as u8);
            }
        }
        Ok(out)
    }

    /// Adds every parameter and buffer of `p` under `prefix`.
    pub fn push_model(&mut self, prefix: &str, p: &ModelParams) -> Result<()> {
        for (k, t) in p.params() {
            self.push(format!("{prefix}.param.{k}"), t.clone())?;
        }
        for (k, t) in p.buffers() {
            self.push(format!("{prefix}.buffer.{k}"), t.clone())?;
        }
        Ok(())
    }

    /// Reads a model stored under `prefix`, checking it against `reference`'s schema.
    pub fn model(&self, prefix: &str, reference: &ModelParams) -> Result<ModelParams> {
        let p = self.model_unchecked(prefix, reference.side())?;
        p.check_schema(reference).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(p)
    }

    pub fn model_unchecked(&self, prefix: &str, side: Side) -> Result<ModelParams> {
        let mut p = ModelParams::new(side);
        let pp = format!("{prefix}.param.");
        let bp = format!("{prefix}.buffer.");
        for (n, t) in &self.records {
            if let Some(k) = n.strip_prefix(&pp) {
                p.insert_param(k, t.clone());
            } else if let Some(k) = n.strip_prefix(&bp) {
                p.insert_buffer(k, t.clone());
            }
        }
        if p.params().is_empty() {
            return Err(Error::Corrupt(format!("checkpoint has no {prefix} parameters")));
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (name, t) in &self.records {
            write_record(&mut out, name, t);
        }
        let crc = crc32fast::hash(&out);
        let halves = Tensor::new(&[2], vec![(crc >> 16) as f64, (crc & 0xffff) as f64]).expect("two values");
        write_record(&mut out, CHECKSUM, &halves);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mut archive = Archive::new();
        let mut checksum = None;
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("record {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("record too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("record {name}: {e}")))?;
            if name == CHECKSUM {
                if r.pos != bytes.len() {
                    return Err(Error::Corrupt("data after the checksum record".into()));
                }
                checksum = Some((start, t));
                break;
            }
            archive
                .push(name, t)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        let (start, t) = checksum.ok_or_else(|| Error::Corrupt("missing checksum record".into()))?;
        let stored = match t.data() {
            &[hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && (0.0..65536.0).contains(&hi) && (0.0..65536.0).contains(&lo) => {
                (hi as u32) << 16 | lo as u32
            }
            _ => return Err(Error::Corrupt("malformed checksum record".into())),
        };
        if crc32fast::hash(&bytes[..start]) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        Ok(archive)
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn pad_bytes(bytes: &[u8]) -> Vec<f64> {
    if bytes.is_empty() {
        vec![256.0]
    } else {
        bytes.iter().map(|&b| b as f64).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("truncated checkpoint at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_dn, DnConfig};

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.push("w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 0.0, -7.0]).unwrap())
            .unwrap();
        a.push("s", Tensor::scalar(2.5)).unwrap();
        a.push_counter("epoch", 17).unwrap();
        a.push_bytes("cfg", b"{\"a\":1}").unwrap();
        a.push_bytes("empty", b"").unwrap();
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"IFRP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.counter("epoch").unwrap(), 17);
        assert_eq!(b.bytes("cfg").unwrap(), b"{\"a\":1}");
        assert!(b.bytes("empty").unwrap().is_empty());
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn record_layout() {
        let mut a = Archive::new();
        a.push("ab", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let bytes = a.to_bytes();
        let body: Vec<u8> = [
            &b"IFRP"[..],
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            b"ab",
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        // CRC-32 (IEEE) of the body, from zlib.crc32
        let crc = 0x3aab_8410u32;
        assert_eq!(crc32fast::hash(&body), crc);
        let trailer: Vec<u8> = [
            &8u32.to_le_bytes()[..],
            b"checksum",
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &((crc >> 16) as f32).to_le_bytes(),
            &((crc & 0xffff) as f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, [body, trailer].concat());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(Archive::from_bytes(&bad).is_err(), "byte {i}");
        }
        assert!(Archive::new().push("checksum", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 9, bytes.len() - 1] {
            assert!(matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn model_round_trip_and_schema_check() {
        let cfg = DnConfig::with_resolution(16);
        let p = build_dn(&cfg, 3).unwrap();
        let mut a = Archive::new();
        a.push_model("phi", &p).unwrap();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.model("phi", &p).unwrap(), p);
        let other = build_dn(&DnConfig::with_resolution(32), 3).unwrap();
        assert!(matches!(b.model("phi", &other), Err(Error::Corrupt(_))));
        assert!(matches!(b.model("theta", &p), Err(Error::Corrupt(_))));
    }

    #[test]
    fn save_and_load_files() {
        let dir = std::env::temp_dir().join(format!("ifrp-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Archive::load(&path).unwrap(), sample());
        assert!(!path.with_extension("tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}
