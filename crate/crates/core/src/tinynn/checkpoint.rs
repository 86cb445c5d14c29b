//! Binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PSACCKPT" | version u32 | spec hash u64
//! scalar count u32 | { name | f64 }*
//! buffer count u32 | { name | len u32 | f64* }*
//! mlp count u32    | { name | layer count u32 | { in u32 | out u32 | act u8 | weight f64* | bias f64* }* }*
//! ```
//!
//! Names are `u32` byte length followed by UTF-8. The spec hash is FNV-1a
//! over every name and shape, so a file whose architecture section was
//! damaged, or which belongs to another architecture, is rejected.

use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

use fnv::FnvHasher;

use super::mlp::{Activation, LayerSpec, Linear, Mlp};
use crate::error::NnError;

pub const MAGIC: &[u8; 8] = b"PSACCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub scalars: Vec<(String, f64)>,
    pub buffers: Vec<(String, Vec<f64>)>,
    pub mlps: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn spec_hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (name, _) in &self.scalars {
            h.write(b"s");
            h.write(name.as_bytes());
        }
        for (name, buf) in &self.buffers {
            h.write(b"b");
            h.write(name.as_bytes());
            h.write_u64(buf.len() as u64);
        }
        for (name, mlp) in &self.mlps {
            h.write(b"m");
            h.write(name.as_bytes());
            for l in &mlp.layers {
                h.write_u64(l.spec.input as u64);
                h.write_u64(l.spec.output as u64);
                h.write_u8(l.spec.activation.code());
            }
        }
        h.finish()
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn mlp(&self, name: &str) -> Option<&Mlp> {
        self.mlps.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash().to_le_bytes());
        put_u32(&mut out, self.scalars.len());
        for (name, v) in &self.scalars {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.buffers.len());
        for (name, buf) in &self.buffers {
            put_name(&mut out, name);
            put_u32(&mut out, buf.len());
            put_f64s(&mut out, buf);
        }
        put_u32(&mut out, self.mlps.len());
        for (name, mlp) in &self.mlps {
            put_name(&mut out, name);
            put_u32(&mut out, mlp.layers.len());
            for l in &mlp.layers {
                put_u32(&mut out, l.spec.input);
                put_u32(&mut out, l.spec.output);
                out.push(l.spec.activation.code());
                put_f64s(&mut out, &l.weight);
                put_f64s(&mut out, &l.bias);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported format version {version}")));
        }
        let hash = r.u64()?;
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            ck.scalars.push((name, r.f64()?));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let len = r.u32()? as usize;
            ck.buffers.push((name, r.f64s(len)?));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let n_layers = r.u32()? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let input = r.u32()? as usize;
                let output = r.u32()? as usize;
                let activation = Activation::from_code(r.u8()?)
                    .ok_or_else(|| NnError::Checkpoint("unknown activation code".into()))?;
                let weight = r.f64s(input * output)?;
                let bias = r.f64s(output)?;
                layers.push(Linear { spec: LayerSpec { input, output, activation }, weight, bias });
            }
            let mlp = Mlp { layers };
            mlp.spec().validate()?;
            ck.mlps.push((name, mlp));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if ck.spec_hash() != hash {
            return Err(NnError::Checkpoint("spec hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn name(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))
    }
}
