//! Binary checkpoint container.
//!
//! Little-endian layout: `"WMOECKPT"`, version `u32`, config JSON as
//! `u32` length + UTF-8, tensor count `u32`, then per tensor the path
//! (`u16` length + bytes), rank `u8`, extents `u32` each and `f64` data.
//! A CRC32 of everything before it closes the file.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{NamedParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"WMOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: NamedParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::with_params(self.config, self.params)
    }

    /// Rebuilds under `config`, which must describe the same graph.
    pub fn into_model_with(self, config: RunConfig) -> Result<Model> {
        let (want, have) = (config.encoder.dim, self.config.encoder.dim);
        if want != have {
            return Err(Error::Mismatch {
                field: "C".into(),
                expected: want.to_string(),
                found: have.to_string(),
            });
        }
        Model::with_params(config, self.params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = self.config.to_json();
        out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&len_u32(self.params.len())?.to_le_bytes());
        for (path, t) in self.params.iter() {
            let plen = u16::try_from(path.len())
                .map_err(|_| Error::Contract(format!("parameter path too long: {path}")))?;
            out.extend_from_slice(&plen.to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            let rank =
                u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank of {path} exceeds 255")))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&len_u32(e)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Corruption { stored, computed });
        }
        let mut r = Cursor { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let json_len = r.u32()? as usize;
        let at = r.pos;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| Error::format(at as u64, "config is not UTF-8"))?;
        let config = RunConfig::from_json(json)?;
        let count = r.u32()?;
        let mut params = NamedParamSet::new();
        for _ in 0..count {
            let at = r.pos;
            let plen = r.u16()? as usize;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|_| Error::format(at as u64, "path is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format(at as u64, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at as u64, e.to_string()))?;
            params
                .insert(path, t)
                .map_err(|e| Error::format(at as u64, e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::file(path, format!("cannot read checkpoint: {e}")))?;
        Self::decode(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("length {n} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.pos as u64, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Modules;
    use crate::encoder::EncoderSpec;

    fn model() -> Model {
        let cfg = RunConfig {
            encoder: EncoderSpec {
                dim: 8,
                grid: (4, 4),
                taps: 2,
                image_size: (16, 16),
                ..EncoderSpec::default()
            },
            layers: 2,
            experts: 4,
            latent_dim: 4,
            modules: Modules::ALL,
            ..RunConfig::default()
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.params.len(), ck.params.len());
        for ((pa, ta), (pb, tb)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.encode().unwrap(), bytes);
        back.into_model().unwrap();
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = Checkpoint::from_model(&model()).encode().unwrap();
        for i in (0..bytes.len()).step_by(97).chain([8, bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::decode(&bad).is_err(), "byte {i}");
            if i >= 8 {
                assert!(matches!(Checkpoint::decode(&bad), Err(Error::Corruption { .. })));
            }
        }
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(&bytes[..5]).is_err());
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let mut bytes = Checkpoint::from_model(&model()).encode().unwrap();
        bytes[8] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn different_width_is_a_c_mismatch() {
        let ck = Checkpoint::from_model(&model());
        let mut wide = ck.config.clone();
        wide.encoder.dim = 16;
        match ck.into_model_with(wide) {
            Err(Error::Mismatch { field, .. }) => assert_eq!(field, "C"),
            other => panic!("{other:?}"),
        }
    }
}
