//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "DCSSCKPT"
//! version    u32      1
//! dtype      u8       0 = f32, 1 = f64
//! stage      u32 length + UTF-8
//! config     u32 length + UTF-8 (hex sha256 of the config)
//! seed       u64
//! spec       u32 length + UTF-8 JSON of the ModelSpec
//! params     u32 count, then per parameter:
//!              u32 length + UTF-8 name, u8 kind (0 weight, 1 gate),
//!              u8 dtype, u32 ndim, ndim x u32 dims, raw values
//! bn stats   u32 count, then per layer:
//!              u32 length + UTF-8 name, u8 initialized, u32 channels,
//!              channels means, channels variances
//! ```
//!
//! Gate logits are the parameters of kind 1.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_model, ModelSpec, Network, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 8] = b"DCSSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub network: Network<T>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn values<T: Element>(&mut self, v: &[T]) {
        for x in v {
            x.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("{what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what}: invalid UTF-8")))
    }
    fn values<T: Element>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let bytes = self.take(n * size, what)?;
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint<T: Element>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let net = &ckpt.network;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize)?;
    w.u8(T::DTYPE.tag());
    w.str(&ckpt.stage)?;
    w.str(&ckpt.config_hash)?;
    w.u64(ckpt.seed);
    w.str(&serde_json::to_string(net.spec())?)?;
    w.u32(net.num_params())?;
    for i in 0..net.num_params() {
        w.str(net.param_name(i))?;
        w.u8(match net.param_kind(i) {
            ParamKind::Weight => 0,
            ParamKind::Gate => 1,
        });
        w.u8(T::DTYPE.tag());
        let p = net.param(i);
        w.u32(p.shape().len())?;
        for &d in p.shape() {
            w.u32(d)?;
        }
        w.values(p.data());
    }
    let stats = net.running_stats();
    w.u32(stats.len())?;
    for (name, s) in stats {
        w.str(name)?;
        w.u8(s.initialized as u8);
        w.u32(s.channels())?;
        w.values(&s.mean);
        w.values(&s.var);
    }
    Ok(w.buf)
}

/// Parses a checkpoint produced by [`write_checkpoint`] with the same element type.
pub fn read_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let at = r.pos;
    let dtype = r.u8("dtype")?;
    if DType::from_tag(dtype) != Some(T::DTYPE) {
        return Err(Error::format(
            at,
            format!("checkpoint dtype tag {dtype}, expected {:?}", T::DTYPE),
        ));
    }
    let stage = r.str("stage")?;
    let config_hash = r.str("config hash")?;
    let seed = r.u64("seed")?;
    let at = r.pos;
    let spec: ModelSpec = serde_json::from_str(&r.str("spec")?)
        .map_err(|e| Error::format(at, format!("model spec: {e}")))?;
    let mut network: Network<T> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;

    let count = r.u32("parameter count")?;
    if count != network.num_params() {
        return Err(Error::format(
            r.pos,
            format!("{count} parameters stored, model has {}", network.num_params()),
        ));
    }
    for _ in 0..count {
        let at = r.pos;
        let name = r.str("parameter name")?;
        let i = network
            .find_param(&name)
            .ok_or_else(|| Error::format(at, format!("unknown parameter `{name}`")))?;
        let kind = match r.u8("parameter kind")? {
            0 => ParamKind::Weight,
            1 => ParamKind::Gate,
            k => return Err(Error::format(r.pos - 1, format!("bad parameter kind {k}"))),
        };
        if kind != network.param_kind(i) {
            return Err(Error::format(at, format!("parameter `{name}` has the wrong kind")));
        }
        if r.u8("parameter dtype")? != T::DTYPE.tag() {
            return Err(Error::format(r.pos - 1, format!("parameter `{name}` dtype mismatch")));
        }
        let ndim = r.u32("ndim")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")?);
        }
        if shape != network.param(i).shape() {
            return Err(Error::format(
                at,
                format!("parameter `{name}` has shape {shape:?}, model expects {:?}", network.param(i).shape()),
            ));
        }
        let n = shape.iter().product();
        let data = r.values(n, &name)?;
        network.install_param(i, Tensor::new(shape, data)?)?;
    }

    let count = r.u32("bn count")?;
    let mut stats = network.running_stats_mut();
    if count != stats.len() {
        return Err(Error::format(r.pos, format!("{count} bn layers stored, model has {}", stats.len())));
    }
    for (name, s) in stats.iter_mut() {
        let at = r.pos;
        let stored = r.str("bn name")?;
        if stored != *name {
            return Err(Error::format(at, format!("bn layer `{stored}`, expected `{name}`")));
        }
        s.initialized = r.u8("bn flag")? != 0;
        let c = r.u32("bn channels")?;
        if c != s.channels() {
            return Err(Error::format(at, format!("bn layer `{name}` has {c} channels, expected {}", s.channels())));
        }
        s.mean = r.values(c, "bn mean")?;
        s.var = r.values(c, "bn var")?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        stage,
        config_hash,
        seed,
        network,
    })
}

pub fn save_checkpoint<T: Element>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = write_checkpoint(ckpt)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Head};

    fn sample() -> Checkpoint<f64> {
        let spec = ModelSpec::new(Arch::MiniResnet, 4, 3, (8, 8), Head::Classify { num_classes: 3 });
        let mut network = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        network.set_gate_logits(&[vec![0.5, -1.0, 0.25, 2.0], vec![1.0; 8], vec![-0.125; 8]]).unwrap();
        Checkpoint {
            stage: "search".into(),
            config_hash: "abc".into(),
            seed: 5,
            network,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = write_checkpoint(&sample()).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.network.gate_logits()[0], vec![0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_checkpoint(&sample()).unwrap();
        let err = read_checkpoint::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(read_checkpoint::<f32>(&bytes).is_err());
        assert!(matches!(read_checkpoint::<f64>(b"NOTACKPT"), Err(Error::Format { offset: 0, .. })));
    }
}
