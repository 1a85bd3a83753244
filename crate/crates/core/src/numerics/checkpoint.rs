//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MTRNCKPT"
//! version      u32
//! config hash  32 bytes sha256 of the metadata bytes
//! metadata     u64 length + UTF-8 bytes (JSON written by the caller)
//! count        u32
//! per parameter:
//!   name       u32 length + UTF-8 bytes
//!   rank       u32, then rank × u64 dims
//!   data       product(dims) × f64
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTRNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore,
}

pub fn config_hash(metadata: &str) -> [u8; 32] {
    Sha256::digest(metadata.as_bytes()).into()
}

pub fn encode(metadata: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + metadata.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(metadata));
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated archive: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let meta_len = r.u64()? as usize;
    let metadata = r.string(meta_len)?;
    if config_hash(&metadata) != hash {
        return Err(Error::Checkpoint("config hash does not match metadata".into()));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(Checkpoint { metadata, params })
}

pub fn save(path: impl AsRef<Path>, metadata: &str, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(metadata, params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;
    use proptest::prelude::*;

    fn store(seed: u64) -> ParamStore {
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        s.normal("enc.w", &[3, 4], 1.0, &mut rng);
        s.zeros("enc.b", &[4]);
        s.insert(
            "odd",
            Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e308, 5e-324]),
        );
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store(1);
        let bytes = encode("{\"variant\":\"one_stream\"}", &s);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.metadata, "{\"variant\":\"one_stream\"}");
        for ((n1, t1), (n2, t2)) in s.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(encode(&ck.metadata, &ck.params), bytes);
    }

    #[test]
    fn tampered_metadata_is_rejected() {
        let mut bytes = encode("abc", &store(2));
        let meta_at = 8 + 4 + 32 + 8;
        bytes[meta_at] = b'x';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..20]).is_err());
        assert!(decode(b"NOTACKPT").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in proptest::collection::vec(any::<f64>(), 0..40), meta in ".{0,20}") {
            let mut s = ParamStore::new();
            s.insert("p", Tensor::vector(vals.clone()));
            let ck = decode(&encode(&meta, &s)).unwrap();
            let back: Vec<u64> = ck.params.get(ck.params.id("p").unwrap()).data().iter().map(|x| x.to_bits()).collect();
            let orig: Vec<u64> = vals.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(back, orig);
            prop_assert_eq!(ck.metadata, meta);
        }
    }
}
