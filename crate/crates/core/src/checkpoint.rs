//! Flat little-endian parameter checkpoints.
//!
//! ```text
//! "MSEG" | version u32 | count u32
//! per tensor: name_len u16 | name bytes | rank u8 | dims u32 × rank | f64 × numel
//! ```
//!
//! Leading unit dimensions are dropped on write (rank ≥ 1) and restored on
//! read, so a `1×1×r×c` weight is stored with rank 2.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSEG";
pub const VERSION: u32 = 1;

/// Serialize every parameter value, in name order.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Config("too many tensors for checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, param) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long for checkpoint: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = param.value.shape().dims();
        let skip = dims.iter().take(3).take_while(|&&d| d == 1).count();
        out.push((4 - skip) as u8);
        for &d in &dims[skip..] {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in param.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: expected at least {} bytes, file has {}",
                    self.pos.saturating_add(n),
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSEG\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(name_at + 2, format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(rank_at, format!("{name}: rank {rank} not in 1..=4")));
        }
        let mut dims = [1usize; 4];
        for d in dims[4 - rank..].iter_mut() {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|_| shape.is_valid())
            .ok_or_else(|| Error::format(rank_at, format!("{name}: invalid shape {shape}")))?;
        let payload = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::format(rank_at, format!("{name}: shape {shape} too large")))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| Error::format(name_at, format!("duplicate tensor {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos,
            format!("trailing data: expected {} bytes, file has {}", r.pos, bytes.len()),
        ));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)?).map_err(|e| Error::io_at(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}

/// Overwrite values in `store` with those from a checkpoint. Names and
/// shapes must match exactly.
pub fn load_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if loaded.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, p) in loaded.iter() {
        let want = store
            .value(name)
            .map_err(|_| Error::Config(format!("checkpoint tensor {name} not in model")))?
            .shape();
        if want != p.value.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name} is {}, model expects {want}",
                p.value.shape()
            )));
        }
        store.set_value(name, p.value.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        let mut init = Init::new(7);
        s.insert("a.weight", init.linear(3, 5)).unwrap();
        s.insert("a.bias", Tensor::vector(vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap()).unwrap();
        s.insert("conv", init.conv(2, 3, 3)).unwrap();
        s.insert("one", Tensor::scalar(4.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        for (name, p) in s.iter() {
            let q = back.value(name).unwrap();
            assert_eq!(q.shape(), p.value.shape());
            assert!(q.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn ranks_are_trimmed() {
        let mut s = ParamStore::new();
        s.insert("m", Tensor::zeros(Shape::matrix(2, 3))).unwrap();
        let b = encode(&s).unwrap();
        // header 12, name len 2, name 1, then rank
        assert_eq!(b[15], 2);
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let msg = decode(cut).unwrap_err().to_string();
        assert!(msg.contains(&format!("file has {}", cut.len())), "{msg}");
        assert!(msg.contains("expected at least"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        assert_eq!(decode(&bytes).unwrap_err().exit_code(), 3);
    }
}
