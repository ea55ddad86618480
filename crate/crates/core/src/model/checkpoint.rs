// Checkpoint layout (little-endian):
//   "CRSL"
//   u32 format_version
//   u32 spec_len, spec_len bytes of UTF-8 JSON (ModelSpec)
//   per parameter, in layout order:
//     u32 name_len, name bytes, u32 rank, rank x u32 dims, prod(dims) x f64
//   u32 CRC32 of every preceding byte

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::{Parameter, Tensor};

use super::{ModelSpec, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRSL";
pub const FORMAT_VERSION: u32 = 1;

impl ModelState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec).expect("ModelSpec serializes");
        buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&spec);
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported format version {version}")));
        }
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len(), "truncated header"));
        }
        let body_end = bytes.len() - 4;
        let spec_len = r.u32()? as usize;
        let spec_at = r.pos;
        let spec_bytes = r.take_within(spec_len, body_end)?;
        let spec: ModelSpec = serde_json::from_slice(spec_bytes)
            .map_err(|e| Error::format(spec_at, format!("invalid spec JSON: {e}")))?;

        let mut raw = Vec::new();
        while r.pos < body_end {
            let at = r.pos;
            let name_len = r.u32_within(body_end)? as usize;
            let name = std::str::from_utf8(r.take_within(name_len, body_end)?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_owned();
            let rank = r.u32_within(body_end)? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32_within(body_end)? as usize);
            }
            let count: usize = dims.iter().product();
            let payload = r.take_within(count.checked_mul(8).ok_or_else(|| Error::format(at, "dims overflow"))?, body_end)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            raw.push((at, name, dims, values));
        }

        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let template = ModelState::init(spec.clone(), 0)
            .map_err(|e| Error::format(spec_at, format!("spec does not validate: {e}")))?;
        if raw.len() != template.params.len() {
            return Err(Error::format(
                body_end,
                format!("expected {} parameters, found {}", template.params.len(), raw.len()),
            ));
        }
        let mut params = Vec::with_capacity(raw.len());
        for ((at, name, dims, values), expected) in raw.into_iter().zip(&template.params) {
            if name != expected.name || dims != expected.value.shape() {
                return Err(Error::format(
                    at,
                    format!(
                        "parameter `{name}` {dims:?} does not match layout `{}` {:?}",
                        expected.name,
                        expected.value.shape()
                    ),
                ));
            }
            params.push(Parameter::new(name, Tensor::new(dims, values)?));
        }
        Ok(ModelState { spec, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take_within(n, self.bytes.len())
    }

    fn take_within(&mut self, n: usize, end: usize) -> Result<&'a [u8]> {
        let stop = self.pos.checked_add(n).filter(|&s| s <= end);
        match stop {
            Some(stop) => {
                let out = &self.bytes[self.pos..stop];
                self.pos = stop;
                Ok(out)
            }
            None => Err(Error::format(self.pos, format!("truncated: need {n} bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32_within(&mut self, end: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_within(4, end)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, state.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelState::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_spec;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let state = ModelState::init(small_spec(), 9).unwrap();
        let bytes = state.to_bytes();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in state.params.iter().zip(&back.params) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = ModelState::init(small_spec(), 1).unwrap().to_bytes();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            let err = ModelState::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn payload_flip_is_a_checksum_error() {
        let mut bytes = ModelState::init(small_spec(), 1).unwrap().to_bytes();
        let at = bytes.len() - 20;
        bytes[at] ^= 0x01;
        assert!(matches!(ModelState::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = ModelState::init(small_spec(), 1).unwrap().to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(ModelState::from_bytes(&wrong_version), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(ModelState::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
