//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "VIRENC\0\0"
//! version      u32      1
//! ngram_min    u32
//! ngram_max    u32
//! buckets      u32
//! hash_seed    u64
//! dim          u32
//! init_seed    u64
//! embeddings   buckets*dim f64, row-major
//! projection   dim*dim f64, row-major
//! fingerprint  u64      content hash, checked on load
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::CorpusError;

use super::{EncoderError, EncoderParams, SubwordHasherConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIRENC\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_params(params: &EncoderParams, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.hasher.ngram_min as u32).to_le_bytes())?;
    out.write_all(&(params.hasher.ngram_max as u32).to_le_bytes())?;
    out.write_all(&(params.hasher.bucket_count as u32).to_le_bytes())?;
    out.write_all(&params.hasher.hash_seed.to_le_bytes())?;
    out.write_all(&(params.dim as u32).to_le_bytes())?;
    out.write_all(&params.seed.to_le_bytes())?;
    let mut buf = Vec::with_capacity((params.embeddings.len() + params.projection.len()) * 8);
    for v in params.embeddings.iter().chain(&params.projection) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.write_all(&params.version.to_le_bytes())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EncoderError::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, EncoderError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| EncoderError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_params(bytes: &[u8]) -> Result<EncoderParams, EncoderError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(EncoderError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
    }
    let hasher = SubwordHasherConfig {
        ngram_min: r.u32()? as usize,
        ngram_max: r.u32()? as usize,
        bucket_count: r.u32()? as usize,
        hash_seed: r.u64()?,
    };
    hasher.validate()?;
    let dim = r.u32()? as usize;
    if dim < 2 {
        return Err(EncoderError::Checkpoint(format!("dim {dim} < 2")));
    }
    let seed = r.u64()?;
    let embeddings = r.f64s(hasher.bucket_count * dim)?;
    let projection = r.f64s(dim * dim)?;
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(EncoderError::Checkpoint("trailing bytes".into()));
    }
    let params = EncoderParams::from_parts(hasher, dim, embeddings, projection, seed);
    if params.version != stored {
        return Err(EncoderError::Checkpoint("fingerprint mismatch".into()));
    }
    if !params.all_finite() {
        return Err(EncoderError::Checkpoint("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save_params(params: &EncoderParams, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| CorpusError::io(path, e).into())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EncoderParams, EncoderError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    read_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::AnalyzerConfig;
    use crate::neural::score_maxsim;

    fn params() -> EncoderParams {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 8,
            hash_seed: 77,
            ..Default::default()
        };
        EncoderParams::init(hasher, 4, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 4 + 8 + 4 + 8 + (256 * 4 + 16) * 8 + 8);
        let back = read_params(&buf).unwrap();
        assert_eq!(back, p);
        let cfg = AnalyzerConfig::default();
        let (a, b) = (p.encode("vila nova", &cfg).unwrap(), p.encode("vilanova", &cfg).unwrap());
        let (a2, b2) = (back.encode("vila nova", &cfg).unwrap(), back.encode("vilanova", &cfg).unwrap());
        assert_eq!(score_maxsim(&a, &b).unwrap().to_bits(), score_maxsim(&a2, &b2).unwrap().to_bits());
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = params();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert!(read_params(&buf[..buf.len() - 3]).is_err());
        let mut flipped = buf.clone();
        flipped[60] ^= 1;
        assert!(matches!(read_params(&flipped), Err(EncoderError::Checkpoint(_))));
        let mut magic = buf;
        magic[0] = b'X';
        assert!(read_params(&magic).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = params();
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }
}
