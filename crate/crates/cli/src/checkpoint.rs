//! `BNDC` parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "BNDC" | version | count | count x (name_len | name | rows | cols | rows*cols f32) | crc32
//! ```
//!
//! The CRC32 covers every byte before it, magic included.

use std::fs;
use std::path::Path;

use bundleforge::numerics::{ParamTable, Tensor};
use bundleforge::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BNDC";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamTable<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(params.len(), "parameter count")?.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_len(t.cols(), "cols")?.to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes and verifies a checkpoint. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamTable<f32>> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not a BNDC checkpoint".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(fail(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let parse = |r: &mut Reader| -> std::result::Result<ParamTable<f32>, String> {
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut params = ParamTable::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "parameter name is not UTF-8".to_string())?
                .to_string();
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or("tensor too large")?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(rows, cols, data).map_err(|e| e.to_string())?;
            params.insert(name, t).map_err(|e| e.to_string())?;
        }
        if r.pos != r.bytes.len() {
            return Err(format!("{} trailing bytes", r.bytes.len() - r.pos));
        }
        Ok(params)
    };
    parse(&mut r).map_err(fail)
}

pub fn save(path: impl AsRef<Path>, params: &ParamTable<f32>) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamTable<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamTable<f32> {
        let mut p = ParamTable::new();
        p.insert("student.v", Tensor::new(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap())
            .unwrap();
        p.insert("teacher.bundle.w_k", Tensor::new(1, 1, vec![0.125]).unwrap()).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = encode(&p).unwrap();
        let back = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        let names: Vec<_> = back.names().collect();
        assert_eq!(names, vec!["student.v", "teacher.bundle.w_k"]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.get("student.v").unwrap()), bits(p.get("student.v").unwrap()));
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let mut p = ParamTable::new();
        p.insert("ab", Tensor::new(1, 1, vec![1.0]).unwrap()).unwrap();
        let bytes = encode(&p).unwrap();
        let mut want = b"BNDC".to_vec();
        for v in [1u32, 1, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(b"ab");
        for v in [1u32, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn any_flipped_bit_is_caught() {
        let bytes = encode(&sample()).unwrap();
        for pos in [0, 5, 13, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(decode(&bad, Path::new("x")).is_err(), "flip at {pos} accepted");
        }
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(decode(b"", Path::new("x")).is_err());
    }
}
