//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "CPATCHK1"
//! u32       descriptor length L
//! L bytes   descriptor JSON (kind tag + shapes + hyperparameters)
//! u32       array count
//! per array:
//!   u32 + bytes   name (UTF-8)
//!   u32           ndim, then ndim x u32 dims
//!   4*prod(dims)  f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CPATCHK1";

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub descriptor_json: String,
    pub arrays: Vec<NamedArray>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(descriptor: &impl Serialize, arrays: Vec<NamedArray>) -> Result<Self> {
        let descriptor_json = serde_json::to_string(descriptor)
            .map_err(|e| Error::contract(format!("unserializable descriptor: {e}")))?;
        Ok(Checkpoint {
            descriptor_json,
            arrays,
        })
    }

    pub fn descriptor<D: DeserializeOwned>(&self, path: &Path) -> Result<D> {
        serde_json::from_str(&self.descriptor_json)
            .map_err(|e| ck_err(path, format!("descriptor does not parse: {e}")))
    }

    pub fn take_array(&mut self, name: &str, path: &Path) -> Result<NamedArray> {
        let pos = self
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| ck_err(path, format!("missing array {name:?}")))?;
        Ok(self.arrays.swap_remove(pos))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        let desc = self.descriptor_json.as_bytes();
        w.write_u32::<LittleEndian>(desc.len() as u32).map_err(io)?;
        w.write_all(desc).map_err(io)?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)
            .map_err(io)?;
        for a in &self.arrays {
            let name = a.name.as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name).map_err(io)?;
            w.write_u32::<LittleEndian>(a.dims.len() as u32).map_err(io)?;
            for &d in &a.dims {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            let expected: usize = a.dims.iter().product();
            assert_eq!(expected, a.values.len(), "array dims match value count");
            for &v in &a.values {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut r = CountingReader {
            inner: BufReader::new(file),
            read: 0,
        };

        let mut magic = [0u8; 8];
        r.read_bytes(&mut magic, path, total)?;
        if &magic != MAGIC {
            return Err(ck_err(path, "bad magic: not a checkpoint file"));
        }
        let desc_len = r.read_u32(path, total)? as usize;
        let mut desc = vec![0u8; desc_len];
        r.read_bytes(&mut desc, path, total)?;
        let descriptor_json = String::from_utf8(desc)
            .map_err(|_| ck_err(path, "descriptor is not valid UTF-8"))?;

        let count = r.read_u32(path, total)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32(path, total)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_bytes(&mut name, path, total)?;
            let name =
                String::from_utf8(name).map_err(|_| ck_err(path, "array name is not UTF-8"))?;
            let ndim = r.read_u32(path, total)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32(path, total)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut values = vec![0f32; len];
            for v in values.iter_mut() {
                *v = r.read_f32(path, total)?;
            }
            arrays.push(NamedArray { name, dims, values });
        }
        Ok(Checkpoint {
            descriptor_json,
            arrays,
        })
    }
}

struct CountingReader<R> {
    inner: R,
    read: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_bytes(&mut self, buf: &mut [u8], path: &Path, total: u64) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.read += buf.len() as u64;
                Ok(())
            }
            Err(_) => Err(ck_err(
                path,
                format!(
                    "truncated: expected at least {} bytes, file has {total}",
                    self.read + buf.len() as u64
                ),
            )),
        }
    }

    fn read_u32(&mut self, path: &Path, total: u64) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_bytes(&mut b, path, total)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32(&mut self, path: &Path, total: u64) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_bytes(&mut b, path, total)?;
        Ok(f32::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use tempfile::tempdir;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Desc {
        kind: String,
        n: usize,
    }

    #[test]
    fn round_trip_preserves_arrays_and_descriptor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(
            &Desc {
                kind: "test".into(),
                n: 3,
            },
            vec![NamedArray {
                name: "w".into(),
                dims: vec![2, 3],
                values: vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 1e20],
            }],
        )
        .unwrap();
        ck.save(&path).unwrap();
        let mut back = Checkpoint::load(&path).unwrap();
        let desc: Desc = back.descriptor(&path).unwrap();
        assert_eq!(desc.kind, "test");
        let w = back.take_array("w", &path).unwrap();
        assert_eq!(w.dims, vec![2, 3]);
        assert_eq!(w.values, ck.arrays[0].values);
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(
            &Desc {
                kind: "test".into(),
                n: 1,
            },
            vec![NamedArray {
                name: "w".into(),
                dims: vec![8],
                values: vec![0.5; 8],
            }],
        )
        .unwrap();
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("expected"), "{msg}");
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }
}
