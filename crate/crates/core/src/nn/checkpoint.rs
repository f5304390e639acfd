//! Binary checkpoint format.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic    8 bytes  "TGFCKPT\0"
//! version  u32      = 1
//! hash     32 bytes SHA-256 of the model configuration
//! cfg_len  u32, then cfg_len bytes of UTF-8 JSON model configuration
//! blocks   u32
//! per block: name_len u32, name bytes, rows u32, cols u32, rows*cols f64
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::{ParamBlock, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TGFCKPT\0";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_json: String,
    pub blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], config_json: String, store: &ParamStore) -> Self {
        Checkpoint {
            config_hash,
            config_json,
            blocks: store.blocks().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.extend_from_slice(&self.config_hash);
        out.write_u32::<LittleEndian>(self.config_json.len() as u32).unwrap();
        out.extend_from_slice(self.config_json.as_bytes());
        out.write_u32::<LittleEndian>(self.blocks.len() as u32).unwrap();
        for b in &self.blocks {
            out.write_u32::<LittleEndian>(b.name.len() as u32).unwrap();
            out.extend_from_slice(b.name.as_bytes());
            out.write_u32::<LittleEndian>(b.rows as u32).unwrap();
            out.write_u32::<LittleEndian>(b.cols as u32).unwrap();
            for &v in &b.data {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("truncated or corrupt: {what}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("version"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(|_| corrupt("hash"))?;
        let cfg_len = r.read_u32::<LittleEndian>().map_err(|_| corrupt("config"))? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(|_| corrupt("config"))?;
        let config_json =
            String::from_utf8(cfg).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let n = r.read_u32::<LittleEndian>().map_err(|_| corrupt("block count"))?;
        let mut blocks = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(|_| corrupt("name"))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| corrupt("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let rows = r.read_u32::<LittleEndian>().map_err(|_| corrupt("rows"))? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(|_| corrupt("cols"))? as usize;
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| corrupt(&name))?;
            blocks.push(ParamBlock {
                name,
                rows,
                cols,
                data,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash,
            config_json,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into `store`, requiring identical names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.blocks.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, model expects {}",
                self.blocks.len(),
                store.len()
            )));
        }
        for b in &self.blocks {
            let id = store
                .id(&b.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown block `{}`", b.name)))?;
            let target = store.block(id);
            if (target.rows, target.cols) != (b.rows, b.cols) {
                return Err(Error::Checkpoint(format!(
                    "block `{}` is {}x{}, model expects {}x{}",
                    b.name, b.rows, b.cols, target.rows, target.cols
                )));
            }
            store.set(id, &b.data)?;
        }
        Ok(())
    }
    /// Copies blocks whose name and shape match a block of `store`; returns
    /// how many were copied. Used to warm-start a larger model.
    pub fn restore_matching(&self, store: &mut ParamStore) -> Result<usize> {
        let mut copied = 0;
        for b in &self.blocks {
            if let Some(id) = store.id(&b.name) {
                let target = store.block(id);
                if (target.rows, target.cols) == (b.rows, b.cols) {
                    store.set(id, &b.data)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}
