//! Binary embedding cache.
//!
//! ```text
//! "ACEB" | version u32 | dim u32 | count u64 | id width u32 (= 8)
//! count x ( id u64 | dim x f32 )
//! ```
//!
//! All integers and floats little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"ACEB";
pub const CACHE_VERSION: u32 = 1;
pub const ID_WIDTH: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub ids: Vec<u64>,
    /// `ids.len() * dim` values, row-major.
    pub vectors: Vec<f32>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                op: "cache push",
                lhs: vec![v.len()],
                rhs: vec![self.dim],
            });
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        (0..self.len()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Invalid(format!("duplicate id {dup} in embedding cache")));
        }
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LE>(CACHE_VERSION)?;
        w.write_u32::<LE>(self.dim as u32)?;
        w.write_u64::<LE>(self.ids.len() as u64)?;
        w.write_u32::<LE>(ID_WIDTH)?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_u64::<LE>(*id)?;
            for v in self.row(i) {
                w.write_f32::<LE>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let truncated = |e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::format("embedding cache", "truncated file")
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::format("embedding cache", "bad magic"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != CACHE_VERSION {
            return Err(Error::format("embedding cache", format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LE>().map_err(truncated)? as usize;
        if dim == 0 {
            return Err(Error::format("embedding cache", "zero dimension"));
        }
        let count = r.read_u64::<LE>().map_err(truncated)? as usize;
        let width = r.read_u32::<LE>().map_err(truncated)?;
        if width != ID_WIDTH {
            return Err(Error::format("embedding cache", format!("unsupported id width {width}")));
        }
        let mut cache = EmbeddingCache::new(dim);
        let mut row = vec![0f32; dim];
        for _ in 0..count {
            let id = r.read_u64::<LE>().map_err(truncated)?;
            r.read_f32_into::<LE>(&mut row).map_err(truncated)?;
            cache.push(id, &row)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("embedding cache", "trailing bytes after last record"));
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
