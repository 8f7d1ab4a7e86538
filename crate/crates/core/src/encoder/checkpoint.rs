//! Binary checkpoint container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "ACEBCKPT"
//! version    u32      1
//! config     10 x u32 layers, hidden_dim, heads, ff_dim, vocab_size,
//!                     max_positions, segment_vocab, retrieval_dim,
//!                     patch_feature_dim, pixel_patch_dim
//!            f32      dropout
//! sections   u32      count
//! per section:
//!   tag      u8       1 = model parameter, 2 = frozen extractor weight,
//!                     3 = optimizer state, 4 = metadata
//!   name     u16 length + UTF-8 bytes
//!   rank     u8, then rank x u32 dims
//!   data     product(dims) x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ACEBCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionTag {
    Model = 1,
    Extractor = 2,
    Optimizer = 3,
    Meta = 4,
}

impl SectionTag {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => SectionTag::Model,
            2 => SectionTag::Extractor,
            3 => SectionTag::Optimizer,
            4 => SectionTag::Meta,
            other => return Err(Error::format("checkpoint", format!("unknown section tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: SectionTag,
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub sections: Vec<Section>,
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint", "truncated file")
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn new(config: EncoderConfig) -> Self {
        Checkpoint {
            config,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: SectionTag, name: impl Into<String>, tensor: Tensor<f32>) {
        self.sections.push(Section {
            tag,
            name: name.into(),
            tensor,
        });
    }

    pub fn section(&self, tag: SectionTag, name: &str) -> Option<&Tensor<f32>> {
        self.sections
            .iter()
            .find(|s| s.tag == tag && s.name == name)
            .map(|s| &s.tensor)
    }

    pub fn tagged(&self, tag: SectionTag) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(move |s| s.tag == tag)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        for v in [
            c.layers,
            c.hidden_dim,
            c.heads,
            c.ff_dim,
            c.vocab_size,
            c.max_positions,
            c.segment_vocab,
            c.retrieval_dim,
            c.patch_feature_dim,
            c.pixel_patch_dim,
        ] {
            w.write_u32::<LE>(v as u32)?;
        }
        w.write_f32::<LE>(c.dropout)?;
        w.write_u32::<LE>(self.sections.len() as u32)?;
        for s in &self.sections {
            w.write_u8(s.tag as u8)?;
            let name = s.name.as_bytes();
            w.write_u16::<LE>(name.len() as u16)?;
            w.write_all(name)?;
            w.write_u8(s.tensor.rank() as u8)?;
            for d in s.tensor.shape() {
                w.write_u32::<LE>(*d as u32)?;
            }
            for v in s.tensor.data() {
                w.write_f32::<LE>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.read_u32::<LE>().map_err(eof)?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 10];
        for d in &mut dims {
            *d = r.read_u32::<LE>().map_err(eof)? as usize;
        }
        let dropout = r.read_f32::<LE>().map_err(eof)?;
        let config = EncoderConfig {
            layers: dims[0],
            hidden_dim: dims[1],
            heads: dims[2],
            ff_dim: dims[3],
            vocab_size: dims[4],
            max_positions: dims[5],
            segment_vocab: dims[6],
            retrieval_dim: dims[7],
            patch_feature_dim: dims[8],
            pixel_patch_dim: dims[9],
            dropout,
        };
        config.validate()?;
        let count = r.read_u32::<LE>().map_err(eof)?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = SectionTag::from_u8(r.read_u8().map_err(eof)?)?;
            let len = r.read_u16::<LE>().map_err(eof)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "section name is not UTF-8"))?;
            let rank = r.read_u8().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LE>().map_err(eof)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LE>(&mut data).map_err(eof)?;
            sections.push(Section {
                tag,
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Checkpoint { config, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read_from(&mut BufReader::new(f))
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.clone());
        for (_, name, t) in self.store.iter() {
            ck.push(SectionTag::Model, name, t.clone());
        }
        ck
    }

    /// Rebuilds a model, checking every parameter's presence and shape
    /// against the checkpoint's config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ck.config.clone(), 0)?;
        let expected = model.store.len();
        let found = ck.tagged(SectionTag::Model).count();
        if found != expected {
            return Err(Error::format(
                "checkpoint",
                format!("expected {expected} model parameters, found {found}"),
            ));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = ck
                .section(SectionTag::Model, &name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            model
                .store
                .set(id, t.clone())
                .map_err(|_| Error::format("checkpoint", format!("shape mismatch for {name}")))?;
        }
        Ok(model)
    }
}
