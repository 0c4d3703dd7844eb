//! Binary checkpoint files.
//!
//! Layout: the magic `ONGCKPT1`, a little-endian `u64` length and that many
//! bytes of JSON header, a `u64` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, a dtype tag byte, a `u32` rank, the
//! dimensions as `u64`s and the row-major little-endian `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ONGCKPT1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub best_dev_f1: f64,
    pub epoch: usize,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: Option<Vocab>,
    best_dev_f1: f64,
    epoch: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.model.vocab().cloned(),
            best_dev_f1: self.best_dev_f1,
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        w.write_u64::<LittleEndian>(self.model.store.len() as u64)?;
        for (name, t) in self.model.store.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(DTYPE_F64)?;
            w.write_u32::<LittleEndian>(2)?;
            w.write_u64::<LittleEndian>(t.nrows() as u64)?;
            w.write_u64::<LittleEndian>(t.ncols() as u64)?;
            for &x in t.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut model = Model::new(header.config.model.clone(), header.vocab, header.config.seed)?;

        let count = r.read_u64::<LittleEndian>()? as usize;
        if count != model.store.len() {
            return Err(bad(format!("expected {} tensors, found {count}", model.store.len())));
        }
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            if r.read_u8()? != DTYPE_F64 {
                return Err(bad(format!("tensor {name}: unsupported dtype")));
            }
            if r.read_u32::<LittleEndian>()? != 2 {
                return Err(bad(format!("tensor {name}: expected rank 2")));
            }
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let cols = r.read_u64::<LittleEndian>()? as usize;
            let id = model.store.find(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            if model.store.get(id).dim() != (rows, cols) {
                return Err(bad(format!("tensor {name}: shape {rows}x{cols} does not match the config")));
            }
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            *model.store.get_mut(id) = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        }
        Ok(Checkpoint { config: header.config, best_dev_f1: header.best_dev_f1, epoch: header.epoch, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
