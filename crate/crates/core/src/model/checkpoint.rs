//! `MOSM` checkpoint files (little-endian):
//!
//! ```text
//! b"MOSM" | version: u8
//! config: input_dim u32 | projection_dim u32 | lstm_hidden u32 | lstm_layers u32
//!         | dense_hidden u32 | head u8 (0 regression, 1 classification) | num_classes u32
//!         | dropout_in f64 | dropout_mid f64 | dropout_out f64 | dropout_enabled u8
//! tensor count u32, then per tensor in declaration order: rank u32 | dims u32… | f32 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Head, Model, ModelConfig, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOSM";
pub const CHECKPOINT_VERSION: u8 = 1;

type LE = LittleEndian;

impl Model {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u8(CHECKPOINT_VERSION)?;
        for v in [c.input_dim, c.projection_dim, c.lstm_hidden, c.lstm_layers, c.dense_hidden] {
            w.write_u32::<LE>(v as u32)?;
        }
        w.write_u8(match c.head {
            Head::Regression => 0,
            Head::Classification => 1,
        })?;
        w.write_u32::<LE>(c.num_classes as u32)?;
        for p in [c.dropout_in, c.dropout_mid, c.dropout_out] {
            w.write_f64::<LE>(p)?;
        }
        w.write_u8(u8::from(c.dropout_enabled))?;

        let tensors = self.params.tensors();
        w.write_u32::<LE>(tensors.len() as u32)?;
        for (_, _, t) in tensors {
            w.write_u32::<LE>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u32::<LE>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LE>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let version = r.read_u8().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.read_u32::<LE>().map_err(io)? as usize;
        }
        let head = match r.read_u8().map_err(io)? {
            0 => Head::Regression,
            1 => Head::Classification,
            other => return Err(format!("unknown head tag {other}")),
        };
        let num_classes = r.read_u32::<LE>().map_err(io)? as usize;
        let mut rates = [0f64; 3];
        for p in &mut rates {
            *p = r.read_f64::<LE>().map_err(io)?;
        }
        let dropout_enabled = r.read_u8().map_err(io)? != 0;
        let config = ModelConfig {
            input_dim: dims[0],
            projection_dim: dims[1],
            lstm_hidden: dims[2],
            lstm_layers: dims[3],
            dense_hidden: dims[4],
            head,
            num_classes,
            dropout_in: rates[0],
            dropout_mid: rates[1],
            dropout_out: rates[2],
            dropout_enabled,
        };
        config.validate().map_err(|e| e.to_string())?;

        let mut params = ModelParams::zeros(&config);
        let count = r.read_u32::<LE>().map_err(io)? as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(format!("{count} tensors, config implies {}", slots.len()));
        }
        for (_, name, t) in slots.iter_mut() {
            let rank = r.read_u32::<LE>().map_err(io)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            if shape != t.shape {
                return Err(format!("{name} has shape {shape:?}, expected {:?}", t.shape));
            }
            let mut buf = vec![0f32; t.data.len()];
            r.read_f32_into::<LE>(&mut buf)
                .map_err(|e| format!("{name}: {e}"))?;
            for (dst, src) in t.data.iter_mut().zip(buf) {
                if !src.is_finite() {
                    return Err(format!("{name} contains non-finite values"));
                }
                *dst = f64::from(src);
            }
        }
        drop(slots);
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Model::read_from(&mut BufReader::new(file)).map_err(|msg| Error::format(path, msg))
    }
}
