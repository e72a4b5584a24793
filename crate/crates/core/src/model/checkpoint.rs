//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MTRNCKPT"
//! version  u32      1
//! kind     u32      0 = transducer, 1 = ctc alignment model
//! stage    u32      last completed training stage (0 = freshly initialized)
//! config   10 × u64 vocab, context_k, feat_dim, enc_layers, enc_dim,
//!                   enc_window, pred_dim, joint_dim, subsample, aux_middle_layer
//!          f64      dropout
//! count    u64      number of tensors
//! tensor   u32 name length, name bytes (UTF-8), u32 rank, rank × u64 dims,
//!          numel × f64 values
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use super::{ModelConfig, Param, ParamStore};

pub const MAGIC: &[u8; 8] = b"MTRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown checkpoint kind {0}")]
    Kind(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Transducer,
    Ctc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub stage: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize<R: Read>(r: &mut R) -> Result<usize, CheckpointError> {
    let v = get_u64(r)?;
    usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("value {v} overflows usize")))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        put_u32(&mut w, match self.kind {
            CheckpointKind::Transducer => 0,
            CheckpointKind::Ctc => 1,
        })?;
        put_u32(&mut w, self.stage)?;
        let c = &self.config;
        for v in [
            c.vocab,
            c.context_k,
            c.feat_dim,
            c.enc_layers,
            c.enc_dim,
            c.enc_window,
            c.pred_dim,
            c.joint_dim,
            c.subsample,
            c.aux_middle_layer,
        ] {
            put_u64(&mut w, v as u64)?;
        }
        w.write_all(&c.dropout.to_le_bytes())?;
        put_u64(&mut w, self.params.len() as u64)?;
        for p in self.params.params() {
            put_u32(&mut w, p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            put_u32(&mut w, p.dims.len() as u32)?;
            for &d in &p.dims {
                put_u64(&mut w, d as u64)?;
            }
            for v in &p.value {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = match get_u32(&mut r)? {
            0 => CheckpointKind::Transducer,
            1 => CheckpointKind::Ctc,
            k => return Err(CheckpointError::Kind(k)),
        };
        let stage = get_u32(&mut r)?;
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = get_usize(&mut r)?;
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let config = ModelConfig {
            vocab: f[0],
            context_k: f[1],
            feat_dim: f[2],
            enc_layers: f[3],
            enc_dim: f[4],
            enc_window: f[5],
            pred_dim: f[6],
            joint_dim: f[7],
            subsample: f[8],
            aux_middle_layer: f[9],
            dropout: f64::from_le_bytes(b),
        };
        let count = get_usize(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rank = get_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| get_usize(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} too large")))?;
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let value = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(Param { name, dims, value });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { kind, stage, config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}
