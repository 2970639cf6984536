//! Self-describing binary checkpoints.
//!
//! Layout, all integers `u32` little-endian, floats binary64 little-endian:
//!
//! ```text
//! "LSTMCMP1"  version
//! len  config text (`key = value` lines)
//! count  { len  note token }*
//! count  { duration units }*
//! count  { rows  cols  value* }*      parameter matrices, fixed order
//! epoch  final loss
//! ```

use std::path::Path;

use thiserror::Error;

use crate::corpus::{DurationToken, DurationVocab, NoteToken, NoteVocab, Vocabulary};
use crate::lstm::{ModelError, ModelParams, Weights};
use crate::numerics::Matrix;

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LSTMCMP1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub note_vocab: NoteVocab,
    pub dur_vocab: DurationVocab,
    pub params: ModelParams,
    pub epoch: u32,
    pub final_loss: f64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_u32(&mut out, self.note_vocab.len());
        for t in self.note_vocab.tokens() {
            put_bytes(&mut out, t.as_str().as_bytes());
        }
        put_u32(&mut out, self.dur_vocab.len());
        for t in self.dur_vocab.tokens() {
            put_u32(&mut out, t.units() as usize);
        }
        let mats = self.params.weights().matrices();
        put_u32(&mut out, mats.len());
        for m in mats {
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.epoch as usize);
        out.extend_from_slice(&self.final_loss.to_le_bytes());
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config = TrainConfig::from_text(&r.string()?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let corrupt = |e: crate::corpus::CorpusError| CheckpointError::Corrupt(e.to_string());

        let n = r.len()?;
        let mut notes = Vec::new();
        for _ in 0..n {
            notes.push(r.string()?.parse::<NoteToken>().map_err(corrupt)?);
        }
        let note_vocab = Vocabulary::from_listing(notes).map_err(corrupt)?;
        let n = r.len()?;
        let mut durs = Vec::new();
        for _ in 0..n {
            durs.push(DurationToken::new(r.u32()?).map_err(corrupt)?);
        }
        let dur_vocab = Vocabulary::from_listing(durs).map_err(corrupt)?;

        let model = config.model_config(note_vocab.len(), dur_vocab.len());
        let mut weights = Weights::zeros(&model);
        let count = r.len()?;
        let mut slots = weights.matrices_mut();
        if count != slots.len() {
            return Err(CheckpointError::Corrupt(format!("{count} matrices, config implies {}", slots.len())));
        }
        for slot in slots.iter_mut() {
            let (rows, cols) = (r.len()?, r.len()?);
            if (rows, cols) != slot.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "matrix {rows}x{cols}, expected {}x{}",
                    slot.rows(),
                    slot.cols()
                )));
            }
            let values = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            **slot = Matrix::from_vec(rows, cols, values).expect("shape checked");
        }
        let params = ModelParams::from_weights(model, weights)?;
        let epoch = r.u32()?;
        let final_loss = r.f64()?;
        if r.pos != data.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint { config, note_vocab, dur_vocab, params, epoch, final_loss })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
