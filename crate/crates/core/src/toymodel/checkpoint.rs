//! Versioned binary checkpoint.
//!
//! Layout: `FLMM` magic, u16 format version, then the matrices
//! `w_base_v, adapter_v.a, adapter_v.b, w_base_t, adapter_t.a, adapter_t.b,
//! token_embed` (each: u32 rows, u32 cols, row-major f64 LE), a u8 bridge
//! flag followed by the bridge matrix when the flag is 1, the temperature
//! (f64), the model version (u64) and a trailing CRC32 of every preceding
//! byte.
//!
//! Format 1 implies `alpha = 2·rank` on both towers. Format 2 is identical
//! except that the two adapter alphas (vision, text) are written as f64s
//! between the model version and the CRC; it is only emitted when an alpha
//! deviates from the default.

use super::{AdapterPair, ModelError, ModelSnapshot, TowerParams};
use crate::codec::{self, DecodeError, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLMM";
const FORMAT_DEFAULT_ALPHA: u16 = 1;
const FORMAT_EXPLICIT_ALPHA: u16 = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported checkpoint format {0}")]
    Format(u16),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("invalid bridge flag {0}")]
    BridgeFlag(u8),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_alpha(adapter: &AdapterPair) -> bool {
    adapter.alpha == 2.0 * adapter.rank() as f64
}

impl ModelSnapshot {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let explicit = !(default_alpha(&self.vision.adapter) && default_alpha(&self.text.adapter));
        let mut buf = Vec::with_capacity(self.checkpoint_len_hint());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        codec::put_u16(&mut buf, if explicit { FORMAT_EXPLICIT_ALPHA } else { FORMAT_DEFAULT_ALPHA });
        for m in [
            self.vision.w_base(),
            &self.vision.adapter.a,
            &self.vision.adapter.b,
            self.text.w_base(),
            &self.text.adapter.a,
            &self.text.adapter.b,
            self.token_embed(),
        ] {
            codec::put_matrix(&mut buf, m);
        }
        match &self.bridge {
            Some(b) => {
                codec::put_u8(&mut buf, 1);
                codec::put_matrix(&mut buf, b);
            }
            None => codec::put_u8(&mut buf, 0),
        }
        codec::put_f64(&mut buf, self.temperature);
        codec::put_u64(&mut buf, self.version);
        if explicit {
            codec::put_f64(&mut buf, self.vision.adapter.alpha);
            codec::put_f64(&mut buf, self.text.adapter.alpha);
        }
        let crc = codec::crc32(&buf);
        codec::put_u32(&mut buf, crc);
        buf
    }

    fn checkpoint_len_hint(&self) -> usize {
        let blocks: usize = self.blocks().values().map(codec::matrix_encoded_len).sum();
        blocks
            + codec::matrix_encoded_len(self.vision.w_base())
            + codec::matrix_encoded_len(self.text.w_base())
            + codec::matrix_encoded_len(self.token_embed())
            + 4 + 2 + 1 + 8 + 8 + 16 + 4
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 + 2 + 4 {
            return Err(DecodeError::Truncated {
                offset: 0,
                needed: 10,
                available: bytes.len(),
            }
            .into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = codec::crc32(body);
        if body[..4] != CHECKPOINT_MAGIC[..] {
            return Err(CheckpointError::Magic);
        }
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader::new(&body[4..]);
        let format = r.u16()?;
        if format != FORMAT_DEFAULT_ALPHA && format != FORMAT_EXPLICIT_ALPHA {
            return Err(CheckpointError::Format(format));
        }
        let w_v = r.matrix()?;
        let a_v = r.matrix()?;
        let b_v = r.matrix()?;
        let w_t = r.matrix()?;
        let a_t = r.matrix()?;
        let b_t = r.matrix()?;
        let token_embed = r.matrix()?;
        let bridge = match r.u8()? {
            0 => None,
            1 => Some(r.matrix()?),
            f => return Err(CheckpointError::BridgeFlag(f)),
        };
        let temperature = r.f64()?;
        let version = r.u64()?;
        let (alpha_v, alpha_t) = if format == FORMAT_EXPLICIT_ALPHA {
            (r.f64()?, r.f64()?)
        } else {
            (2.0 * a_v.rows() as f64, 2.0 * a_t.rows() as f64)
        };
        r.finish()?;
        let vision = TowerParams::new(w_v, AdapterPair::new(a_v, b_v, alpha_v)?)?;
        let text = TowerParams::new(w_t, AdapterPair::new(a_t, b_t, alpha_t)?)?;
        Ok(ModelSnapshot::from_parts(vision, text, token_embed, bridge, temperature, version)?)
    }
}
