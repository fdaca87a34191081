//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SNMP" | u32 version
//! u32 input_dim | u32 n_widths | u32 width... | u32 num_classes | u32 latent_dim
//! u64 n_params | f64 params[n] | f64 velocity[n] | f64 best_params[n]
//! u64 epoch | f64 best_val_map | u64 best_epoch
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! ```
//!
//! Parameters follow the model's declared tensor order. Trailing bytes are
//! rejected, so a file either decodes exactly or not at all.

use std::path::Path;

use crate::model::{ModelDims, SnMpModel};
use crate::trainer::{RngState, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNMP";
pub const VERSION: u32 = 1;

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    state.check()?;
    let dims = state.model.dims();
    let params = state.model.params().flat();
    let mut out = Vec::with_capacity(64 + 24 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    put_u32(&mut out, dims.input_dim)?;
    put_u32(&mut out, dims.widths.len())?;
    for &w in &dims.widths {
        put_u32(&mut out, w)?;
    }
    put_u32(&mut out, dims.num_classes)?;
    put_u32(&mut out, dims.latent_dim)?;
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for block in [params, &state.velocity, &state.best_params] {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.best_val_map.to_le_bytes());
    out.extend_from_slice(&(state.best_epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.rng.seed);
    out.extend_from_slice(&state.rng.stream.to_le_bytes());
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = r.u32("input_dim")?;
    let n_widths = r.u32("width count")?;
    let widths = (0..n_widths).map(|_| r.u32("width")).collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32("num_classes")?;
    let latent_dim = r.u32("latent_dim")?;
    let dims = ModelDims {
        input_dim,
        widths,
        num_classes,
        latent_dim,
    };
    dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u64("parameter count")? as usize;
    if n != dims.param_count() {
        return Err(Error::Checkpoint(format!(
            "{n} parameters stored, dimensions imply {}",
            dims.param_count()
        )));
    }
    let params = r.f64s(n, "parameters")?;
    let velocity = r.f64s(n, "velocity")?;
    let best_params = r.f64s(n, "best parameters")?;
    let epoch = r.u64("epoch")? as usize;
    let best_val_map = r.f64("best validation mAP")?;
    let best_epoch = r.u64("best epoch")? as usize;
    let rng = RngState {
        seed: r.array("rng seed")?,
        stream: r.u64("rng stream")?,
        word_pos: u128::from_le_bytes(r.array("rng position")?),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = SnMpModel::init(dims, 0)?;
    model.params_mut().flat_mut().copy_from_slice(&params);
    let state = TrainState {
        model,
        velocity,
        epoch,
        best_val_map,
        best_epoch,
        best_params,
        rng,
    };
    state.check().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
