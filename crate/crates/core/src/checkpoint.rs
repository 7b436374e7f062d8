//! Binary checkpoint: `"FGKD"`, format version (u16), layer-width count
//! (u16), each width (u32), then the flat parameters as f32. All integers and
//! floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec, ParamVector};

pub const MAGIC: &[u8; 4] = b"FGKD";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(spec: &MlpSpec, params: &ParamVector) -> Result<Vec<u8>> {
    params.check_len(spec.param_count(), "checkpoint: parameter vector")?;
    let count = u16::try_from(spec.layer_widths.len())
        .map_err(|_| Error::Checkpoint("too many layers for the format".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * spec.layer_widths.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for &w in &spec.layer_widths {
        let w = u32::try_from(w)
            .map_err(|_| Error::Checkpoint(format!("layer width {w} exceeds u32")))?;
        out.extend_from_slice(&w.to_le_bytes());
    }
    for &v in params.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. The format carries no activation, so the caller
/// supplies the one the network was trained with.
pub fn decode(bytes: &[u8], activation: Activation) -> Result<(MlpSpec, ParamVector)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u16("layer count")? as usize;
    let widths = (0..count)
        .map(|_| r.u32("layer width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths, activation)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    let d = spec.param_count();
    let values = r
        .take(4 * d, "parameters")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Ok((spec, ParamVector::from_vec(values)))
}

pub fn save(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    fs::write(path, encode(spec, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, activation: Activation) -> Result<(MlpSpec, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, activation)
}
