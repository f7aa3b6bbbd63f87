//! Binary checkpoint layout, little-endian throughout:
//!
//! ```text
//! "TASANET1"
//! u32 config_len, config JSON (NetworkConfig)
//! u32 record_count
//! record_count × { u16 name_len, name, u32 rows, u32 cols, rows·cols × f32 }
//! ```

use std::fs;
use std::path::Path;

use super::model::{NetworkConfig, RefineNet};
use super::NetError;

pub const MAGIC: &[u8; 8] = b"TASANET1";

pub fn encode_checkpoint(net: &RefineNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(net.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (name, t) in net.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<RefineNet, NetError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: NetworkConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| NetError::Checkpoint(format!("config echo: {e}")))?;
    let mut net = RefineNet::new(&cfg)?;
    let count = r.u32()? as usize;
    if count != net.params().len() {
        return Err(NetError::Checkpoint(format!(
            "{count} parameter records, architecture has {}",
            net.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NetError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let slot =
            net.params().position(&name).ok_or_else(|| NetError::Checkpoint(format!("unknown parameter {name}")))?;
        if seen[slot] {
            return Err(NetError::Checkpoint(format!("duplicate parameter {name}")));
        }
        seen[slot] = true;
        let target = &mut net.params_mut().tensors_mut()[slot];
        if target.shape() != (rows, cols) {
            return Err(NetError::Checkpoint(format!("{name}: stored {rows}x{cols}, expected {:?}", target.shape())));
        }
        let bytes = r.take(rows * cols * 4)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(NetError::Checkpoint(format!("{name}: non-finite value")));
            }
            *dst = v as f64;
        }
    }
    if r.pos != buf.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok(net)
}

pub fn write_checkpoint(net: &RefineNet, path: &Path) -> Result<(), NetError> {
    fs::write(path, encode_checkpoint(net)).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<RefineNet, NetError> {
    let buf = fs::read(path).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&buf)
}
