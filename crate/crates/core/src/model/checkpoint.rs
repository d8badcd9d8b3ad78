//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes   "KDLCKPT1"
//! version    u32       1
//! step       u64       training steps completed
//! config     u32 len + UTF-8 JSON of ModelConfig
//! meta       u32 len + UTF-8 JSON object (metrics, vocabulary hash, ...)
//! count      u32       number of tensors
//! tensor*    u32 len + UTF-8 name
//!            u32 ndim, then ndim × u64 dims
//!            product(dims) × f32 values
//! ```
//!
//! Tensors appear in the canonical layout order of the config. The file has
//! no timestamps, so saving identical state twice gives identical bytes.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use kdlab_compute::Tensor;

use super::{ModelConfig, ModelParams, Params};
use crate::error::{IoContext, KdError, Result};
use crate::util::write_atomic;

const MAGIC: &[u8; 8] = b"KDLCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub step: u64,
    pub meta: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> KdError {
    KdError::Checkpoint(msg.into())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn write_checkpoint(ck: &Checkpoint, w: &mut impl Write) -> Result<()> {
    ck.params.check_layout(&ck.config)?;
    let mut out = Vec::with_capacity(ck.params.num_elements() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    put_bytes(&mut out, serde_json::to_string(&ck.config).expect("config serializes").as_bytes());
    put_bytes(&mut out, serde_json::to_string(&ck.meta).expect("meta serializes").as_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out).map_err(|e| ckpt_err(format!("write failed: {e}")))
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| ckpt_err(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    fn bytes(&mut self, limit: usize) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(ckpt_err(format!("field of {n} bytes exceeds limit {limit}")));
        }
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|e| ckpt_err(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn string(&mut self, limit: usize) -> Result<String> {
        String::from_utf8(self.bytes(limit)?).map_err(|_| ckpt_err("non-UTF-8 string field"))
    }
}

/// Parses a checkpoint. With `expected`, the stored config must equal it.
pub fn read_checkpoint(r: impl Read, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader(r);
    if &r.exact::<8>()? != MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let config: ModelConfig =
        serde_json::from_str(&r.string(1 << 20)?).map_err(|e| ckpt_err(format!("bad config: {e}")))?;
    config.validate()?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(ckpt_err(format!(
                "checkpoint config {} differs from expected {}",
                serde_json::to_string(&config).unwrap_or_default(),
                serde_json::to_string(exp).unwrap_or_default()
            )));
        }
    }
    let meta: serde_json::Value =
        serde_json::from_str(&r.string(1 << 24)?).map_err(|e| ckpt_err(format!("bad metadata: {e}")))?;
    let count = r.u32()? as usize;
    let expect = super::layout(&config);
    if count != expect.len() {
        return Err(ckpt_err(format!("{count} tensors, config needs {}", expect.len())));
    }
    let mut named = Vec::with_capacity(count);
    for (want_name, want_shape, _) in expect {
        let name = r.string(1024)?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(ckpt_err(format!("tensor {name} has {ndim} dimensions")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        if name != want_name || shape != want_shape {
            return Err(ckpt_err(format!(
                "tensor {name} {shape:?} where config expects {want_name} {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.0.read_exact(&mut raw)
            .map_err(|e| ckpt_err(format!("truncated tensor {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::new(&shape, data).map_err(|e| ckpt_err(e.to_string()))?));
    }
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest).map_err(|e| ckpt_err(e.to_string()))? != 0 {
        return Err(ckpt_err("trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        config,
        params: Params::from_named(named),
        step,
        meta,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let f = File::open(path).at(path)?;
    read_checkpoint(BufReader::new(f), expected)
}
