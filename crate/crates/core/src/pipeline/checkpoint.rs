//! Single-file binary checkpoints.
//!
//! Little-endian layout with a versioned header: magic, version, step, the
//! config snapshot, then a parameter directory (names, dtypes, shapes,
//! offsets) followed by one contiguous f64 blob. Writing is deterministic,
//! so save -> load -> save reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GZSPLT01";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    /// Parameter tensors by canonical name, in directory order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn map(&self) -> BTreeMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut dir = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, tensor) in &self.tensors {
            let offset = blob.len() as u64;
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            dir.push((name, tensor.shape().to_vec(), offset));
        }
        let mut out: Vec<u8> = Vec::with_capacity(blob.len() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(dir.len() as u32).to_le_bytes());
        for (name, shape, offset) in &dir {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F64);
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
        }
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let fail = |msg: &str| Error::Checkpoint(format!("{msg} in {}", path.display()));
        if bytes.len() < 24 || &bytes[0..8] != MAGIC {
            return Err(fail("bad magic"));
        }
        let mut off = 8;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let cfg_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let config_text = String::from_utf8(take(&mut off, cfg_len)?.to_vec())
            .map_err(|_| fail("config snapshot not utf-8"))?;
        let n_params = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut dir = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| fail("parameter name not utf-8"))?;
            let dtype = take(&mut off, 1)?[0];
            if dtype != DTYPE_F64 {
                return Err(fail(&format!("unsupported dtype {dtype}")));
            }
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let data_off = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
            dir.push((name, shape, data_off));
        }
        let blob_len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let blob = take(&mut off, blob_len)?;
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, shape, data_off) in dir {
            let count: usize = shape.iter().product();
            if data_off + count * 8 > blob.len() {
                return Err(fail("parameter data out of range"));
            }
            let data: Vec<f64> = blob[data_off..data_off + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self {
            step,
            config_text,
            tensors,
        })
    }
}
