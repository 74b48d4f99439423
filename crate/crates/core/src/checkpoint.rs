//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TCCK" | version u32 | payload_len u64 | payload | fnv1a64(payload) u64
//! payload = iteration u64 | adam_step u64 | config (u32 len + utf8)
//!           | n_blocks u32 | block*
//! block   = name (u32 len + utf8) | dtype u8 (0 f32, 1 f64) | rank u32
//!           | dims u64* | data_len u64 | data
//! ```
//!
//! Block names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, TccError};

pub const MAGIC: &[u8; 4] = b"TCCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub adam_step: u64,
    pub config_text: String,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Blocks under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        self.blocks
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_tensor(t: &Tensor) -> Result<(u8, Vec<u8>)> {
    let t = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => Ok((0, t.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect())),
        DType::F64 => Ok((1, t.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect())),
        other => Err(TccError::Config(format!("cannot checkpoint dtype {other:?}"))),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&ckpt.iteration.to_le_bytes());
    payload.extend_from_slice(&ckpt.adam_step.to_le_bytes());
    put_str(&mut payload, &ckpt.config_text);
    payload.extend_from_slice(&(ckpt.blocks.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.blocks {
        put_str(&mut payload, name);
        let (code, data) = encode_tensor(t)?;
        payload.push(code);
        payload.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        payload.extend_from_slice(&(data.len() as u64).to_le_bytes());
        payload.extend_from_slice(&data);
    }
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> TccError {
        TccError::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| TccError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    let sum = r.u64()?;
    if sum != fnv1a64(payload) {
        return Err(r.err("checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }

    let mut p = Reader {
        buf: payload,
        pos: 0,
        path,
    };
    let iteration = p.u64()?;
    let adam_step = p.u64()?;
    let config_text = p.string()?;
    let n = p.u32()? as usize;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let name = p.string()?;
        let code = p.take(1)?[0];
        let rank = p.u32()? as usize;
        let dims = (0..rank).map(|_| p.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data_len = p.u64()? as usize;
        let data = p.take(data_len)?;
        let count: usize = dims.iter().product();
        let t = match code {
            0 if data_len == count * 4 => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 if data_len == count * 8 => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, device)?
            }
            _ => return Err(p.err(format!("block `{name}` has a bad dtype or length"))),
        };
        blocks.push((name, t));
    }
    if p.pos != payload.len() {
        return Err(p.err("payload has trailing bytes"));
    }
    Ok(Checkpoint {
        iteration,
        adam_step,
        config_text,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let d = Device::Cpu;
        Checkpoint {
            iteration: 42,
            adam_step: 42,
            config_text: "[training]\nseed = 1\n".into(),
            blocks: vec![
                ("param/a".into(), Tensor::new(&[[1f32, 2.], [3., 4.]], &d).unwrap()),
                ("adam.m/a".into(), Tensor::new(&[0.5f64, -1.0], &d).unwrap()),
                ("param/scalar".into(), Tensor::new(7f32, &d).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.config_text, c.config_text);
        assert_eq!(back.blocks.len(), 3);
        assert_eq!(back.block("param/a").unwrap().to_vec2::<f32>().unwrap(), vec![vec![1., 2.], vec![3., 4.]]);
        assert_eq!(back.block("adam.m/a").unwrap().dtype(), DType::F64);
        assert_eq!(back.block("param/scalar").unwrap().dims(), &[] as &[usize]);
        assert_eq!(back.group("param").len(), 2);
    }

    #[test]
    fn rejects_corruption_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut flipped = good.clone();
        let mid = good.len() / 2;
        flipped[mid] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        let e = load_checkpoint(&path, &Device::Cpu).unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");

        let mut versioned = good.clone();
        versioned[4] = 9;
        std::fs::write(&path, &versioned).unwrap();
        let e = load_checkpoint(&path, &Device::Cpu).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(load_checkpoint(&path, &Device::Cpu).is_err());

        std::fs::write(&path, b"PNG....").unwrap();
        assert!(load_checkpoint(&path, &Device::Cpu).unwrap_err().to_string().contains("magic"));
    }
}
