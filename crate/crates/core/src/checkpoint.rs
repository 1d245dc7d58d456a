//! Single-file, versioned, little-endian checkpoints.
//!
//! ```text
//! magic        8 bytes  "MOSSFMR\0"
//! version      u32
//! scalar width u8       4 (f32) or 8 (f64)
//! epoch, step  u64, u64
//! config       u32 byte length + UTF-8 key=value lines
//! params       u32 count, then per tensor:
//!                name (u16 length + UTF-8), trainable u8,
//!                ndim u8, dims u64 × ndim, raw scalars
//! adam         u8 present; beta1, beta2, eps f64; t u64;
//!                u32 count, then per tensor: name, tensor m, tensor v
//! schedule     u8 present; lr f64, hold u64, decay f64, patience u64,
//!                best f64, stale u64
//! rng          u8 present; ChaCha8 seed [u8; 32], stream u64, word_pos u128
//! ```
//!
//! Writes go to a temporary sibling file that is then renamed over the
//! target.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{NdArray, ParamStore, Scalar};
use crate::train::{Adam, LrSchedule};

pub const MAGIC: &[u8; 8] = b"MOSSFMR\0";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    pub schedule: Option<LrSchedule>,
    pub rng: Option<RngState>,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Scalar> Checkpoint<T> {
    /// Parameters only, as produced by initialization.
    pub fn from_params(model: ModelConfig, params: ParamStore<T>) -> Self {
        Self {
            model,
            params,
            adam: None,
            schedule: None,
            rng: None,
            epoch: 0,
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        w.push(T::WIDTH);
        put_u64(&mut w, self.epoch as u64);
        put_u64(&mut w, self.step as u64);
        let cfg = self.model.to_kv();
        put_u32(&mut w, cfg.len() as u32);
        w.extend_from_slice(cfg.as_bytes());
        put_u32(&mut w, self.params.len() as u32);
        for (name, e) in self.params.iter() {
            put_name(&mut w, name);
            w.push(u8::from(e.trainable));
            put_tensor(&mut w, e.value());
        }
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                put_f64(&mut w, a.beta1);
                put_f64(&mut w, a.beta2);
                put_f64(&mut w, a.eps);
                put_u64(&mut w, a.t);
                put_u32(&mut w, a.moments.len() as u32);
                for (name, (m, v)) in &a.moments {
                    put_name(&mut w, name);
                    put_tensor(&mut w, m);
                    put_tensor(&mut w, v);
                }
            }
        }
        match &self.schedule {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_f64(&mut w, s.lr);
                put_u64(&mut w, s.hold_epochs as u64);
                put_f64(&mut w, s.decay);
                put_u64(&mut w, s.patience as u64);
                put_f64(&mut w, s.best);
                put_u64(&mut w, s.stale_epochs as u64);
            }
        }
        match &self.rng {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                put_u64(&mut w, r.stream);
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let width = read_header(&mut r)?;
        if width != T::WIDTH as usize {
            return Err(Error::Version(format!(
                "checkpoint stores {width}-byte scalars, expected {} ({})",
                T::WIDTH,
                T::NAME
            )));
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let model = ModelConfig::from_kv(cfg_text)?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let trainable = r.u8()? != 0;
            params.insert(name, r.tensor()?, trainable)?;
        }
        let adam = if r.u8()? != 0 {
            let mut a = Adam::new(r.f64()?, r.f64()?, r.f64()?);
            a.t = r.u64()?;
            for _ in 0..r.u32()? {
                let name = r.name()?;
                let m = r.tensor()?;
                let v = r.tensor()?;
                a.moments.insert(name, (m, v));
            }
            Some(a)
        } else {
            None
        };
        let schedule = if r.u8()? != 0 {
            Some(LrSchedule {
                lr: r.f64()?,
                hold_epochs: r.u64()? as usize,
                decay: r.f64()?,
                patience: r.u64()? as usize,
                best: r.f64()?,
                stale_epochs: r.u64()? as usize,
            })
        } else {
            None
        };
        let rng = if r.u8()? != 0 {
            let mut seed = [0u8; 32];
            seed.copy_from_slice(r.take(32)?);
            let stream = r.u64()?;
            let mut wp = [0u8; 16];
            wp.copy_from_slice(r.take(16)?);
            Some(RngState {
                seed,
                stream,
                word_pos: u128::from_le_bytes(wp),
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            params,
            adam,
            schedule,
            rng,
            epoch,
            step,
        })
    }

    /// Atomic write: temporary sibling file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = temp_path(path);
        let io = |source| Error::File {
            path: path.to_path_buf(),
            source,
        };
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_header(r: &mut Reader) -> Result<usize> {
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    Ok(r.u8()? as usize)
}

/// Scalar width (4 or 8 bytes) recorded in a checkpoint file.
pub fn peek_width(path: &Path) -> Result<usize> {
    let bytes = read_file(path)?;
    read_header(&mut Reader {
        bytes: &bytes,
        pos: 0,
    })
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    w.extend_from_slice(&(name.len() as u16).to_le_bytes());
    w.extend_from_slice(name.as_bytes());
}

fn put_tensor<T: Scalar>(w: &mut Vec<u8>, t: &NdArray<T>) {
    w.push(t.ndim() as u8);
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    for &v in t.data() {
        v.write_le(w);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        b.copy_from_slice(self.take(N)?);
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<NdArray<T>> {
        let ndim = self.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(T::WIDTH as usize)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(T::WIDTH as usize)
            .map(T::read_le)
            .collect();
        NdArray::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}
