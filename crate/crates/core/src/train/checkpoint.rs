//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   "MANETLC1"
//! version          u32       currently 1
//! config echo      u32 len + UTF-8 bytes
//! epoch            u32       completed epochs
//! seed             u64
//! params           u32 count, then per entry:
//!                    u16 name len + name bytes
//!                    u8 kind (0 trainable, 1 buffer)
//!                    u8 rank, rank x u32 dims
//!                    numel x f32
//! velocities       u32 count, then per entry:
//!                    u16 name len + name bytes
//!                    u32 numel, numel x f32
//! ```
//!
//! Read failures report which section the file broke in, so a truncated or
//! corrupted file is diagnosable without a hex dump.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::train::optim::Sgd;

pub const MAGIC: [u8; 8] = *b"MANETLC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySlot {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    /// Number of epochs completed before this snapshot.
    pub epoch: u32,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    pub velocities: Vec<VelocitySlot>,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore<f32>,
        optimizer: &Sgd<f32>,
        config_echo: &str,
        epoch: u32,
        seed: u64,
    ) -> Checkpoint {
        let params = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name().to_string(),
                kind: p.kind(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        let velocities = optimizer
            .velocity_entries(store)
            .into_iter()
            .map(|(name, data)| VelocitySlot { name, data })
            .collect();
        Checkpoint { config_echo: config_echo.to_string(), epoch, seed, params, velocities }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_echo.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_echo.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            write_name(&mut out, &p.name);
            out.push(match p.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.velocities.len() as u32).to_le_bytes());
        for slot in &self.velocities {
            write_name(&mut out, &slot.name);
            out.extend_from_slice(&(slot.data.len() as u32).to_le_bytes());
            for &v in &slot.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, section: "magic" };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        r.section = "version";
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        r.section = "config";
        let echo_len = r.u32()? as usize;
        let config_echo = r.string(echo_len)?;
        r.section = "header";
        let epoch = r.u32()?;
        let seed = r.u64()?;
        r.section = "params";
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                other => {
                    return Err(Error::checkpoint(
                        "params",
                        format!("unknown parameter kind {other} for `{name}`"),
                    ))
                }
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            params.push(NamedTensor { name, kind, shape, data: r.f32s(numel)? });
        }
        r.section = "optimizer";
        let count = r.u32()? as usize;
        let mut velocities = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let numel = r.u32()? as usize;
            velocities.push(VelocitySlot { name, data: r.f32s(numel)? });
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(
                "optimizer",
                format!("{} trailing bytes after the last section", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint { config_echo, epoch, seed, params, velocities })
    }

    /// Copy every stored tensor and velocity back into a freshly built
    /// model. The store must contain exactly the checkpointed parameters
    /// with matching shapes; anything else means the model was built from a
    /// different configuration.
    pub fn restore(&self, store: &mut ParamStore<f32>, optimizer: &mut Sgd<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::checkpoint(
                "params",
                format!(
                    "checkpoint holds {} parameters but the model has {}",
                    self.params.len(),
                    store.len()
                ),
            ));
        }
        for p in &self.params {
            let key = store.key(&p.name).ok_or_else(|| {
                Error::checkpoint("params", format!("model has no parameter `{}`", p.name))
            })?;
            let target = store.tensor_mut(key);
            if target.shape() != p.shape.as_slice() {
                return Err(Error::checkpoint(
                    "params",
                    format!(
                        "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                        p.name,
                        p.shape,
                        target.shape()
                    ),
                ));
            }
            target.data_mut().copy_from_slice(&p.data);
        }
        for slot in &self.velocities {
            optimizer
                .load_velocity(store, &slot.name, &slot.data)
                .map_err(|e| Error::checkpoint("optimizer", e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(self.section, "unexpected end of file"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let section = self.section;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::checkpoint(section, "invalid UTF-8"))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        self.string(len)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
