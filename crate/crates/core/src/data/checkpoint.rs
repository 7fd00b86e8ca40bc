//! Versioned single-file training checkpoints.
//!
//! All integers and floats are little-endian; strings are u32-length-prefixed UTF-8.
//!
//! ```text
//! magic b"LATRCKPT", version u32, reserved u32
//! config JSON (string)
//! tensor count u32, then per tensor:
//!     name, kind u8 (0 parameter, 1 buffer), trainable u8, rank u32, extents u64 × rank, f32 × numel
//! adam: beta1 f64, beta2 f64, eps f64, learning rate f64, step u64, moment count u32, then per entry:
//!     parameter name, step u64, numel u64, m f32 × numel, v f32 × numel
//! schedule: epoch u64, next block u64, unfreezes u64, current lr f64
//! rng: seed [u8; 32], stream u64, word position u128
//! next epoch u64
//! metadata JSON (string)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::finetune::ScheduleState;
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LATRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Parameter,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step: u64,
    pub moments: Vec<(String, Moments<f32>)>,
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
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
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<TensorEntry>,
    pub adam: AdamSnapshot,
    pub schedule: ScheduleState,
    pub rng: RngState,
    pub next_epoch: u64,
    pub metadata_json: String,
}

impl Checkpoint {
    pub fn capture(
        config_json: String,
        store: &ParamStore<f32>,
        adam: &AdamState<f32>,
        schedule: &ScheduleState,
        rng: &ChaCha8Rng,
        next_epoch: u64,
        metadata_json: String,
    ) -> Self {
        let mut tensors: Vec<TensorEntry> = store
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                kind: EntryKind::Parameter,
                trainable: p.trainable,
                tensor: p.tensor.clone(),
            })
            .collect();
        tensors.extend(store.buffers().iter().map(|b| TensorEntry {
            name: b.name.clone(),
            kind: EntryKind::Buffer,
            trainable: false,
            tensor: b.tensor.clone(),
        }));
        let moments = store
            .params()
            .iter()
            .zip(&adam.moments)
            .filter_map(|(p, m)| m.as_ref().map(|m| (p.name.clone(), m.clone())))
            .collect();
        Self {
            config_json,
            tensors,
            adam: AdamSnapshot {
                config: adam.config,
                learning_rate: adam.learning_rate,
                step: adam.step,
                moments,
            },
            schedule: schedule.clone(),
            rng: RngState::capture(rng),
            next_epoch,
            metadata_json,
        }
    }

    /// Copies every stored tensor and trainable flag into `store`. Every entry of
    /// the store must be present in the checkpoint and vice versa.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut seen_params = vec![false; store.len()];
        let mut seen_buffers = vec![false; store.buffers().len()];
        for e in &self.tensors {
            let target = match e.kind {
                EntryKind::Parameter => store.find(&e.name).map(|id| {
                    seen_params[id.index()] = true;
                    let p = store.param_mut(id);
                    p.trainable = e.trainable;
                    &mut p.tensor
                }),
                EntryKind::Buffer => store.find_buffer(&e.name).map(|id| {
                    seen_buffers[id.index()] = true;
                    store.buffer_mut(id)
                }),
            };
            let target = target.ok_or_else(|| Error::UnknownParameter(e.name.clone()))?;
            if target.shape() != e.tensor.shape() {
                return Err(Error::dim(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    e.tensor.shape(),
                    target.shape()
                )));
            }
            *target = e.tensor.clone();
        }
        let missing: Vec<&str> = store
            .params()
            .iter()
            .zip(&seen_params)
            .filter(|(_, s)| !**s)
            .map(|(p, _)| p.name.as_str())
            .chain(
                store
                    .buffers()
                    .iter()
                    .zip(&seen_buffers)
                    .filter(|(_, s)| !**s)
                    .map(|(b, _)| b.name.as_str()),
            )
            .collect();
        if !missing.is_empty() {
            return Err(Error::Malformed(format!("checkpoint lacks {missing:?}")));
        }
        Ok(())
    }

    /// Rebuilds the optimizer state with moments mapped onto `store`'s parameter ids.
    pub fn restore_adam(&self, store: &ParamStore<f32>) -> Result<AdamState<f32>> {
        let mut adam = AdamState::new(self.adam.config, self.adam.learning_rate);
        adam.step = self.adam.step;
        adam.moments = vec![None; store.len()];
        for (name, m) in &self.adam.moments {
            let id = store
                .find(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if m.m.len() != store.tensor(id).numel() {
                return Err(Error::dim(format!("optimizer moments of {name} have the wrong length")));
            }
            adam.moments[id.index()] = Some(m.clone());
        }
        Ok(adam)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(0);
        w.str(&self.config_json)?;
        w.len_u32(self.tensors.len(), "tensor count")?;
        for e in &self.tensors {
            w.str(&e.name)?;
            w.u8(match e.kind {
                EntryKind::Parameter => 0,
                EntryKind::Buffer => 1,
            });
            w.u8(e.trainable as u8);
            w.len_u32(e.tensor.shape().len(), "rank")?;
            for &d in e.tensor.shape() {
                w.u64(d as u64);
            }
            w.f32s(e.tensor.data());
        }
        let a = &self.adam;
        w.f64(a.config.beta1);
        w.f64(a.config.beta2);
        w.f64(a.config.eps);
        w.f64(a.learning_rate);
        w.u64(a.step);
        w.len_u32(a.moments.len(), "moment count")?;
        for (name, m) in &a.moments {
            w.str(name)?;
            w.u64(m.step);
            w.u64(m.m.len() as u64);
            w.f32s(&m.m);
            w.f32s(&m.v);
        }
        let s = &self.schedule;
        w.u64(s.epoch as u64);
        w.u64(s.next_block as u64);
        w.u64(s.unfreezes as u64);
        w.f64(s.current_lr);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.u64(self.next_epoch);
        w.str(&self.metadata_json)?;
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Version {
                found: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: format!("checkpoint version {version}, supported {CHECKPOINT_VERSION}"),
            });
        }
        r.u32("reserved")?;
        let config_json = r.str("config")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let kind = match r.u8("tensor kind")? {
                0 => EntryKind::Parameter,
                1 => EntryKind::Buffer,
                k => return Err(Error::Malformed(format!("{name}: unknown tensor kind {k}"))),
            };
            let trainable = r.u8("trainable flag")? != 0;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("{name}: shape overflows")))?;
            let data = r.f32s(numel, &name)?;
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
            tensors.push(TensorEntry {
                name,
                kind,
                trainable,
                tensor,
            });
        }
        let config = AdamConfig {
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            eps: r.f64("eps")?,
        };
        let learning_rate = r.f64("learning rate")?;
        let step = r.u64("adam step")?;
        let n = r.u32("moment count")?;
        let mut moments = Vec::with_capacity(n.min(1 << 16) as usize);
        for _ in 0..n {
            let name = r.str("moment name")?;
            let mstep = r.u64("moment step")?;
            let len = r.u64("moment length")? as usize;
            let m = r.f32s(len, &name)?;
            let v = r.f32s(len, &name)?;
            moments.push((name, Moments { step: mstep, m, v }));
        }
        let schedule = ScheduleState {
            epoch: r.u64("schedule epoch")? as usize,
            next_block: r.u64("next block")? as usize,
            unfreezes: r.u64("unfreezes")? as usize,
            current_lr: r.f64("current lr")?,
        };
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64("rng stream")?,
            word_pos: r.u128("rng word position")?,
        };
        let next_epoch = r.u64("next epoch")?;
        let metadata_json = r.str("metadata")?;
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        Ok(Self {
            config_json,
            tensors,
            adam: AdamSnapshot {
                config,
                learning_rate,
                step,
                moments,
            },
            schedule,
            rng,
            next_epoch,
            metadata_json,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
