//! Checkpoint container.
//!
//! A checkpoint is a single binary file holding the network configuration,
//! every named parameter as raw little-endian values, and (optionally) the
//! training state needed to resume a run bit-exactly: optimizer moments,
//! step and epoch counters, and the learning-rate schedule state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "DVMNCKPT"                      8 bytes
//! version u32                            currently 1
//! dtype   u8                             1 = f32, 2 = f64
//! flags   u8                             bit 0: training state present
//! config  u64 length + serde_json of NetworkConfig
//! params  u64 count, then per parameter:
//!         u64 name length + UTF-8 name
//!         u8 trainable
//!         4 x u64 shape (batch, channels, height, width)
//!         raw little-endian values
//! train   (only with flag bit 0)
//!         u8 optimizer mode (0 = adam, 1 = adamw)
//!         u64 step, f64 lr, beta1, beta2, eps, weight_decay
//!         u64 epoch
//!         u8 has_best (+ f64 best), u64 evals since improvement
//!         per trainable parameter in registry order:
//!         first-moment values, then second-moment values
//! ```

use std::path::Path;

use super::{build_dvmn, DvmnModel, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Shape, Tensor};
use crate::training::OptimizerMode;

const MAGIC: &[u8; 8] = b"DVMNCKPT";
const VERSION: u32 = 1;

/// Plateau-schedule bookkeeping carried across a resume.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub best: Option<f64>,
    pub evals_since_improve: u64,
}

impl Default for ScheduleState {
    fn default() -> Self {
        ScheduleState {
            best: None,
            evals_since_improve: 0,
        }
    }
}

/// Everything beyond the parameters needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub mode: OptimizerMode,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epoch: u64,
    pub schedule: ScheduleState,
    /// Adam moments aligned with the registry's trainable parameters.
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn tensor<T: Scalar>(&mut self, shape: Shape) -> Result<Tensor<T>> {
        let width = T::byte_width();
        let raw = self.take(shape.count() * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(shape, data)
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn save_checkpoint<T: Scalar>(
    model: &DvmnModel<T>,
    train_state: Option<&TrainState<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(T::DTYPE.tag());
    w.u8(if train_state.is_some() { 1 } else { 0 });

    let config = serde_json::to_vec(model.config())
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    w.bytes(&config);

    w.u64(model.registry().len() as u64);
    for (_, p) in model.registry().iter() {
        w.bytes(p.name.as_bytes());
        w.u8(p.trainable as u8);
        let s = p.value.shape();
        for dim in [s.batch, s.channels, s.height, s.width] {
            w.u64(dim as u64);
        }
        w.tensor(&p.value);
    }

    if let Some(ts) = train_state {
        w.u8(match ts.mode {
            OptimizerMode::Adam => 0,
            OptimizerMode::AdamW => 1,
        });
        w.u64(ts.step);
        w.f64(ts.lr);
        w.f64(ts.beta1);
        w.f64(ts.beta2);
        w.f64(ts.eps);
        w.f64(ts.weight_decay);
        w.u64(ts.epoch);
        match ts.schedule.best {
            Some(best) => {
                w.u8(1);
                w.f64(best);
            }
            None => w.u8(0),
        }
        w.u64(ts.schedule.evals_since_improve);
        let trainable = model.registry().trainable_ids();
        if ts.first_moment.len() != trainable.len() || ts.second_moment.len() != trainable.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments cover {} parameters, registry has {} trainable",
                ts.first_moment.len(),
                trainable.len()
            )));
        }
        for (m, v) in ts.first_moment.iter().zip(&ts.second_moment) {
            w.tensor(m);
            w.tensor(v);
        }
    }

    let path = path.as_ref();
    std::fs::write(path, &w.buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Element type recorded in a checkpoint file, without loading it.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<Dtype> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if data.len() < 14 || &data[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    Dtype::from_tag(data[12])
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(DvmnModel<T>, Option<TrainState<T>>)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&data);
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = Dtype::from_tag(r.u8()?)?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype:?} values, requested {:?}",
            T::DTYPE
        )));
    }
    let flags = r.u8()?;

    let cfg: NetworkConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let mut model: DvmnModel<T> = build_dvmn(&cfg, 0)?;

    let count = r.u64()? as usize;
    if count != model.registry().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, architecture expects {}",
            model.registry().len()
        )));
    }
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let trainable = r.u8()? != 0;
        let shape = Shape::new(
            r.u64()? as usize,
            r.u64()? as usize,
            r.u64()? as usize,
            r.u64()? as usize,
        );
        let value = r.tensor::<T>(shape)?;
        let id = model
            .registry()
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = model.registry().get(id);
        if slot.value.shape() != shape || slot.trainable != trainable {
            return Err(Error::Checkpoint(format!(
                "parameter {name} mismatches architecture: {} vs {shape}",
                slot.value.shape()
            )));
        }
        *model.registry_mut().value_mut(id) = value;
    }

    let train_state = if flags & 1 != 0 {
        let mode = match r.u8()? {
            0 => OptimizerMode::Adam,
            1 => OptimizerMode::AdamW,
            other => {
                return Err(Error::Checkpoint(format!("unknown optimizer mode {other}")))
            }
        };
        let step = r.u64()?;
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let weight_decay = r.f64()?;
        let epoch = r.u64()?;
        let best = if r.u8()? != 0 { Some(r.f64()?) } else { None };
        let evals_since_improve = r.u64()?;
        let trainable = model.registry().trainable_ids();
        let mut first = Vec::with_capacity(trainable.len());
        let mut second = Vec::with_capacity(trainable.len());
        for id in &trainable {
            let shape = model.registry().get(*id).value.shape();
            first.push(r.tensor::<T>(shape)?);
            second.push(r.tensor::<T>(shape)?);
        }
        Some(TrainState {
            mode,
            step,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            epoch,
            schedule: ScheduleState {
                best,
                evals_since_improve,
            },
            first_moment: first,
            second_moment: second,
        })
    } else {
        None
    };

    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((model, train_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> NetworkConfig {
        NetworkConfig {
            channel_base: 4,
            stages: 2,
            bottlenecks_per_stage: 2,
            sisl_count: 1,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("sparseconv-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let model = build_dvmn::<f32>(&desk_config(), 11).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();

        let (loaded, state) = load_checkpoint::<f32>(&path).unwrap();
        assert!(state.is_none());
        for ((_, p), (_, q)) in model.registry().iter().zip(loaded.registry().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }

        save_checkpoint(&loaded, None, &path).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let dir = std::env::temp_dir().join("sparseconv-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dtype.ckpt");
        let model = build_dvmn::<f32>(&desk_config(), 1).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        assert_eq!(checkpoint_dtype(&path).unwrap(), Dtype::F32);
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn train_state_roundtrips() {
        let dir = std::env::temp_dir().join("sparseconv-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train-state.ckpt");
        let model = build_dvmn::<f32>(&desk_config(), 2).unwrap();
        let trainable = model.registry().trainable_ids();
        let state = TrainState {
            mode: OptimizerMode::AdamW,
            step: 42,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epoch: 3,
            schedule: ScheduleState {
                best: Some(123.5),
                evals_since_improve: 2,
            },
            first_moment: trainable
                .iter()
                .map(|id| Tensor::filled(model.registry().get(*id).value.shape(), 0.25f32))
                .collect(),
            second_moment: trainable
                .iter()
                .map(|id| Tensor::filled(model.registry().get(*id).value.shape(), 0.5f32))
                .collect(),
        };
        save_checkpoint(&model, Some(&state), &path).unwrap();
        let (_, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.unwrap(), state);
    }
}
