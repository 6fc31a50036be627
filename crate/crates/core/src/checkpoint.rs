//! Single-file training checkpoints (`H3DC`).
//!
//! Layout, all little-endian, arrays in the same row-major f32 convention as
//! `H3DV`: magic `H3DC`, u16 version, u32 config length and the config as
//! `key=value` text, then the named-entry table
//!
//! ```text
//! u32 n_params   { u16 name_len, name, u8 rank, u32 dims[rank], f32 data }
//! u32 n_moments  { u16 name_len, name, u64 step, f32 m, f32 v }   // shapes follow the parameter
//! u32 epoch, u32 best_epoch, f64 best_val_psnr, u64 step
//! u32 n_history  { u32 epoch, u64 step, f64 total, prenet, transnet, deep, lr, val_psnr }
//! ```

use std::fs;
use std::path::Path;

use h3d_tensor::optim::{AdamW, MomentState};
use h3d_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::kv::KvDoc;
use crate::losses::LossBreakdown;

const MAGIC: &[u8; 4] = b"H3DC";
const VERSION: u16 = 1;

/// One line of the loss curve: epoch means plus the validation score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken when the epoch ended.
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration.
    pub config: KvDoc,
    pub params: ParamStore<f32>,
    /// Optimizer moments keyed by parameter name.
    pub moments: Vec<(String, MomentState<f32>)>,
    /// Last epoch trained.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// A checkpoint with parameters only.
    pub fn from_params(config: KvDoc, params: ParamStore<f32>) -> Self {
        Self { config, params, moments: Vec::new(), epoch: 0, best_epoch: 0, best_val_psnr: f64::NAN, step: 0, history: Vec::new() }
    }

    /// Collects the optimizer state of every parameter that has one.
    pub fn capture_moments(params: &ParamStore<f32>, opt: &AdamW<f32>) -> Vec<(String, MomentState<f32>)> {
        params.ids().filter_map(|id| opt.state(id).map(|s| (params.name(id).to_string(), s.clone()))).collect()
    }

    /// Installs the stored moments into `opt`, matching parameters by name.
    pub fn restore_moments(&self, opt: &mut AdamW<f32>) -> Result<()> {
        for (name, st) in &self.moments {
            let id = self.params.id(name).ok_or_else(|| Error::Format(format!("moments for unknown parameter {name}")))?;
            opt.set_state(id, st.clone());
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_string();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());

        put_u32(&mut out, self.params.len())?;
        for (_, e) in self.params.iter() {
            put_name(&mut out, &e.name)?;
            let shape = e.value.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| Error::Shape(format!("{} has rank {}", e.name, shape.len())))?);
            for &d in shape {
                put_u32(&mut out, d)?;
            }
            put_f32s(&mut out, e.value.data());
        }

        put_u32(&mut out, self.moments.len())?;
        for (name, st) in &self.moments {
            let id = self.params.id(name).ok_or_else(|| Error::Data(format!("moments for unknown parameter {name}")))?;
            let n = self.params.get(id).numel();
            if st.m.numel() != n || st.v.numel() != n {
                return Err(Error::Shape(format!("moments of {name} do not match the parameter size {n}")));
            }
            put_name(&mut out, name)?;
            out.extend_from_slice(&st.step.to_le_bytes());
            put_f32s(&mut out, st.m.data());
            put_f32s(&mut out, st.v.data());
        }

        put_u32(&mut out, self.epoch)?;
        put_u32(&mut out, self.best_epoch)?;
        out.extend_from_slice(&self.best_val_psnr.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.history.len())?;
        for r in &self.history {
            put_u32(&mut out, r.epoch)?;
            out.extend_from_slice(&r.step.to_le_bytes());
            for x in [r.loss.total, r.loss.prenet, r.loss.transnet, r.loss.deep, r.lr, r.val_psnr] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let config = KvDoc::parse(&r.utf8(n)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.short_str()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("parameter size overflow".into()))?;
            let data = r.f32s(numel)?;
            if params.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            params.add(name, Tensor::from_vec(&shape, data));
        }

        let mut moments = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.short_str()?;
            let id = params.id(&name).ok_or_else(|| Error::Format(format!("moments for unknown parameter {name}")))?;
            let shape = params.get(id).shape().to_vec();
            let step = r.u64()?;
            let m = Tensor::from_vec(&shape, r.f32s(params.get(id).numel())?);
            let v = Tensor::from_vec(&shape, r.f32s(params.get(id).numel())?);
            moments.push((name, MomentState { m, v, step }));
        }

        let epoch = r.u32()? as usize;
        let best_epoch = r.u32()? as usize;
        let best_val_psnr = r.f64()?;
        let step = r.u64()?;
        let mut history = Vec::new();
        for _ in 0..r.u32()? {
            let epoch = r.u32()? as usize;
            let step = r.u64()?;
            let mut f = [0.0; 6];
            for x in &mut f {
                *x = r.f64()?;
            }
            let loss = LossBreakdown { total: f[0], prenet: f[1], transnet: f[2], deep: f[3] };
            history.push(EpochRecord { epoch, step, loss, lr: f[4], val_psnr: f[5] });
        }
        r.finish()?;
        Ok(Self { config, params, moments, epoch, best_epoch, best_val_psnr, step, history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Shape(format!("{n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let n = u16::try_from(name.len()).map_err(|_| Error::Shape(format!("name too long: {name}")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(4 * xs.len());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}
