use std::collections::BTreeMap;
use std::path::Path;

use super::{Adam, ModelShape, SegModel, TrainConfig};
use crate::error::{RcfError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCFK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model, EMA weights and optimizer state. All state is held at f32 precision
/// so that a save/load cycle is lossless.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SegModel,
    pub ema_params: Vec<f64>,
    pub optimizer: Adam,
    pub object_channel: Option<usize>,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Checkpoint {
    pub fn new(config: TrainConfig, mut model: SegModel, mut ema_params: Vec<f64>, mut optimizer: Adam, object_channel: Option<usize>) -> Self {
        model.visit_params(&mut |_, v, _| round_f32(v));
        model.visit_buffers(&mut |_, v| round_f32(v));
        model.zero_grad();
        round_f32(&mut ema_params);
        round_f32(&mut optimizer.m);
        round_f32(&mut optimizer.v);
        Self { config, model, ema_params, optimizer, object_channel }
    }

    /// The model with its parameters replaced by the EMA weights.
    pub fn ema_model(&self) -> SegModel {
        let mut m = self.model.clone();
        m.set_flat_params(&self.ema_params).expect("EMA vector matches the model");
        m
    }

    fn header_kv(&self) -> BTreeMap<String, String> {
        let mut kv: BTreeMap<String, String> =
            self.config.to_kv().into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect();
        let s = &self.model.shape;
        kv.insert("model.input_height".into(), s.input_height.to_string());
        kv.insert("model.input_width".into(), s.input_width.to_string());
        kv.insert("optim.step".into(), self.optimizer.step.to_string());
        kv.insert("optim.total_steps".into(), self.optimizer.total_steps.to_string());
        kv.insert("optim.lr".into(), self.optimizer.lr.to_string());
        kv.insert(
            "state.object_channel".into(),
            self.object_channel.map_or_else(|| "none".to_string(), |c| c.to_string()),
        );
        kv
    }

    fn blobs(&self) -> Vec<(String, Vec<f64>)> {
        let mut model = self.model.clone();
        let mut out = Vec::new();
        model.visit_params(&mut |name, v, _| out.push((format!("param/{name}"), v.to_vec())));
        model.visit_buffers(&mut |name, v| out.push((format!("buffer/{name}"), v.to_vec())));
        let mut off = 0;
        let mut named = Vec::new();
        model.visit_params(&mut |name, v, _| {
            named.push((name.to_string(), off, v.len()));
            off += v.len();
        });
        for (prefix, src) in [("ema", &self.ema_params), ("adam_m", &self.optimizer.m), ("adam_v", &self.optimizer.v)] {
            for (name, o, n) in &named {
                out.push((format!("{prefix}/{name}"), src[*o..*o + *n].to_vec()));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header: String = self.header_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        let blobs = self.blobs();
        buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, vals) in blobs {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(vals.len() as u32).to_le_bytes());
            for v in vals {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(RcfError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(RcfError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| RcfError::Format("checkpoint header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| RcfError::Format(format!("malformed checkpoint header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| RcfError::Format(format!("checkpoint header lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| RcfError::Format(format!("bad value for {k}"))) };
        let config = TrainConfig::from_kv(kv.iter().filter_map(|(k, v)| k.strip_prefix("train.").map(|k| (k, v.as_str()))))
            .map_err(|e| RcfError::Format(format!("checkpoint config: {e}")))?;
        let shape = ModelShape::from_config(&config, num("model.input_height")? as usize, num("model.input_width")? as usize);
        let mut model = SegModel::new(shape, config.seed).map_err(|e| RcfError::Format(format!("checkpoint shape: {e}")))?;
        let n = model.num_params();
        let lr: f64 = get("optim.lr")?.parse().map_err(|_| RcfError::Format("bad optim.lr".into()))?;
        let mut optimizer = Adam::new(n, lr, config.min_lr, config.poly_power, num("optim.total_steps")? as usize, config.weight_decay);
        optimizer.step = num("optim.step")?;
        let object_channel = match get("state.object_channel")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| RcfError::Format("bad state.object_channel".into()))?),
        };

        let count = r.u32()? as usize;
        let mut blobs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| RcfError::Format("blob name is not UTF-8".into()))?;
            let len = r.u32()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| RcfError::Format("blob too large".into()))?)?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            blobs.insert(name, vals);
        }
        if r.pos != bytes.len() {
            return Err(RcfError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let mut missing = None;
        let mut fill = |key: String, dst: &mut [f64]| match blobs.get(&key) {
            Some(v) if v.len() == dst.len() => dst.copy_from_slice(v),
            _ => missing = Some(key),
        };
        model.visit_params(&mut |name, v, _| fill(format!("param/{name}"), v));
        model.visit_buffers(&mut |name, v| fill(format!("buffer/{name}"), v));
        let mut ema = vec![0.0; n];
        let mut off = 0;
        let mut named = Vec::new();
        model.visit_params(&mut |name, v, _| {
            named.push((name.to_string(), off, v.len()));
            off += v.len();
        });
        for (prefix, dst) in [("ema", &mut ema), ("adam_m", &mut optimizer.m), ("adam_v", &mut optimizer.v)] {
            for (name, o, len) in &named {
                fill(format!("{prefix}/{name}"), &mut dst[*o..*o + *len]);
            }
        }
        if let Some(key) = missing {
            return Err(RcfError::Format(format!("checkpoint lacks blob {key} or it has the wrong length")));
        }
        Ok(Self { config, model, ema_params: ema, optimizer, object_channel })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RcfError::Format("checkpoint is truncated".into()));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
