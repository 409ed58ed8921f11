use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{Adam, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VINC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model weights, optimizer state and the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, step: u64, model: &Model, opt: &Adam) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            params: model.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam_step: opt.step,
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
        }
    }

    /// Rebuilds the model and optimizer this checkpoint was taken from.
    pub fn restore(&self) -> Result<(Model, Adam)> {
        let mut model = Model::new(self.config.model, self.config.seed)?;
        model.params.load(self.params.clone())?;
        let mut opt = Adam::new(self.config.adam, &model.params);
        let shapes_ok = |ts: &[Tensor]| {
            ts.len() == model.params.len() && ts.iter().zip(model.params.values()).all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_ok(&self.adam_m) || !shapes_ok(&self.adam_v) {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        opt.step = self.adam_step;
        opt.m = self.adam_m.clone();
        opt.v = self.adam_v.clone();
        Ok((model, opt))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config.hash());
        b.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut b, self.config.to_text().as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut b, name.as_bytes());
            put_tensor(&mut b, t);
        }
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        for set in [&self.adam_m, &self.adam_v] {
            b.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for t in set {
                put_tensor(&mut b, t);
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = ExperimentConfig::parse(&text)?;
        if config.hash() != hash {
            return Err(Error::Format("config hash mismatch".into()));
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("bad tensor name".into()))?;
            params.push((name, r.tensor()?));
        }
        let adam_step = r.u64()?;
        let mut sets = Vec::new();
        for _ in 0..2 {
            let k = r.u32()? as usize;
            sets.push((0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?);
        }
        if r.at != bytes.len() {
            return Err(Error::Length {
                expected: r.at,
                found: bytes.len(),
            });
        }
        let adam_v = sets.pop().expect("two sets");
        let adam_m = sets.pop().expect("two sets");
        Ok(Checkpoint {
            config,
            step,
            params,
            adam_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored config hash matches `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ExperimentConfig) -> Result<Checkpoint> {
        let c = Checkpoint::load(path)?;
        if c.config.hash() != expected.hash() {
            return Err(Error::Format("checkpoint was written under a different config".into()));
        }
        Ok(c)
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s);
}

fn put_tensor(b: &mut Vec<u8>, t: &Tensor) {
    b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(Error::Length {
            expected: self.at.saturating_add(n),
            found: self.b.len(),
        })?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}
