//! `ORTCKPT1` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ORTCKPT1" | u32 version
//! u32 len | config TOML
//! u32 count | { u16 len | key | u32 len | value }*       metadata
//! u64 seed | u32 count | { u64 stream | u128 position }*  RNG state
//! u32 count | { u16 len | name | u16 len | group | u8 dtype
//!              | u8 ndim | u64 dim* | payload }*           tensors
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Optimizer moments are stored as tensors in the groups `opt.m` and
//! `opt.v` under the parameter's name; the step count is metadata.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use mixmodal_tensor::{AdamW, DType, Moments, ParamStore, Scalar, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngState;
use crate::training::{StageKind, Trainer};

pub const MAGIC: &[u8; 8] = b"ORTCKPT1";
pub const VERSION: u32 = 1;

const GROUP_M: &str = "opt.m";
const GROUP_V: &str = "opt.v";
const KEY_STAGE: &str = "stage";
const KEY_STEP: &str = "step";
const KEY_OPT_STEP: &str = "opt.step";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub metadata: BTreeMap<String, String>,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, rng: RngState) -> Self {
        Self {
            config: model.config.clone(),
            metadata: BTreeMap::new(),
            rng,
            params: model.params.clone(),
            optimizer: None,
        }
    }

    pub fn from_trainer(t: &Trainer<T>) -> Self {
        let mut ck = Self::from_model(&t.model, t.rngs.state());
        ck.metadata.insert(KEY_STAGE.into(), t.stage.name().into());
        ck.metadata.insert(KEY_STEP.into(), t.step.to_string());
        ck.optimizer = Some(OptimizerState {
            step: t.opt.step_count(),
            moments: t.opt.moments().clone(),
        });
        ck
    }

    pub fn model(&self) -> Result<Model<T>> {
        let mut params = self.params.clone();
        params.set_trainable(|_| false);
        Model::from_parts(self.config.clone(), params)
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn trainer(&self) -> Result<Trainer<T>> {
        let stage = self
            .metadata
            .get(KEY_STAGE)
            .and_then(|s| StageKind::from_name(s))
            .ok_or_else(|| Error::Format("checkpoint has no training stage".into()))?;
        let step: usize = self
            .metadata
            .get(KEY_STEP)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("checkpoint has no step count".into()))?;
        let opt_state = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let fresh = Trainer::new(self.model()?, stage, self.rng.seed);
        let opt = AdamW::from_state(fresh.opt.config, opt_state.step, opt_state.moments.clone());
        Ok(Trainer::resume(fresh.model, stage, opt, &self.rng, step))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        put_u32(&mut w, cfg.len());
        w.extend_from_slice(cfg.as_bytes());

        let mut meta = self.metadata.clone();
        if let Some(o) = &self.optimizer {
            meta.insert(KEY_OPT_STEP.into(), o.step.to_string());
        }
        put_u32(&mut w, meta.len());
        for (k, v) in &meta {
            put_u16(&mut w, k.len());
            w.extend_from_slice(k.as_bytes());
            put_u32(&mut w, v.len());
            w.extend_from_slice(v.as_bytes());
        }

        w.extend_from_slice(&self.rng.seed.to_le_bytes());
        put_u32(&mut w, self.rng.positions.len());
        for &(id, pos) in &self.rng.positions {
            w.extend_from_slice(&id.to_le_bytes());
            w.extend_from_slice(&pos.to_le_bytes());
        }

        let mut tensors: Vec<(&str, &str, &Tensor<T>)> =
            self.params.iter().map(|(n, p)| (n, p.group.as_str(), &p.tensor)).collect();
        if let Some(o) = &self.optimizer {
            for (name, m) in &o.moments {
                tensors.push((name, GROUP_M, &m.m));
                tensors.push((name, GROUP_V, &m.v));
            }
        }
        put_u32(&mut w, tensors.len());
        for (name, group, t) in tensors {
            put_u16(&mut w, name.len());
            w.extend_from_slice(name.as_bytes());
            put_u16(&mut w, group.len());
            w.extend_from_slice(group.as_bytes());
            w.push(T::DTYPE.code());
            w.push(t.shape().len() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut w);
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    /// Parses and verifies a checkpoint. Nothing is returned unless the
    /// checksum matches.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checksum);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an ORTCKPT1 file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = r.string(cfg_len)?;
        let config = Config::from_toml(&cfg_text)?;

        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let kl = r.u16()? as usize;
            let k = r.string(kl)?;
            let vl = r.u32()? as usize;
            let v = r.string(vl)?;
            metadata.insert(k, v);
        }
        let opt_step = metadata.remove(KEY_OPT_STEP);

        let seed = r.u64()?;
        let mut positions = Vec::new();
        for _ in 0..r.u32()? {
            let id = r.u64()?;
            let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            positions.push((id, pos));
        }

        let mut params = ParamStore::new();
        let mut ms: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut vs: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for _ in 0..r.u32()? {
            let nl = r.u16()? as usize;
            let name = r.string(nl)?;
            let gl = r.u16()? as usize;
            let group = r.string(gl)?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("bad dtype for {name}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Format(format!("tensor {name} is {dtype}, expected {}", T::DTYPE)));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let size = dtype.size_of();
            let raw = r.take(numel.checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(shape, data)?;
            match group.as_str() {
                GROUP_M => {
                    ms.insert(name, t);
                }
                GROUP_V => {
                    vs.insert(name, t);
                }
                _ => params.insert(name, group, t),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        let optimizer = match opt_step {
            Some(s) => {
                let step = s.parse().map_err(|_| Error::Format("bad optimizer step".into()))?;
                let mut moments = BTreeMap::new();
                for (name, m) in ms {
                    let v = vs.remove(&name).ok_or_else(|| Error::Format(format!("missing second moment of {name}")))?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState { step, moments })
            }
            None => None,
        };
        Ok(Self {
            config,
            metadata,
            rng: RngState { seed, positions },
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 trailer, used as the checkpoint id.
    pub fn id(&self) -> String {
        let b = self.to_bytes();
        crate::training::hex(&b[b.len() - 32..])
    }
}

fn put_u16(w: &mut Vec<u8>, n: usize) {
    w.extend_from_slice(&(n as u16).to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, n: usize) {
    w.extend_from_slice(&(n as u32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format("unexpected end of checkpoint".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}
