//! Single-file checkpoints: a config snapshot, string metadata and a flat
//! list of named little-endian tensors.
//!
//! Layout: magic `IDFUSECK`, `u32` version, then length-prefixed config
//! text, a `u64` step, `u32`-counted metadata pairs and `u32`-counted
//! tensors. A tensor is a name, a dtype byte (0 = f32, 1 = f64), a `u32`
//! rank, `u64` dims and the raw values. Tensor names are prefixed with their
//! container, for example `main_encoder/head.conv0.weight`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use idfuse_core::generator::{AverageCode, Generator};
use idfuse_core::identity::Embedder;
use idfuse_core::optim::Adam;
use idfuse_core::params::ParamStore;
use idfuse_core::trainer::Trainer;
use idfuse_core::{Error as CoreError, Tensor};

use crate::config_file::{parse_config, serialize_config};
use crate::error::{Error, Result};
use idfuse_core::config::ExperimentConfig;

const MAGIC: &[u8; 8] = b"IDFUSECK";
const VERSION: u32 = 1;

pub const IDENTITY: &str = "identity_encoder";
pub const MAIN: &str = "main_encoder";
pub const GENERATOR: &str = "generator";
pub const NOISE: &str = "generator_noise";
pub const EMBEDDER: &str = "embedder";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

fn push_store(entries: &mut Vec<Entry>, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        entries.push(Entry {
            name: format!("{prefix}/{name}"),
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        });
    }
}

fn push_adam(
    entries: &mut Vec<Entry>,
    meta: &mut BTreeMap<String, String>,
    prefix: &str,
    names: &[String],
    adam: &Adam<f32>,
) {
    meta.insert(format!("{prefix}.step"), adam.step.to_string());
    meta.insert(format!("{prefix}.lr"), adam.lr.to_string());
    meta.insert(format!("{prefix}.beta1"), adam.beta1.to_string());
    meta.insert(format!("{prefix}.beta2"), adam.beta2.to_string());
    meta.insert(format!("{prefix}.eps"), adam.eps.to_string());
    for (moment, tensors) in [("m", &adam.m), ("v", &adam.v)] {
        for (name, t) in names.iter().zip(tensors) {
            entries.push(Entry {
                name: format!("{prefix}.{moment}/{name}"),
                shape: t.shape().to_vec(),
                data: TensorData::F32(t.data().to_vec()),
            });
        }
    }
}

fn push_f64(entries: &mut Vec<Entry>, name: &str, values: &[f64]) {
    entries.push(Entry {
        name: name.into(),
        shape: vec![values.len()],
        data: TensorData::F64(values.to_vec()),
    });
}

impl Checkpoint {
    /// Snapshot of every container, optimizer state and the loss history.
    pub fn capture(trainer: &Trainer) -> Result<Self> {
        let mut entries = Vec::new();
        let mut meta = BTreeMap::new();
        push_store(&mut entries, IDENTITY, trainer.identity.params());
        push_store(&mut entries, MAIN, trainer.encoder.params());
        push_store(&mut entries, GENERATOR, trainer.generator.params());
        push_store(&mut entries, NOISE, trainer.generator.noise_buffers());
        push_store(&mut entries, EMBEDDER, trainer.embedder.params());
        push_adam(
            &mut entries,
            &mut meta,
            "identity_opt",
            trainer.identity.params().names(),
            &trainer.identity_opt,
        );
        push_adam(
            &mut entries,
            &mut meta,
            "main_opt",
            trainer.encoder.params().names(),
            &trainer.encoder_opt,
        );
        let avg = trainer.generator.average().ok_or(CoreError::Validation {
            field: "average_code".into(),
            reason: "not computed yet".into(),
        })?;
        push_f64(&mut entries, "average_code", &avg.w_bar);
        meta.insert("average_code.samples".into(), avg.samples.to_string());
        push_f64(&mut entries, "loss_history", trainer.loss_history());
        meta.insert(
            "identity_pretrained".into(),
            trainer.identity.is_pretrained().to_string(),
        );
        meta.insert("ablation".into(), trainer.config.ablation.label().into());
        Ok(Checkpoint {
            config: trainer.config.clone(),
            step: trainer.step,
            meta,
            entries,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// All `f32` tensors under `prefix/`, in file order.
    pub fn store(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let lead = format!("{prefix}/");
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix(&lead) {
                match &e.data {
                    TensorData::F32(v) => {
                        store.push(name, Tensor::new(&e.shape, v.clone())?);
                    }
                    TensorData::F64(_) => return Err(self.corrupt(format!("`{}` is not f32", e.name))),
                }
            }
        }
        Ok(store)
    }

    fn f64_values(&self, name: &str) -> Result<&[f64]> {
        match self.entry(name).map(|e| &e.data) {
            Some(TensorData::F64(v)) => Ok(v),
            _ => Err(self.corrupt(format!("missing f64 tensor `{name}`"))),
        }
    }

    fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.corrupt(format!("missing or malformed metadata `{key}`")))
    }

    fn corrupt(&self, message: String) -> Error {
        Error::Format {
            path: "<checkpoint>".into(),
            message,
        }
    }

    fn restore_adam(&self, prefix: &str, params: &ParamStore<f32>, adam: &mut Adam<f32>) -> Result<()> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            for (moment, out) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}.{moment}/{name}");
                let e = self
                    .entry(&key)
                    .ok_or_else(|| self.corrupt(format!("missing `{key}`")))?;
                let TensorData::F32(data) = &e.data else {
                    return Err(self.corrupt(format!("`{key}` is not f32")));
                };
                if e.shape != p.shape() {
                    return Err(
                        CoreError::ParamMismatch(vec![format!("{key}: {:?} vs {:?}", e.shape, p.shape())]).into(),
                    );
                }
                out.push(Tensor::new(&e.shape, data.clone())?);
            }
        }
        adam.m = m;
        adam.v = v;
        adam.step = self.meta_value(&format!("{prefix}.step"))?;
        adam.lr = self.meta_value(&format!("{prefix}.lr"))?;
        adam.beta1 = self.meta_value(&format!("{prefix}.beta1"))?;
        adam.beta2 = self.meta_value(&format!("{prefix}.beta2"))?;
        adam.eps = self.meta_value(&format!("{prefix}.eps"))?;
        Ok(())
    }

    /// Overwrite a trainer built for the same profile and flags.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        let (want, have) = (&trainer.config.scale.name, &self.config.scale.name);
        if want != have || trainer.config.scale != self.config.scale {
            return Err(CoreError::Shape {
                op: "load_checkpoint",
                detail: format!("checkpoint profile `{have}` does not match the `{want}` profile"),
            }
            .into());
        }
        trainer.identity.params_mut().set_all(&self.store(IDENTITY)?)?;
        trainer
            .identity
            .mark_pretrained(self.meta_value("identity_pretrained")?);
        trainer.encoder.params_mut().set_all(&self.store(MAIN)?)?;
        trainer
            .generator
            .set_parameters(&self.store(GENERATOR)?, &self.store(NOISE)?)?;
        trainer.embedder.params_mut().set_all(&self.store(EMBEDDER)?)?;
        let params = trainer.identity.params().clone();
        self.restore_adam("identity_opt", &params, &mut trainer.identity_opt)?;
        let params = trainer.encoder.params().clone();
        self.restore_adam("main_opt", &params, &mut trainer.encoder_opt)?;
        trainer.generator.set_average_code(AverageCode {
            w_bar: self.f64_values("average_code")?.to_vec(),
            samples: self.meta_value("average_code.samples")?,
        })?;
        trainer.set_loss_history(self.f64_values("loss_history")?.to_vec());
        trainer.step = self.step;
        trainer.config = self.config.clone();
        Ok(())
    }

    /// Rebuild the full trainer from the snapshot alone.
    pub fn into_trainer(&self) -> Result<Trainer> {
        let profile = &self.config.scale;
        let mut generator = Generator::<f32>::new(profile, 0)?;
        generator.set_parameters(&self.store(GENERATOR)?, &self.store(NOISE)?)?;
        generator.freeze();
        generator.set_average_code(AverageCode {
            w_bar: self.f64_values("average_code")?.to_vec(),
            samples: self.meta_value("average_code.samples")?,
        })?;
        let mut embedder = Embedder::<f32>::new(profile, 0);
        embedder.params_mut().set_all(&self.store(EMBEDDER)?)?;
        let identity = self.store(IDENTITY)?;
        let backbone = self.config.ablation.load_pretrained_id.then_some(&identity);
        let mut trainer = Trainer::new(self.config.clone(), generator, embedder, backbone)?;
        self.restore_into(&mut trainer)?;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serialize_config(&self.config));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(match e.data {
                TensorData::F32(_) => 0,
                TensorData::F64(_) => 1,
            });
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config = parse_config(&r.string()?).map_err(|e| format!("config snapshot: {e}"))?;
        let step = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("`{name}`: shape overflows"))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(numel.checked_mul(4).ok_or("size overflow")?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(numel.checked_mul(8).ok_or("size overflow")?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(format!("`{name}`: unknown dtype {d}")),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            step,
            meta,
            entries,
        })
    }

    /// Write atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8 string".into())
    }
}
