//! Versioned binary training snapshots.
//!
//! Layout (little-endian): magic `GATHCKPT`, u32 version, config hash and
//! config TOML as length-prefixed strings, graph sizes, completed epochs,
//! RNG state, then per parameter its name, value, both moments and step
//! count, then batch-norm buffers, then the trailer `GATHEND!`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndiff::{BatchNormState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderConfig, EncoderConfig, RunConfig, TrainConfig};
use crate::error::{GathError, Result};
use crate::kg::KnowledgeGraph;
use crate::model::{Buffers, GathModel};
use crate::optim::OptimizerState;
use crate::params::ParamId;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"GATHCKPT";
pub const TRAILER: &[u8; 8] = b"GATHEND!";
pub const VERSION: u32 = 1;
const MAX_STRING: u32 = 1 << 24;

/// Run-independent part of the configuration, stored in the checkpoint.
/// Paths are left out so identical runs in different directories produce
/// identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Model and training sections; `dataset`/`out` are not stored.
    pub config: RunConfig,
    pub num_entities: usize,
    pub num_relations: usize,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub model: GathModel,
    pub optimizer: OptimizerState,
}

fn corrupt(e: impl std::fmt::Display) -> GathError {
    GathError::Checkpoint(format!("corrupt or truncated checkpoint: {e}"))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(corrupt)?;
    if len > MAX_STRING {
        return Err(corrupt(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(corrupt)?;
    String::from_utf8(buf).map_err(corrupt)
}

fn write_bn<W: Write>(w: &mut W, s: &BatchNormState) -> Result<()> {
    let io = |e| GathError::Checkpoint(format!("write failed: {e}"));
    w.write_u64::<LE>(s.features() as u64).map_err(io)?;
    w.write_f64::<LE>(s.momentum).map_err(io)?;
    w.write_f64::<LE>(s.eps).map_err(io)?;
    for x in s.running_mean.iter().chain(&s.running_var) {
        w.write_f64::<LE>(*x).map_err(io)?;
    }
    Ok(())
}

fn read_bn<R: Read>(r: &mut R) -> Result<BatchNormState> {
    let n = r.read_u64::<LE>().map_err(corrupt)? as usize;
    if n > 1 << 24 {
        return Err(corrupt(format!("batch-norm width {n}")));
    }
    let mut s = BatchNormState::new(n);
    s.momentum = r.read_f64::<LE>().map_err(corrupt)?;
    s.eps = r.read_f64::<LE>().map_err(corrupt)?;
    for x in s.running_mean.iter_mut().chain(s.running_var.iter_mut()) {
        *x = r.read_f64::<LE>().map_err(corrupt)?;
    }
    Ok(s)
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    Tensor::read_from(r).map_err(corrupt)
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config_hash: t.model.config_hash(),
            config: t.config.clone(),
            num_entities: t.model.arch.num_entities,
            num_relations: t.model.arch.num_relations,
            epoch: t.epoch,
            rng: t.rng.clone(),
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| GathError::Checkpoint(format!("write failed: {e}"));
        let stored = StoredConfig {
            encoder: self.config.encoder.clone(),
            decoder: self.config.decoder.clone(),
            train: self.config.train.clone(),
        };
        let toml = toml::to_string(&stored).expect("config serializes");
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LE>(VERSION).map_err(io)?;
        write_str(w, &self.config_hash).map_err(io)?;
        write_str(w, &toml).map_err(io)?;
        w.write_u64::<LE>(self.num_entities as u64).map_err(io)?;
        w.write_u64::<LE>(self.num_relations as u64).map_err(io)?;
        w.write_u64::<LE>(self.epoch as u64).map_err(io)?;
        w.write_all(&self.rng.get_seed()).map_err(io)?;
        w.write_u64::<LE>(self.rng.get_stream()).map_err(io)?;
        w.write_u128::<LE>(self.rng.get_word_pos()).map_err(io)?;
        let params = &self.model.params;
        w.write_u32::<LE>(params.len() as u32).map_err(io)?;
        for id in params.ids() {
            write_str(w, params.name(id)).map_err(io)?;
            params.get(id).write_to(w)?;
            self.optimizer.m[id.0].write_to(w)?;
            self.optimizer.v[id.0].write_to(w)?;
            w.write_u64::<LE>(self.optimizer.steps[id.0]).map_err(io)?;
        }
        let b = &self.model.buffers;
        w.write_u32::<LE>(b.encoder.len() as u32).map_err(io)?;
        for s in &b.encoder {
            write_bn(w, s)?;
        }
        w.write_u8(b.decoder.is_some() as u8).map_err(io)?;
        if let Some(s) = &b.decoder {
            write_bn(w, s)?;
        }
        w.write_all(TRAILER).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != MAGIC {
            return Err(GathError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(corrupt)?;
        if version != VERSION {
            return Err(GathError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_hash = read_str(r)?;
        let stored: StoredConfig = toml::from_str(&read_str(r)?).map_err(corrupt)?;
        let config = RunConfig {
            encoder: stored.encoder,
            decoder: stored.decoder,
            train: stored.train,
            ..RunConfig::default()
        };
        config.validate()?;
        let num_entities = r.read_u64::<LE>().map_err(corrupt)? as usize;
        let num_relations = r.read_u64::<LE>().map_err(corrupt)? as usize;
        let epoch = r.read_u64::<LE>().map_err(corrupt)? as usize;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(corrupt)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.read_u64::<LE>().map_err(corrupt)?);
        rng.set_word_pos(r.read_u128::<LE>().map_err(corrupt)?);

        let actual_hash = config.model().hash(num_entities, num_relations);
        if actual_hash != config_hash {
            return Err(GathError::Checkpoint(format!(
                "stored config hash {config_hash} does not match its configuration ({actual_hash})"
            )));
        }
        // Rebuild the layout, then overwrite every value from the file.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = GathModel::new(&config.model(), num_entities, num_relations, &mut scratch)?;
        let mut optimizer = OptimizerState::new(&model.params);
        let count = r.read_u32::<LE>().map_err(corrupt)? as usize;
        if count != model.params.len() {
            return Err(corrupt(format!(
                "{count} parameters, layout has {}",
                model.params.len()
            )));
        }
        for i in 0..count {
            let id = ParamId(i);
            let name = read_str(r)?;
            if name != model.params.name(id) {
                return Err(corrupt(format!(
                    "parameter {i} is `{name}`, expected `{}`",
                    model.params.name(id)
                )));
            }
            let value = read_tensor(r)?;
            let m = read_tensor(r)?;
            let v = read_tensor(r)?;
            let shape = model.params.get(id).shape().to_vec();
            if value.shape() != shape || m.shape() != shape || v.shape() != shape {
                return Err(corrupt(format!("shape mismatch for `{name}`")));
            }
            *model.params.get_mut(id) = value;
            optimizer.m[i] = m;
            optimizer.v[i] = v;
            optimizer.steps[i] = r.read_u64::<LE>().map_err(corrupt)?;
        }
        let n_enc = r.read_u32::<LE>().map_err(corrupt)? as usize;
        if n_enc != model.buffers.encoder.len() {
            return Err(corrupt(format!("{n_enc} encoder batch-norm buffers")));
        }
        let mut buffers = Buffers::default();
        for _ in 0..n_enc {
            buffers.encoder.push(read_bn(r)?);
        }
        let has_dec = r.read_u8().map_err(corrupt)? != 0;
        if has_dec != model.buffers.decoder.is_some() {
            return Err(corrupt("decoder batch-norm buffer presence"));
        }
        if has_dec {
            buffers.decoder = Some(read_bn(r)?);
        }
        if buffers
            .encoder
            .iter()
            .chain(&buffers.decoder)
            .map(BatchNormState::features)
            .any(|f| f != config.encoder.dim)
        {
            return Err(corrupt("batch-norm width"));
        }
        model.buffers = buffers;
        let mut trailer = [0u8; 8];
        r.read_exact(&mut trailer).map_err(corrupt)?;
        if &trailer != TRAILER {
            return Err(corrupt("missing trailer"));
        }
        Ok(Self {
            config_hash,
            config,
            num_entities,
            num_relations,
            epoch,
            rng,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let f = File::create(&tmp).map_err(|e| GathError::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| GathError::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| GathError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| GathError::io(path, e))?;
        let mut r = BufReader::new(f);
        let ck = Self::read_from(&mut r)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| GathError::io(path, e))? != 0 {
            return Err(corrupt("trailing bytes after trailer"));
        }
        Ok(ck)
    }

    /// Fails unless `expected` describes the same model, reporting both hashes.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if expected != self.config_hash {
            return Err(GathError::Checkpoint(format!(
                "config hash mismatch: checkpoint has {}, configuration gives {expected}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Restores a trainer over `kg`, keeping the dataset and output paths of
    /// `paths`.
    pub fn into_trainer(self, kg: &KnowledgeGraph, paths: &RunConfig) -> Result<Trainer> {
        self.check_hash(&self.config.model().hash(kg.num_entities(), kg.num_relations()))?;
        let mut config = self.config;
        config.dataset = paths.dataset.clone();
        config.out = paths.out.clone();
        Trainer::assemble(config, kg, self.model, self.optimizer, self.rng, self.epoch)
    }
}
