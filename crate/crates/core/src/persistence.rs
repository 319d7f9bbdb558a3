//! Binary checkpoint format.
//!
//! ```text
//! "DAAE"  u32 version  u32 array-count
//! per array: u16 name-len, name, u8 rank, rank × u32 dims, f64 values
//! u32 len, RNG state (32-byte seed, u64 stream, u128 word position)
//! u32 len, JSON metadata (config echo, epoch, optimiser step counts)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{build_model, ModelState};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"DAAE";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param.";
const BUFFER: &str = "buffer.";
const ENC_DEC_M: &str = "adam.enc_dec.m.";
const ENC_DEC_V: &str = "adam.enc_dec.v.";
const CRITIC_M: &str = "adam.critic.m.";
const CRITIC_V: &str = "adam.critic.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub input_dim: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_enc_dec_t: u64,
    pub adam_critic_t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 56 {
            return Err(Error::Load(format!("rng block has {} bytes, expected 56", b.len())));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&b[..32]);
        let stream = u64::from_le_bytes(b[32..40].try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(b[40..56].try_into().expect("16 bytes"));
        Ok(RngState { seed, stream, word_pos })
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Named arrays in file order.
    pub arrays: Vec<(String, Tensor)>,
    pub rng: RngState,
    pub meta: CheckpointMeta,
}

/// Checkpoint contents checked against a model layout.
#[derive(Clone, Debug)]
pub struct Restored {
    pub state: ModelState,
    pub enc_dec_t: u64,
    pub enc_dec_m: ParamStore,
    pub enc_dec_v: ParamStore,
    pub critic_t: u64,
    pub critic_m: ParamStore,
    pub critic_v: ParamStore,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let mut arrays = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore| {
            for (name, t) in store {
                arrays.push((format!("{prefix}{name}"), t.clone()));
            }
        };
        push(PARAM, &trainer.state.params);
        push(BUFFER, &trainer.state.buffers);
        push(ENC_DEC_M, &trainer.opt_enc_dec.m);
        push(ENC_DEC_V, &trainer.opt_enc_dec.v);
        push(CRITIC_M, &trainer.opt_critic.m);
        push(CRITIC_V, &trainer.opt_critic.v);
        Checkpoint {
            version: FORMAT_VERSION,
            arrays,
            rng: RngState::of(&trainer.rng),
            meta: CheckpointMeta {
                config: trainer.config.clone(),
                input_dim: trainer.input_dim(),
                epoch: trainer.epoch,
                adam_enc_dec_t: trainer.opt_enc_dec.t,
                adam_critic_t: trainer.opt_critic.t,
            },
        }
    }

    /// Splits the arrays by role, requiring every parameter and buffer of
    /// `template` with identical shape and nothing else.
    pub fn restore(&self, template: &ModelState) -> Result<Restored> {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut moments: [ParamStore; 4] = Default::default();
        for (name, t) in &self.arrays {
            let (store, expected, key) = if let Some(k) = name.strip_prefix(PARAM) {
                (&mut params, template.params.get(k), k)
            } else if let Some(k) = name.strip_prefix(BUFFER) {
                (&mut buffers, template.buffers.get(k), k)
            } else {
                let slot = [ENC_DEC_M, ENC_DEC_V, CRITIC_M, CRITIC_V]
                    .iter()
                    .position(|p| name.starts_with(p))
                    .ok_or_else(|| Error::Load(format!("unexpected array {name:?}")))?;
                let k = &name[[ENC_DEC_M, ENC_DEC_V, CRITIC_M, CRITIC_V][slot].len()..];
                (&mut moments[slot], template.params.get(k), k)
            };
            let expected = expected.ok_or_else(|| Error::Load(format!("array {name:?} does not belong to this model")))?;
            if expected.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "array {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            if store.insert(key.to_string(), t.clone()).is_some() {
                return Err(Error::Load(format!("array {name:?} appears twice")));
            }
        }
        for (kind, have, want) in [("parameter", &params, &template.params), ("buffer", &buffers, &template.buffers)] {
            if let Some(missing) = want.keys().find(|k| !have.contains_key(*k)) {
                return Err(Error::Load(format!("checkpoint lacks {kind} {missing:?}")));
            }
        }
        let [enc_dec_m, enc_dec_v, critic_m, critic_v] = moments;
        Ok(Restored {
            state: ModelState { spec: template.spec.clone(), params, buffers },
            enc_dec_t: self.meta.adam_enc_dec_t,
            enc_dec_m,
            enc_dec_v,
            critic_t: self.meta.adam_critic_t,
            critic_m,
            critic_v,
            rng: self.rng.to_rng(),
        })
    }

    /// The trained model, rebuilt from the echoed config.
    pub fn model_state(&self) -> Result<ModelState> {
        let cfg = &self.meta.config;
        let spec = cfg.model_spec(self.meta.input_dim)?;
        let template = build_model(&spec, cfg.training.init_std, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(self.restore(&template)?.state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&u32_len(self.arrays.len(), "array count")?.to_le_bytes());
        for (name, t) in &self.arrays {
            let len = u16::try_from(name.len()).map_err(|_| Error::format(format!("array name {name:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::format(format!("array {name:?} has rank > 255")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let rng = self.rng.to_bytes();
        out.extend_from_slice(&u32_len(rng.len(), "rng block")?.to_le_bytes());
        out.extend_from_slice(&rng);
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        out.extend_from_slice(&u32_len(meta.len(), "metadata block")?.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Load(format!("bad magic {magic:02x?}, expected {:?}", "DAAE")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Load("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Load(format!("array {name:?} is impossibly large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Load("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Load(format!("array {name:?}: {e}")))?;
            arrays.push((name, t));
        }
        let rng_len = r.u32()? as usize;
        let rng = RngState::from_bytes(r.take(rng_len)?)?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Load(format!("checkpoint metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Load(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { version, arrays, rng, meta })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format!("{what} {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Load(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes `ckpt` to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads just the trained model.
pub fn load_model(path: &Path) -> Result<ModelState> {
    load_checkpoint(path)?.model_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PriorSpec;
    use crate::networks::{DataMode, HiddenLayout};

    fn tiny_trainer() -> Trainer {
        let mut cfg = TrainConfig::new(PriorSpec::uniform(3, 2, 1).unwrap(), DataMode::Feature);
        cfg.architecture = HiddenLayout {
            encoder: vec![6],
            decoder: vec![6],
            critic: vec![5],
            ..HiddenLayout::default()
        };
        cfg.training.batch_size = 4;
        Trainer::new(cfg, 5).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let mut t = tiny_trainer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        t.train_step(&Tensor::randn(&[4, 5], 1.0, &mut rng)).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DAAE");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.rng.to_rng(), t.rng);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = tiny_trainer().checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Load(_)) && err.to_string().contains("magic"), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        for cut in [3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Load(_))));
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn restore_rejects_foreign_layouts() {
        let t = tiny_trainer();
        let ck = t.checkpoint();
        let mut other = t.config.clone();
        other.priors = PriorSpec::uniform(4, 2, 1).unwrap();
        let foreign = Trainer::new(other, 5).unwrap();
        assert!(matches!(ck.restore(&foreign.state), Err(Error::Load(_))));
        assert_eq!(ck.model_state().unwrap().params, t.state.params);
    }
}
