//! `VADC` training checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"VADC" | u32 version
//! config: f64 lr, f64 weight_decay, u64 batch_size, u64 epochs, f64 beta1,
//!         f64 beta2, f64 epsilon, f64 lambda1..lambda4, f64 margin, u64 k,
//!         u64 seed, u64 checkpoint_every, f64 dropout
//! u32 feature_dim | u32 snippet_count | u64 epoch
//! u32 n_params, then per parameter:
//!     u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f64 data[numel]
//! u64 adam_step, then per parameter: f64 first[numel] | f64 second[numel]
//! rng: [u8; 32] seed | u64 stream | u128 word_pos
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::LossWeights;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VADC";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub snippet_count: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<ModelParams> {
        self.model_with_dim(self.feature_dim)
    }

    /// Rebuilds the model expecting `feature_dim`; a mismatch names the
    /// first offending parameter.
    pub fn model_with_dim(&self, feature_dim: usize) -> Result<ModelParams> {
        ModelParams::from_named(feature_dim, self.snippet_count, self.config.dropout, &self.params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        let c = &self.config;
        w.f64(c.adam.learning_rate);
        w.f64(c.adam.weight_decay);
        w.u64(c.batch_size as u64);
        w.u64(c.epochs as u64);
        w.f64(c.adam.beta1);
        w.f64(c.adam.beta2);
        w.f64(c.adam.epsilon);
        for v in [c.loss.lambda1, c.loss.lambda2, c.loss.lambda3, c.loss.lambda4, c.loss.margin] {
            w.f64(v);
        }
        w.u64(c.loss.k as u64);
        w.u64(c.seed);
        w.u64(c.checkpoint_every as u64);
        w.f64(c.dropout);

        w.u32(self.feature_dim as u32);
        w.u32(self.snippet_count as u32);
        w.u64(self.epoch as u64);

        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            t.data().iter().for_each(|&v| w.f64(v));
        }

        w.u64(self.adam.step);
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            m.iter().for_each(|&x| w.f64(x));
            v.iter().for_each(|&x| w.f64(x));
        }

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let mut config = TrainConfig::default();
        config.adam.learning_rate = r.f64("config")?;
        config.adam.weight_decay = r.f64("config")?;
        config.batch_size = r.u64("config")? as usize;
        config.epochs = r.u64("config")? as usize;
        config.adam.beta1 = r.f64("config")?;
        config.adam.beta2 = r.f64("config")?;
        config.adam.epsilon = r.f64("config")?;
        config.loss = LossWeights {
            lambda1: r.f64("config")?,
            lambda2: r.f64("config")?,
            lambda3: r.f64("config")?,
            lambda4: r.f64("config")?,
            margin: r.f64("config")?,
            k: r.u64("config")? as usize,
        };
        config.seed = r.u64("config")?;
        config.checkpoint_every = r.u64("config")? as usize;
        config.dropout = r.f64("config")?;

        let feature_dim = r.u32("dims")? as usize;
        let snippet_count = r.u32("dims")? as usize;
        let epoch = r.u64("epoch")? as usize;

        let n_params = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n_params.min(1024));
        for _ in 0..n_params {
            let len = r.u32("parameter name")? as usize;
            let name = String::from_utf8(r.take(len, "parameter name")?.to_vec()).map_err(|_| Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: "parameter name is not utf-8".into(),
            })?;
            let ndim = r.u32("parameter shape")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("parameter shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f64s(numel, "parameter data")?;
            let t = Tensor::new(shape, data).map_err(|e| Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("parameter `{name}`: {e}"),
            })?;
            params.push((name, t));
        }

        let step = r.u64("optimizer step")?;
        let mut adam = AdamState {
            step,
            ..AdamState::default()
        };
        for (_, t) in &params {
            adam.first.push(r.f64s(t.numel(), "optimizer moments")?);
            adam.second.push(r.f64s(t.numel(), "optimizer moments")?);
        }

        let seed: [u8; 32] = r.take(32, "rng state")?.try_into().expect("32 bytes");
        let stream = r.u64("rng state")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            config,
            feature_dim,
            snippet_count,
            epoch,
            params,
            adam,
            rng: RngState { seed, stream, word_pos },
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("ends inside {what} at byte {}", self.bytes.len()),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_checkpoint(dim: usize) -> Checkpoint {
        let model = ModelParams::init(dim, 4, 3).unwrap();
        let mut adam = AdamState::new(model.parameters());
        adam.step = 17;
        adam.first[3][0] = 0.25;
        adam.second[5][1] = 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: u64 = rng.random();
        Checkpoint {
            config: TrainConfig {
                epochs: 12,
                seed: 5,
                ..TrainConfig::default()
            },
            feature_dim: dim,
            snippet_count: 4,
            epoch: 7,
            params: model.named_tensors(),
            adam,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample_checkpoint(8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vadc");
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model().unwrap(), ModelParams::from_named(8, 4, 0.7, &c.params).unwrap());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..13 {
            let _: u32 = rng.random();
        }
        let mut restored = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..5).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files() {
        let bytes = sample_checkpoint(8).encode();
        let p = Path::new("c.vadc");
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"VSWF");
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::decode(&ver, p), Err(Error::Version { found: 9, .. })));
        for cut in [3, 100, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut], p), Err(Error::Truncated { .. })));
        }
    }

    #[test]
    fn dimension_mismatch_names_parameter() {
        let c = sample_checkpoint(64);
        let err = c.model_with_dim(128).unwrap_err();
        assert!(matches!(&err, Error::ParamShape { name, .. } if name == "attn.reduce.weight"), "{err}");
    }
}
