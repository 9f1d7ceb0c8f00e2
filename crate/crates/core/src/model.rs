//! The jointly trained parameter set: a frozen token encoder, the token
//! refiner with its matching head, and the generator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::tensor::checkpoint::Container;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::token_refiner::{TokenRefiner, TokenRefinerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub token_refiner: TokenRefinerConfig,
    /// Train a second generator for the empty-profile distributions used by
    /// pseudo-labels instead of reusing the main one.
    pub separate_nonpersonal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                residual_init_scale: 0.1,
                ..EncoderConfig::default()
            },
            generator: GeneratorConfig::default(),
            token_refiner: TokenRefinerConfig::default(),
            separate_nonpersonal: false,
        }
    }
}

pub const ENCODER_GROUP: &str = "enc";
pub const REFINER_GROUP: &str = "refiner";
pub const GENERATOR_GROUP: &str = "gen";
pub const NONPERSONAL_GROUP: &str = "gen0";

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub encoder: TransformerEncoder,
    pub refiner: TokenRefiner,
    pub generator: Generator,
    pub nonpersonal: Option<Generator>,
}

impl Model {
    pub fn new(vocab_size: usize, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_cfg = EncoderConfig {
            vocab_size,
            ..cfg.encoder.clone()
        };
        let encoder = TransformerEncoder::new(&mut store, ENCODER_GROUP, enc_cfg, &mut rng)?;
        let refiner = TokenRefiner::new(&mut store, REFINER_GROUP, encoder.d_model(), &cfg.token_refiner, &mut rng)?;
        let generator = Generator::new(&mut store, GENERATOR_GROUP, vocab_size, cfg.generator.clone(), &mut rng)?;
        let nonpersonal = if cfg.separate_nonpersonal {
            Some(Generator::new(&mut store, NONPERSONAL_GROUP, vocab_size, cfg.generator.clone(), &mut rng)?)
        } else {
            None
        };
        if cfg.encoder.d_model != cfg.generator.d_model {
            return Err(Error::Config(format!(
                "encoder width {} differs from generator width {}; the encoder reads the generator's token embeddings",
                cfg.encoder.d_model, cfg.generator.d_model
            )));
        }
        let mut cfg = cfg;
        cfg.encoder.vocab_size = vocab_size;
        let mut model = Self {
            cfg,
            vocab_size,
            store,
            encoder,
            refiner,
            generator,
            nonpersonal,
        };
        model.sync_encoder_embeddings()?;
        Ok(model)
    }

    /// Copies the generator's token embeddings into the encoder. The encoder
    /// is otherwise frozen; this is how it follows generator training.
    pub fn sync_encoder_embeddings(&mut self) -> Result<()> {
        let data = self.store.get(self.generator.tok).data().to_vec();
        self.store.set(self.encoder.tok, &data)
    }

    pub fn refiner_params(&self) -> Vec<ParamId> {
        self.store.group(REFINER_GROUP)
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.store.group(GENERATOR_GROUP)
    }

    pub fn nonpersonal_params(&self) -> Vec<ParamId> {
        self.store.group(NONPERSONAL_GROUP)
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store.group(ENCODER_GROUP)
    }

    /// The generator that scores empty-profile inputs.
    pub fn nonpersonal_generator(&self) -> &Generator {
        self.nonpersonal.as_ref().unwrap_or(&self.generator)
    }

    /// Encoder states for one token sequence.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor> {
        Ok(self.encoder.encode_tokens(&self.store, ids)?.0)
    }

    pub fn header(&self) -> serde_json::Value {
        json!({
            "kind": "refinedial-model",
            "vocab_size": self.vocab_size,
            "model": self.cfg,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.header());
        c.extend_from_store(&self.store);
        c
    }

    /// Rebuilds the architecture from a container header and loads its
    /// parameters.
    pub fn from_container(c: &Container) -> Result<Self> {
        let vocab_size = c.header["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Format("model header lacks vocab_size".into()))? as usize;
        let cfg: ModelConfig = serde_json::from_value(c.header["model"].clone())
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        let mut model = Self::new(vocab_size, cfg, 0)?;
        c.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.d_model = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.ff_dim = 8;
        cfg.generator.d_model = 8;
        cfg.generator.heads = 2;
        cfg.generator.ff_dim = 8;
        cfg.generator.max_positions = 32;
        cfg.token_refiner.lstm_hidden = 4;
        cfg
    }

    #[test]
    fn groups_partition_parameters() {
        let m = Model::new(20, tiny(), 1).unwrap();
        let total = m.refiner_params().len() + m.generator_params().len() + m.encoder_params().len();
        assert_eq!(total, m.store.len());
        assert!(m.nonpersonal.is_none());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(20, tiny(), 3).unwrap();
        let p = dir.path().join("model.bin");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        let all: Vec<_> = m.store.ids().collect();
        assert_eq!(m.store.fingerprint(&all), back.store.fingerprint(&all));
        assert_eq!(back.cfg, m.cfg);
    }
}
