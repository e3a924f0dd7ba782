//! The full prompt-to-field network: embedding, triplane generator, heads
//! and the NeuS sharpness, over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, EmbedConfig, PromptEmbedding};
use crate::error::{Error, Result};
use crate::heads::{Heads, HeadsConfig};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};
use crate::triplane::{GeneratorConfig, Triplane, TriplaneGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub generator: GeneratorConfig,
    pub heads: HeadsConfig,
    pub init_sharpness: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: EmbedConfig::default(),
            generator: GeneratorConfig::default(),
            heads: HeadsConfig::default(),
            init_sharpness: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub generator: TriplaneGenerator,
    pub heads: Heads,
    pub sharpness: ParamId,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if !(cfg.init_sharpness > 0.0) {
            return Err(Error::Config("init_sharpness must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let generator = TriplaneGenerator::new(cfg.generator.clone(), cfg.embed.dim, &mut store, &mut rng)?;
        let heads = Heads::new(cfg.heads.clone(), cfg.generator.channels, &mut store, &mut rng)?;
        let sharpness = store.add("neus.s", Group::Renderer, Tensor::full([1], T::of(cfg.init_sharpness)));
        Ok(Self { cfg, generator, heads, sharpness, store })
    }

    pub fn embed(&self, prompt: &str) -> Result<PromptEmbedding> {
        embed(prompt, &self.cfg.embed)
    }

    pub fn triplane_var(&self, tape: &Tape<T>, p: &Bound, emb: &PromptEmbedding) -> Result<Var> {
        self.generator.generate(tape, p, emb)
    }

    /// Detached triplane for a prompt.
    pub fn triplane(&self, prompt: &str) -> Result<Triplane<T>> {
        let emb = self.embed(prompt)?;
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let v = self.triplane_var(&tape, &p, &emb)?;
        Triplane::new(tape.tensor(v))
    }

    pub fn sharpness_value(&self) -> T {
        self.store.get(self.sharpness).data()[0]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            generator: self.generator.clone(),
            heads: self.heads.clone(),
            sharpness: self.sharpness,
            store: self.store.cast(),
        }
    }
}
