//! Tubelet embedding, factorised encoder and classifier head assembled into
//! one clip classifier.

pub mod encoder;
pub mod head;
pub mod params;
pub mod tubelet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{
    encoder_forward, feed_forward, mhsa, spatial_encode, temporal_encode, transformer_layer,
    AttentionParams, EncoderConfig, EncoderParams, EncoderState, LayerParams, MlpParams,
};
pub use head::{
    head_forward, mc_ablated_forward, mc_forward, HeadKind, HeadOutput, HeadParams, McParams,
    NoMcParams,
};
pub use params::{Bound, ParamId, ParamStore};
pub use tubelet::{embed, token_counts, tubelet_partition, tubelet_reconstruct, TokenSequence, TubeletConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tubelet: TubeletConfig,
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            clip_len: 16,
            height: 64,
            width: 64,
            channels: 3,
            tubelet: TubeletConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadKind::Mc,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// A model under 5k parameters on a `4 x 4 x 4 x 3` clip.
    pub fn tiny() -> Self {
        ModelConfig {
            clip_len: 4,
            height: 4,
            width: 4,
            channels: 3,
            tubelet: TubeletConfig { t: 2, h: 2, w: 2, d: 8 },
            encoder: EncoderConfig {
                d: 8,
                heads: 2,
                n_sp: 2,
                n_tp: 2,
                mlp_hidden: 16,
                temporal_pos: true,
                ln_eps: 1e-6,
            },
            head: HeadKind::Mc,
            init_std: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.tubelet.d != self.encoder.d {
            return Err(Error::Config(format!(
                "tubelet dim {} differs from encoder dim {}",
                self.tubelet.d, self.encoder.d
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        token_counts(&self.tubelet, self.clip_len, self.height, self.width)?;
        Ok(())
    }

    pub fn counts(&self) -> Result<(usize, usize, usize)> {
        token_counts(&self.tubelet, self.clip_len, self.height, self.width)
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.clip_len, self.height, self.width, self.channels]
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<P = ParamId> {
    pub projection: P,
    pub class_token: P,
    pub position: P,
    pub encoder: EncoderParams<P>,
    pub head: HeadParams<P>,
}

impl ModelParams {
    pub fn resolve(&self, b: &Bound) -> ModelParams<Var> {
        ModelParams {
            projection: b.var(self.projection),
            class_token: b.var(self.class_token),
            position: b.var(self.position),
            encoder: self.encoder.resolve(b),
            head: self.head.resolve(b),
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[2]` raw logits, NC then MCI.
    pub logits: Var,
    /// Head embedding used by the correlation loss.
    pub embedding: Var,
    pub encoder: EncoderState,
}

/// Clip classifier with its own parameter store.
#[derive(Clone, Debug)]
pub struct McVivit<S> {
    config: ModelConfig,
    store: ParamStore<S>,
    params: ModelParams,
}

impl<S: Scalar> McVivit<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (nt, nh, nw) = config.counts()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = config.init_std;
        let d = config.encoder.d;
        let cube = config.tubelet.cube_len(config.channels);
        let projection = store.normal("embed.projection", &[cube, d], std, &mut rng);
        let class_token = store.normal("embed.cls", &[1, d], std, &mut rng);
        let position = store.normal("embed.pos", &[nt * nh * nw + 1, d], std, &mut rng);
        let encoder = EncoderParams::init(&mut store, &config.encoder, nt, std, &mut rng);
        let head = HeadParams::init(&mut store, config.head, d, &mut rng);
        Ok(McVivit {
            config,
            store,
            params: ModelParams {
                projection,
                class_token,
                position,
                encoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Scalar>(&self) -> McVivit<T> {
        McVivit {
            config: self.config.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<Bound> {
        self.store.bind(g, trainable)
    }

    /// Records a forward pass for `clip: [T, H, W, C]` on `g`.
    pub fn forward(&self, g: &mut Graph<S>, bound: &Bound, clip: &Tensor<S>) -> Result<ModelOutput> {
        let expected = self.config.clip_shape();
        if clip.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("clip {:?}, model expects {expected:?}", clip.shape()),
            ));
        }
        let p = self.params.resolve(bound);
        let cubes = tubelet_partition(clip, &self.config.tubelet)?;
        let cubes = g.constant(center_pixels(&cubes))?;
        let seq = embed(g, cubes, p.projection, p.class_token, p.position, self.config.counts()?)?;
        let state = encoder_forward(g, &seq, &p.encoder, &self.config.encoder)?;
        let out = head_forward(g, state.y_ff, &p.head)?;
        Ok(ModelOutput {
            logits: out.logits,
            embedding: out.embedding,
            encoder: state,
        })
    }

    /// Logits for one clip without recording gradients.
    pub fn logits(&self, clip: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &b, clip)?;
        Ok(g.value(out.logits).clone())
    }

    /// Softmax probability of the MCI class.
    pub fn predict_proba(&self, clip: &Tensor<f32>) -> Result<f64> {
        let logits = self.logits(&clip.cast())?.to_f64_vec();
        Ok(mci_probability(logits[0], logits[1]))
    }
}

/// Maps pixel intensities from `[0, 1]` to `[-1, 1]`.
pub fn center_pixels<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let two = S::of(2.0);
    x.map(|v| v * two - S::one())
}

/// Probability of class 1 from two logits, `1 / (1 + exp(l0 - l1))`.
pub fn mci_probability(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}
