//! Decoder-only transformer: embedding (+ fixed sinusoidal positions),
//! pre-norm blocks of causal grouped-query attention and a SwiGLU FFN,
//! final RMSNorm and LM head, with a hand-written backward pass.

mod config;
mod forward;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};

pub use config::{ModelConfig, Positional};
pub use forward::{ForwardTape, LayerTape};
pub use params::{LayerParams, LayerTensor, Params, TensorId};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct TransformerModel<T = f32> {
    config: ModelConfig,
    params: Params<T>,
    version: u64,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            version: fresh_version(),
        })
    }

    pub fn init(config: ModelConfig, init_std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, init_std, rng);
        Self::new(config, params)
    }

    /// All-zero weights (every norm gain zero too).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let params = Params::zeros(&config);
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    /// Mutable weights; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut Params<T> {
        self.version = fresh_version();
        &mut self.params
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ModelConfig, &mut Params<T>) {
        self.version = fresh_version();
        (&mut self.config, &mut self.params)
    }

    /// Changes whenever the weights or shapes may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn into_parts(self) -> (ModelConfig, Params<T>) {
        (self.config, self.params)
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self.params.cast(),
            version: fresh_version(),
        }
    }

    /// Config validity, shape agreement and finiteness.
    pub fn check_invariants(&self) -> Result<()> {
        self.config.validate()?;
        if !self.params.matches(&self.config) {
            return Err(Error::Checkpoint("parameter shapes drifted from config".into()));
        }
        if self.parameter_count() != self.config.parameter_count() {
            return Err(Error::Checkpoint("parameter count drifted from config".into()));
        }
        Ok(())
    }
}
