use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Registers freshly initialized parameters into a store, drawing from a
/// seeded generator so the whole tree is reproducible.
pub struct ParamInit {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    zero: bool,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero: false,
        }
    }

    /// An initializer that sets every weight and bias to zero (norm gains
    /// and fixed constants are unaffected).
    pub fn zeros() -> Self {
        ParamInit {
            zero: true,
            ..Self::new(0)
        }
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<f64>) -> Result<ParamId> {
        self.store.register(name, value)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.store.register(name, Tensor::full(shape, value))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        if self.zero {
            return self.constant(name, shape, 0.0);
        }
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.store.register(name, value)
    }

    /// Conventional fan-in scaled uniform init for weights and biases.
    pub fn fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }
}
