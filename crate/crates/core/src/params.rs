//! Named trainable parameters and their deterministic initialization.
//!
//! Parameters live in plain arrays between steps. Each forward pass places
//! them on a fresh tape; the optimizer writes updates back into the store.

use crate::tape::{Real, Tape, Var};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Whether a tensor is a bias (zero-initialized) by naming convention: the
/// final dotted segment starts with 'b'.
fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| s.starts_with('b'))
}

/// Fan-in for the uniform init range. Matrices feed row vectors from the
/// left (x · W), so fan-in is the row count; embedding tables draw per-row
/// vectors, so fan-in is the column count.
fn fan_in(name: &str, shape: &[usize]) -> usize {
    match shape.len() {
        2 if name.starts_with("embed.") => shape[1],
        2 => shape[0],
        _ => shape.iter().product(),
    }
    .max(1)
}

#[derive(Clone, Debug)]
pub struct ParamStore<F: Real> {
    pub values: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> ParamStore<F> {
    /// Initializes every tensor U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases to
    /// zero. Draw order follows `shapes`, so identical shapes and seed give
    /// identical parameters.
    pub fn init(shapes: &[(String, Vec<usize>)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = IndexMap::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let dim = IxDyn(shape);
            let tensor = if is_bias(name) {
                ArrayD::zeros(dim)
            } else {
                let bound = 1.0 / (fan_in(name, shape) as f64).sqrt();
                ArrayD::from_shape_fn(dim, |_| F::from_f64(rng.random_range(-bound..bound)))
            };
            values.insert(name.clone(), tensor);
        }
        ParamStore { values }
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn place_on(&self, tape: &Tape<F>) -> IndexMap<String, Var> {
        self.values
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect()
    }

    /// Total scalar count across all tensors.
    pub fn len_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// Converts every tensor elementwise, for precision switching and
    /// checkpoint I/O.
    pub fn map_precision<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::from_f64(x.to_f64()))))
                .collect(),
        }
    }
}
