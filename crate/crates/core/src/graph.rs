use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamStore, Scalar, Tape, Var};

/// Forward-pass context: the tape, the parameters it reads, and the dropout
/// RNG when training.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<String, Var<T>>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Dropout disabled. Whether gradients are available depends on `tape`.
    pub fn eval(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            params,
            bound: HashMap::new(),
            rng: None,
        }
    }

    /// Dropout active, driven by `rng`.
    pub fn train(
        tape: &'a mut Tape<T>,
        params: &'a ParamStore<T>,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Self {
            tape,
            params,
            bound: HashMap::new(),
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// The leaf for a named parameter; bound once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let value = self.params.entry(name)?.value_rc();
        let v = self.tape.leaf(value, Some(name));
        self.bound.insert(name.to_owned(), v.clone());
        Ok(v)
    }

    pub fn dropout(&mut self, x: &Var<T>, p: f64) -> Var<T> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => x.clone(),
        }
    }
}
