//! Named parameter registry and the per-tape leasing context.
//!
//! Model structs hold [`ParamId`]s, never tensors. A [`Ctx`] borrows one tape
//! and one store for the duration of a forward pass and hands out exactly one
//! leaf `Var` per parameter, so a parameter used twice in a graph accumulates
//! both gradient contributions into the same slot.

use std::collections::HashMap;

use ccformer_tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of named trainable tensors.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique dotted name.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.with_grad(true));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param_set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value.with_grad(true);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elems(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// One forward pass worth of leases: tape + store + memoized leaf vars.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    train: bool,
    leases: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        let leases = vec![None; store.len()];
        Ctx {
            tape,
            store,
            train,
            leases,
        }
    }

    /// Pre-binds a parameter to an existing tape var. Gradient-check
    /// harnesses use this to route their own perturbed leaves through a
    /// module forward; the store value for `id` is then never leased.
    pub fn assign(&mut self, id: ParamId, var: Var) {
        self.leases[id.index()] = Some(var);
    }

    /// The leaf `Var` for a parameter on this tape, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leases[id.index()] {
            return v;
        }
        let tensor = self.store.get(id);
        let v = if self.train {
            self.tape.input(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.leases[id.index()] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Parameters touched by the pass, with their leased vars.
    pub fn leased(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.leases
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
    }
}

/// Uniform Xavier/Glorot init over an explicit fan pair.
pub fn xavier<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("xavier shape")
}

/// Gaussian init with mean zero (Box-Muller over the seeded stream).
pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            T::of_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("normal shape")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec())
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape.to_vec(), T::one())
}
