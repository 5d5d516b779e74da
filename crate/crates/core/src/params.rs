//! Named parameter storage and initializers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
///
/// Insertion order is stable and is the order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Uniform Glorot initialization, bounds `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape")
}

/// Embedding table drawn from `N(0, 0.02²)`.
pub fn embedding_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid normal");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Glorot,
    Embedding,
    Zeros,
    Ones,
}

/// Declaration of one parameter: its stable name, shape and initializer.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

impl ParamStore {
    /// Creates and initializes every declared parameter, in declaration order.
    pub fn build<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for s in specs {
            let t = match s.init {
                Init::Glorot => glorot(rng, s.shape[0], s.shape[1..].iter().product()),
                Init::Embedding => embedding_init(rng, s.shape[0], s.shape[1..].iter().product()),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            };
            store.insert(s.name.clone(), t.reshape(&s.shape)?)?;
        }
        Ok(store)
    }

    /// Confirms a loaded store carries exactly the declared parameters and shapes.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self
                .by_name(&s.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape("checkpoint parameter", t.shape(), &s.shape));
            }
        }
        if self.len() != specs.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model declares {}",
                self.len(),
                specs.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }
}
