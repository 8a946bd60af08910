use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary network weight, updated by the weight optimizer.
    Weight,
    /// Architecture logit, updated by the architecture optimizer.
    Arch,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Flat, ordered collection of every tensor a model owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            trainable: kind != ParamKind::Buffer,
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised convolution kernel `(c_out, c_in, kz, ky, kx)`.
    pub fn add_kernel<R: Rng>(&mut self, name: &str, shape: [usize; 5], rng: &mut R) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        self.add(name, ParamKind::Weight, Tensor::new(shape.to_vec(), data).expect("sized"))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar weights of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    trainable: p.trainable,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}
