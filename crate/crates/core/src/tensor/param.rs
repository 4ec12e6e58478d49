use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// The three disjoint parameter groups of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Causal LM used as the encoder.
    Theta,
    /// Lightweight decoder.
    Phi,
    /// Adaptor between the two.
    Omega,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Theta, Partition::Phi, Partition::Omega];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Theta => "theta",
            Partition::Phi => "phi",
            Partition::Omega => "omega",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Partition::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T> {
    pub(crate) grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> GradStore<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// Named parameter store partitioned into theta / phi / omega.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, partition, value, grad: None, frozen: false });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, partition: Partition) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(id, _)| id).collect()
    }

    pub fn set_frozen(&mut self, partition: Partition, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.partition == partition) {
            p.frozen = frozen;
            if frozen {
                p.grad = None;
            }
        }
    }

    pub fn is_frozen(&self, partition: Partition) -> bool {
        self.params.iter().filter(|p| p.partition == partition).all(|p| p.frozen)
    }

    pub fn num_elements(&self, partition: Option<Partition>) -> usize {
        self.params.iter().filter(|p| partition.is_none_or(|q| p.partition == q)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored gradients. Frozen parameters never get
    /// gradient storage.
    pub fn accumulate(&mut self, grads: GradStore<T>) {
        for (id, g) in grads.grads {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(g),
            }
        }
    }

    /// SHA-256 over names, shapes and raw little-endian values of one partition.
    pub fn hash(&self, partition: Partition) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.partition == partition) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copy of the store with every value converted to `U`.
    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces the value of a named parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::arg(format!("no parameter named {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}
