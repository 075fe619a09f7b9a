//! Named, grouped trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Learning-rate group of a parameter.
///
/// `Bottom` holds the unimodal encoder weights (the pretrained-role part of
/// the model) and `Top` holds everything stacked on them: fusion, decoder,
/// heads and layer-fusion gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Bottom,
    Top,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: Option<Group>,
    pub value: Tensor,
    /// Accumulated gradient. `None` until a backward pass reaches the parameter.
    pub grad: Option<Tensor>,
}

/// Initialization rule for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Glorot-uniform for a `[fan_in, fan_out]` weight.
    Xavier,
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = numel(shape);
        let data = match self {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    _ => (n, n),
                };
                let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
        };
        Tensor::from_parts_unchecked(shape.to_vec(), data)
    }
}

/// Flat registry of parameters with unique dot-path names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<Option<Group>>,
        value: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group: group.into(),
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }

    /// Replaces a parameter's value, possibly with a new shape. Clears its gradient.
    pub fn replace_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.value = value;
        p.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.w", Group::Top, Tensor::zeros(&[2])).unwrap();
        assert_eq!(
            s.add("a.w", Group::Top, Tensor::zeros(&[2])).unwrap_err(),
            Error::DuplicateParameter("a.w".into())
        );
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Init::Xavier.sample(&[4, 8], &mut rng);
        let a = libm::sqrt(6.0 / 12.0);
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let mut s = ParamStore::new();
        let id = s.add("w", Group::Bottom, Tensor::zeros(&[2])).unwrap();
        let g = Tensor::new(alloc::vec![2], alloc::vec![1.0, 2.0]).unwrap();
        s.accumulate_grad(id, &g);
        s.accumulate_grad(id, &g);
        assert_eq!(s.grad(id).unwrap().data(), &[2.0, 4.0]);
        s.zero_grads();
        assert!(s.grad(id).is_none());
    }
}
