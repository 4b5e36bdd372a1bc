use std::collections::HashMap;

use rand::Rng;

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: DenseArray<T>,
    pub grad: DenseArray<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = self.params.len();
        let grad = DenseArray::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    /// Fan-in scaled uniform initialization, U(-b, b) with b = sqrt(3 / fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, DenseArray::uniform(shape, -bound, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, DenseArray::zeros(shape))
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Overwrites values by name. Every stored parameter must be present with
    /// a matching shape.
    pub fn load_values(&mut self, values: &[(String, DenseArray<T>)]) -> Result<()> {
        let by_name: HashMap<&str, &DenseArray<T>> =
            values.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for p in &mut self.params {
            let v = by_name
                .get(p.name.as_str())
                .ok_or_else(|| TensorError::UnknownParameter(p.name.clone()))?;
            if v.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = (*v).clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, DenseArray<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("a", &[2]).unwrap();
        assert!(matches!(
            s.add_zeros("a", &[3]),
            Err(TensorError::DuplicateParameter(_))
        ));
        assert_eq!(s.get(s.id_of("a").unwrap()).grad.shape(), &[2]);
    }
}
