use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// `(rows, cols)`. Vectors are `1 x k` rows; scalars are `1 x 1`.
pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.0 * shape.1 != values.len() {
            return Err(Error::Argument(format!(
                "{} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        let n = values.len();
        Ok(Self {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        let n = shape.0 * shape.1;
        Self {
            shape,
            values: vec![v; n],
            grad: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape.1 + c]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named parameters (trainable) and buffers (e.g. running statistics) with
/// sorted, deterministic iteration order. Names are dotted paths such as
/// `encoder.layer1.head3.key_angles`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Argument(format!("parameter {name} registered twice")));
        }
        self.params.insert(name.to_string(), tensor.trainable());
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Argument(format!("buffer {name} registered twice")));
        }
        let mut t = tensor;
        t.requires_grad = false;
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values (not gradients) of every parameter and buffer from
    /// `other`, which must have the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.params.values_mut().zip(other.params.values()) {
            dst.values.copy_from_slice(&src.values);
        }
        for (dst, src) in self.buffers.values_mut().zip(other.buffers.values()) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        let describe = |m: &BTreeMap<String, Tensor>| -> Vec<(String, Shape)> {
            m.iter().map(|(k, v)| (k.clone(), v.shape)).collect()
        };
        if describe(&self.params) != describe(&other.params)
            || describe(&self.buffers) != describe(&other.buffers)
        {
            let mine: Vec<_> = describe(&self.params);
            let theirs: Vec<_> = describe(&other.params);
            let diff = mine
                .iter()
                .find(|e| !theirs.contains(e))
                .or_else(|| theirs.iter().find(|e| !mine.contains(e)));
            return Err(Error::Argument(format!(
                "parameter sets differ (first mismatch: {diff:?})"
            )));
        }
        Ok(())
    }

    /// All parameter values concatenated in iteration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.grad.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_rejects_duplicates_and_orders_names() {
        let mut s = ParameterStore::new();
        s.insert("b.w", Tensor::zeros((1, 2))).unwrap();
        s.insert("a.w", Tensor::zeros((2, 2))).unwrap();
        assert!(s.insert("a.w", Tensor::zeros((1, 1))).is_err());
        assert!(s.insert_buffer("a.w", Tensor::zeros((1, 1))).is_err());
        let names: Vec<&str> = s.params().map(|(k, _)| k).collect();
        assert_eq!(names, ["a.w", "b.w"]);
        assert_eq!(s.n_params(), 6);
        assert!(s.get("a.w").unwrap().requires_grad);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new((2, 2), vec![0.0; 3]).is_err());
    }
}
