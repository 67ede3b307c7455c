use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable leaf: value, accumulated gradient and optimizer hints.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Rows whose gradient is always discarded (the null entity row of the memory).
    pub pinned_rows: Vec<usize>,
}

impl Parameter {
    pub fn grad_tensor(&self) -> Tensor {
        Tensor::new(self.value.shape().to_vec(), self.grad.clone()).expect("grad shape")
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            requires_grad: true,
            decay,
            pinned_rows: Vec::new(),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape), decay)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value), false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.by_name
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, &v)| v)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero the gradient of every pinned row.
    pub fn discard_pinned_grads(&mut self) {
        for p in &mut self.params {
            if p.pinned_rows.is_empty() {
                continue;
            }
            let (_, cols) = p.value.dims2();
            for &r in &p.pinned_rows {
                p.grad[r * cols..(r + 1) * cols].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        for (a, g) in p.grad.iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub(crate) fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        let (_, cols) = p.value.dims2();
        for (k, &r) in rows.iter().enumerate() {
            let src = &grad[k * cols..(k + 1) * cols];
            for (a, g) in p.grad[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *a += g;
            }
        }
    }

    /// Replace a parameter's value, checking the shape is unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), NumericsError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NumericsError::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
