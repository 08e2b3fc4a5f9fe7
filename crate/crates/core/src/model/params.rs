use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Array, Graph, Tensor};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ImageTower,
    TextTower,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("text.") {
            ParamGroup::TextTower
        } else {
            ParamGroup::ImageTower
        }
    }
}

/// Ordered, named parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        if let Some(&i) = self.index.get(name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.values.push(value);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        ParamGroup::of(&self.names[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g, '_> {
        let tensors = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { tensors, store: self }
    }
}

/// Parameters bound to a graph, looked up by name.
pub struct Bound<'g, 's> {
    tensors: Vec<Tensor<'g>>,
    store: &'s ParamStore,
}

impl<'g> Bound<'g, '_> {
    pub fn get(&self, name: &str) -> Tensor<'g> {
        match self.store.position(name) {
            Some(i) => self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn tensors(&self) -> &[Tensor<'g>] {
        &self.tensors
    }
}

/// Truncated normal at ±2σ.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Array {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Array::new(shape.to_vec(), data).expect("shape product matches")
}
