//! Dense tensors with a dynamic reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to the [`Tensor`] handles it
//! owns. Node ids are assigned in creation order, so the tape order is a
//! topological order and [`Tensor::backward`] is a single reverse sweep.
//!
//! Shapes are explicit. The only implicit broadcasts are scalar-times-tensor
//! ([`Tensor::scale`], [`Tensor::scale_by`]) and row-wise vectors
//! ([`Tensor::add_row`], [`Tensor::mul_row`]).

mod archive;
mod check;
mod ops;

use std::cell::RefCell;
use std::fmt;

pub use archive::{read_archive, write_archive, NamedTensor};
pub use check::{finite_diff_check, numeric_gradient};
pub use ops::sigmoid;

/// Errors raised by tensor construction and primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensors from different graphs cannot be combined in {0}")]
    ForeignGraph(&'static str),
    #[error("archive: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A detached dense value: shape plus row-major `f64` payload.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}{:?}", self.shape, self.data)
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "array",
                msg: format!("shape {shape:?} holds {n} values but {} given", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D array from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Invalid {
                    op: "from_rows",
                    msg: format!("ragged rows: expected {cols} columns, got {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            self.shape.first().copied().unwrap_or(0)
        } else {
            self.data.len() / c
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

pub(crate) type NodeId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Powf(NodeId, f64),
    Softmax(NodeId),
    LayerNorm { x: NodeId, rstd: Vec<f64> },
    L2Normalize { x: NodeId, norms: Vec<f64> },
    Transpose(NodeId),
    Reshape(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    NarrowRows { x: NodeId, start: usize },
    NarrowCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    SumLastDim(NodeId),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// The gradient tape. One graph per forward pass; it is not `Sync`.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that accumulates gradients.
    pub fn param(&self, value: Array) -> Tensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Array) -> Tensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Array, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// First element of the value; intended for scalars.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.data[0]
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Array> {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.as_ref().map(|g| Array {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&self) {
        self.graph.nodes.borrow_mut()[self.id].grad = None;
    }

    /// A copy of this value as a new constant leaf (gradient stops here).
    pub fn detach(&self) -> Tensor<'g> {
        self.graph.constant(self.value())
    }
}
