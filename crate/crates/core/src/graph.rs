//! Static dataflow graphs with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once per architecture: leaves are named parameters,
//! named inputs, or named id sequences; interior nodes are primitive ops.
//! Construction order is evaluation order, so the node list is always
//! topologically sorted and acyclic by construction. Shapes are inferred and
//! checked while building. A graph is immutable once built and is re-bound
//! with fresh leaf values for every batch ([`Binding`]).
//!
//! The backward pass is exact reverse-mode differentiation, except at
//! [`CustomGradRule`] nodes, which apply their declared backward rule. Both
//! rules here pass the upstream gradient through unchanged — the
//! straight-through contract used to train through hard binarization.
//!
//! Every op output is checked for NaN/Inf; a non-finite intermediate is an
//! error, not a silent value.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{self, Broadcast, Tensor};

/// Index of a node in its graph.
pub type NodeId = usize;

/// Forward transforms with a hand-declared backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CustomGradRule {
    /// Forward identity, backward identity. Exists so the pass-through
    /// contract is testable in isolation.
    Identity,
    /// Forward: per-row hard top-k by absolute value (exactly `keep_count`
    /// ones per row, ties to the lowest flat index). Backward: identity —
    /// the straight-through estimator.
    BinarizeTopkRows { keep_count: usize },
}

/// Keep-mask over `vals`: 1.0 at the `keep` largest absolute values, ties
/// broken toward the lowest index. Deterministic for any input.
pub fn topk_keep_mask(vals: &[f64], keep: usize) -> Vec<f64> {
    let n = vals.len();
    assert!(keep <= n, "keep count {keep} exceeds {n} elements");
    if keep == n {
        return vec![1.0; n];
    }
    let mut mask = vec![0.0; n];
    if keep == 0 {
        return mask;
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    // Total order: larger |v| first, lower index first among equals.
    let rank = |a: &u32, b: &u32| {
        let va = math::abs(vals[*a as usize]);
        let vb = math::abs(vals[*b as usize]);
        vb.total_cmp(&va).then(a.cmp(b))
    };
    idx.select_nth_unstable_by(keep, rank);
    for &i in &idx[..keep] {
        mask[i as usize] = 1.0;
    }
    mask
}

#[derive(Debug, Clone)]
enum NodeKind {
    Param { name: String },
    Input { name: String },
    Ids { name: String, len: usize },
    Constant { value: Arc<Tensor> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Transpose(NodeId),
    Gather { table: NodeId, ids: NodeId },
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows { x: NodeId, r0: usize, r1: usize },
    SliceCols { x: NodeId, c0: usize, c1: usize },
    Reshape { x: NodeId, rows: usize, cols: usize },
    RepeatInterleaveCols { x: NodeId, k: usize },
    ReduceSumAll(NodeId),
    ReduceMaxAll(NodeId),
    /// Per output row `i`, copy row `i` of `states[sel[i]]`.
    RowSelect { states: Vec<NodeId>, sel: NodeId },
    CustomGrad { x: NodeId, rule: CustomGradRule },
}

impl NodeKind {
    fn op_name(&self) -> &'static str {
        match self {
            NodeKind::Param { .. } => "param",
            NodeKind::Input { .. } => "input",
            NodeKind::Ids { .. } => "ids",
            NodeKind::Constant { .. } => "constant",
            NodeKind::MatMul(..) => "matmul",
            NodeKind::Add(..) => "add",
            NodeKind::Mul(..) => "mul",
            NodeKind::Scale(..) => "scale",
            NodeKind::Tanh(..) => "tanh",
            NodeKind::Sigmoid(..) => "sigmoid",
            NodeKind::Softplus(..) => "softplus",
            NodeKind::SoftmaxRows(..) => "softmax_rows",
            NodeKind::LayerNormRows(..) => "layernorm_rows",
            NodeKind::Transpose(..) => "transpose",
            NodeKind::Gather { .. } => "embedding_gather",
            NodeKind::ConcatCols(..) => "concat_cols",
            NodeKind::ConcatRows(..) => "concat_rows",
            NodeKind::SliceRows { .. } => "slice_rows",
            NodeKind::SliceCols { .. } => "slice_cols",
            NodeKind::Reshape { .. } => "reshape",
            NodeKind::RepeatInterleaveCols { .. } => "repeat_interleave_cols",
            NodeKind::ReduceSumAll(..) => "reduce_sum",
            NodeKind::ReduceMaxAll(..) => "reduce_max",
            NodeKind::RowSelect { .. } => "row_select",
            NodeKind::CustomGrad { .. } => "custom_grad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Tensor(usize, usize),
    Ids(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    ShapeMismatch { op: &'static str, detail: String },
    DuplicateName { name: String },
    UnboundLeaf { name: String },
    BindShapeMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
    BindLenMismatch { name: String, expected: usize, got: usize },
    NonFinite { node: NodeId, op: &'static str },
    UnknownOutput { name: String },
    SeedShapeMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
    IdOutOfRange { name: String, id: usize, limit: usize },
}

impl core::fmt::Display for GraphError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GraphError::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            GraphError::DuplicateName { name } => write!(f, "duplicate leaf name {name:?}"),
            GraphError::UnboundLeaf { name } => write!(f, "leaf {name:?} not bound"),
            GraphError::BindShapeMismatch { name, expected, got } => write!(
                f,
                "binding for {name:?} has shape {got:?}, graph expects {expected:?}"
            ),
            GraphError::BindLenMismatch { name, expected, got } => {
                write!(f, "id binding for {name:?} has length {got}, graph expects {expected}")
            }
            GraphError::NonFinite { node, op } => {
                write!(f, "non-finite value produced by node {node} ({op})")
            }
            GraphError::UnknownOutput { name } => write!(f, "no output named {name:?}"),
            GraphError::SeedShapeMismatch { name, expected, got } => write!(
                f,
                "seed gradient for {name:?} has shape {got:?}, output has {expected:?}"
            ),
            GraphError::IdOutOfRange { name, id, limit } => {
                write!(f, "id {id} in {name:?} out of range (limit {limit})")
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    shape: Shape,
}

/// A static computation graph. Nodes are appended in topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_names: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, kind: NodeKind, shape: Shape) -> NodeId {
        self.nodes.push(Node { kind, shape });
        self.nodes.len() - 1
    }

    fn tensor_shape(&self, id: NodeId) -> Result<(usize, usize), GraphError> {
        match self.nodes[id].shape {
            Shape::Tensor(r, c) => Ok((r, c)),
            Shape::Ids(_) => Err(GraphError::ShapeMismatch {
                op: self.nodes[id].kind.op_name(),
                detail: "expected a tensor node, got an id sequence".to_string(),
            }),
        }
    }

    fn register_leaf(&mut self, name: &str, id: NodeId) -> Result<(), GraphError> {
        if self.leaf_names.insert(name.to_string(), id).is_some() {
            return Err(GraphError::DuplicateName { name: name.to_string() });
        }
        Ok(())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        let id = self.push(NodeKind::Param { name: name.to_string() }, Shape::Tensor(rows, cols));
        self.register_leaf(name, id)?;
        Ok(id)
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        let id = self.push(NodeKind::Input { name: name.to_string() }, Shape::Tensor(rows, cols));
        self.register_leaf(name, id)?;
        Ok(id)
    }

    /// An id-sequence leaf (embedding indices, row selectors).
    pub fn ids(&mut self, name: &str, len: usize) -> Result<NodeId, GraphError> {
        let id = self.push(NodeKind::Ids { name: name.to_string(), len }, Shape::Ids(len));
        self.register_leaf(name, id)?;
        Ok(id)
    }

    /// A tensor baked into the graph; receives no gradient.
    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = Shape::Tensor(value.rows(), value.cols());
        self.push(NodeKind::Constant { value }, shape)
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ar, ac) = self.tensor_shape(a)?;
        let (br, bc) = self.tensor_shape(b)?;
        if ac != br {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("({ar}x{ac}) . ({br}x{bc})"),
            });
        }
        Ok(self.push(NodeKind::MatMul(a, b), Shape::Tensor(ar, bc)))
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Shape, GraphError> {
        let sa = self.tensor_shape(a)?;
        let sb = self.tensor_shape(b)?;
        match tensor::broadcast_kind(sa, sb) {
            Some(_) => Ok(Shape::Tensor(sa.0, sa.1)),
            None => Err(GraphError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") }),
        }
    }

    /// Elementwise sum; `b` may be a `1 × n` row vector broadcast over rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.binary_broadcast("add", a, b)?;
        Ok(self.push(NodeKind::Add(a, b), shape))
    }

    /// Elementwise product; `b` may be a `1 × n` row vector broadcast over rows.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.binary_broadcast("mul", a, b)?;
        Ok(self.push(NodeKind::Mul(a, b), shape))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::Scale(x, c), Shape::Tensor(s.0, s.1)))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::Tanh(x), Shape::Tensor(s.0, s.1)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::Sigmoid(x), Shape::Tensor(s.0, s.1)))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::Softplus(x), Shape::Tensor(s.0, s.1)))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::SoftmaxRows(x), Shape::Tensor(s.0, s.1)))
    }

    pub fn layernorm_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::LayerNormRows(x), Shape::Tensor(s.0, s.1)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::Transpose(x), Shape::Tensor(s.1, s.0)))
    }

    /// Row lookup of `table` by an id-sequence leaf.
    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId, GraphError> {
        let (_, cols) = self.tensor_shape(table)?;
        let len = match self.nodes[ids].shape {
            Shape::Ids(len) => len,
            Shape::Tensor(..) => {
                return Err(GraphError::ShapeMismatch {
                    op: "embedding_gather",
                    detail: "ids argument must be an id-sequence leaf".to_string(),
                })
            }
        };
        Ok(self.push(NodeKind::Gather { table, ids }, Shape::Tensor(len, cols)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.tensor_shape(a)?;
        let sb = self.tensor_shape(b)?;
        if sa.0 != sb.0 {
            return Err(GraphError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(self.push(NodeKind::ConcatCols(a, b), Shape::Tensor(sa.0, sa.1 + sb.1)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.tensor_shape(a)?;
        let sb = self.tensor_shape(b)?;
        if sa.1 != sb.1 {
            return Err(GraphError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(self.push(NodeKind::ConcatRows(a, b), Shape::Tensor(sa.0 + sb.0, sa.1)))
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        if !(r0 < r1 && r1 <= s.0) {
            return Err(GraphError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{r0}..{r1} of {s:?}"),
            });
        }
        Ok(self.push(NodeKind::SliceRows { x, r0, r1 }, Shape::Tensor(r1 - r0, s.1)))
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        if !(c0 < c1 && c1 <= s.1) {
            return Err(GraphError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{c0}..{c1} of {s:?}"),
            });
        }
        Ok(self.push(NodeKind::SliceCols { x, c0, c1 }, Shape::Tensor(s.0, c1 - c0)))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        if s.0 * s.1 != rows * cols {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                detail: format!("{s:?} to ({rows},{cols})"),
            });
        }
        Ok(self.push(NodeKind::Reshape { x, rows, cols }, Shape::Tensor(rows, cols)))
    }

    pub fn repeat_interleave_cols(&mut self, x: NodeId, k: usize) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        Ok(self.push(NodeKind::RepeatInterleaveCols { x, k }, Shape::Tensor(s.0, s.1 * k)))
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.tensor_shape(x)?;
        Ok(self.push(NodeKind::ReduceSumAll(x), Shape::Tensor(1, 1)))
    }

    pub fn reduce_max(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.tensor_shape(x)?;
        Ok(self.push(NodeKind::ReduceMaxAll(x), Shape::Tensor(1, 1)))
    }

    /// Per row `i` of the output, row `i` of `states[sel[i]]`. All states
    /// must share one shape; `sel` is an id-sequence leaf of that row count.
    pub fn row_select(&mut self, states: Vec<NodeId>, sel: NodeId) -> Result<NodeId, GraphError> {
        assert!(!states.is_empty());
        let s0 = self.tensor_shape(states[0])?;
        for &s in &states[1..] {
            if self.tensor_shape(s)? != s0 {
                return Err(GraphError::ShapeMismatch {
                    op: "row_select",
                    detail: "states must share one shape".to_string(),
                });
            }
        }
        match self.nodes[sel].shape {
            Shape::Ids(len) if len == s0.0 => {}
            _ => {
                return Err(GraphError::ShapeMismatch {
                    op: "row_select",
                    detail: "selector must be an id sequence with one entry per row".to_string(),
                })
            }
        }
        Ok(self.push(NodeKind::RowSelect { states, sel }, Shape::Tensor(s0.0, s0.1)))
    }

    pub fn custom_grad(&mut self, x: NodeId, rule: CustomGradRule) -> Result<NodeId, GraphError> {
        let s = self.tensor_shape(x)?;
        if let CustomGradRule::BinarizeTopkRows { keep_count } = rule {
            if keep_count == 0 || keep_count > s.1 {
                return Err(GraphError::ShapeMismatch {
                    op: "custom_grad",
                    detail: format!("keep_count {keep_count} invalid for row width {}", s.1),
                });
            }
        }
        Ok(self.push(NodeKind::CustomGrad { x, rule }, Shape::Tensor(s.0, s.1)))
    }

    /// Expose a node under a stable name for [`Evaluation::output`] and as a
    /// backward seed point.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    /// Leaf names in this graph that are parameters.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Param { name } => Some(name.as_str()),
            _ => None,
        })
    }

    // ── Forward ──────────────────────────────────────────────────────

    pub fn forward(&self, binding: &Binding) -> Result<Evaluation<'_>, GraphError> {
        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; self.nodes.len()];
        let mut id_values: Vec<Option<Arc<Vec<usize>>>> = vec![None; self.nodes.len()];

        for (id, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Ids { name, len } => {
                    let bound = binding
                        .ids
                        .get(name)
                        .ok_or_else(|| GraphError::UnboundLeaf { name: name.clone() })?;
                    if bound.len() != *len {
                        return Err(GraphError::BindLenMismatch {
                            name: name.clone(),
                            expected: *len,
                            got: bound.len(),
                        });
                    }
                    id_values[id] = Some(bound.clone());
                    continue;
                }
                _ => {}
            }
            let value = self.eval_node(id, node, &values, &id_values, binding)?;
            if !value.is_finite_all() {
                return Err(GraphError::NonFinite { node: id, op: node.kind.op_name() });
            }
            values[id] = Some(Arc::new(value));
        }
        Ok(Evaluation { graph: self, values, id_values })
    }

    fn eval_node(
        &self,
        _id: NodeId,
        node: &Node,
        values: &[Option<Arc<Tensor>>],
        id_values: &[Option<Arc<Vec<usize>>>],
        binding: &Binding,
    ) -> Result<Tensor, GraphError> {
        let val = |n: NodeId| -> &Tensor { values[n].as_ref().expect("topological order") };
        Ok(match &node.kind {
            NodeKind::Ids { .. } => unreachable!("handled by caller"),
            NodeKind::Param { name } | NodeKind::Input { name } => {
                let bound = binding
                    .tensors
                    .get(name)
                    .ok_or_else(|| GraphError::UnboundLeaf { name: name.clone() })?;
                let expected = match node.shape {
                    Shape::Tensor(r, c) => (r, c),
                    Shape::Ids(_) => unreachable!(),
                };
                if bound.shape() != expected {
                    return Err(GraphError::BindShapeMismatch {
                        name: name.clone(),
                        expected,
                        got: bound.shape(),
                    });
                }
                bound.as_ref().clone()
            }
            NodeKind::Constant { value } => value.as_ref().clone(),
            NodeKind::MatMul(a, b) => tensor::matmul(val(*a), val(*b)),
            NodeKind::Add(a, b) => tensor::add(val(*a), val(*b)),
            NodeKind::Mul(a, b) => tensor::mul(val(*a), val(*b)),
            NodeKind::Scale(a, c) => tensor::scale(val(*a), *c),
            NodeKind::Tanh(a) => val(*a).map(math::tanh),
            NodeKind::Sigmoid(a) => val(*a).map(math::sigmoid),
            NodeKind::Softplus(a) => val(*a).map(math::softplus),
            NodeKind::SoftmaxRows(a) => tensor::softmax_rows(val(*a)),
            NodeKind::LayerNormRows(a) => tensor::layernorm_rows(val(*a)),
            NodeKind::Transpose(a) => val(*a).transpose(),
            NodeKind::Gather { table, ids } => {
                let t = val(*table);
                let idv = id_values[*ids].as_ref().expect("topological order");
                let name = match &self.nodes[*ids].kind {
                    NodeKind::Ids { name, .. } => name.clone(),
                    _ => unreachable!(),
                };
                for &i in idv.iter() {
                    if i >= t.rows() {
                        return Err(GraphError::IdOutOfRange { name, id: i, limit: t.rows() });
                    }
                }
                tensor::gather_rows(t, idv)
            }
            NodeKind::ConcatCols(a, b) => tensor::concat_cols(val(*a), val(*b)),
            NodeKind::ConcatRows(a, b) => tensor::concat_rows(val(*a), val(*b)),
            NodeKind::SliceRows { x, r0, r1 } => tensor::slice_rows(val(*x), *r0, *r1),
            NodeKind::SliceCols { x, c0, c1 } => tensor::slice_cols(val(*x), *c0, *c1),
            NodeKind::Reshape { x, rows, cols } => val(*x).reshaped(*rows, *cols),
            NodeKind::RepeatInterleaveCols { x, k } => tensor::repeat_interleave_cols(val(*x), *k),
            NodeKind::ReduceSumAll(x) => Tensor::scalar(tensor::reduce_sum_all(val(*x))),
            NodeKind::ReduceMaxAll(x) => Tensor::scalar(tensor::reduce_max_all(val(*x)).0),
            NodeKind::RowSelect { states, sel } => {
                let selv = id_values[*sel].as_ref().expect("topological order");
                let first = val(states[0]);
                let mut out = Tensor::zeros(first.rows(), first.cols());
                for (r, &s) in selv.iter().enumerate() {
                    let name = match &self.nodes[*sel].kind {
                        NodeKind::Ids { name, .. } => name.clone(),
                        _ => unreachable!(),
                    };
                    if s >= states.len() {
                        return Err(GraphError::IdOutOfRange {
                            name,
                            id: s,
                            limit: states.len(),
                        });
                    }
                    out.row_mut(r).copy_from_slice(val(states[s]).row(r));
                }
                out
            }
            NodeKind::CustomGrad { x, rule } => {
                let xv = val(*x);
                match rule {
                    CustomGradRule::Identity => xv.clone(),
                    CustomGradRule::BinarizeTopkRows { keep_count } => {
                        let mut out = Tensor::zeros(xv.rows(), xv.cols());
                        for r in 0..xv.rows() {
                            let mask = topk_keep_mask(xv.row(r), *keep_count);
                            out.row_mut(r).copy_from_slice(&mask);
                        }
                        out
                    }
                }
            }
        })
    }
}

/// Leaf values for one evaluation of a graph.
#[derive(Default, Clone)]
pub struct Binding {
    tensors: BTreeMap<String, Arc<Tensor>>,
    ids: BTreeMap<String, Arc<Vec<usize>>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, t: Arc<Tensor>) -> &mut Self {
        self.tensors.insert(name.to_string(), t);
        self
    }

    pub fn bind_tensor(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.bind(name, Arc::new(t))
    }

    pub fn bind_ids(&mut self, name: &str, ids: Arc<Vec<usize>>) -> &mut Self {
        self.ids.insert(name.to_string(), ids);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }
}

/// Gradients keyed by leaf name (parameters and inputs).
#[derive(Debug)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_name.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// The stored forward values of one binding, ready for output reads and
/// backward passes.
#[derive(Debug)]
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Option<Arc<Tensor>>>,
    id_values: Vec<Option<Arc<Vec<usize>>>>,
}

impl<'g> Evaluation<'g> {
    pub fn output(&self, name: &str) -> Result<Arc<Tensor>, GraphError> {
        let id = self
            .graph
            .outputs
            .get(name)
            .ok_or_else(|| GraphError::UnknownOutput { name: name.to_string() })?;
        Ok(self.values[*id].as_ref().expect("outputs are tensor nodes").clone())
    }

    /// All marked outputs, by name.
    pub fn outputs(&self) -> BTreeMap<String, Arc<Tensor>> {
        self.graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[*id].as_ref().unwrap().clone()))
            .collect()
    }

    /// Reverse-mode gradients of the seeded outputs with respect to every
    /// parameter and input leaf. Custom-grad nodes apply their declared rule.
    pub fn backward(&self, seeds: &[(&str, Tensor)]) -> Result<Gradients, GraphError> {
        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];

        for (name, seed) in seeds {
            let id = *self
                .graph
                .outputs
                .get(*name)
                .ok_or_else(|| GraphError::UnknownOutput { name: (*name).to_string() })?;
            let expected = match self.graph.nodes[id].shape {
                Shape::Tensor(r, c) => (r, c),
                Shape::Ids(_) => unreachable!("outputs are tensor nodes"),
            };
            if seed.shape() != expected {
                return Err(GraphError::SeedShapeMismatch {
                    name: (*name).to_string(),
                    expected,
                    got: seed.shape(),
                });
            }
            match &mut grads[id] {
                Some(g) => tensor::add_assign(g, seed),
                slot => *slot = Some(seed.clone()),
            }
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (id, node) in self.graph.nodes.iter().enumerate() {
            if let NodeKind::Param { name } | NodeKind::Input { name } = &node.kind {
                let g = match grads[id].take() {
                    Some(g) => g,
                    None => {
                        let (r, c) = match node.shape {
                            Shape::Tensor(r, c) => (r, c),
                            Shape::Ids(_) => unreachable!(),
                        };
                        Tensor::zeros(r, c)
                    }
                };
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }

    fn value(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("forward stored all tensor values")
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accumulate = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target] {
                Some(t) => tensor::add_assign(t, &delta),
                slot => *slot = Some(delta),
            }
        };

        match &self.graph.nodes[id].kind {
            NodeKind::Param { .. }
            | NodeKind::Input { .. }
            | NodeKind::Ids { .. }
            | NodeKind::Constant { .. } => {}
            NodeKind::MatMul(a, b) => {
                let da = tensor::matmul_nt(g, self.value(*b));
                let db = tensor::matmul_tn(self.value(*a), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            NodeKind::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                let sb = self.value(*b).shape();
                let db = match tensor::broadcast_kind(g.shape(), sb).unwrap() {
                    Broadcast::Same => g.clone(),
                    Broadcast::RowVector => column_sums(g),
                };
                accumulate(grads, *b, db);
            }
            NodeKind::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, tensor::mul(g, bv));
                let db = match tensor::broadcast_kind(av.shape(), bv.shape()).unwrap() {
                    Broadcast::Same => tensor::mul(g, av),
                    Broadcast::RowVector => column_sums(&tensor::mul(g, av)),
                };
                accumulate(grads, *b, db);
            }
            NodeKind::Scale(a, c) => accumulate(grads, *a, tensor::scale(g, *c)),
            NodeKind::Tanh(a) => {
                let y = self.value(id);
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= 1.0 - yv * yv;
                }
                accumulate(grads, *a, d);
            }
            NodeKind::Sigmoid(a) => {
                let y = self.value(id);
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= yv * (1.0 - yv);
                }
                accumulate(grads, *a, d);
            }
            NodeKind::Softplus(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= math::sigmoid(*xv);
                }
                accumulate(grads, *a, d);
            }
            NodeKind::SoftmaxRows(a) => {
                let y = self.value(id);
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (dv, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter())) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            NodeKind::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = self.value(id);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let n = x.cols() as f64;
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / math::sqrt(var + tensor::LAYERNORM_EPS);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (dv, (gv, yv)) in d.row_mut(r).iter_mut().zip(gr.iter().zip(yr.iter())) {
                        *dv = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                accumulate(grads, *a, d);
            }
            NodeKind::Transpose(a) => accumulate(grads, *a, g.transpose()),
            NodeKind::Gather { table, ids } => {
                let t = self.value(*table);
                let idv = self.id_values[*ids].as_ref().unwrap();
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (r, &i) in idv.iter().enumerate() {
                    let src = g.row(r);
                    for (dv, sv) in d.row_mut(i).iter_mut().zip(src.iter()) {
                        *dv += *sv;
                    }
                }
                accumulate(grads, *table, d);
            }
            NodeKind::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                accumulate(grads, *a, tensor::slice_cols(g, 0, ac));
                accumulate(grads, *b, tensor::slice_cols(g, ac, g.cols()));
            }
            NodeKind::ConcatRows(a, b) => {
                let ar = self.value(*a).rows();
                accumulate(grads, *a, tensor::slice_rows(g, 0, ar));
                accumulate(grads, *b, tensor::slice_rows(g, ar, g.rows()));
            }
            NodeKind::SliceRows { x, r0, .. } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r0 + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            NodeKind::SliceCols { x, c0, c1 } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*c0..*c1].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            NodeKind::Reshape { x, .. } => {
                let xv = self.value(*x);
                accumulate(grads, *x, g.reshaped(xv.rows(), xv.cols()));
            }
            NodeKind::RepeatInterleaveCols { x, k } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.row(r);
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = gr[c * k..(c + 1) * k].iter().sum();
                    }
                }
                accumulate(grads, *x, d);
            }
            NodeKind::ReduceSumAll(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.rows(), xv.cols(), g.data()[0]));
            }
            NodeKind::ReduceMaxAll(x) => {
                let xv = self.value(*x);
                let (_, arg) = tensor::reduce_max_all(xv);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                d.data_mut()[arg] = g.data()[0];
                accumulate(grads, *x, d);
            }
            NodeKind::RowSelect { states, sel } => {
                let selv = self.id_values[*sel].as_ref().unwrap();
                for (t, &state) in states.iter().enumerate() {
                    let sv = self.value(state);
                    let mut d = Tensor::zeros(sv.rows(), sv.cols());
                    let mut any = false;
                    for (r, &s) in selv.iter().enumerate() {
                        if s == t {
                            d.row_mut(r).copy_from_slice(g.row(r));
                            any = true;
                        }
                    }
                    if any {
                        accumulate(grads, state, d);
                    }
                }
            }
            // Straight-through: both rules pass the upstream gradient
            // through unchanged.
            NodeKind::CustomGrad { x, .. } => accumulate(grads, *x, g.clone()),
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += *v;
        }
    }
    out
}
