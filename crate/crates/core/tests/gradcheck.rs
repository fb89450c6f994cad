//! Central finite-difference checks for every graph primitive.
//!
//! For each op we build a tiny graph ending in a scalar loss, take the
//! analytic reverse-mode gradient, and compare it against a two-sided
//! difference quotient with step 1e-5, elementwise, to 1e-6 relative error.
//! The binarizing custom-grad node is the one exception: its backward is
//! straight-through by definition, so it is pinned by exact-identity tests
//! instead of finite differences.

use std::sync::Arc;

use diet_core::graph::{CustomGradRule, Graph, NodeId};
use diet_core::rng::{xavier_normal, Rng};
use diet_core::tensor::Tensor;
use diet_core::Binding;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

fn loss_of(g: &Graph, binding: &Binding) -> f64 {
    g.forward(binding).unwrap().output("loss").unwrap().data()[0]
}

/// Compare analytic and finite-difference gradients for every listed leaf.
fn check_grads(g: &Graph, binding: &Binding, leaves: &[(&str, Tensor)]) {
    let eval = g.forward(binding).unwrap();
    let grads = eval.backward(&[("loss", Tensor::scalar(1.0))]).unwrap();
    for (name, value) in leaves {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        for i in 0..value.numel() {
            let mut plus = value.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = value.clone();
            minus.data_mut()[i] -= STEP;
            let mut bp = binding.clone();
            bp.bind_tensor(name, plus);
            let mut bm = binding.clone();
            bm.bind_tensor(name, minus);
            let fd = (loss_of(g, &bp) - loss_of(g, &bm)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                (a - fd).abs() / denom <= REL_TOL,
                "{name}[{i}]: analytic {a} vs finite difference {fd}"
            );
        }
    }
}

/// Attach a fixed random-weighted sum so the loss depends unevenly on every
/// output entry.
fn weighted_loss(g: &mut Graph, y: NodeId, rows: usize, cols: usize, seed: u64) {
    let w = Arc::new(xavier_normal(rows, cols, &mut Rng::new(seed ^ 0xABCD)));
    let c = g.constant(w);
    let prod = g.mul(y, c).unwrap();
    let loss = g.reduce_sum(prod).unwrap();
    g.mark_output("loss", loss);
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    xavier_normal(rows, cols, &mut Rng::new(seed))
}

#[test]
fn tanh_grad() {
    check_unary_with_shape(2, 3, 611, (2, 3), |g, x| g.tanh(x).unwrap());
}

#[test]
fn sigmoid_grad() {
    check_unary_with_shape(2, 3, 12, (2, 3), |g, x| g.sigmoid(x).unwrap());
}

#[test]
fn softplus_grad() {
    check_unary_with_shape(2, 3, 13, (2, 3), |g, x| g.softplus(x).unwrap());
}

#[test]
fn softmax_rows_grad() {
    check_unary_with_shape(3, 4, 14, (3, 4), |g, x| g.softmax_rows(x).unwrap());
}

#[test]
fn layernorm_rows_grad() {
    check_unary_with_shape(3, 5, 15, (3, 5), |g, x| g.layernorm_rows(x).unwrap());
}

#[test]
fn transpose_grad() {
    check_unary_with_shape(2, 4, 16, (4, 2), |g, x| g.transpose(x).unwrap());
}

#[test]
fn scale_grad() {
    check_unary_with_shape(2, 3, 17, (2, 3), |g, x| g.scale(x, -1.7).unwrap());
}

#[test]
fn reshape_grad() {
    check_unary_with_shape(2, 6, 18, (3, 4), |g, x| g.reshape(x, 3, 4).unwrap());
}

#[test]
fn slice_rows_grad() {
    check_unary_with_shape(4, 3, 19, (2, 3), |g, x| g.slice_rows(x, 1, 3).unwrap());
}

#[test]
fn slice_cols_grad() {
    check_unary_with_shape(3, 5, 20, (3, 2), |g, x| g.slice_cols(x, 2, 4).unwrap());
}

#[test]
fn repeat_interleave_cols_grad() {
    check_unary_with_shape(2, 3, 21, (2, 9), |g, x| g.repeat_interleave_cols(x, 3).unwrap());
}

#[test]
fn reduce_sum_grad() {
    check_unary_with_shape(3, 3, 22, (1, 1), |g, x| g.reduce_sum(x).unwrap());
}

#[test]
fn reduce_max_grad() {
    // Random normal entries are distinct with probability 1, so the max is
    // locally smooth and finite differences are valid.
    check_unary_with_shape(3, 3, 23, (1, 1), |g, x| g.reduce_max(x).unwrap());
}

#[test]
fn custom_grad_identity_grad() {
    check_unary_with_shape(2, 4, 24, (2, 4), |g, x| {
        g.custom_grad(x, CustomGradRule::Identity).unwrap()
    });
}

fn check_unary_with_shape(
    rows: usize,
    cols: usize,
    seed: u64,
    out: (usize, usize),
    build: impl Fn(&mut Graph, NodeId) -> NodeId,
) {
    let mut g = Graph::new();
    let x = g.param("x", rows, cols).unwrap();
    let y = build(&mut g, x);
    weighted_loss(&mut g, y, out.0, out.1, seed);
    let xv = rand_tensor(rows, cols, seed);
    let mut b = Binding::new();
    b.bind_tensor("x", xv.clone());
    check_grads(&g, &b, &[("x", xv)]);
}

#[test]
fn matmul_grad() {
    let mut g = Graph::new();
    let a = g.param("a", 3, 4).unwrap();
    let b = g.param("b", 4, 2).unwrap();
    let y = g.matmul(a, b).unwrap();
    weighted_loss(&mut g, y, 3, 2, 31);
    let av = rand_tensor(3, 4, 31);
    let bv = rand_tensor(4, 2, 32);
    let mut bind = Binding::new();
    bind.bind_tensor("a", av.clone());
    bind.bind_tensor("b", bv.clone());
    check_grads(&g, &bind, &[("a", av), ("b", bv)]);
}

#[test]
fn add_same_shape_grad() {
    check_binary(33, (3, 4), (3, 4), |g, a, b| g.add(a, b).unwrap());
}

#[test]
fn add_row_broadcast_grad() {
    check_binary(34, (3, 4), (1, 4), |g, a, b| g.add(a, b).unwrap());
}

#[test]
fn mul_same_shape_grad() {
    check_binary(35, (3, 4), (3, 4), |g, a, b| g.mul(a, b).unwrap());
}

#[test]
fn mul_row_broadcast_grad() {
    check_binary(36, (3, 4), (1, 4), |g, a, b| g.mul(a, b).unwrap());
}

#[test]
fn concat_cols_grad() {
    let mut g = Graph::new();
    let a = g.param("a", 2, 3).unwrap();
    let b = g.param("b", 2, 2).unwrap();
    let y = g.concat_cols(a, b).unwrap();
    weighted_loss(&mut g, y, 2, 5, 37);
    let av = rand_tensor(2, 3, 37);
    let bv = rand_tensor(2, 2, 38);
    let mut bind = Binding::new();
    bind.bind_tensor("a", av.clone());
    bind.bind_tensor("b", bv.clone());
    check_grads(&g, &bind, &[("a", av), ("b", bv)]);
}

#[test]
fn concat_rows_grad() {
    let mut g = Graph::new();
    let a = g.param("a", 2, 3).unwrap();
    let b = g.param("b", 1, 3).unwrap();
    let y = g.concat_rows(a, b).unwrap();
    weighted_loss(&mut g, y, 3, 3, 39);
    let av = rand_tensor(2, 3, 39);
    let bv = rand_tensor(1, 3, 40);
    let mut bind = Binding::new();
    bind.bind_tensor("a", av.clone());
    bind.bind_tensor("b", bv.clone());
    check_grads(&g, &bind, &[("a", av), ("b", bv)]);
}

fn check_binary(
    seed: u64,
    sa: (usize, usize),
    sb: (usize, usize),
    build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId,
) {
    let mut g = Graph::new();
    let a = g.param("a", sa.0, sa.1).unwrap();
    let b = g.param("b", sb.0, sb.1).unwrap();
    let y = build(&mut g, a, b);
    weighted_loss(&mut g, y, sa.0, sa.1, seed);
    let av = rand_tensor(sa.0, sa.1, seed);
    let bv = rand_tensor(sb.0, sb.1, seed ^ 0x55);
    let mut bind = Binding::new();
    bind.bind_tensor("a", av.clone());
    bind.bind_tensor("b", bv.clone());
    check_grads(&g, &bind, &[("a", av), ("b", bv)]);
}

#[test]
fn embedding_gather_grad() {
    let mut g = Graph::new();
    let table = g.param("table", 5, 3).unwrap();
    let ids = g.ids("ids", 4).unwrap();
    let y = g.gather(table, ids).unwrap();
    weighted_loss(&mut g, y, 4, 3, 41);
    let tv = rand_tensor(5, 3, 41);
    let mut bind = Binding::new();
    bind.bind_tensor("table", tv.clone());
    bind.bind_ids("ids", Arc::new(vec![2, 0, 2, 4])); // repeated id: grads accumulate
    check_grads(&g, &bind, &[("table", tv)]);
}

#[test]
fn row_select_grad() {
    let mut g = Graph::new();
    let s0 = g.param("s0", 3, 2).unwrap();
    let s1 = g.param("s1", 3, 2).unwrap();
    let sel = g.ids("sel", 3).unwrap();
    let y = g.row_select(vec![s0, s1], sel).unwrap();
    weighted_loss(&mut g, y, 3, 2, 42);
    let v0 = rand_tensor(3, 2, 42);
    let v1 = rand_tensor(3, 2, 43);
    let mut bind = Binding::new();
    bind.bind_tensor("s0", v0.clone());
    bind.bind_tensor("s1", v1.clone());
    bind.bind_ids("sel", Arc::new(vec![1, 0, 1]));
    check_grads(&g, &bind, &[("s0", v0), ("s1", v1)]);
}

/// The composite case: a chain of five different primitives, checked against
/// finite differences end to end.
#[test]
fn random_five_op_graph_grad() {
    let mut g = Graph::new();
    let x = g.param("x", 2, 3).unwrap();
    let w = g.param("w", 3, 4).unwrap();
    let a = g.tanh(x).unwrap();
    let b = g.matmul(a, w).unwrap();
    let c = g.layernorm_rows(b).unwrap();
    let d = g.sigmoid(c).unwrap();
    let e = g.softmax_rows(d).unwrap();
    weighted_loss(&mut g, e, 2, 4, 44);
    let xv = rand_tensor(2, 3, 44);
    let wv = rand_tensor(3, 4, 45);
    let mut bind = Binding::new();
    bind.bind_tensor("x", xv.clone());
    bind.bind_tensor("w", wv.clone());
    check_grads(&g, &bind, &[("x", xv), ("w", wv)]);
}
