//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every node holds a 2-D array (rows are batch entries). Operations are
//! appended in evaluation order, so a single reverse sweep over the node
//! list yields exact gradients of a scalar output with respect to every
//! node on the tape.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::lyapunov::{unit_ball_volume, Cholesky};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// a + b with b of shape 1×cols or 1×1 broadcast over a
    AddBroadcast(usize, usize),
    SubBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    RowSum(usize),
    SumAll(usize),
    /// lower-triangular factor with softplus-mapped diagonal
    TrilPositive(usize),
    /// volume of {x : xᵀ(LLᵀ + εI)x ≤ c}
    EllipsoidVolume { l: usize, c: usize, eps: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records one forward evaluation for reverse-mode differentiation.
pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Array2<f64> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.index]),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn tril_positive(raw: &Array2<f64>) -> Array2<f64> {
    let n = raw.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[[i, j]],
        std::cmp::Ordering::Equal => softplus(raw[[i, i]]),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Q = L·Lᵀ + εI.
pub(crate) fn gram_plus_eps(l: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut q = l.dot(&l.t());
    q.diag_mut().mapv_inplace(|d| d + eps);
    q
}

fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    /// Whether `v` was recorded on this tape.
    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.len()
    }

    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        let i = self.idx(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let i = self.idx(v);
        self.nodes.borrow()[i].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let i = self.idx(v);
        self.nodes.borrow()[i].value.dim()
    }

    fn unary(&self, a: Var, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: impl Fn(usize) -> Op) -> Var {
        let ia = self.idx(a);
        let value = f(&self.nodes.borrow()[ia].value);
        self.push(value, op(ia))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: impl Fn(usize, usize) -> Op,
    ) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[ia].value, &nodes[ib].value)
        };
        self.push(value, op(ia, ib))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn broadcastable(&self, a: Var, b: Var, what: &str) {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert!(
            (rb == 1 || rb == ra) && (cb == 1 || cb == ca),
            "{what}: cannot broadcast {rb}x{cb} onto {ra}x{ca}"
        );
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul)
    }

    /// a · bᵀ
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(&y.t()), Op::MatMulT)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_broadcast(&self, a: Var, b: Var) -> Var {
        self.broadcastable(a, b, "add_broadcast");
        self.binary(a, b, |x, y| x + y, Op::AddBroadcast)
    }

    pub fn sub_broadcast(&self, a: Var, b: Var) -> Var {
        self.broadcastable(a, b, "sub_broadcast");
        self.binary(a, b, |x, y| x - y, Op::SubBroadcast)
    }

    pub fn mul_broadcast(&self, a: Var, b: Var) -> Var {
        self.broadcastable(a, b, "mul_broadcast");
        self.binary(a, b, |x, y| x * y, Op::MulBroadcast)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, |i| Op::Scale(i, k))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v.max(0.0)), Op::Relu)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(softplus), Op::Softplus)
    }

    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.mapv(|v| v.max(floor)), |i| Op::ClampMin(i, floor))
    }

    pub fn row_sum(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::RowSum)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::SumAll)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn tril_positive(&self, raw: Var) -> Var {
        let (r, c) = self.shape(raw);
        assert_eq!(r, c, "tril_positive needs a square matrix");
        self.unary(raw, tril_positive, Op::TrilPositive)
    }

    /// Volume of the ellipsoid {x : xᵀ(LLᵀ + εI)x ≤ c}; `c` is 1×1.
    pub fn ellipsoid_volume(&self, l: Var, c: Var, eps: f64) -> Var {
        self.binary(
            l,
            c,
            |lv, cv| {
                let n = lv.nrows();
                let q = gram_plus_eps(lv, eps);
                let chol = Cholesky::new(&q).expect("LLᵀ + εI is positive definite");
                let vol = unit_ball_volume(n) * (cv[[0, 0]].powi(n as i32) / chol.determinant()).sqrt();
                Array2::from_elem((1, 1), vol)
            },
            |il, ic| Op::EllipsoidVolume { l: il, c: ic, eps },
        )
    }

    /// Values of every ReLU input recorded so far, flattened in tape order.
    pub fn relu_inputs(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(nodes[a].value.iter().copied().collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Reverse sweep from a 1×1 output.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        if !self.owns(output) {
            return Err(Error::Usage("output variable was not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.index].value.dim() != (1, 1) {
            return Err(Error::Usage("gradient output must be a 1x1 scalar".into()));
        }
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.index] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
            match &mut grads[i] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, a, g.dot(&val(b).t()));
                    acc(&mut grads, b, val(a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, a, g.dot(val(b)));
                    acc(&mut grads, b, g.t().dot(val(a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, a, &g * val(b));
                    acc(&mut grads, b, &g * val(a));
                }
                Op::Div(a, b) => {
                    let gb = Zip::from(&g)
                        .and(val(a))
                        .and(val(b))
                        .map_collect(|&g, &x, &y| -g * x / (y * y));
                    acc(&mut grads, a, &g / val(b));
                    acc(&mut grads, b, gb);
                }
                Op::AddBroadcast(a, b) => {
                    acc(&mut grads, b, reduce_to(&g, shapes[b]));
                    acc(&mut grads, a, g.clone());
                }
                Op::SubBroadcast(a, b) => {
                    acc(&mut grads, b, -reduce_to(&g, shapes[b]));
                    acc(&mut grads, a, g.clone());
                }
                Op::MulBroadcast(a, b) => {
                    acc(&mut grads, b, reduce_to(&(&g * val(a)), shapes[b]));
                    acc(&mut grads, a, &g * val(b));
                }
                Op::Scale(a, k) => acc(&mut grads, a, &g * k),
                Op::Tanh(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &t| g * (1.0 - t * t));
                    acc(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let ga = Zip::from(&g)
                        .and(val(a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g).and(val(a)).map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let ga = Zip::from(&g)
                        .and(val(a))
                        .map_collect(|&g, &x| if x > floor { g } else { 0.0 });
                    acc(&mut grads, a, ga);
                }
                Op::RowSum(a) => {
                    let ga = Array2::from_shape_fn(shapes[a], |(r, _)| g[[r, 0]]);
                    acc(&mut grads, a, ga);
                }
                Op::SumAll(a) => acc(&mut grads, a, Array2::from_elem(shapes[a], g[[0, 0]])),
                Op::TrilPositive(a) => {
                    let raw = val(a);
                    let ga = Array2::from_shape_fn(shapes[a], |(r, c)| match r.cmp(&c) {
                        std::cmp::Ordering::Greater => g[[r, c]],
                        std::cmp::Ordering::Equal => g[[r, c]] * sigmoid(raw[[r, c]]),
                        std::cmp::Ordering::Less => 0.0,
                    });
                    acc(&mut grads, a, ga);
                }
                Op::EllipsoidVolume { l, c, eps } => {
                    // vol ∝ c^{n/2} det(Q)^{-1/2}; ∂vol/∂L = −vol·Q⁻¹L, ∂vol/∂c = vol·n/(2c)
                    let vol = node.value[[0, 0]];
                    let lv = val(l);
                    let n = lv.nrows();
                    let q = gram_plus_eps(lv, eps);
                    let chol = Cholesky::new(&q).expect("LLᵀ + εI is positive definite");
                    let qinv_l = chol.solve_matrix(lv);
                    let gs = g[[0, 0]];
                    acc(&mut grads, l, qinv_l * (-vol * gs));
                    let cval = val(c)[[0, 0]];
                    acc(&mut grads, c, Array2::from_elem((1, 1), gs * vol * n as f64 / (2.0 * cval)));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&Tape, Var) -> Var, x: Array2<f64>) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&tape, v);
        let g = tape.grad(out).unwrap().get(v);
        let h = 1e-6;
        for idx in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let t = Tape::new();
                let v = t.leaf(xp);
                let o = build(&t, v);
                t.scalar_value(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = g.as_slice().unwrap()[idx];
            assert!((fd - ad).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} ad {ad}");
        }
    }

    #[test]
    fn squared_norm_gradient_is_2x() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
        let loss = tape.sum_all(tape.square(x));
        let g = tape.grad(loss).unwrap().get(x);
        assert_eq!(g, array![[2.0, -4.0, 6.0]]);
    }

    #[test]
    fn unused_variable_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let unused = tape.leaf(array![[5.0], [6.0]]);
        let loss = tape.sum_all(tape.tanh(x));
        let g = tape.grad(loss).unwrap();
        assert_eq!(g.get(unused), Array2::<f64>::zeros((2, 1)));
    }

    #[test]
    fn foreign_output_is_usage_error() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.scalar(1.0);
        assert!(matches!(a.grad(x), Err(Error::Usage(_))));
        let v = a.leaf(array![[1.0, 2.0]]);
        assert!(matches!(a.grad(v), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]];
        fd_check(
            |t, v| {
                let w = t.leaf(array![[0.5, -0.1], [0.2, 0.3], [-0.7, 0.9]]);
                let h = t.tanh(t.matmul(v, w));
                let s = t.softplus(h);
                let r = t.row_sum(t.mul(s, h));
                let d = t.div(r, t.clamp_min(t.row_sum(t.square(v)), 1e-3));
                let bias = t.leaf(array![[0.1, -0.2, 0.3]]);
                let b = t.add_broadcast(v, bias);
                let m = t.mul_broadcast(b, d);
                let k = t.matmul_t(m, t.leaf(array![[1.0, 2.0, 3.0]]));
                t.sum_all(t.relu(t.sub_broadcast(t.scale(k, 0.5), t.scalar(-1.0))))
            },
            x,
        );
    }

    #[test]
    fn tril_and_volume_match_finite_differences() {
        let raw = array![[0.2, 9.0, 9.0], [0.3, -0.4, 9.0], [-0.1, 0.5, 0.1]];
        fd_check(
            |t, v| {
                let l = t.tril_positive(v);
                let c = t.softplus(t.scalar(0.4));
                t.ellipsoid_volume(l, c, 1e-4)
            },
            raw,
        );
        fd_check(
            |t, v| {
                let l = t.tril_positive(t.leaf(array![[0.2, 0.0], [0.3, -0.4]]));
                t.ellipsoid_volume(l, v, 1e-4)
            },
            array![[1.7]],
        );
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.5, 1.0, 7.0, 50.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
