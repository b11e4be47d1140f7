//! Reverse-mode differentiation over dense 2-D arrays.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{ParamId, ParameterStore};

/// Dense row-major matrix; vectors are `1 × d` or `n × 1`.
pub type Tensor = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n × d` plus a broadcast `1 × d` row.
    AddRow(Var, Var),
    /// `n × d` times a broadcast `1 × 1` scalar.
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleRows(Var, Arc<Array1<f64>>),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Exp(Var),
    Concat(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Max(Var, Var),
    Sum(Var),
    /// Weighted sum of all entries.
    Dot(Var, Arc<Tensor>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: HashMap<ParamId, Var>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn check(ok: bool, what: &str, a: &[usize], b: &[usize]) {
    assert!(ok, "{what}: incompatible shapes {a:?} and {b:?}");
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "not a scalar");
        t[[0, 0]]
    }

    /// Constant input (receives no gradient outside the tape).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter value; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check(x.ncols() == y.nrows(), "matmul", x.shape(), y.shape());
        let v = x.dot(y);
        self.push(v, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (x, y) = (self.value(a), self.value(b));
        check(x.dim() == y.dim(), what, x.shape(), y.shape());
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        check(r.nrows() == 1 && r.ncols() == x.ncols(), "add_row", x.shape(), r.shape());
        let v = x + r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_scalar(&mut self, a: Var, k: Var) -> Var {
        let k_val = self.value(k);
        check(k_val.dim() == (1, 1), "mul_scalar", self.value(a).shape(), k_val.shape());
        let v = self.value(a) * k_val[[0, 0]];
        self.push(v, Op::MulScalar(a, k))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst(a))
    }

    /// Multiplies row `i` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Arc<Array1<f64>>) -> Var {
        let x = self.value(a);
        check(x.nrows() == w.len(), "scale_rows", x.shape(), &[w.len()]);
        let v = x * &w.view().insert_axis(Axis(1));
        self.push(v, Op::ScaleRows(a, w))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(elu);
        self.push(v, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(crate::math::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(crate::math::log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check(x.nrows() == y.nrows(), "concat", x.shape(), y.shape());
        let v = ndarray::concatenate(Axis(1), &[x.view(), y.view()]).expect("row counts checked");
        self.push(v, Op::Concat(a, b))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::Gather(a, idx))
    }

    /// Output row `idx[k]` accumulates input row `k`; `n_out` rows.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Var {
        let x = self.value(a);
        check(x.nrows() == idx.len(), "scatter_add", x.shape(), &[idx.len()]);
        let mut v = Tensor::zeros((n_out, x.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += &x.row(k);
        }
        self.push(v, Op::ScatterAdd(a, idx))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "max");
        let v = Zip::from(self.value(a)).and(self.value(b)).map_collect(|&x, &y| x.max(y));
        self.push(v, Op::Max(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `Σ w ⊙ a` for a constant weight array of the same shape.
    pub fn dot_const(&mut self, a: Var, w: Arc<Tensor>) -> Var {
        let x = self.value(a);
        check(x.dim() == w.dim(), "dot_const", x.shape(), w.shape());
        let v = Tensor::from_elem((1, 1), (x * &*w).sum());
        self.push(v, Op::Dot(a, w))
    }

    /// Backpropagates from a scalar, accumulating into parameter gradients.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) {
        self.backward_with_seed(&[(loss, Tensor::ones((1, 1)))], store);
    }

    /// Backpropagates given upstream gradients for any set of variables.
    pub fn backward_with_seed(&self, seeds: &[(Var, Tensor)], store: &mut ParameterStore) {
        let grads = self.gradients(seeds);
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }

    /// Gradients of constants and parameters (None where unreachable).
    /// Intermediate gradients are freed once propagated.
    pub fn gradients(&self, seeds: &[(Var, Tensor)]) -> Vec<Option<Tensor>> {
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut hi = 0;
        for (v, g) in seeds {
            assert_eq!(self.values[v.0].dim(), g.dim(), "seed shape");
            acc(&mut grads, *v, g.clone());
            hi = hi.max(v.0 + 1);
        }
        for i in (0..hi).rev() {
            let Some(g) = grads[i].take() else { continue };
            let val = &self.values[i];
            match &self.ops[i] {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulScalar(a, k) => {
                    let gk = (&g * self.value(*a)).sum();
                    acc(&mut grads, *k, Tensor::from_elem((1, 1), gk));
                    acc(&mut grads, *a, g * self.value(*k)[[0, 0]]);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::ScaleRows(a, w) => acc(&mut grads, *a, g * &w.view().insert_axis(Axis(1))),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let d = Zip::from(&g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { g * x.exp() });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(val).map_collect(|&g, &s| g * s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(val).map_collect(|&g, &t| g * (1.0 - t * t));
                    acc(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    let d = Zip::from(&g).and(x).map_collect(|&g, &x| g * crate::math::sigmoid(-x));
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * val),
                Op::Concat(a, b) => {
                    let k = self.value(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..k]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., k..]).to_owned());
                }
                Op::Gather(a, idx) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ScatterAdd(a, idx) => acc(&mut grads, *a, g.select(Axis(0), idx)),
                Op::Max(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Zip::from(&g).and(x).and(y).map_collect(|&g, &x, &y| if x >= y { g } else { 0.0 });
                    let gb = &g - &ga;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let d = Tensor::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Dot(a, w) => acc(&mut grads, *a, &**w * g[[0, 0]]),
            }
        }
        grads
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
