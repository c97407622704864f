//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! always 2-D (`rows × cols`); vectors are `1 × n`. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the tape in reverse and
//! returns the gradient of every bound parameter.
//!
//! Everything runs in double precision so finite-difference checks can be
//! held to tight tolerances.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_K * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_K * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulBt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    /// Broadcast a `1 × n` row over every row of `a`.
    AddRow(usize, usize),
    Scale(usize, f64),
    Act(usize, Activation),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SelectRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    /// Column-wise log-sum-exp over rows, `m × n → 1 × n`.
    LseRows(usize),
    MeanRows(usize),
    /// Row normalisation to unit sum; rows flagged `true` fell back to uniform.
    NormalizeRows(usize, Vec<bool>),
    /// Scalar-valued op whose local gradients were computed during forward.
    Scalar(Vec<(usize, Array2<f64>)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter; repeated binds of the same id share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let views: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = views[0].nrows();
            assert!(
                views.iter().all(|v| v.nrows() == rows),
                "concat_cols row mismatch"
            );
            let arrs: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &arrs).expect("row counts checked")
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let views: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let cols = views[0].ncols();
            assert!(
                views.iter().all(|v| v.ncols() == cols),
                "concat_rows column mismatch"
            );
            let arrs: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &arrs).expect("column counts checked")
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-wise layer normalisation with `1 × n` gain and bias.
    pub fn layer_norm<'t>(&'t self, x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let (value, xhat, inv_std) = {
            let xv = x.value();
            let g = gain.value();
            let b = bias.value();
            let n = xv.ncols() as f64;
            let mut xhat = Array2::zeros(xv.raw_dim());
            let mut inv_std = Vec::with_capacity(xv.nrows());
            for (r, row) in xv.rows().into_iter().enumerate() {
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (c, v) in row.iter().enumerate() {
                    xhat[[r, c]] = (v - mean) * is;
                }
            }
            let value = &xhat * &g.row(0) + b.row(0);
            (value, xhat, inv_std)
        };
        self.push(
            value,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Record a scalar (`1 × 1`) result together with its local gradients
    /// with respect to each input.
    pub fn scalar_op<'t>(&'t self, value: f64, local: Vec<(Var<'t>, Array2<f64>)>) -> Var<'t> {
        for (v, g) in &local {
            assert_eq!(v.shape(), g.dim(), "local gradient shape mismatch");
        }
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Scalar(local.into_iter().map(|(v, g)| (v.id, g)).collect()),
        )
    }

    /// Gradients of `loss` (which must be `1 × 1`) for every bound parameter.
    pub fn backward(&self, loss: Var<'_>, n_params: usize) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new(n_params);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&g));
                }
                Op::MatMulBt(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.dot(bv));
                    acc(&mut grads, *b, g.t().dot(av));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &nodes[*b].value);
                    acc(&mut grads, *b, &g * &nodes[*a].value);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Act(a, kind) => {
                    let mut d = nodes[*a].value.mapv(|x| kind.derivative(x));
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.raw_dim());
                    for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut dr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &y, &g| *d = y * (g - dot));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &nodes[*gain].value;
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * &gv.row(0);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d: f64 = dr.sum();
                        let sum_dx: f64 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SelectRows(a, idx) => {
                    let mut d = Array2::zeros(nodes[*a].value.raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(nodes[*a].value.raw_dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::LseRows(a) => {
                    let xv = &nodes[*a].value;
                    let y = &node.value;
                    let mut d = Array2::zeros(xv.raw_dim());
                    for c in 0..xv.ncols() {
                        for r in 0..xv.nrows() {
                            d[[r, c]] = g[[0, c]] * (xv[[r, c]] - y[[0, c]]).exp();
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let xv = &nodes[*a].value;
                    let n = xv.nrows() as f64;
                    let row = g.row(0).mapv(|v| v / n);
                    let d = Array2::from_shape_fn(xv.raw_dim(), |(_, c)| row[c]);
                    acc(&mut grads, *a, d);
                }
                Op::NormalizeRows(a, fallback) => {
                    let xv = &nodes[*a].value;
                    let y = &node.value;
                    let mut d = Array2::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        if fallback[r] {
                            continue;
                        }
                        let sum: f64 = xv.row(r).sum();
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(y.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..xv.ncols() {
                            d[[r, c]] = (g[[r, c]] - dot) / sum;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Scalar(local) => {
                    let up = g[[0, 0]];
                    for (p, lg) in local {
                        acc(&mut grads, *p, lg * up);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        self.tape.val(self.id)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.value().clone()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.ncols(), b.nrows(), "matmul {:?} x {:?}", a.dim(), b.dim());
            a.dot(&*b)
        };
        self.tape.push(v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(
                a.ncols(),
                b.ncols(),
                "matmul_t {:?} x {:?}ᵀ",
                a.dim(),
                b.dim()
            );
            a.dot(&b.t())
        };
        self.tape.push(v, Op::MatMulBt(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.dim(), b.dim(), "add shape mismatch");
            &*a + &*b
        };
        self.tape.push(v, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
            &*a * &*b
        };
        self.tape.push(v, Op::Mul(self.id, other.id))
    }

    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = {
            let (a, r) = (self.value(), row.value());
            assert_eq!(r.nrows(), 1, "add_row expects a single row");
            assert_eq!(a.ncols(), r.ncols(), "add_row width mismatch");
            &*a + &r.row(0)
        };
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn act(self, kind: Activation) -> Var<'t> {
        let v = self.value().mapv(|x| kind.apply(x));
        self.tape.push(v, Op::Act(self.id, kind))
    }

    pub fn tanh(self) -> Var<'t> {
        self.act(Activation::Tanh)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let mut v = self.to_array();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.tape.push(v, Op::SoftmaxRows(self.id))
    }

    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select(Axis(0), idx);
        self.tape.push(v, Op::SelectRows(self.id, idx.to_vec()))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.tape.push(v, Op::SliceCols(self.id, start))
    }

    /// Column-wise log-sum-exp with max-shift: `m × n → 1 × n`.
    pub fn lse_rows(self) -> Var<'t> {
        let v = {
            let x = self.value();
            assert!(x.nrows() > 0, "lse over zero rows");
            let out: Vec<f64> = x
                .columns()
                .into_iter()
                .map(|col| {
                    let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Array2::from_shape_vec((1, out.len()), out).expect("row vector")
        };
        self.tape.push(v, Op::LseRows(self.id))
    }

    pub fn mean_rows(self) -> Var<'t> {
        let v = {
            let x = self.value();
            assert!(x.nrows() > 0, "mean over zero rows");
            x.mean_axis(Axis(0))
                .expect("non-empty")
                .insert_axis(Axis(0))
        };
        self.tape.push(v, Op::MeanRows(self.id))
    }

    /// Scale each row to unit sum. Rows whose sum is not strictly positive
    /// become uniform and pass no gradient; their count is returned.
    pub fn normalize_rows(self) -> (Var<'t>, usize) {
        let (v, fallback) = {
            let x = self.value();
            let n = x.ncols() as f64;
            let mut v = x.clone();
            let mut fallback = Vec::with_capacity(x.nrows());
            for mut row in v.rows_mut() {
                let sum = row.sum();
                if sum > 0.0 && sum.is_finite() {
                    row.mapv_inplace(|a| a / sum);
                    fallback.push(false);
                } else {
                    row.fill(1.0 / n);
                    fallback.push(true);
                }
            }
            (v, fallback)
        };
        let count = fallback.iter().filter(|&&f| f).count();
        (
            self.tape.push(v, Op::NormalizeRows(self.id, fallback)),
            count,
        )
    }
}
