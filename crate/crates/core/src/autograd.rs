//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Graph`] records operations on a tape as they are evaluated. Parameters
//! live in a [`ParamSet`] shared read-only by every graph built from it, so
//! independent graphs (one per story) can run on different threads and their
//! [`Grads`] be summed afterwards.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Array2<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<F> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Same names and shapes, converted element type.
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.add(n.clone(), t.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap()));
        }
        out
    }
}

/// Gradients indexed like the [`ParamSet`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    pub tensors: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(n: usize) -> Self {
        Grads { tensors: vec![None; n] }
    }

    pub fn accumulate(&mut self, id: usize, g: ArrayView2<F>) {
        match &mut self.tensors[id] {
            Some(t) => *t += &g,
            slot => *slot = Some(g.to_owned()),
        }
    }

    pub fn merge(mut self, other: Grads<F>) -> Self {
        for (id, g) in other.tensors.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g.view());
            }
        }
        self
    }

    pub fn get(&self, id: usize) -> Option<&Array2<F>> {
        self.tensors[id].as_ref()
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors.iter_mut().flatten() {
            t.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> F {
        self.tensors.iter().flatten().flat_map(|t| t.iter()).fold(F::zero(), |a, &x| a + x * x).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which (row, column) entries of a score matrix may be attended.
#[derive(Clone, Debug)]
pub enum Mask {
    Full,
    /// Column j visible from row i iff j ≤ i.
    Causal,
    /// Visible iff both positions carry the same segment id.
    Segments(Arc<Vec<u32>>),
}

impl Mask {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Causal => j <= i,
            Mask::Segments(seg) => seg[i] == seg[j],
        }
    }
}

enum Op<F> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<F>, rstd: Vec<F> },
    Embed { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    L2Normalize(Var, Vec<F>),
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Array2<F> },
    Gather(Var, Vec<(usize, usize)>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Array2<F>>,
    needs_grad: bool,
}

/// Losses clamp the gold probability from below at this value.
pub const PROB_FLOOR: f64 = 1e-12;

pub struct Graph<'p, F: Real> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<usize, Var>,
    /// Cross-entropy terms whose gold probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

pub struct Backward<F> {
    pub params: Grads<F>,
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Backward<F> {
    /// Gradient reaching an input created with `requires_grad`.
    pub fn input_grad(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }
}

fn gelu<F: Real>(x: F) -> F {
    let k = cst::<F>((2.0 / std::f64::consts::PI).sqrt());
    let c = cst::<F>(0.044715);
    let half = cst::<F>(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = cst::<F>((2.0 / std::f64::consts::PI).sqrt());
    let c = cst::<F>(0.044715);
    let half = cst::<F>(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + cst::<F>(3.0) * c * x * x)
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: HashMap::new(), clamped: 0 }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, op: Op<F>, value: Array2<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant, or a differentiable input when `requires_grad`.
    pub fn input(&mut self, value: Array2<F>, requires_grad: bool) -> Var {
        self.push(Op::Input, value, requires_grad)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNT(a, b), v, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    /// Adds a 1×d row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::abs);
        let ng = self.ng(a);
        self.push(Op::Abs(a), v, ng)
    }

    /// Row-wise softmax over the allowed entries; masked entries are exactly 0
    /// and never read.
    pub fn softmax(&mut self, a: Var, mask: Mask) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.dim());
        for (i, (xr, mut or)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let mut max = F::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if mask.allowed(i, j) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                continue;
            }
            let mut sum = F::zero();
            for (j, &v) in xr.iter().enumerate() {
                if mask.allowed(i, j) {
                    let e = (v - max).exp();
                    or[j] = e;
                    sum = sum + e;
                }
            }
            or.mapv_inplace(|e| e / sum);
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), out, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = cst::<F>(1e-5);
        let xv = self.value(x);
        let d = F::from_usize(xv.ncols()).unwrap();
        let mut xhat = Array2::zeros(xv.dim());
        let mut rstd = Vec::with_capacity(xv.nrows());
        for (xr, mut hr) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = xr.sum() / d;
            let var = xr.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
            let r = F::one() / (var + eps).sqrt();
            Zip::from(&mut hr).and(&xr).for_each(|h, &v| *h = (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, out, ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(Op::Embed { table, ids: ids.to_vec() }, out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start, end), v, ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let ng = self.ng(a);
        self.push(Op::SelectRows(a, rows.to_vec()), v, ng)
    }

    /// Scales every row to unit L2 norm. Callers reject zero rows first.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut r in out.outer_iter_mut() {
            let n = r.iter().fold(F::zero(), |s, &v| s + v * v).sqrt().max(F::min_positive_value());
            r.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(Op::L2Normalize(a, norms), out, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), v, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::SumAll(a), v, ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; `None` rows are ignored. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let cap = -cst::<F>(PROB_FLOOR).ln();
        let mut probs = Array2::zeros(x.dim());
        let mut total = F::zero();
        let mut clamped = 0;
        for ((xr, mut pr), t) in x.outer_iter().zip(probs.outer_iter_mut()).zip(targets) {
            let max = xr.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for (p, &v) in pr.iter_mut().zip(xr.iter()) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            pr.mapv_inplace(|p| p / sum);
            if let Some(t) = t {
                let nll = sum.ln() + max - xr[*t];
                if nll > cap {
                    clamped += 1;
                }
                total = total + nll.min(cap);
            }
        }
        self.clamped += clamped;
        let ng = self.ng(logits);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            Array2::from_elem((1, 1), total),
            ng,
        )
    }

    /// Entries `(row, col)` of `a` as a k×1 column.
    pub fn gather(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((idx.len(), 1), |(k, _)| x[idx[k]]);
        let ng = self.ng(a);
        self.push(Op::Gather(a, idx.to_vec()), v, ng)
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Backward<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward starts from a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut params = Grads::zeros_like(self.params.len());

        fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(t) => *t += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let ng = |v: &Var| self.nodes[v.0].needs_grad;
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => params.accumulate(*id, g.view()),
                Op::MatMul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if ng(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if ng(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if ng(row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(b) {
                        acc(&mut grads, *b, g.mapv(|x| -x));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let mut d = self.value(*a).mapv(|x| if x > F::zero() { F::one() } else if x < F::zero() { -F::one() } else { F::zero() });
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut d = Array2::zeros(y.dim());
                    for ((yr, gr), mut dr) in y.outer_iter().zip(g.outer_iter()).zip(d.outer_iter_mut()) {
                        let dot = yr.dot(&gr);
                        Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| *d = y * (g - dot));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    if ng(bias) {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(gain) {
                        acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(x) {
                        let dxhat = &g * self.value(*gain);
                        let d = F::from_usize(xhat.ncols()).unwrap();
                        let mut dx = Array2::zeros(xhat.dim());
                        for (r, mut out) in dx.outer_iter_mut().enumerate() {
                            let dh = dxhat.row(r);
                            let h = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dhh = dh.dot(&h);
                            let k = rstd[r] / d;
                            Zip::from(&mut out).and(&dh).and(&h).for_each(|o, &a, &b| {
                                *o = k * (d * a - sum_dh - b * sum_dhh);
                            });
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Embed { table, ids } => {
                    let mut d = Array2::zeros(self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if ng(p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if ng(p) {
                            acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SelectRows(a, rows) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::L2Normalize(a, norms) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut d = Array2::zeros(y.dim());
                    for (r, mut out) in d.outer_iter_mut().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.dot(&gr);
                        Zip::from(&mut out).and(&yr).and(&gr).for_each(|o, &y, &g| *o = (g - y * dot) / norms[r]);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let k = F::one() / F::from_usize(rows).unwrap();
                    let d = g.broadcast((rows, cols)).unwrap().mapv(|x| x * k);
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let mut d = probs.clone();
                    for (mut r, t) in d.outer_iter_mut().zip(targets) {
                        match t {
                            Some(t) => r[*t] = r[*t] - F::one(),
                            None => r.fill(F::zero()),
                        }
                    }
                    d *= g[[0, 0]];
                    acc(&mut grads, *logits, d);
                }
                Op::Gather(a, idx) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        d[[r, c]] = d[[r, c]] + g[[k, 0]];
                    }
                    acc(&mut grads, *a, d);
                }
            }
        }
        Backward { params, grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn rand_mat(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares analytic and central-difference gradients of `f` with
    /// respect to every parameter entry.
    fn check(params: &ParamSet<f64>, f: impl Fn(&mut Graph<f64>) -> Var) {
        let g = {
            let mut graph = Graph::new(params);
            let loss = f(&mut graph);
            graph.backward(loss).params
        };
        let h = 1e-6;
        for id in 0..params.len() {
            for idx in 0..params.get(id).len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    let t = p.get_mut(id);
                    let (r, c) = (idx / t.ncols(), idx % t.ncols());
                    t[[r, c]] += delta;
                    let mut graph = Graph::new(&p);
                    let l = f(&mut graph);
                    graph.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let t = params.get(id);
                let analytic = g.get(id).map(|a| a[[idx / t.ncols(), idx % t.ncols()]]).unwrap_or(0.0);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{}[{idx}]: analytic {analytic} numeric {numeric}", params.name(id));
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::default();
        let a = p.add("a", rand_mat(&mut rng, 4, 3));
        let b = p.add("b", rand_mat(&mut rng, 3, 3));
        let row = p.add("row", rand_mat(&mut rng, 1, 3));
        let gain = p.add("gain", rand_mat(&mut rng, 1, 3));
        let table = p.add("table", rand_mat(&mut rng, 5, 3));
        check(&p, |g| {
            let (a, b, row, gain, table) = (g.param(a), g.param(b), g.param(row), g.param(gain), g.param(table));
            let x = g.matmul(a, b);
            let x = g.add_row(x, row);
            let x = g.layer_norm(x, gain, row);
            let e = g.embed(table, &[0, 2, 2, 4]);
            let x = g.mul(x, e);
            let y = g.matmul_nt(x, e);
            let y = g.softmax(y, Mask::Causal);
            let y = g.matmul(y, x);
            let y = g.gelu(y);
            let z = g.sub(y, x);
            let z = g.abs(z);
            let z = g.scale(z, 0.7);
            let z = g.add(z, y);
            let l = g.l2_normalize(z);
            let c = g.concat_cols(&[l, x]);
            let c = g.slice_cols(c, 1, 5);
            let r = g.select_rows(c, &[3, 0, 3]);
            let m = g.mean_rows(r);
            let cr = g.concat_rows(&[m, c]);
            let logits = g.slice_cols(cr, 0, 3);
            let ce = g.cross_entropy(logits, &[Some(0), None, Some(2), Some(1), Some(1)]);
            let q = g.gather(cr, &[(0, 1), (2, 3), (0, 1)]);
            let q = g.sum_all(q);
            g.add(ce, q)
        });
    }

    #[test]
    fn segment_mask_blocks_cross_talk() {
        let p = ParamSet::<f64>::default();
        let mut g = Graph::new(&p);
        let x = g.input(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [5.0, 1.0, 1.0]], false);
        let seg = Arc::new(vec![0, 0, 1]);
        let y = g.softmax(x, Mask::Segments(seg));
        let v = g.value(y);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[2, 0]], 0.0);
        assert_eq!(v[[2, 2]], 1.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let p = ParamSet::<f64>::default();
        let mut g = Graph::new(&p);
        let x = g.input(Array2::zeros((4, 3)), false);
        let l = g.cross_entropy(x, &[Some(0), Some(1), Some(2), Some(0)]);
        assert!((g.scalar(l) - 4.0 * 3f64.ln()).abs() < 1e-12);
        let y = g.input(array![[0.0, -1000.0]], false);
        let l = g.cross_entropy(y, &[Some(1)]);
        assert!((g.scalar(l) + PROB_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(g.clamped, 1);
    }

    #[test]
    fn input_gradients_are_exposed() {
        let mut p = ParamSet::<f64>::default();
        let w = p.add("w", array![[2.0], [3.0]]);
        let mut g = Graph::new(&p);
        let x = g.input(array![[1.0, 1.0]], true);
        let w = g.param(w);
        let y = g.matmul(x, w);
        let back = g.backward(y);
        assert_eq!(back.input_grad(x).unwrap(), &array![[2.0, 3.0]]);
        assert_eq!(back.params.get(0).unwrap(), &array![[1.0], [1.0]]);
    }
}
