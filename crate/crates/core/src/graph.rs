//! A small reverse-mode automatic differentiation tape over 2-D `f64` matrices.
//!
//! Every tensor in the model is a matrix of `tokens × channels` (vectors are
//! `1 × n` rows), so the tape only needs a handful of row/column-oriented
//! operations. Parameters are pulled from a [`ParamStore`] by name; a parameter
//! only receives a gradient when the graph was opened in gradient mode and the
//! name is in the trainable set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sqrt(Var),
    QuickGelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Array1<f64>),
    SumAll(Var),
    AddN(Vec<Var>),
    Pick(Var, usize, usize),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Which parameters receive gradients.
#[derive(Clone)]
pub enum GradMode<'a> {
    Off,
    Trainable(&'a BTreeSet<String>),
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    mode: GradMode<'a>,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl<'a> Graph<'a> {
    /// Inference graph: nothing requires a gradient.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_mode(store, GradMode::Off)
    }

    pub fn with_mode(store: &'a ParamStore, mode: GradMode<'a>) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A parameter leaf. Repeated requests for the same name share one node.
    ///
    /// Panics when the store does not hold `name`; stores are validated when a
    /// model is assembled.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = self
            .store
            .get_arc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        let requires_grad = match &self.mode {
            GradMode::Off => false,
            GradMode::Trainable(set) => set.contains(name),
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the shape of a linear layer with `out × in` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `a` channel-wise by the `1 × n` row `s`.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s).0, 1, "mul_row: scale must be a single row");
        assert_eq!(self.shape(a).1, self.shape(s).1, "mul_row: width mismatch");
        let value = self.value(a) * self.value(s);
        let rg = self.rg(&[a, s]);
        self.push(value, Op::MulRow(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Shift(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Element-wise square root of a non-negative input. The derivative at
    /// zero is capped at `0.5 / sqrt(1e-12)`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0).sqrt());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sqrt(a), rg)
    }

    /// `x · σ(1.702 x)`, the activation used by CLIP towers.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(1.702 * x));
        let rg = self.rg(&[a]);
        self.push(value, Op::QuickGelu(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(self.shape(gamma), (1, cols), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, cols), "layer_norm: beta shape");
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..cols {
                xhat[[i, j]] = (row[j] - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// L2-normalizes every row. Rows of zero norm yield non-finite values;
    /// callers check norms first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut value = x.clone();
        for (mut row, n) in value.axis_iter_mut(Axis(0)).zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::NormalizeRows(a, norms), rg)
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Sum of equally shaped inputs.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: empty input");
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value += self.value(*p);
        }
        let rg = self.rg(parts);
        self.push(value, Op::AddN(parts.to_vec()), rg)
    }

    /// Entry `(row, col)` as a `1 × 1` matrix.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a)[[row, col]]);
        let rg = self.rg(&[a]);
        self.push(value, Op::Pick(a, row, col), rg)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar: not a 1x1 value");
        m[[0, 0]]
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let mut by_param = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                by_param.insert(name.clone(), g);
            }
        }
        Grads {
            nodes: grads,
            by_param,
        }
    }

    fn propagate(&self, node: &Node, gy: &Mat, grads: &mut [Option<Mat>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, gy.dot(&self.value(*b).t()));
                }
                if rg(*b) {
                    acc(*b, self.value(*a).t().dot(gy));
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    acc(*a, gy.dot(self.value(*b)));
                }
                if rg(*b) {
                    acc(*b, gy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, gy.clone());
                if rg(*row) {
                    acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                if rg(*b) {
                    acc(*b, -gy);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, gy * self.value(*b));
                }
                if rg(*b) {
                    acc(*b, gy * self.value(*a));
                }
            }
            Op::MulRow(a, s) => {
                if rg(*a) {
                    acc(*a, gy * self.value(*s));
                }
                if rg(*s) {
                    let prod = gy * self.value(*a);
                    acc(*s, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, gy * *c),
            Op::Shift(a) => acc(*a, gy.clone()),
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, Mat::from_shape_fn(gy.dim(), |ij| 0.5 * gy[ij] / y[ij].max(1e-6)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut g = gy.clone();
                g.zip_mut_with(x, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::QuickGelu(a) => {
                let x = self.value(*a);
                let mut g = gy.clone();
                g.zip_mut_with(x, |g, &x| {
                    let sg = sigmoid(1.702 * x);
                    *g *= sg + 1.702 * x * sg * (1.0 - sg);
                });
                acc(*a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Mat::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = gy.row(i);
                    let dot = yr.dot(&gr);
                    for j in 0..y.ncols() {
                        g[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if rg(*gamma) {
                    acc(*gamma, (gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*beta) {
                    acc(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let dxhat = gy * self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut g = Mat::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let mean_d = dr.sum() / cols;
                        let mean_dx = dr.dot(&xr) / cols;
                        for j in 0..xhat.ncols() {
                            g[[i, j]] = inv_std[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(*x, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if rg(*p) {
                        acc(*p, gy.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if rg(*p) {
                        acc(*p, gy.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Mat::zeros(self.shape(*a));
                let n = gy.nrows();
                g.slice_mut(s![*start..*start + n, ..]).assign(gy);
                acc(*a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Mat::zeros(self.shape(*a));
                let n = gy.ncols();
                g.slice_mut(s![.., *start..*start + n]).assign(gy);
                acc(*a, g);
            }
            Op::GatherRows(a, rows) => {
                let mut g = Mat::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(r);
                    dst += &gy.row(k);
                }
                acc(*a, g);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut g = Mat::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot = y.row(i).dot(&gy.row(i));
                    for j in 0..y.ncols() {
                        g[[i, j]] = (gy[[i, j]] - y[[i, j]] * dot) / norms[i];
                    }
                }
                acc(*a, g);
            }
            Op::SumAll(a) => acc(*a, Mat::from_elem(self.shape(*a), gy[[0, 0]])),
            Op::AddN(parts) => {
                for p in parts {
                    acc(*p, gy.clone());
                }
            }
            Op::Pick(a, r, c) => {
                let mut g = Mat::zeros(self.shape(*a));
                g[[*r, *c]] = gy[[0, 0]];
                acc(*a, g);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    by_param: BTreeMap<String, Mat>,
}

impl Grads {
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.by_param
    }

    /// Gradient of a non-parameter node, if it required one.
    pub fn node(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(f)/d(param) for every entry of every
    /// parameter in `store`.
    fn check<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let names: BTreeSet<String> = store.names().map(str::to_string).collect();
        let g = {
            let mut g = Graph::with_mode(store, GradMode::Trainable(&names));
            let out = f(&mut g);
            g.backward(out).into_params()
        };
        let h = 1e-6;
        for name in &names {
            let base = store.get(name).unwrap().clone();
            let analytic = &g[name];
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    let mut m = base.clone();
                    m[[r, c]] += delta;
                    s.insert(name, m);
                    let mut g = Graph::new(&s);
                    let out = f(&mut g);
                    g.scalar(out)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[r, c]];
                let scale = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / scale < 1e-5,
                    "{name}[{r},{c}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        store.insert("a", random(&mut rng, 3, 4));
        store.insert("w", random(&mut rng, 5, 4));
        store.insert("b", random(&mut rng, 1, 5));
        store.insert("s", random(&mut rng, 1, 5));
        store.insert("m", random(&mut rng, 5, 2));
        check(&store, |g| {
            let a = g.param("a");
            let w = g.param("w");
            let b = g.param("b");
            let s = g.param("s");
            let m = g.param("m");
            let y = g.matmul_t(a, w);
            let y = g.add_row(y, b);
            let y = g.mul_row(y, s);
            let z = g.matmul(y, m);
            let z = g.quick_gelu(z);
            let t = g.scale(z, 0.7);
            let t = g.shift(t, 0.1);
            let u = g.mul(t, z);
            let v = g.sub(u, z);
            g.sum_all(v)
        });
    }

    #[test]
    fn layer_norm_softmax_normalize_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        store.insert("x", random(&mut rng, 4, 6));
        store.insert("g", random(&mut rng, 1, 6));
        store.insert("b", random(&mut rng, 1, 6));
        store.insert("k", random(&mut rng, 4, 6));
        check(&store, |g| {
            let x = g.param("x");
            let gam = g.param("g");
            let bet = g.param("b");
            let k = g.param("k");
            let y = g.layer_norm(x, gam, bet, 1e-5);
            let att = g.matmul_t(y, k);
            let p = g.softmax_rows(att, true);
            let q = g.softmax_rows(att, false);
            let pq = g.add(p, q);
            let o = g.matmul(pq, y);
            let n = g.normalize_rows(o);
            let w = g.mul(n, y);
            g.sum_all(w)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        store.insert("a", random(&mut rng, 3, 4));
        store.insert("b", random(&mut rng, 2, 4));
        store.insert("c", random(&mut rng, 5, 3));
        check(&store, |g| {
            let a = g.param("a");
            let b = g.param("b");
            let c = g.param("c");
            let ab = g.concat_rows(&[a, b]);
            let abc = g.concat_cols(&[ab, c]);
            let sl = g.slice_rows(abc, 1, 3);
            let sc = g.slice_cols(sl, 2, 4);
            let ga = g.gather_rows(abc, &[4, 0, 0]);
            let gs = g.slice_cols(ga, 3, 4);
            let r = g.relu(gs);
            let p1 = g.pick(sc, 2, 1);
            let p2 = g.pick(r, 0, 3);
            let t = g.sum_all(r);
            let total = g.add_n(&[p1, p2, t]);
            let sq = g.mul(total, total);
            g.add(sq, p1)
        });
    }

    #[test]
    fn sqrt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        store.insert("a", random(&mut rng, 3, 3).mapv(|v| v.abs() + 0.2));
        check(&store, |g| {
            let a = g.param("a");
            let r = g.sqrt(a);
            let r = g.mul(r, a);
            g.sum_all(r)
        });
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::default();
        store.insert("train", array![[1.0, 2.0]]);
        store.insert("frozen", array![[3.0, 4.0]]);
        let set: BTreeSet<String> = ["train".to_string()].into();
        let mut g = Graph::with_mode(&store, GradMode::Trainable(&set));
        let a = g.param("train");
        let b = g.param("frozen");
        assert!(!g.requires_grad(b));
        let y = g.mul(a, b);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert_eq!(grads.param("train").unwrap(), &array![[3.0, 4.0]]);
        assert!(grads.param("frozen").is_none());
    }

    #[test]
    fn causal_softmax_masks_future_positions() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0, 5.0, 2.0], [0.0, 0.0, 9.0], [1.0, 1.0, 1.0]]);
        let y = g.softmax_rows(x, true);
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((v.row(2).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::default();
        store.insert("p", array![[2.0]]);
        let set: BTreeSet<String> = ["p".to_string()].into();
        let mut g = Graph::with_mode(&store, GradMode::Trainable(&set));
        let a = g.param("p");
        let b = g.param("p");
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param("p").unwrap()[[0, 0]], 4.0);
    }
}
