//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied, so building a tape over a
//! large model is cheap. Calling [`Tape::backward`] on a 1×1 node returns the
//! gradient of that scalar with respect to every node and every parameter.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{axpy, c, dot, Scalar};

/// Named collection of parameter tensors stored as `rows × cols` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<T>) -> ParamId {
        assert_eq!(rows * cols, values.len(), "parameter shape/length mismatch");
        self.names.push(name.into());
        self.shapes.push((rows, cols));
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Constant sparse matrix in compressed-row form (`rows × cols`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Build from per-row `(column, value)` entries.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for r in &rows {
            for &(j, v) in r {
                assert!(j < cols, "sparse column out of range");
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn from_dense(rows: usize, cols: usize, dense: &[T]) -> Self {
        let entries = (0..rows)
            .map(|r| {
                (0..cols)
                    .filter_map(|j| {
                        let v = dense[r * cols + j];
                        (v != T::zero()).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `y = M x`
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        for r in 0..self.rows {
            let mut s = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = s;
        }
    }

    /// `x_grad += Mᵀ g`
    pub fn apply_transpose_acc(&self, g: &[T], x_grad: &mut [T]) {
        for r in 0..self.rows {
            let gr = g[r];
            if gr == T::zero() {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                x_grad[self.col_idx[k]] += self.vals[k] * gr;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    LinComb(Var, T, Var, T),
    Scale(Var, T),
    /// Row `r` scaled by the constant `k[r]`.
    ScaleRows(Var, Vec<T>),
    /// Every row multiplied elementwise by the single row `g`.
    MulRow(Var, Var),
    AddConst(Var, T),
    /// `x (r×in) · wᵀ (in×out) + b (1×out)`
    Linear { x: Var, w: Var, b: Option<Var> },
    /// Per-row constant sparse map applied to each row of `x`.
    ConstLinear { x: Var, m: Arc<SparseMatrix<T>> },
    ConcatCols(Vec<Var>),
    /// Row `i` is the mean of `table` rows listed in `ids[i]`.
    EmbedMean { table: Var, ids: Vec<Vec<usize>> },
    Gelu(Var),
    Clamp01(Var),
    Softplus(Var, T),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    /// Scalar / scalar.
    Div(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node and parameter.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a tape node, zeros if it did not influence the output.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<T> {
        self.nodes[v.0].clone().unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Add these parameter gradients into `acc`, scaled by `weight`.
    pub fn accumulate_into(&self, acc: &mut [Vec<T>], weight: T) {
        for (a, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                axpy(weight, g, a);
            }
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let a: T = c(0.044715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let val = half * x * (T::one() + th);
    let dinner = k * (T::one() + three * a * x * x);
    let der = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (val, der)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

fn softplus_parts<T: Scalar>(x: T, kappa: T) -> (T, T) {
    let u = kappa * x;
    // numerically stable log(1 + e^u) / kappa
    let val = if u > T::zero() {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    } / kappa;
    let sig = T::one() / (T::one() + (-u).exp());
    (val, sig)
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || rows * cols == value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn row(&mut self, value: Vec<T>) -> Var {
        let n = value.len();
        self.leaf(1, n, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (r, cl) = self.params.shape(id);
        self.push(r, cl, Vec::new(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Invalid(format!(
                "{what}: operand shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, cl) = self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(r, cl, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, cl) = self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(r, cl, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, cl) = self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(r, cl, v, Op::Mul(a, b)))
    }

    /// `alpha * a + beta * b`
    pub fn lincomb(&mut self, a: Var, alpha: T, b: Var, beta: T) -> Result<Var> {
        let (r, cl) = self.same_shape(a, b, "lincomb")?;
        let v = self.zip_map(a, b, |x, y| alpha * x + beta * y);
        Ok(self.push(r, cl, v, Op::LinComb(a, alpha, b, beta)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| k * x);
        self.push(r, cl, v, Op::Scale(a, k))
    }

    pub fn scale_rows(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        let (r, cl) = self.shape(a);
        if k.len() != r {
            return Err(Error::Invalid("scale_rows: one factor per row".into()));
        }
        let v = self
            .value(a)
            .chunks(cl)
            .zip(&k)
            .flat_map(|(row, &kr)| row.iter().map(move |&x| kr * x))
            .collect();
        Ok(self.push(r, cl, v, Op::ScaleRows(a, k)))
    }

    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        let (r, cl) = self.shape(a);
        if self.shape(g) != (1, cl) {
            return Err(Error::Invalid(format!("mul_row: gain must be (1, {cl})")));
        }
        let gv = self.value(g);
        let v = self
            .value(a)
            .chunks(cl)
            .flat_map(|row| row.iter().zip(gv).map(|(&x, &w)| x * w))
            .collect();
        Ok(self.push(r, cl, v, Op::MulRow(a, g)))
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| x + k);
        self.push(r, cl, v, Op::AddConst(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Affine layer: `x · wᵀ + b` where `w` is `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = self.shape(x);
        let (out, win) = self.shape(w);
        if win != inp {
            return Err(Error::Invalid(format!(
                "linear: input width {inp} does not match weight width {win}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, out) {
                return Err(Error::Invalid(format!(
                    "linear: bias shape {:?} should be (1, {out})",
                    self.shape(b)
                )));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![T::zero(); rows * out];
        for o in 0..out {
            let wrow = &wv[o * inp..(o + 1) * inp];
            for r in 0..rows {
                y[r * out + o] = dot(wrow, &xv[r * inp..(r + 1) * inp]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                for o in 0..out {
                    y[r * out + o] += bv[o];
                }
            }
        }
        Ok(self.push(rows, out, y, Op::Linear { x, w, b }))
    }

    pub fn const_linear(&mut self, x: Var, m: Arc<SparseMatrix<T>>) -> Result<Var> {
        let (rows, inp) = self.shape(x);
        if inp != m.cols() {
            return Err(Error::Invalid(format!(
                "const_linear: input width {inp} does not match matrix width {}",
                m.cols()
            )));
        }
        let out = m.rows();
        let xv = self.value(x);
        let mut y = vec![T::zero(); rows * out];
        for r in 0..rows {
            m.apply(&xv[r * inp..(r + 1) * inp], &mut y[r * out..(r + 1) * out]);
        }
        Ok(self.push(rows, out, y, Op::ConstLinear { x, m }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Invalid("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.shape(p).1;
                y.extend_from_slice(&self.value(p)[r * pc..(r + 1) * pc]);
            }
        }
        Ok(self.push(rows, cols, y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let (vocab, dim) = self.shape(table);
        let tv = self.value(table);
        let mut y = vec![T::zero(); ids.len() * dim];
        for (r, row_ids) in ids.iter().enumerate() {
            if row_ids.is_empty() {
                return Err(Error::Invalid("embed_mean: empty token list".into()));
            }
            let w = T::one() / c::<T>(row_ids.len() as f64);
            // sorted so the pooled value does not depend on token order
            let mut sorted = row_ids.clone();
            sorted.sort_unstable();
            for &id in &sorted {
                if id >= vocab {
                    return Err(Error::UnknownToken(id));
                }
                axpy(w, &tv[id * dim..(id + 1) * dim], &mut y[r * dim..(r + 1) * dim]);
            }
        }
        let rows = ids.len();
        Ok(self.push(rows, dim, y, Op::EmbedMean { table, ids }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, gelu);
        self.push(r, cl, v, Op::Gelu(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| x.max(T::zero()).min(T::one()));
        self.push(r, cl, v, Op::Clamp01(a))
    }

    /// `log(1 + exp(kappa x)) / kappa`
    pub fn softplus(&mut self, a: Var, kappa: T) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| softplus_parts(x, kappa).0);
        self.push(r, cl, v, Op::Softplus(a, kappa))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| x * x);
        self.push(r, cl, v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let (r, cl) = self.shape(a);
        let v = self.map(a, |x| x.sqrt());
        self.push(r, cl, v, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = c::<T>(v.len() as f64);
        let s = v.iter().fold(T::zero(), |acc, &x| acc + x) / n;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Inner product over all elements.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Invalid("dot: lengths differ".into()));
        }
        let s = dot(self.value(a), self.value(b));
        Ok(self.push(1, 1, vec![s], Op::Dot(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != (1, 1) || self.shape(b) != (1, 1) {
            return Err(Error::Invalid("div: operands must be scalars".into()));
        }
        let v = self.scalar(a) / self.scalar(b);
        Ok(self.push(1, 1, vec![v], Op::Div(a, b)))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut pgrads: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        grads[out.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
            slot.get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let len = g.len();
                    let slot = acc(&mut pgrads[id.0], len);
                    for (s, &gi) in slot.iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let len = g.len();
                        axpy(T::one(), &g, acc(&mut grads[v.0], len));
                    }
                }
                Op::Sub(a, b) => {
                    let len = g.len();
                    axpy(T::one(), &g, acc(&mut grads[a.0], len));
                    axpy(-T::one(), &g, acc(&mut grads[b.0], len));
                }
                Op::Mul(a, b) => {
                    let len = g.len();
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let ga = acc(&mut grads[a.0], len);
                    for k in 0..len {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = acc(&mut grads[b.0], len);
                    for k in 0..len {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::LinComb(a, alpha, b, beta) => {
                    let len = g.len();
                    axpy(*alpha, &g, acc(&mut grads[a.0], len));
                    axpy(*beta, &g, acc(&mut grads[b.0], len));
                }
                Op::Scale(a, k) => {
                    let len = g.len();
                    axpy(*k, &g, acc(&mut grads[a.0], len));
                }
                Op::ScaleRows(a, k) => {
                    let len = g.len();
                    let cl = node.cols;
                    let ga = acc(&mut grads[a.0], len);
                    for (r, &kr) in k.iter().enumerate() {
                        axpy(kr, &g[r * cl..(r + 1) * cl], &mut ga[r * cl..(r + 1) * cl]);
                    }
                }
                Op::MulRow(a, w) => {
                    let cl = node.cols;
                    let av = self.value(*a);
                    let wv = self.value(*w);
                    {
                        let ga = acc(&mut grads[a.0], g.len());
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] += *gi * wv[i % cl];
                        }
                    }
                    let gw = acc(&mut grads[w.0], cl);
                    for (i, gi) in g.iter().enumerate() {
                        gw[i % cl] += *gi * av[i];
                    }
                }
                Op::AddConst(a, _) => {
                    let len = g.len();
                    axpy(T::one(), &g, acc(&mut grads[a.0], len));
                }
                Op::Linear { x, w, b } => {
                    let (rows, inp) = self.shape(*x);
                    let out_w = node.cols;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    {
                        let gx = acc(&mut grads[x.0], rows * inp);
                        for o in 0..out_w {
                            let wrow = &wv[o * inp..(o + 1) * inp];
                            for r in 0..rows {
                                let go = g[r * out_w + o];
                                if go != T::zero() {
                                    axpy(go, wrow, &mut gx[r * inp..(r + 1) * inp]);
                                }
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads[w.0], out_w * inp);
                        for o in 0..out_w {
                            let gwrow = &mut gw[o * inp..(o + 1) * inp];
                            for r in 0..rows {
                                let go = g[r * out_w + o];
                                if go != T::zero() {
                                    axpy(go, &xv[r * inp..(r + 1) * inp], gwrow);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = acc(&mut grads[b.0], out_w);
                        for r in 0..rows {
                            axpy(T::one(), &g[r * out_w..(r + 1) * out_w], gb);
                        }
                    }
                }
                Op::ConstLinear { x, m } => {
                    let (rows, inp) = self.shape(*x);
                    let out_w = node.cols;
                    let gx = acc(&mut grads[x.0], rows * inp);
                    for r in 0..rows {
                        m.apply_transpose_acc(
                            &g[r * out_w..(r + 1) * out_w],
                            &mut gx[r * inp..(r + 1) * inp],
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let gp = acc(&mut grads[p.0], rows * pc);
                        for r in 0..rows {
                            axpy(
                                T::one(),
                                &g[r * total + off..r * total + off + pc],
                                &mut gp[r * pc..(r + 1) * pc],
                            );
                        }
                        off += pc;
                    }
                }
                Op::EmbedMean { table, ids } => {
                    let (vocab, dim) = self.shape(*table);
                    let gt = acc(&mut grads[table.0], vocab * dim);
                    for (r, row_ids) in ids.iter().enumerate() {
                        let w = T::one() / c::<T>(row_ids.len() as f64);
                        for &id in row_ids {
                            axpy(w, &g[r * dim..(r + 1) * dim], &mut gt[id * dim..(id + 1) * dim]);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let d: Vec<T> = av.iter().zip(&g).map(|(&x, &gi)| gi * gelu_parts(x).1).collect();
                    let len = d.len();
                    axpy(T::one(), &d, acc(&mut grads[a.0], len));
                }
                Op::Clamp01(a) => {
                    let av = self.value(*a);
                    let d: Vec<T> = av
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| if x > T::zero() && x < T::one() { gi } else { T::zero() })
                        .collect();
                    let len = d.len();
                    axpy(T::one(), &d, acc(&mut grads[a.0], len));
                }
                Op::Softplus(a, kappa) => {
                    let av = self.value(*a);
                    let d: Vec<T> = av
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| gi * softplus_parts(x, *kappa).1)
                        .collect();
                    let len = d.len();
                    axpy(T::one(), &d, acc(&mut grads[a.0], len));
                }
                Op::Square(a) => {
                    let two: T = c(2.0);
                    let av = self.value(*a);
                    let d: Vec<T> = av.iter().zip(&g).map(|(&x, &gi)| two * x * gi).collect();
                    let len = d.len();
                    axpy(T::one(), &d, acc(&mut grads[a.0], len));
                }
                Op::Sqrt(a) => {
                    let two: T = c(2.0);
                    let d: Vec<T> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gi)| if y > T::zero() { gi / (two * y) } else { T::zero() })
                        .collect();
                    let len = d.len();
                    axpy(T::one(), &d, acc(&mut grads[a.0], len));
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let ga = acc(&mut grads[a.0], len);
                    for s in ga.iter_mut() {
                        *s += g[0];
                    }
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    let w = g[0] / c::<T>(len as f64);
                    let ga = acc(&mut grads[a.0], len);
                    for s in ga.iter_mut() {
                        *s += w;
                    }
                }
                Op::Dot(a, b) => {
                    let len = self.value(*a).len();
                    let bv = self.value(*b);
                    axpy(g[0], bv, acc(&mut grads[a.0], len));
                    let av = self.value(*a);
                    axpy(g[0], av, acc(&mut grads[b.0], len));
                }
                Op::Div(a, b) => {
                    let bv = self.scalar(*b);
                    let y = node.value[0];
                    acc(&mut grads[a.0], 1)[0] += g[0] / bv;
                    acc(&mut grads[b.0], 1)[0] -= g[0] * y / bv;
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (num - analytic[i]).abs() / denom < 1e-5,
                "coord {i}: numeric {num} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn row_scaling_ops_match_finite_differences() {
        let params = ParamSet::<f64>::new();
        // x is 2×3; the first three coordinates double as the row gain
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(&params);
            let v = tape.leaf(2, 3, x[..6].to_vec());
            let g = tape.leaf(1, 3, x[6..].to_vec());
            let a = tape.scale_rows(v, vec![0.5, -1.5]).unwrap();
            let b = tape.mul_row(a, g).unwrap();
            let q = tape.square(b);
            let out = tape.sum(q);
            let grads = tape.backward(out);
            let mut all = grads.wrt(v, 6);
            all.extend(grads.wrt(g, 3));
            (tape.scalar(out), all)
        };
        let x = [0.3, -0.8, 1.7, 0.55, 0.1, -0.4, 1.2, -0.7, 0.9];
        let (_, g) = eval(&x);
        fd_check(|x| eval(x).0, &x, &g);
        let mut tape = Tape::new(&params);
        let v = tape.leaf(2, 3, vec![0.0; 6]);
        assert!(tape.scale_rows(v, vec![1.0]).is_err());
        let g = tape.row(vec![1.0; 2]);
        assert!(tape.mul_row(v, g).is_err());
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let params = ParamSet::<f64>::new();
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(&params);
            let v = tape.row(x.to_vec());
            let g = tape.gelu(v);
            let s = tape.softplus(g, 3.0);
            let q = tape.square(s);
            let cl = tape.clamp01(v);
            let m = tape.mul(q, cl).unwrap();
            let l = tape.lincomb(m, 0.7, v, -0.2).unwrap();
            let out = tape.sum(l);
            let grads = tape.backward(out);
            (tape.scalar(out), grads.wrt(v, x.len()))
        };
        let x = [0.3, -0.8, 1.7, 0.55, 0.1];
        let (_, g) = eval(&x);
        fd_check(|x| eval(x).0, &x, &g);
    }

    #[test]
    fn linear_and_cosine_match_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let w = params.push("w", 3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = params.push("b", 1, 3, vec![0.1, -0.2, 0.05]);
        let x0 = [0.2, -0.4, 0.9, 1.1, -0.3, 0.5, 0.7, -0.6];
        let eval = |x: &[f64], params: &ParamSet<f64>| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new(params);
            let xv = tape.leaf(2, 4, x.to_vec());
            let wv = tape.param(w);
            let bv = tape.param(b);
            let y = tape.linear(xv, wv, Some(bv)).unwrap();
            let target = tape.row(vec![0.3, 0.1, -0.2, 0.4, 0.0, 0.6]);
            let y6 = tape.concat_cols(&[y]).unwrap();
            let d = tape.dot(y6, target).unwrap();
            let ny = tape.dot(y6, y6).unwrap();
            let nys = tape.sqrt(ny);
            let cos = tape.div(d, nys).unwrap();
            let grads = tape.backward(cos);
            (
                tape.scalar(cos),
                grads.wrt(xv, 8),
                grads.param(w).unwrap().to_vec(),
            )
        };
        let (_, gx, gw) = eval(&x0, &params);
        fd_check(|x| eval(x, &params).0, &x0, &gx);
        let wvals = params.get(w).to_vec();
        fd_check(
            |wv| {
                let mut p = params.clone();
                p.get_mut(w).copy_from_slice(wv);
                eval(&x0, &p).0
            },
            &wvals,
            &gw,
        );
    }

    #[test]
    fn embed_mean_and_const_linear_gradients() {
        let mut params = ParamSet::<f64>::new();
        let table = params.push("table", 4, 3, (0..12).map(|i| (i as f64 * 0.61).cos()).collect());
        let m = Arc::new(SparseMatrix::from_rows(
            3,
            vec![vec![(0, 1.0), (2, -0.5)], vec![(1, 2.0)]],
        ));
        let eval = |p: &ParamSet<f64>| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(p);
            let t = tape.param(table);
            let e = tape.embed_mean(t, vec![vec![0, 2, 2], vec![3]]).unwrap();
            let y = tape.const_linear(e, m.clone()).unwrap();
            let s = tape.square(y);
            let out = tape.mean(s);
            let grads = tape.backward(out);
            (tape.scalar(out), grads.param(table).unwrap().to_vec())
        };
        let (_, g) = eval(&params);
        // row 1 (never referenced) gets zero gradient
        assert!(g[3..6].iter().all(|&v| v == 0.0));
        let vals = params.get(table).to_vec();
        fd_check(
            |v| {
                let mut p = params.clone();
                p.get_mut(table).copy_from_slice(v);
                eval(&p).0
            },
            &vals,
            &g,
        );
    }

    #[test]
    fn shape_errors_are_reported() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let a = tape.row(vec![1.0, 2.0]);
        let b = tape.row(vec![1.0, 2.0, 3.0]);
        assert!(tape.add(a, b).is_err());
        let t = tape.leaf(2, 2, vec![0.0; 4]);
        assert!(matches!(
            tape.embed_mean(t, vec![vec![5]]),
            Err(Error::UnknownToken(5))
        ));
    }

    #[test]
    fn sparse_from_dense_round_trip() {
        let dense = [1.0, 0.0, 2.0, 0.0, 0.0, 3.0];
        let m = SparseMatrix::from_dense(2, 3, &dense);
        let mut y = [0.0; 2];
        m.apply(&[1.0, 1.0, 1.0], &mut y);
        assert_eq!(y, [3.0, 3.0]);
    }
}
