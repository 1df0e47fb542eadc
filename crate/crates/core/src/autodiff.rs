//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every value on the tape is a 2-D `f64` matrix; vectors are stored as
//! `[1 × n]` rows. Ops are recorded in evaluation order and `backward` walks
//! them in reverse, accumulating adjoints. Graph-specific kernels (edge
//! scoring, segment softmax, neighbourhood aggregation) and the symmetric
//! eigendecomposition are fused ops with hand-written adjoints.

use std::sync::Arc;

use ndarray::{s, Array1, Axis};

use crate::error::Result;
use crate::linalg;
use crate::params::{Mat, ParamGrads, ParamId, ParamStore, EMPTY_STORE};

/// Eigenvector adjoint terms with an eigenvalue gap below this are dropped.
pub const EIGEN_GAP_CUTOFF: f64 = 1e-6;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Directed message edges `center ← neighbour`, grouped by center node.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    pub n: usize,
    pub center: Vec<usize>,
    pub neighbor: Vec<usize>,
    /// `row_ptr[i]..row_ptr[i+1]` are the edges centred on node `i`.
    pub row_ptr: Vec<usize>,
}

impl EdgeIndex {
    /// Build from `(center, neighbour)` pairs; duplicates are removed.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(c, _) in &pairs {
            row_ptr[c + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let (center, neighbor) = pairs.into_iter().unzip();
        Self {
            n,
            center,
            neighbor,
            row_ptr,
        }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn edges_of(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    LnFloor(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    StopGrad,
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RowNormalize(Var),
    EmbedMean {
        table: ParamId,
        tokens: Vec<Vec<usize>>,
    },
    EmbedRows {
        table: ParamId,
        ids: Vec<Option<usize>>,
    },
    EdgeScores {
        p: Var,
        q: Var,
        b: Var,
        slope: f64,
        edges: Arc<EdgeIndex>,
    },
    SegmentSoftmax {
        e: Var,
        edges: Arc<EdgeIndex>,
    },
    EdgeAggregate {
        a: Var,
        m: Var,
        edges: Arc<EdgeIndex>,
    },
    EdgeColumnSum {
        a: Var,
        edges: Arc<EdgeIndex>,
    },
    LogDistanceSums {
        p: Var,
        eps: f64,
    },
    SymEigen(Var),
    BinaryCrossEntropy {
        p: Var,
        target: f64,
        clamp: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    pub params: ParamGrads,
}

impl Grads {
    /// Adjoint of a tape node, `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a node, zeros when absent.
    pub fn wrt_or_zero(&self, tape: &Tape<'_>, v: Var) -> Mat {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(tape.value(v).raw_dim()))
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

fn softmax_row_inplace(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.mapv_inplace(|v| v / z);
}

impl Tape<'static> {
    /// A tape without trainable parameters, for standalone operator use.
    pub fn detached() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `[1 × 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Input leaf. Its adjoint is available through [`Grads::wrt`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row_vector(&mut self, values: &[f64]) -> Var {
        let m = Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.leaf(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} by {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + 1ᵀ row` with `row` of shape `[1 × cols(a)]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row shape");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| leaky(x, slope));
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// `ln(max(a, floor))`; no gradient flows where the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(v, Op::LnFloor(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for row in v.rows_mut() {
            softmax_row_inplace(row);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Divide each row by its ℓ2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|x| x / norm);
            }
        }
        self.push(v, Op::RowNormalize(a))
    }

    /// Row `i` = mean of `table[t]` over `tokens[i]` (zero for an empty list).
    pub fn embed_mean(&mut self, table: ParamId, tokens: Vec<Vec<usize>>) -> Var {
        let t = self.params.get(table);
        let d = t.ncols();
        let mut v = Mat::zeros((tokens.len(), d));
        for (i, toks) in tokens.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let mut row = v.row_mut(i);
            for &tok in toks {
                row += &t.row(tok);
            }
            row /= toks.len() as f64;
        }
        self.push(v, Op::EmbedMean { table, tokens })
    }

    /// Row `i` = `table[ids[i]]`, zero for `None`.
    pub fn embed_rows(&mut self, table: ParamId, ids: Vec<Option<usize>>) -> Var {
        let t = self.params.get(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, id) in ids.iter().enumerate() {
            if let Some(tok) = id {
                v.row_mut(i).assign(&t.row(*tok));
            }
        }
        self.push(v, Op::EmbedRows { table, ids })
    }

    /// `e_k = b · LeakyReLU(p[center_k] + q[neighbor_k])` as a `[1 × E]` row.
    pub fn edge_scores(&mut self, p: Var, q: Var, b: Var, slope: f64, edges: Arc<EdgeIndex>) -> Var {
        let (pv, qv, bv) = (self.value(p), self.value(q), self.value(b));
        assert_eq!(pv.dim(), qv.dim(), "edge_scores p/q");
        assert_eq!(bv.dim(), (1, pv.ncols()), "edge_scores b");
        let b_row = bv.row(0);
        let mut out = Mat::zeros((1, edges.len()));
        for k in 0..edges.len() {
            let (i, j) = (edges.center[k], edges.neighbor[k]);
            let pi = pv.row(i);
            let qj = qv.row(j);
            let mut acc = 0.0;
            for c in 0..pv.ncols() {
                acc += b_row[c] * leaky(pi[c] + qj[c], slope);
            }
            out[[0, k]] = acc;
        }
        self.push(out, Op::EdgeScores { p, q, b, slope, edges })
    }

    /// Softmax of a `[1 × E]` row within each center's edge group.
    pub fn segment_softmax(&mut self, e: Var, edges: Arc<EdgeIndex>) -> Var {
        let mut v = self.value(e).clone();
        for i in 0..edges.n {
            let r = edges.edges_of(i);
            if !r.is_empty() {
                softmax_row_inplace(v.slice_mut(s![0, r]));
            }
        }
        self.push(v, Op::SegmentSoftmax { e, edges })
    }

    /// `out[i] = Σ_{k: center_k = i} a_k · m[neighbor_k]`.
    pub fn edge_aggregate(&mut self, a: Var, m: Var, edges: Arc<EdgeIndex>) -> Var {
        let (av, mv) = (self.value(a), self.value(m));
        let mut out = Mat::zeros((edges.n, mv.ncols()));
        for k in 0..edges.len() {
            let w = av[[0, k]];
            let src = mv.row(edges.neighbor[k]);
            out.row_mut(edges.center[k]).scaled_add(w, &src);
        }
        self.push(out, Op::EdgeAggregate { a, m, edges })
    }

    /// `w[j] = Σ_{k: neighbor_k = j} a_k` as a `[1 × n]` row.
    pub fn edge_column_sum(&mut self, a: Var, edges: Arc<EdgeIndex>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros((1, edges.n));
        for k in 0..edges.len() {
            out[[0, edges.neighbor[k]]] += av[[0, k]];
        }
        self.push(out, Op::EdgeColumnSum { a, edges })
    }

    /// For rows `p_i` of an `[m × d]` input: `Ls_i = Σ_{j≠i} ln max(‖p_i − p_j‖₂, eps)`, as `[1 × m]`.
    pub fn log_distance_sums(&mut self, p: Var, eps: f64) -> Var {
        let pv = self.value(p);
        let m = pv.nrows();
        let mut out = Mat::zeros((1, m));
        for i in 0..m {
            for j in (i + 1)..m {
                let diff = &pv.row(i) - &pv.row(j);
                let l = diff.dot(&diff).sqrt().max(eps).ln();
                out[[0, i]] += l;
                out[[0, j]] += l;
            }
        }
        self.push(out, Op::LogDistanceSums { p, eps })
    }

    /// Symmetric eigendecomposition. The result is `[K × (K+1)]`: column 0
    /// holds eigenvalues (descending), columns `1..=K` the sign-normalised
    /// eigenvectors.
    pub fn sym_eigen(&mut self, a: Var) -> Result<Var> {
        let e = linalg::sym_eigen(self.value(a))?;
        let k = e.values.len();
        let mut out = Mat::zeros((k, k + 1));
        out.column_mut(0).assign(&e.values);
        out.slice_mut(s![.., 1..]).assign(&e.vectors);
        Ok(self.push(out, Op::SymEigen(a)))
    }

    /// `−[y ln p₁ + (1−y) ln p₀]` for a `[1 × 2]` probability row, with `p`
    /// clamped to `[clamp, 1 − clamp]`.
    pub fn binary_cross_entropy(&mut self, p: Var, target: f64, clamp: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), (1, 2), "binary_cross_entropy expects [1 x 2]");
        let p0 = pv[[0, 0]].clamp(clamp, 1.0 - clamp);
        let p1 = pv[[0, 1]].clamp(clamp, 1.0 - clamp);
        let loss = -(target * p1.ln() + (1.0 - target) * p0.ln());
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::BinaryCrossEntropy { p, target, clamp },
        )
    }

    /// Reverse sweep from a `[1 × 1]` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        self.backward_with(output, Mat::from_elem((1, 1), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary adjoint for `output`.
    pub fn backward_with(&self, output: Var, seed: Mat) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut params = ParamGrads::new(self.params.len());
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Param(id) => params.add_dense(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= leaky_grad(x, *slope));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= x.signum() * (x != 0.0) as u8 as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::LnFloor(a, floor) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv = if x > *floor { *gv / x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let z = &node.value;
                    let mut ga = Mat::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).dot(&x.row(r)).sqrt();
                        if norm > 0.0 {
                            let dot = g.row(r).dot(&z.row(r));
                            let row = (&g.row(r) - &(&z.row(r) * dot)) / norm;
                            ga.row_mut(r).assign(&row);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::EmbedMean { table, tokens } => {
                    for (i, toks) in tokens.iter().enumerate() {
                        if toks.is_empty() {
                            continue;
                        }
                        let row = g.row(i).mapv(|v| v / toks.len() as f64);
                        for &tok in toks {
                            params.add_row(*table, tok, row.view());
                        }
                    }
                }
                Op::EmbedRows { table, ids } => {
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(tok) = id {
                            params.add_row(*table, *tok, g.row(i));
                        }
                    }
                }
                Op::EdgeScores { p, q, b, slope, edges } => {
                    let (pv, qv, bv) = (self.value(*p), self.value(*q), self.value(*b));
                    let d = pv.ncols();
                    let mut gp = Mat::zeros(pv.raw_dim());
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gb = Array1::<f64>::zeros(d);
                    for k in 0..edges.len() {
                        let ge = g[[0, k]];
                        if ge == 0.0 {
                            continue;
                        }
                        let (i, j) = (edges.center[k], edges.neighbor[k]);
                        for c in 0..d {
                            let z = pv[[i, c]] + qv[[j, c]];
                            let dz = ge * bv[[0, c]] * leaky_grad(z, *slope);
                            gp[[i, c]] += dz;
                            gq[[j, c]] += dz;
                            gb[c] += ge * leaky(z, *slope);
                        }
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *b, gb.insert_axis(Axis(0)));
                }
                Op::SegmentSoftmax { e, edges } => {
                    let y = &node.value;
                    let mut ge = g;
                    for i in 0..edges.n {
                        let r = edges.edges_of(i);
                        let dot: f64 = r.clone().map(|k| ge[[0, k]] * y[[0, k]]).sum();
                        for k in r {
                            ge[[0, k]] = y[[0, k]] * (ge[[0, k]] - dot);
                        }
                    }
                    acc(&mut grads, *e, ge);
                }
                Op::EdgeAggregate { a, m, edges } => {
                    let (av, mv) = (self.value(*a), self.value(*m));
                    let mut ga = Mat::zeros(av.raw_dim());
                    let mut gm = Mat::zeros(mv.raw_dim());
                    for k in 0..edges.len() {
                        let (i, j) = (edges.center[k], edges.neighbor[k]);
                        ga[[0, k]] = g.row(i).dot(&mv.row(j));
                        gm.row_mut(j).scaled_add(av[[0, k]], &g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *m, gm);
                }
                Op::EdgeColumnSum { a, edges } => {
                    let ga = Mat::from_shape_fn((1, edges.len()), |(_, k)| g[[0, edges.neighbor[k]]]);
                    acc(&mut grads, *a, ga);
                }
                Op::LogDistanceSums { p, eps } => {
                    let pv = self.value(*p);
                    let m = pv.nrows();
                    let mut gp = Mat::zeros(pv.raw_dim());
                    for i in 0..m {
                        for j in (i + 1)..m {
                            let diff = &pv.row(i) - &pv.row(j);
                            let d2 = diff.dot(&diff);
                            if d2.sqrt() <= *eps {
                                continue;
                            }
                            let coeff = (g[[0, i]] + g[[0, j]]) / d2;
                            gp.row_mut(i).scaled_add(coeff, &diff);
                            gp.row_mut(j).scaled_add(-coeff, &diff);
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::SymEigen(a) => {
                    let out = &node.value;
                    let k = out.nrows();
                    let lam = out.column(0);
                    let vecs = out.slice(s![.., 1..]);
                    let g_lam = g.column(0);
                    let g_vec = g.slice(s![.., 1..]);
                    // inner = diag(ḡλ) + F ∘ (Vᵀ ḡV), F_lk = 1/(λ_k − λ_l)
                    let mut inner = vecs.t().dot(&g_vec);
                    for l in 0..k {
                        for c in 0..k {
                            if l == c {
                                inner[[l, c]] = g_lam[c];
                            } else {
                                let gap = lam[c] - lam[l];
                                inner[[l, c]] = if gap.abs() < EIGEN_GAP_CUTOFF {
                                    0.0
                                } else {
                                    inner[[l, c]] / gap
                                };
                            }
                        }
                    }
                    let ga = vecs.dot(&inner).dot(&vecs.t());
                    let sym = (&ga + &ga.t()) * 0.5;
                    acc(&mut grads, *a, sym);
                }
                Op::BinaryCrossEntropy { p, target, clamp } => {
                    let pv = self.value(*p);
                    let mut gp = Mat::zeros((1, 2));
                    let (p0, p1) = (pv[[0, 0]], pv[[0, 1]]);
                    if p1 > *clamp && p1 < 1.0 - clamp {
                        gp[[0, 1]] = -target / p1 * g[[0, 0]];
                    }
                    if p0 > *clamp && p0 < 1.0 - clamp {
                        gp[[0, 0]] = -(1.0 - target) / p0 * g[[0, 0]];
                    }
                    acc(&mut grads, *p, gp);
                }
            }
        }
        Grads { nodes: grads, params }
    }
}
