use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gelu, gelu_grad, gemm, log_softmax_row, masked_softmax_row, MatRef};
use super::{ParamStore, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BatchMatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    Gelu(usize),
    Tanh(usize),
    Sum(usize),
    Softmax { x: usize },
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    SelectRows { sources: Vec<usize>, picks: Vec<(u32, u32)> },
    Pick { x: usize, picks: Vec<(u32, u32)> },
    Reshape(usize),
    Permute0213 { x: usize, dims: [usize; 4] },
    L2NormalizeRows { x: usize, norms: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Sum(_) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SelectRows { .. } => "select_rows",
            Op::Pick { .. } => "pick",
            Op::Reshape(_) => "reshape",
            Op::Permute0213 { .. } => "permute_0213",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recording of differentiable computations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order for the backward sweep. A graph is single-threaded; build
/// one graph per worker.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(TensorError::DetachedGraph);
        }
        self.nodes.get(v.idx).ok_or(TensorError::DetachedGraph)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let node = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name(), node });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var { graph: self.id, idx: node })
    }

    fn shape_err(&self, op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    fn arg_err(&self, op: &'static str, reason: impl Into<String>) -> TensorError {
        TensorError::InvalidArgument {
            op,
            node: self.nodes.len(),
            reason: reason.into(),
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push(shape, data, Op::Leaf, needs)
            .expect("constant leaf must hold finite values")
    }

    /// Records a leaf whose gradient is reported in [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(name.to_string()),
            true,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[0]
    }

    /// Matrix product of two rank-2 values, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(self.shape_err("matmul", &na.shape, &nb.shape));
        }
        let ma = MatRef::new(&na.value, na.shape[0], na.shape[1]);
        let mb = MatRef::new(&nb.value, nb.shape[0], nb.shape[1]);
        let ma = if ta { ma.t() } else { ma };
        let mb = if tb { mb.t() } else { mb };
        let (m, k) = if ta { (na.shape[1], na.shape[0]) } else { (na.shape[0], na.shape[1]) };
        let (k2, n) = if tb { (nb.shape[1], nb.shape[0]) } else { (nb.shape[0], nb.shape[1]) };
        if k != k2 {
            return Err(self.shape_err("matmul", &na.shape, &nb.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out, 0.0);
        let needs = na.needs_grad || nb.needs_grad;
        self.push(vec![m, n], out, Op::MatMul { a: a.idx, b: b.idx, ta, tb }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape.len() != 3 || nb.shape.len() != 3 || na.shape[0] != nb.shape[0] {
            return Err(self.shape_err("batch_matmul", &na.shape, &nb.shape));
        }
        let (bs, m, k) = (na.shape[0], na.shape[1], na.shape[2]);
        let (k2, n) = if transpose_b {
            (nb.shape[2], nb.shape[1])
        } else {
            (nb.shape[1], nb.shape[2])
        };
        if k != k2 {
            return Err(self.shape_err("batch_matmul", &na.shape, &nb.shape));
        }
        let (br, bc) = (nb.shape[1], nb.shape[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ma = MatRef::new(&na.value[i * m * k..(i + 1) * m * k], m, k);
            let mb = MatRef::new(&nb.value[i * br * bc..(i + 1) * br * bc], br, bc);
            let mb = if transpose_b { mb.t() } else { mb };
            gemm(ma, mb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let needs = na.needs_grad || nb.needs_grad;
        self.push(
            vec![bs, m, n],
            out,
            Op::BatchMatMul { a: a.idx, b: b.idx, tb: transpose_b },
            needs,
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape != nb.shape {
            return Err(self.shape_err(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out, na.needs_grad || nb.needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, g) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, v, Op::Add(a.idx, b.idx), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, g) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, v, Op::Sub(a.idx, b.idx), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, g) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, v, Op::Mul(a.idx, b.idx), g)
    }

    /// Adds a rank-1 `bias` to every row of `x` (last dimension must match).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.check(x)?, self.check(bias)?);
        let (_, c) = rows_cols(&nx.shape);
        if nb.shape.len() != 1 || nb.shape[0] != c || nx.shape.is_empty() {
            return Err(self.shape_err("add_bias", &nx.shape, &nb.shape));
        }
        let mut out = nx.value.clone();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(&nb.value).for_each(|(o, b)| *o += b);
        }
        let needs = nx.needs_grad || nb.needs_grad;
        self.push(nx.shape.clone(), out, Op::AddBias { x: x.idx, bias: bias.idx }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let nx = self.check(x)?;
        let out = nx.value.iter().map(|v| v * c).collect();
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::Scale { x: x.idx, c }, g)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        let out = nx.value.iter().map(|&v| gelu(v)).collect();
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::Gelu(x.idx), g)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        let out = nx.value.iter().map(|v| v.tanh()).collect();
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::Tanh(x.idx), g)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        let s: f64 = nx.value.iter().sum();
        let g = nx.needs_grad;
        self.push(vec![], vec![s], Op::Sum(x.idx), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?.value.len();
        if n == 0 {
            return Err(self.arg_err("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last dimension where entries with `allowed == false`
    /// receive exactly zero probability. `allowed` must have one flag per
    /// element of `x`.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let nx = self.check(x)?;
        if nx.shape.is_empty() {
            return Err(self.arg_err("softmax", "scalar input"));
        }
        if let Some(a) = allowed {
            if a.len() != nx.value.len() {
                return Err(self.shape_err("softmax", &nx.shape, &[a.len()]));
            }
        }
        let (_, c) = rows_cols(&nx.shape);
        let mut out = vec![0.0; nx.value.len()];
        for (r, (row, o)) in nx.value.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            masked_softmax_row(row, allowed.map(|a| &a[r * c..(r + 1) * c]), o);
        }
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::Softmax { x: x.idx }, g)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        if nx.shape.is_empty() {
            return Err(self.arg_err("log_softmax", "scalar input"));
        }
        let (_, c) = rows_cols(&nx.shape);
        let mut out = vec![0.0; nx.value.len()];
        for (row, o) in nx.value.chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::LogSoftmax(x.idx), g)
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the affine `gamma`/`beta` over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (nx, ng, nb) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (rows, c) = rows_cols(&nx.shape);
        if nx.shape.is_empty() || ng.shape != [c] || nb.shape != [c] {
            return Err(self.shape_err("layer_norm", &nx.shape, &ng.shape));
        }
        let mut xhat = vec![0.0; nx.value.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; nx.value.len()];
        for r in 0..rows {
            let row = &nx.value[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * ng.value[j] + nb.value[j];
            }
        }
        let needs = nx.needs_grad || ng.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        self.push(
            shape,
            out,
            Op::LayerNorm { x: x.idx, gamma: gamma.idx, beta: beta.idx, xhat, inv_std },
            needs,
        )
    }

    /// Builds a `[picks.len(), C]` matrix whose row `i` is row `picks[i].1` of
    /// `sources[picks[i].0]`. Every source is viewed as `[rows, C]`. Covers
    /// embedding lookup, concatenation, slicing and row broadcasting.
    pub fn select_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        if sources.is_empty() {
            return Err(self.arg_err("select_rows", "no sources"));
        }
        let mut cols = None;
        let mut needs = false;
        let mut dims = Vec::with_capacity(sources.len());
        for &s in sources {
            let n = self.check(s)?;
            let (r, c) = rows_cols(&n.shape);
            if n.shape.is_empty() {
                return Err(self.arg_err("select_rows", "scalar source"));
            }
            if *cols.get_or_insert(c) != c {
                return Err(self.shape_err("select_rows", &[cols.unwrap()], &n.shape));
            }
            needs |= n.needs_grad;
            dims.push(r);
        }
        let c = cols.unwrap();
        let mut out = Vec::with_capacity(picks.len() * c);
        let mut packed = Vec::with_capacity(picks.len());
        for &(s, r) in picks {
            if s >= sources.len() || r >= dims[s] {
                return Err(self.arg_err("select_rows", format!("pick ({s}, {r}) out of range")));
            }
            let n = &self.nodes[sources[s].idx];
            out.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            packed.push((s as u32, r as u32));
        }
        let src_idx = sources.iter().map(|v| v.idx).collect();
        self.push(
            vec![picks.len(), c],
            out,
            Op::SelectRows { sources: src_idx, picks: packed },
            needs,
        )
    }

    /// Gathers single elements `(row, col)` of a `[rows, C]` view into a
    /// rank-1 vector.
    pub fn pick(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let nx = self.check(x)?;
        let (rows, c) = rows_cols(&nx.shape);
        let mut out = Vec::with_capacity(picks.len());
        let mut packed = Vec::with_capacity(picks.len());
        for &(r, j) in picks {
            if r >= rows || j >= c {
                return Err(self.arg_err("pick", format!("element ({r}, {j}) out of range")));
            }
            out.push(nx.value[r * c + j]);
            packed.push((r as u32, j as u32));
        }
        let g = nx.needs_grad;
        self.push(vec![picks.len()], out, Op::Pick { x: x.idx, picks: packed }, g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let nx = self.check(x)?;
        if shape.iter().product::<usize>() != nx.value.len() {
            return Err(self.shape_err("reshape", &nx.shape, shape));
        }
        let (v, g) = (nx.value.clone(), nx.needs_grad);
        self.push(shape.to_vec(), v, Op::Reshape(x.idx), g)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to split and merge attention heads.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        if nx.shape.len() != 4 {
            return Err(self.shape_err("permute_0213", &nx.shape, &[4]));
        }
        let dims = [nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]];
        let out = permute_0213(&nx.value, dims);
        let g = nx.needs_grad;
        self.push(
            vec![dims[0], dims[2], dims[1], dims[3]],
            out,
            Op::Permute0213 { x: x.idx, dims },
            g,
        )
    }

    /// Scales each row of a `[rows, C]` view to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let nx = self.check(x)?;
        let (_, c) = rows_cols(&nx.shape);
        let mut out = nx.value.clone();
        let mut norms = Vec::new();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(self.arg_err("l2_normalize_rows", "zero-norm row"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let (s, g) = (nx.shape.clone(), nx.needs_grad);
        self.push(s, out, Op::L2NormalizeRows { x: x.idx, norms }, g)
    }

    /// Reverse sweep from a scalar output without touching any store.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if out.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.idx] = Some(vec![1.0]);
        for i in (0..=output.idx).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// Reverse sweep that also accumulates parameter gradients into `store`.
    /// Repeated calls add to the existing grad buffers.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, n) = (node.shape[0], node.shape[1]);
                let ma = MatRef::new(&na.value, na.shape[0], na.shape[1]);
                let mb = MatRef::new(&nb.value, nb.shape[0], nb.shape[1]);
                let op_a = if *ta { ma.t() } else { ma };
                let op_b = if *tb { mb.t() } else { mb };
                let dc = MatRef::new(g, m, n);
                if wants(*a) {
                    let mut da = vec![0.0; na.value.len()];
                    if *ta {
                        gemm(op_b, dc.t(), &mut da, 0.0);
                    } else {
                        gemm(dc, op_b.t(), &mut da, 0.0);
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; nb.value.len()];
                    if *tb {
                        gemm(dc.t(), op_a, &mut db, 0.0);
                    } else {
                        gemm(op_a.t(), dc, &mut db, 0.0);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (bs, m, k) = (na.shape[0], na.shape[1], na.shape[2]);
                let (br, bc) = (nb.shape[1], nb.shape[2]);
                let n = node.shape[2];
                let mut da = if wants(*a) { Some(vec![0.0; na.value.len()]) } else { None };
                let mut db = if wants(*b) { Some(vec![0.0; nb.value.len()]) } else { None };
                for i in 0..bs {
                    let ma = MatRef::new(&na.value[i * m * k..(i + 1) * m * k], m, k);
                    let mb = MatRef::new(&nb.value[i * br * bc..(i + 1) * br * bc], br, bc);
                    let op_b = if *tb { mb.t() } else { mb };
                    let dc = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    if let Some(da) = da.as_mut() {
                        gemm(dc, op_b.t(), &mut da[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    if let Some(db) = db.as_mut() {
                        let slot = &mut db[i * br * bc..(i + 1) * br * bc];
                        if *tb {
                            gemm(dc.t(), ma, slot, 0.0);
                        } else {
                            gemm(ma.t(), dc, slot, 0.0);
                        }
                    }
                }
                if let Some(da) = da {
                    accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(&nodes[*b].value).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = g.iter().zip(&nodes[*a].value).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let c = nodes[*bias].value.len();
                    let mut d = vec![0.0; c];
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(grads, *bias, d);
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Gelu(x) => {
                let d = g.iter().zip(&nodes[*x].value).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(&node.value).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; nodes[*x].value.len()]);
            }
            Op::Softmax { x } => {
                let (_, c) = rows_cols(&node.shape);
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in node.value.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LogSoftmax(x) => {
                let (_, c) = rows_cols(&node.shape);
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in node.value.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - y[j].exp() * total;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = nodes[*gamma].value.len();
                let gam = &nodes[*gamma].value;
                if wants(*gamma) {
                    let mut d = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        d.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (a, b))| *o += a * b);
                    }
                    accumulate(grads, *gamma, d);
                }
                if wants(*beta) {
                    let mut d = vec![0.0; c];
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(o, a)| *o += a);
                    }
                    accumulate(grads, *beta, d);
                }
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for (r, ((gr, hr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(d.chunks_mut(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let scale = inv_std[r] / c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dr[j] = scale * (c as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::SelectRows { sources, picks } => {
                let c = node.shape[1];
                let mut ds: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| wants(s).then(|| vec![0.0; nodes[s].value.len()]))
                    .collect();
                for (i, &(s, r)) in picks.iter().enumerate() {
                    if let Some(d) = ds[s as usize].as_mut() {
                        let r = r as usize;
                        d[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                for (&s, d) in sources.iter().zip(ds) {
                    if let Some(d) = d {
                        accumulate(grads, s, d);
                    }
                }
            }
            Op::Pick { x, picks } => {
                let nx = &nodes[*x];
                let (_, c) = rows_cols(&nx.shape);
                let mut d = vec![0.0; nx.value.len()];
                for (&(r, j), gv) in picks.iter().zip(g) {
                    d[r as usize * c + j as usize] += gv;
                }
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute0213 { x, dims } => {
                let d = permute_0213(g, [dims[0], dims[2], dims[1], dims[3]]);
                accumulate(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, c) = rows_cols(&node.shape);
                let mut d = vec![0.0; g.len()];
                for (r, ((y, gr), dr)) in node.value.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)).enumerate() {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = (gr[j] - y[j] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, d: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(d),
    }
}

fn permute_0213(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0; 6]));
        let b = g.constant(t(&[3, 2], &[1.0; 6]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, node, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_softmax_and_cross_entropy() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p), &[0.25; 4]);
        let lp = g.log_softmax(x).unwrap();
        let picked = g.pick(lp, &[(0, 2)]).unwrap();
        let s = g.sum(picked).unwrap();
        let nll = g.scale(s, -1.0).unwrap();
        assert!((g.scalar(nll) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones_and_quadratic_gradient_is_identity() {
        let mut g = Graph::new();
        let data = [0.5, -1.5, 2.0, 3.0, -0.25, 1.0];
        let x = g.input(t(&[2, 3], &data)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &data)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.gradients(half).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &data);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.gradients(x), Err(TensorError::NonScalarOutput(_))));
        let mut other = Graph::new();
        let y = other.input(Tensor::zeros(vec![1])).unwrap();
        let s = other.sum(y).unwrap();
        assert_eq!(g.gradients(s).err(), Some(TensorError::DetachedGraph));
        assert_eq!(g.sum(y).err(), Some(TensorError::DetachedGraph));
    }

    #[test]
    fn backward_accumulates_into_store() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        for expected in [2.0, 4.0] {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let s = g.sum(w).unwrap();
            let s2 = g.scale(s, 2.0).unwrap();
            g.backward(s2, &mut store).unwrap();
            assert_eq!(store.get("w").unwrap().grad().unwrap(), &[expected; 2]);
        }
        store.zero_grads();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0; 2]);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.3, -2.0, 5.0, 1.0, 1.0, 1.0]));
        let allowed = [true, false, true, true, true, false];
        let p = g.masked_softmax(x, Some(&allowed)).unwrap();
        let v = g.value(p);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn permute_is_an_involution_on_square_middle_dims() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let once = permute_0213(&data, [2, 3, 2, 2]);
        let back = permute_0213(&once, [2, 2, 3, 2]);
        assert_eq!(back, data);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e300]));
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul", .. }));
    }
}
