use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// `a[m,k] · b[k,n]`, or `a[m,k] · b[n,k]ᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    /// Independent products over a leading group axis.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    /// `x[n,c] ⊙ v[c]` row by row.
    ScaleCols { x: Var, v: Var },
    /// `x[n,c] + b[c]` row by row.
    AddRow { x: Var, bias: Var },
    /// `x[g*s, d] + t[s, d]` with `t` repeated over `g` groups.
    AddTiled { x: Var, tile: Var },
    /// `[b*s, h*dh] -> [b*h, s, dh]`
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    /// `[b*h, s, dh] -> [b*s, h*dh]`
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    /// `[g*s, d] -> [g, d]` mean over each group of `s` rows.
    MeanGroups { x: Var, groups: usize },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order for [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as an input. Its `requires_grad` flag decides
    /// whether gradient is propagated to it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant input.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::dim("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Contract(format!("{op} expects a 2-D operand, got {s:?}"))),
        }
    }

    /// Matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// Matrix product with the second operand transposed: `a[m,k] · b[n,k]ᵀ`.
    /// This is the linear-layer form `x · Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    fn batch_dims(&self, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [g, r, c] => Ok((*g, *r, *c)),
            s => Err(Error::Contract(format!("batched matmul expects 3-D operands, got {s:?}"))),
        }
    }

    /// Batched product over the leading axis, optionally transposing `b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = self.batch_dims(a)?;
        let (g2, b1, b2) = self.batch_dims(b)?;
        let (k2, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if g != g2 || k != k2 {
            return Err(Error::dim("batch_matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); g * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..g {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ai, bi, ci, m, k, n);
                } else {
                    gemm_nn(ai, bi, ci, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::MulScalar(a, s), rg)
    }

    /// GELU with the tanh approximation, see [`gelu_scalar`].
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if n == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d == 0 || !(eps > 0.0) {
            return Err(Error::Contract("layernorm needs d >= 1 and eps > 0".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layernorm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { index: bad, classes: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for v in row.iter_mut() {
                *v = (*v - max).exp() / sum;
            }
        }
        loss = loss / T::from_f64(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scales column `j` of `x[n,c]` by `v[j]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, c) = self.mat_dims(x, "scale_cols")?;
        if self.shape(v) != [c] {
            return Err(Error::dim("scale_cols", self.shape(x), self.shape(v)));
        }
        let vv = self.value(v).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(&vv) {
                *o *= *s;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleCols { x, v }, rg))
    }

    /// Adds `bias[c]` to every row of `x[n,c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.mat_dims(x, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            add_into(row, &bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, bias }, rg))
    }

    /// Adds `tile[s,d]` to each consecutive block of `s` rows of `x[g*s,d]`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (rows, d) = self.mat_dims(x, "add_tiled")?;
        let (s, d2) = self.mat_dims(tile, "add_tiled")?;
        if d != d2 || s == 0 || rows % s != 0 {
            return Err(Error::dim("add_tiled", self.shape(x), self.shape(tile)));
        }
        let tv = self.value(tile).to_vec();
        let mut out = self.value(x).to_vec();
        for block in out.chunks_mut(s * d) {
            add_into(block, &tv);
        }
        let rg = self.rg(x) || self.rg(tile);
        Ok(self.push(vec![rows, d], out, Op::AddTiled { x, tile }, rg))
    }

    /// Reorders `[batch*seq, heads*dh]` into `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.mat_dims(x, "split_heads")?;
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(Error::dim("split_heads", self.shape(x), &[batch, heads]));
        }
        let seq = rows / batch;
        let dh = width / heads;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                let src = &xv[(b * seq + s) * width..(b * seq + s + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * heads, seq, dh],
            out,
            Op::SplitHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (g, seq, dh) = self.batch_dims(x)?;
        if batch == 0 || g != batch * heads {
            return Err(Error::dim("merge_heads", self.shape(x), &[batch, heads]));
        }
        let width = heads * dh;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + s) * dh;
                    let dst = (b * seq + s) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * seq, width],
            out,
            Op::MergeHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// Averages each of `groups` consecutive row blocks of `x[groups*s, d]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, d) = self.mat_dims(x, "mean_groups")?;
        if groups == 0 || rows % groups != 0 || rows == 0 {
            return Err(Error::dim("mean_groups", self.shape(x), &[groups]));
        }
        let s = rows / groups;
        let inv = T::one() / T::from_f64(s as f64);
        let xv = self.value(x);
        let mut out = vec![T::zero(); groups * d];
        for g in 0..groups {
            let o = &mut out[g * d..(g + 1) * d];
            for r in 0..s {
                add_into(o, &xv[(g * s + r) * d..(g * s + r + 1) * d]);
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![groups, d], out, Op::MeanGroups { x, groups }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    if *trans_b {
                        // dA = dC · B   (B is [n,k])
                        gemm_nn(g, self.value(*b), ga, m, n, k);
                    } else {
                        // dA = dC · Bᵀ  (B is [k,n])
                        gemm_nt(g, self.value(*b), ga, m, n, k);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB = dCᵀ · A  -> [n,k]
                        gemm_tn(g, self.value(*a), gb, n, m, k);
                    } else {
                        // dB = Aᵀ · dC  -> [k,n]
                        gemm_tn(self.value(*a), g, gb, k, m, n);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (grp, m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1], s[2])
                };
                let n = node.shape[2];
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for q in 0..grp {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let bq = &bv[q * k * n..(q + 1) * k * n];
                        let out = &mut ga[q * m * k..(q + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gq, bq, out, m, n, k);
                        } else {
                            gemm_nt(gq, bq, out, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for q in 0..grp {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let aq = &av[q * m * k..(q + 1) * m * k];
                        let out = &mut gb[q * k * n..(q + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gq, aq, out, n, m, k);
                        } else {
                            gemm_tn(aq, gq, out, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(self.value(*b)) {
                        *d += *s * *y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += *s * *x;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, v) in ga.iter_mut().zip(g) {
                        *d += *v * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, v), x) in ga.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += *v * gelu_grad(*x);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, v), x) in ga.iter_mut().zip(g).zip(self.value(*a)) {
                        if *x > T::zero() {
                            *d += *v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = last_dim(&node.shape);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((dx, dy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot: T = dy.iter().zip(y).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            dx[j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = last_dim(&node.shape);
                let dn = T::from_f64(d as f64);
                let gv = self.value(*gamma).to_vec();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (dy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for dy in g.chunks(d) {
                        add_into(gb, dy);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![T::zero(); d];
                    for (r, (dx, dy)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = dy[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dh.iter().zip(h).map(|(a, b)| *a * *b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, (dx, p)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let onehot = if j == labels[r] { T::one() } else { T::zero() };
                            dx[j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::ScaleCols { x, v } => {
                let c = node.shape[1];
                let vv = self.value(*v);
                if let Some(gx) = self.slot(grads, *x) {
                    for (dx, dy) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dx[j] += dy[j] * vv[j];
                        }
                    }
                }
                let xv = self.value(*x);
                if let Some(gv) = self.slot(grads, *v) {
                    for (xr, dy) in xv.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gv[j] += dy[j] * xr[j];
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let c = node.shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for dy in g.chunks(c) {
                        add_into(gb, dy);
                    }
                }
            }
            Op::AddTiled { x, tile } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let tl = self.value(*tile).len();
                if let Some(gt) = self.slot(grads, *tile) {
                    for block in g.chunks(tl) {
                        add_into(gt, block);
                    }
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let width = self.shape(*x)[1];
                let dh = width / heads;
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + s) * dh;
                                let dst = (b * seq + s) * width + h * dh;
                                add_into(&mut gx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let width = node.shape[1];
                let dh = width / heads;
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * seq + s) * dh;
                                let src = (b * seq + s) * width + h * dh;
                                add_into(&mut gx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MeanGroups { x, groups } => {
                let d = node.shape[1];
                let rows = self.shape(*x)[0];
                let s = rows / groups;
                let inv = T::one() / T::from_f64(s as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let grp = r / s;
                        for j in 0..d {
                            gx[r * d + j] += g[grp * d + j] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
        }
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
