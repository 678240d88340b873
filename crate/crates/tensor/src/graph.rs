use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

/// Additive bias applied to masked logits before exponentiation.
const MASK_FILL: f64 = -1e30;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    /// Tanh approximation.
    Gelu,
    Asinh,
    Sinh,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is a single value.
    Scalar,
    /// Right operand is one row of length `last_dim`, repeated over rows.
    Row,
    /// Right operand has a trailing singleton, repeated along the last dim.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive applications.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward simply walks it in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Reject non-finite primitive outputs with [`TensorError::Numeric`].
    /// On by default in debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bcast = broadcast_rule(av.shape(), bv.shape())?;
        if kind == BinaryKind::Div && bv.data().iter().any(|&x| x == 0.0) {
            return Err(TensorError::Numeric("division by exact zero".into()));
        }
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let width = av.last_dim();
        let bd = bv.data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[b_index(bcast, i, width)]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Binary { kind, a, b, bcast }, &[a, b])
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Gelu => gelu,
            UnaryKind::Asinh => f64::asinh,
            UnaryKind::Sinh => f64::sinh,
            UnaryKind::Abs => f64::abs,
        };
        let out = self.nodes[a.0].value.map(f);
        self.push(out, Op::Unary { kind, a }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn asinh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Asinh, a)
    }

    pub fn sinh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sinh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    ///
    /// Both operands are rank 2, or both are rank 3 with equal leading
    /// (batch) dimension, in which case one product is taken per batch entry.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (batch, ar, ac, br, bc) = match (av.shape(), bv.shape()) {
            ([ar, ac], [br, bc]) => (1, *ar, *ac, *br, *bc),
            ([ba, ar, ac], [bb, br, bc]) if ba == bb => (*ba, *ar, *ac, *br, *bc),
            (sa, sb) => {
                return Err(TensorError::Shape(format!(
                    "matmul needs two rank-2 or two batched rank-3 operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: {:?}{} · {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                MatRef {
                    data: &av.data()[bi * ar * ac..(bi + 1) * ar * ac],
                    rows: ar,
                    cols: ac,
                    trans: ta,
                },
                MatRef {
                    data: &bv.data()[bi * br * bc..(bi + 1) * br * bc],
                    rows: br,
                    cols: bc,
                    trans: tb,
                },
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let shape = if av.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// Softmax over the last dimension.
    ///
    /// `keep` marks the positions that take part: it is either the full
    /// element count of `a` or one row that is shared by every row. Dropped
    /// positions get exactly zero weight.
    pub fn softmax_lastdim(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let width = av.last_dim();
        let rows = av.numel() / width.max(1);
        if let Some(keep) = keep {
            if keep.len() != av.numel() && keep.len() != width {
                return Err(TensorError::Shape(format!(
                    "softmax mask of length {} does not fit {:?}",
                    keep.len(),
                    av.shape()
                )));
            }
        }
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * width..(r + 1) * width];
            let dst = &mut out[r * width..(r + 1) * width];
            let kept = |j: usize| match keep {
                None => true,
                Some(k) if k.len() == width => k[j],
                Some(k) => k[r * width + j],
            };
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &x) in row.iter().enumerate() {
                let x = if kept(j) { x } else { x + MASK_FILL };
                any |= kept(j);
                max = max.max(x);
            }
            if !any {
                return Err(TensorError::Mask(format!("softmax row {r} is fully masked")));
            }
            let mut total = 0.0;
            for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                let x = if kept(j) { x } else { x + MASK_FILL };
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let width = av.last_dim();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.numel() != width || bv.numel() != width {
            return Err(TensorError::Shape(format!(
                "layer_norm over width {width} got gamma {:?} and beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = av.numel() / width.max(1);
        let mut xhat = vec![0.0; av.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let xh = (row[j] - mean) * rs;
                xhat[r * width + j] = xh;
                out[r * width + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[a, gamma, beta],
        )
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push(out, Op::Reshape { a }, &[a])
    }

    /// Reorders dimensions: output dimension `i` is input dimension `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape(format!(
                "{perm:?} is not a permutation of {rank} dimensions"
            )));
        }
        let out = permute_tensor(av, perm);
        self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Shape("concat of zero tensors".into()));
        };
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Shape(format!(
                    "concat leading dims differ: {:?} vs {:?}",
                    lead, s
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
            .expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                op => {
                    for (input, grad) in self.input_grads(op, &node.value, &g) {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut adj[input.0] {
                            Some(acc) => acc.add_assign(&grad),
                            slot @ None => *slot = Some(grad),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn input_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b, bcast } => {
                let (a, b, bcast) = (*a, *b, *bcast);
                let av = val(a);
                let bv = val(b);
                let width = av.last_dim();
                let mut res = Vec::with_capacity(2);
                if self.needs(a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.data().to_vec(),
                        BinaryKind::Mul => g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv.data()[b_index(bcast, i, width)])
                            .collect(),
                        BinaryKind::Div => g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi / bv.data()[b_index(bcast, i, width)])
                            .collect(),
                    };
                    res.push((a, Tensor::new(av.shape().to_vec(), ga).expect("shape")));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; bv.numel()];
                    for (i, gi) in g.data().iter().enumerate() {
                        let j = b_index(bcast, i, width);
                        let bj = bv.data()[j];
                        gb[j] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av.data()[i],
                            BinaryKind::Div => -gi * av.data()[i] / (bj * bj),
                        };
                    }
                    res.push((b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")));
                }
                res
            }
            Op::Unary { kind, a } => {
                let x = val(*a).data();
                let y = out.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let (x, y) = (x[i], y[i]);
                        gi * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / x,
                            UnaryKind::Sqrt => 0.5 / y,
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Gelu => gelu_grad(x),
                            UnaryKind::Asinh => 1.0 / (x * x + 1.0).sqrt(),
                            UnaryKind::Sinh => x.cosh(),
                            UnaryKind::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), d).expect("shape"))]
            }
            Op::Scale { a, c } => vec![(*a, g.map(|x| x * c))],
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = val(a);
                let bv = val(b);
                // Stored shapes of one batch entry.
                let (ar, ac) = if ta { (k, m) } else { (m, k) };
                let (br, bc) = if tb { (n, k) } else { (k, n) };
                let mut res = Vec::with_capacity(2);
                let gmat = |bi: usize, trans: bool| MatRef {
                    data: &g.data()[bi * m * n..(bi + 1) * m * n],
                    rows: m,
                    cols: n,
                    trans,
                };
                let amat = |bi: usize, trans: bool| MatRef {
                    data: &av.data()[bi * ar * ac..(bi + 1) * ar * ac],
                    rows: ar,
                    cols: ac,
                    trans,
                };
                let bmat = |bi: usize, trans: bool| MatRef {
                    data: &bv.data()[bi * br * bc..(bi + 1) * br * bc],
                    rows: br,
                    cols: bc,
                    trans,
                };
                if self.needs(a) {
                    let mut ga = vec![0.0; av.numel()];
                    for bi in 0..batch {
                        let dst = &mut ga[bi * ar * ac..(bi + 1) * ar * ac];
                        if ta {
                            // A = (A')ᵀ, dA = op(B) · dCᵀ
                            gemm(bmat(bi, tb), gmat(bi, true), dst, 0.0);
                        } else {
                            // dA = dC · op(B)ᵀ
                            gemm(gmat(bi, false), bmat(bi, !tb), dst, 0.0);
                        }
                    }
                    res.push((a, Tensor::new(av.shape().to_vec(), ga).expect("shape")));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let dst = &mut gb[bi * br * bc..(bi + 1) * br * bc];
                        if tb {
                            // dB = dCᵀ · op(A)
                            gemm(gmat(bi, true), amat(bi, ta), dst, 0.0);
                        } else {
                            // dB = op(A)ᵀ · dC
                            gemm(amat(bi, !ta), gmat(bi, false), dst, 0.0);
                        }
                    }
                    res.push((b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")));
                }
                res
            }
            Op::Softmax { a } => {
                let width = out.last_dim();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / width.max(1) {
                    let s = r * width..(r + 1) * width;
                    let dot: f64 = y[s.clone()].iter().zip(&g.data()[s.clone()]).map(|(y, g)| y * g).sum();
                    for i in s {
                        d[i] = y[i] * (g.data()[i] - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), d).expect("shape"))]
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = out.last_dim();
                let rows = out.numel() / width.max(1);
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut res = Vec::with_capacity(3);
                if self.needs(*a) {
                    let mut dx = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let s = r * width;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..width {
                            let dxh = gd[s + j] * gam[j];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[s + j];
                        }
                        mean_d /= width as f64;
                        mean_dx /= width as f64;
                        for j in 0..width {
                            let dxh = gd[s + j] * gam[j];
                            dx[s + j] = rstd[r] * (dxh - mean_d - xhat[s + j] * mean_dx);
                        }
                    }
                    res.push((*a, Tensor::new(out.shape().to_vec(), dx).expect("shape")));
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; width];
                    let mut db = vec![0.0; width];
                    for r in 0..rows {
                        for j in 0..width {
                            dg[j] += gd[r * width + j] * xhat[r * width + j];
                            db[j] += gd[r * width + j];
                        }
                    }
                    res.push((*gamma, Tensor::new(val(*gamma).shape().to_vec(), dg).expect("shape")));
                    res.push((*beta, Tensor::new(val(*beta).shape().to_vec(), db).expect("shape")));
                }
                res
            }
            Op::Reshape { a } => vec![(
                *a,
                g.clone().reshape(val(*a).shape()).expect("reshape back"),
            )],
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, permute_tensor(g, &inv))]
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.numel() / total.max(1);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let w = pv.last_dim();
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        res.push((*p, Tensor::new(pv.shape().to_vec(), d).expect("shape")));
                    }
                    offset += w;
                }
                res
            }
            Op::Sum { a } => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary elementwise",
        Op::Unary { .. } => "unary elementwise",
        Op::Scale { .. } => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Sum { .. } => "sum",
    }
}

fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let b_numel: usize = b.iter().product();
    if b_numel == 1 {
        return Ok(Bcast::Scalar);
    }
    if let (Some(&aw), Some(&bw)) = (a.last(), b.last()) {
        if aw == bw && b_numel == bw {
            return Ok(Bcast::Row);
        }
        if bw == 1 && a.len() == b.len() && a[..a.len() - 1] == b[..b.len() - 1] {
            return Ok(Bcast::Col);
        }
    }
    Err(TensorError::Shape(format!("cannot broadcast {b:?} onto {a:?}")))
}

#[inline]
fn b_index(bcast: Bcast, i: usize, width: usize) -> usize {
    match bcast {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % width,
        Bcast::Col => i / width,
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for _ in 0..t.numel() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves size")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
