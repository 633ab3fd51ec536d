use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Saved state for each recorded operation. Backward rules read only their
/// own record plus the values of their input nodes.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        map: Vec<usize>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    AvgPool {
        x: NodeId,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Reduce {
        x: NodeId,
        map: Vec<usize>,
        factor: f64,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    PairwiseDist {
        x: NodeId,
        n: usize,
        d: usize,
    },
    Standardize {
        x: NodeId,
        d: usize,
        p: usize,
        eps: f64,
    },
    CrossFrameCorr {
        x: NodeId,
        clip_len: usize,
        d: usize,
        p: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward pass. Nodes are appended in creation order,
/// which is already a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.value().shape())
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(v.value().shape(), g.clone()).expect("gradient shape"))
    }

    /// Sign of every ReLU input, in creation order. Two passes with equal
    /// patterns evaluate every ReLU on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            if let Op::Relu(x) = node.op {
                out.extend(nodes[x].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn backward_from(&self, root: NodeId) {
        let nodes = self.nodes.borrow();
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        local[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(gout) = local[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                if let Op::Leaf = node.op {
                } else {
                    for (input, g) in backward_rule(&nodes, node, &gout) {
                        if !nodes[input].requires_grad {
                            continue;
                        }
                        match &mut local[input] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            let mut grads = self.grads.borrow_mut();
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gout),
            }
        }
    }
}

fn val(nodes: &[Node], id: NodeId) -> &Tensor {
    &nodes[id].value
}

fn reduce_to(shape_in: &[usize], shape_out: &[usize], g: &[f64]) -> Vec<f64> {
    if shape_in == shape_out {
        return g.to_vec();
    }
    let st = kernels::broadcast_strides(shape_in, shape_out);
    let map = kernels::gather_map(shape_out, &st);
    let mut r = vec![0.0; shape_in.iter().product()];
    for (i, &m) in map.iter().enumerate() {
        r[m] += g[i];
    }
    r
}

fn broadcast_to(t: &Tensor, shape_out: &[usize]) -> Vec<f64> {
    if t.shape() == shape_out {
        return t.data().to_vec();
    }
    let st = kernels::broadcast_strides(t.shape(), shape_out);
    kernels::gather_map(shape_out, &st)
        .into_iter()
        .map(|m| t.data()[m])
        .collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backward_rule(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let out = &*node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(val(nodes, *a).shape(), out.shape(), g)),
            (*b, reduce_to(val(nodes, *b).shape(), out.shape(), g)),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (*a, reduce_to(val(nodes, *a).shape(), out.shape(), g)),
                (*b, reduce_to(val(nodes, *b).shape(), out.shape(), &neg)),
            ]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                let bb = broadcast_to(bv, out.shape());
                let ga: Vec<f64> = g.iter().zip(&bb).map(|(x, y)| x * y).collect();
                res.push((*a, reduce_to(av.shape(), out.shape(), &ga)));
            }
            if nodes[*b].requires_grad {
                let ab = broadcast_to(av, out.shape());
                let gb: Vec<f64> = g.iter().zip(&ab).map(|(x, y)| x * y).collect();
                res.push((*b, reduce_to(bv.shape(), out.shape(), &gb)));
            }
            res
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::Sigmoid(x) => {
            let gx = g
                .iter()
                .zip(out.data())
                .map(|(gv, y)| gv * y * (1.0 - y))
                .collect();
            vec![(*x, gx)]
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(nodes, *x).data())
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, map } => {
            let mut gx = vec![0.0; g.len()];
            for (i, &m) in map.iter().enumerate() {
                gx[m] = g[i];
            }
            vec![(*x, gx)]
        }
        Op::MatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (val(nodes, *a).data(), val(nodes, *b).data());
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                res.push((*a, kernels::bmm_nt(*batch, *m, *n, *k, g, bv)));
            }
            if nodes[*b].requires_grad {
                res.push((*b, kernels::bmm_tn(*batch, *k, *m, *n, av, g)));
            }
            res
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Conv2d { x, w, b, geom } => {
            let mut res = Vec::new();
            if nodes[*x].requires_grad {
                res.push((
                    *x,
                    kernels::conv2d_backward_input(geom, g, val(nodes, *w).data()),
                ));
            }
            if nodes[*w].requires_grad {
                res.push((
                    *w,
                    kernels::conv2d_backward_kernel(geom, g, val(nodes, *x).data()),
                ));
            }
            if let Some(b) = b {
                res.push((*b, kernels::conv2d_backward_bias(geom, g)));
            }
            res
        }
        Op::AvgPool {
            x,
            planes,
            h,
            w,
            oh,
            ow,
        } => vec![(
            *x,
            kernels::adaptive_avg_pool_backward(*planes, *h, *w, *oh, *ow, g),
        )],
        Op::Reduce { x, map, factor } => {
            vec![(*x, map.iter().map(|&m| g[m] * factor).collect())]
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let xs = val(nodes, *x).shape();
            let (n, c) = (xs[0], xs[1]);
            let s: usize = xs[2..].iter().product();
            let count = (n * s) as f64;
            let gam = val(nodes, *gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    for k in base..base + s {
                        dgamma[ci] += g[k] * xhat[k];
                        dbeta[ci] += g[k];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    let scale = gam[ci] * inv_std[ci] / count;
                    for k in base..base + s {
                        dx[k] = scale * (count * g[k] - dbeta[ci] - xhat[k] * dgamma[ci]);
                    }
                }
            }
            vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let xs = val(nodes, *x).shape();
            let (n, c) = (xs[0], xs[1]);
            let s: usize = xs[2..].iter().product();
            let gam = val(nodes, *gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    for k in base..base + s {
                        dgamma[ci] += g[k] * xhat[k];
                        dbeta[ci] += g[k];
                        dx[k] = g[k] * gam[ci] * inv_std[ci];
                    }
                }
            }
            vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::Gather { x, idx } => {
            let mut gx = vec![0.0; val(nodes, *x).len()];
            for (i, &j) in idx.iter().enumerate() {
                gx[j] += g[i];
            }
            vec![(*x, gx)]
        }
        Op::PairwiseDist { x, n, d } => {
            let xv = val(nodes, *x).data();
            let dist = out.data();
            let mut gx = vec![0.0; n * d];
            for i in 0..*n {
                for j in 0..*n {
                    let dij = dist[i * n + j];
                    if i == j || dij <= 0.0 {
                        continue;
                    }
                    let coef = g[i * n + j] / dij;
                    for c in 0..*d {
                        let diff = xv[i * d + c] - xv[j * d + c];
                        gx[i * d + c] += coef * diff;
                        gx[j * d + c] -= coef * diff;
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Standardize { x, d, p, eps } => {
            let xv = val(nodes, *x).data();
            let b = xv.len() / (d * p);
            let mut gx = vec![0.0; xv.len()];
            let inv_d = 1.0 / *d as f64;
            for bi in 0..b {
                let blk = bi * d * p;
                for pi in 0..*p {
                    let at = |c: usize| blk + c * p + pi;
                    let mean = (0..*d).map(|c| xv[at(c)]).sum::<f64>() * inv_d;
                    let var = (0..*d).map(|c| (xv[at(c)] - mean).powi(2)).sum::<f64>() * inv_d;
                    let sigma = var.sqrt();
                    let a = 1.0 / (sigma + eps);
                    let gmean = (0..*d).map(|c| g[at(c)]).sum::<f64>() * inv_d;
                    let gxc: f64 = (0..*d).map(|c| g[at(c)] * (xv[at(c)] - mean)).sum();
                    let coef = if sigma > 0.0 {
                        gxc * a * a * inv_d / sigma
                    } else {
                        0.0
                    };
                    for c in 0..*d {
                        gx[at(c)] = a * (g[at(c)] - gmean) - coef * (xv[at(c)] - mean);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::CrossFrameCorr { x, clip_len, d, p } => {
            let xv = val(nodes, *x).data();
            let t_len = *clip_len;
            let frames = xv.len() / (d * p);
            let clips = frames / t_len;
            let inv_d = 1.0 / *d as f64;
            let block = p * p;
            let frame_out = (t_len - 1) * block;
            let mut gx = vec![0.0; xv.len()];
            for n in 0..clips {
                for t in 0..t_len {
                    let ft = n * t_len + t;
                    let xt = &xv[ft * d * p..(ft + 1) * d * p];
                    for (slot, k) in (0..t_len).filter(|&k| k != t).enumerate() {
                        let fk = n * t_len + k;
                        let gb = &g[ft * frame_out + slot * block..ft * frame_out + (slot + 1) * block];
                        let xk = &xv[fk * d * p..(fk + 1) * d * p];
                        // block[q, pos] = Σ_c xk[c, q] xt[c, pos] / d
                        let dxt = kernels::bmm(1, *d, *p, *p, xk, gb);
                        let dxk = kernels::bmm_nt(1, *d, *p, *p, xt, gb);
                        for (a, v) in gx[ft * d * p..(ft + 1) * d * p].iter_mut().zip(&dxt) {
                            *a += v * inv_d;
                        }
                        for (a, v) in gx[fk * d * p..(fk + 1) * d * p].iter_mut().zip(&dxk) {
                            *a += v * inv_d;
                        }
                    }
                }
            }
            vec![(*x, gx)]
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "cannot broadcast {a:?} with {b:?}: ranks differ"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ab = broadcast_to(&a, &shape);
            let bb = broadcast_to(&b, &shape);
            ab.into_iter().zip(bb).map(|(x, y)| f(x, y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Elementwise sum; singleton extents broadcast.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let v = self.value();
        let data = v.data().iter().map(|x| x * c).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let v = self.value();
        let data = v.data().iter().map(|x| x + c).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::AddScalar(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value();
        let data = v.data().iter().map(|&x| stable_sigmoid(x)).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value();
        let data = v.data().iter().map(|&x| x.max(0.0)).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Relu(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let t = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "permutation {perm:?} invalid for shape {:?}",
                v.shape()
            )));
        }
        let in_strides = kernels::strides(v.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = kernels::gather_map(&out_shape, &src);
        let data = map.iter().map(|&m| v.data()[m]).collect();
        Ok(self.unary(
            Tensor::new(&out_shape, data)?,
            Op::Permute { x: self.id, map },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal leading extent.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => {
                return Err(Error::dim(format!(
                    "matmul shape mismatch: {sa:?} x {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            )));
        }
        let data = kernels::bmm(batch, m, k, n, a.data(), b.data());
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor::new(&shape, data)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        let r = self.value().rank();
        if axis >= r {
            return Err(Error::dim(format!("axis {axis} out of range for rank {r}")));
        }
        Ok(())
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if !self.value().all_finite() {
            return Err(Error::Numeric(format!("{what}: non-finite input")));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        self.check_finite("softmax")?;
        let v = self.value();
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        Ok(self.unary(
            Tensor::new(v.shape(), y)?,
            Op::Softmax { x: self.id, axis },
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        self.check_finite("log_softmax")?;
        let v = self.value();
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|l| (x[at(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    y[at(l)] = x[at(l)] - lse;
                }
            }
        }
        Ok(self.unary(
            Tensor::new(v.shape(), y)?,
            Op::LogSoftmax { x: self.id, axis },
        ))
    }

    /// 2-D cross-correlation over `N×C_in×H×W` with a `C_out×C_in×kh×kw`
    /// kernel and optional per-output-channel bias.
    pub fn conv2d(
        &self,
        kernel: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>> {
        let (x, k) = (self.value(), kernel.value());
        let (sx, sk) = (x.shape(), k.shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and kernel, got {sx:?} and {sk:?}"
            )));
        }
        if sx[1] != sk[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {sx:?}, kernel {sk:?}"
            )));
        }
        if stride == 0 || sx[2] + 2 * padding < sk[2] || sx[3] + 2 * padding < sk[3] {
            return Err(Error::dim(format!(
                "conv2d kernel {sk:?} does not fit input {sx:?} with padding {padding}, stride {stride}"
            )));
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            if b.len() != sk[0] {
                return Err(Error::dim(format!(
                    "conv2d bias of shape {:?} for {} output channels",
                    b.shape(),
                    sk[0]
                )));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad: padding,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), k.data(), bias_val.as_deref().map(|b| b.data()));
        let shape = [geom.n, geom.c_out, geom.out_h(), geom.out_w()];
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.graph.push(
            Tensor::new(&shape, data)?,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("adaptive_avg_pool2d expects rank 4, got {s:?}")));
        }
        if out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
            return Err(Error::dim(format!(
                "adaptive_avg_pool2d output {out_h}x{out_w} invalid for input {s:?}"
            )));
        }
        let planes = s[0] * s[1];
        let data = kernels::adaptive_avg_pool_forward(planes, s[2], s[3], out_h, out_w, v.data());
        Ok(self.unary(
            Tensor::new(&[s[0], s[1], out_h, out_w], data)?,
            Op::AvgPool {
                x: self.id,
                planes,
                h: s[2],
                w: s[3],
                oh: out_h,
                ow: out_w,
            },
        ))
    }

    fn reduce(&self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.shape();
        for &a in axes {
            self.check_axis(a)?;
        }
        let kept: Vec<usize> = s
            .iter()
            .enumerate()
            .map(|(i, &n)| if axes.contains(&i) { 1 } else { n })
            .collect();
        let count: usize = axes.iter().map(|&a| s[a]).product();
        let out_strides = kernels::strides(&kept);
        let src: Vec<usize> = (0..s.len())
            .map(|i| if axes.contains(&i) { 0 } else { out_strides[i] })
            .collect();
        let map = kernels::gather_map(s, &src);
        let factor = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut out = vec![0.0; kept.iter().product()];
        for (i, &m) in map.iter().enumerate() {
            out[m] += v.data()[i];
        }
        out.iter_mut().for_each(|o| *o *= factor);
        let shape: Vec<usize> = if keepdim {
            kept
        } else {
            let sq: Vec<usize> = s
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &n)| n)
                .collect();
            if sq.is_empty() {
                vec![1]
            } else {
                sq
            }
        };
        Ok(self.unary(
            Tensor::new(&shape, out)?,
            Op::Reduce {
                x: self.id,
                map,
                factor,
            },
        ))
    }

    pub fn sum(&self) -> Var<'g> {
        let r = self.value().rank();
        self.reduce(&(0..r).collect::<Vec<_>>(), false, false).unwrap()
    }

    pub fn mean(&self) -> Var<'g> {
        let r = self.value().rank();
        self.reduce(&(0..r).collect::<Vec<_>>(), false, true).unwrap()
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        self.reduce(axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        self.reduce(axes, keepdim, true)
    }

    fn bn_check(&self, gamma: &Var<'g>, beta: &Var<'g>) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::dim(format!("batch_norm expects rank >= 2, got {s:?}")));
        }
        let c = s[1];
        if gamma.value().len() != c || beta.value().len() != c {
            return Err(Error::dim(format!(
                "batch_norm affine parameters must have {c} entries"
            )));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// Per-channel normalisation with batch statistics over every axis but 1.
    pub fn batch_norm_train(
        &self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<(Var<'g>, BatchStats)> {
        let (n, c, s) = self.bn_check(&gamma, &beta)?;
        let v = self.value();
        let x = v.data();
        let count = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                mean[ci] += x[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                var[ci] += x[base..base + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gam, bet) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    xhat[k] = (x[k] - mean[ci]) * inv_std[ci];
                    y[k] = gam.data()[ci] * xhat[k] + bet.data()[ci];
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.graph.push(
            Tensor::new(v.shape(), y)?,
            Op::BatchNormTrain {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Per-channel affine normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: Var<'g>,
        beta: Var<'g>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'g>> {
        let (n, c, s) = self.bn_check(&gamma, &beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm running statistics length mismatch"));
        }
        let v = self.value();
        let x = v.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gam, bet) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    xhat[k] = (x[k] - mean[ci]) * inv_std[ci];
                    y[k] = gam.data()[ci] * xhat[k] + bet.data()[ci];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(
            Tensor::new(v.shape(), y)?,
            Op::BatchNormEval {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects flat elements; the result is rank 1.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if idx.is_empty() {
            return Err(Error::dim("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} elements",
                v.len()
            )));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        Ok(self.unary(
            Tensor::new(&[idx.len()], data)?,
            Op::Gather {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Euclidean distances between the rows of an `n×d` matrix.
    pub fn pairwise_distances(&self) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("pairwise_distances expects n×d, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let x = v.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let sq: f64 = (0..d).map(|c| (x[i * d + c] - x[j * d + c]).powi(2)).sum();
                let dist = sq.sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        Ok(self.unary(
            Tensor::new(&[n, n], out)?,
            Op::PairwiseDist { x: self.id, n, d },
        ))
    }

    /// For a `B×d×P` tensor, maps every length-`d` column (fixed batch and
    /// position) to `(x − mean) / (std + eps)` with the population std.
    pub fn standardize(&self, eps: f64) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("standardize expects B×d×P, got {s:?}")));
        }
        let (b, d, p) = (s[0], s[1], s[2]);
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        let inv_d = 1.0 / d as f64;
        for bi in 0..b {
            let blk = bi * d * p;
            let mut mean = vec![0.0; p];
            for c in 0..d {
                for (m, xv) in mean.iter_mut().zip(&x[blk + c * p..blk + (c + 1) * p]) {
                    *m += xv;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_d);
            let mut var = vec![0.0; p];
            for c in 0..d {
                for ((acc, xv), m) in var.iter_mut().zip(&x[blk + c * p..blk + (c + 1) * p]).zip(&mean) {
                    *acc += (xv - m).powi(2);
                }
            }
            let scale: Vec<f64> = var.iter().map(|v| 1.0 / ((v * inv_d).sqrt() + eps)).collect();
            for c in 0..d {
                let row = blk + c * p;
                for pi in 0..p {
                    y[row + pi] = (x[row + pi] - mean[pi]) * scale[pi];
                }
            }
        }
        Ok(self.unary(
            Tensor::new(s, y)?,
            Op::Standardize {
                x: self.id,
                d,
                p,
                eps,
            },
        ))
    }

    /// Cross-frame correlation of descriptor columns within each clip.
    ///
    /// Input is `(N·T)×d×P`: for every frame, `P` descriptors of length `d`
    /// stored as columns. Output is `(N·T)×((T−1)·P)×P` where, for frame
    /// `t` of a clip, row `slot(k, q)` and column `p` hold
    /// `Σ_c x[k][c][q] · x[t][c][p] / d`. Slots run over the other frames
    /// `k ≠ t` in ascending order, then over `q`.
    pub fn cross_frame_correlation(&self, clip_len: usize) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!(
                "cross_frame_correlation expects (N·T)×d×P, got {s:?}"
            )));
        }
        if clip_len < 2 || s[0] % clip_len != 0 {
            return Err(Error::dim(format!(
                "cross_frame_correlation needs clip length >= 2 dividing {} frames, got {clip_len}",
                s[0]
            )));
        }
        let (frames, d, p) = (s[0], s[1], s[2]);
        let x = v.data();
        let inv_d = 1.0 / d as f64;
        let block = p * p;
        let frame_out = (clip_len - 1) * block;
        let mut out = vec![0.0; frames * frame_out];
        for n in 0..frames / clip_len {
            for t in 0..clip_len {
                let ft = n * clip_len + t;
                let xt = &x[ft * d * p..(ft + 1) * d * p];
                for (slot, k) in (0..clip_len).filter(|&k| k != t).enumerate() {
                    let fk = n * clip_len + k;
                    let xk = &x[fk * d * p..(fk + 1) * d * p];
                    let blk = kernels::bmm_tn(1, p, d, p, xk, xt);
                    let dst = &mut out[ft * frame_out + slot * block..ft * frame_out + (slot + 1) * block];
                    for (o, b) in dst.iter_mut().zip(blk) {
                        *o = b * inv_d;
                    }
                }
            }
        }
        Ok(self.unary(
            Tensor::new(&[frames, (clip_len - 1) * p, p], out)?,
            Op::CrossFrameCorr {
                x: self.id,
                clip_len,
                d,
                p,
            },
        ))
    }

    /// Reverse-mode sweep from this scalar. Gradients add onto whatever a
    /// previous sweep left; call [`Graph::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        let n = self.value().len();
        if n != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.graph.backward_from(self.id);
        Ok(())
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
