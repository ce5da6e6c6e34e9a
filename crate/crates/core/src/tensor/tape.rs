use rand::Rng;

use super::{
    broadcast_index_map, broadcast_shape, gemm, numel, permute_index_map, Mask, Result, Tensor,
    TensorError,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (lhs, rhs, out) matrix offsets, in elements.
    blocks: Vec<(usize, usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    MaskedSoftmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, scale: Vec<f64> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in execution order, so
/// every node's inputs precede it and a reverse sweep is a valid
/// topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf. It receives gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        // Nothing upstream needs gradients: drop the saved backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product over the last two axes. Leading batch axes
    /// broadcast right-aligned.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;

        let plan = if batch_b.is_empty() {
            // Shared rhs: fold every lhs batch row into one tall matrix.
            let rows = numel(batch_a) * m;
            MatMulPlan {
                m: rows,
                k,
                n,
                blocks: vec![(0, 0, 0)],
            }
        } else {
            let map_a = broadcast_index_map(&batch, batch_a);
            let map_b = broadcast_index_map(&batch, batch_b);
            let blocks = map_a
                .iter()
                .zip(&map_b)
                .enumerate()
                .map(|(i, (&ia, &ib))| (ia * m * k, ib * k * n, i * m * n))
                .collect();
            MatMulPlan { m, k, n, blocks }
        };

        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let va = self.value(a);
            let vb = self.value(b);
            for &(ao, bo, co) in &plan.blocks {
                gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    &va[ao..],
                    false,
                    &vb[bo..],
                    false,
                    &mut out[co..],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, out_shape, Op::MatMul { a, b, plan }, rg))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&out_shape, sa);
            let mb = broadcast_index_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out, out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Relu { a }, rg)
    }

    /// Softmax over the last axis restricted to `mask`-allowed entries.
    ///
    /// Blocked entries are excluded from both the max and the normalizer and
    /// come out as exactly `0.0`. The mask broadcasts over leading axes.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ms = mask.shape();
        let mismatch = || TensorError::Shape {
            op: "masked_softmax",
            lhs: shape.clone(),
            rhs: ms.to_vec(),
        };
        if shape.is_empty() || ms.is_empty() || ms[ms.len() - 1] != shape[shape.len() - 1] {
            return Err(mismatch());
        }
        let cols = shape[shape.len() - 1];
        let row_shape = &shape[..shape.len() - 1];
        let mask_rows = &ms[..ms.len() - 1];
        match broadcast_shape(row_shape, mask_rows) {
            Some(s) if s == row_shape => {}
            _ => return Err(mismatch()),
        }
        let row_map = broadcast_index_map(row_shape, mask_rows);
        let x = self.value(a);
        let md = mask.data();
        let mut out = vec![0.0; x.len()];
        for (r, &mr) in row_map.iter().enumerate() {
            let xs = &x[r * cols..(r + 1) * cols];
            let allowed = &md[mr * cols..(mr + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (&v, &ok) in xs.iter().zip(allowed) {
                if ok && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyMaskRow { row: r });
            }
            let ys = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for ((y, &v), &ok) in ys.iter_mut().zip(xs).zip(allowed) {
                if ok {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            let inv = 1.0 / sum;
            ys.iter_mut().for_each(|y| *y *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, shape, Op::MaskedSoftmax { a }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(TensorError::Invalid {
            op: "log_softmax",
            msg: "scalar input".into(),
        })?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (xs, ys) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (y, v) in ys.iter_mut().zip(xs) {
                *y = v - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, shape, Op::LogSoftmax { a }, rg))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xs = &xv[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xs[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let map = permute_index_map(&shape, perm);
        let v = self.value(a);
        let out = map.iter().map(|&i| v[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            out_shape,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var, dim0: usize, dim1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if dim0 >= rank || dim1 >= rank {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("axes ({dim0}, {dim1}) out of range for rank {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(dim0, dim1);
        self.permute(a, &perm)
    }

    /// Row lookup into a `[rows, d]` table. The output has shape
    /// `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(index_shape) != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: ts,
                rhs: index_shape.to_vec(),
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("index {bad} out of range for table with {rows} rows"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            shape,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. A `rate` of zero returns `a` unchanged; callers
    /// skip this op entirely in evaluation mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(out, shape, Op::Dropout { a, scale }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s], vec![], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, d) in slot.iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::MatMul { a, b, plan } => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    if nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, nodes, *a);
                        for &(ao, bo, co) in &plan.blocks {
                            gemm(m, n, k, &g[co..], false, &vb[bo..], true, &mut ga[ao..], true);
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, nodes, *b);
                        for &(ao, bo, co) in &plan.blocks {
                            gemm(k, m, n, &va[ao..], true, &g[co..], false, &mut gb[bo..], true);
                        }
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    for (v, s) in [(*a, 1.0), (*b, sign)] {
                        if nodes[v.0].requires_grad {
                            let map = reduce_map(&node.shape, &nodes[v.0].shape);
                            let gv = slot(&mut grads, nodes, v);
                            match map {
                                None => gv.iter_mut().zip(&g).for_each(|(x, d)| *x += s * d),
                                Some(map) => {
                                    for (j, d) in map.iter().zip(&g) {
                                        gv[*j] += s * d;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if !nodes[v.0].requires_grad {
                            continue;
                        }
                        let vo = &nodes[other.0].value;
                        let mv = reduce_map(&node.shape, &nodes[v.0].shape);
                        let mo = reduce_map(&node.shape, &nodes[other.0].shape);
                        let gv = slot(&mut grads, nodes, v);
                        for (idx, d) in g.iter().enumerate() {
                            let jv = mv.as_ref().map_or(idx, |m| m[idx]);
                            let jo = mo.as_ref().map_or(idx, |m| m[idx]);
                            gv[jv] += d * vo[jo];
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let ga = slot(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(x, d)| *x += factor * d);
                }
                Op::Relu { a } => {
                    let y = &node.value;
                    let ga = slot(&mut grads, nodes, *a);
                    for ((x, d), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        if yv > 0.0 {
                            *x += d;
                        }
                    }
                }
                Op::MaskedSoftmax { a } => {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.value;
                    let ga = slot(&mut grads, nodes, *a);
                    for ((ys, gs), xs) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(p, d)| p * d).sum();
                        for ((x, &p), &d) in xs.iter_mut().zip(ys).zip(gs) {
                            *x += p * (d - dot);
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.value;
                    let ga = slot(&mut grads, nodes, *a);
                    for ((ys, gs), xs) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gs.iter().sum();
                        for ((x, &lp), &d) in xs.iter_mut().zip(ys).zip(gs) {
                            *x += d - lp.exp() * total;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = *node.shape.last().unwrap();
                    let gv = &nodes[gain.0].value;
                    if nodes[gain.0].requires_grad {
                        let gg = slot(&mut grads, nodes, *gain);
                        for (hs, ds) in xhat.chunks(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                gg[j] += ds[j] * hs[j];
                            }
                        }
                    }
                    if nodes[bias.0].requires_grad {
                        let gb = slot(&mut grads, nodes, *bias);
                        for ds in g.chunks(d) {
                            for j in 0..d {
                                gb[j] += ds[j];
                            }
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, nodes, *x);
                        let inv_d = 1.0 / d as f64;
                        let mut dh = vec![0.0; d];
                        for (r, ((hs, ds), xs)) in
                            xhat.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                        {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                dh[j] = ds[j] * gv[j];
                                sum_dh += dh[j];
                                sum_dh_h += dh[j] * hs[j];
                            }
                            let rs = rstd[r];
                            for j in 0..d {
                                xs[j] += rs * (dh[j] - inv_d * sum_dh - hs[j] * inv_d * sum_dh_h);
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    let ga = slot(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
                }
                Op::Permute { a, perm } => {
                    let map = permute_index_map(&nodes[a.0].shape, perm);
                    let ga = slot(&mut grads, nodes, *a);
                    for (&src, d) in map.iter().zip(&g) {
                        ga[src] += d;
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    let gt = slot(&mut grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &mut gt[id * d..(id + 1) * d];
                        row.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, dv)| *x += dv);
                    }
                }
                Op::Dropout { a, scale } => {
                    let ga = slot(&mut grads, nodes, *a);
                    for ((x, d), s) in ga.iter_mut().zip(&g).zip(scale) {
                        *x += d * s;
                    }
                }
                Op::Sum { a } => {
                    let ga = slot(&mut grads, nodes, *a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
        Ok(())
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Index map from an output of shape `out` back into an input of shape
/// `input` that was broadcast to it; `None` when the shapes are equal.
fn reduce_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        None
    } else {
        Some(broadcast_index_map(out, input))
    }
}
