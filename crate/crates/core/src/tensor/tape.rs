use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Silu(Var),
    Sqrt(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    AttentionHead {
        qkv: Var,
        head: usize,
        n_heads: usize,
        batch: usize,
        seq: usize,
        probs: Vec<T>,
    },
    Blend {
        v: Var,
        weights: Var,
        index: usize,
        alt: Var,
        rows: Vec<usize>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records ops in execution order; [`Tape::backward`] walks them in reverse.
///
/// A tape supports one backward pass. Intermediate gradients are dropped as
/// soon as they have been propagated; leaf gradients stay readable until
/// [`Tape::reset`].
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a grad-enabled leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.data.len(), value.shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- ops ----------------------------------------------------------------

    /// `[.., k] × [k, n] -> [.., n]`; `a` is viewed as a row-major matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.shape.len() != 2 || av.cols() != bv.shape[0] {
            return Err(shape_err("matmul", &av.shape, &bv.shape));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &av.data,
            (k as isize, 1),
            &bv.data,
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(shape_err(name, &av.shape, &bv.shape));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sqrt(x), rg)
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        if gv.shape.len() != 1 || gv.shape[0] != xv.cols() {
            return Err(shape_err("rmsnorm", &xv.shape, &gv.shape));
        }
        let d = xv.cols();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut data = Vec::with_capacity(xv.numel());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in xv.data.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(&gv.data).map(|(&v, &g)| v * inv * g));
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape.len() != 2 {
            return Err(shape_err("embed", &tv.shape, &[]));
        }
        let (vocab, d) = (tv.shape[0], tv.shape[1]);
        if ids.is_empty() {
            return Err(Error::contract("embed: empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", &lv.shape, &[targets.len()]));
        }
        let mut probs = lv.data.clone();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::Index {
                    what: "target token",
                    index: t,
                    bound: vocab,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data.iter().copied().sum::<T>() / T::from_usize(xv.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks rows of a matrix view, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return Err(Error::contract("select_rows: empty row list"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `(row, col)` entries of a matrix view into a vector.
    pub fn gather(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.rows(), xv.cols());
        if entries.is_empty() {
            return Err(Error::contract("gather: no entries"));
        }
        let mut index = Vec::with_capacity(entries.len());
        for &(r, col) in entries {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            if col >= c {
                return Err(Error::Index {
                    what: "column",
                    index: col,
                    bound: c,
                });
            }
            index.push(r * c + col);
        }
        let data = index.iter().map(|&i| xv.data[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::Gather { x, index }, rg))
    }

    /// Causal scaled-dot-product attention for one head.
    ///
    /// `qkv` is `[batch·seq, 3·d]` laid out as `[q | k | v]`, each block split
    /// into `n_heads` contiguous slices of width `d / n_heads`. Returns the
    /// head's mixed values, `[batch·seq, d_head]`.
    pub fn attention_head(
        &mut self,
        qkv: Var,
        head: usize,
        n_heads: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let qv = &self.nodes[qkv.0].value;
        if qv.rows() != batch * seq || qv.cols() % (3 * n_heads) != 0 || head >= n_heads {
            return Err(shape_err(
                "attention_head",
                &qv.shape,
                &[batch * seq, 3 * n_heads],
            ));
        }
        let width = qv.cols();
        let d = width / 3;
        let dh = d / n_heads;
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let x = &qv.data;
        let mut probs = vec![T::zero(); batch * seq * seq];
        let mut out = vec![T::zero(); batch * seq * dh];
        for b in 0..batch {
            for i in 0..seq {
                let qi = &x[(b * seq + i) * width + qo..][..dh];
                let p = &mut probs[(b * seq + i) * seq..][..seq];
                for j in 0..=i {
                    let kj = &x[(b * seq + j) * width + ko..][..dh];
                    p[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let o = &mut out[(b * seq + i) * dh..][..dh];
                for j in 0..=i {
                    let vj = &x[(b * seq + j) * width + vo..][..dh];
                    for (o, &v) in o.iter_mut().zip(vj) {
                        *o = *o + p[j] * v;
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![batch * seq, dh],
            data: out,
        };
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            t,
            Op::AttentionHead {
                qkv,
                head,
                n_heads,
                batch,
                seq,
                probs,
            },
            rg,
        ))
    }

    /// Convex blend of selected rows with replacement rows.
    ///
    /// Row `rows[j]` of the output is `w·v[rows[j]] + (1 − w)·alt[j]` with
    /// `w = weights[index]`; every other row passes through unchanged.
    pub fn blend(
        &mut self,
        v: Var,
        weights: Var,
        index: usize,
        alt: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let (vv, wv, av) = (
            &self.nodes[v.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[alt.0].value,
        );
        if index >= wv.numel() {
            return Err(Error::Index {
                what: "mask weight",
                index,
                bound: wv.numel(),
            });
        }
        if av.cols() != vv.cols() || av.rows() != rows.len() {
            return Err(shape_err("blend", &vv.shape, &av.shape));
        }
        let c = vv.cols();
        let w = wv.data[index];
        let keep = T::one() - w;
        let mut data = vv.data.clone();
        let mut seen = vec![false; vv.rows()];
        for (j, &r) in rows.iter().enumerate() {
            if r >= vv.rows() {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: vv.rows(),
                });
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::contract(format!("blend: row {r} listed twice")));
            }
            for (o, &a) in data[r * c..(r + 1) * c].iter_mut().zip(av.row(j)) {
                *o = w * *o + keep * a;
            }
        }
        let t = Tensor {
            shape: vv.shape.clone(),
            data,
        };
        let rg = self.rg(&[v, weights, alt]);
        Ok(self.push(
            t,
            Op::Blend {
                v,
                weights,
                index,
                alt,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Populates gradients of every grad-enabled ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; reset it before recording a new graph",
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "loss is not reachable from any grad-enabled tensor",
            ));
        }
        self.backward_done = true;

        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, node, &g);
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Returns the gradient buffer for `v` if it wants one, allocating zeros.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.shape[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                // da[m×k] += g[m×n] · bᵀ
                T::gemm(m, n, k, g, (n as isize, 1), &bv.data, (1, n as isize), da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // db[k×n] += aᵀ · g
                T::gemm(k, m, n, &av.data, (1, k as isize), g, (n as isize, 1), db, true);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(&bv.data) {
                    *d = *d + g * y;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(&av.data) {
                    *d = *d + g * x;
                }
            }
        }
        Op::Affine(x, s) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + *s * g);
            }
        }
        Op::Silu(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(&xv.data) {
                    let s = sigmoid(x);
                    *d = *d + g * s * (T::one() + x * (T::one() - s));
                }
            }
        }
        Op::Sqrt(x) => {
            let half = T::cast_from_f32(0.5);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(&node.value.data) {
                    *d = *d + g * half / y;
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data.chunks(c)) {
                    let s = dot(g, y);
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + y * (g - s);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (val(*x), val(*gain));
            let dim = xv.cols();
            let inv_d = T::one() / T::from_usize(dim).unwrap();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &g[r * dim..(r + 1) * dim];
                    // Σ x ⊙ gain ⊙ dy
                    let proj = xr
                        .iter()
                        .zip(gr)
                        .zip(&gv.data)
                        .fold(T::zero(), |acc, ((&x, &g), &w)| acc + x * g * w);
                    let k = proj * inv * inv * inv * inv_d;
                    for (((d, &x), &g), &w) in dx[r * dim..(r + 1) * dim]
                        .iter_mut()
                        .zip(xr)
                        .zip(gr)
                        .zip(&gv.data)
                    {
                        *d = *d + inv * w * g - x * k;
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &g[r * dim..(r + 1) * dim];
                    for ((d, &x), &g) in dg.iter_mut().zip(xr).zip(gr) {
                        *d = *d + x * inv * g;
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            let dim = val(*table).cols();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &g) in dt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                    {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let vocab = val(*logits).cols();
            let scale = g[0] / T::from_usize(targets.len()).unwrap();
            if let Some(d) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut d[r * vocab..(r + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *d = *d + scale * p;
                    }
                    row[t] = row[t] - scale;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean(x) => {
            let n = T::from_usize(val(*x).numel()).unwrap();
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d = *d + g[0] / n);
            }
        }
        Op::SelectRows { x, rows } => {
            let c = val(*x).cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for (j, &r) in rows.iter().enumerate() {
                    for (d, &g) in d[r * c..(r + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for (&i, &g) in index.iter().zip(g) {
                    d[i] = d[i] + g;
                }
            }
        }
        Op::AttentionHead {
            qkv,
            head,
            n_heads,
            batch,
            seq,
            probs,
        } => {
            let xv = val(*qkv);
            let Some(dx) = slot(nodes, grads, *qkv) else {
                return;
            };
            let (batch, seq) = (*batch, *seq);
            let width = xv.cols();
            let d = width / 3;
            let dh = d / n_heads;
            let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let x = &xv.data;
            let mut ds = vec![T::zero(); seq];
            for b in 0..batch {
                for i in 0..seq {
                    let gi = &g[(b * seq + i) * dh..][..dh];
                    let p = &probs[(b * seq + i) * seq..][..seq];
                    // dv_j += p_ij · dz_i ; dp_j = dz_i · v_j
                    for j in 0..=i {
                        let vrow = (b * seq + j) * width + vo;
                        ds[j] = dot(gi, &x[vrow..vrow + dh]);
                        for (d, &g) in dx[vrow..vrow + dh].iter_mut().zip(gi) {
                            *d = *d + p[j] * g;
                        }
                    }
                    let pdp = (0..=i).fold(T::zero(), |acc, j| acc + p[j] * ds[j]);
                    for j in 0..=i {
                        ds[j] = p[j] * (ds[j] - pdp) * scale;
                    }
                    let qrow = (b * seq + i) * width + qo;
                    for j in 0..=i {
                        let krow = (b * seq + j) * width + ko;
                        for t in 0..dh {
                            dx[qrow + t] = dx[qrow + t] + ds[j] * x[krow + t];
                            dx[krow + t] = dx[krow + t] + ds[j] * x[qrow + t];
                        }
                    }
                }
            }
        }
        Op::Blend {
            v,
            weights,
            index,
            alt,
            rows,
        } => {
            let (vv, wv, av) = (val(*v), val(*weights), val(*alt));
            let c = vv.cols();
            let w = wv.data[*index];
            if let Some(d) = slot(nodes, grads, *v) {
                let mut blended = vec![false; vv.rows()];
                for &r in rows {
                    blended[r] = true;
                }
                for (r, (d, g)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    let f = if blended[r] { w } else { T::one() };
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d = *d + f * g;
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *alt) {
                for (j, &r) in rows.iter().enumerate() {
                    for (d, &g) in d[j * c..(j + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d = *d + (T::one() - w) * g;
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *weights) {
                let mut acc = T::zero();
                for (j, &r) in rows.iter().enumerate() {
                    for ((&g, &x), &a) in g[r * c..(r + 1) * c]
                        .iter()
                        .zip(vv.row(r))
                        .zip(av.row(j))
                    {
                        acc = acc + g * (x - a);
                    }
                }
                d[*index] = d[*index] + acc;
            }
        }
    }
}
