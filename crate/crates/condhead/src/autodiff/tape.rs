//! Reverse-mode tape over dense f64 tensors.
//!
//! Operations are appended in execution order, so the node list is already a
//! topological order of the graph; `backward` walks it in reverse and
//! accumulates gradients additively on fan-out. Nodes that cannot reach a
//! `requires_grad` leaf are skipped entirely.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// mat[r,c] + bias[c] broadcast over rows
    AddBias(Var, Var),
    /// x + scalar var broadcast over every element
    AddScalar(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        c_in: usize,
        c_out: usize,
        s: usize,
    },
    SoftmaxTemp {
        x: Var,
        tau: f64,
    },
    WeightedSum {
        w: Var,
        items: Vec<Var>,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Reshape(Var),
    Sum(Var),
    SmoothL1(Var, Var),
    BceLogits {
        logits: Var,
        targets: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations with reverse-mode gradient rules.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    sabotage_matmul_db: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test-only canary hook: flips the sign of the matmul dB rule so the
    /// gradient checker can prove it detects a broken rule.
    #[doc(hidden)]
    pub fn sabotage_matmul_grad_for_tests(&mut self) {
        self.sabotage_matmul_db = true;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Enter a tensor as a graph leaf; its `requires_grad` flag decides
    /// whether gradients are accumulated for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf with `requires_grad` stripped (inputs, targets, features).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (self.value(mat), self.value(bias));
        let cols = *tm.shape().last().unwrap();
        if tb.shape().len() != 1 || tb.len() != cols {
            return Err(dim_err("add_bias", tm.shape(), tb.shape()));
        }
        let mut data = vec![0.0; tm.len()];
        kernels::add_bias_rows(tm.data(), tb.data(), &mut data);
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        let needs = self.needs(mat) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(mat, bias), needs))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if !ts.is_scalar() {
            return Err(dim_err("add_scalar", tx.shape(), ts.shape()));
        }
        let sv = ts.item();
        let data = tx.data().iter().map(|&v| v + sv).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::AddScalar(x, s), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| c * v).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, c), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut data);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b, m, k, n }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut data = vec![0.0; tx.len()];
        kernels::relu(tx.data(), &mut data);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu(x), needs))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// x: [C,S,S], kernel: [O,C,3,3], bias: [O] → [O,S,S].
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let tb = self.value(bias);
        if tx.shape().len() != 3 || tx.shape()[1] != tx.shape()[2] {
            return Err(dim_err("conv2d input", tx.shape(), &[]));
        }
        if tk.shape().len() != 4 || tk.shape()[2] != 3 || tk.shape()[3] != 3 {
            return Err(dim_err("conv2d kernel", tk.shape(), &[3, 3]));
        }
        if tk.shape()[1] != tx.shape()[0] {
            return Err(dim_err("conv2d channels", tx.shape(), tk.shape()));
        }
        if tb.shape() != [tk.shape()[0]] {
            return Err(dim_err("conv2d bias", tb.shape(), &tk.shape()[..1]));
        }
        let (c_in, s) = (tx.shape()[0], tx.shape()[1]);
        let c_out = tk.shape()[0];
        let mut data = vec![0.0; c_out * s * s];
        kernels::conv3x3(tx.data(), tk.data(), tb.data(), c_in, c_out, s, &mut data);
        let out = Tensor::new(vec![c_out, s, s], data)?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                c_in,
                c_out,
                s,
            },
            needs,
        ))
    }

    /// Temperature softmax over a 1-d logit vector, max-stabilized.
    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
        }
        let tx = self.value(x);
        if tx.shape().len() != 1 {
            return Err(dim_err("softmax_temp", tx.shape(), &[]));
        }
        if !tx.all_finite() {
            return Err(Error::Domain("softmax_temp on non-finite logits".into()));
        }
        let mut data = vec![0.0; tx.len()];
        kernels::softmax_temp(tx.data(), tau, &mut data);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxTemp { x, tau }, needs))
    }

    /// Convex parameter aggregation: out = Σ_h w[h]·items[h].
    pub fn weighted_sum(&mut self, w: Var, items: &[Var]) -> Result<Var> {
        let tw = self.value(w);
        if tw.shape().len() != 1 || tw.len() != items.len() {
            return Err(dim_err("weighted_sum", tw.shape(), &[items.len()]));
        }
        let shape = self.value(items[0]).shape().to_vec();
        for &it in items {
            if self.value(it).shape() != shape.as_slice() {
                return Err(dim_err("weighted_sum item", self.value(it).shape(), &shape));
            }
        }
        let slices: Vec<&[f64]> = items.iter().map(|&v| self.value(v).data()).collect();
        let mut data = vec![0.0; slices[0].len()];
        kernels::weighted_sum(tw.data(), &slices, &mut data);
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(w) || items.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::WeightedSum {
                w,
                items: items.to_vec(),
            },
            needs,
        ))
    }

    /// View a flat range of `x` as a tensor of `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let len: usize = shape.iter().product();
        if offset + len > tx.len() {
            return Err(dim_err("slice", tx.shape(), &shape));
        }
        let data = tx.data()[offset..offset + len].to_vec();
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Slice { x, offset }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let len: usize = shape.iter().product();
        if len != tx.len() {
            return Err(dim_err("reshape", tx.shape(), &shape));
        }
        let out = Tensor::new(shape, tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut acc = 0.0;
        for &v in tx.data() {
            acc += v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(x), needs))
    }

    /// Scalar dot product of two equal-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    /// Mean smooth-L1 between prediction and target.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(dim_err("smooth_l1", tp.shape(), tt.shape()));
        }
        let loss = kernels::smooth_l1_mean(tp.data(), tt.data());
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1(pred, target), needs))
    }

    /// Mean binary cross-entropy on logits against {0,1} targets.
    pub fn bce_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(targets));
        if tl.shape() != tt.shape() {
            return Err(dim_err("bce_logits", tl.shape(), tt.shape()));
        }
        if tt.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Domain("bce_logits target must be binary".into()));
        }
        let loss = kernels::bce_logits_mean(tl.data(), tt.data());
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits { logits, targets },
            needs,
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Reverse pass from a scalar loss node. Gradients of earlier backward
    /// calls on the same tape are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // Safety note: `apply_backward` only reads node values and mutates
        // grads of strictly earlier nodes, so the temporary copies below keep
        // the borrow checker satisfied without aliasing hazards.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
                self.acc(b, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
            }
            Op::AddBias(mat, bias) => {
                let (mat, bias) = (*mat, *bias);
                let cols = self.nodes[bias.0].value.len();
                self.acc(mat, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
                self.acc(bias, |d| {
                    for row in g.chunks(cols) {
                        for (dv, &gv) in d.iter_mut().zip(row.iter()) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::AddScalar(x, s) => {
                let (x, s) = (*x, *s);
                self.acc(x, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
                self.acc(s, |d| {
                    let mut acc = 0.0;
                    for &gv in g {
                        acc += gv;
                    }
                    d[0] += acc;
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |d| {
                    for ((dv, &gv), &x) in d.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *dv += gv * x;
                    }
                });
                self.acc(b, |d| {
                    for ((dv, &gv), &x) in d.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *dv += gv * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.acc(x, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += c * gv;
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b) = (*a, *b);
                let (m, k, n) = (*m, *k, *n);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |d| kernels::matmul_acc_nt(g, &bv, m, k, n, d));
                let flip = self.sabotage_matmul_db;
                self.acc(b, |d| {
                    if flip {
                        let mut tmp = vec![0.0; d.len()];
                        kernels::matmul_acc_tn(&av, g, m, k, n, &mut tmp);
                        for (dv, tv) in d.iter_mut().zip(tmp.iter()) {
                            *dv -= tv;
                        }
                    } else {
                        kernels::matmul_acc_tn(&av, g, m, k, n, d);
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(x, |d| {
                    for ((dv, &gv), &v) in d.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if v > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                c_in,
                c_out,
                s,
            } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let (c_in, c_out, s) = (*c_in, *c_out, *s);
                let xv = self.nodes[x.0].value.data().to_vec();
                let kv = self.nodes[kernel.0].value.data().to_vec();
                self.acc(x, |d| kernels::conv3x3_acc_dx(g, &kv, c_in, c_out, s, d));
                self.acc(kernel, |d| kernels::conv3x3_acc_dk(&xv, g, c_in, c_out, s, d));
                self.acc(bias, |d| kernels::conv3x3_acc_db(g, c_out, s, d));
            }
            Op::SoftmaxTemp { x, tau } => {
                let (x, tau) = (*x, *tau);
                let y = self.nodes[i].value.data().to_vec();
                let mut gy = 0.0;
                for (&gv, &yv) in g.iter().zip(y.iter()) {
                    gy += gv * yv;
                }
                self.acc(x, |d| {
                    for ((dv, &gv), &yv) in d.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *dv += yv * (gv - gy) / tau;
                    }
                });
            }
            Op::WeightedSum { w, items } => {
                let w = *w;
                let items = items.clone();
                let wv = self.nodes[w.0].value.data().to_vec();
                for (h, &item) in items.iter().enumerate() {
                    let iv = self.nodes[item.0].value.data().to_vec();
                    self.acc(w, |d| {
                        d[h] += kernels::dot(&iv, g);
                    });
                    let wh = wv[h];
                    self.acc(item, |d| {
                        for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                            *dv += wh * gv;
                        }
                    });
                }
            }
            Op::Slice { x, offset } => {
                let (x, offset) = (*x, *offset);
                self.acc(x, |d| {
                    for (dv, &gv) in d[offset..offset + g.len()].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
            }
            Op::Reshape(x) => {
                let x = *x;
                self.acc(x, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                });
            }
            Op::Sum(x) => {
                let x = *x;
                let g0 = g[0];
                self.acc(x, |d| {
                    for dv in d.iter_mut() {
                        *dv += g0;
                    }
                });
            }
            Op::SmoothL1(pred, target) => {
                let (pred, target) = (*pred, *target);
                let pv = self.nodes[pred.0].value.data().to_vec();
                let tv = self.nodes[target.0].value.data().to_vec();
                let n = pv.len() as f64;
                let g0 = g[0];
                self.acc(pred, |d| {
                    for ((dv, &p), &t) in d.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *dv += g0 * (p - t).clamp(-1.0, 1.0) / n;
                    }
                });
                self.acc(target, |d| {
                    for ((dv, &p), &t) in d.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *dv -= g0 * (p - t).clamp(-1.0, 1.0) / n;
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                let zv = self.nodes[logits.0].value.data().to_vec();
                let tv = self.nodes[targets.0].value.data().to_vec();
                let n = zv.len() as f64;
                let g0 = g[0];
                self.acc(logits, |d| {
                    for ((dv, &z), &t) in d.iter_mut().zip(zv.iter()).zip(tv.iter()) {
                        *dv += g0 * (kernels::sigmoid(z) - t) / n;
                    }
                });
                self.acc(targets, |d| {
                    for (dv, &z) in d.iter_mut().zip(zv.iter()) {
                        *dv -= g0 * z / n;
                    }
                });
            }
        }
    }
}
