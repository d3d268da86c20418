//! Head architectures over flat parameter vectors.
//!
//! Every head (expert, class-agnostic, generated) works on a single flat
//! parameter tensor with a fixed segment layout, so expert aggregation and
//! hypernetwork generation can treat parameters as plain vectors and the
//! apply functions carve out the layer views.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_uniform, kernels, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Two-layer fully connected net with a ReLU hidden layer; used for the
/// aggregation-weight generators and the parameter generators.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Tensor, // [in, hidden]
    pub b1: Tensor, // [hidden]
    pub w2: Tensor, // [hidden, out]
    pub b2: Tensor, // [out]
}

/// Tape handles for one [`Mlp`]'s parameters.
#[derive(Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Tensor::new(vec![input, hidden], init_uniform(rng, input, input * hidden))
                .unwrap()
                .with_grad(),
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2: Tensor::new(vec![hidden, output], init_uniform(rng, hidden, hidden * output))
                .unwrap()
                .with_grad(),
            b2: Tensor::zeros(vec![output]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn leaf(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// x: [1, in] → [1, out]
    pub fn apply_on_tape(tape: &mut Tape, vars: MlpVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_bias(h, vars.b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, vars.w2)?;
        tape.add_bias(y, vars.b2)
    }

    /// Tape-free forward, kernel-identical to the tape path.
    pub fn apply_plain(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(dim_err("mlp input", &[x.len()], self.w1.shape()));
        }
        let hidden = self.w1.shape()[1];
        let out = self.out_dim();
        let mut h = vec![0.0; hidden];
        kernels::matmul(x, self.w1.data(), 1, self.in_dim(), hidden, &mut h);
        let mut hb = vec![0.0; hidden];
        kernels::add_bias_rows(&h, self.b1.data(), &mut hb);
        let mut hr = vec![0.0; hidden];
        kernels::relu(&hb, &mut hr);
        let mut y = vec![0.0; out];
        kernels::matmul(&hr, self.w2.data(), 1, hidden, out, &mut y);
        let mut yb = vec![0.0; out];
        kernels::add_bias_rows(&y, self.b2.data(), &mut yb);
        Ok(yb)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Box regression head: fc(feat→hidden), ReLU, fc(hidden→4).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxHeadArch {
    pub feat_dim: usize,
    pub hidden: usize,
}

impl BoxHeadArch {
    pub fn param_len(&self) -> usize {
        self.feat_dim * self.hidden + self.hidden + self.hidden * 4 + 4
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.feat_dim * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * 4;
        [w1, b1, w2, b2]
    }

    /// Fan-in-scaled weights, zero biases, flattened into the segment layout.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(self.param_len());
        data.extend(init_uniform(rng, self.feat_dim, self.feat_dim * self.hidden));
        data.extend(std::iter::repeat(0.0).take(self.hidden));
        data.extend(init_uniform(rng, self.hidden, self.hidden * 4));
        data.extend(std::iter::repeat(0.0).take(4));
        Tensor::new(vec![self.param_len()], data).unwrap().with_grad()
    }

    /// feats: [n, feat_dim] → deltas [n, 4]
    pub fn apply_on_tape(&self, tape: &mut Tape, theta: Var, feats: Var) -> Result<Var> {
        self.check_theta(tape.value(theta))?;
        let [o_w1, o_b1, o_w2, o_b2] = self.offsets();
        let w1 = tape.slice(theta, o_w1, vec![self.feat_dim, self.hidden])?;
        let b1 = tape.slice(theta, o_b1, vec![self.hidden])?;
        let w2 = tape.slice(theta, o_w2, vec![self.hidden, 4])?;
        let b2 = tape.slice(theta, o_b2, vec![4])?;
        let h = tape.matmul(feats, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, w2)?;
        tape.add_bias(y, b2)
    }

    pub fn apply_plain(&self, theta: &Tensor, feats: &Tensor) -> Result<Tensor> {
        self.check_theta(theta)?;
        if feats.shape().len() != 2 || feats.shape()[1] != self.feat_dim {
            return Err(dim_err("box head input", feats.shape(), &[self.feat_dim]));
        }
        let n = feats.shape()[0];
        let [o_w1, o_b1, o_w2, o_b2] = self.offsets();
        let p = theta.data();
        let w1 = &p[o_w1..o_b1];
        let b1 = &p[o_b1..o_w2];
        let w2 = &p[o_w2..o_b2];
        let b2 = &p[o_b2..];
        let mut h = vec![0.0; n * self.hidden];
        kernels::matmul(feats.data(), w1, n, self.feat_dim, self.hidden, &mut h);
        let mut hb = vec![0.0; n * self.hidden];
        kernels::add_bias_rows(&h, b1, &mut hb);
        let mut hr = vec![0.0; n * self.hidden];
        kernels::relu(&hb, &mut hr);
        let mut y = vec![0.0; n * 4];
        kernels::matmul(&hr, w2, n, self.hidden, 4, &mut y);
        let mut yb = vec![0.0; n * 4];
        kernels::add_bias_rows(&y, b2, &mut yb);
        Tensor::new(vec![n, 4], yb)
    }

    fn check_theta(&self, theta: &Tensor) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(dim_err("box head params", theta.shape(), &[self.param_len()]));
        }
        Ok(())
    }
}

/// Mask segmentation head: three 3×3 conv layers (channels→hidden→hidden→1)
/// with ReLU between them, operating on an S×S grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskHeadArch {
    pub channels: usize,
    pub hidden: usize,
    pub grid: usize,
}

impl MaskHeadArch {
    pub fn param_len(&self) -> usize {
        let (c, h) = (self.channels, self.hidden);
        (h * c * 9 + h) + (h * h * 9 + h) + (h * 9 + 1)
    }

    fn offsets(&self) -> [usize; 6] {
        let (c, h) = (self.channels, self.hidden);
        let k1 = 0;
        let b1 = k1 + h * c * 9;
        let k2 = b1 + h;
        let b2 = k2 + h * h * 9;
        let k3 = b2 + h;
        let b3 = k3 + h * 9;
        [k1, b1, k2, b2, k3, b3]
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let (c, h) = (self.channels, self.hidden);
        let mut data = Vec::with_capacity(self.param_len());
        data.extend(init_uniform(rng, c * 9, h * c * 9));
        data.extend(std::iter::repeat(0.0).take(h));
        data.extend(init_uniform(rng, h * 9, h * h * 9));
        data.extend(std::iter::repeat(0.0).take(h));
        data.extend(init_uniform(rng, h * 9, h * 9));
        data.push(0.0);
        Tensor::new(vec![self.param_len()], data).unwrap().with_grad()
    }

    /// v: [channels, S, S] → logits [S, S]
    pub fn apply_on_tape(&self, tape: &mut Tape, theta: Var, v: Var) -> Result<Var> {
        self.check_theta(tape.value(theta))?;
        let (c, h, s) = (self.channels, self.hidden, self.grid);
        let [o_k1, o_b1, o_k2, o_b2, o_k3, o_b3] = self.offsets();
        let k1 = tape.slice(theta, o_k1, vec![h, c, 3, 3])?;
        let b1 = tape.slice(theta, o_b1, vec![h])?;
        let k2 = tape.slice(theta, o_k2, vec![h, h, 3, 3])?;
        let b2 = tape.slice(theta, o_b2, vec![h])?;
        let k3 = tape.slice(theta, o_k3, vec![1, h, 3, 3])?;
        let b3 = tape.slice(theta, o_b3, vec![1])?;
        let x = tape.conv2d(v, k1, b1)?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, k2, b2)?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, k3, b3)?;
        tape.reshape(x, vec![s, s])
    }

    pub fn apply_plain(&self, theta: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check_theta(theta)?;
        let (c, h, s) = (self.channels, self.hidden, self.grid);
        if v.shape() != [c, s, s] {
            return Err(dim_err("mask head input", v.shape(), &[c, s, s]));
        }
        let [o_k1, o_b1, o_k2, o_b2, o_k3, o_b3] = self.offsets();
        let p = theta.data();
        let plane = s * s;
        let mut x1 = vec![0.0; h * plane];
        kernels::conv3x3(v.data(), &p[o_k1..o_b1], &p[o_b1..o_k2], c, h, s, &mut x1);
        let mut r1 = vec![0.0; h * plane];
        kernels::relu(&x1, &mut r1);
        let mut x2 = vec![0.0; h * plane];
        kernels::conv3x3(&r1, &p[o_k2..o_b2], &p[o_b2..o_k3], h, h, s, &mut x2);
        let mut r2 = vec![0.0; h * plane];
        kernels::relu(&x2, &mut r2);
        let mut x3 = vec![0.0; plane];
        kernels::conv3x3(&r2, &p[o_k3..o_b3], &p[o_b3..], h, 1, s, &mut x3);
        Tensor::new(vec![s, s], x3)
    }

    fn check_theta(&self, theta: &Tensor) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(dim_err("mask head params", theta.shape(), &[self.param_len()]));
        }
        Ok(())
    }
}

/// Generated light box head: one fc layer feat→4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LightBoxArch {
    pub feat_dim: usize,
}

impl LightBoxArch {
    pub fn param_len(&self) -> usize {
        self.feat_dim * 4 + 4
    }

    /// feats: [n, feat_dim] → [n, 4]
    pub fn apply_on_tape(&self, tape: &mut Tape, theta: Var, feats: Var) -> Result<Var> {
        if tape.value(theta).len() != self.param_len() {
            return Err(dim_err(
                "light box params",
                tape.value(theta).shape(),
                &[self.param_len()],
            ));
        }
        let w = tape.slice(theta, 0, vec![self.feat_dim, 4])?;
        let b = tape.slice(theta, self.feat_dim * 4, vec![4])?;
        let y = tape.matmul(feats, w)?;
        tape.add_bias(y, b)
    }

    pub fn apply_plain(&self, theta: &Tensor, feats: &Tensor) -> Result<Tensor> {
        if theta.len() != self.param_len() {
            return Err(dim_err("light box params", theta.shape(), &[self.param_len()]));
        }
        if feats.shape().len() != 2 || feats.shape()[1] != self.feat_dim {
            return Err(dim_err("light box input", feats.shape(), &[self.feat_dim]));
        }
        let n = feats.shape()[0];
        let w = &theta.data()[..self.feat_dim * 4];
        let b = &theta.data()[self.feat_dim * 4..];
        let mut y = vec![0.0; n * 4];
        kernels::matmul(feats.data(), w, n, self.feat_dim, 4, &mut y);
        let mut yb = vec![0.0; n * 4];
        kernels::add_bias_rows(&y, b, &mut yb);
        Tensor::new(vec![n, 4], yb)
    }
}

/// Generated light mask head: one 1×1 conv channels→1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LightMaskArch {
    pub channels: usize,
    pub grid: usize,
}

impl LightMaskArch {
    pub fn param_len(&self) -> usize {
        self.channels + 1
    }

    /// v: [channels, S, S] → logits [S, S]
    pub fn apply_on_tape(&self, tape: &mut Tape, theta: Var, v: Var) -> Result<Var> {
        if tape.value(theta).len() != self.param_len() {
            return Err(dim_err(
                "light mask params",
                tape.value(theta).shape(),
                &[self.param_len()],
            ));
        }
        let (c, s) = (self.channels, self.grid);
        let w = tape.slice(theta, 0, vec![1, c])?;
        let b = tape.slice(theta, c, vec![1])?;
        let flat = tape.reshape(v, vec![c, s * s])?;
        let y = tape.matmul(w, flat)?;
        let y = tape.add_scalar(y, b)?;
        tape.reshape(y, vec![s, s])
    }

    pub fn apply_plain(&self, theta: &Tensor, v: &Tensor) -> Result<Tensor> {
        if theta.len() != self.param_len() {
            return Err(dim_err("light mask params", theta.shape(), &[self.param_len()]));
        }
        let (c, s) = (self.channels, self.grid);
        if v.shape() != [c, s, s] {
            return Err(dim_err("light mask input", v.shape(), &[c, s, s]));
        }
        let w = &theta.data()[..c];
        let b = theta.data()[c];
        let mut y = vec![0.0; s * s];
        kernels::matmul(w, v.data(), 1, c, s * s, &mut y);
        for yv in y.iter_mut() {
            *yv += b;
        }
        Tensor::new(vec![s, s], y)
    }
}
