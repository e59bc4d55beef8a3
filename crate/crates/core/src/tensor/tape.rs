//! Reverse-mode autodiff on a per-forward tape. Every op appends one node
//! holding its eagerly computed value; `backward` walks nodes in reverse
//! creation order (a valid reverse topological order, since ops only
//! reference earlier vars) and accumulates vector-Jacobian products in a
//! fixed order, so repeated runs are bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::conv::{col2im_add, conv_out_len, gemm, im2col};
use crate::tensor::params::{GradMap, ParamId, ParamSet};

/// Handle to a tape node. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// x: [C, H, W] plus a per-channel bias [C].
    BiasChannels { x: Var, b: Var },
    /// y = w x + b with x: [I], w: [O, I], b: [O].
    Affine { x: Var, w: Var, b: Var },
    /// y = w x with x: [I], w: [O, I].
    MatVec { x: Var, w: Var },
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    /// Per trailing-axis vector: v * |v|^2 / ((1 + |v|^2)(|v| + eps)).
    Squash { x: Var, eps: f64 },
    Softmax { x: Var, axis: usize },
    /// Flattens each part and concatenates into a 1-D vector.
    Concat { parts: Vec<Var> },
    /// 1-D window of the flattened input.
    Slice { x: Var, start: usize },
    Reshape { x: Var },
    /// Valid convolutions of one input against a bank of kernel tensors
    /// sharing (k, stride); outputs are channel-stacked. The bank shares a
    /// single im2col unroll across members in both passes.
    ConvBank { x: Var, ws: Vec<Var>, stride: usize },
    /// branches[d]: [O, h, w]; out[(ch*h*w + r*w + c), d] = branch_d[ch, r, c].
    AssembleCaps { branches: Vec<Var> },
    /// caps: [N, di], w: [N, di, do] -> out[N, do]; per-capsule matrix product.
    CapsTransform { caps: Var, w: Var },
    /// preds: [n_in, n_out, d]; coeffs are fixed (non-differentiated) weights.
    WeightedCapsSum {
        preds: Var,
        coeffs: Vec<f32>,
        n_in: usize,
        n_out: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Node gradients from one backward sweep.
#[derive(Debug)]
pub struct BackwardResult {
    grads: Vec<Option<Vec<f32>>>,
}

impl BackwardResult {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; excluded from differentiation.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} does not match {} values", shape, data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Differentiable input that is not a registered parameter.
    pub fn leaf_grad(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} does not match {} values", shape, data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data, true))
    }

    /// Copies a parameter onto the tape. Memoized per tape, so every use of
    /// the same parameter shares one node and its gradient accumulates there.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if id.index() >= self.param_vars.len() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = params.get(id);
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let ng = self.needs(a);
        self.push(Op::Scale(a, factor), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("bias_channels", format!("input rank {} != 3", xs.len())));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "bias_channels",
                format!("bias {:?} does not match {} channels", self.shape(b), c),
            ));
        }
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for (ch, &add) in bias.iter().enumerate() {
            let base = ch * h * w;
            for v in &mut data[base..base + h * w] {
                *v += add;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::BiasChannels { x, b }, vec![c, h, w], data, ng))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (i,) = match self.shape(x) {
            [i] => (*i,),
            s => return Err(Error::shape("affine", format!("input {:?} is not a vector", s))),
        };
        let (o, wi) = match self.shape(w) {
            [o, wi] => (*o, *wi),
            s => return Err(Error::shape("affine", format!("weight {:?} is not a matrix", s))),
        };
        if wi != i || self.shape(b) != [o] {
            return Err(Error::shape(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?} are inconsistent",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let data = matvec_forward(self.data(w), self.data(x), o, i, Some(self.data(b)));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Affine { x, w, b }, vec![o], data, ng))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (i,) = match self.shape(x) {
            [i] => (*i,),
            s => return Err(Error::shape("matvec", format!("input {:?} is not a vector", s))),
        };
        let (o, wi) = match self.shape(w) {
            [o, wi] => (*o, *wi),
            s => return Err(Error::shape("matvec", format!("weight {:?} is not a matrix", s))),
        };
        if wi != i {
            return Err(Error::shape(
                "matvec",
                format!("w {:?} does not accept x {:?}", self.shape(w), self.shape(x)),
            ));
        }
        let data = matvec_forward(self.data(w), self.data(x), o, i, None);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::MatVec { x, w }, vec![o], data, ng))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let ng = self.needs(x);
        self.push(Op::Elu(x), self.nodes[x.0].shape.clone(), data, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), self.nodes[x.0].shape.clone(), data, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.tanh()).collect();
        let ng = self.needs(x);
        self.push(Op::Tanh(x), self.nodes[x.0].shape.clone(), data, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.abs()).collect();
        let ng = self.needs(x);
        self.push(Op::Abs(x), self.nodes[x.0].shape.clone(), data, ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * v).collect();
        let ng = self.needs(x);
        self.push(Op::Square(x), self.nodes[x.0].shape.clone(), data, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(Op::Sum(x), vec![1], vec![s as f32], ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x).max(1);
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(Op::Mean(x), vec![1], vec![(s / n as f64) as f32], ng)
    }

    pub fn squash(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::shape("squash", "rank 0 input"))?;
        if d == 0 {
            return Err(Error::shape("squash", "trailing axis is empty"));
        }
        let mut data = vec![0.0f32; self.numel(x)];
        for (lane, out) in self.data(x).chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let f = squash_factor(lane, eps).0;
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = (f * v as f64) as f32;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Squash { x, eps }, shape, data, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for {:?}", axis, shape),
            ));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0f32; src.len()];
        for ou in 0..outer {
            for inn in 0..inner {
                let at = |a: usize| ou * axis_len * inner + a * inner + inn;
                let max = (0..axis_len)
                    .map(|a| src[at(a)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for a in 0..axis_len {
                    denom += ((src[at(a)] - max) as f64).exp();
                }
                for a in 0..axis_len {
                    data[at(a)] = (((src[at(a)] - max) as f64).exp() / denom) as f32;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, data, ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|&p| self.numel(p)).sum());
        let mut ng = false;
        for &p in parts {
            data.extend_from_slice(self.data(p));
            ng |= self.needs(p);
        }
        let len = data.len();
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![len], data, ng))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.numel(x) {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) exceeds {} elements", start + len, self.numel(x)),
            ));
        }
        let data = self.data(x)[start..start + len].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Slice { x, start }, vec![len], data, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} incompatible with {} elements", shape, self.numel(x)),
            ));
        }
        let data = self.data(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape, data, ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.conv_bank(x, &[w], stride)
    }

    pub fn conv_bank(&mut self, x: Var, ws: &[Var], stride: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("conv2d", format!("input {:?} is not [c, h, w]", s))),
        };
        if ws.is_empty() {
            return Err(Error::shape("conv2d", "empty kernel bank"));
        }
        let (o, k) = match self.shape(ws[0]) {
            [o, wc, kh, kw] if wc == &c && kh == kw => (*o, *kh),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {:?} does not fit input with {} channels", s, c),
                ))
            }
        };
        for &wv in ws {
            if self.shape(wv) != [o, c, k, k] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bank kernels disagree: {:?} vs {:?}", self.shape(wv), [o, c, k, k]),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (out_h, out_w) = match (conv_out_len(h, k, stride), conv_out_len(w, k, stride)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds input {h}x{w}"),
                ))
            }
        };
        let mut col = Vec::new();
        im2col(self.data(x), c, h, w, k, stride, &mut col);
        let patches = out_h * out_w;
        let ckk = c * k * k;
        let bank = ws.len();
        let mut data = vec![0.0f32; bank * o * patches];
        for (bi, &wv) in ws.iter().enumerate() {
            // y[o, p] = W[o, :] . col[p, :]
            gemm(
                o,
                ckk,
                patches,
                self.data(wv),
                ckk as isize,
                1,
                &col,
                1,
                ckk as isize,
                0.0,
                &mut data[bi * o * patches..(bi + 1) * o * patches],
            );
        }
        let ng = self.needs(x) || ws.iter().any(|&wv| self.needs(wv));
        Ok(self.push(
            Op::ConvBank { x, ws: ws.to_vec(), stride },
            vec![bank * o, out_h, out_w],
            data,
            ng,
        ))
    }

    pub fn assemble_caps(&mut self, branches: &[Var]) -> Result<Var> {
        if branches.is_empty() {
            return Err(Error::shape("assemble_caps", "no branches"));
        }
        let (o, h, w) = match self.shape(branches[0]) {
            [o, h, w] => (*o, *h, *w),
            s => {
                return Err(Error::shape(
                    "assemble_caps",
                    format!("branch {:?} is not [o, h, w]", s),
                ))
            }
        };
        for &b in branches {
            if self.shape(b) != [o, h, w] {
                return Err(Error::shape(
                    "assemble_caps",
                    format!("branches disagree: {:?} vs {:?}", self.shape(b), [o, h, w]),
                ));
            }
        }
        let d = branches.len();
        let n_caps = o * h * w;
        let mut data = vec![0.0f32; n_caps * d];
        for (di, &b) in branches.iter().enumerate() {
            for (cap, &v) in self.data(b).iter().enumerate() {
                data[cap * d + di] = v;
            }
        }
        let ng = branches.iter().any(|&b| self.needs(b));
        Ok(self.push(
            Op::AssembleCaps { branches: branches.to_vec() },
            vec![n_caps, d],
            data,
            ng,
        ))
    }

    pub fn caps_transform(&mut self, caps: Var, w: Var) -> Result<Var> {
        let (n, di) = match self.shape(caps) {
            [n, di] => (*n, *di),
            s => return Err(Error::shape("caps_transform", format!("caps {:?} is not [n, d]", s))),
        };
        let dout = match self.shape(w) {
            [wn, wdi, dout] if wn == &n && wdi == &di => *dout,
            s => {
                return Err(Error::shape(
                    "caps_transform",
                    format!("w {:?} does not match caps [{n}, {di}]", s),
                ))
            }
        };
        let cd = self.data(caps);
        let wd = self.data(w);
        let mut data = vec![0.0f32; n * dout];
        for cap in 0..n {
            let wbase = cap * di * dout;
            let ybase = cap * dout;
            for i in 0..di {
                let ci = cd[cap * di + i];
                let row = wbase + i * dout;
                for j in 0..dout {
                    data[ybase + j] += ci * wd[row + j];
                }
            }
        }
        let ng = self.needs(caps) || self.needs(w);
        Ok(self.push(Op::CapsTransform { caps, w }, vec![n, dout], data, ng))
    }

    /// out[j, :] = sum_i coeffs[i, j] * preds[i, j, :]. The coefficients are
    /// routing state, not parameters, so no gradient flows into them.
    pub fn weighted_caps_sum(&mut self, preds: Var, coeffs: &[f32]) -> Result<Var> {
        let (n_in, n_out, d) = match self.shape(preds) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(Error::shape(
                    "weighted_caps_sum",
                    format!("preds {:?} is not [n_in, n_out, d]", s),
                ))
            }
        };
        if coeffs.len() != n_in * n_out {
            return Err(Error::shape(
                "weighted_caps_sum",
                format!("{} coefficients for {}x{} routes", coeffs.len(), n_in, n_out),
            ));
        }
        let pd = self.data(preds);
        let mut data = vec![0.0f32; n_out * d];
        for i in 0..n_in {
            for j in 0..n_out {
                let c = coeffs[i * n_out + j];
                let src = (i * n_out + j) * d;
                let dst = j * d;
                for e in 0..d {
                    data[dst + e] += c * pd[src + e];
                }
            }
        }
        let ng = self.needs(preds);
        Ok(self.push(
            Op::WeightedCapsSum {
                preds,
                coeffs: coeffs.to_vec(),
                n_in,
                n_out,
            },
            vec![n_out, d],
            data,
            ng,
        ))
    }

    /// Reverse sweep from a scalar output. Returns per-node gradients;
    /// project onto parameters with [`Tape::param_grads`].
    pub fn backward(&self, out: Var) -> Result<BackwardResult> {
        if self.numel(out) != 1 {
            return Err(Error::shape(
                "backward",
                format!("output has shape {:?}, expected a scalar", self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.needs(out) {
            return Ok(BackwardResult { grads });
        }
        grads[out.0] = Some(vec![1.0]);
        let mut col = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads, &mut col);
            if self.nodes[i].param.is_some() || Var(i) == out || self.is_leaf(i) {
                grads[i] = Some(g);
            }
        }
        Ok(BackwardResult { grads })
    }

    fn is_leaf(&self, i: usize) -> bool {
        matches!(self.nodes[i].op, Op::Leaf)
    }

    pub fn param_grads(&self, bw: &BackwardResult, params: &ParamSet) -> GradMap {
        let mut grads = vec![None; params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                if let Some(g) = &bw.grads[i] {
                    grads[id.index()] = Some(g.clone());
                }
            }
        }
        GradMap::from_parts(grads)
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (d, s) in g.iter_mut().zip(contribution) {
                    *d += s;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    fn grad_buf(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn matvec_vjp(&self, x: Var, w: Var, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (o, i_dim) = (self.shape(w)[0], self.shape(w)[1]);
        if self.needs(x) {
            let wd = self.data(w);
            let buf = Self::grad_buf(grads, x, i_dim);
            for oi in 0..o {
                let go = g[oi];
                if go == 0.0 {
                    continue;
                }
                let row = &wd[oi * i_dim..(oi + 1) * i_dim];
                for (d, wv) in buf.iter_mut().zip(row) {
                    *d += go * wv;
                }
            }
        }
        if self.needs(w) {
            let xd = self.data(x);
            let buf = Self::grad_buf(grads, w, o * i_dim);
            for oi in 0..o {
                let go = g[oi];
                if go == 0.0 {
                    continue;
                }
                let row = &mut buf[oi * i_dim..(oi + 1) * i_dim];
                for (d, xv) in row.iter_mut().zip(xd) {
                    *d += go * xv;
                }
            }
        }
    }

    fn apply_vjp(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>], col: &mut Vec<f32>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let buf = Self::grad_buf(grads, *b, g.len());
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(bd) {
                        *d += s * x;
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let buf = Self::grad_buf(grads, *b, g.len());
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(ad) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s * f;
                    }
                }
            }
            Op::BiasChannels { x, b } => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let (c, hw) = (*c, h * w);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g);
                }
                if self.needs(*b) {
                    let buf = Self::grad_buf(grads, *b, c);
                    for ch in 0..c {
                        let mut s = 0.0f32;
                        for &v in &g[ch * hw..(ch + 1) * hw] {
                            s += v;
                        }
                        buf[ch] += s;
                    }
                }
            }
            Op::Affine { x, w, b } => {
                self.matvec_vjp(*x, *w, g, grads);
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g);
                }
            }
            Op::MatVec { x, w } => {
                self.matvec_vjp(*x, *w, g, grads);
            }
            Op::Elu(a) => {
                if self.needs(*a) {
                    let xd = self.data(*a);
                    let yd = &self.nodes[i].data;
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for idx in 0..g.len() {
                        let slope = if xd[idx] > 0.0 { 1.0 } else { yd[idx] + 1.0 };
                        buf[idx] += g[idx] * slope;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let yd = &self.nodes[i].data;
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for idx in 0..g.len() {
                        buf[idx] += g[idx] * yd[idx] * (1.0 - yd[idx]);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let yd = &self.nodes[i].data;
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for idx in 0..g.len() {
                        buf[idx] += g[idx] * (1.0 - yd[idx] * yd[idx]);
                    }
                }
            }
            Op::Abs(a) => {
                // Subgradient 0 at the kink.
                if self.needs(*a) {
                    let xd = self.data(*a);
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for idx in 0..g.len() {
                        let s = if xd[idx] > 0.0 {
                            1.0
                        } else if xd[idx] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[idx] += g[idx] * s;
                    }
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    let xd = self.data(*a);
                    let buf = Self::grad_buf(grads, *a, g.len());
                    for idx in 0..g.len() {
                        buf[idx] += g[idx] * 2.0 * xd[idx];
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.numel(*a);
                    let buf = Self::grad_buf(grads, *a, n);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.numel(*a);
                    let s = g[0] / n.max(1) as f32;
                    let buf = Self::grad_buf(grads, *a, n);
                    for d in buf.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Squash { x, eps } => {
                if self.needs(*x) {
                    let d = *self.shape(*x).last().expect("validated at creation");
                    let xd = self.data(*x);
                    let n_lanes = xd.len() / d;
                    let buf = Self::grad_buf(grads, *x, xd.len());
                    for lane in 0..n_lanes {
                        let v = &xd[lane * d..(lane + 1) * d];
                        let go = &g[lane * d..(lane + 1) * d];
                        let (f, fp, norm) = squash_factor(v, *eps);
                        let vdotg: f64 = v
                            .iter()
                            .zip(go)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                        let radial = if norm > 0.0 { fp * vdotg / norm } else { 0.0 };
                        let out = &mut buf[lane * d..(lane + 1) * d];
                        for idx in 0..d {
                            out[idx] += (f * go[idx] as f64 + radial * v[idx] as f64) as f32;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yd = &self.nodes[i].data;
                    let buf = Self::grad_buf(grads, *x, yd.len());
                    for ou in 0..outer {
                        for inn in 0..inner {
                            let at = |a: usize| ou * axis_len * inner + a * inner + inn;
                            let mut dot = 0.0f64;
                            for a in 0..axis_len {
                                dot += g[at(a)] as f64 * yd[at(a)] as f64;
                            }
                            for a in 0..axis_len {
                                let idx = at(a);
                                buf[idx] += (yd[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.numel(p);
                    if self.needs(p) {
                        Self::accumulate(grads, p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                if self.needs(*x) {
                    let n = self.numel(*x);
                    let buf = Self::grad_buf(grads, *x, n);
                    for (d, s) in buf[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g);
                }
            }
            Op::ConvBank { x, ws, stride } => {
                let [c, h, w] = *self.shape(*x) else { unreachable!() };
                let [o, _, k, _] = *self.shape(ws[0]) else { unreachable!() };
                let out_h = conv_out_len(h, k, *stride).expect("validated at creation");
                let out_w = conv_out_len(w, k, *stride).expect("validated at creation");
                let patches = out_h * out_w;
                let ckk = c * k * k;
                let any_w = ws.iter().any(|&wv| self.needs(wv));
                if any_w {
                    // dW[o, :] = sum_p g[o, p] * col[p, :]; col rebuilt rather
                    // than cached so forward memory stays flat.
                    im2col(self.data(*x), c, h, w, k, *stride, col);
                    for (bi, &wv) in ws.iter().enumerate() {
                        if !self.needs(wv) {
                            continue;
                        }
                        let gb = &g[bi * o * patches..(bi + 1) * o * patches];
                        let buf = Self::grad_buf(grads, wv, o * ckk);
                        gemm(
                            o,
                            patches,
                            ckk,
                            gb,
                            patches as isize,
                            1,
                            col,
                            ckk as isize,
                            1,
                            1.0,
                            buf,
                        );
                    }
                }
                if self.needs(*x) {
                    // dcol[p, :] = sum_o g[o, p] * W[o, :], accumulated over
                    // the bank, then scattered once.
                    let mut dcol = vec![0.0f32; patches * ckk];
                    for (bi, &wv) in ws.iter().enumerate() {
                        let gb = &g[bi * o * patches..(bi + 1) * o * patches];
                        gemm(
                            patches,
                            o,
                            ckk,
                            gb,
                            1,
                            patches as isize,
                            self.data(wv),
                            ckk as isize,
                            1,
                            if bi == 0 { 0.0 } else { 1.0 },
                            &mut dcol,
                        );
                    }
                    let buf = Self::grad_buf(grads, *x, c * h * w);
                    col2im_add(&dcol, c, h, w, k, *stride, buf);
                }
            }
            Op::AssembleCaps { branches } => {
                let d = branches.len();
                for (di, &b) in branches.iter().enumerate() {
                    if !self.needs(b) {
                        continue;
                    }
                    let n = self.numel(b);
                    let buf = Self::grad_buf(grads, b, n);
                    for cap in 0..n {
                        buf[cap] += g[cap * d + di];
                    }
                }
            }
            Op::CapsTransform { caps, w } => {
                let [n, di] = *self.shape(*caps) else { unreachable!() };
                let dout = self.shape(*w)[2];
                if self.needs(*caps) {
                    let wd = self.data(*w);
                    let buf = Self::grad_buf(grads, *caps, n * di);
                    for cap in 0..n {
                        let wbase = cap * di * dout;
                        let gb = &g[cap * dout..(cap + 1) * dout];
                        for idx in 0..di {
                            let row = &wd[wbase + idx * dout..wbase + (idx + 1) * dout];
                            let mut s = 0.0f32;
                            for (a, b) in gb.iter().zip(row) {
                                s += a * b;
                            }
                            buf[cap * di + idx] += s;
                        }
                    }
                }
                if self.needs(*w) {
                    let cd = self.data(*caps);
                    let buf = Self::grad_buf(grads, *w, n * di * dout);
                    for cap in 0..n {
                        let wbase = cap * di * dout;
                        let gb = &g[cap * dout..(cap + 1) * dout];
                        for idx in 0..di {
                            let ci = cd[cap * di + idx];
                            let row = &mut buf[wbase + idx * dout..wbase + (idx + 1) * dout];
                            for (d, s) in row.iter_mut().zip(gb) {
                                *d += ci * s;
                            }
                        }
                    }
                }
            }
            Op::WeightedCapsSum {
                preds,
                coeffs,
                n_in,
                n_out,
            } => {
                if self.needs(*preds) {
                    let d = self.shape(*preds)[2];
                    let buf = Self::grad_buf(grads, *preds, n_in * n_out * d);
                    for idx in 0..*n_in {
                        for j in 0..*n_out {
                            let c = coeffs[idx * n_out + j];
                            let dst = (idx * n_out + j) * d;
                            let src = j * d;
                            for e in 0..d {
                                buf[dst + e] += c * g[src + e];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matvec_forward(w: &[f32], x: &[f32], o: usize, i: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let mut y = vec![0.0f32; o];
    for oi in 0..o {
        let row = &w[oi * i..(oi + 1) * i];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        y[oi] = acc + bias.map_or(0.0, |b| b[oi]);
    }
    y
}

/// Returns (factor, d factor / d norm, norm) for one capsule vector, all in
/// f64. factor = n^2 / ((1 + n^2)(n + eps)).
fn squash_factor(v: &[f32], eps: f64) -> (f64, f64, f64) {
    let sumsq: f64 = v.iter().map(|&a| (a as f64) * (a as f64)).sum();
    let n = sumsq.sqrt();
    let denom = (1.0 + sumsq) * (n + eps);
    let f = sumsq / denom;
    let dden = 2.0 * n * (n + eps) + (1.0 + sumsq);
    let fp = (2.0 * n * denom - sumsq * dden) / (denom * denom);
    (f, fp, n)
}
