//! Reverse-mode tape over dense f64 tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and returns
//! gradients for every node, addressable by parameter name. Tapes are scoped
//! to a single step: build, backward, read gradients, drop. Discrete choices
//! (top-k selection, dropout masks) are recorded as constants, so gradients
//! treat them as fixed.

use std::collections::HashMap;
use std::sync::Arc;

use crate::gsp::RingBank;
use crate::spectral::{dft2_centered, idft2_centered, SpectrumTensor};
use crate::tensor::Tensor;
use crate::{LgspError, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    ScaleConst(Var, f64),
    /// tensor * single-element scalar node
    ScaleVar(Var, Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    /// fixed multiplier per element (0 or 1/(1-p))
    Dropout(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    /// x[..., d_in] * w[d_in, d_out] + b
    LinearLast {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// batched matmul over matching leading dims
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// [B,T,D] -> [B,heads,T,D/heads]
    SplitHeads {
        x: Var,
        heads: usize,
    },
    /// [B,heads,T,dh] -> [B,T,heads*dh]
    MergeHeads(Var),
    SoftmaxLast(Var),
    /// concat along the token axis of [B,T,D]
    ConcatTokens(Vec<Var>),
    SliceTokens {
        x: Var,
        start: usize,
        len: usize,
    },
    /// [T,D] -> [B,T,D]
    BroadcastRows {
        w: Var,
        batch: usize,
    },
    /// [B,C,H,W] -> [B,P,C*ps*ps]
    ExtractPatches {
        x: Var,
        patch: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    /// cosine similarity of two vectors -> scalar
    CosineSim {
        a: Var,
        b: Var,
    },
    /// all-pairs cosine: [B,d] x [C,d] -> [B,C]
    CosineRows {
        feats: Var,
        protos: Var,
    },
    StackScalars(Vec<Var>),
    IndexScalar {
        v: Var,
        idx: usize,
    },
    /// frequency-ring enhancement; gradients reach both the image and the
    /// band weights
    SpectralEnhance {
        x: Var,
        weights: Var,
        bank: Arc<RingBank>,
        spectrum: SpectrumTensor,
        smax: Vec<f64>,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

/// Gradients returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).and_then(|&i| self.grads[i].as_ref())
    }
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a named parameter leaf. Repeated registration under the same
    /// name returns the original node so gradients accumulate once.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::ScaleConst(a, c))
    }

    /// Multiplies a tensor by a one-element node, broadcasting the scalar.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(LgspError::InvalidArgument(
                "scale_var needs a single-element scalar node".into(),
            ));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).scale(sv);
        Ok(self.push(value, Op::ScaleVar(a, s)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(crate::tensor::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Applies a fixed dropout multiplier mask (inverted scaling).
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut crate::tensor::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(LgspError::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mult: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(&mult)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(a, mult)))
    }

    /// Same-padding stride-1 convolution. x: [B,Cin,H,W], w: [Cout,Cin,k,k]
    /// (k odd), b: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (value, pad) = conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }))
    }

    pub fn linear_last(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = linear_last_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
        )?;
        Ok(self.push(value, Op::LinearLast { x, w, b }))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = bmm_forward(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [b, t, d] = shape3(&shape)?;
        if d % heads != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    for k in 0..dh {
                        out[((bi * heads + h) * t + ti) * dh + k] =
                            src[(bi * t + ti) * d + h * dh + k];
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, heads, t, dh], out)?;
        Ok(self.push(value, Op::SplitHeads { x, heads }))
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [b, heads, t, dh] = match *shape.as_slice() {
            [b, h, t, dh] => [b, h, t, dh],
            _ => {
                return Err(LgspError::ShapeMismatch {
                    expected: vec![0, 0, 0, 0],
                    got: shape,
                })
            }
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    for k in 0..dh {
                        out[(bi * t + ti) * (heads * dh) + h * dh + k] =
                            src[((bi * heads + h) * t + ti) * dh + k];
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, heads * dh], out)?;
        Ok(self.push(value, Op::MergeHeads(x)))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| {
            LgspError::EmptyInput("softmax over empty shape".into())
        })?;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            out.extend(crate::tensor::softmax(row, 1.0)?);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxLast(x)))
    }

    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LgspError::EmptyInput("concat of zero parts".into()));
        }
        let [b0, _, d0] = shape3(self.value(parts[0]).shape())?;
        let mut total_t = 0;
        for &p in parts {
            let [b, t, d] = shape3(self.value(p).shape())?;
            if b != b0 || d != d0 {
                return Err(LgspError::ShapeMismatch {
                    expected: vec![b0, 0, d0],
                    got: vec![b, t, d],
                });
            }
            total_t += t;
        }
        let mut out = vec![0.0; b0 * total_t * d0];
        for bi in 0..b0 {
            let mut row = 0;
            for &p in parts {
                let [_, t, _] = shape3(self.value(p).shape())?;
                let src = self.value(p).data();
                for ti in 0..t {
                    let dst = ((bi * total_t) + row + ti) * d0;
                    let s = (bi * t + ti) * d0;
                    out[dst..dst + d0].copy_from_slice(&src[s..s + d0]);
                }
                row += t;
            }
        }
        let value = Tensor::new(vec![b0, total_t, d0], out)?;
        Ok(self.push(value, Op::ConcatTokens(parts.to_vec())))
    }

    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, t, d] = shape3(self.value(x).shape())?;
        if start + len > t {
            return Err(LgspError::IndexOutOfRange(format!(
                "token slice {start}..{} of {t}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; b * len * d];
        for bi in 0..b {
            for ti in 0..len {
                let s = (bi * t + start + ti) * d;
                let dst = (bi * len + ti) * d;
                out[dst..dst + d].copy_from_slice(&src[s..s + d]);
            }
        }
        let value = Tensor::new(vec![b, len, d], out)?;
        Ok(self.push(value, Op::SliceTokens { x, start, len }))
    }

    pub fn broadcast_rows(&mut self, w: Var, batch: usize) -> Result<Var> {
        let shape = self.value(w).shape().to_vec();
        let [t, d] = match *shape.as_slice() {
            [t, d] => [t, d],
            _ => {
                return Err(LgspError::ShapeMismatch {
                    expected: vec![0, 0],
                    got: shape,
                })
            }
        };
        let src = self.value(w).data();
        let mut out = Vec::with_capacity(batch * t * d);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(vec![batch, t, d], out)?;
        Ok(self.push(value, Op::BroadcastRows { w, batch }))
    }

    /// Unfolds non-overlapping patches; output row layout is channel-major
    /// within each patch.
    pub fn extract_patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let [b, c, h, w] = shape4(self.value(x).shape())?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "dims {h}x{w} not divisible by patch {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let p = gh * gw;
        let dim = c * patch * patch;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * p * dim];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let pi = gy * gw + gx;
                    for ci in 0..c {
                        for py in 0..patch {
                            for px in 0..patch {
                                let sy = gy * patch + py;
                                let sx = gx * patch + px;
                                out[(bi * p + pi) * dim + ci * patch * patch + py * patch + px] =
                                    src[((bi * c + ci) * h + sy) * w + sx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, p, dim], out)?;
        Ok(self.push(value, Op::ExtractPatches { x, patch }))
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::new(vec![1], vec![self.value(x).sum()]).expect("finite sum");
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::new(vec![1], vec![self.value(x).mean()]).expect("finite mean");
        self.push(value, Op::MeanAll(x))
    }

    /// Cosine similarity of two vector nodes; errors on zero norms.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = crate::tensor::cosine_similarity(self.value(a).data(), self.value(b).data())?;
        let value = Tensor::new(vec![1], vec![c])?;
        Ok(self.push(value, Op::CosineSim { a, b }))
    }

    /// All-pairs cosine similarity between feature rows and prototype rows.
    pub fn cosine_rows(&mut self, feats: Var, protos: Var) -> Result<Var> {
        let [bsz, d] = shape2(self.value(feats).shape())?;
        let [c, d2] = shape2(self.value(protos).shape())?;
        if d != d2 {
            return Err(LgspError::ShapeMismatch {
                expected: vec![0, d],
                got: vec![c, d2],
            });
        }
        let f = self.value(feats).data();
        let p = self.value(protos).data();
        let mut out = vec![0.0; bsz * c];
        for bi in 0..bsz {
            for ci in 0..c {
                out[bi * c + ci] =
                    crate::tensor::cosine_similarity(&f[bi * d..(bi + 1) * d], &p[ci * d..(ci + 1) * d])?;
            }
        }
        let value = Tensor::new(vec![bsz, c], out)?;
        Ok(self.push(value, Op::CosineRows { feats, protos }))
    }

    pub fn stack_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(LgspError::EmptyInput("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(vars.len());
        for &v in vars {
            if self.value(v).numel() != 1 {
                return Err(LgspError::InvalidArgument(
                    "stack_scalars expects single-element nodes".into(),
                ));
            }
            data.push(self.value(v).data()[0]);
        }
        let value = Tensor::new(vec![vars.len()], data)?;
        Ok(self.push(value, Op::StackScalars(vars.to_vec())))
    }

    pub fn index_scalar(&mut self, v: Var, idx: usize) -> Result<Var> {
        if idx >= self.value(v).numel() {
            return Err(LgspError::IndexOutOfRange(format!(
                "index {idx} of {}",
                self.value(v).numel()
            )));
        }
        let value = Tensor::new(vec![1], vec![self.value(v).data()[idx]])?;
        Ok(self.push(value, Op::IndexScalar { v, idx }))
    }

    /// Frequency-ring enhancement of `x` using live band weights.
    ///
    /// Forward: mask = sum_k softmax(w*tau)_k M_k; out = Re(idft(dft(x) * mask)).
    pub fn spectral_enhance(&mut self, x: Var, weights: Var, bank: &Arc<RingBank>) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        if w.len() != bank.k_rings() {
            return Err(LgspError::ShapeMismatch {
                expected: vec![bank.k_rings()],
                got: vec![w.len()],
            });
        }
        let smax = bank.softmax_weights_for(&w);
        let mask = bank.combined_mask_for(&w);
        let spectrum = dft2_centered(self.value(x))?;
        let masked = spectrum.mul_real_mask(&mask)?;
        let (value, _residue) = idft2_centered(&masked)?;
        Ok(self.push(
            value,
            Op::SpectralEnhance {
                x,
                weights,
                bank: Arc::clone(bank),
                spectrum,
                smax,
                mask,
            },
        ))
    }

    /// Mean cross-entropy of row logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [b, c] = shape2(self.value(logits).shape())?;
        if targets.len() != b {
            return Err(LgspError::ShapeMismatch {
                expected: vec![b],
                got: vec![targets.len()],
            });
        }
        let z = self.value(logits).data();
        let mut loss = 0.0;
        for (bi, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(LgspError::IndexOutOfRange(format!("target {t} of {c}")));
            }
            let row = &z[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let value = Tensor::new(vec![1], vec![loss / b as f64])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients for every reachable
    /// node; parameters are addressable by name.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(LgspError::InvalidArgument(
                "backward through an unrecorded value".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(LgspError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(vec![1], vec![1.0])?);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let by_name = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.0))
            .collect();
        Ok(Gradients { grads, by_name })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone(), self)?;
                add_grad(grads, *b, g.clone(), self)?;
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone(), self)?;
                add_grad(grads, *b, g.scale(-1.0), self)?;
            }
            Op::MulElem(a, b) => {
                add_grad(grads, *a, g.mul(self.value(*b))?, self)?;
                add_grad(grads, *b, g.mul(self.value(*a))?, self)?;
            }
            Op::ScaleConst(a, c) => add_grad(grads, *a, g.scale(*c), self)?,
            Op::ScaleVar(a, s) => {
                let sv = self.value(*s).data()[0];
                add_grad(grads, *a, g.scale(sv), self)?;
                let ds = g.mul(self.value(*a))?.sum();
                add_grad(grads, *s, Tensor::new(vec![1], vec![ds])?, self)?;
            }
            Op::Square(a) => {
                let da = g.mul(&self.value(*a).scale(2.0))?;
                add_grad(grads, *a, da, self)?;
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_grad(grads, *a, Tensor::new(g.shape().to_vec(), da)?, self)?;
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                add_grad(grads, *a, Tensor::new(g.shape().to_vec(), da)?, self)?;
            }
            Op::Dropout(a, mult) => {
                let da: Vec<f64> = g.data().iter().zip(mult).map(|(gv, m)| gv * m).collect();
                add_grad(grads, *a, Tensor::new(g.shape().to_vec(), da)?, self)?;
            }
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), g, *pad)?;
                add_grad(grads, *x, dx, self)?;
                add_grad(grads, *w, dw, self)?;
                add_grad(grads, *b, db, self)?;
            }
            Op::LinearLast { x, w, b } => {
                let (dx, dw, db) = linear_last_backward(self.value(*x), self.value(*w), g)?;
                add_grad(grads, *x, dx, self)?;
                add_grad(grads, *w, dw, self)?;
                if let Some(bv) = b {
                    add_grad(grads, *bv, db, self)?;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (da, db) = bmm_backward(self.value(*a), self.value(*b), g, *trans_b)?;
                add_grad(grads, *a, da, self)?;
                add_grad(grads, *b, db, self)?;
            }
            Op::SplitHeads { x, heads } => {
                let [b, h, t, dh] = shape4(node.value.shape())?;
                debug_assert_eq!(h, *heads);
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            for k in 0..dh {
                                dx[(bi * t + ti) * (h * dh) + hi * dh + k] +=
                                    gd[((bi * h + hi) * t + ti) * dh + k];
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::new(vec![b, t, h * dh], dx)?, self)?;
            }
            Op::MergeHeads(x) => {
                let [b, h, t, dh] = shape4(self.value(*x).shape())?;
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            for k in 0..dh {
                                dx[((bi * h + hi) * t + ti) * dh + k] +=
                                    gd[(bi * t + ti) * (h * dh) + hi * dh + k];
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::new(vec![b, h, t, dh], dx)?, self)?;
            }
            Op::SoftmaxLast(x) => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for (row, (yr, gr)) in y.chunks(d).zip(gd.chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[row * d + k] = yr[k] * (gr[k] - dot);
                    }
                }
                add_grad(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?, self)?;
            }
            Op::ConcatTokens(parts) => {
                let [b, total_t, d] = shape3(node.value.shape())?;
                let gd = g.data();
                let mut row = 0;
                for &p in parts {
                    let [_, t, _] = shape3(self.value(p).shape())?;
                    let mut dp = vec![0.0; b * t * d];
                    for bi in 0..b {
                        for ti in 0..t {
                            let src = ((bi * total_t) + row + ti) * d;
                            let dst = (bi * t + ti) * d;
                            dp[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                    add_grad(grads, p, Tensor::new(vec![b, t, d], dp)?, self)?;
                    row += t;
                }
            }
            Op::SliceTokens { x, start, len } => {
                let [b, t, d] = shape3(self.value(*x).shape())?;
                let gd = g.data();
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..*len {
                        let dst = (bi * t + start + ti) * d;
                        let src = (bi * len + ti) * d;
                        dx[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                    }
                }
                add_grad(grads, *x, Tensor::new(vec![b, t, d], dx)?, self)?;
            }
            Op::BroadcastRows { w, batch } => {
                let [t, d] = shape2(self.value(*w).shape())?;
                let gd = g.data();
                let mut dw = vec![0.0; t * d];
                for bi in 0..*batch {
                    for i in 0..t * d {
                        dw[i] += gd[bi * t * d + i];
                    }
                }
                add_grad(grads, *w, Tensor::new(vec![t, d], dw)?, self)?;
            }
            Op::ExtractPatches { x, patch } => {
                let [b, c, h, w] = shape4(self.value(*x).shape())?;
                let ps = *patch;
                let (gh, gw) = (h / ps, w / ps);
                let p = gh * gw;
                let dim = c * ps * ps;
                let gd = g.data();
                let mut dx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let pi = gy * gw + gx;
                            for ci in 0..c {
                                for py in 0..ps {
                                    for px in 0..ps {
                                        let sy = gy * ps + py;
                                        let sx = gx * ps + px;
                                        dx[((bi * c + ci) * h + sy) * w + sx] += gd
                                            [(bi * p + pi) * dim + ci * ps * ps + py * ps + px];
                                    }
                                }
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::new(vec![b, c, h, w], dx)?, self)?;
            }
            Op::Reshape(x) => {
                let back = g.reshaped(self.value(*x).shape().to_vec())?;
                add_grad(grads, *x, back, self)?;
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                add_grad(grads, *x, Tensor::full(self.value(*x).shape(), gs), self)?;
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let gs = g.data()[0] / n;
                add_grad(grads, *x, Tensor::full(self.value(*x).shape(), gs), self)?;
            }
            Op::CosineSim { a, b } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let gs = g.data()[0];
                let (da, db) = cosine_pair_backward(va, vb, node.value.data()[0], gs);
                add_grad(grads, *a, Tensor::new(vec![va.len()], da)?, self)?;
                add_grad(grads, *b, Tensor::new(vec![vb.len()], db)?, self)?;
            }
            Op::CosineRows { feats, protos } => {
                let [bsz, d] = shape2(self.value(*feats).shape())?;
                let [c, _] = shape2(self.value(*protos).shape())?;
                let f = self.value(*feats).data();
                let p = self.value(*protos).data();
                let y = node.value.data();
                let gd = g.data();
                let mut df = vec![0.0; f.len()];
                let mut dp = vec![0.0; p.len()];
                for bi in 0..bsz {
                    let fr = &f[bi * d..(bi + 1) * d];
                    for ci in 0..c {
                        let gs = gd[bi * c + ci];
                        if gs == 0.0 {
                            continue;
                        }
                        let pr = &p[ci * d..(ci + 1) * d];
                        let (dfr, dpr) = cosine_pair_backward(fr, pr, y[bi * c + ci], gs);
                        for k in 0..d {
                            df[bi * d + k] += dfr[k];
                            dp[ci * d + k] += dpr[k];
                        }
                    }
                }
                add_grad(grads, *feats, Tensor::new(vec![bsz, d], df)?, self)?;
                add_grad(grads, *protos, Tensor::new(vec![c, d], dp)?, self)?;
            }
            Op::StackScalars(vars) => {
                for (i, &v) in vars.iter().enumerate() {
                    add_grad(grads, v, Tensor::new(vec![1], vec![g.data()[i]])?, self)?;
                }
            }
            Op::IndexScalar { v, idx } => {
                let mut dv = vec![0.0; self.value(*v).numel()];
                dv[*idx] = g.data()[0];
                add_grad(
                    grads,
                    *v,
                    Tensor::new(self.value(*v).shape().to_vec(), dv)?,
                    self,
                )?;
            }
            Op::SpectralEnhance {
                x,
                weights,
                bank,
                spectrum,
                smax,
                mask,
            } => {
                let (dx, dw) = spectral_enhance_backward(g, spectrum, bank, smax, mask)?;
                add_grad(grads, *x, dx, self)?;
                add_grad(grads, *weights, dw, self)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let [b, c] = shape2(self.value(*logits).shape())?;
                let z = self.value(*logits).data();
                let gs = g.data()[0];
                let mut dz = vec![0.0; b * c];
                for (bi, &t) in targets.iter().enumerate() {
                    let row = &z[bi * c..(bi + 1) * c];
                    let sm = crate::tensor::softmax(row, 1.0)?;
                    for ci in 0..c {
                        let ind = if ci == t { 1.0 } else { 0.0 };
                        dz[bi * c + ci] = gs * (sm[ci] - ind) / b as f64;
                    }
                }
                add_grad(grads, *logits, Tensor::new(vec![b, c], dz)?, self)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, delta: Tensor, tape: &Tape) -> Result<()> {
    debug_assert_eq!(tape.value(v).shape(), delta.shape());
    match &mut grads[v.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

fn shape2(s: &[usize]) -> Result<[usize; 2]> {
    match *s {
        [a, b] => Ok([a, b]),
        _ => Err(LgspError::ShapeMismatch {
            expected: vec![0, 0],
            got: s.to_vec(),
        }),
    }
}

fn shape3(s: &[usize]) -> Result<[usize; 3]> {
    match *s {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(LgspError::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: s.to_vec(),
        }),
    }
}

fn shape4(s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(LgspError::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            got: s.to_vec(),
        }),
    }
}

/// Stride-1 same-padding convolution used by both the tape and the pure
/// prompt-generator path.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
    let [bsz, cin, h, ww] = shape4(x.shape())?;
    let [cout, cin_w, kh, kw] = shape4(w.shape())?;
    if cin != cin_w {
        return Err(LgspError::InvalidArgument(format!(
            "channel mismatch: input has {cin}, kernel expects {cin_w}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(LgspError::InvalidArgument(format!(
            "kernel must be square and odd, got {kh}x{kw}"
        )));
    }
    if b.shape() != [cout] {
        return Err(LgspError::ShapeMismatch {
            expected: vec![cout],
            got: b.shape().to_vec(),
        });
    }
    let pad = kh / 2;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; bsz * cout * h * ww];
    for bi in 0..bsz {
        for oc in 0..cout {
            for y in 0..h {
                for xx in 0..ww {
                    let mut acc = bd[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = xx + kx;
                                if sx < pad || sx - pad >= ww {
                                    continue;
                                }
                                acc += xd[((bi * cin + ic) * h + (sy - pad)) * ww + (sx - pad)]
                                    * wd[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + oc) * h + y) * ww + xx] = acc;
                }
            }
        }
    }
    Ok((Tensor::new(vec![bsz, cout, h, ww], out)?, pad))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [bsz, cin, h, ww] = shape4(x.shape())?;
    let [cout, _, kh, kw] = shape4(w.shape())?;
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..bsz {
        for oc in 0..cout {
            for y in 0..h {
                for xx in 0..ww {
                    let gv = gd[((bi * cout + oc) * h + y) * ww + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    db[oc] += gv;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = xx + kx;
                                if sx < pad || sx - pad >= ww {
                                    continue;
                                }
                                let xi = ((bi * cin + ic) * h + (sy - pad)) * ww + (sx - pad);
                                let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                dx[xi] += gv * wd[wi];
                                dw[wi] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

fn linear_last_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [din, dout] = shape2(w.shape())?;
    let last = *x.shape().last().ok_or_else(|| {
        LgspError::EmptyInput("linear over empty shape".into())
    })?;
    if last != din {
        return Err(LgspError::ShapeMismatch {
            expected: vec![din],
            got: vec![last],
        });
    }
    if let Some(bt) = b {
        if bt.shape() != [dout] {
            return Err(LgspError::ShapeMismatch {
                expected: vec![dout],
                got: bt.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / din;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b.map_or(0.0, |bt| bt.data()[j]);
            for i in 0..din {
                acc += xd[r * din + i] * wd[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

fn linear_last_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [din, dout] = shape2(w.shape())?;
    let rows = x.numel() / din;
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        for j in 0..dout {
            let gv = gd[r * dout + j];
            if gv == 0.0 {
                continue;
            }
            db[j] += gv;
            for i in 0..din {
                dx[r * din + i] += gv * wd[i * dout + j];
                dw[i * dout + j] += gv * xd[r * din + i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![dout], db)?,
    ))
}

fn bmm_dims(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    let ash = a.shape();
    let bsh = b.shape();
    if ash.len() < 2 || bsh.len() != ash.len() {
        return Err(LgspError::ShapeMismatch {
            expected: ash.to_vec(),
            got: bsh.to_vec(),
        });
    }
    if ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
        return Err(LgspError::ShapeMismatch {
            expected: ash.to_vec(),
            got: bsh.to_vec(),
        });
    }
    let m = ash[ash.len() - 2];
    let k = ash[ash.len() - 1];
    let (kb, n) = if trans_b {
        (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
    } else {
        (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
    };
    if k != kb {
        return Err(LgspError::ShapeMismatch {
            expected: vec![m, k],
            got: vec![kb, n],
        });
    }
    let batch: usize = ash[..ash.len() - 2].iter().product();
    Ok((batch, m, k, n))
}

fn bmm_forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (batch, m, k, n) = bmm_dims(a, b, trans_b)?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; batch * m * n];
    for p in 0..batch {
        let abase = p * m * k;
        let bbase = p * k * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    let bv = if trans_b {
                        bd[bbase + j * k + kk]
                    } else {
                        bd[bbase + kk * n + j]
                    };
                    acc += ad[abase + i * k + kk] * bv;
                }
                out[p * m * n + i * n + j] = acc;
            }
        }
    }
    let mut shape = a.shape()[..a.shape().len() - 2].to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

fn bmm_backward(a: &Tensor, b: &Tensor, g: &Tensor, trans_b: bool) -> Result<(Tensor, Tensor)> {
    let (batch, m, k, n) = bmm_dims(a, b, trans_b)?;
    let ad = a.data();
    let bd = b.data();
    let gd = g.data();
    let mut da = vec![0.0; ad.len()];
    let mut db = vec![0.0; bd.len()];
    for p in 0..batch {
        let abase = p * m * k;
        let bbase = p * k * n;
        let gbase = p * m * n;
        for i in 0..m {
            for j in 0..n {
                let gv = gd[gbase + i * n + j];
                if gv == 0.0 {
                    continue;
                }
                for kk in 0..k {
                    if trans_b {
                        da[abase + i * k + kk] += gv * bd[bbase + j * k + kk];
                        db[bbase + j * k + kk] += gv * ad[abase + i * k + kk];
                    } else {
                        da[abase + i * k + kk] += gv * bd[bbase + kk * n + j];
                        db[bbase + kk * n + j] += gv * ad[abase + i * k + kk];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

fn cosine_pair_backward(a: &[f64], b: &[f64], cos: f64, g: f64) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let inv = 1.0 / (na * nb);
    let da: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(av, bv)| g * (bv * inv - cos * av / (na * na)))
        .collect();
    let db: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(av, bv)| g * (av * inv - cos * bv / (nb * nb)))
        .collect();
    (da, db)
}

fn spectral_enhance_backward(
    g: &Tensor,
    spectrum: &SpectrumTensor,
    bank: &RingBank,
    smax: &[f64],
    mask: &[f64],
) -> Result<(Tensor, Tensor)> {
    let [b, c, h, w] = spectrum.shape();
    let n = h * w;

    // Gradient to the image: the op is self-adjoint in x for a real mask.
    let g_spec = dft2_centered(g)?;
    let masked = g_spec.mul_real_mask(mask)?;
    let (dx, _) = idft2_centered(&masked)?;

    // Gradient to the mask: Re(conj(S) * adjoint-of-inverse applied to g).
    // The adjoint of the normalized centered inverse is forward/(H*W).
    let mut dmask = vec![0.0; n];
    let scale = 1.0 / n as f64;
    for p in 0..b * c {
        let base = p * n;
        for i in 0..n {
            let (tr, ti) = (g_spec.re()[base + i] * scale, g_spec.im()[base + i] * scale);
            let (sr, si) = (spectrum.re()[base + i], spectrum.im()[base + i]);
            // Re(T * conj(S))
            dmask[i] += tr * sr + ti * si;
        }
    }

    // Chain: mask = sum_k s_k M_k, s = softmax(w * tau).
    let k_rings = bank.k_rings();
    let mut ds = vec![0.0; k_rings];
    for (k, ring) in bank.masks().iter().enumerate() {
        ds[k] = dmask.iter().zip(ring).map(|(d, m)| d * m).sum();
    }
    let dot: f64 = ds.iter().zip(smax).map(|(d, s)| d * s).sum();
    let dw: Vec<f64> = (0..k_rings)
        .map(|k| bank.tau() * smax[k] * (ds[k] - dot))
        .collect();

    Ok((dx, Tensor::new(vec![k_rings], dw)?))
}
