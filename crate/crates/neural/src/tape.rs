//! Reverse-mode differentiation over a tape recorded fresh for every step.

use crate::kernels::{self, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::NeuralError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Var, spec: ConvSpec },
    LeakyRelu { x: Var, slope: f32 },
    ConcatChannels { a: Var, b: Var },
    BroadcastLen { x: Var },
    ToDense { x: Var },
    FromDense { x: Var },
    ConcatFeatures { a: Var, b: Var },
    SliceFeatures { x: Var, start: usize },
    FeatureAffine { x: Var, scale: Vec<f32> },
    Reparameterize { mu: Var, log_sigma: Var, eps: Tensor },
    Mse { pred: Var, target: Tensor },
    KlMean { mu: Var, log_sigma: Var },
    WeightedSum { terms: Vec<(Var, f32)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations and their outputs; [`Tape::backward`] walks them in
/// reverse. A tape is single-use: build, differentiate, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to parameter `index` of the [`ParamSet`] passed to
    /// [`Tape::param_grads`].
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        self.push(params.tensor(index).clone(), Op::Param(index))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NeuralError> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var, NeuralError> {
        let y = kernels::conv1d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Conv { x, w, b, spec }))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    ) -> Result<Var, NeuralError> {
        let y = kernels::conv_transpose1d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::ConvTranspose { x, w, b, spec }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let y = kernels::leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope })
    }

    /// `[ca, batch, len] ++ [cb, batch, len] -> [ca + cb, batch, len]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[1..] != tb.shape()[1..] {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let shape = vec![ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::ConcatChannels { a, b }))
    }

    /// Repeats `[batch, features]` along a new length axis:
    /// `-> [features, batch, len]`.
    pub fn broadcast_len(&mut self, x: Var, len: usize) -> Result<Var, NeuralError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(shape_err("broadcast_len", format!("{:?}", t.shape())));
        }
        let (batch, feat) = (t.dim(0), t.dim(1));
        let mut data = vec![0.0; feat * batch * len];
        for f in 0..feat {
            for b in 0..batch {
                let v = t.data()[b * feat + f];
                data[(f * batch + b) * len..(f * batch + b + 1) * len].fill(v);
            }
        }
        let y = Tensor::new(vec![feat, batch, len], data)?;
        Ok(self.push(y, Op::BroadcastLen { x }))
    }

    /// `[c, batch, len] -> [batch, c·len]`.
    pub fn to_dense(&mut self, x: Var) -> Result<Var, NeuralError> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(shape_err("to_dense", format!("{:?}", t.shape())));
        }
        let y = channels_to_dense(t);
        Ok(self.push(y, Op::ToDense { x }))
    }

    /// `[batch, c·len] -> [c, batch, len]`.
    pub fn from_dense(&mut self, x: Var, channels: usize, len: usize) -> Result<Var, NeuralError> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.dim(1) != channels * len {
            return Err(shape_err(
                "from_dense",
                format!("{:?} into {channels}x{len}", t.shape()),
            ));
        }
        let y = dense_to_channels(t, channels, len);
        Ok(self.push(y, Op::FromDense { x }))
    }

    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.dim(0) != tb.dim(0) {
            return Err(shape_err(
                "concat_features",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let y = concat_rows(ta, tb);
        Ok(self.push(y, Op::ConcatFeatures { a, b }))
    }

    pub fn slice_features(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NeuralError> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.dim(1) {
            return Err(shape_err(
                "slice_features",
                format!("{:?}[{start}..{}]", t.shape(), start + len),
            ));
        }
        let y = slice_cols(t, start, len);
        Ok(self.push(y, Op::SliceFeatures { x, start }))
    }

    /// Per-feature `x·scale + shift` on `[batch, features]`.
    pub fn feature_affine(
        &mut self,
        x: Var,
        scale: &[f32],
        shift: &[f32],
    ) -> Result<Var, NeuralError> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.dim(1) != scale.len() || scale.len() != shift.len() {
            return Err(shape_err(
                "feature_affine",
                format!("{:?} with {} constants", t.shape(), scale.len()),
            ));
        }
        let mut y = t.clone();
        for row in y.data_mut().chunks_mut(scale.len()) {
            for ((v, &s), &m) in row.iter_mut().zip(scale).zip(shift) {
                *v = *v * s + m;
            }
        }
        Ok(self.push(
            y,
            Op::FeatureAffine {
                x,
                scale: scale.to_vec(),
            },
        ))
    }

    /// `z = mu + exp(log_sigma) ⊙ eps`.
    pub fn reparameterize(
        &mut self,
        mu: Var,
        log_sigma: Var,
        eps: Tensor,
    ) -> Result<Var, NeuralError> {
        let (tm, ts) = (self.value(mu), self.value(log_sigma));
        if tm.shape() != ts.shape() || tm.shape() != eps.shape() {
            return Err(shape_err(
                "reparameterize",
                format!("{:?}, {:?}, {:?}", tm.shape(), ts.shape(), eps.shape()),
            ));
        }
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(eps.data())
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect();
        let z = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(z, Op::Reparameterize { mu, log_sigma, eps }))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var, NeuralError> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.is_empty() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        let v = (sum / p.len() as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::Mse { pred, target }))
    }

    /// Batch mean of `KL(N(mu, sigma²) ‖ N(0, I))` for `[batch, latent]` inputs.
    pub fn kl_mean(&mut self, mu: Var, log_sigma: Var) -> Result<Var, NeuralError> {
        let (tm, ts) = (self.value(mu), self.value(log_sigma));
        if tm.shape() != ts.shape() || tm.shape().len() != 2 {
            return Err(shape_err(
                "kl_mean",
                format!("{:?} vs {:?}", tm.shape(), ts.shape()),
            ));
        }
        let batch = tm.dim(0).max(1);
        let sum: f64 = tm
            .data()
            .iter()
            .zip(ts.data())
            .map(|(&m, &ls)| {
                let (m, ls) = (f64::from(m), f64::from(ls));
                0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
            })
            .sum();
        let v = (sum / batch as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::KlMean { mu, log_sigma }))
    }

    /// `Σ wᵢ·termᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let v: f64 = terms
            .iter()
            .map(|&(t, w)| f64::from(self.value(t).item()) * f64::from(w))
            .sum();
        self.push(
            Tensor::scalar(v as f32),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Back-propagates from the scalar `root`; returns one optional gradient
    /// per recorded node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!("leaves skipped above"),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) =
                        kernels::conv1d_backward(self.value(*x), self.value(*w), *spec, &dy);
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::ConvTranspose { x, w, b, spec } => {
                    let (dx, dw, db) = kernels::conv_transpose1d_backward(
                        self.value(*x),
                        self.value(*w),
                        *spec,
                        &dy,
                    );
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::LeakyRelu { x, slope } => {
                    acc(*x, kernels::leaky_relu_backward(self.value(*x), *slope, &dy));
                }
                Op::ConcatChannels { a, b } => {
                    let split = self.value(*a).len();
                    let (da, db) = dy.data().split_at(split);
                    let da = Tensor::new(self.value(*a).shape().to_vec(), da.to_vec()).expect("shape");
                    let db = Tensor::new(self.value(*b).shape().to_vec(), db.to_vec()).expect("shape");
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::BroadcastLen { x } => {
                    let t = self.value(*x);
                    let (batch, feat) = (t.dim(0), t.dim(1));
                    let len = dy.dim(2);
                    let mut dx = vec![0.0; batch * feat];
                    for f in 0..feat {
                        for b in 0..batch {
                            let s: f64 = dy.data()[(f * batch + b) * len..(f * batch + b + 1) * len]
                                .iter()
                                .map(|&v| f64::from(v))
                                .sum();
                            dx[b * feat + f] = s as f32;
                        }
                    }
                    acc(*x, Tensor::new(vec![batch, feat], dx).expect("shape"));
                }
                Op::ToDense { x } => {
                    let t = self.value(*x);
                    acc(*x, dense_to_channels(&dy, t.dim(0), t.dim(2)));
                }
                Op::FromDense { x } => acc(*x, channels_to_dense(&dy)),
                Op::ConcatFeatures { a, b } => {
                    let fa = self.value(*a).dim(1);
                    let fb = self.value(*b).dim(1);
                    acc(*a, slice_cols(&dy, 0, fa));
                    acc(*b, slice_cols(&dy, fa, fb));
                }
                Op::SliceFeatures { x, start } => {
                    let t = self.value(*x);
                    let (batch, feat) = (t.dim(0), t.dim(1));
                    let width = dy.dim(1);
                    let mut dx = vec![0.0; batch * feat];
                    for b in 0..batch {
                        dx[b * feat + start..b * feat + start + width]
                            .copy_from_slice(&dy.data()[b * width..(b + 1) * width]);
                    }
                    acc(*x, Tensor::new(vec![batch, feat], dx).expect("shape"));
                }
                Op::FeatureAffine { x, scale } => {
                    let mut dx = dy.clone();
                    for row in dx.data_mut().chunks_mut(scale.len()) {
                        for (v, &s) in row.iter_mut().zip(scale) {
                            *v *= s;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Reparameterize { mu, log_sigma, eps } => {
                    let ls = self.value(*log_sigma);
                    let dls = dy
                        .data()
                        .iter()
                        .zip(ls.data())
                        .zip(eps.data())
                        .map(|((&g, &l), &e)| g * l.exp() * e)
                        .collect();
                    acc(*mu, dy.clone());
                    acc(*log_sigma, Tensor::new(ls.shape().to_vec(), dls).expect("shape"));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let k = 2.0 * dy.item() / p.len() as f32;
                    let d = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| k * (a - b))
                        .collect();
                    acc(*pred, Tensor::new(p.shape().to_vec(), d).expect("shape"));
                }
                Op::KlMean { mu, log_sigma } => {
                    let (tm, ts) = (self.value(*mu), self.value(*log_sigma));
                    let k = dy.item() / tm.dim(0).max(1) as f32;
                    let dmu = tm.data().iter().map(|&m| k * m).collect();
                    // d/dls of ½(e^{2ls} − 2ls) = e^{2ls} − 1
                    let dls = ts.data().iter().map(|&l| k * ((2.0 * l).exp() - 1.0)).collect();
                    acc(*mu, Tensor::new(tm.shape().to_vec(), dmu).expect("shape"));
                    acc(*log_sigma, Tensor::new(ts.shape().to_vec(), dls).expect("shape"));
                }
                Op::WeightedSum { terms } => {
                    for &(t, w) in terms {
                        acc(t, Tensor::scalar(dy.item() * w));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    /// Collects parameter gradients in `params` order, summing repeated uses
    /// and zero-filling parameters the tape never touched.
    pub fn param_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).shape()))
            .collect();
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, g) {
                out[*i].add_assign(g);
            }
        }
        out
    }
}

pub fn channels_to_dense(t: &Tensor) -> Tensor {
    let (c, batch, len) = (t.dim(0), t.dim(1), t.dim(2));
    let mut data = vec![0.0; c * batch * len];
    for ci in 0..c {
        for b in 0..batch {
            let src = &t.data()[(ci * batch + b) * len..(ci * batch + b + 1) * len];
            data[b * c * len + ci * len..b * c * len + (ci + 1) * len].copy_from_slice(src);
        }
    }
    Tensor::new(vec![batch, c * len], data).expect("shape")
}

pub fn dense_to_channels(t: &Tensor, channels: usize, len: usize) -> Tensor {
    let batch = t.dim(0);
    let mut data = vec![0.0; channels * batch * len];
    for ci in 0..channels {
        for b in 0..batch {
            let src = &t.data()[b * channels * len + ci * len..b * channels * len + (ci + 1) * len];
            data[(ci * batch + b) * len..(ci * batch + b + 1) * len].copy_from_slice(src);
        }
    }
    Tensor::new(vec![channels, batch, len], data).expect("shape")
}

pub fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let (batch, fa, fb) = (a.dim(0), a.dim(1), b.dim(1));
    let mut data = Vec::with_capacity(batch * (fa + fb));
    for r in 0..batch {
        data.extend_from_slice(&a.data()[r * fa..(r + 1) * fa]);
        data.extend_from_slice(&b.data()[r * fb..(r + 1) * fb]);
    }
    Tensor::new(vec![batch, fa + fb], data).expect("shape")
}

pub fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (batch, feat) = (t.dim(0), t.dim(1));
    let mut data = Vec::with_capacity(batch * len);
    for r in 0..batch {
        data.extend_from_slice(&t.data()[r * feat + start..r * feat + start + len]);
    }
    Tensor::new(vec![batch, len], data).expect("shape")
}
