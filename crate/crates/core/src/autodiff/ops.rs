//! Primitive ops: forward evaluation and the recording API on [`Tape`].

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    check_labels, conv2d, maxpool2d, softmax_cross_entropy, PoolGeometry, Real, Tensor,
};

/// Batch-normalization statistics source.
#[derive(Debug, Clone)]
pub enum BatchNormMode<T: Real> {
    /// Normalize with the current batch's per-channel statistics.
    Train,
    /// Normalize with fixed (running) statistics.
    Eval { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T: Real> {
    Identity,
    MatMul,
    Linear {
        bias: bool,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        eps: T,
        mode: BatchNormMode<T>,
    },
    Add,
    Sub,
    Mul,
    Scale(T),
    AddConst(Tensor<T>),
    Tanh,
    Relu,
    Exp,
    Log,
    MaxPool(PoolGeometry),
    Dropout(Tensor<T>),
    Reshape(Vec<usize>),
    Sum,
    Mean,
    SoftmaxCrossEntropy(Vec<usize>),
}

/// Forward-pass byproducts needed by backward.
#[derive(Debug, Clone)]
pub(crate) enum Saved<T: Real> {
    None,
    PoolIndices(Vec<usize>),
    BatchStats { mean: Vec<T>, var: Vec<T> },
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Identity => "identity",
            Op::MatMul => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::MaxPool(_) => "maxpool",
            Op::Dropout(_) => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }

    pub(crate) fn forward(&self, args: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
        let plain = |t: Tensor<T>| Ok((t, Saved::None));
        match self {
            Op::Identity => plain(args[0].clone()),
            Op::MatMul => plain(args[0].matmul(args[1])?),
            Op::Linear { bias } => plain(linear(args[0], args[1], bias.then(|| args[2]))?),
            Op::Conv2d {
                stride,
                padding,
                bias,
            } => {
                let mut y = conv2d(args[0], args[1], *stride, *padding)?;
                if *bias {
                    add_channel_bias(&mut y, args[2])?;
                }
                plain(y)
            }
            Op::BatchNorm { eps, mode } => batch_norm(args[0], args[1], args[2], *eps, mode),
            Op::Add => plain(same_shape(args)?.add(args[1])?),
            Op::Sub => plain(same_shape(args)?.sub(args[1])?),
            Op::Mul => plain(same_shape(args)?.mul(args[1])?),
            Op::Scale(s) => plain(args[0].scale(*s)),
            Op::AddConst(c) => {
                if c.shape() != args[0].shape() {
                    return Err(Error::dim(format!(
                        "additive constant {:?} does not match activation {:?}",
                        c.shape(),
                        args[0].shape()
                    )));
                }
                plain(args[0].add(c)?)
            }
            Op::Tanh => plain(args[0].tanh()),
            Op::Relu => plain(args[0].relu()),
            Op::Exp => plain(args[0].exp()),
            Op::Log => plain(args[0].ln()),
            Op::MaxPool(pool) => {
                let (y, idx) = maxpool2d(args[0], *pool)?;
                Ok((y, Saved::PoolIndices(idx)))
            }
            Op::Dropout(mask) => plain(same_shape(&[args[0], mask])?.mul(mask)?),
            Op::Reshape(shape) => plain(args[0].reshape(shape.clone())?),
            Op::Sum => plain(Tensor::scalar(args[0].sum())),
            Op::Mean => plain(Tensor::scalar(args[0].mean())),
            Op::SoftmaxCrossEntropy(labels) => {
                plain(Tensor::scalar(softmax_cross_entropy(args[0], labels)?))
            }
        }
    }
}

fn same_shape<'a, T: Real>(args: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>> {
    if args[0].shape() != args[1].shape() {
        return Err(Error::dim(format!(
            "operand shapes differ: {:?} vs {:?}",
            args[0].shape(),
            args[1].shape()
        )));
    }
    Ok(args[0])
}

/// `y = flatten(x) · wᵀ + b` with `w` stored as `out×in`.
fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [out, inp] = w.dims2()?;
    let n = x.batch();
    if x.len() != n * inp {
        return Err(Error::dim(format!(
            "linear layer expects {inp} features per sample, input shape is {:?}",
            x.shape()
        )));
    }
    let mut y = vec![T::zero(); n * out];
    crate::tensor::gemm(n, inp, out, x.data(), false, w.data(), true, &mut y, false);
    if let Some(b) = b {
        if b.len() != out {
            return Err(Error::dim(format!(
                "bias {:?} does not match {out} outputs",
                b.shape()
            )));
        }
        for row in y.chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, out], y))
}

fn add_channel_bias<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let [_, f, h, w] = y.dims4()?;
    if b.len() != f {
        return Err(Error::dim(format!(
            "conv bias {:?} does not match {f} filters",
            b.shape()
        )));
    }
    let plane = h * w;
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let bb = b.data()[i % f];
        for v in chunk {
            *v = *v + bb;
        }
    }
    Ok(())
}

/// Per-channel layout of an `N×C` or `N×C×H×W` activation: `(N, C, H·W)`.
pub(crate) fn channel_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, c] => Ok((n, c, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::dim(format!(
            "batch norm expects N×C or N×C×H×W, got {s:?}"
        ))),
    }
}

/// Per-channel mean and population variance.
pub(crate) fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, plane) = channel_layout(x)?;
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let d = x.data();
    for s in 0..n {
        for ch in 0..c {
            let chunk = &d[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            mean[ch] = mean[ch] + chunk.iter().copied().sum::<T>();
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    for s in 0..n {
        for ch in 0..c {
            let chunk = &d[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            var[ch] = var[ch]
                + chunk
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    Ok((mean, var))
}

fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: &BatchNormMode<T>,
) -> Result<(Tensor<T>, Saved<T>)> {
    let (n, c, plane) = channel_layout(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(format!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (mean, var, saved) = match mode {
        BatchNormMode::Train => {
            if n < 2 {
                return Err(Error::dim(
                    "batch norm in train mode needs a batch of at least 2",
                ));
            }
            let (mean, var) = channel_stats(x)?;
            (mean.clone(), var.clone(), Saved::BatchStats { mean, var })
        }
        BatchNormMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("running statistics do not match channels"));
            }
            (mean.clone(), var.clone(), Saved::None)
        }
    };
    let mut y = x.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let inv = T::one() / (var[ch] + eps).sqrt();
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for v in &mut y[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                *v = g * ((*v - mean[ch]) * inv) + b;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), saved))
}

impl<T: Real> Tape<T> {
    pub fn identity(&mut self, x: Var) -> Result<Var> {
        self.push_node(Op::Identity, vec![x.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_node(Op::MatMul, vec![a.0, b.0])
    }

    /// Fully connected layer; `x` is flattened to `[N, in]`, `w` is `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push_node(Op::Linear { bias: b.is_some() }, inputs)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        self.push_node(
            Op::Conv2d {
                stride,
                padding,
                bias: bias.is_some(),
            },
            inputs,
        )
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BatchNormMode<T>,
    ) -> Result<Var> {
        self.push_node(Op::BatchNorm { eps, mode }, vec![x.0, gamma.0, beta.0])
    }

    /// Batch mean and population variance recorded by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        let super::Source::Node(i) = self.sources[v.0] else {
            return None;
        };
        match &self.nodes[i].saved {
            Saved::BatchStats { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_node(Op::Add, vec![a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_node(Op::Sub, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_node(Op::Mul, vec![a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.push_node(Op::Scale(s), vec![a.0])
    }

    /// Adds a constant (non-differentiated) tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        self.push_node(Op::AddConst(c), vec![a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push_node(Op::Tanh, vec![a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push_node(Op::Relu, vec![a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push_node(Op::Exp, vec![a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push_node(Op::Log, vec![a.0])
    }

    pub fn maxpool(&mut self, x: Var, pool: PoolGeometry) -> Result<Var> {
        self.push_node(Op::MaxPool(pool), vec![x.0])
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        self.push_node(Op::Dropout(mask), vec![x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push_node(Op::Reshape(shape), vec![x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push_node(Op::Sum, vec![x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push_node(Op::Mean, vec![x.0])
    }

    /// Mean softmax cross-entropy of `k×C` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [k, c] = self.value(logits).dims2()?;
        check_labels(labels, k, c)?;
        self.push_node(Op::SoftmaxCrossEntropy(labels.to_vec()), vec![logits.0])
    }

    /// Applies a primitive by name. Only parameter-free primitives are
    /// reachable this way; anything else is reported as unsupported.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<Vec<usize>> {
            if inputs.len() == n {
                Ok(inputs.iter().map(|v| v.0).collect())
            } else {
                Err(Error::Input(format!(
                    "`{name}` takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        let (op, ids) = match name {
            "identity" => (Op::Identity, arity(1)?),
            "matmul" => (Op::MatMul, arity(2)?),
            "add" => (Op::Add, arity(2)?),
            "sub" => (Op::Sub, arity(2)?),
            "mul" => (Op::Mul, arity(2)?),
            "tanh" => (Op::Tanh, arity(1)?),
            "relu" => (Op::Relu, arity(1)?),
            "exp" => (Op::Exp, arity(1)?),
            "log" => (Op::Log, arity(1)?),
            "sum" => (Op::Sum, arity(1)?),
            "mean" => (Op::Mean, arity(1)?),
            other => return Err(Error::UnsupportedOp(other.to_string())),
        };
        self.push_node(op, ids)
    }
}
