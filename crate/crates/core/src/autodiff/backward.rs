use std::collections::BTreeMap;

use super::ops::{channel_layout, BatchNormMode, Op, Saved};
use super::{ParamId, Source, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, gemm, softmax_rows, Real, Tensor};

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradientSet<T: Real = f32> {
    /// Gradient per parameter id, summed over every use of the parameter.
    pub params: BTreeMap<ParamId, Tensor<T>>,
    /// Gradient at each tapped value.
    pub taps: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn tap(&self, name: &str) -> Option<&Tensor<T>> {
        self.taps.get(name)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }
}

impl<T: Real> Tape<T> {
    /// Gradients of `⟨seed, output⟩` with respect to all parameters and taps.
    pub fn backward(&self, seed: &Tensor<T>) -> Result<GradientSet<T>> {
        self.backward_with(seed, true)
    }

    /// Like [`Tape::backward`] but only tap gradients are computed.
    pub fn backward_taps(&self, seed: &Tensor<T>) -> Result<GradientSet<T>> {
        self.backward_with(seed, false)
    }

    fn backward_with(&self, seed: &Tensor<T>, want_params: bool) -> Result<GradientSet<T>> {
        let out = self
            .output
            .ok_or_else(|| Error::Input("backward on a tape without output".into()))?;
        self.backward_from(Var(out), seed, want_params)
    }

    /// Backward pass seeded at an arbitrary recorded value.
    pub fn backward_from(
        &self,
        from: Var,
        seed: &Tensor<T>,
        want_params: bool,
    ) -> Result<GradientSet<T>> {
        let out_shape = self.values[from.0].shape();
        if seed.shape() != out_shape {
            return Err(Error::dim(format!(
                "seed shape {:?} does not match output shape {out_shape:?}",
                seed.shape()
            )));
        }

        // A value needs a gradient when some target lies upstream of it.
        let n = self.values.len();
        let mut needs = vec![false; n];
        for &t in self.taps.values() {
            needs[t] = true;
        }
        for (i, s) in self.sources.iter().enumerate() {
            match *s {
                Source::Param(_) if want_params => needs[i] = true,
                Source::Node(k) if self.nodes[k].inputs.iter().any(|&j| needs[j]) => {
                    needs[i] = true;
                }
                _ => {}
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[from.0] = Some(seed.clone());
        let last = match self.sources[from.0] {
            Source::Node(k) => k + 1,
            _ => 0,
        };
        for node in self.nodes[..last].iter().rev() {
            let Some(dy) = grads[node.out].take() else {
                continue;
            };
            let want: Vec<bool> = node.inputs.iter().map(|&i| needs[i]).collect();
            if want.iter().any(|&w| w) {
                let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.values[i]).collect();
                let din = vjp(
                    &node.op,
                    &node.saved,
                    &args,
                    &self.values[node.out],
                    &dy,
                    &want,
                )?;
                for ((&i, d), w) in node.inputs.iter().zip(din).zip(&want) {
                    if let (Some(d), true) = (d, *w) {
                        accumulate(&mut grads[i], d)?;
                    }
                }
            }
            grads[node.out] = Some(dy);
        }

        let mut set = GradientSet::default();
        for (name, &id) in &self.taps {
            let g = grads[id]
                .clone()
                .unwrap_or_else(|| self.values[id].zeros_like());
            set.taps.insert(name.clone(), g);
        }
        if want_params {
            for (i, s) in self.sources.iter().enumerate() {
                if let Source::Param(pid) = *s {
                    let g = grads[i]
                        .clone()
                        .unwrap_or_else(|| self.values[i].zeros_like());
                    match set.params.get_mut(&pid) {
                        Some(acc) => acc.axpy(T::one(), &g)?,
                        None => {
                            set.params.insert(pid, g);
                        }
                    }
                }
            }
        }
        Ok(set)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Vector-Jacobian product of one op: gradients for each input given the
/// output gradient `dy`. Entries for inputs with `want[i] == false` may be
/// `None`.
fn vjp<T: Real>(
    op: &Op<T>,
    saved: &Saved<T>,
    args: &[&Tensor<T>],
    y: &Tensor<T>,
    dy: &Tensor<T>,
    want: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let one = |t: Tensor<T>| Ok(vec![Some(t)]);
    match op {
        Op::Identity => one(dy.clone()),
        Op::Reshape(_) => one(dy.reshape(args[0].shape().to_vec())?),
        Op::MatMul => {
            let [m, k] = args[0].dims2()?;
            let [_, n] = args[1].dims2()?;
            let da = want[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(
                    m,
                    n,
                    k,
                    dy.data(),
                    false,
                    args[1].data(),
                    true,
                    &mut d,
                    false,
                );
                Tensor::from_parts(vec![m, k], d)
            });
            let db = want[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(
                    k,
                    m,
                    n,
                    args[0].data(),
                    true,
                    dy.data(),
                    false,
                    &mut d,
                    false,
                );
                Tensor::from_parts(vec![k, n], d)
            });
            Ok(vec![da, db])
        }
        Op::Linear { bias } => {
            let [out, inp] = args[1].dims2()?;
            let nb = args[0].batch();
            let dx = want[0].then(|| {
                let mut d = vec![T::zero(); nb * inp];
                gemm(
                    nb,
                    out,
                    inp,
                    dy.data(),
                    false,
                    args[1].data(),
                    false,
                    &mut d,
                    false,
                );
                Tensor::from_parts(args[0].shape().to_vec(), d)
            });
            let dw = want[1].then(|| {
                let mut d = vec![T::zero(); out * inp];
                gemm(
                    out,
                    nb,
                    inp,
                    dy.data(),
                    true,
                    args[0].data(),
                    false,
                    &mut d,
                    false,
                );
                Tensor::from_parts(vec![out, inp], d)
            });
            let mut res = vec![dx, dw];
            if *bias {
                res.push(if want[2] {
                    Some(dy.sum_axis(0)?.reshape(args[2].shape().to_vec())?)
                } else {
                    None
                });
            }
            Ok(res)
        }
        Op::Conv2d {
            stride,
            padding,
            bias,
        } => {
            let (dx, dk) =
                conv2d_backward(args[0], args[1], dy, *stride, *padding, want[0], want[1])?;
            let mut res = vec![dx, dk];
            if *bias {
                res.push(if want[2] {
                    let (_, f, plane) = channel_layout(dy)?;
                    let mut db = vec![T::zero(); f];
                    for (i, chunk) in dy.data().chunks(plane).enumerate() {
                        db[i % f] = db[i % f] + chunk.iter().copied().sum::<T>();
                    }
                    Some(Tensor::from_parts(args[2].shape().to_vec(), db))
                } else {
                    None
                });
            }
            Ok(res)
        }
        Op::BatchNorm { eps, mode } => batch_norm_vjp(args, saved, *eps, mode, dy, want),
        Op::Add => Ok(vec![Some(dy.clone()), Some(dy.clone())]),
        Op::Sub => Ok(vec![Some(dy.clone()), Some(dy.scale(-T::one()))]),
        Op::Mul => Ok(vec![
            want[0].then(|| dy.mul(args[1])).transpose()?,
            want[1].then(|| dy.mul(args[0])).transpose()?,
        ]),
        Op::Scale(s) => one(dy.scale(*s)),
        Op::AddConst(_) => one(dy.clone()),
        Op::Tanh => one(dy.zip_with(y, |g, t| g * (T::one() - t * t))?),
        Op::Relu => one(dy.zip_with(args[0], |g, x| if x > T::zero() { g } else { T::zero() })?),
        Op::Exp => one(dy.mul(y)?),
        Op::Log => one(dy.zip_with(args[0], |g, x| g / x)?),
        Op::MaxPool(_) => {
            let Saved::PoolIndices(idx) = saved else {
                return Err(Error::Input("maxpool node lost its indices".into()));
            };
            let mut dx = args[0].zeros_like();
            let d = dx.data_mut();
            for (&i, &g) in idx.iter().zip(dy.data()) {
                d[i] = d[i] + g;
            }
            one(dx)
        }
        Op::Dropout(mask) => one(dy.mul(mask)?),
        Op::Sum => {
            let g = dy.item()?;
            one(Tensor::full(args[0].shape().to_vec(), g)?)
        }
        Op::Mean => {
            let g = dy.item()? / T::of(args[0].len() as f64);
            one(Tensor::full(args[0].shape().to_vec(), g)?)
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let [k, c] = args[0].dims2()?;
            let scale = dy.item()? / T::of(k as f64);
            let mut p = softmax_rows(args[0])?;
            let d = p.data_mut();
            for (i, &yl) in labels.iter().enumerate() {
                d[i * c + yl] = d[i * c + yl] - T::one();
            }
            one(p.scale(scale))
        }
    }
}

fn batch_norm_vjp<T: Real>(
    args: &[&Tensor<T>],
    saved: &Saved<T>,
    eps: T,
    mode: &BatchNormMode<T>,
    dy: &Tensor<T>,
    want: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (x, gamma) = (args[0], args[1]);
    let (n, c, plane) = channel_layout(x)?;
    let (mean, var, train) = match (mode, saved) {
        (BatchNormMode::Train, Saved::BatchStats { mean, var }) => (mean, var, true),
        (BatchNormMode::Eval { mean, var }, _) => (mean, var, false),
        _ => return Err(Error::Input("batch norm node lost its statistics".into())),
    };
    let count = T::of((n * plane) as f64);
    let xd = x.data();
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for (&xv, &gv) in xd[r.clone()].iter().zip(&g[r]) {
                let xhat = (xv - mean[ch]) * inv[ch];
                dgamma[ch] = dgamma[ch] + gv * xhat;
                dbeta[ch] = dbeta[ch] + gv;
            }
        }
    }
    let dx = if want[0] {
        let mut dx = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let gm = gamma.data()[ch];
                let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for ((d, &xv), &gv) in dx[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&g[r]) {
                    *d = if train {
                        let xhat = (xv - mean[ch]) * inv[ch];
                        gm * inv[ch] / count * (count * gv - dbeta[ch] - xhat * dgamma[ch])
                    } else {
                        gm * inv[ch] * gv
                    };
                }
            }
        }
        Some(Tensor::from_parts(x.shape().to_vec(), dx))
    } else {
        None
    };
    Ok(vec![
        dx,
        Some(Tensor::from_parts(args[1].shape().to_vec(), dgamma)),
        Some(Tensor::from_parts(args[2].shape().to_vec(), dbeta)),
    ])
}
