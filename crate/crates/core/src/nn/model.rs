use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::ArchSpec;
use super::gradacc::GradAccState;
use super::layer::LayerSpec;
use crate::autodiff::{BatchNormMode, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{PoolGeometry, Real, Tensor};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Tap name of the model input.
pub const INPUT_TAP: &str = "input";

/// Tap name of the `i`-th gradient-accumulation layer.
pub fn gradacc_tap(i: usize) -> String {
    format!("gradacc{i}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(±sqrt(6 / (fan_in + fan_out)))`, for tanh networks.
    Xavier,
    /// `U(±sqrt(6 / fan_in))`, for relu networks.
    Kaiming,
}

/// What the gradient-accumulation layers add during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub enum Perturb<'a, T: Real> {
    /// Nothing; every gradacc layer is the identity.
    #[default]
    None,
    /// Each layer's own cached state, only in train mode.
    State,
    /// Explicit per-layer additive tensors, indexed by gradacc ordinal.
    Explicit(&'a [Option<Tensor<T>>]),
}

#[derive(Debug, Default)]
pub struct ForwardOptions<'a, T: Real> {
    pub perturb: Perturb<'a, T>,
    /// Tap the model input under [`INPUT_TAP`].
    pub tap_input: bool,
    /// Tap every gradacc output under [`gradacc_tap`].
    pub tap_gradacc: bool,
    /// Stop after this layer index (inclusive) instead of running to logits.
    pub stop_after: Option<usize>,
    /// Dropout masks are drawn from here; required in train mode when the
    /// model has dropout layers.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub out: Var,
    /// Train-mode batch-norm nodes as `(layer index, node)`.
    pub batch_norms: Vec<(usize, Var)>,
    /// Output of each gradacc layer, by ordinal.
    pub gradacc: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RunningStats<T: Real> {
    pub(crate) mean: Vec<T>,
    pub(crate) var: Vec<T>,
}

/// Sequential classifier.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    arch: Option<ArchSpec>,
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    params: Vec<Tensor<T>>,
    layer_params: Vec<Vec<ParamId>>,
    no_decay: Vec<bool>,
    pub(crate) running: Vec<Option<RunningStats<T>>>,
    gradacc: Vec<GradAccState<T>>,
    gradacc_layers: Vec<usize>,
    mode: Mode,
}

fn infer_shapes(input: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        layer.validate()?;
        let bad = |msg: String| Error::Config(format!("layer {i} ({}): {msg}", layer.kind()));
        shape = match *layer {
            LayerSpec::Fc { inputs, outputs } => {
                let n: usize = shape.iter().product();
                if n != inputs {
                    return Err(bad(format!("expects {inputs} inputs, gets {n}")));
                }
                vec![outputs]
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w]: [usize; 3] = shape
                    .clone()
                    .try_into()
                    .map_err(|_| bad(format!("needs C×H×W input, gets {shape:?}")))?;
                if c != in_channels {
                    return Err(bad(format!("expects {in_channels} channels, gets {c}")));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(bad(format!("kernel {kernel} exceeds padded input")));
                }
                vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ]
            }
            LayerSpec::BatchNorm { channels } => {
                if shape[0] != channels {
                    return Err(bad(format!(
                        "expects {channels} channels, gets {}",
                        shape[0]
                    )));
                }
                shape
            }
            LayerSpec::MaxPool { size, stride } => {
                let [c, h, w]: [usize; 3] = shape
                    .clone()
                    .try_into()
                    .map_err(|_| bad(format!("needs C×H×W input, gets {shape:?}")))?;
                if size > h || size > w {
                    return Err(bad(format!("window {size} exceeds {h}×{w}")));
                }
                vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
            }
            _ => shape,
        };
        out.push(shape.clone());
    }
    Ok(out)
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_parts(shape, data)
}

impl<T: Real> Model<T> {
    /// Builds and initializes the architecture described by `arch`.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let init = if arch.uses_tanh() {
            Init::Xavier
        } else {
            Init::Kaiming
        };
        let mut m = Self::from_layers(arch.input, arch.layers()?, init, seed)?;
        m.arch = Some(arch.clone());
        Ok(m)
    }

    /// Builds a model from an explicit layer list. Biases start at zero,
    /// batch-norm scales at one.
    pub fn from_layers(
        input: [usize; 3],
        layers: Vec<LayerSpec>,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let shapes = infer_shapes(input, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layer_params = Vec::new();
        let mut no_decay = Vec::new();
        let mut running = Vec::new();
        let mut gradacc_layers = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let mut ids = Vec::new();
            let mut push = |t: Tensor<T>, decay: bool| {
                ids.push(params.len());
                params.push(t);
                no_decay.push(!decay);
            };
            let (fan_in, fan_out) = match *layer {
                LayerSpec::Fc { inputs, outputs } => (inputs, outputs),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                ),
                _ => (0, 0),
            };
            let bound = match init {
                Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Kaiming => (6.0 / fan_in as f64).sqrt(),
            };
            let shapes = layer.param_shapes();
            running.push(None);
            match *layer {
                LayerSpec::Fc { .. } | LayerSpec::Conv { .. } => {
                    push(uniform(&mut rng, shapes[0].clone(), bound), true);
                    push(Tensor::zeros(shapes[1].clone())?, true);
                }
                LayerSpec::BatchNorm { channels } => {
                    push(Tensor::ones(vec![channels])?, false);
                    push(Tensor::zeros(vec![channels])?, false);
                    running[i] = Some(RunningStats {
                        mean: vec![T::zero(); channels],
                        var: vec![T::one(); channels],
                    });
                }
                LayerSpec::GradAcc => gradacc_layers.push(i),
                _ => {}
            }
            layer_params.push(ids);
        }
        Ok(Model {
            arch: None,
            input,
            gradacc: vec![GradAccState::new(); gradacc_layers.len()],
            gradacc_layers,
            layers,
            shapes,
            params,
            layer_params,
            no_decay,
            running,
            mode: Mode::Train,
        })
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches mode. Cached gradacc state is kept but has no effect in eval
    /// mode.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Whether weight decay applies to parameter `id` (false for BN γ/β).
    pub fn decays(&self, id: ParamId) -> bool {
        !self.no_decay[id]
    }

    pub fn gradacc_count(&self) -> usize {
        self.gradacc.len()
    }

    pub fn gradacc(&self, i: usize) -> &GradAccState<T> {
        &self.gradacc[i]
    }

    pub fn gradacc_mut(&mut self, i: usize) -> &mut GradAccState<T> {
        &mut self.gradacc[i]
    }

    /// Layer index of the `i`-th gradacc layer.
    pub fn gradacc_layer(&self, i: usize) -> usize {
        self.gradacc_layers[i]
    }

    /// Clears every gradacc cache (the state used at t = 0 and at test time).
    pub fn reset_gradacc(&mut self) {
        self.gradacc.iter_mut().for_each(GradAccState::reset);
    }

    /// Perturbations the gradacc layers would inject on the next train-mode
    /// forward pass.
    pub fn cached_perturbations(&self) -> Vec<Option<Tensor<T>>> {
        self.gradacc
            .iter()
            .map(|g| match self.mode {
                Mode::Train => g.perturbation(),
                Mode::Eval => None,
            })
            .collect()
    }

    /// Index of the last layer before the classifier head: the encoder used
    /// for spectral analysis ends here.
    pub fn encoder_end(&self) -> Result<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Fc { .. }))
            .and_then(|i| i.checked_sub(1))
            .ok_or_else(|| Error::Config("model has no hidden layers before its head".into()))
    }

    /// Records the forward pass of `x` (batch-major) on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mut opts: ForwardOptions<'_, T>,
    ) -> Result<ForwardOutput> {
        let n = tape.value(x).batch();
        let per_sample = tape.value(x).len() / n;
        if per_sample != self.input_len() || tape.value(x).rank() < 2 {
            return Err(Error::dim(format!(
                "model expects [N, {}] samples, got {:?}",
                self.input
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("×"),
                tape.value(x).shape()
            )));
        }
        if opts.tap_input {
            tape.tap(INPUT_TAP, x)?;
        }
        let mut h = x;
        let mut batch_norms = Vec::new();
        let mut gradacc = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let ids = &self.layer_params[li];
            let param =
                |tape: &mut Tape<T>, k: usize| tape.param(ids[k], self.params[ids[k]].clone());
            match *layer {
                LayerSpec::Fc { .. } => {
                    let w = param(tape, 0);
                    let b = param(tape, 1);
                    h = tape.linear(h, w, Some(b))?;
                }
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    if tape.value(h).rank() != 4 {
                        let [c, hh, ww] = self.input;
                        h = tape.reshape(h, vec![n, c, hh, ww])?;
                    }
                    let k = param(tape, 0);
                    let b = param(tape, 1);
                    h = tape.conv2d(h, k, Some(b), stride, padding)?;
                }
                LayerSpec::BatchNorm { .. } => {
                    let g = param(tape, 0);
                    let b = param(tape, 1);
                    let mode = match self.mode {
                        Mode::Train => BatchNormMode::Train,
                        Mode::Eval => {
                            let rs = self.running[li].as_ref().expect("bn running stats");
                            BatchNormMode::Eval {
                                mean: rs.mean.clone(),
                                var: rs.var.clone(),
                            }
                        }
                    };
                    h = tape.batch_norm(h, g, b, T::of(BN_EPS), mode)?;
                    if self.mode == Mode::Train {
                        batch_norms.push((li, h));
                    }
                }
                LayerSpec::Tanh => h = tape.tanh(h)?,
                LayerSpec::Relu => h = tape.relu(h)?,
                LayerSpec::MaxPool { size, stride } => {
                    h = tape.maxpool(h, PoolGeometry { size, stride })?
                }
                LayerSpec::Dropout { rate } => {
                    if self.mode == Mode::Train && rate > 0.0 {
                        let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                            Error::Config("train-mode dropout needs an RNG".into())
                        })?;
                        let keep = T::of(1.0 / (1.0 - rate));
                        let shape = tape.value(h).shape().to_vec();
                        let data = (0..tape.value(h).len())
                            .map(|_| {
                                if rng.random::<f64>() < rate {
                                    T::zero()
                                } else {
                                    keep
                                }
                            })
                            .collect();
                        h = tape.dropout(h, Tensor::from_parts(shape, data))?;
                    }
                }
                LayerSpec::GradAcc => {
                    let gi = gradacc.len();
                    let p = match opts.perturb {
                        Perturb::None => None,
                        Perturb::State if self.mode == Mode::Train => {
                            self.gradacc[gi].perturbation()
                        }
                        Perturb::State => None,
                        Perturb::Explicit(ps) => ps.get(gi).cloned().flatten(),
                    };
                    if let Some(p) = p {
                        if p.shape() != tape.value(h).shape() {
                            return Err(Error::StaleCache {
                                cached: p.shape().to_vec(),
                                actual: tape.value(h).shape().to_vec(),
                            });
                        }
                        h = tape.add_const(h, p)?;
                    }
                    if opts.tap_gradacc {
                        tape.tap(gradacc_tap(gi), h)?;
                    }
                    gradacc.push(h);
                }
            }
            if opts.stop_after == Some(li) {
                break;
            }
        }
        Ok(ForwardOutput {
            out: h,
            batch_norms,
            gradacc,
        })
    }

    /// Folds the batch statistics recorded by a train-mode forward pass into
    /// the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, fwd: &ForwardOutput) {
        let m = T::of(BN_MOMENTUM);
        let one = T::one();
        for &(li, v) in &fwd.batch_norms {
            let (Some(rs), Some((mean, var))) = (self.running[li].as_mut(), tape.batch_stats(v))
            else {
                continue;
            };
            for (r, &b) in rs.mean.iter_mut().zip(mean) {
                *r = m * *r + (one - m) * b;
            }
            for (r, &b) in rs.var.iter_mut().zip(var) {
                *r = m * *r + (one - m) * b;
            }
        }
    }

    /// Running `(mean, var)` of the batch-norm at layer `i`.
    pub fn running_stats(&self, i: usize) -> Option<(&[T], &[T])> {
        self.running
            .get(i)?
            .as_ref()
            .map(|r| (r.mean.as_slice(), r.var.as_slice()))
    }

    /// Logits for a batch, in the current mode, with no perturbation.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, ForwardOptions::default())?;
        Ok(tape.value(out.out).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.logits(x)?.argmax(1)
    }

    /// Classification accuracy in percent, evaluated in chunks of `batch`.
    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize], batch: usize) -> Result<f64> {
        if x.batch() != labels.len() || labels.is_empty() {
            return Err(Error::dim(format!(
                "{} samples but {} labels",
                x.batch(),
                labels.len()
            )));
        }
        let batch = batch.max(1);
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(batch) {
            let end = (start + batch).min(labels.len());
            let pred = self.predict(&x.slice_batch(start, end)?)?;
            correct += pred
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, y)| p == y)
                .count();
        }
        Ok(100.0 * correct as f64 / labels.len() as f64)
    }

    /// Copies parameters and running statistics from a model whose
    /// parameterized layers match this one (gradacc layers may differ).
    pub fn copy_weights_from(&mut self, other: &Model<T>) -> Result<()> {
        if self.params.len() != other.params.len()
            || self
                .params
                .iter()
                .zip(&other.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("parameter layouts differ"));
        }
        self.params.clone_from(&other.params);
        let mine = self.running.iter_mut().filter_map(Option::as_mut);
        let theirs = other.running.iter().filter_map(Option::as_ref);
        for (a, b) in mine.zip(theirs) {
            a.clone_from(b);
        }
        Ok(())
    }

    /// Running statistics of every batch-norm layer in layer order.
    pub(crate) fn running_list(&self) -> impl Iterator<Item = &RunningStats<T>> {
        self.running.iter().filter_map(Option::as_ref)
    }

    pub(crate) fn running_list_mut(&mut self) -> impl Iterator<Item = &mut RunningStats<T>> {
        self.running.iter_mut().filter_map(Option::as_mut)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Model {
            arch: self.arch.clone(),
            input: self.input,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layer_params: self.layer_params.clone(),
            no_decay: self.no_decay.clone(),
            running: self
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| RunningStats {
                        mean: conv(&r.mean),
                        var: conv(&r.var),
                    })
                })
                .collect(),
            gradacc: self.gradacc.iter().map(GradAccState::cast).collect(),
            gradacc_layers: self.gradacc_layers.clone(),
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_fc_parameter_count() {
        let arch = ArchSpec::toy_fc(10, [1, 32, 32]);
        let m = Model::<f32>::new(&arch, 0).unwrap();
        assert_eq!(m.num_params(), 1024 * 1025 + 512 * 1025 + 10 * 513);
        assert_eq!(m.gradacc_count(), 2);
    }

    #[test]
    fn same_seed_same_init() {
        let arch = ArchSpec::small_conv(10, [3, 8, 8]).with_widths(vec![4, 4, 4]);
        let a = Model::<f32>::new(&arch, 11).unwrap();
        let b = Model::<f32>::new(&arch, 11).unwrap();
        let c = Model::<f32>::new(&arch, 12).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.bitwise_eq(y)));
        assert!(!a.params()[0].bitwise_eq(&c.params()[0]));
    }

    #[test]
    fn prefix_zero_has_no_gradacc() {
        let arch = ArchSpec::small_conv(10, [3, 8, 8]).with_prefix(0);
        let m = Model::<f32>::new(&arch, 0).unwrap();
        assert_eq!(m.gradacc_count(), 0);
    }

    #[test]
    fn batchnorm_params_skip_decay() {
        let arch = ArchSpec::small_conv(10, [3, 8, 8]).with_widths(vec![2]);
        let m = Model::<f32>::new(&arch, 0).unwrap();
        let decays: Vec<bool> = (0..m.params().len()).map(|i| m.decays(i)).collect();
        assert_eq!(decays, [true, true, false, false, true, true]);
    }

    #[test]
    fn fc_input_mismatch_rejected() {
        let layers = vec![LayerSpec::Fc {
            inputs: 5,
            outputs: 2,
        }];
        assert!(Model::<f32>::from_layers([1, 1, 4], layers, Init::Xavier, 0).is_err());
    }

    #[test]
    fn stale_explicit_perturbation() {
        let arch = ArchSpec::toy_fc(3, [1, 1, 4]).with_hidden(vec![5]);
        let m = Model::<f64>::new(&arch, 0).unwrap();
        let bad = vec![Some(Tensor::zeros(vec![3, 5]).unwrap())];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 4]).unwrap());
        let err = m
            .forward(
                &mut tape,
                x,
                ForwardOptions {
                    perturb: Perturb::Explicit(&bad),
                    ..Default::default()
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::StaleCache { .. }));
    }

    #[test]
    fn eval_ignores_cached_state() {
        let arch = ArchSpec::toy_fc(3, [1, 1, 4]).with_hidden(vec![5]);
        let mut m = Model::<f64>::new(&arch, 1).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        m.set_mode(Mode::Eval);
        let clean = m.logits(&x).unwrap();
        *m.gradacc_mut(0) =
            GradAccState::with_cache(Tensor::ones(vec![2, 5]).unwrap(), 0.5).unwrap();
        assert!(m.cached_perturbations()[0].is_none());
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = m
            .forward(
                &mut tape,
                xv,
                ForwardOptions {
                    perturb: Perturb::State,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(tape.value(out.out).bitwise_eq(&clean));
    }

    #[test]
    fn encoder_end_is_last_hidden_activation() {
        let arch = ArchSpec::toy_fc(10, [1, 4, 4]).with_hidden(vec![8, 6]);
        let m = Model::<f32>::new(&arch, 0).unwrap();
        assert_eq!(m.layers()[m.encoder_end().unwrap()], LayerSpec::Tanh);
        assert_eq!(m.layer_shape(m.encoder_end().unwrap()), &[6]);
    }
}
