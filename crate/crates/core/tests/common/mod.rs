#![allow(dead_code)]

use lwat::autodiff::{BatchNormMode, Tape, Var};
use lwat::data::synthetic_blobs;
use lwat::nn::{ArchSpec, ForwardOptions, Init, LayerSpec, Mode, Model};
use lwat::tensor::PoolGeometry;
use lwat::train::{
    train, IterationInfo, LrSchedule, TrainConfig, TrainMode, TrainObserver, TrainTrace,
};
use lwat::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Below this norm a gradient is lost in finite-difference round-off, which
/// is about `f64::EPSILON / FD_STEP` per element.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn rel_err(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let diff = a.sub(n).unwrap().l2_norm();
    diff / a.l2_norm().max(n.l2_norm()).max(GRAD_FLOOR)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A scalar function of several differentiable tensors.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over all inputs of `case`.
pub fn check(case: &Case) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    tape.set_output(out);
    let grads = tape.backward(&Tensor::scalar(1.0)).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = grads.param(i).cloned().unwrap_or_else(|| x.zeros_like());
        let mut numeric = x.zeros_like();
        for j in 0..x.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric.data_mut()[j] = (eval(case, &plus) - eval(case, &minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Reduces a tensor-valued node to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn weigh(t: &mut Tape<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = t.input(w.clone());
    let p = t.mul(v, c)?;
    t.sum(p)
}

fn weighted(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = randn(rng, out_shape);
    Case {
        name,
        inputs,
        build: Box::new(move |t, v| {
            let y = f(t, v)?;
            weigh(t, y, &w)
        }),
    }
}

/// Every primitive and loss, with inputs drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut out = Vec::new();

    let (a, b) = (randn(r, &[3, 4]), randn(r, &[4, 2]));
    out.push(weighted("matmul", vec![a, b], &[3, 2], r, |t, v| {
        t.matmul(v[0], v[1])
    }));

    let (x, w, bias) = (randn(r, &[3, 5]), randn(r, &[4, 5]), randn(r, &[4]));
    out.push(weighted("linear", vec![x, w, bias], &[3, 4], r, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    }));
    let (x, w) = (randn(r, &[2, 1, 2, 3]), randn(r, &[3, 6]));
    out.push(weighted(
        "linear-flatten",
        vec![x, w],
        &[2, 3],
        r,
        |t, v| t.linear(v[0], v[1], None),
    ));

    let (x, k, bias) = (
        randn(r, &[2, 2, 5, 5]),
        randn(r, &[3, 2, 3, 3]),
        randn(r, &[3]),
    );
    out.push(weighted(
        "conv2d-pad1",
        vec![x, k, bias],
        &[2, 3, 5, 5],
        r,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    ));
    let (x, k) = (randn(r, &[1, 2, 6, 6]), randn(r, &[2, 2, 2, 2]));
    out.push(weighted(
        "conv2d-stride2",
        vec![x, k],
        &[1, 2, 3, 3],
        r,
        |t, v| t.conv2d(v[0], v[1], None, 2, 0),
    ));

    let (x, g, b) = (randn(r, &[4, 3, 2, 2]), randn(r, &[3]), randn(r, &[3]));
    out.push(weighted(
        "batchnorm-train",
        vec![x, g, b],
        &[4, 3, 2, 2],
        r,
        |t, v| t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train),
    ));
    let (x, g, b) = (randn(r, &[5, 4]), randn(r, &[4]), randn(r, &[4]));
    out.push(weighted(
        "batchnorm-train-2d",
        vec![x, g, b],
        &[5, 4],
        r,
        |t, v| t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train),
    ));
    let (x, g, b) = (randn(r, &[3, 2, 2, 2]), randn(r, &[2]), randn(r, &[2]));
    let mean = vec![0.3, -0.2];
    let var = vec![1.5, 0.7];
    out.push(weighted(
        "batchnorm-eval",
        vec![x, g, b],
        &[3, 2, 2, 2],
        r,
        move |t, v| {
            t.batch_norm(
                v[0],
                v[1],
                v[2],
                1e-5,
                BatchNormMode::Eval {
                    mean: mean.clone(),
                    var: var.clone(),
                },
            )
        },
    ));

    let (p, q) = (randn(r, &[2, 3]), randn(r, &[2, 3]));
    out.push(weighted(
        "add",
        vec![p.clone(), q.clone()],
        &[2, 3],
        r,
        |t, v| t.add(v[0], v[1]),
    ));
    out.push(weighted(
        "sub",
        vec![p.clone(), q.clone()],
        &[2, 3],
        r,
        |t, v| t.sub(v[0], v[1]),
    ));
    out.push(weighted("mul", vec![p.clone(), q], &[2, 3], r, |t, v| {
        t.mul(v[0], v[1])
    }));
    out.push(weighted("scale", vec![p.clone()], &[2, 3], r, |t, v| {
        t.scale(v[0], -1.7)
    }));
    let c = randn(r, &[2, 3]);
    out.push(weighted(
        "add-const (gradacc injection)",
        vec![p.clone()],
        &[2, 3],
        r,
        move |t, v| t.add_const(v[0], c.clone()),
    ));
    out.push(weighted("identity", vec![p.clone()], &[2, 3], r, |t, v| {
        t.identity(v[0])
    }));
    out.push(weighted("tanh", vec![p.clone()], &[2, 3], r, |t, v| {
        t.tanh(v[0])
    }));
    out.push(weighted("exp", vec![p.clone()], &[2, 3], r, |t, v| {
        t.exp(v[0])
    }));
    let pos = uniform(r, &[2, 3], 0.5, 2.0);
    out.push(weighted("log", vec![pos], &[2, 3], r, |t, v| t.log(v[0])));
    // Keep relu inputs away from the kink.
    let mut rl = randn(r, &[3, 4]);
    rl.data_mut()
        .iter_mut()
        .for_each(|x| *x += 0.1 * x.signum());
    out.push(weighted("relu", vec![rl], &[3, 4], r, |t, v| t.relu(v[0])));
    let mp = randn(r, &[2, 2, 4, 4]);
    out.push(weighted("maxpool", vec![mp], &[2, 2, 2, 2], r, |t, v| {
        t.maxpool(v[0], PoolGeometry { size: 2, stride: 2 })
    }));
    let mask = Tensor::new(
        vec![2, 3],
        (0..6).map(|i| if i % 3 == 1 { 0.0 } else { 2.0 }).collect(),
    )
    .unwrap();
    out.push(weighted(
        "dropout",
        vec![p.clone()],
        &[2, 3],
        r,
        move |t, v| t.dropout(v[0], mask.clone()),
    ));
    out.push(weighted("reshape", vec![p.clone()], &[3, 2], r, |t, v| {
        t.reshape(v[0], vec![3, 2])
    }));

    out.push(Case {
        name: "sum",
        inputs: vec![p.clone()],
        build: Box::new(|t, v| t.sum(v[0])),
    });
    out.push(Case {
        name: "mean",
        inputs: vec![p],
        build: Box::new(|t, v| t.mean(v[0])),
    });
    let logits = randn(r, &[4, 5]);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let l2 = labels.clone();
    out.push(Case {
        name: "softmax-cross-entropy",
        inputs: vec![logits.clone()],
        build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
    });
    // Joint adversarial objective α·J(z) + (1−α)·J(z + c).
    let c = randn(r, &[4, 5]).scale(0.1);
    out.push(Case {
        name: "joint-loss",
        inputs: vec![logits],
        build: Box::new(move |t, v| {
            let clean = t.softmax_cross_entropy(v[0], &l2)?;
            let moved = t.add_const(v[0], c.clone())?;
            let adv = t.softmax_cross_entropy(moved, &l2)?;
            let a = t.scale(clean, 0.3)?;
            let b = t.scale(adv, 0.7)?;
            t.add(a, b)
        }),
    });
    out
}

/// Whole-model loss gradient against central differences over every
/// parameter and the input. Train-mode batch norm is included.
pub fn check_model(mut model: Model<f64>, x: Tensor<f64>, labels: &[usize]) -> f64 {
    model.set_mode(Mode::Train);
    let loss_of = |m: &Model<f64>, x: &Tensor<f64>, want: bool| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let f = m
            .forward(
                &mut tape,
                xv,
                ForwardOptions {
                    tap_input: want,
                    ..Default::default()
                },
            )
            .unwrap();
        let l = tape.softmax_cross_entropy(f.out, labels).unwrap();
        tape.set_output(l);
        let v = tape.value(l).item().unwrap();
        let g = want.then(|| tape.backward(&Tensor::scalar(1.0)).unwrap());
        (v, g)
    };
    let (_, g) = loss_of(&model, &x, true);
    let g = g.unwrap();
    let mut worst = 0.0f64;
    for pi in 0..model.params().len() {
        let analytic = g.param(pi).unwrap().clone();
        let mut numeric = analytic.zeros_like();
        for j in 0..analytic.len() {
            let orig = model.params()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + FD_STEP;
            let (lp, _) = loss_of(&model, &x, false);
            model.params_mut()[pi].data_mut()[j] = orig - FD_STEP;
            let (lm, _) = loss_of(&model, &x, false);
            model.params_mut()[pi].data_mut()[j] = orig;
            numeric.data_mut()[j] = (lp - lm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let analytic = g.tap(lwat::nn::INPUT_TAP).unwrap().clone();
    let mut numeric = x.zeros_like();
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[j] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[j] -= FD_STEP;
        numeric.data_mut()[j] =
            (loss_of(&model, &xp, false).0 - loss_of(&model, &xm, false).0) / (2.0 * FD_STEP);
    }
    worst.max(rel_err(&analytic, &numeric))
}

/// Small toy-fc and conv models in double precision for whole-model checks.
pub fn model_cases(seed: u64) -> Vec<(&'static str, Model<f64>, Tensor<f64>, Vec<usize>)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465);
    let fc = Model::<f64>::new(
        &ArchSpec::toy_fc(3, [1, 1, 6]).with_hidden(vec![5, 4]),
        seed,
    )
    .unwrap();
    let fc_x = randn(&mut r, &[4, 6]);
    let conv = Model::<f64>::from_layers(
        [2, 4, 4],
        vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::GradAcc,
            LayerSpec::Tanh,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Fc {
                inputs: 12,
                outputs: 3,
            },
        ],
        Init::Xavier,
        seed,
    )
    .unwrap();
    let conv_x = randn(&mut r, &[3, 2, 4, 4]);
    let labels =
        |n: usize, r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(0..3)).collect::<Vec<_>>();
    let l1 = labels(4, &mut r);
    let l2 = labels(3, &mut r);
    vec![("toy-fc", fc, fc_x, l1), ("conv-bn-pool", conv, conv_x, l2)]
}

/// Violations of the layerwise-training invariants seen over a run.
#[derive(Default)]
pub struct InvariantLog {
    prev_taps: Option<Vec<Tensor<f32>>>,
    eps: f32,
    pub iterations: usize,
    pub injections: usize,
    pub violations: Vec<String>,
}

impl InvariantLog {
    pub fn new(eps: f64) -> Self {
        InvariantLog {
            eps: eps as f32,
            ..Default::default()
        }
    }
}

impl TrainObserver for InvariantLog {
    fn on_iteration(&mut self, info: &IterationInfo<'_>) -> Result<()> {
        let t = info.iteration;
        self.iterations += 1;
        let mut bad = |msg: String| self.violations.push(format!("t={t}: {msg}"));
        match &self.prev_taps {
            None => {
                if info.injected.iter().any(Option::is_some) {
                    bad("first iteration was perturbed".into());
                }
            }
            Some(prev) => {
                for (l, g) in prev.iter().enumerate() {
                    let expected_eps = self.eps * (g.max() - g.min());
                    if info.eps_layer[l] != expected_eps {
                        bad(format!(
                            "layer {l}: ε_l {} != ε·(M−m) = {expected_eps}",
                            info.eps_layer[l]
                        ));
                    }
                    match &info.injected[l] {
                        None if expected_eps != 0.0 => bad(format!("layer {l}: nothing injected")),
                        None => {}
                        Some(p) => {
                            self.injections += 1;
                            if !p.bitwise_eq(&g.sign().scale(expected_eps)) {
                                bad(format!(
                                    "layer {l}: injection is not ε_l·sign(previous tap)"
                                ));
                            }
                            if p.linf_norm() > expected_eps.abs() {
                                bad(format!("layer {l}: ‖ε_l·r‖∞ exceeds ε_l"));
                            }
                        }
                    }
                }
            }
        }
        self.prev_taps = Some(info.tap_grads.to_vec());
        Ok(())
    }
}

pub const INSTRUMENTED_ITERATIONS: usize = 50;
pub const INSTRUMENTED_EPS: f64 = 10.0;

/// Ours-orig with normalized ε on synthetic blobs: 120 samples in batches
/// of 12 for 5 epochs, so exactly 50 iterations.
pub fn instrumented_run(seed: u64) -> (TrainTrace, InvariantLog) {
    let ds = synthetic_blobs(3, 40, 16, 0.5, seed).unwrap();
    let arch = ArchSpec::toy_fc(3, [1, 1, 16]).with_hidden(vec![32, 16]);
    let mut model = Model::new(&arch, seed).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::OursOrig,
        eps: INSTRUMENTED_EPS,
        eps_normalize: true,
        epochs: 5,
        batch: 12,
        lr: LrSchedule {
            base: 0.05,
            factor: 5.0,
            period: 3,
        },
        seed,
        ..TrainConfig::default()
    };
    let mut log = InvariantLog::new(cfg.eps);
    let trace = train(&mut model, &ds, None, &cfg, &mut log).unwrap();
    (trace, log)
}
