use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sgd::{lr_at, sgd_nesterov_step};
use super::{EpochRecord, TrainConfig, TrainMode, TrainTrace};
use crate::autodiff::{GradientSet, Tape};
use crate::data::{Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::nn::{gradacc_tap, ForwardOptions, Mode, Model, Perturb, INPUT_TAP};
use crate::tensor::Tensor;

const DROPOUT_KEY: u64 = 0x6472_6f70;
const NOISE_KEY: u64 = 0x6e6f_6973;

/// What one training iteration did, for instrumentation.
#[derive(Debug)]
pub struct IterationInfo<'a> {
    pub epoch: usize,
    /// Global iteration counter `t`, starting at 0.
    pub iteration: u64,
    /// Tensor added at each gradacc layer on the perturbed pass.
    pub injected: &'a [Option<Tensor<f32>>],
    /// `ε_l` behind each entry of `injected` (0 where nothing was added).
    pub eps_layer: &'a [f32],
    /// Gradacc tap gradients read on this iteration, by ordinal. In the
    /// cached modes these become the next iteration's caches.
    pub tap_grads: &'a [Tensor<f32>],
    /// FGS input perturbation, in fgs-orig mode.
    pub input_perturbation: Option<&'a Tensor<f32>>,
    pub loss: f64,
}

pub trait TrainObserver {
    fn on_iteration(&mut self, _info: &IterationInfo<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Misclassified samples on the last pass of the step.
    pub errors: usize,
    pub samples: usize,
}

struct Pass {
    loss: f64,
    grads: GradientSet<f32>,
    errors: usize,
}

/// Optimizer state and RNG streams for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    velocity: Vec<Tensor<f32>>,
    iteration: u64,
    dropout_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            velocity: model.params().iter().map(Tensor::zeros_like).collect(),
            iteration: 0,
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_KEY),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_KEY),
        })
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer iteration on `batch`. Errors are tagged with the
    /// iteration index.
    pub fn step(
        &mut self,
        model: &mut Model,
        batch: &Batch,
        epoch: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<StepOutcome> {
        let t = self.iteration;
        let out = self
            .step_inner(model, batch, epoch, observer)
            .map_err(|e| Error::Training {
                iteration: t,
                source: Box::new(e),
            })?;
        self.iteration += 1;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn pass(
        &mut self,
        model: &mut Model,
        x: &Tensor<f32>,
        labels: &[usize],
        perturb: Perturb<'_, f32>,
        tap_input: bool,
        tap_gradacc: bool,
        update_bn: bool,
        want_params: bool,
    ) -> Result<Pass> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let fwd = model.forward(
            &mut tape,
            xv,
            ForwardOptions {
                perturb,
                tap_input,
                tap_gradacc,
                stop_after: None,
                rng: Some(&mut self.dropout_rng),
            },
        )?;
        let errors = tape
            .value(fwd.out)
            .argmax(1)?
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count();
        let loss = tape.softmax_cross_entropy(fwd.out, labels)?;
        tape.set_output(loss);
        let loss_v = f64::from(tape.value(loss).item()?);
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_v}")));
        }
        let seed = Tensor::scalar(1.0f32);
        let grads = if want_params {
            tape.backward(&seed)?
        } else {
            tape.backward_taps(&seed)?
        };
        if update_bn {
            model.update_running_stats(&tape, &fwd);
        }
        Ok(Pass {
            loss: loss_v,
            grads,
            errors,
        })
    }

    fn taps_of(pass: &Pass, count: usize) -> Result<Vec<Tensor<f32>>> {
        (0..count)
            .map(|i| {
                pass.grads
                    .tap(&gradacc_tap(i))
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("no gradient reached gradacc layer {i}")))
            })
            .collect()
    }

    fn layer_eps(&self, g: &Tensor<f32>) -> f32 {
        let eps = self.cfg.eps as f32;
        if self.cfg.eps_normalize {
            eps * (g.max() - g.min())
        } else {
            eps
        }
    }

    fn step_inner(
        &mut self,
        model: &mut Model,
        batch: &Batch,
        epoch: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<StepOutcome> {
        if model.mode() != Mode::Train {
            return Err(Error::Config(
                "trainer needs the model in train mode".into(),
            ));
        }
        let alpha = self.cfg.effective_alpha();
        let n_acc = model.gradacc_count();
        let (x, y) = (&batch.x, batch.labels.as_slice());
        let eps = self.cfg.eps as f32;
        let normalize = self.cfg.eps_normalize;

        let mut injected: Vec<Option<Tensor<f32>>> = vec![None; n_acc];
        let mut eps_layer = vec![0.0f32; n_acc];
        let mut tap_grads = Vec::new();
        let mut input_pert = None;
        let mut clean = None;
        let mut pert = None;

        match self.cfg.mode {
            TrainMode::Baseline => {
                clean = Some(self.pass(model, x, y, Perturb::None, false, false, true, true)?);
            }
            TrainMode::OursOrig | TrainMode::OursJoint | TrainMode::Random => {
                for i in 0..n_acc {
                    let st = model.gradacc(i);
                    if self.cfg.mode == TrainMode::Random {
                        if let (Some(r), true) = (st.cache(), st.is_active()) {
                            let e = st.eps_layer();
                            if e != 0.0 {
                                let noise = (0..r.len())
                                    .map(|_| {
                                        let z: f32 = StandardNormal.sample(&mut self.noise_rng);
                                        e * z
                                    })
                                    .collect();
                                injected[i] = Some(Tensor::new(r.shape().to_vec(), noise)?);
                                eps_layer[i] = e;
                            }
                        }
                    } else if let Some(p) = st.perturbation() {
                        injected[i] = Some(p);
                        eps_layer[i] = st.eps_layer();
                    }
                }
                if alpha > 0.0 {
                    clean =
                        Some(self.pass(model, x, y, Perturb::None, false, false, true, true)?);
                }
                if alpha < 1.0 {
                    let p = self.pass(
                        model,
                        x,
                        y,
                        Perturb::Explicit(&injected),
                        false,
                        true,
                        clean.is_none(),
                        true,
                    )?;
                    tap_grads = Self::taps_of(&p, n_acc)?;
                    for (i, g) in tap_grads.iter().enumerate() {
                        model.gradacc_mut(i).update(g, eps, normalize)?;
                    }
                    pert = Some(p);
                }
            }
            TrainMode::FgsOrig => {
                let c = self.pass(
                    model,
                    x,
                    y,
                    Perturb::None,
                    alpha < 1.0,
                    false,
                    true,
                    alpha > 0.0,
                )?;
                if alpha < 1.0 {
                    let gx = c
                        .grads
                        .tap(INPUT_TAP)
                        .ok_or_else(|| Error::Input("no input gradient".into()))?;
                    let r = gx.sign().scale(eps);
                    let x_adv = x.add(&r)?;
                    pert = Some(self.pass(
                        model,
                        &x_adv,
                        y,
                        Perturb::None,
                        false,
                        false,
                        false,
                        true,
                    )?);
                    input_pert = Some(r);
                }
                clean = Some(c);
            }
            TrainMode::FgsInter => {
                let c = self.pass(
                    model,
                    x,
                    y,
                    Perturb::None,
                    false,
                    alpha < 1.0,
                    true,
                    alpha > 0.0,
                )?;
                if alpha < 1.0 {
                    tap_grads = Self::taps_of(&c, n_acc)?;
                    for (i, g) in tap_grads.iter().enumerate() {
                        if !g.all_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite tap gradient at gradacc layer {i}"
                            )));
                        }
                        let e = self.layer_eps(g);
                        if e != 0.0 {
                            injected[i] = Some(g.sign().scale(e));
                            eps_layer[i] = e;
                        }
                    }
                    pert = Some(self.pass(
                        model,
                        x,
                        y,
                        Perturb::Explicit(&injected),
                        false,
                        false,
                        false,
                        true,
                    )?);
                }
                clean = Some(c);
            }
        }

        // Weighted gradient and loss of the joint objective.
        let mut terms: Vec<(f32, &Pass)> = Vec::new();
        if let Some(c) = clean.as_ref().filter(|_| alpha > 0.0) {
            terms.push((alpha as f32, c));
        }
        if let Some(p) = pert.as_ref() {
            terms.push(((1.0 - alpha) as f32, p));
        }
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
        for (w, p) in &terms {
            for (&id, g) in &p.grads.params {
                let g = if *w == 1.0 { g.clone() } else { g.scale(*w) };
                grads[id] = Some(match grads[id].take() {
                    None => g,
                    Some(acc) => acc.add(&g)?,
                });
            }
        }
        let loss: f64 = terms.iter().map(|(w, p)| f64::from(*w) * p.loss).sum();
        let errors = pert.as_ref().or(clean.as_ref()).map_or(0, |p| p.errors);

        observer.on_iteration(&IterationInfo {
            epoch,
            iteration: self.iteration,
            injected: &injected,
            eps_layer: &eps_layer,
            tap_grads: &tap_grads,
            input_perturbation: input_pert.as_ref(),
            loss,
        })?;

        let lr = lr_at(&self.cfg.lr, epoch);
        let decay: Vec<bool> = (0..model.params().len()).map(|i| model.decays(i)).collect();
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        sgd_nesterov_step(
            model.params_mut(),
            &grad_refs,
            &mut self.velocity,
            lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
            &decay,
        )?;
        Ok(StepOutcome {
            loss,
            errors,
            samples: y.len(),
        })
    }
}

/// Trains `model` in place and returns the per-epoch trace. The model ends
/// in eval mode with its gradacc caches cleared.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if train_ds.images.len() / train_ds.len().max(1) != model.input_len() {
        return Err(Error::Config(format!(
            "model input {:?} does not match dataset samples {:?}",
            model.input_shape(),
            train_ds.sample_shape()
        )));
    }
    model.set_mode(Mode::Train);
    model.reset_gradacc();
    let mut trainer = Trainer::new(model, cfg)?;
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let stream = BatchStream::new(
            train_ds,
            cfg.batch,
            cfg.seed,
            epoch as u64,
            cfg.flip,
            cfg.drop_last(),
        )?;
        if stream.num_batches() == 0 {
            return Err(Error::Config(format!(
                "batch size {} leaves no full batch in {} samples",
                cfg.batch,
                train_ds.len()
            )));
        }
        let (mut loss_sum, mut batches, mut errors, mut seen) = (0.0, 0usize, 0usize, 0usize);
        for batch in stream {
            let out = trainer.step(model, &batch, epoch, observer)?;
            trace.losses.push(out.loss);
            loss_sum += out.loss;
            batches += 1;
            errors += out.errors;
            seen += out.samples;
        }
        let test_err = match test {
            Some(t) => {
                model.set_mode(Mode::Eval);
                let acc = model.accuracy(&t.images, &t.labels, cfg.eval_batch);
                model.set_mode(Mode::Train);
                Some(100.0 - acc?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr: lr_at(&cfg.lr, epoch),
            train_loss: loss_sum / batches as f64,
            train_err: 100.0 * errors as f64 / seen as f64,
            test_err,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&record);
        trace.epochs.push(record);
    }
    model.set_mode(Mode::Eval);
    model.reset_gradacc();
    Ok(trace)
}

fn train_checked(
    allowed: &[TrainMode],
    model: &mut Model,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    if !allowed.contains(&cfg.mode) {
        return Err(Error::Config(format!(
            "mode {} not handled here (expected one of {allowed:?})",
            cfg.mode
        )));
    }
    train(model, train_ds, test, cfg, &mut NoObserver)
}

/// Cached layerwise training (ours-orig / ours-joint).
pub fn train_ours(
    model: &mut Model,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    train_checked(
        &[TrainMode::OursOrig, TrainMode::OursJoint],
        model,
        train_ds,
        test,
        cfg,
    )
}

/// FGS adversarial training (fgs-orig / fgs-inter).
pub fn train_fgs(
    model: &mut Model,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    train_checked(
        &[TrainMode::FgsOrig, TrainMode::FgsInter],
        model,
        train_ds,
        test,
        cfg,
    )
}

/// Layerwise Gaussian-noise training.
pub fn train_random(
    model: &mut Model,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    train_checked(&[TrainMode::Random], model, train_ds, test, cfg)
}

/// Fraction of positions at which two label sequences agree.
pub fn label_overlap(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::ArchSpec;

    fn setup() -> (Model, Dataset) {
        let ds = synthetic_blobs(3, 20, 6, 0.3, 5).unwrap();
        let arch = ArchSpec::toy_fc(3, [1, 1, 6]).with_hidden(vec![8, 5]);
        (Model::new(&arch, 3).unwrap(), ds)
    }

    fn cfg(mode: TrainMode, eps: f64) -> TrainConfig {
        TrainConfig {
            mode,
            eps,
            epochs: 2,
            batch: 16,
            weight_decay: 1e-4,
            lr: super::super::LrSchedule {
                base: 0.05,
                factor: 5.0,
                period: 50,
            },
            ..Default::default()
        }
    }

    fn run(mode: TrainMode, eps: f64) -> (Model, TrainTrace) {
        let (mut m, ds) = setup();
        let t = train(&mut m, &ds, None, &cfg(mode, eps), &mut NoObserver).unwrap();
        (m, t)
    }

    fn same_params(a: &Model, b: &Model) -> bool {
        a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.bitwise_eq(y))
    }

    #[test]
    fn zero_eps_matches_baseline() {
        let (base, _) = run(TrainMode::Baseline, 0.0);
        for mode in [TrainMode::OursOrig, TrainMode::Random] {
            let mut c = cfg(mode, 0.0);
            c.drop_last = Some(false);
            let (mut m, ds) = setup();
            train(&mut m, &ds, None, &c, &mut NoObserver).unwrap();
            assert!(same_params(&base, &m), "{mode}");
        }
    }

    #[test]
    fn alpha_one_fgs_matches_baseline() {
        let (base, _) = run(TrainMode::Baseline, 0.0);
        let mut c = cfg(TrainMode::FgsOrig, 0.1);
        c.alpha = 1.0;
        let (mut m, ds) = setup();
        train(&mut m, &ds, None, &c, &mut NoObserver).unwrap();
        assert!(same_params(&base, &m));
    }

    #[test]
    fn every_mode_trains_deterministically() {
        for mode in TrainMode::ALL {
            let (a, ta) = run(mode, 0.05);
            let (b, tb) = run(mode, 0.05);
            assert!(ta.same_losses(&tb), "{mode}");
            assert!(same_params(&a, &b), "{mode}");
            assert_eq!(ta.epochs.len(), 2);
            assert!(ta.losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn wrappers_check_mode() {
        let (mut m, ds) = setup();
        assert!(train_ours(&mut m, &ds, None, &cfg(TrainMode::FgsOrig, 0.1)).is_err());
        assert!(train_fgs(&mut m, &ds, None, &cfg(TrainMode::FgsInter, 0.1)).is_ok());
    }

    #[test]
    fn oversized_batch_with_drop_last() {
        let (mut m, ds) = setup();
        let mut c = cfg(TrainMode::OursOrig, 0.1);
        c.batch = 1000;
        assert!(matches!(
            train(&mut m, &ds, None, &c, &mut NoObserver),
            Err(Error::Config(_))
        ));
    }
}
