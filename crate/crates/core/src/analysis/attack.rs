//! Test-time attacks: FGS on the input and cached sign-gradient
//! perturbations carried from one test batch to the next.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{gradacc_tap, ForwardOptions, Mode, Model, Perturb, INPUT_TAP};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// `x + ε·sign(∇ₓJ)` on each test batch.
    FgsInput,
    /// Every gradacc activation perturbed by the previous batch's cached
    /// sign-gradient.
    CachedLayerwise,
    /// Only the input perturbed by the previous batch's cached sign-gradient.
    CachedInputOnly,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::FgsInput => "fgs-input",
            AttackKind::CachedLayerwise => "cached-layerwise",
            AttackKind::CachedInputOnly => "cached-input-only",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AttackKind::FgsInput,
            AttackKind::CachedLayerwise,
            AttackKind::CachedInputOnly,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown attack `{s}`")))
    }
}

fn require_eval(model: &Model) -> Result<()> {
    if model.mode() == Mode::Eval {
        Ok(())
    } else {
        Err(Error::Config("attacks need the model in eval mode".into()))
    }
}

/// Clamps each channel of an `N×C×…` batch to its `(lo, hi)` range.
pub fn clamp_channels(x: &mut Tensor<f32>, bounds: &[(f32, f32)]) -> Result<()> {
    let n = x.batch();
    let per = x.len() / n;
    if bounds.is_empty() || !per.is_multiple_of(bounds.len()) {
        return Err(Error::dim(format!(
            "{} channel bounds for samples of {per} values",
            bounds.len()
        )));
    }
    let plane = per / bounds.len();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let (lo, hi) = bounds[(i % per) / plane];
        *v = v.clamp(lo, hi);
    }
    Ok(())
}

/// Loss gradients at the requested taps for one batch, plus the logits.
fn tapped_gradients(
    model: &Model,
    x: &Tensor<f32>,
    labels: &[usize],
    perturb: Perturb<'_, f32>,
    tap_input: bool,
    tap_gradacc: bool,
) -> Result<(Tensor<f32>, crate::autodiff::GradientSet<f32>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let fwd = model.forward(
        &mut tape,
        xv,
        ForwardOptions {
            perturb,
            tap_input,
            tap_gradacc,
            ..Default::default()
        },
    )?;
    let logits = tape.value(fwd.out).clone();
    let loss = tape.softmax_cross_entropy(fwd.out, labels)?;
    tape.set_output(loss);
    let grads = tape.backward_taps(&Tensor::scalar(1.0))?;
    Ok((logits, grads))
}

/// FGS adversarial batch `x + ε·sign(∇ₓJ)`, then clamped per channel when
/// `bounds` is given. `ε = 0` returns `x` unchanged.
pub fn fgs_attack(
    model: &Model,
    x: &Tensor<f32>,
    labels: &[usize],
    eps: f64,
    bounds: Option<&[(f32, f32)]>,
) -> Result<Tensor<f32>> {
    require_eval(model)?;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let (_, grads) = tapped_gradients(model, x, labels, Perturb::None, true, false)?;
    let g = grads
        .tap(INPUT_TAP)
        .ok_or_else(|| Error::Input("no gradient reached the input".into()))?;
    let mut adv = x.add(&g.sign().scale(eps as f32))?;
    if let Some(b) = bounds {
        clamp_channels(&mut adv, b)?;
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOptions {
    /// Test batch size. For the cached attacks, 1 means each sample is
    /// perturbed with the previous sample's gradients.
    pub batch: usize,
    /// Per-channel valid input range, applied after input perturbations.
    pub bounds: Option<Vec<(f32, f32)>>,
    /// Scale ε by each cached gradient's range, as in training.
    pub eps_normalize: bool,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            batch: 1,
            bounds: None,
            eps_normalize: false,
        }
    }
}

fn slice_rows(t: &Tensor<f32>, rows: usize) -> Result<Tensor<f32>> {
    if t.batch() == rows {
        Ok(t.clone())
    } else if t.batch() > rows {
        t.slice_batch(0, rows)
    } else {
        Err(Error::StaleCache {
            cached: t.shape().to_vec(),
            actual: vec![rows],
        })
    }
}

/// Accuracy (percent) of `model` on `ds` when each batch is perturbed with
/// sign-gradients cached from the previous batch, without any parameter
/// updates. The first batch runs clean. When the final batch is smaller than
/// the cache, the cache's leading rows are used.
pub fn cached_layerwise_attack(
    model: &Model,
    ds: &Dataset,
    eps: f64,
    input_only: bool,
    opts: &AttackOptions,
) -> Result<f64> {
    require_eval(model)?;
    if opts.batch == 0 {
        return Err(Error::Config("attack batch must be positive".into()));
    }
    let n_acc = model.gradacc_count();
    if !input_only && n_acc == 0 {
        return Err(Error::Config(
            "layerwise attack needs a model with gradient-accumulation layers".into(),
        ));
    }
    let eps = eps as f32;
    let scale = |g: &Tensor<f32>| {
        if opts.eps_normalize {
            eps * (g.max() - g.min())
        } else {
            eps
        }
    };
    // Cached sign-gradients and their ε_l, by gradacc ordinal (or the input).
    let mut cache: Vec<Option<(Tensor<f32>, f32)>> = Vec::new();
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(opts.batch) {
        let end = (start + opts.batch).min(ds.len());
        let mut x = ds.images.slice_batch(start, end)?;
        let labels = &ds.labels[start..end];
        let k = end - start;

        let mut injected: Vec<Option<Tensor<f32>>> = Vec::new();
        if input_only {
            if let Some(Some((r, e))) = cache.first() {
                if eps != 0.0 {
                    x = x.add(&slice_rows(r, k)?.scale(*e))?;
                    if let Some(b) = &opts.bounds {
                        clamp_channels(&mut x, b)?;
                    }
                }
            }
        } else {
            for c in &cache {
                injected.push(match c {
                    Some((r, e)) if *e != 0.0 => Some(slice_rows(r, k)?.scale(*e)),
                    _ => None,
                });
            }
        }
        let perturb = if injected.is_empty() {
            Perturb::None
        } else {
            Perturb::Explicit(&injected)
        };
        let (logits, grads) =
            tapped_gradients(model, &x, labels, perturb, input_only, !input_only)?;
        correct += logits
            .argmax(1)?
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();

        let names: Vec<String> = if input_only {
            vec![INPUT_TAP.to_string()]
        } else {
            (0..n_acc).map(gradacc_tap).collect()
        };
        cache = names
            .iter()
            .map(|name| {
                let g = grads
                    .tap(name)
                    .ok_or_else(|| Error::Input(format!("no gradient at tap `{name}`")))?;
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient at `{name}`")));
                }
                Ok(Some((g.sign(), scale(g))))
            })
            .collect::<Result<_>>()?;
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Accuracy (percent) on FGS-perturbed batches.
pub fn fgs_accuracy(model: &Model, ds: &Dataset, eps: f64, opts: &AttackOptions) -> Result<f64> {
    require_eval(model)?;
    let batch = opts.batch.max(1);
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(batch) {
        let end = (start + batch).min(ds.len());
        let x = ds.images.slice_batch(start, end)?;
        let labels = &ds.labels[start..end];
        let adv = fgs_attack(model, &x, labels, eps, opts.bounds.as_deref())?;
        correct += model
            .predict(&adv)?
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Accuracy under `attack` at one ε.
pub fn attack_accuracy(
    model: &Model,
    ds: &Dataset,
    attack: AttackKind,
    eps: f64,
    opts: &AttackOptions,
) -> Result<f64> {
    match attack {
        AttackKind::FgsInput => fgs_accuracy(model, ds, eps, opts),
        AttackKind::CachedLayerwise => cached_layerwise_attack(model, ds, eps, false, opts),
        AttackKind::CachedInputOnly => cached_layerwise_attack(model, ds, eps, true, opts),
    }
}
