//! Input-output Jacobians of a model, their singular-value spectra, and the
//! first-order perturbation bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::report::{SpectrumParams, SpectrumReport};
use super::svd::singular_values;
use crate::autodiff::jacobian;
use crate::error::{Error, Result};
use crate::nn::{ForwardOptions, Mode, Model};
use crate::tensor::Tensor;

/// Where the differentiated map ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cut {
    /// Through the last hidden activation.
    Encoder,
    /// Through the logits.
    Logits,
    /// Through an explicit layer index.
    Layer(usize),
}

impl Cut {
    pub fn layer<T: crate::Real>(self, model: &Model<T>) -> Result<usize> {
        match self {
            Cut::Encoder => model.encoder_end(),
            Cut::Logits => Ok(model.layers().len() - 1),
            Cut::Layer(i) if i < model.layers().len() => Ok(i),
            Cut::Layer(i) => Err(Error::Config(format!("no layer {i}"))),
        }
    }
}

/// Jacobian of the map `sample ↦ activation at cut` at one flattened sample
/// `x` of length `model.input_len()`. The model must be in eval mode.
pub fn model_jacobian(model: &Model<f64>, x: &Tensor<f64>, cut: Cut) -> Result<Tensor<f64>> {
    if model.mode() != Mode::Eval {
        return Err(Error::Config(
            "Jacobians need the model in eval mode".into(),
        ));
    }
    let m = model.input_len();
    if x.len() != m {
        return Err(Error::dim(format!(
            "sample has {} values, model expects {m}",
            x.len()
        )));
    }
    let stop = cut.layer(model)?;
    let x = x.reshape(vec![m])?;
    jacobian(
        |g, xv| {
            let row = g.reshape(xv, vec![1, m])?;
            let out = model.forward(
                g,
                row,
                ForwardOptions {
                    stop_after: Some(stop),
                    ..Default::default()
                },
            )?;
            let d = g.value(out.out).len();
            g.reshape(out.out, vec![d])
        },
        &x,
    )
}

/// Element-wise mean of the per-sample encoder Jacobian spectra, truncated
/// to `top_k`. `samples` is `N×…` with `N ≥ 1`; the model is used in eval
/// mode at double precision. Samples are spread over `threads` workers.
pub fn singular_spectrum(
    model: &Model,
    samples: &Tensor<f32>,
    top_k: usize,
    cut: Cut,
    threads: usize,
    name: &str,
) -> Result<SpectrumReport> {
    let mut m64 = model.cast::<f64>();
    m64.set_mode(Mode::Eval);
    let stop = cut.layer(&m64)?;
    let n = samples.batch();
    let per = samples.len() / n;
    let samples = samples.cast::<f64>();
    let rows: Vec<Tensor<f64>> = (0..n)
        .map(|i| Tensor::vector(samples.data()[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<_>>()?;

    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);
    let spectra: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(chunk)
            .map(|part| {
                let m64 = &m64;
                s.spawn(move || {
                    part.iter()
                        .map(|x| singular_values(&model_jacobian(m64, x, Cut::Layer(stop))?))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("spectrum worker panicked"))
            .collect()
    });

    let mut mean: Vec<f64> = Vec::new();
    for s in spectra {
        let s = s?;
        if mean.is_empty() {
            mean = vec![0.0; s.len()];
        }
        for (acc, v) in mean.iter_mut().zip(&s) {
            *acc += v / n as f64;
        }
    }
    mean.truncate(top_k);
    // Averaging can break ties by one ulp; keep the report monotone.
    for i in 1..mean.len() {
        mean[i] = mean[i].min(mean[i - 1]);
    }
    let report = SpectrumReport::new(
        name.to_string(),
        SpectrumParams {
            samples: n,
            top_k,
            cut: stop,
        },
        &mean,
    );
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    /// `‖J·δ‖₂`
    pub lhs: f64,
    /// `sqrt(Σσᵢ²)·‖δ‖₂`
    pub rhs: f64,
    pub ok: bool,
}

impl BoundCheck {
    pub const SLACK: f64 = 1e-9;
}

/// Compares the directional derivative `‖J·δ‖` against `‖J‖_F·‖δ‖`, with the
/// Frobenius norm taken from the singular values of `J`.
pub fn bound_check_jacobian(j: &Tensor<f64>, delta: &Tensor<f64>) -> Result<BoundCheck> {
    let [_, m] = j.dims2()?;
    if delta.len() != m {
        return Err(Error::dim(format!(
            "direction of length {} for a Jacobian with {m} columns",
            delta.len()
        )));
    }
    let jd = j.matmul(&delta.reshape(vec![m, 1])?)?;
    let lhs = jd.l2_norm();
    let fro = singular_values(j)?
        .iter()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    let rhs = fro * delta.l2_norm();
    Ok(BoundCheck {
        lhs,
        rhs,
        ok: lhs <= rhs + BoundCheck::SLACK,
    })
}

/// Bound check for `model` at sample `x` along `delta`.
pub fn perturbation_bound_check(
    model: &Model<f64>,
    x: &Tensor<f64>,
    delta: &Tensor<f64>,
    cut: Cut,
) -> Result<BoundCheck> {
    let j = model_jacobian(model, x, cut)?;
    bound_check_jacobian(&j, delta)
}

/// Relative size of the random directions in [`random_bound_checks`].
pub const BOUND_DELTA_SCALE: f64 = 1e-3;

/// Bound checks at `trials` random `(sample, direction)` pairs. Samples are
/// drawn uniformly from the rows of `samples`; each direction is Gaussian,
/// rescaled to `BOUND_DELTA_SCALE` times the sample's norm.
pub fn random_bound_checks(
    model: &Model,
    samples: &Tensor<f32>,
    trials: usize,
    seed: u64,
    cut: Cut,
) -> Result<Vec<BoundCheck>> {
    let mut m64 = model.cast::<f64>();
    m64.set_mode(Mode::Eval);
    let n = samples.batch();
    let per = samples.len() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626f_756e);
    (0..trials)
        .map(|_| {
            let i = rng.random_range(0..n);
            let x: Vec<f64> = samples.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let x = Tensor::vector(x)?;
            let dir: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dir = Tensor::vector(dir)?;
            let target = BOUND_DELTA_SCALE * if x.l2_norm() > 0.0 { x.l2_norm() } else { 1.0 };
            let delta = dir.scale(target / dir.l2_norm());
            perturbation_bound_check(&m64, &x, &delta, cut)
        })
        .collect()
}
