//! Robustness evaluation, Jacobian spectra and feature projections.

pub mod attack;
pub mod pca;
pub mod report;
pub mod spectrum;
pub mod svd;

pub use attack::{
    attack_accuracy, cached_layerwise_attack, clamp_channels, fgs_accuracy, fgs_attack, AttackKind,
    AttackOptions,
};
pub use pca::{project2d, Projection};
pub use report::{
    EpsSweepReport, SpectrumParams, SpectrumReport, SpectrumRow, SweepParams, SweepRow,
};
pub use spectrum::{
    bound_check_jacobian, model_jacobian, perturbation_bound_check, random_bound_checks,
    singular_spectrum, BoundCheck, Cut, BOUND_DELTA_SCALE,
};
pub use svd::{singular_values, svd, Svd};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Accuracy under `attack` for each ε in `eps`, which must start at 0 and be
/// strictly increasing. Clamp bounds default to the valid range implied by
/// the dataset's normalization stats, if any.
pub fn eps_sweep(
    model: &Model,
    ds: &Dataset,
    attack: AttackKind,
    eps: &[f64],
    opts: &AttackOptions,
    name: &str,
) -> Result<EpsSweepReport> {
    let mut opts = opts.clone();
    if opts.bounds.is_none() {
        opts.bounds = ds.stats.as_ref().map(|s| s.bounds());
    }
    let rows = eps
        .iter()
        .map(|&e| {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::Config(format!("bad ε {e}")));
            }
            Ok(SweepRow {
                eps: e,
                accuracy: attack_accuracy(model, ds, attack, e, &opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EpsSweepReport {
        kind: EpsSweepReport::KIND.into(),
        model: name.to_string(),
        params: SweepParams {
            attack,
            split: match ds.split {
                Split::Train => "train",
                Split::Test => "test",
            }
            .into(),
            batch: opts.batch,
            eps_normalize: opts.eps_normalize,
        },
        rows,
    };
    report.validate().map_err(|e| match e {
        Error::Input(msg) => Error::Config(msg),
        other => other,
    })?;
    Ok(report)
}
