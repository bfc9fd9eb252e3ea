//! Gradient-accumulation layer state.
//!
//! Each layer keeps the sign of the loss gradient that reached its output on
//! the previous iteration and, when active, adds `ε_l · r` to the current
//! activation. `ε_l` is either the base ε or, with normalization, the base ε
//! times the range `max − min` of that same gradient.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct GradAccState<T: Real = f32> {
    r: Option<Tensor<T>>,
    eps_scale: T,
    eps_layer: T,
    active: bool,
}

impl<T: Real> Default for GradAccState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradAccState<T> {
    /// Inactive state with an all-zero (absent) cache.
    pub fn new() -> Self {
        GradAccState {
            r: None,
            eps_scale: T::zero(),
            eps_layer: T::zero(),
            active: false,
        }
    }

    /// Active state with an explicit cache; mostly useful in tests.
    pub fn with_cache(r: Tensor<T>, eps_layer: T) -> Result<Self> {
        check_sign_tensor(&r)?;
        Ok(GradAccState {
            r: Some(r),
            eps_scale: eps_layer,
            eps_layer,
            active: true,
        })
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Cached sign-gradient, `None` before the first update.
    pub fn cache(&self) -> Option<&Tensor<T>> {
        self.r.as_ref()
    }

    /// Base ε recorded at the last update.
    pub fn eps_scale(&self) -> T {
        self.eps_scale
    }

    /// Per-layer ε applied on the next forward pass.
    pub fn eps_layer(&self) -> T {
        self.eps_layer
    }

    /// Additive perturbation `ε_l · r` for the next forward pass, or `None`
    /// when the layer is inactive, has no cache yet, or `ε_l` is zero.
    pub fn perturbation(&self) -> Option<Tensor<T>> {
        match (&self.r, self.active) {
            (Some(r), true) if self.eps_layer != T::zero() => Some(r.scale(self.eps_layer)),
            _ => None,
        }
    }

    /// Applies the layer to an activation: `x + ε_l · r` when active,
    /// otherwise `x` unchanged.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.active {
            return Ok(x.clone());
        }
        match &self.r {
            None => Ok(x.clone()),
            Some(r) if r.shape() != x.shape() => Err(Error::StaleCache {
                cached: r.shape().to_vec(),
                actual: x.shape().to_vec(),
            }),
            Some(_) if self.eps_layer == T::zero() => Ok(x.clone()),
            Some(r) => x.zip_with(r, |a, s| a + self.eps_layer * s),
        }
    }

    /// Caches `sign(tap_grad)` and recomputes `ε_l`; activates the layer.
    pub fn update(&mut self, tap_grad: &Tensor<T>, eps_base: T, normalize: bool) -> Result<()> {
        if !tap_grad.all_finite() {
            return Err(Error::Numeric(
                "non-finite gradient reached a gradient-accumulation layer".into(),
            ));
        }
        self.eps_layer = if normalize {
            eps_base * (tap_grad.max() - tap_grad.min())
        } else {
            eps_base
        };
        self.eps_scale = eps_base;
        self.r = Some(tap_grad.sign());
        self.active = true;
        debug_assert!(self
            .perturbation()
            .is_none_or(|p| p.linf_norm() <= self.eps_layer.abs()));
        Ok(())
    }

    /// Returns to the inactive, empty state (used at test time).
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn cast<U: Real>(&self) -> GradAccState<U> {
        GradAccState {
            r: self.r.as_ref().map(Tensor::cast),
            eps_scale: U::of(self.eps_scale.as_f64()),
            eps_layer: U::of(self.eps_layer.as_f64()),
            active: self.active,
        }
    }
}

fn check_sign_tensor<T: Real>(r: &Tensor<T>) -> Result<()> {
    let ok = r
        .data()
        .iter()
        .all(|&v| v == T::one() || v == -T::one() || v == T::zero());
    if ok {
        Ok(())
    } else {
        Err(Error::Input("cache entries must lie in {-1, 0, 1}".into()))
    }
}
