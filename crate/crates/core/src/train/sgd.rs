use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Step-decay schedule: `base · (1/factor)^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.1,
            factor: 5.0,
            period: 50,
        }
    }
}

pub fn lr_at(s: &LrSchedule, epoch: usize) -> f64 {
    let drops = epoch.checked_div(s.period).unwrap_or(0);
    s.base * (1.0 / s.factor).powi(drops as i32)
}

/// One Nesterov momentum step over every parameter:
///
/// ```text
/// g' = g + wd·θ        (only where `decay[i]`)
/// v  ← μ·v − lr·g'
/// θ  ← θ + μ·v − lr·g'
/// ```
///
/// A missing gradient counts as zero. Nothing is written if any updated
/// value would be non-finite.
pub fn sgd_nesterov_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() || decay.len() != params.len()
    {
        return Err(Error::dim(format!(
            "{} params, {} grads, {} velocities, {} decay flags",
            params.len(),
            grads.len(),
            velocity.len(),
            decay.len()
        )));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    let mut new_theta = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let theta = &params[i];
        if let Some(g) = grads[i] {
            if g.shape() != theta.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
        }
        let wd_i = if decay[i] { wd } else { T::zero() };
        let mut t = theta.data().to_vec();
        let mut v = velocity[i].data().to_vec();
        for j in 0..t.len() {
            let g = grads[i].map_or(T::zero(), |g| g.data()[j]);
            let gp = g + wd_i * t[j];
            v[j] = mu * v[j] - lr * gp;
            t[j] = t[j] + mu * v[j] - lr * gp;
        }
        if !t.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameter update for parameter {i}"
            )));
        }
        new_theta.push(t);
        new_v.push(v);
    }
    for (i, (t, v)) in new_theta.into_iter().zip(new_v).enumerate() {
        params[i].data_mut().copy_from_slice(&t);
        velocity[i].data_mut().copy_from_slice(&v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn schedule_values() {
        let sch = LrSchedule::default();
        assert_eq!(lr_at(&sch, 0), 0.1);
        assert_eq!(lr_at(&sch, 49), 0.1);
        assert!((lr_at(&sch, 50) - 0.02).abs() < 1e-15);
        assert!((lr_at(&sch, 100) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = vec![s(1.0)];
        let mut v = vec![s(0.0)];
        let g = s(0.5);
        sgd_nesterov_step(&mut p, &[Some(&g)], &mut v, 0.1, 0.0, 0.0, &[true]).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.1 * 0.5]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![s(3.0)];
        let mut v = vec![s(0.0)];
        let g = s(0.0);
        sgd_nesterov_step(&mut p, &[Some(&g)], &mut v, 0.1, 0.9, 0.0, &[true]).unwrap();
        assert_eq!(p[0].data(), &[3.0]);
    }

    #[test]
    fn two_steps_on_quadratic() {
        // f(θ) = θ²/2, g = θ; θ0 = 1, lr 0.1, μ 0.9, wd 0.
        // step 1: v = −0.1, θ = 1 − 0.09 − 0.1 = 0.81
        // step 2: g = 0.81, v = −0.09 − 0.081 = −0.171,
        //         θ = 0.81 − 0.1539 − 0.081 = 0.5751
        let mut p = vec![s(1.0)];
        let mut v = vec![s(0.0)];
        for _ in 0..2 {
            let g = p[0].clone();
            sgd_nesterov_step(&mut p, &[Some(&g)], &mut v, 0.1, 0.9, 0.0, &[true]).unwrap();
        }
        assert!((p[0].data()[0] - 0.5751).abs() < 1e-12);
        assert!((v[0].data()[0] + 0.171).abs() < 1e-12);
    }

    #[test]
    fn decay_respects_mask() {
        let mut p = vec![s(2.0), s(2.0)];
        let mut v = vec![s(0.0), s(0.0)];
        sgd_nesterov_step(&mut p, &[None, None], &mut v, 0.5, 0.0, 0.1, &[true, false]).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(p[1].data()[0], 2.0);
    }

    #[test]
    fn non_finite_update_leaves_state() {
        let mut p = vec![s(1.0)];
        let mut v = vec![s(0.0)];
        let g = s(f64::INFINITY);
        assert!(sgd_nesterov_step(&mut p, &[Some(&g)], &mut v, 0.1, 0.9, 0.0, &[true]).is_err());
        assert_eq!(p[0].data(), &[1.0]);
    }
}
