use super::svd::svd;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two-dimensional PCA projection.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `N×2` coordinates along the top two principal directions.
    pub coords: Tensor<f64>,
    /// Fraction of total variance captured by each of the two components.
    pub explained: [f64; 2],
}

/// Projects the rows of `features` (`N×d`, `N ≥ 2`) onto their top two
/// principal components. Each component is oriented so its largest-magnitude
/// loading is positive. With `d = 1` the second coordinate is zero.
pub fn project2d(features: &Tensor<f64>) -> Result<Projection> {
    let [n, d] = features.dims2()?;
    if n < 2 {
        return Err(Error::Input("PCA needs at least two rows".into()));
    }
    let mut centered = features.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| features.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.data_mut()[i * d + j] -= mean;
        }
    }
    let dec = svd(&centered)?;
    let total: f64 = dec.sigma.iter().map(|s| s * s).sum();
    let r = dec.sigma.len();
    let mut coords = vec![0.0; n * 2];
    let mut explained = [0.0; 2];
    for c in 0..2.min(r) {
        let mut dir: Vec<f64> = (0..d).map(|k| dec.v.data()[k * r + c]).collect();
        let lead = dir.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..n {
            coords[i * 2 + c] = (0..d).map(|k| centered.data()[i * d + k] * dir[k]).sum();
        }
        explained[c] = if total > 0.0 {
            dec.sigma[c] * dec.sigma[c] / total
        } else {
            0.0
        };
    }
    Ok(Projection {
        coords: Tensor::new(vec![n, 2], coords)?,
        explained,
    })
}
