use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    /// Matrix product of an `m×k` and a `k×n` tensor.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (Ok([m, k]), Ok([k2, n])) = (self.dims2(), other.dims2()) else {
            return Err(Error::dim(format!(
                "matmul needs matrices, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} × {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.data(),
            false,
            other.data(),
            false,
            &mut out,
            false,
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(
            self.shape().to_vec(),
            self.data().iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise binary op; a single-element operand broadcasts.
    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape() == other.shape() {
            let data = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok(Tensor::from_parts(self.shape().to_vec(), data))
        } else if other.len() == 1 {
            let b = other.data()[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.len() == 1 {
            let a = self.data()[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: T, other: &Tensor<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "axpy shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a = *a + s * b;
        }
        Ok(())
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map(T::tanh)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map(T::exp)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map(T::ln)
    }

    /// Signum with `sign(0) == 0`.
    pub fn sign(&self) -> Tensor<T> {
        self.map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn max(&self) -> T {
        self.data().iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data().iter().copied().fold(T::infinity(), T::min)
    }

    pub fn sum(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    /// Population variance.
    pub fn var(&self) -> T {
        let mean = self.mean();
        self.data()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / T::of(self.len() as f64)
    }

    pub fn l2_norm(&self) -> T {
        self.data().iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn linf_norm(&self) -> T {
        self.data()
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "dot of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Index of the maximum along `axis`, ties resolved to the lowest index.
    /// The result is laid out over the remaining axes in row-major order.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let data = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_v = data[base];
                for j in 1..len {
                    let v = data[base + j * inner];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Sum along `axis`, removing it. Reducing the only axis yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let data = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &data[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Flips the last (width) axis.
    pub fn flip_last(&self) -> Tensor<T> {
        let w = *self.shape().last().expect("rank >= 1");
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor::from_parts(self.shape().to_vec(), data)
    }
}

/// Row-wise softmax of a `k×C` matrix with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Mean softmax cross-entropy of `k×C` logits against integer labels.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let [k, c] = logits.dims2()?;
    check_labels(labels, k, c)?;
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total = total + (lse - row[y]);
    }
    Ok(total / T::of(k as f64))
}

pub(crate) fn check_labels(labels: &[usize], k: usize, classes: usize) -> Result<()> {
    if labels.len() != k {
        return Err(Error::Input(format!(
            "{} labels for a batch of {k}",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at position {i} outside [0, {classes})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(Tensor::eye(3).unwrap().matmul(&b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let v = t(&[2, 1], &[5., 6.]);
        assert_eq!(a.matmul(&v).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![4, 5]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn sign_definition() {
        let s = t(&[3], &[-0.5, 0.0, 3.1]).sign();
        assert_eq!(s.data(), &[-1., 0., 1.]);
        assert_eq!(s.sign(), s);
    }

    #[test]
    fn reductions() {
        assert_eq!(t(&[2], &[-3., 2.]).linf_norm(), 3.);
        assert_eq!(Tensor::full(vec![4, 2], 2.5f64).unwrap().mean(), 2.5);
        assert!((t(&[3], &[1., 2., 3.]).var() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t(&[2], &[3., 4.]).l2_norm(), 5.);
    }

    #[test]
    fn argmax_ties_break_low() {
        let m = t(&[2, 3], &[1., 5., 5., 2., 2., 0.]);
        assert_eq!(m.argmax(1).unwrap(), vec![1, 0]);
        assert_eq!(m.argmax(0).unwrap(), vec![1, 0, 0]);
        assert!(m.argmax(2).is_err());
    }

    #[test]
    fn sum_axis_matches_manual() {
        let m = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(m.sum_axis(0).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(m.sum_axis(1).unwrap().data(), &[6., 15.]);
        assert_eq!(t(&[3], &[1., 2., 3.]).sum_axis(0).unwrap().shape(), &[1]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(
            a.add(&Tensor::scalar(1.0)).unwrap().data(),
            &[2., 3., 4., 5.]
        );
        assert!(a.add(&t(&[2], &[1., 1.])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![4, 10]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 3, 10, 5]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs().max(y.abs())));
            }
        }

        #[test]
        fn sign_values_are_ternary(d in proptest::collection::vec(-1e3f32..1e3, 1..64)) {
            let s = Tensor::vector(d).unwrap().sign();
            prop_assert!(s.data().iter().all(|&v| v == -1.0 || v == 0.0 || v == 1.0));
            prop_assert!(s.linf_norm() <= 1.0);
        }
    }
}
