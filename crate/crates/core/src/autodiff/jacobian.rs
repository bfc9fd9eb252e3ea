use super::Tape;
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const INPUT_TAP: &str = "__jacobian_input";

/// Jacobian of a vector-valued function at `x`, as an `n×m` matrix with
/// `m = x.len()`. Row `i` is the gradient of output `i`, obtained from one
/// reverse pass seeded with the `i`-th unit vector.
///
/// The output may be rank 1 or a single-row matrix `[1, n]`.
pub fn jacobian<T, F>(f: F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    tape.tap(INPUT_TAP, xv)?;
    let out = f(&mut tape, xv)?;
    tape.set_output(out);
    let y = tape.value(out);
    let n = match y.shape() {
        &[n] | &[1, n] => n,
        s => {
            return Err(Error::dim(format!(
                "jacobian needs a vector output, got shape {s:?}"
            )))
        }
    };
    let m = x.len();
    let mut jac = Vec::with_capacity(n * m);
    let mut seed = y.zeros_like();
    for i in 0..n {
        seed.data_mut()[i] = T::one();
        let g = tape.backward_taps(&seed)?;
        jac.extend_from_slice(g.taps[INPUT_TAP].data());
        seed.data_mut()[i] = T::zero();
    }
    Tensor::new(vec![n, m], jac)
}
