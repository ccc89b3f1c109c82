use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

pub const DEFAULT_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Scalar>(input: &Tensor5<T>, slope: f64) -> Tensor5<T> {
    let s = T::from_f64(slope);
    let mut out = input.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| {
            if *v <= T::zero() {
                *v = *v * s;
            }
        });
    out
}

/// Gradient is 1 where the input is positive, `slope` elsewhere.
pub fn leaky_relu_backward<T: Scalar>(input: &Tensor5<T>, out_grad: &Tensor5<T>, slope: f64) -> Result<Tensor5<T>> {
    if input.shape() != out_grad.shape() {
        return Err(Error::shape("leaky_relu_backward", input.shape(), out_grad.shape()));
    }
    let s = T::from_f64(slope);
    let mut g = out_grad.clone();
    g.data_mut()
        .iter_mut()
        .zip(input.data())
        .for_each(|(g, &x)| {
            if x <= T::zero() {
                *g = *g * s;
            }
        });
    Ok(g)
}
