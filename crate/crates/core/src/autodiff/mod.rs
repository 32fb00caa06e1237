//! Reverse-mode automatic differentiation over scalars, vectors and matrices.
//!
//! Covers exactly the operations the flow losses and acyclicity penalties
//! need: elementwise arithmetic, matrix products, exp/log/sigmoid/ELU/power,
//! reductions, trace and matrix powers by repeated multiplication, plus a few
//! structural data-movement ops used to batch evaluations.

mod tape;
mod tensor;

pub use tape::{elu, sigmoid, Gradients, NodeId, Tape, LN_CLAMP};
pub use tensor::{matmul, matrix_power, trace, Tensor};

use crate::error::{Error, Result};

/// Value and gradient of the cyclicity measure `tr((I + alpha*A)^power) - power`.
///
/// For elementwise non-negative `A` the value is zero iff the weighted graph
/// is acyclic, and positive otherwise. The gradient is the closed form
/// `power * alpha * ((I + alpha*A)^(power-1))^T`.
pub fn matrix_power_trace(a: &Tensor, alpha: f64, power: usize) -> Result<(f64, Tensor)> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::Shape {
            op: "matrix_power_trace",
            lhs: a.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    if alpha <= 0.0 {
        return Err(Error::Contract(format!("matrix_power_trace requires alpha > 0, got {alpha}")));
    }
    let d = a.rows();
    let m = {
        let mut m = a.map(|v| v * alpha);
        for i in 0..d {
            let v = m.at(i, i) + 1.0;
            m.set(i, i, v);
        }
        m
    };
    let m_pow_minus1 = matrix_power(&m, power.saturating_sub(1))?;
    let value = trace(&matmul(&m_pow_minus1, &m)?) - power as f64;
    let grad = m_pow_minus1.transposed().map(|v| v * alpha * power as f64);
    Ok((value, grad))
}
