use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max_i |autodiff_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 || !v.item().is_finite() {
            return Err(Error::Evaluation(format!(
                "function value {:?} is not a finite scalar",
                v.data()
            )));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);
    if !analytic.is_finite() {
        return Err(Error::Evaluation("non-finite gradient".into()));
    }

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Carves a flat `[total]` var into tensors of the given shapes.
pub fn split_flat(tape: &mut Tape, flat: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if tape.value(flat).len() != total {
        return Err(Error::dim(
            "split_flat",
            format!("{} values for {total} slots", tape.value(flat).len()),
        ));
    }
    let row = tape.reshape(flat, &[1, total])?;
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let piece = tape.slice_cols(row, offset, offset + n)?;
            offset += n;
            tape.reshape(piece, shape)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_an_evaluation_error() {
        let res = grad_check(
            |t, x| {
                let y = t.scale(x, f64::INFINITY);
                Ok(t.sum(y))
            },
            &Tensor::scalar(1.0),
            1e-5,
        );
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }
}
