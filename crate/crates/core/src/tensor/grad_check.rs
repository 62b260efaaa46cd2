use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, one element at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(params.shape());
    for i in 0..params.numel() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let w = Tensor::scalar(3.0);
        let g = finite_diff_grad(|p| Ok(p.data()[0] * p.data()[0]), &w, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let v = Tensor::full(&[4], 2.0);
        let g = finite_diff_grad(|_| Ok(1.25), &v, 1e-5).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff_grad(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
