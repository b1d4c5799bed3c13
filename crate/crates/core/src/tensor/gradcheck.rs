use super::Tensor;

/// Central-difference estimate of ∇f at `x`, one coordinate at a time.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `max_i |a_i − b_i| / (|b_i| + 1e-8)`, with `b` the reference.
pub fn max_relative_error(a: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(a.shape(), reference.shape());
    a.data()
        .iter()
        .zip(reference.data())
        .map(|(x, r)| (x - r).abs() / (r.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_gradient(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_gradient(|t| t.data()[0].powi(2), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }
}
