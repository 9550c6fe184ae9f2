//! SGD with classical momentum: `v <- momentum*v + g; p <- p - lr*v`.

/// Apply one momentum-SGD update to a single parameter buffer in place.
pub fn sgd_update(value: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    debug_assert_eq!(value.len(), velocity.len());
    debug_assert_eq!(value.len(), grad.len());
    for ((p, v), g) in value.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut v = vec![0.0; 3];
        sgd_update(&mut p, &mut v, &[10.0, -4.0, 0.5], 0.0, 0.9);
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn plain_sgd_step() {
        // momentum 0, p = 1, g = 2, lr = 0.1 -> p = 0.8
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &mut v, &[2.0], 0.1, 0.0);
        assert_eq!(p, vec![0.8]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = sum((p - t)^2), gradient 2(p - t); loss < 1e-6 within 200 steps
        let target = [1.5, -0.7, 3.0];
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let grad: Vec<f64> = p.iter().zip(&target).map(|(pi, ti)| 2.0 * (pi - ti)).collect();
            sgd_update(&mut p, &mut v, &grad, 0.05, 0.9);
            loss = p.iter().zip(&target).map(|(pi, ti)| (pi - ti).powi(2)).sum();
            if loss < 1e-6 {
                break;
            }
        }
        assert!(loss < 1e-6, "bowl did not converge, final loss {loss}");
    }
}
