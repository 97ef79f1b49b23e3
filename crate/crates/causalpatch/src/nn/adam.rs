//! Adam optimizer with bias correction.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, NdFloat};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Adam {
            lr: F::from(lr).unwrap(),
            beta1: F::from(0.9).unwrap(),
            beta2: F::from(0.999).unwrap(),
            eps: F::from(1e-8).unwrap(),
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(*s)).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(*s)).collect(),
        }
    }

    /// One minimization step. `params` and `grads` must line up with the
    /// shapes given at construction.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, F>>, grads: Vec<ArrayViewD<'_, F>>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        for ((mut p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = sum (p - target)^2
        let target = [3.0f64, -1.5, 0.25];
        let mut p: ArrayD<f64> = ArrayD::zeros(IxDyn(&[3]));
        let mut adam = Adam::new(0.1, &[&[3]]);
        for _ in 0..500 {
            let g = ArrayD::from_shape_fn(IxDyn(&[3]), |i| 2.0 * (p[[i[0]]] - target[i[0]]));
            adam.step(vec![p.view_mut()], vec![g.view()]);
        }
        for i in 0..3 {
            assert!((p[[i]] - target[i]).abs() < 1e-3, "param {i} = {}", p[[i]]);
        }
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // with bias correction the very first update is lr * sign(g)
        let mut p: ArrayD<f64> = ArrayD::zeros(IxDyn(&[2]));
        let mut adam = Adam::new(0.01, &[&[2]]);
        let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![5.0f64, -0.3]).unwrap();
        adam.step(vec![p.view_mut()], vec![g.view()]);
        assert!((p[[0]] + 0.01).abs() < 1e-9);
        assert!((p[[1]] - 0.01).abs() < 1e-9);
    }
}
