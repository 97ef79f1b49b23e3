//! Minimal neural-network backend: the few layers the reference models need,
//! with explicit forward/backward passes and an Adam optimizer.
//!
//! Everything is generic over the float type so gradient tests can run in
//! `f64`; the models train in `f32`. All randomness comes from caller-owned
//! seeded generators, and execution is single-threaded, so training is
//! bitwise deterministic.

mod adam;
mod conv;
mod dense;
mod pool;

pub use adam::Adam;
pub use conv::{im2col_t, Conv2d, Conv2dCache, Conv2dGrads};
pub use dense::{Dense, DenseGrads};
pub use pool::{MaxPool2, MaxPool2Cache};

use ndarray::{Array2, Array4, NdFloat};
use rand::Rng;

/// Uniform He initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<F: NdFloat>(fan_in: usize, rng: &mut impl Rng) -> impl FnMut() -> F + '_ {
    let limit = (6.0 / fan_in as f64).sqrt();
    move || F::from(rng.random::<f64>() * 2.0 * limit - limit).unwrap()
}

pub fn relu<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward through relu given its *output* (output > 0 iff input > 0).
pub fn relu_backward<F: NdFloat>(out: &Array4<F>, d_out: &Array4<F>) -> Array4<F> {
    let mut dx = d_out.clone();
    dx.zip_mut_with(out, |g, &y| {
        if y <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// Row-wise stable softmax.
pub fn softmax_rows<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean cross-entropy of `labels` under row-softmax of `logits`, plus the
/// gradient w.r.t. the logits.
pub fn cross_entropy_with_logits<F: NdFloat>(
    logits: &Array2<F>,
    labels: &[usize],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    debug_assert_eq!(n, labels.len());
    let probs = softmax_rows(logits);
    let scale = F::from(1.0 / n as f64).unwrap();
    let mut loss = F::zero();
    let mut grad = probs;
    for (i, &label) in labels.iter().enumerate() {
        let p = grad[[i, label]];
        loss = loss - p.max(F::from(1e-30).unwrap()).ln();
        grad[[i, label]] = grad[[i, label]] - F::one();
    }
    grad.mapv_inplace(|g| g * scale);
    (loss * scale, grad)
}

/// Backward through the row-softmax: given `dL/dprobs`, return `dL/dlogits`.
pub fn softmax_backward<F: NdFloat>(probs: &Array2<F>, d_probs: &Array2<F>) -> Array2<F> {
    let mut d_logits = Array2::zeros(probs.raw_dim());
    for i in 0..probs.nrows() {
        let p = probs.row(i);
        let g = d_probs.row(i);
        let dot = p.dot(&g);
        for j in 0..probs.ncols() {
            d_logits[[i, j]] = p[j] * (g[j] - dot);
        }
    }
    d_logits
}

/// Argmax with ties broken by the lowest index.
pub fn argmax_row<F: NdFloat>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Flatten `(n, c, h, w)` into `(n, c*h*w)` feature rows.
pub fn flatten<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let n = x.shape()[0];
    let features = x.len() / n;
    x.to_shape((n, features)).expect("contiguous").to_owned()
}

pub fn unflatten<F: NdFloat>(x: &Array2<F>, dims: (usize, usize, usize)) -> Array4<F> {
    let n = x.nrows();
    x.to_shape((n, dims.0, dims.1, dims.2))
        .expect("feature count matches dims")
        .to_owned()
}

pub fn any_non_finite<F: NdFloat>(values: &[F]) -> bool {
    values.iter().any(|v| !v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = array![[0.0f64, 1.0, -2.0], [10.0, 10.0, 10.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // single row, logits (0, 0): p = (0.5, 0.5), loss = ln 2
        let (loss, grad) = cross_entropy_with_logits(&array![[0.0f64, 0.0]], &[1]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((grad[[0, 1]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = array![[0.3f64, -0.7, 1.1, 0.2]];
        let weights = array![[0.5f64, -1.0, 0.25, 2.0]];
        let f = |l: &Array2<f64>| (softmax_rows(l) * &weights).sum();

        let probs = softmax_rows(&logits);
        let analytic = softmax_backward(&probs, &weights);
        let h = 1e-6;
        for j in 0..4 {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp[[0, j]] += h;
            lm[[0, j]] -= h;
            let numeric = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(
                (analytic[[0, j]] - numeric).abs() < 1e-8,
                "component {j}: {} vs {numeric}",
                analytic[[0, j]]
            );
        }
    }
}
