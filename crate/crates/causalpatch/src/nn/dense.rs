//! Fully connected layer.

use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;

use super::he_uniform;

#[derive(Debug, Clone)]
pub struct Dense<F> {
    /// `(out_features, in_features)`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug)]
pub struct DenseGrads<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: NdFloat> Dense<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let mut draw = he_uniform(in_features, rng);
        Dense {
            w: Array2::from_shape_simple_fn((out_features, in_features), || draw()),
            b: Array1::zeros(out_features),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn backward(&self, x: &Array2<F>, d_out: &Array2<F>) -> (DenseGrads<F>, Array2<F>) {
        let dw = d_out.t().dot(x);
        let db = d_out.sum_axis(ndarray::Axis(0));
        let dx = d_out.dot(&self.w);
        (DenseGrads { w: dw, b: db }, dx)
    }
}
