//! Comparison selectors: uniformly random patches and patch-averaged
//! gradient saliency. Both emit hard k-hot masks in the same format as the
//! causal selector, so every metric runs unchanged on them.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{Classifier, InputGradients};
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::nn::argmax_row;
use crate::patching::{PatchGrid, SubsetMask};
use crate::sampler::{hard_topm, random_k_hot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Random,
    GradientSaliency,
}

impl BaselineMethod {
    /// Saliency needs a model that exposes input gradients; random does not.
    pub fn requires_gradients(&self) -> bool {
        matches!(self, BaselineMethod::GradientSaliency)
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Random => "random",
            BaselineMethod::GradientSaliency => "saliency",
        }
    }
}

/// One independent uniformly random k-subset per instance.
pub fn random_explanations(
    d: usize,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SubsetMask>> {
    (0..n).map(|_| random_k_hot(d, k, rng)).collect()
}

/// Saliency explanations: the absolute gradient of the predicted class's
/// pre-softmax logit w.r.t. each pixel, averaged over channels and over
/// each patch, then the top k patches. Deterministic.
pub fn gradient_saliency_explanations<M: Classifier + InputGradients>(
    model: &M,
    images: &Array4<f32>,
    grid: &PatchGrid,
    k: usize,
) -> Result<Vec<SubsetMask>> {
    let n = images.shape()[0];
    let probs = model.predict_proba(images)?;
    let predicted: Vec<usize> = (0..n)
        .map(|i| argmax_row(probs.row(i).as_slice().unwrap()))
        .collect();
    let grads = model.logit_input_grad(images, &predicted)?;

    let d = grid.d();
    let (c, _, _) = grid.image_shape;
    let denom = (c * grid.patch_area()) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut scores = vec![0.0f64; d];
        for (p, score) in scores.iter_mut().enumerate() {
            let (r0, r1, c0, c1) = grid.patch_bounds(p);
            let mut acc = 0.0f64;
            for ch in 0..c {
                for y in r0..r1 {
                    for x in c0..c1 {
                        acc += f64::from(grads[[i, ch, y, x]].abs());
                    }
                }
            }
            *score = acc / denom;
        }
        out.push(hard_topm(&scores, k)?);
    }
    Ok(out)
}

/// Saliency over a whole dataset, in chunks.
pub fn gradient_saliency_for_dataset<M: Classifier + InputGradients>(
    model: &M,
    ds: &LabeledDataset,
    grid: &PatchGrid,
    k: usize,
) -> Result<Vec<SubsetMask>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let batch = ds.gather(chunk);
        out.extend(gradient_saliency_explanations(model, &batch, grid, k)?);
    }
    Ok(out)
}
