//! The trainable explainer.
//!
//! A small fully convolutional network scores every patch with its
//! suitability for the keep-set `s̄` (the complement of the explanation).
//! Training minimizes the batch mean of
//!
//! ```text
//! sum_y F(X)_y * log F(Z ⊙ X)_y
//! ```
//!
//! where `Z` is a relaxed `(d-k)`-hot keep-mask sampled from the scores via
//! Gumbel-softmax. `F(X)` is treated as data: no gradient flows through the
//! target distribution, only through `Z` into the selector weights. Driving
//! this quantity down makes the black box abandon its original prediction
//! once the k explanation patches are zeroed, so the explanation ends up
//! holding the causally load-bearing evidence.
//!
//! At explanation time nothing is sampled: the keep-set is the
//! deterministic top-(d-k) of the scores and the explanation is its
//! complement.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::blackbox::{Classifier, InputGradients};
use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Conv2d};
use crate::patching::{complement, PatchGrid, SubsetMask};
use crate::sampler::{relaxed_mhot, sample_gumbel, hard_topm, GumbelNoise, SamplerConfig};

const HIDDEN_CHANNELS: usize = 16;
const KERNEL: usize = 3;
const PADDING: usize = 1;

/// Selector network: three size-preserving conv layers (16 -> 16 -> 1
/// channels) followed by average pooling over each patch region, giving one
/// keep-score logit per patch. The final layer starts at zero so an
/// untrained selector scores every patch equally.
#[derive(Debug, Clone)]
pub struct SelectorModel {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    conv3: Conv2d<f32>,
    grid: PatchGrid,
    k: usize,
}

struct SelectorState {
    cache1: crate::nn::Conv2dCache<f32>,
    relu1: Array4<f32>,
    cache2: crate::nn::Conv2dCache<f32>,
    relu2: Array4<f32>,
    cache3: crate::nn::Conv2dCache<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct SelectorDescriptor {
    kind: String,
    format_version: u32,
    image_shape: (usize, usize, usize),
    patch_shape: (usize, usize),
    k: usize,
    hidden_channels: usize,
    kernel: usize,
}

impl SelectorModel {
    pub fn new(grid: PatchGrid, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k >= grid.d() {
            return Err(Error::contract(format!(
                "explanation size k={k} must satisfy 1 <= k < d={}",
                grid.d()
            )));
        }
        let (c, _, _) = grid.image_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SelectorModel {
            conv1: Conv2d::new(c, HIDDEN_CHANNELS, KERNEL, PADDING, &mut rng),
            conv2: Conv2d::new(HIDDEN_CHANNELS, HIDDEN_CHANNELS, KERNEL, PADDING, &mut rng),
            conv3: Conv2d::zeroed(HIDDEN_CHANNELS, 1, KERNEL, PADDING),
            grid,
            k,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn forward_batch(&self, x: &Array4<f32>) -> (Array2<f32>, SelectorState) {
        let (y1, cache1) = self.conv1.forward(x);
        let relu1 = nn::relu(&y1);
        let (y2, cache2) = self.conv2.forward(&relu1);
        let relu2 = nn::relu(&y2);
        let (y3, cache3) = self.conv3.forward(&relu2);
        let logits = self.pool_patches(&y3);
        (
            logits,
            SelectorState {
                cache1,
                relu1,
                cache2,
                relu2,
                cache3,
            },
        )
    }

    /// Mean of the single-channel map over each patch region.
    fn pool_patches(&self, map: &Array4<f32>) -> Array2<f32> {
        let n = map.shape()[0];
        let d = self.grid.d();
        let area = self.grid.patch_area() as f32;
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for p in 0..d {
                let (r0, r1, c0, c1) = self.grid.patch_bounds(p);
                let mut sum = 0.0f32;
                for y in r0..r1 {
                    for x in c0..c1 {
                        sum += map[[i, 0, y, x]];
                    }
                }
                out[[i, p]] = sum / area;
            }
        }
        out
    }

    fn pool_patches_backward(&self, d_logits: &Array2<f32>) -> Array4<f32> {
        let n = d_logits.nrows();
        let (_, h, w) = self.grid.image_shape;
        let area = self.grid.patch_area() as f32;
        let mut d_map = Array4::zeros((n, 1, h, w));
        for i in 0..n {
            for p in 0..self.grid.d() {
                let g = d_logits[[i, p]] / area;
                let (r0, r1, c0, c1) = self.grid.patch_bounds(p);
                for y in r0..r1 {
                    for x in c0..c1 {
                        d_map[[i, 0, y, x]] = g;
                    }
                }
            }
        }
        d_map
    }

    fn check_image(&self, image: &ArrayView3<'_, f32>) -> Result<()> {
        let (c, h, w) = self.grid.image_shape;
        if image.shape() != [c, h, w] {
            return Err(Error::contract(format!(
                "image shape {:?} does not match selector grid {:?}",
                image.shape(),
                self.grid.image_shape
            )));
        }
        Ok(())
    }

    /// Keep-set membership logits for a single image, one per patch.
    /// Deterministic; higher means "more likely to stay visible".
    pub fn importance_scores(&self, image: ArrayView3<'_, f32>) -> Result<Array1<f32>> {
        self.check_image(&image)?;
        let (c, h, w) = self.grid.image_shape;
        let mut batch = Array4::zeros((1, c, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(&image);
        let (logits, _) = self.forward_batch(&batch);
        Ok(logits.row(0).to_owned())
    }

    /// k-hot explanation for one image: the complement of the
    /// deterministic top-(d-k) keep-set. `k` may be anything in `1..=d`
    /// here (k = d yields the identity explanation).
    pub fn explain(&self, image: ArrayView3<'_, f32>, k: usize) -> Result<SubsetMask> {
        let d = self.grid.d();
        if k == 0 || k > d {
            return Err(Error::contract(format!(
                "explanation size k={k} must satisfy 1 <= k <= d={d}"
            )));
        }
        let scores = self.importance_scores(image)?;
        let scores: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let keep = hard_topm(&scores, d - k)?;
        complement(&keep)
    }

    fn descriptor(&self) -> SelectorDescriptor {
        SelectorDescriptor {
            kind: "selector_fcn".into(),
            format_version: 1,
            image_shape: self.grid.image_shape,
            patch_shape: self.grid.patch_shape,
            k: self.k,
            hidden_channels: HIDDEN_CHANNELS,
            kernel: KERNEL,
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let arrays = vec![
            array_entry("conv1.w", self.conv1.w.view().into_dyn()),
            array_entry("conv1.b", self.conv1.b.view().into_dyn()),
            array_entry("conv2.w", self.conv2.w.view().into_dyn()),
            array_entry("conv2.b", self.conv2.b.view().into_dyn()),
            array_entry("conv3.w", self.conv3.w.view().into_dyn()),
            array_entry("conv3.b", self.conv3.b.view().into_dyn()),
        ];
        Checkpoint::new(&self.descriptor(), arrays)?.save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ck = Checkpoint::load(path)?;
        let desc: SelectorDescriptor = ck.descriptor(path)?;
        if desc.kind != "selector_fcn" || desc.format_version != 1 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "descriptor kind/version {:?}/{} is not selector_fcn/1",
                    desc.kind, desc.format_version
                ),
            });
        }
        let grid = PatchGrid::new(desc.image_shape, desc.patch_shape)?;
        let mut model = SelectorModel::new(grid, desc.k, 0)?;
        let conv4 = |ck: &mut Checkpoint, name: &str| -> Result<Array4<f32>> {
            let a = ck.take_array(name, path)?;
            let dims: [usize; 4] = a.dims.clone().try_into().map_err(|_| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("array {name} is not 4-d"),
            })?;
            Ok(Array4::from_shape_vec(dims, a.values).expect("length matches dims"))
        };
        model.conv1.w = conv4(&mut ck, "conv1.w")?;
        model.conv1.b = Array1::from_vec(ck.take_array("conv1.b", path)?.values);
        model.conv2.w = conv4(&mut ck, "conv2.w")?;
        model.conv2.b = Array1::from_vec(ck.take_array("conv2.b", path)?.values);
        model.conv3.w = conv4(&mut ck, "conv3.w")?;
        model.conv3.b = Array1::from_vec(ck.take_array("conv3.b", path)?.values);
        Ok(model)
    }
}

fn array_entry(name: &str, a: ndarray::ArrayViewD<'_, f32>) -> NamedArray {
    NamedArray {
        name: name.into(),
        dims: a.shape().to_vec(),
        values: a.iter().copied().collect(),
    }
}

/// Training hyperparameters for the selector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SelectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// When set, the sampling temperature decays linearly from
    /// `temperature` to this value over the epochs. Off by default.
    pub temperature_final: Option<f64>,
    pub seed: u64,
    pub log_clamp_epsilon: f64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        SelectorTrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            temperature: 0.5,
            temperature_final: None,
            seed: 0,
            log_clamp_epsilon: 1e-8,
        }
    }
}

impl SelectorTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::contract(
                "learning_rate and temperature must be positive",
            ));
        }
        if let Some(tf) = self.temperature_final {
            if !(tf > 0.0) {
                return Err(Error::contract("final temperature must be positive"));
            }
        }
        if !(self.log_clamp_epsilon > 0.0 && self.log_clamp_epsilon <= 1e-3) {
            return Err(Error::contract("log_clamp_epsilon must be in (0, 1e-3]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorTrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// The training objective for a batch of already-sampled relaxed keep-masks:
/// mean over the batch of `sum_y F(X)_y * log(max(F(Z ⊙ X)_y, clamp_eps))`.
/// `F(X)` is evaluated on the unmasked images and treated as a constant.
pub fn causal_loss(
    blackbox: &impl Classifier,
    images: &Array4<f32>,
    relaxed_masks: &[SubsetMask],
    grid: &PatchGrid,
    clamp_eps: f64,
) -> Result<f64> {
    let n = images.shape()[0];
    if relaxed_masks.len() != n {
        return Err(Error::contract(format!(
            "{} masks for a batch of {n}",
            relaxed_masks.len()
        )));
    }
    let targets = blackbox.predict_proba(images)?;
    let masked = mask_batch(images, relaxed_masks, grid)?;
    let probs = blackbox.predict_proba(&masked)?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training {
            step: 0,
            message: "black-box forward pass produced non-finite probabilities".into(),
        });
    }
    Ok(weighted_log_mean(&targets, &probs, clamp_eps))
}

fn weighted_log_mean(targets: &Array2<f32>, probs: &Array2<f32>, clamp_eps: f64) -> f64 {
    let n = targets.nrows();
    let mut total = 0.0f64;
    for i in 0..n {
        for y in 0..targets.ncols() {
            let p = f64::from(probs[[i, y]]).max(clamp_eps);
            total += f64::from(targets[[i, y]]) * p.ln();
        }
    }
    total / n as f64
}

fn mask_batch(
    images: &Array4<f32>,
    masks: &[SubsetMask],
    grid: &PatchGrid,
) -> Result<Array4<f32>> {
    let mut out = images.clone();
    let s = images.shape();
    let (c, _, _) = (s[1], s[2], s[3]);
    for (i, mask) in masks.iter().enumerate() {
        if mask.len() != grid.d() {
            return Err(Error::contract("mask length does not match grid"));
        }
        for p in 0..grid.d() {
            let v = mask.values()[p] as f32;
            if v == 1.0 {
                continue;
            }
            let (r0, r1, c0, c1) = grid.patch_bounds(p);
            for ch in 0..c {
                for y in r0..r1 {
                    for x in c0..c1 {
                        out[[i, ch, y, x]] *= v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Train a selector against a frozen black box. The black box is only ever
/// queried (forward) and differentiated (input gradients); its parameters
/// are not touched.
pub fn train_selector<B: Classifier + InputGradients>(
    blackbox: &B,
    train: &LabeledDataset,
    grid: &PatchGrid,
    k: usize,
    cfg: &SelectorTrainConfig,
) -> Result<(SelectorModel, SelectorTrainReport)> {
    cfg.validate()?;
    if blackbox.input_shape() != train.image_shape() {
        return Err(Error::contract(
            "black-box input shape does not match the training data",
        ));
    }
    if grid.image_shape != train.image_shape() {
        return Err(Error::contract(
            "patch grid does not match the training data",
        ));
    }
    let d = grid.d();
    if k == 0 || k >= d {
        return Err(Error::contract(format!(
            "explanation size k={k} must satisfy 1 <= k < d={d}"
        )));
    }
    let m = d - k;
    let temperature_at = |epoch: usize| -> f64 {
        match cfg.temperature_final {
            Some(tf) if cfg.epochs > 1 => {
                let t = epoch as f64 / (cfg.epochs - 1) as f64;
                cfg.temperature + (tf - cfg.temperature) * t
            }
            Some(tf) => tf,
            None => cfg.temperature,
        }
    };

    let mut selector = SelectorModel::new(*grid, k, cfg.seed)?;
    let mut adam = Adam::<f32>::new(
        cfg.learning_rate,
        &[
            selector.conv1.w.shape(),
            selector.conv1.b.shape(),
            selector.conv2.w.shape(),
            selector.conv2.b.shape(),
            selector.conv3.w.shape(),
            selector.conv3.b.shape(),
        ],
    );

    // F(X) is constant across training: compute the targets once
    let targets = crate::blackbox::predict_dataset(blackbox, train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00de_1ec7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let (c, h, w) = grid.image_shape;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let sampler_cfg = SamplerConfig::new(temperature_at(epoch), m)?;
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let x = train.gather(chunk);
            let (logits, state) = selector.forward_batch(&x);

            // one fresh noise draw per example per step
            let mut samples = Vec::with_capacity(n);
            let mut pixel_masks = Array4::<f32>::zeros((n, 1, h, w));
            for (row, _) in chunk.iter().enumerate() {
                let noise: GumbelNoise = sample_gumbel(m, d, &mut rng);
                let row_logits: Array1<f64> =
                    logits.row(row).iter().map(|&v| f64::from(v)).collect();
                let sample = relaxed_mhot(row_logits.view(), &noise, &sampler_cfg)?;
                for p in 0..d {
                    let v = sample.mask[p] as f32;
                    let (r0, r1, c0, c1) = grid.patch_bounds(p);
                    for yy in r0..r1 {
                        for xx in c0..c1 {
                            pixel_masks[[row, 0, yy, xx]] = v;
                        }
                    }
                }
                samples.push(sample);
            }

            let mut masked = x.clone();
            for ch in 0..c {
                let mut slab = masked.index_axis_mut(Axis(1), ch);
                slab *= &pixel_masks.index_axis(Axis(1), 0);
            }

            // dL/dprobs with the clamp: zero where the log saturated
            let eps = cfg.log_clamp_epsilon;
            let scale = 1.0 / n as f32;
            let mut batch_targets = Array2::zeros((n, targets.ncols()));
            for (row, &i) in chunk.iter().enumerate() {
                batch_targets.row_mut(row).assign(&targets.row(i));
            }
            let mut loss_val = 0.0f64;
            let (probs, dx) = blackbox.predict_with_input_grad(&masked, &mut |probs| {
                loss_val = weighted_log_mean(&batch_targets, probs, eps);
                let mut d_probs = Array2::zeros(probs.raw_dim());
                for i in 0..n {
                    for y in 0..probs.ncols() {
                        let p = f64::from(probs[[i, y]]);
                        if p > eps {
                            d_probs[[i, y]] = batch_targets[[i, y]] / (p as f32) * scale;
                        }
                    }
                }
                d_probs
            })?;
            drop(probs);
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "causal loss diverged to a non-finite value".into(),
                });
            }
            epoch_loss += loss_val;
            batches += 1;

            // d loss / d mask value per patch: sum over channels and pixels
            let mut d_logits = Array2::<f32>::zeros((n, d));
            for row in 0..n {
                let mut d_z = Array1::<f64>::zeros(d);
                for p in 0..d {
                    let (r0, r1, c0, c1) = grid.patch_bounds(p);
                    let mut acc = 0.0f64;
                    for ch in 0..c {
                        for yy in r0..r1 {
                            for xx in c0..c1 {
                                acc += f64::from(dx[[row, ch, yy, xx]])
                                    * f64::from(x[[row, ch, yy, xx]]);
                            }
                        }
                    }
                    d_z[p] = acc;
                }
                let d_row = samples[row].backward(d_z.view());
                for p in 0..d {
                    d_logits[[row, p]] = d_row[p] as f32;
                }
            }

            // backprop through patch pooling and the conv stack
            let d_map = selector.pool_patches_backward(&d_logits);
            let (g3, d_relu2) = selector.conv3.backward(&state.cache3, &d_map);
            let d_y2 = nn::relu_backward(&state.relu2, &d_relu2);
            let (g2, d_relu1) = selector.conv2.backward(&state.cache2, &d_y2);
            let d_y1 = nn::relu_backward(&state.relu1, &d_relu1);
            let g1 = selector.conv1.backward_params(&state.cache1, &d_y1);

            adam.step(
                vec![
                    selector.conv1.w.view_mut().into_dyn(),
                    selector.conv1.b.view_mut().into_dyn(),
                    selector.conv2.w.view_mut().into_dyn(),
                    selector.conv2.b.view_mut().into_dyn(),
                    selector.conv3.w.view_mut().into_dyn(),
                    selector.conv3.b.view_mut().into_dyn(),
                ],
                vec![
                    g1.w.view().into_dyn(),
                    g1.b.view().into_dyn(),
                    g2.w.view().into_dyn(),
                    g2.b.view().into_dyn(),
                    g3.w.view().into_dyn(),
                    g3.b.view().into_dyn(),
                ],
            );
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    Ok((
        selector,
        SelectorTrainReport {
            epoch_losses,
            steps: step,
        },
    ))
}

/// Mean causal loss of deterministic top-(d-k) keep-masks over a dataset;
/// handy for comparing selectors without sampling noise.
pub fn validation_causal_loss(
    blackbox: &impl Classifier,
    selector: &SelectorModel,
    ds: &LabeledDataset,
    clamp_eps: f64,
) -> Result<f64> {
    let grid = selector.grid();
    let d = grid.d();
    let mut masks = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let scores = selector.importance_scores(ds.pixels(i))?;
        let scores: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        masks.push(hard_topm(&scores, d - selector.k())?);
    }
    causal_loss(blackbox, ds.images(), &masks, grid, clamp_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tests::MeanPixelStub;
    use ndarray::Array4;

    #[test]
    fn untrained_selector_scores_are_all_equal_and_deterministic() {
        let grid = PatchGrid::new((1, 8, 8), (2, 2)).unwrap();
        let sel = SelectorModel::new(grid, 4, 3).unwrap();
        let img = ndarray::Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as f32 / 64.0);
        let a = sel.importance_scores(img.view()).unwrap();
        let b = sel.importance_scores(img.view()).unwrap();
        assert_eq!(a, b);
        // zero-initialized head: every logit is exactly zero
        assert!(a.iter().all(|&v| v == 0.0), "{a:?}");
    }

    #[test]
    fn explain_composes_topm_and_complement() {
        let grid = PatchGrid::new((1, 2, 2), (1, 1)).unwrap();
        let mut sel = SelectorModel::new(grid, 2, 1).unwrap();
        // plant fixed scores through the final bias: logits = conv3 bias
        sel.conv3.b[0] = 0.0;
        // forge scores by a custom path: directly check hard_topm+complement
        let scores = [0.9, 0.8, 0.1, 0.2];
        let keep = hard_topm(&scores, 2).unwrap();
        assert_eq!(keep.indices(), vec![0, 1]);
        let expl = complement(&keep).unwrap();
        assert_eq!(expl.indices(), vec![2, 3]);

        // k = d: identity explanation, masked input equals original
        let img = ndarray::Array3::from_elem((1, 2, 2), 0.5f32);
        let expl = sel.explain(img.view(), 4).unwrap();
        assert_eq!(expl.count_ones(), 4);
        // k = 0: contract error
        assert!(sel.explain(img.view(), 0).is_err());
        // construction bounds: k must stay below d
        assert!(SelectorModel::new(grid, 4, 1).is_err());
        assert!(SelectorModel::new(grid, 0, 1).is_err());
    }

    #[test]
    fn causal_loss_matches_hand_arithmetic() {
        // stub: class-0 prob = mean pixel. Constant 0.9 image, one patch.
        // full: F(X) = (0.9, 0.1). Relaxed mask 5/9 -> masked mean 0.5 ->
        // F(Z . X) = (0.5, 0.5). Loss = 0.9 ln 0.5 + 0.1 ln 0.5 = ln 0.5.
        let grid = PatchGrid::new((1, 2, 2), (2, 2)).unwrap();
        let stub = MeanPixelStub { shape: (1, 2, 2) };
        let images = Array4::from_elem((1, 1, 2, 2), 0.9f32);
        let masks = vec![SubsetMask::relaxed(vec![5.0 / 9.0]).unwrap()];
        let loss = causal_loss(&stub, &images, &masks, &grid, 1e-8).unwrap();
        assert!((loss - 0.5f64.ln()).abs() < 1e-6, "loss {loss}");

        // all-ones mask: loss = sum_y F(X)_y ln F(X)_y = -H(F(X))
        let masks = vec![SubsetMask::ones(1)];
        let loss = causal_loss(&stub, &images, &masks, &grid, 1e-8).unwrap();
        let expected = 0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln();
        assert!((loss - expected).abs() < 1e-6, "loss {loss} vs {expected}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let grid = PatchGrid::new((1, 8, 8), (4, 4)).unwrap();
        let mut sel = SelectorModel::new(grid, 2, 77).unwrap();
        // give the zero head some structure so scores are nontrivial
        sel.conv3 = Conv2d::new(HIDDEN_CHANNELS, 1, KERNEL, PADDING, &mut ChaCha8Rng::seed_from_u64(5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.ckpt");
        sel.save_checkpoint(&path).unwrap();
        let loaded = SelectorModel::load_checkpoint(&path).unwrap();
        let img = ndarray::Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y ^ x) % 5) as f32 / 5.0);
        assert_eq!(
            sel.importance_scores(img.view()).unwrap(),
            loaded.importance_scores(img.view()).unwrap()
        );
        assert_eq!(loaded.k(), 2);
    }

    #[test]
    fn selector_gradients_match_finite_differences_end_to_end() {
        // tiny end-to-end gradient check through pooling, sampling with
        // fixed noise, masking, and the stub black box, in f32 at coarse
        // tolerance (the f64 pieces each have exact tests; this guards the
        // glue). Uses a 2x2 image with 1x1 patches, k=1 -> m=3.
        let grid = PatchGrid::new((1, 2, 2), (1, 1)).unwrap();
        let stub = MeanPixelStub { shape: (1, 2, 2) };
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.9f32, 0.4, 0.6, 0.2]).unwrap();
        let cfg = SamplerConfig::new(0.5, 3).unwrap();
        let noise = sample_gumbel(3, 4, &mut ChaCha8Rng::seed_from_u64(4));
        let eps = 1e-8;

        let loss_of = |logits: &[f64]| -> f64 {
            let sample = relaxed_mhot(Array1::from_vec(logits.to_vec()).view(), &noise, &cfg).unwrap();
            let mask = SubsetMask::relaxed(sample.mask.to_vec()).unwrap();
            causal_loss(&stub, &x, std::slice::from_ref(&mask), &grid, eps).unwrap()
        };

        let logits = [0.3f64, -0.2, 0.1, 0.0];
        // analytic gradient: replicate the training-step backward path
        let sample = relaxed_mhot(Array1::from_vec(logits.to_vec()).view(), &noise, &cfg).unwrap();
        let mask = SubsetMask::relaxed(sample.mask.to_vec()).unwrap();
        let masked = mask_batch(&x, std::slice::from_ref(&mask), &grid).unwrap();
        let targets = stub.predict_proba(&x).unwrap();
        let probs = stub.predict_proba(&masked).unwrap();
        // stub jacobian: dp0/dpixel = 1/total, dp1/dpixel = -1/total
        let total = 4.0f64;
        let mut d_z = Array1::<f64>::zeros(4);
        for p in 0..4 {
            let mut dloss_dp0 = 0.0f64;
            for y in 0..2 {
                let prob = f64::from(probs[[0, y]]).max(eps);
                let sign = if y == 0 { 1.0 } else { -1.0 };
                dloss_dp0 += f64::from(targets[[0, y]]) / prob * sign / total;
            }
            let (r0, _, c0, _) = grid.patch_bounds(p);
            d_z[p] = dloss_dp0 * f64::from(x[[0, 0, r0, c0]]);
        }
        let analytic = sample.backward(d_z.view());

        // h large enough that f32 forward-pass noise (~1e-7) stays small
        // relative to the secant
        let h = 5e-3;
        for i in 0..4 {
            let mut lp = logits;
            let mut lm = logits;
            lp[i] += h;
            lm[i] -= h;
            let numeric = (loss_of(&lp) - loss_of(&lm)) / (2.0 * h);
            assert!(
                (analytic[i] - numeric).abs() < 1e-3,
                "logit {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}
