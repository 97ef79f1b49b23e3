//! The frozen classifier under explanation.
//!
//! `Classifier` is the probability-output contract every downstream module
//! works against. The reference model is a small CNN (two conv layers and
//! one fully connected layer) that also exposes input gradients, which the
//! selector's training and the saliency baseline need.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    self, Adam, Conv2d, Dense, MaxPool2,
};

/// Probabilistic classifier contract: every prediction is a distribution
/// over `num_classes` classes.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> (usize, usize, usize);
    /// `(n, c, h, w)` batch to `(n, num_classes)` probability rows.
    fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>>;
}

/// Classifiers that can backpropagate to their input. The reference CNN
/// supports this; an arbitrary external black box need not (those can still
/// be evaluated, just not used to train the selector or run saliency —
/// the trait bound makes that a compile-time fact rather than a runtime
/// failure).
pub trait InputGradients: Classifier {
    /// One forward pass plus a vector-Jacobian product: `d_probs` receives
    /// the predicted probabilities and must return `dL/dprobs`; the result
    /// pairs the probabilities with `dL/dinput`.
    fn predict_with_input_grad(
        &self,
        batch: &Array4<f32>,
        d_probs: &mut dyn FnMut(&Array2<f32>) -> Array2<f32>,
    ) -> Result<(Array2<f32>, Array4<f32>)>;

    /// Gradient of the pre-softmax logit of `classes[i]` w.r.t. sample `i`'s
    /// input pixels.
    fn logit_input_grad(&self, batch: &Array4<f32>, classes: &[usize]) -> Result<Array4<f32>>;
}

fn check_batch_shape(
    batch: &Array4<f32>,
    expected: (usize, usize, usize),
) -> Result<()> {
    let s = batch.shape();
    if (s[1], s[2], s[3]) != expected {
        return Err(Error::contract(format!(
            "batch shape ({}, {}, {}) does not match model input shape {:?}",
            s[1], s[2], s[3], expected
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct SmallCnnDescriptor {
    kind: String,
    format_version: u32,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    conv_channels: (usize, usize),
    kernel: usize,
    architecture: Vec<String>,
}

/// Reference black box: conv(16, 3x3) -> relu -> maxpool2 ->
/// conv(32, 3x3) -> relu -> maxpool2 -> flatten -> fully connected -> softmax.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    fc: Dense<f32>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
}

const CONV1_CHANNELS: usize = 16;
const CONV2_CHANNELS: usize = 32;
const KERNEL: usize = 3;

struct ForwardState {
    cache1: crate::nn::Conv2dCache<f32>,
    relu1: Array4<f32>,
    pool1: crate::nn::MaxPool2Cache,
    pooled1_dim: (usize, usize, usize, usize),
    cache2: crate::nn::Conv2dCache<f32>,
    relu2: Array4<f32>,
    pool2: crate::nn::MaxPool2Cache,
    flat: Array2<f32>,
    flat_dims: (usize, usize, usize),
    logits: Array2<f32>,
}

impl SmallCnn {
    pub fn new(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = input_shape;
        // two conv(3x3, no padding) + pool rounds must leave a positive map
        let h_out = ((h.saturating_sub(2)) / 2).saturating_sub(2) / 2;
        let w_out = ((w.saturating_sub(2)) / 2).saturating_sub(2) / 2;
        if c == 0 || h_out == 0 || w_out == 0 {
            return Err(Error::contract(format!(
                "input shape {input_shape:?} is too small for the reference CNN"
            )));
        }
        if num_classes < 2 {
            return Err(Error::contract("classifier needs at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv2d::new(c, CONV1_CHANNELS, KERNEL, 0, &mut rng);
        let conv2 = Conv2d::new(CONV1_CHANNELS, CONV2_CHANNELS, KERNEL, 0, &mut rng);
        let fc = Dense::new(CONV2_CHANNELS * h_out * w_out, num_classes, &mut rng);
        Ok(SmallCnn {
            conv1,
            conv2,
            fc,
            input_shape,
            num_classes,
        })
    }

    fn forward_full(&self, x: &Array4<f32>) -> ForwardState {
        let (y1, cache1) = self.conv1.forward(x);
        let relu1 = nn::relu(&y1);
        let (p1, pool1) = MaxPool2.forward(&relu1);
        let pooled1_dim = {
            let s = p1.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (y2, cache2) = self.conv2.forward(&p1);
        let relu2 = nn::relu(&y2);
        let (p2, pool2) = MaxPool2.forward(&relu2);
        let flat_dims = {
            let s = p2.shape();
            (s[1], s[2], s[3])
        };
        let flat = nn::flatten(&p2);
        let logits = self.fc.forward(&flat);
        ForwardState {
            cache1,
            relu1,
            pool1,
            pooled1_dim,
            cache2,
            relu2,
            pool2,
            flat,
            flat_dims,
            logits,
        }
    }

    pub fn predict_logits(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        check_batch_shape(batch, self.input_shape)?;
        Ok(self.forward_full(batch).logits)
    }

    /// Backward from `d_logits` to the input, reusing a forward state.
    /// Weight gradients are skipped: this is the frozen-model path.
    fn input_grad(&self, state: &ForwardState, d_logits: &Array2<f32>, x: &Array4<f32>) -> Array4<f32> {
        let d_flat = d_logits.dot(&self.fc.w);
        let d_p2 = nn::unflatten(&d_flat, state.flat_dims);
        let d_relu2 = MaxPool2.backward(&state.pool2, &d_p2);
        let d_y2 = nn::relu_backward(&state.relu2, &d_relu2);
        let d_p1 = self.conv2.backward_input(&d_y2, state.pooled1_dim);
        let d_relu1 = MaxPool2.backward(&state.pool1, &d_p1);
        let d_y1 = nn::relu_backward(&state.relu1, &d_relu1);
        let s = x.shape();
        self.conv1.backward_input(&d_y1, (s[0], s[1], s[2], s[3]))
    }

    /// SHA-256 over every parameter's little-endian bytes, in a fixed order.
    /// Training the selector must leave this unchanged.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for values in [
            self.conv1.w.as_slice().unwrap(),
            self.conv1.b.as_slice().unwrap(),
            self.conv2.w.as_slice().unwrap(),
            self.conv2.b.as_slice().unwrap(),
            self.fc.w.as_slice().unwrap(),
            self.fc.b.as_slice().unwrap(),
        ] {
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn ensure_input_shape(&self, expected: (usize, usize, usize)) -> Result<()> {
        if self.input_shape != expected {
            return Err(Error::contract(format!(
                "checkpoint input shape {:?} does not match expected {:?}; refusing to reshape",
                self.input_shape, expected
            )));
        }
        Ok(())
    }

    fn descriptor(&self) -> SmallCnnDescriptor {
        SmallCnnDescriptor {
            kind: "small_cnn".into(),
            format_version: 1,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            conv_channels: (CONV1_CHANNELS, CONV2_CHANNELS),
            kernel: KERNEL,
            architecture: vec![
                format!("conv({CONV1_CHANNELS}, {KERNEL}x{KERNEL}, stride 1)"),
                "relu".into(),
                "maxpool(2)".into(),
                format!("conv({CONV2_CHANNELS}, {KERNEL}x{KERNEL}, stride 1)"),
                "relu".into(),
                "maxpool(2)".into(),
                "flatten".into(),
                "dense(num_classes)".into(),
                "softmax".into(),
            ],
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let arrays = vec![
            named("conv1.w", &self.conv1.w.clone().into_dyn()),
            named("conv1.b", &self.conv1.b.clone().into_dyn()),
            named("conv2.w", &self.conv2.w.clone().into_dyn()),
            named("conv2.b", &self.conv2.b.clone().into_dyn()),
            named("fc.w", &self.fc.w.clone().into_dyn()),
            named("fc.b", &self.fc.b.clone().into_dyn()),
        ];
        Checkpoint::new(&self.descriptor(), arrays)?.save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ck = Checkpoint::load(path)?;
        let desc: SmallCnnDescriptor = ck.descriptor(path)?;
        if desc.kind != "small_cnn" || desc.format_version != 1 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "descriptor kind/version {:?}/{} is not small_cnn/1",
                    desc.kind, desc.format_version
                ),
            });
        }
        let mut model = SmallCnn::new(desc.input_shape, desc.num_classes, 0)?;
        model.conv1.w = take4(&mut ck, "conv1.w", path)?;
        model.conv1.b = take1(&mut ck, "conv1.b", path)?;
        model.conv2.w = take4(&mut ck, "conv2.w", path)?;
        model.conv2.b = take1(&mut ck, "conv2.b", path)?;
        model.fc.w = take2(&mut ck, "fc.w", path)?;
        model.fc.b = take1(&mut ck, "fc.b", path)?;
        // shape cross-check against a fresh model of the declared geometry
        let reference = SmallCnn::new(desc.input_shape, desc.num_classes, 0)?;
        for (name, got, want) in [
            ("conv1.w", model.conv1.w.shape(), reference.conv1.w.shape()),
            ("conv2.w", model.conv2.w.shape(), reference.conv2.w.shape()),
            ("fc.w", model.fc.w.shape(), reference.fc.w.shape()),
        ] {
            if got != want {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("array {name} has shape {got:?}, expected {want:?}"),
                });
            }
        }
        Ok(model)
    }
}

fn named(name: &str, a: &ndarray::ArrayD<f32>) -> NamedArray {
    NamedArray {
        name: name.into(),
        dims: a.shape().to_vec(),
        values: a.iter().copied().collect(),
    }
}

fn take4(ck: &mut Checkpoint, name: &str, path: &Path) -> Result<Array4<f32>> {
    let a = ck.take_array(name, path)?;
    let dims: [usize; 4] = a.dims.clone().try_into().map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("array {name} is not 4-d"),
    })?;
    Ok(Array4::from_shape_vec(dims, a.values).expect("length matches dims"))
}

fn take2(ck: &mut Checkpoint, name: &str, path: &Path) -> Result<Array2<f32>> {
    let a = ck.take_array(name, path)?;
    let dims: [usize; 2] = a.dims.clone().try_into().map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("array {name} is not 2-d"),
    })?;
    Ok(Array2::from_shape_vec(dims, a.values).expect("length matches dims"))
}

fn take1(ck: &mut Checkpoint, name: &str, path: &Path) -> Result<Array1<f32>> {
    let a = ck.take_array(name, path)?;
    Ok(Array1::from_vec(a.values))
}

impl Classifier for SmallCnn {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(nn::softmax_rows(&self.predict_logits(batch)?))
    }
}

impl InputGradients for SmallCnn {
    fn predict_with_input_grad(
        &self,
        batch: &Array4<f32>,
        d_probs: &mut dyn FnMut(&Array2<f32>) -> Array2<f32>,
    ) -> Result<(Array2<f32>, Array4<f32>)> {
        check_batch_shape(batch, self.input_shape)?;
        let state = self.forward_full(batch);
        let probs = nn::softmax_rows(&state.logits);
        let dp = d_probs(&probs);
        let d_logits = nn::softmax_backward(&probs, &dp);
        let dx = self.input_grad(&state, &d_logits, batch);
        Ok((probs, dx))
    }

    fn logit_input_grad(&self, batch: &Array4<f32>, classes: &[usize]) -> Result<Array4<f32>> {
        check_batch_shape(batch, self.input_shape)?;
        if classes.len() != batch.shape()[0] {
            return Err(Error::contract(
                "one target class per sample is required for logit gradients",
            ));
        }
        let state = self.forward_full(batch);
        let mut d_logits = Array2::zeros(state.logits.raw_dim());
        for (i, &cls) in classes.iter().enumerate() {
            if cls >= self.num_classes {
                return Err(Error::contract(format!(
                    "class {cls} out of range {}",
                    self.num_classes
                )));
            }
            d_logits[[i, cls]] = 1.0;
        }
        Ok(self.input_grad(&state, &d_logits, batch))
    }
}

/// Training hyperparameters for the reference CNN. The defaults are what
/// every experiment config starts from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        CnnTrainConfig {
            epochs: 5,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnnTrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Train the reference CNN with Adam and cross-entropy. Deterministic for a
/// fixed config.
pub fn train_reference_cnn(
    train: &LabeledDataset,
    config: &CnnTrainConfig,
) -> Result<(SmallCnn, CnnTrainReport)> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::contract("epochs and batch_size must be positive"));
    }
    let mut model = SmallCnn::new(train.image_shape(), train.num_classes(), config.seed)?;
    let mut adam = Adam::<f32>::new(
        config.learning_rate,
        &[
            model.conv1.w.shape(),
            model.conv1.b.shape(),
            model.conv2.w.shape(),
            model.conv2.b.shape(),
            model.fc.w.shape(),
            model.fc.b.shape(),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = train.gather(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let state = model.forward_full(&x);
            let (loss, d_logits) = nn::cross_entropy_with_logits(&state.logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "loss diverged to a non-finite value".into(),
                });
            }
            epoch_loss += f64::from(loss);
            batches += 1;

            // full backward pass with weight gradients
            let (fc_grads, d_flat) = model.fc.backward(&state.flat, &d_logits);
            let d_p2 = nn::unflatten(&d_flat, state.flat_dims);
            let d_relu2 = MaxPool2.backward(&state.pool2, &d_p2);
            let d_y2 = nn::relu_backward(&state.relu2, &d_relu2);
            let (c2_grads, d_p1) = model.conv2.backward(&state.cache2, &d_y2);
            let d_relu1 = MaxPool2.backward(&state.pool1, &d_p1);
            let d_y1 = nn::relu_backward(&state.relu1, &d_relu1);
            let c1_grads = model.conv1.backward_params(&state.cache1, &d_y1);

            adam.step(
                vec![
                    model.conv1.w.view_mut().into_dyn(),
                    model.conv1.b.view_mut().into_dyn(),
                    model.conv2.w.view_mut().into_dyn(),
                    model.conv2.b.view_mut().into_dyn(),
                    model.fc.w.view_mut().into_dyn(),
                    model.fc.b.view_mut().into_dyn(),
                ],
                vec![
                    c1_grads.w.view().into_dyn(),
                    c1_grads.b.view().into_dyn(),
                    c2_grads.w.view().into_dyn(),
                    c2_grads.b.view().into_dyn(),
                    fc_grads.w.view().into_dyn(),
                    fc_grads.b.view().into_dyn(),
                ],
            );
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((model, CnnTrainReport { epoch_losses, steps: step }))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &impl Classifier, ds: &LabeledDataset) -> Result<f64> {
    let probs = predict_dataset(model, ds)?;
    let mut correct = 0usize;
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        if nn::argmax_row(row.as_slice().unwrap()) == ds.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Predict the whole dataset in fixed-size chunks.
pub fn predict_dataset(model: &impl Classifier, ds: &LabeledDataset) -> Result<Array2<f32>> {
    const CHUNK: usize = 512;
    let mut out = Array2::zeros((ds.len(), model.num_classes()));
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let probs = model.predict_proba(&ds.gather(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            out.row_mut(i).assign(&probs.row(row));
        }
    }
    Ok(out)
}
