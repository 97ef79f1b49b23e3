//! Instance-wise causal patch selection for explaining image classifiers.
//!
//! Given a frozen classifier and an image, this crate learns which `k`
//! image patches have the greatest causal effect on the classifier's
//! output: a selector network is trained so that zeroing the selected
//! patches destroys the prediction, which (under a local-influence
//! assumption) maximizes the conditional mutual information between the
//! selection and the output. Evaluation ships with the crate: post-hoc
//! accuracy, average causal effect, an exact enumeration oracle on small
//! discrete joints, and random / gradient-saliency baselines.

extern crate blas_src;

pub mod baselines;
pub mod blackbox;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod overlay;
pub mod nn;
pub mod patching;
pub mod run;
pub mod sampler;
pub mod selector;
pub mod toy;

pub use blackbox::{Classifier, InputGradients, SmallCnn};
pub use data::{ImageSample, LabeledDataset};
pub use error::{Error, Result};
pub use patching::{PatchGrid, SubsetMask};
pub use selector::SelectorModel;
