//! Convolution filters learned as the means of a patch-mixture Gaussian
//! image model.
//!
//! A convolution layer's feature map, plus a bias of `-0.5 |filter|²`, is the
//! unnormalized log joint posterior over which patch generated an image and
//! where it sits. The filters are trained with batch EM: the E-step is a
//! cross-correlation followed by a per-image softmax, the M-step a
//! posterior-weighted average of image windows. Learned features are pooled
//! with a per-channel log-sum-exp and evaluated with a softmax regression.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod em;
pub mod error;
pub mod head;
pub mod tensor;
pub mod viz;

pub use dataset::{load_idx, load_stl10_binary, make_batches, BatchPlan, LabeledDataset};
pub use em::{
    e_step, init_model, m_step_batch, m_step_finalize, marginal_loglik, train, train_from,
    EpochReport, InitStrategy, MStepAccumulator, PatchMixtureModel, PosteriorMap, TrainConfig,
    TrainOutcome,
};
pub use error::{Error, Result};
pub use head::{
    accuracy, fit_softmax, pool, predict, PooledFeatures, SoftmaxClassifier, SoftmaxHyper,
};
pub use tensor::{logsumexp, valid_xcorr, weighted_patch_sum, Tensor};
