//! Learned encoders that embed behavioral metrics, trained with analytic
//! gradients and plain SGD.

pub mod buffer;
pub mod encoder;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod train;

pub use buffer::{collect_rollouts, ReplayBuffer, Rollout, Transition};
pub use encoder::{Encoder, Normalization, Trace};
pub use gradcheck::{check_gradients, GradCheckReport, LossInputs, LossKind};
pub use losses::{metric_loss, rp_loss, zp_loss, Batch, Grads, LossConfig, LossValue, MetricVariant, OuterLoss, PairPlan};
pub use models::{GaussianPrediction, LatentModels};
pub use train::{train_step, write_loss_csv, Checkpoint, LossRecord, NamedArray, OptimConfig, TrainState};

/// `c_R / (1 - c_T) * (R_max - R_min)`: the largest value a behavioral metric
/// with these coefficients can take on rewards in `[r_min, r_max]`.
pub fn metric_bound(c_r: f64, c_t: f64, r_min: f64, r_max: f64) -> f64 {
    c_r / (1.0 - c_t) * (r_max - r_min)
}
