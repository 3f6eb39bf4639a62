//! Noise schedules, the ε-predictor, sampling and training.

pub mod checkpoint;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use net::{DenoiserNet, EpsModel, NetConfig, Prediction, Taps};
pub use sampler::{
    forward_sample, gaussian, noise_to, predict_mean, predict_mean_clipped, reverse_from_eps, reverse_step, sample,
    tweedie_x0, tweedie_x0_unclamped, VarianceMode,
};
pub use schedule::{NoiseSchedule, RespacedSchedule, ScheduleKind, StepCoeffs};
pub use train::{
    draw_training_noise, snr_weights, train, train_step, train_step_with_noise, weighted_step, TrainConfig, TrainableEps,
};
