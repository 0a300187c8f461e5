//! Toy-scale training on synthetic bright-rectangle images, to show the
//! detector actually learns.

mod data;
mod loss;
mod train;

pub use data::{gen_dataset, gen_dataset_with, BlobSpec, ToySample, BG_MAX, BLOB_MARGIN, MIN_SIDE};
pub use loss::{assign, toy_loss, Assignment, NEG_WEIGHT};
pub use train::{
    blob_recall, calibrate_bn, loss_and_grads, run_toy, train, write_loss_csv, ToyRun, TrainConfig,
    CALIBRATION_BATCHES, HELD_OUT,
};
