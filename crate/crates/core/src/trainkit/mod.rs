//! Losses, optimizer, fold/finetune plans, a per-voxel micro model and
//! synthetic data, enough to train and verify end to end on a desk.

pub mod demo;
pub mod loss;
pub mod micro;
pub mod optim;
pub mod plan;
pub mod synth;

pub use demo::{train_demo, DemoConfig, DemoReport, FoldResult, LogRow};
pub use loss::{batch_dice_loss, combined_loss, ds_combined_loss, ds_weights, focal_loss, LossConfig, LossTerms};
pub use micro::{MicroConfig, MicroPredictor};
pub use optim::{Grads, SfAdamW, SfAdamWConfig};
pub use plan::{finetune_plan, kfold_split, FinetuneVariant, FoldSplit, Selector};
pub use synth::{synth_case, synth_dataset, TumorSpec};
