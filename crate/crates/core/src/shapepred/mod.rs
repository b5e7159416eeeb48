//! Full point-cloud prediction from one RGBD-mask crop, trained by
//! multi-view reprojection self-supervision.

mod checks;
mod data;
mod eval;
mod loss;
mod model;
mod train;

pub use checks::{composite_case, composite_gradcheck, tiny_config};
pub use data::{regime_samples, ObjectRecord, PreparedView, ShapeDataConfig, ShapeDataset, ShapeSample, ViewRegime};
pub use eval::{eval_predictor, eval_shape_iou, mask_iou, ShapeEval};
pub use loss::{shape_loss, subsample, ShapeLoss, ShapeLossWeights, SupervisionView};
pub use model::{ShapeInput, ShapeNetConfig, ShapeNetModel, COND_FEATURES};
pub use train::{train_shape, ShapeEpochLog, ShapeTrainConfig, ShapeTrainLog};
