//! Minimal deterministic training core: layers, loss, gradients, optimizers
//! and learning-rate schedules, sized for MLPs and small conv nets.

mod layer;
mod loss;
mod network;
mod optim;
mod schedule;
mod sparse;

pub use layer::{ConvGeometry, Layer, LayerSpec, ParamGrad};
pub use loss::{cross_entropy_softmax, softmax};
pub use network::{mlp, Architecture, Gradients, Network};
pub use optim::{Optimizer, OptimizerConfig};
pub use schedule::{LrSchedule, ScheduleConfig, StepUnit};
pub use sparse::{SparseWeight, SPARSE_MAX_DENSITY};
