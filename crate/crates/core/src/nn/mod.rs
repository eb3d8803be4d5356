//! Layers, loss and optimizer for the reference models.

mod layers;
mod loss;
mod model;
mod norm;
mod optim;

pub use layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, BoundsParam, FrozenBoundGrad,
    LayerQuant, ParamState, WeightCache, WeightGrads, WeightLayer, WeightShape,
};
pub use loss::cross_entropy;
pub use model::{
    Layer, LayerCache, LayerFreezeStats, LayerGrads, LayerSpec, LossKind, Mode, Model, ModelGrads,
    ModelSpec,
};
pub use norm::{BatchNorm, BnCache, BnGrads, BN_EPS, BN_RUNNING_MOMENTUM};
pub use optim::{sgd_step, sgd_step_bounds, SgdConfig};
