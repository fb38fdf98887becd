//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store, layers with optional low-rank adapters, normalisation, AdamW and a
//! forward-pass cost tracer.

mod cost;
mod layers;
mod optim;
mod store;

pub use cost::{trace_costs, CostItem, LayerKind};
pub(crate) use cost::record;
pub(crate) use layers::fold_adapter;
pub use layers::{sigmoid, softmax_last, BatchNorm2d, Conv2d, GroupNorm, Linear, LoraConfig};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use store::{Builder, Init, ParamKind, ParamStore};
