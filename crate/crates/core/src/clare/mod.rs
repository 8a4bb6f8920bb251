//! Adapter side branches, autoencoder routing and z-score driven expansion.
//!
//! Each expandable layer owns a [`LayerBank`]: adapters that add a low-rank
//! correction to the frozen feedforward output, one autoencoder
//! discriminator per learned stage, and a map linking every discriminator to
//! an adapter. At inference the discriminator that reconstructs the layer
//! input best selects the adapter. When a new task arrives, normalized
//! reconstruction errors decide per layer whether a new adapter is needed or
//! whether the new discriminator can reuse an existing one.

mod adapter;
mod bank;
mod discriminator;
mod expansion;
mod stage;

pub use adapter::Adapter;
pub use bank::{argmin_oldest, LayerBank, Route};
pub use discriminator::{Discriminator, ErrorStats};
pub use expansion::{decide_expansion, finalize_stats, link_auxiliary, zscore, Decision};
pub use stage::{
    apply_expansion, collect_layer_features, learn_stage, plan_expansion, train_discriminators,
    train_new_adapters, stage_routes, ExpansionPlan, LayerPlan, LayerReport, StageConfig, StageReport,
};
