//! Original and pruned U-Net layouts, shape-only accounting, materialized
//! models and teacher-to-student weight transfer.

mod model;
mod plan;
mod spec;
mod transfer;

pub use model::{
    export_attention_maps, materialize, materialize_with, timestep_embedding, AttentionMap, AttentionTap,
    ForwardOutput, InitOptions, UNet,
};
pub use plan::{layer_plan, Layer, LayerKind, MacConvention, ParamEntry, ParamRole, PhantomModel};
pub use spec::{
    original_spec, student_spec, student_spec_with, BlockKind, BlockOrigin, BlockSpec, DropPosition, PruneOptions,
    Scale, UNetSpec,
};
pub use transfer::{plan_transfer, search_drop_positions, source_name, transfer_weights, DropSearchResult, TransferReport};
