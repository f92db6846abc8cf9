//! Network definitions: the conditional prior network (CPN) and the depth
//! completion network (DCN), their layer plans, and checkpoints.

mod checkpoint;
mod config;
mod cpn;
mod dcn;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use cpn::{build_cpn, cpn_score, default_bottleneck, CpnConfig, CpnModel};
pub use dcn::{build_dcn, DcnConfig, DcnModel};
pub use layers::{
    count_parameters, BlockKind, Bound, ConvLayerSpec, EncoderSpec, LayerKind, ParamStore,
    ParameterCount, BASE_CHANNELS,
};
