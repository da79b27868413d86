//! Network specification, planning, width solving and execution.

pub mod network;
pub mod plan;
pub mod solver;
pub mod spec;

pub use network::{BatchGrads, Block, Layer, NamedLayer, NetCache, NetworkInstance, ParamMut, ParamRef};
pub use plan::{block_plan, plan_network, stage_plan, stem_layers, BlockPlan, LayerKind, LayerPlan, MapShape, NetworkPlan};
pub use solver::{baseline_stage_flops, lr_stage_flops, solve_inner_width, solve_stage_width};
pub use spec::{BlockKind, BlockSpec, NetSpec, Preset, StemKind, STAGE_NAMES};
