//! Statistical U-Net: layers that run on canonical-form grids, mixing into
//! per-frame features, and the frame-by-frame counterpart.

mod checkpoint;
mod engine;
mod flops;
mod gradcheck;
mod graph;
mod ops;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use engine::{
    backward, det_input, forward_det, forward_slice, forward_stat, frame_stack, grid_slice, mixed_grid_slice, stat_input,
    BranchInput, ForwardOptions, Logits, SliceInput, SliceOutput, Tape,
};
pub use flops::{flop_count, FlopReport, LayerCost};
pub use gradcheck::{audit, gradient_check, AuditEntry, GradCheckReport};
pub use graph::{
    Branch, CenterBlock, DownBlock, FinalEvaluator, GraphConfig, LayerKind, LayerSpec, MixPoint, Mode, NetworkGraph,
    ParamSlot, UpBlock,
};
pub use ops::{fold, PlaneKind, PlaneTensor};

#[cfg(test)]
mod tests;
