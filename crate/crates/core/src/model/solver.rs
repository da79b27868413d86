//! Inner-width search that matches a local relation design to a FLOP budget.

use super::plan::{stage_plan, MapShape};
use super::spec::NetSpec;
use crate::cost::sum_flops;
use crate::error::{Error, Result};

pub const MAX_WIDTH: usize = 4096;
/// Relative error beyond which the best candidate is rejected.
pub const SOLVER_TOLERANCE: f64 = 0.5;

/// Width in `step, 2·step, … ≤ 4096` minimizing `|flops(w) − target|`; ties go to the
/// smaller width. Candidates for which `flops` fails are skipped.
pub fn solve_inner_width(target: u64, step: usize, tolerance: f64, flops: impl Fn(usize) -> Result<u64>) -> Result<usize> {
    let step = step.max(1);
    let mut best: Option<(u64, usize)> = None;
    for w in (step..=MAX_WIDTH).step_by(step) {
        let Ok(f) = flops(w) else { continue };
        let diff = f.abs_diff(target);
        if best.is_none_or(|(d, _)| diff < d) {
            best = Some((diff, w));
        }
    }
    match best {
        Some((diff, w)) if diff as f64 <= tolerance * target as f64 => Ok(w),
        Some((diff, w)) => Err(Error::Solver(format!(
            "closest width {w} misses the target {target} by {diff} FLOPs (more than {:.0}%)",
            tolerance * 100.0
        ))),
        None => Err(Error::Solver("no feasible width".into())),
    }
}

/// Conv-stage FLOPs at the ResNet default width, for the stage fed by `input`.
pub fn baseline_stage_flops(spec: &NetSpec, stage: usize, input: MapShape) -> Result<u64> {
    let kind = spec.block.conv_counterpart();
    let width = kind.baseline_inner(spec.stage_out_channels[stage]);
    Ok(stage_plan(spec, stage, kind, width, input)?.iter().map(|b| sum_flops(b.branch.iter().chain(&b.shortcut))).sum())
}

/// Local relation stage FLOPs at inner width `width`.
pub fn lr_stage_flops(spec: &NetSpec, stage: usize, width: usize, input: MapShape) -> Result<u64> {
    Ok(stage_plan(spec, stage, spec.block, width, input)?.iter().map(|b| sum_flops(b.branch.iter().chain(&b.shortcut))).sum())
}

/// Inner width for a whole stage, matched on the stage's total FLOPs against the conv
/// counterpart. Widths are multiples of the channel-sharing factor `m`.
pub fn solve_stage_width(spec: &NetSpec, stage: usize, input: MapShape) -> Result<usize> {
    let target = baseline_stage_flops(spec, stage, input)?;
    solve_inner_width(target, spec.lr.channels_per_group, SOLVER_TOLERANCE, |w| lr_stage_flops(spec, stage, w, input))
}
